#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mh3d/error.hpp"

namespace mh3d {

// Physical LDR image formation constants. Pixel units are normalized so the
// saturation ceiling defaults to 1.0; delta_t/gain is the only scale that
// matters, so gain defaults to 1 and the exposure ladder carries the sweep.
struct CameraParams {
  double delta_t = 1.0;      // exposure time, seconds
  double gain = 1.0;         // sensor gain
  double i0 = 0.0;           // constant offset current, normalized pixel units
  double i_max = 1.0;        // saturation ceiling
  double noise_sigma = 0.0;  // std of additive sensor noise
  uint64_t rng_seed = 0;

  void validate() const {
    require(delta_t > 0, "CameraParams: delta_t must be > 0, got ", delta_t);
    require(gain > 0, "CameraParams: gain must be > 0, got ", gain);
    require(i0 >= 0, "CameraParams: i0 must be >= 0, got ", i0);
    require(i_max > i0, "CameraParams: i_max (", i_max, ") must exceed i0 (", i0, ")");
    require(noise_sigma >= 0, "CameraParams: noise_sigma must be >= 0, got ", noise_sigma);
  }

  double scale() const { return delta_t / gain; }         // forward brightness scale
  double inv_scale() const { return gain / delta_t; }     // amplification back to HDR
};

struct ExposureLadder {
  std::vector<double> times{0.125, 0.25, 0.5, 1.0, 2.0};

  void validate() const {
    require(!times.empty(), "ExposureLadder: empty");
    for (size_t i = 0; i < times.size(); ++i) {
      require(times[i] > 0, "ExposureLadder: times must be positive");
      if (i) require(times[i] > times[i - 1], "ExposureLadder: times must be strictly increasing");
    }
  }
};

// LDR measurement of an HDR pixel: min(dt/g * hdr + i0 + noise, i_max),
// clamped below at zero. The saturated branch returns exactly i_max.
double simulate_ldr(double hdr, const CameraParams& p, double noise = 0.0);

// Brightness lost to saturation; exactly zero on unsaturated pixels.
double overflow(double hdr, const CameraParams& p, double noise = 0.0);

// Exact algebraic inverse of simulate_ldr given the true noise and overflow.
double ldr_to_hdr_ideal(double ldr, const CameraParams& p, double overflow_value = 0.0,
                        double noise = 0.0);

// (D, B) split of the forward model: D scales HDR brightness into LDR range,
// B collects offset, noise and the saturation deficit. D + B reproduces
// simulate_ldr on its natural domain.
std::pair<double, double> hdr_to_ldr_terms(double hdr, const CameraParams& p, double noise = 0.0);

}  // namespace mh3d
