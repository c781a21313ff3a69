#include "mh3d/camera.hpp"

#include <algorithm>
#include <cmath>

namespace mh3d {

double simulate_ldr(double hdr, const CameraParams& p, double noise) {
  require(std::isfinite(hdr) && hdr >= 0, "simulate_ldr: hdr must be finite and >= 0, got ", hdr);
  const double ideal = p.scale() * hdr + p.i0 + noise;
  return std::clamp(ideal, 0.0, p.i_max);
}

double overflow(double hdr, const CameraParams& p, double noise) {
  const double ideal = p.scale() * hdr + p.i0 + noise;
  return std::max(0.0, ideal - p.i_max);
}

double ldr_to_hdr_ideal(double ldr, const CameraParams& p, double overflow_value, double noise) {
  return p.inv_scale() * (ldr - p.i0 + overflow_value) - p.inv_scale() * noise;
}

std::pair<double, double> hdr_to_ldr_terms(double hdr, const CameraParams& p, double noise) {
  const double d = p.scale() * hdr;
  const double b = p.i0 + noise - overflow(hdr, p, noise);
  return {d, b};
}

}  // namespace mh3d
