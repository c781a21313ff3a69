#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace mh3d {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  format_into(os, rest...);
}
}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  throw Error(os.str());
}

template <typename... Args>
void require(bool cond, const Args&... args) {
  if (!cond) fail(args...);
}

}  // namespace mh3d
