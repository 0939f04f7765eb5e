#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace refusal {

// Base error for everything raised by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes, bad ranks, out-of-range indices.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf where a finite value is required.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Malformed config file or invalid option value.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// File read/write failure; message carries the path.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// A pipeline stage was invoked before the artifacts it needs exist.
struct PrereqError : Error {
  explicit PrereqError(const std::string& msg) : Error(msg) {}
};

namespace detail {
inline void format_parts(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_parts(std::ostringstream& oss, const T& head, const Rest&... rest) {
  oss << head;
  format_parts(oss, rest...);
}
}  // namespace detail

template <typename... Parts>
std::string format_msg(const Parts&... parts) {
  std::ostringstream oss;
  detail::format_parts(oss, parts...);
  return oss.str();
}

template <typename Err = Error, typename... Parts>
void require(bool cond, const Parts&... parts) {
  if (!cond) throw Err(format_msg(parts...));
}

}  // namespace refusal
