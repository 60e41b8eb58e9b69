#pragma once

// Shared utilities: error type, mathematical constants, precondition checks,
// and a small content-hashing helper used for reproducibility manifests.

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tiltlab {

inline constexpr const char* kVersion = "0.1.0";

inline constexpr double kPi = 3.141592653589793238462643383279502884;
// Volume of the unit round 3-sphere.
inline constexpr double kS3Volume = 2.0 * kPi * kPi;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class... Parts>
[[noreturn]] inline void fail(const Parts&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  throw Error(os.str());
}

template <class... Parts>
inline void require(bool ok, const Parts&... parts) {
  if (!ok) fail(parts...);
}

// FNV-1a 64-bit streaming hash; stable across platforms, used to fingerprint
// output files and configuration blobs in run manifests.
class Fnv1a64 {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= static_cast<std::uint64_t>(p[i]);
      state_ *= 1099511628211ull;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 1469598103934665603ull;
};

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return out;
}

inline std::uint64_t hash_bytes(std::string_view s) {
  Fnv1a64 h;
  h.update(s);
  return h.digest();
}

}  // namespace tiltlab
