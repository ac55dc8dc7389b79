#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

namespace eemkit {

// FNV-1a 64-bit. Used for config digests, weight digests and reproducibility
// checks; not a cryptographic hash.
class Fnv1a64 {
 public:
  Fnv1a64& update(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= static_cast<std::uint64_t>(bytes[i]);
      state_ *= 1099511628211ULL;
    }
    return *this;
  }

  Fnv1a64& update(std::string_view text) { return update(text.data(), text.size()); }

  template <typename T>
  Fnv1a64& update_value(const T& value) {
    static_assert(std::is_trivially_copyable_v<T>);
    return update(&value, sizeof(T));
  }

  std::uint64_t value() const { return state_; }

  std::string hex() const {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    std::uint64_t v = state_;
    for (int i = 15; i >= 0; --i) {
      out[static_cast<std::size_t>(i)] = digits[v & 0xF];
      v >>= 4;
    }
    return out;
  }

 private:
  std::uint64_t state_ = 1469598103934665603ULL;
};

inline std::string digest_hex(std::string_view text) { return Fnv1a64().update(text).hex(); }

// splitmix64 step; used to derive independent child seeds from one run seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace eemkit
