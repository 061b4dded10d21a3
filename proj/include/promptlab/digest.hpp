#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace promptlab {

// Incremental FNV-1a (64 bit). Used for weight digests, task digests and
// config digests. Doubles are hashed by bit pattern, so a digest match
// means bit-identical values.
class Digest {
 public:
  void update(const void* data, std::size_t len);
  void update_string(std::string_view text);
  void update_u64(std::uint64_t value);
  void update_double(double value);
  void update_doubles(std::span<const double> values);

  std::uint64_t value() const { return state_; }
  // 16 lowercase hex characters.
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

// Shortest round-trip decimal form of a double (std::to_chars), used by
// every serialization path so text output is locale-free and exact.
std::string format_double(double value);

// Inverse of format_double; throws DataError on malformed input.
double parse_double(std::string_view text);

}  // namespace promptlab
