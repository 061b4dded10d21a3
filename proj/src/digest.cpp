#include "promptlab/digest.hpp"

#include <charconv>
#include <cstring>

#include "promptlab/errors.hpp"

namespace promptlab {

void Digest::update(const void* data, std::size_t len) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    state_ ^= bytes[i];
    state_ *= 0x100000001b3ULL;
  }
}

void Digest::update_string(std::string_view text) {
  update(text.data(), text.size());
  // Length marker prevents concatenation ambiguity between fields.
  update_u64(text.size());
}

void Digest::update_u64(std::uint64_t value) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
  update(bytes, 8);
}

void Digest::update_double(double value) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(value));
  std::memcpy(&bits, &value, sizeof(bits));
  update_u64(bits);
}

void Digest::update_doubles(std::span<const double> values) {
  for (double v : values) update_double(v);
}

std::string Digest::hex() const {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  std::uint64_t v = state_;
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

std::string format_double(double value) {
  char buffer[64];
  auto result = std::to_chars(buffer, buffer + sizeof(buffer), value);
  return std::string(buffer, result.ptr);
}

double parse_double(std::string_view text) {
  double value = 0.0;
  auto result = std::from_chars(text.data(), text.data() + text.size(), value);
  if (result.ec != std::errc() || result.ptr != text.data() + text.size()) {
    throw DataError("malformed number: '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace promptlab
