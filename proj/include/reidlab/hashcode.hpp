#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace reidlab {

inline bool valid_code_length(int n) {
  return n == 64 || n == 128 || n == 256;
}

// Binary identity code. Bit k maps to hex nibble k/4, most significant bit
// first, so a 128-bit code prints as exactly 32 lowercase hex characters.
struct HashCode {
  std::vector<uint8_t> bits;  // each 0 or 1

  HashCode() = default;
  explicit HashCode(int length) : bits(length, 0) {
    if (!valid_code_length(length))
      throw std::invalid_argument("HashCode: length must be 64, 128 or 256");
  }

  int length() const { return static_cast<int>(bits.size()); }

  bool operator==(const HashCode& o) const { return bits == o.bits; }

  std::string to_hex() const {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(bits.size() / 4);
    for (size_t i = 0; i + 3 < bits.size(); i += 4) {
      int nib = (bits[i] << 3) | (bits[i + 1] << 2) | (bits[i + 2] << 1) |
                bits[i + 3];
      s.push_back(digits[nib]);
    }
    return s;
  }

  static HashCode from_hex(const std::string& s) {
    HashCode c;
    c.bits.reserve(s.size() * 4);
    for (char ch : s) {
      int nib;
      if (ch >= '0' && ch <= '9') nib = ch - '0';
      else if (ch >= 'a' && ch <= 'f') nib = ch - 'a' + 10;
      else if (ch >= 'A' && ch <= 'F') nib = ch - 'A' + 10;
      else throw std::invalid_argument("HashCode: bad hex digit");
      c.bits.push_back(static_cast<uint8_t>((nib >> 3) & 1));
      c.bits.push_back(static_cast<uint8_t>((nib >> 2) & 1));
      c.bits.push_back(static_cast<uint8_t>((nib >> 1) & 1));
      c.bits.push_back(static_cast<uint8_t>(nib & 1));
    }
    if (!valid_code_length(c.length()))
      throw std::invalid_argument("HashCode: length must be 64, 128 or 256");
    return c;
  }
};

inline int hamming(const HashCode& a, const HashCode& b) {
  if (a.length() != b.length())
    throw std::invalid_argument("hamming: length mismatch");
  int d = 0;
  for (size_t i = 0; i < a.bits.size(); ++i) d += a.bits[i] != b.bits[i];
  return d;
}

}  // namespace reidlab
