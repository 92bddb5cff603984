#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

namespace sonic::detail {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

inline void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_f32(std::ostream& out, float v) { out.write(reinterpret_cast<const char*>(&v), 4); }

inline bool get_u32(std::istream& in, std::uint32_t& v) {
  return static_cast<bool>(in.read(reinterpret_cast<char*>(&v), 4));
}
inline bool get_u64(std::istream& in, std::uint64_t& v) {
  return static_cast<bool>(in.read(reinterpret_cast<char*>(&v), 8));
}

}  // namespace sonic::detail
