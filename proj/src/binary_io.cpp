#include "binary_io.hpp"

#include <bit>
#include <fstream>
#include <istream>
#include <ostream>

#include "transferlab/errors.hpp"

namespace tlab::binio {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xFF));
    }
    return out;
  } else {
    return v;
  }
}

template <typename U>
void put(std::ostream& out, U v) {
  const U le = to_little(v);
  out.write(reinterpret_cast<const char*>(&le), sizeof(U));
  if (!out) throw FormatError(FormatError::Kind::Io, "write failed");
}

template <typename U>
U get(std::istream& in, std::string_view what) {
  U raw = 0;
  in.read(reinterpret_cast<char*>(&raw), sizeof(U));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(U))) {
    throw FormatError(FormatError::Kind::Truncated,
                      "truncated file while reading " + std::string(what));
  }
  return to_little(raw);
}

}  // namespace

void write_magic(std::ostream& out, std::string_view magic) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!out) throw FormatError(FormatError::Kind::Io, "write failed");
}

void write_u32(std::ostream& out, std::uint32_t v) { put(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { put(out, v); }
void write_f32(std::ostream& out, float v) { put(out, std::bit_cast<std::uint32_t>(v)); }
void write_f64(std::ostream& out, double v) { put(out, std::bit_cast<std::uint64_t>(v)); }

void expect_magic(std::istream& in, std::string_view magic, std::string_view what) {
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (in.gcount() != static_cast<std::streamsize>(magic.size())) {
    throw FormatError(FormatError::Kind::Truncated, "truncated " + std::string(what) + " header");
  }
  if (got != magic) {
    throw FormatError(FormatError::Kind::BadMagic, "bad magic in " + std::string(what) +
                                                       ": expected '" + std::string(magic) + "'");
  }
}

std::uint32_t read_u32(std::istream& in, std::string_view what) { return get<std::uint32_t>(in, what); }
std::uint64_t read_u64(std::istream& in, std::string_view what) { return get<std::uint64_t>(in, what); }
float read_f32(std::istream& in, std::string_view what) {
  return std::bit_cast<float>(get<std::uint32_t>(in, what));
}
double read_f64(std::istream& in, std::string_view what) {
  return std::bit_cast<double>(get<std::uint64_t>(in, what));
}

std::uint64_t remaining(std::istream& in) {
  const auto here = in.tellg();
  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  in.seekg(here);
  if (here < 0 || end < here) return 0;
  return static_cast<std::uint64_t>(end - here);
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot open for writing: " + path.string());
  return out;
}

std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::Io, "cannot open for reading: " + path.string());
  return in;
}

}  // namespace tlab::binio
