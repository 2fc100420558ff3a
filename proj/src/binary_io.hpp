#pragma once

// Little-endian primitives shared by the dataset, augmented-set and checkpoint formats.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

namespace tlab::binio {

void write_magic(std::ostream& out, std::string_view magic);
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f32(std::ostream& out, float v);
void write_f64(std::ostream& out, double v);

/// Throws FormatError(BadMagic) when the next four bytes differ from `magic`.
void expect_magic(std::istream& in, std::string_view magic, std::string_view what);
std::uint32_t read_u32(std::istream& in, std::string_view what);
std::uint64_t read_u64(std::istream& in, std::string_view what);
float read_f32(std::istream& in, std::string_view what);
double read_f64(std::istream& in, std::string_view what);

/// Bytes left between the current read position and end of stream.
std::uint64_t remaining(std::istream& in);

std::ofstream open_for_write(const std::filesystem::path& path);
std::ifstream open_for_read(const std::filesystem::path& path);

}  // namespace tlab::binio
