#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ewcdr::npz {

// One array from a .npy member: numpy dtype descriptor (e.g. "|u1", "<f4"),
// shape, and the raw little-endian payload in C order.
struct Array {
  std::string dtype;
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> bytes;

  std::size_t element_count() const;
  std::size_t item_size() const;
  bool is_unsigned_byte() const { return dtype == "|u1" || dtype == "<u1"; }
  bool is_float() const;
  bool is_integer() const;
  // Converts any supported numeric dtype to double.
  std::vector<double> to_double() const;
};

// Parses a single .npy buffer.
Array parse_npy(const std::vector<std::uint8_t>& buffer);
std::vector<std::uint8_t> encode_npy(const Array& array);

// Reads every .npy member of a zip archive (stored or deflated, zip64 aware).
// Keys have the ".npy" suffix stripped, as numpy.load does.
std::map<std::string, Array> read_npz(const std::filesystem::path& path);

// Writes a numpy-compatible archive; members are deflated when compress is set.
void write_npz(const std::filesystem::path& path, const std::map<std::string, Array>& arrays, bool compress);

}  // namespace ewcdr::npz
