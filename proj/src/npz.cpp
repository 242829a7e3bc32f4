#include "ewcdr/npz.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ewcdr/errors.hpp"

namespace ewcdr::npz {

namespace {

std::uint16_t read_u16(const std::vector<std::uint8_t>& b, std::size_t off) {
  if (off + 2 > b.size()) throw FormatError("unexpected end of archive", off);
  return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t off) {
  if (off + 4 > b.size()) throw FormatError("unexpected end of archive", off);
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) | (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

std::uint64_t read_u64(const std::vector<std::uint8_t>& b, std::size_t off) {
  return static_cast<std::uint64_t>(read_u32(b, off)) | (static_cast<std::uint64_t>(read_u32(b, off + 4)) << 32);
}

void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::vector<std::uint8_t> inflate_raw(const std::uint8_t* data, std::size_t size, std::size_t expected) {
  std::vector<std::uint8_t> out(expected);
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw FormatError("zlib init failed", 0);
  zs.next_in = const_cast<Bytef*>(data);
  zs.avail_in = static_cast<uInt>(size);
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || zs.total_out != expected) throw FormatError("corrupt deflate stream", 0);
  return out;
}

std::vector<std::uint8_t> deflate_raw(const std::vector<std::uint8_t>& in) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, -MAX_WBITS, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw Error("zlib deflate init failed");
  }
  std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(in.size())));
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  deflate(&zs, Z_FINISH);
  out.resize(zs.total_out);
  deflateEnd(&zs);
  return out;
}

std::vector<std::size_t> parse_shape(const std::string& header) {
  const auto key = header.find("'shape'");
  if (key == std::string::npos) throw FormatError("npy header without shape", 0);
  const auto open = header.find('(', key);
  const auto close = header.find(')', open);
  if (open == std::string::npos || close == std::string::npos) throw FormatError("malformed npy shape", 0);
  std::vector<std::size_t> shape;
  std::string num;
  for (std::size_t i = open + 1; i <= close; ++i) {
    const char c = header[i];
    if (c >= '0' && c <= '9') {
      num += c;
    } else if (!num.empty()) {
      shape.push_back(std::stoull(num));
      num.clear();
    }
  }
  return shape;
}

std::string parse_quoted_value(const std::string& header, const std::string& key) {
  const auto k = header.find("'" + key + "'");
  if (k == std::string::npos) throw FormatError("npy header without " + key, 0);
  const auto q1 = header.find('\'', header.find(':', k));
  const auto q2 = header.find('\'', q1 + 1);
  return header.substr(q1 + 1, q2 - q1 - 1);
}

}  // namespace

std::size_t Array::element_count() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::size_t Array::item_size() const {
  if (dtype.size() < 3) throw TypeError("unsupported dtype " + dtype);
  return static_cast<std::size_t>(std::stoul(dtype.substr(2)));
}

bool Array::is_float() const { return dtype == "<f4" || dtype == "<f8"; }

bool Array::is_integer() const {
  static const char* kInts[] = {"|u1", "<u1", "|i1", "<i1", "<u2", "<i2", "<u4", "<i4", "<u8", "<i8", "|b1"};
  return std::any_of(std::begin(kInts), std::end(kInts), [&](const char* d) { return dtype == d; });
}

std::vector<double> Array::to_double() const {
  const std::size_t n = element_count();
  std::vector<double> out(n);
  const std::uint8_t* p = bytes.data();
  auto load = [&](auto tag) {
    using T = decltype(tag);
    for (std::size_t i = 0; i < n; ++i) {
      T v;
      std::memcpy(&v, p + i * sizeof(T), sizeof(T));
      out[i] = static_cast<double>(v);
    }
  };
  const char kind = dtype.size() >= 2 ? dtype[1] : '?';
  const std::size_t sz = item_size();
  if (kind == 'f' && sz == 4) load(float{});
  else if (kind == 'f' && sz == 8) load(double{});
  else if ((kind == 'u' || kind == 'b') && sz == 1) load(std::uint8_t{});
  else if (kind == 'i' && sz == 1) load(std::int8_t{});
  else if (kind == 'u' && sz == 2) load(std::uint16_t{});
  else if (kind == 'i' && sz == 2) load(std::int16_t{});
  else if (kind == 'u' && sz == 4) load(std::uint32_t{});
  else if (kind == 'i' && sz == 4) load(std::int32_t{});
  else if (kind == 'u' && sz == 8) load(std::uint64_t{});
  else if (kind == 'i' && sz == 8) load(std::int64_t{});
  else throw TypeError("unsupported dtype " + dtype);
  return out;
}

Array parse_npy(const std::vector<std::uint8_t>& buffer) {
  static const std::uint8_t kMagic[] = {0x93, 'N', 'U', 'M', 'P', 'Y'};
  if (buffer.size() < 10 || !std::equal(std::begin(kMagic), std::end(kMagic), buffer.begin())) {
    throw FormatError("missing npy magic", 0);
  }
  const std::uint8_t major = buffer[6];
  std::size_t header_len = 0;
  std::size_t header_start = 0;
  if (major == 1) {
    header_len = read_u16(buffer, 8);
    header_start = 10;
  } else {
    header_len = read_u32(buffer, 8);
    header_start = 12;
  }
  if (header_start + header_len > buffer.size()) throw FormatError("truncated npy header", header_start);
  const std::string header(buffer.begin() + static_cast<std::ptrdiff_t>(header_start),
                           buffer.begin() + static_cast<std::ptrdiff_t>(header_start + header_len));
  if (header.find("'fortran_order': True") != std::string::npos) throw TypeError("fortran-ordered arrays are not supported");
  Array a;
  a.dtype = parse_quoted_value(header, "descr");
  a.shape = parse_shape(header);
  const std::size_t payload = a.element_count() * a.item_size();
  const std::size_t data_start = header_start + header_len;
  if (data_start + payload > buffer.size()) throw FormatError("truncated npy payload", data_start);
  a.bytes.assign(buffer.begin() + static_cast<std::ptrdiff_t>(data_start),
                 buffer.begin() + static_cast<std::ptrdiff_t>(data_start + payload));
  return a;
}

std::vector<std::uint8_t> encode_npy(const Array& array) {
  std::string shape = "(";
  for (std::size_t i = 0; i < array.shape.size(); ++i) shape += std::to_string(array.shape[i]) + ", ";
  if (array.shape.size() > 1) shape.resize(shape.size() - 2);
  else if (array.shape.size() == 1) shape.resize(shape.size() - 1);
  shape += ")";
  std::string header = "{'descr': '" + array.dtype + "', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header += '\n';
  std::vector<std::uint8_t> out = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
  put_u16(out, static_cast<std::uint16_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), array.bytes.begin(), array.bytes.end());
  return out;
}

std::map<std::string, Array> read_npz(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (b.size() < 22) throw FormatError("file too small to be a zip archive", 0);

  // End of central directory: scan back over a possible comment.
  std::size_t eocd = std::string::npos;
  for (std::size_t i = b.size() - 22 + 1; i-- > 0;) {
    if (read_u32(b, i) == 0x06054b50) {
      eocd = i;
      break;
    }
    if (b.size() - i > 22 + 65535) break;
  }
  if (eocd == std::string::npos) throw FormatError("end of central directory not found", b.size());
  std::uint64_t entries = read_u16(b, eocd + 10);
  std::uint64_t cd_offset = read_u32(b, eocd + 16);
  if (cd_offset == 0xFFFFFFFFu && eocd >= 20 && read_u32(b, eocd - 20) == 0x07064b50) {
    const std::size_t z64 = read_u64(b, eocd - 20 + 8);
    if (read_u32(b, z64) != 0x06064b50) throw FormatError("bad zip64 end record", z64);
    entries = read_u64(b, z64 + 32);
    cd_offset = read_u64(b, z64 + 48);
  }

  std::map<std::string, Array> out;
  std::size_t p = cd_offset;
  for (std::uint64_t e = 0; e < entries; ++e) {
    if (read_u32(b, p) != 0x02014b50) throw FormatError("bad central directory entry", p);
    const std::uint16_t method = read_u16(b, p + 10);
    std::uint64_t comp_size = read_u32(b, p + 20);
    std::uint64_t raw_size = read_u32(b, p + 24);
    const std::uint16_t name_len = read_u16(b, p + 28);
    const std::uint16_t extra_len = read_u16(b, p + 30);
    const std::uint16_t comment_len = read_u16(b, p + 32);
    std::uint64_t local = read_u32(b, p + 42);
    std::string name(b.begin() + static_cast<std::ptrdiff_t>(p + 46),
                     b.begin() + static_cast<std::ptrdiff_t>(p + 46 + name_len));
    // zip64 extended info carries only the fields saturated above, in order.
    for (std::size_t x = p + 46 + name_len; x + 4 <= p + 46 + name_len + extra_len;) {
      const std::uint16_t id = read_u16(b, x);
      const std::uint16_t len = read_u16(b, x + 2);
      if (id == 0x0001) {
        std::size_t f = x + 4;
        if (raw_size == 0xFFFFFFFFu) { raw_size = read_u64(b, f); f += 8; }
        if (comp_size == 0xFFFFFFFFu) { comp_size = read_u64(b, f); f += 8; }
        if (local == 0xFFFFFFFFu) { local = read_u64(b, f); f += 8; }
      }
      x += 4 + len;
    }
    p += 46 + name_len + extra_len + comment_len;

    if (read_u32(b, local) != 0x04034b50) throw FormatError("bad local file header", local);
    const std::size_t data = local + 30 + read_u16(b, local + 26) + read_u16(b, local + 28);
    if (data + comp_size > b.size()) throw FormatError("member " + name + " truncated", data);
    std::vector<std::uint8_t> payload;
    if (method == 0) {
      payload.assign(b.begin() + static_cast<std::ptrdiff_t>(data),
                     b.begin() + static_cast<std::ptrdiff_t>(data + comp_size));
    } else if (method == 8) {
      payload = inflate_raw(b.data() + data, comp_size, raw_size);
    } else {
      throw FormatError("unsupported compression method " + std::to_string(method), local);
    }
    if (name.size() > 4 && name.ends_with(".npy")) name.resize(name.size() - 4);
    out.emplace(name, parse_npy(payload));
  }
  return out;
}

void write_npz(const std::filesystem::path& path, const std::map<std::string, Array>& arrays, bool compress) {
  std::vector<std::uint8_t> file, central;
  std::uint16_t count = 0;
  for (const auto& [key, array] : arrays) {
    const std::vector<std::uint8_t> raw = encode_npy(array);
    const std::vector<std::uint8_t> stored = compress ? deflate_raw(raw) : raw;
    const std::uint32_t crc = static_cast<std::uint32_t>(crc32(0L, raw.data(), static_cast<uInt>(raw.size())));
    const std::string name = key + ".npy";
    const std::uint32_t offset = static_cast<std::uint32_t>(file.size());
    const std::uint16_t method = compress ? 8 : 0;

    put_u32(file, 0x04034b50);
    put_u16(file, 20);
    put_u16(file, 0);
    put_u16(file, method);
    put_u16(file, 0);
    put_u16(file, 0x21);
    put_u32(file, crc);
    put_u32(file, static_cast<std::uint32_t>(stored.size()));
    put_u32(file, static_cast<std::uint32_t>(raw.size()));
    put_u16(file, static_cast<std::uint16_t>(name.size()));
    put_u16(file, 0);
    file.insert(file.end(), name.begin(), name.end());
    file.insert(file.end(), stored.begin(), stored.end());

    put_u32(central, 0x02014b50);
    put_u16(central, 20);
    put_u16(central, 20);
    put_u16(central, 0);
    put_u16(central, method);
    put_u16(central, 0);
    put_u16(central, 0x21);
    put_u32(central, crc);
    put_u32(central, static_cast<std::uint32_t>(stored.size()));
    put_u32(central, static_cast<std::uint32_t>(raw.size()));
    put_u16(central, static_cast<std::uint16_t>(name.size()));
    put_u16(central, 0);
    put_u16(central, 0);
    put_u16(central, 0);
    put_u16(central, 0);
    put_u32(central, 0);
    put_u32(central, offset);
    central.insert(central.end(), name.begin(), name.end());
    ++count;
  }
  const std::uint32_t cd_offset = static_cast<std::uint32_t>(file.size());
  file.insert(file.end(), central.begin(), central.end());
  put_u32(file, 0x06054b50);
  put_u16(file, 0);
  put_u16(file, 0);
  put_u16(file, count);
  put_u16(file, count);
  put_u32(file, static_cast<std::uint32_t>(central.size()));
  put_u32(file, cd_offset);
  put_u16(file, 0);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
}

}  // namespace ewcdr::npz
