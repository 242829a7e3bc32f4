#include "ewcdr/checkpoint.hpp"
#include "ewcdr/fsutil.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "ewcdr/errors.hpp"

namespace ewcdr {

namespace {

constexpr char kMagic[8] = {'E', 'W', 'C', 'D', 'R', 'C', 'K', 'P'};

template <typename T>
void put(std::vector<char>& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

void put_string(std::vector<char>& out, const std::string& s, bool wide) {
  if (wide) put<std::uint64_t>(out, s.size());
  else put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : b_(std::move(bytes)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string string(std::uint64_t n) {
    need(n);
    std::string s(b_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, b_.data() + pos_, n);
    pos_ += n;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (pos_ + n > b_.size()) throw FormatError("checkpoint truncated", pos_);
  }
  std::vector<char> b_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::vector<char> out(kMagic, kMagic + 8);
  put<std::uint32_t>(out, Checkpoint::kVersion);
  put_string(out, ckpt.kind, false);
  put_string(out, ckpt.config.dump(), true);
  put<std::uint64_t>(out, ckpt.slots.size());
  for (const auto& slot : ckpt.slots) {
    put_string(out, slot.name, false);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(slot.shape.size()));
    for (auto d : slot.shape) put<std::uint64_t>(out, d);
    put<std::uint64_t>(out, slot.offset);
  }
  put<std::uint64_t>(out, ckpt.values.size());
  for (double v : ckpt.values) put<double>(out, v);

  const auto tmp = temp_sibling(path).string();
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw Error("cannot write " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  Reader r(std::vector<char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()));
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw FormatError("not a checkpoint file", 0);
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 8);
  Checkpoint c;
  c.kind = r.string(r.get<std::uint32_t>());
  const std::size_t config_at = r.pos();
  try {
    c.config = nlohmann::json::parse(r.string(r.get<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint config: ") + e.what(), config_at);
  }
  const auto slots = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < slots; ++i) {
    nn::ParamSlot s;
    s.name = r.string(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < rank; ++d) s.shape.push_back(r.get<std::uint64_t>());
    s.offset = r.get<std::uint64_t>();
    c.slots.push_back(std::move(s));
  }
  const auto n = r.get<std::uint64_t>();
  c.values.resize(n);
  r.raw(c.values.data(), n * sizeof(double));
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload", r.pos());
  return c;
}

}  // namespace ewcdr
