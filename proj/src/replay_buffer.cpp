#include "ewcdr/replay_buffer.hpp"
#include "ewcdr/fsutil.hpp"

#include <algorithm>
#include <cstring>
#include <deque>
#include <fstream>
#include <iterator>
#include <tuple>

#include "ewcdr/errors.hpp"

namespace ewcdr {

namespace {

constexpr char kMagic[8] = {'E', 'W', 'C', 'D', 'R', 'B', 'U', 'F'};
constexpr std::size_t kHeaderBytes = 32;
constexpr std::size_t kItemHeaderBytes = 24;

template <typename T>
void put(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  template <typename T>
  T get(const char* field) {
    need(sizeof(T), field);
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  void need(std::size_t n, const char* field) const {
    if (data_.size() - pos_ < n) throw FormatError(std::string("buffer file truncated in ") + field, pos_);
  }

  const char* take(std::size_t n, const char* field) {
    need(n, field);
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t pos() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<int> ReplayBuffer::classes() const {
  std::vector<int> out;
  for (const auto& [label, count] : counts_)
    if (count > 0) out.push_back(label);
  return out;
}

void ReplayBuffer::add_task_samples(const Tensor& images, const std::vector<int>& labels, int task_id,
                                    Provenance provenance) {
  if (provenance != Provenance::generated) {
    throw ContractError("replay buffer accepts generated samples only; real data cannot be stored");
  }
  if (labels.empty()) return;
  if (images.rank() != 4 || images.dim(0) != labels.size()) {
    throw ShapeError("add_task_samples: " + std::to_string(labels.size()) + " labels for images " +
                     to_string(images.shape()));
  }
  const ImageShape shape{images.dim(1), images.dim(2), images.dim(3)};
  const std::size_t per = shape.pixels();
  if (static_cast<std::uint64_t>(per) * sizeof(float) > budget_) {
    throw CapacityError("a single " + std::to_string(per * sizeof(float)) + "-byte item exceeds the " +
                        std::to_string(budget_) + "-byte budget");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ReplayItem item;
    item.shape = shape;
    item.image.resize(per);
    const double* src = images.data() + i * per;
    for (std::size_t p = 0; p < per; ++p) item.image[p] = static_cast<float>(src[p]);
    item.label = labels[i];
    item.task_id = task_id;
    total_ += item.nbytes();
    ++counts_[item.label];
    items_.push_back(std::move(item));
  }
  evict_to_budget();
}

void ReplayBuffer::evict_to_budget() {
  if (total_ <= budget_) return;
  std::map<int, std::deque<std::size_t>> by_class;
  std::map<int, int> task_of;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    by_class[items_[i].label].push_back(i);
    task_of.emplace(items_[i].label, items_[i].task_id);
  }
  std::vector<bool> evicted(items_.size(), false);
  while (total_ > budget_) {
    // Largest count, then lowest task id, then lowest label.
    auto victim = by_class.end();
    for (auto it = by_class.begin(); it != by_class.end(); ++it) {
      if (it->second.empty()) continue;
      if (victim == by_class.end()) {
        victim = it;
        continue;
      }
      const auto key = [&](auto i) {
        return std::make_tuple(-static_cast<long>(i->second.size()), task_of[i->first], i->first);
      };
      if (key(it) < key(victim)) victim = it;
    }
    const std::size_t idx = victim->second.front();
    victim->second.pop_front();
    evicted[idx] = true;
    total_ -= items_[idx].nbytes();
    if (--counts_[items_[idx].label] == 0) counts_.erase(items_[idx].label);
  }
  std::vector<ReplayItem> kept;
  kept.reserve(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i)
    if (!evicted[i]) kept.push_back(std::move(items_[i]));
  items_ = std::move(kept);
}

ReplaySample ReplayBuffer::sample_balanced(std::size_t n, Rng& rng) const {
  if (items_.empty()) throw ContractError("sample_balanced on an empty replay buffer");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < items_.size(); ++i) by_class[items_[i].label].push_back(i);
  std::vector<int> order;
  for (const auto& [label, idx] : by_class) order.push_back(label);
  // Seeded rotation decides which classes receive the remainder.
  const std::size_t offset = rng.uniform_index(order.size());
  std::rotate(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(offset), order.end());

  std::vector<std::size_t> picked;
  picked.reserve(n);
  for (std::size_t c = 0; c < order.size(); ++c) {
    const std::size_t quota = n / order.size() + (c < n % order.size() ? 1 : 0);
    const auto& pool = by_class[order[c]];
    if (pool.size() >= quota) {
      const auto perm = rng.permutation(pool.size());
      for (std::size_t q = 0; q < quota; ++q) picked.push_back(pool[perm[q]]);
    } else {
      for (std::size_t q = 0; q < quota; ++q) picked.push_back(pool[rng.uniform_index(pool.size())]);
    }
  }
  const auto shuffle = rng.permutation(picked.size());
  const ImageShape shape = items_.front().shape;
  ReplaySample out;
  out.images = Tensor({picked.size(), shape.height, shape.width, shape.channels});
  const std::size_t per = shape.pixels();
  for (std::size_t k = 0; k < picked.size(); ++k) {
    const ReplayItem& item = items_[picked[shuffle[k]]];
    std::copy(item.image.begin(), item.image.end(), out.images.data() + k * per);
    out.labels.push_back(item.label);
    out.task_ids.push_back(item.task_id);
  }
  return out;
}

ReplayBuffer ReplayBuffer::only_tasks_before(int task_id) const {
  ReplayBuffer out(budget_);
  for (const auto& item : items_) {
    if (item.task_id >= task_id) continue;
    out.total_ += item.nbytes();
    ++out.counts_[item.label];
    out.items_.push_back(item);
  }
  return out;
}

// Layout: 32-byte header "EWCDRBUF" | u32 version | u32 reserved |
// u64 budget | u64 item count, then per item u32 H | u32 W | u32 C |
// i32 label | i32 task id | u32 provenance | H*W*C float32 values.
void ReplayBuffer::serialize(const std::filesystem::path& path) const {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, 0);
  put<std::uint64_t>(out, budget_);
  put<std::uint64_t>(out, items_.size());
  for (const auto& item : items_) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(item.shape.height));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(item.shape.width));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(item.shape.channels));
    put<std::int32_t>(out, item.label);
    put<std::int32_t>(out, item.task_id);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(item.provenance));
    out.append(reinterpret_cast<const char*>(item.image.data()), item.image.size() * sizeof(float));
  }
  const auto tmp = temp_sibling(path);
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
  }
  std::filesystem::rename(tmp, path);
}

ReplayBuffer ReplayBuffer::deserialize(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path.string());
  Reader r(std::string(std::istreambuf_iterator<char>(f), {}));
  r.need(kHeaderBytes, "header");
  if (std::memcmp(r.take(sizeof(kMagic), "magic"), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a replay buffer file (bad magic)", 0);
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) throw FormatError("unsupported buffer version " + std::to_string(version), 8);
  r.get<std::uint32_t>("reserved");
  ReplayBuffer buffer(r.get<std::uint64_t>("budget"));
  const auto count = r.get<std::uint64_t>("item count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t at = r.pos();
    r.need(kItemHeaderBytes, "item header");
    ReplayItem item;
    item.shape.height = r.get<std::uint32_t>("height");
    item.shape.width = r.get<std::uint32_t>("width");
    item.shape.channels = r.get<std::uint32_t>("channels");
    item.label = r.get<std::int32_t>("label");
    item.task_id = r.get<std::int32_t>("task id");
    const auto prov = r.get<std::uint32_t>("provenance");
    if (prov != static_cast<std::uint32_t>(Provenance::generated)) {
      throw FormatError("item " + std::to_string(i) + " is not marked as generated", at);
    }
    item.provenance = Provenance::generated;
    const std::size_t per = item.shape.pixels();
    if (per == 0 || per > (std::size_t{1} << 32)) throw FormatError("implausible item shape", at);
    item.image.resize(per);
    std::memcpy(item.image.data(), r.take(per * sizeof(float), "item payload"), per * sizeof(float));
    buffer.total_ += item.nbytes();
    ++buffer.counts_[item.label];
    buffer.items_.push_back(std::move(item));
  }
  if (!r.done()) throw FormatError("trailing bytes after last item", r.pos());
  if (buffer.total_ > buffer.budget_) throw FormatError("stored items exceed the recorded budget", 16);
  return buffer;
}

}  // namespace ewcdr
