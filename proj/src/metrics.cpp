#include "ewcdr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ewcdr/errors.hpp"

namespace ewcdr {

AccuracyMatrix::AccuracyMatrix(int num_tasks) : K_(num_tasks) {
  if (num_tasks < 1) throw ContractError("accuracy matrix needs at least one task");
  values_.resize(static_cast<std::size_t>(K_ * K_));
  pre_task_.resize(static_cast<std::size_t>(K_));
}

std::size_t AccuracyMatrix::index(int j, int t) const {
  if (j < 1 || t < 1 || j > K_ || t > K_ || j > t) {
    throw ContractError("accuracy entry (" + std::to_string(j) + "," + std::to_string(t) + ") outside 1 <= j <= t <= " +
                        std::to_string(K_));
  }
  return static_cast<std::size_t>((j - 1) * K_ + (t - 1));
}

void AccuracyMatrix::set(int j, int t, double accuracy) {
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw ContractError("accuracy must lie in [0, 1]");
  values_[index(j, t)] = accuracy;
}

bool AccuracyMatrix::has(int j, int t) const { return values_[index(j, t)].has_value(); }

double AccuracyMatrix::at(int j, int t) const {
  const auto& v = values_[index(j, t)];
  if (!v) throw ContractError("accuracy entry (" + std::to_string(j) + "," + std::to_string(t) + ") was not recorded");
  return *v;
}

void AccuracyMatrix::set_pre_task(int j, double accuracy) {
  if (j < 2 || j > K_) throw ContractError("pre-task accuracy defined for tasks 2..K only");
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw ContractError("accuracy must lie in [0, 1]");
  pre_task_[static_cast<std::size_t>(j - 1)] = accuracy;
}

bool AccuracyMatrix::has_pre_task(int j) const {
  return j >= 1 && j <= K_ && pre_task_[static_cast<std::size_t>(j - 1)].has_value();
}

double AccuracyMatrix::pre_task(int j) const {
  if (!has_pre_task(j)) {
    throw ContractError("pre-task evaluation for task " + std::to_string(j) + " missing (enable --measure-fwt)");
  }
  return *pre_task_[static_cast<std::size_t>(j - 1)];
}

bool AccuracyMatrix::lower_triangular_complete() const {
  for (int t = 1; t <= K_; ++t)
    for (int j = 1; j <= t; ++j)
      if (!has(j, t)) return false;
  return true;
}

void to_json(nlohmann::json& j, const AccuracyMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 1; r <= m.K_; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int t = 1; t <= m.K_; ++t) row.push_back(r <= t && m.has(r, t) ? nlohmann::json(m.at(r, t)) : nlohmann::json());
    rows.push_back(row);
  }
  nlohmann::json pre = nlohmann::json::array();
  for (const auto& v : m.pre_task_) pre.push_back(v ? nlohmann::json(*v) : nlohmann::json());
  j = {{"num_tasks", m.K_}, {"entries", rows}, {"pre_task", pre}};
}

void from_json(const nlohmann::json& j, AccuracyMatrix& m) {
  m = AccuracyMatrix(j.at("num_tasks").get<int>());
  const auto& rows = j.at("entries");
  for (int r = 1; r <= m.K_; ++r)
    for (int t = r; t <= m.K_; ++t) {
      const auto& v = rows.at(r - 1).at(t - 1);
      if (!v.is_null()) m.set(r, t, v.get<double>());
    }
  if (j.contains("pre_task")) {
    const auto& pre = j.at("pre_task");
    for (int r = 2; r <= m.K_; ++r)
      if (!pre.at(r - 1).is_null()) m.set_pre_task(r, pre.at(r - 1).get<double>());
  }
}

Forgetting forgetting(const AccuracyMatrix& m) {
  const int K = m.num_tasks();
  if (K < 2) throw ContractError("forgetting needs at least two tasks");
  Forgetting f;
  f.per_task.assign(static_cast<std::size_t>(K), 0.0);
  for (int j = 1; j <= K; ++j) {
    const double final_acc = m.at(j, K);
    double best = final_acc;
    for (int t = j; t <= K; ++t)
      if (m.has(j, t)) best = std::max(best, m.at(j, t));
    f.per_task[static_cast<std::size_t>(j - 1)] = best - final_acc;
  }
  f.mean = std::accumulate(f.per_task.begin(), f.per_task.end() - 1, 0.0) / static_cast<double>(K - 1);
  return f;
}

double average_accuracy(const AccuracyMatrix& m) {
  const int K = m.num_tasks();
  double total = 0.0;
  for (int j = 1; j <= K; ++j) total += m.at(j, K);
  return total / static_cast<double>(K);
}

double backward_transfer(const AccuracyMatrix& m) {
  const int K = m.num_tasks();
  if (K < 2) throw ContractError("backward transfer needs at least two tasks");
  double total = 0.0;
  for (int j = 1; j < K; ++j) total += m.at(j, K) - m.at(j, j);
  return total / static_cast<double>(K - 1);
}

double forward_transfer(const AccuracyMatrix& m, std::span<const double> random_baseline) {
  const int K = m.num_tasks();
  if (K < 2) throw ContractError("forward transfer needs at least two tasks");
  if (random_baseline.size() != static_cast<std::size_t>(K)) {
    throw ContractError("random baseline needs one accuracy per task");
  }
  double total = 0.0;
  for (int j = 2; j <= K; ++j) total += m.pre_task(j) - random_baseline[static_cast<std::size_t>(j - 1)];
  return total / static_cast<double>(K - 1);
}

Transfer transfer(const AccuracyMatrix& m, std::span<const double> random_baseline) {
  return {forward_transfer(m, random_baseline), backward_transfer(m)};
}

AucResult macro_auc(const Tensor& scores, std::span<const int> labels) {
  const std::size_t N = scores.rows(), C = scores.cols();
  if (scores.rank() != 2 || labels.size() != N) throw ShapeError("macro_auc: scores [N, C] with N labels required");
  AucResult out;
  std::vector<std::size_t> order(N);
  std::vector<double> ranks(N);
  double sum = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t pos = 0;
    for (int y : labels) pos += static_cast<std::size_t>(y) == c;
    const std::size_t neg = N - pos;
    if (pos == 0 || neg == 0) {
      out.excluded.push_back(static_cast<int>(c));
      continue;
    }
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a * C + c] < scores[b * C + c]; });
    // Midranks for ties.
    for (std::size_t i = 0; i < N;) {
      std::size_t k = i;
      while (k + 1 < N && scores[order[k + 1] * C + c] == scores[order[i] * C + c]) ++k;
      const double mid = 0.5 * static_cast<double>(i + k) + 1.0;
      for (std::size_t r = i; r <= k; ++r) ranks[order[r]] = mid;
      i = k + 1;
    }
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < N; ++i)
      if (static_cast<std::size_t>(labels[i]) == c) rank_sum += ranks[i];
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    sum += (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
    out.included.push_back(static_cast<int>(c));
  }
  if (out.included.empty()) throw ContractError("macro_auc: no class has both positives and negatives");
  out.value = sum / static_cast<double>(out.included.size());
  return out;
}

TaskwiseAccuracy taskwise(const AccuracyMatrix& m) {
  const int K = m.num_tasks();
  TaskwiseAccuracy t;
  t.mid_task = (K + 1) / 2;
  t.first = m.at(1, K);
  t.mid = m.at(t.mid_task, K);
  t.last = m.at(K, K);
  return t;
}

MetricReport build_report(const AccuracyMatrix& m, const std::vector<std::optional<double>>& auc_per_step,
                          std::span<const double> random_baseline) {
  MetricReport r;
  r.average_accuracy = average_accuracy(m);
  if (m.num_tasks() >= 2) r.forgetting = forgetting(m);
  r.taskwise = taskwise(m);
  r.macro_auc = auc_per_step;
  if (m.num_tasks() >= 2 && m.lower_triangular_complete()) r.bwt = backward_transfer(m);
  bool have_pre = m.num_tasks() >= 2 && !random_baseline.empty();
  for (int j = 2; have_pre && j <= m.num_tasks(); ++j) have_pre = m.has_pre_task(j);
  if (have_pre) r.fwt = forward_transfer(m, random_baseline);
  return r;
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  nlohmann::json auc = nlohmann::json::array();
  for (const auto& v : r.macro_auc) auc.push_back(opt(v));
  j = {{"average_accuracy", r.average_accuracy},
       {"forgetting", r.forgetting.mean},
       {"forgetting_per_task", r.forgetting.per_task},
       {"fwt", opt(r.fwt)},
       {"bwt", opt(r.bwt)},
       {"macro_auc", auc},
       {"taskwise", {{"T1", r.taskwise.first}, {"T_mid", r.taskwise.mid}, {"T_mid_task", r.taskwise.mid_task},
                     {"T_n", r.taskwise.last}}}};
}

}  // namespace ewcdr
