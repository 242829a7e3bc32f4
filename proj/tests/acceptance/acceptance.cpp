// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit when any
// fails. The end-to-end criteria read their desk-scale configuration from
// acceptance.yaml next to this file.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "ewcdr/bound_diagnostics.hpp"
#include "ewcdr/ddpm.hpp"
#include "ewcdr/ewc.hpp"
#include "ewcdr/experiment.hpp"
#include "ewcdr/metrics.hpp"
#include "ewcdr/ops.hpp"
#include "ewcdr/replay_buffer.hpp"
#include "ewcdr/vit.hpp"

using namespace ewcdr;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double rel_err(double numeric, double analytic) {
  return std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------- metrics

Outcome metric_oracle() {
  const auto t0 = Clock::now();
  Rng rng(20240601);
  const int K = 5;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    double A[K + 1][K + 1];
    AccuracyMatrix m(K);
    for (int j = 1; j <= K; ++j)
      for (int t = j; t <= K; ++t) {
        A[j][t] = rng.uniform();
        m.set(j, t, A[j][t]);
      }
    // F = 1/(K-1) sum_{j<K} max_{t in [j, K]} (A_{j,t} - A_{j,K});  A = 1/K sum_j A_{j,K}
    double F = 0.0, acc = 0.0;
    for (int j = 1; j < K; ++j) {
      double best = -INFINITY;
      for (int t = j; t <= K; ++t) best = std::max(best, A[j][t] - A[j][K]);
      F += best;
    }
    F /= K - 1;
    for (int j = 1; j <= K; ++j) acc += A[j][K];
    acc /= K;
    worst = std::max({worst, std::abs(forgetting(m).mean - F), std::abs(average_accuracy(m) - acc)});
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-12 && secs < 5.0,
          "1000 random 5x5 matrices, max |impl - brute force| = " + fmt("%.2e", worst) + " (tol 1e-12), " +
              fmt("%.2f", secs) + " s (limit 5 s)"};
}

// ---------------------------------------------------------------- gradients

double classifier_grad_error() {
  ViTConfig c;
  c.image = {4, 4, 1};
  c.patch_size = 2;
  c.depth = 1;
  c.heads = 2;
  c.hidden_dim = 4;
  c.mlp_dim = 6;
  c.num_classes = 3;
  ViTClassifier model(c, 3);
  Rng rng(4);
  auto theta = model.theta();
  for (double& v : theta) v += 0.5 * rng.normal();
  model.set_theta(theta);
  Tensor x({3, 4, 4, 1});
  for (double& v : x.values()) v = rng.uniform();
  const std::vector<int> y{0, 2, 1};
  model.params().zero_grad();
  classification_loss(model.forward(x), y, c.head_kind).backward();
  const auto grad = model.params().flat_grad();
  auto loss = [&](const std::vector<double>& th) {
    model.set_theta(th);
    ag::NoGradGuard guard;
    return classification_loss(model.forward(x), y, c.head_kind).item();
  };
  double worst = 0.0;
  const double h = 1e-4;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    auto p = theta, m = theta;
    p[i] += h;
    m[i] -= h;
    worst = std::max(worst, rel_err((loss(p) - loss(m)) / (2 * h), grad[i]));
  }
  return worst;
}

double ddpm_grad_error() {
  DenoiserConfig c;
  c.image = {4, 4, 1};
  c.widths = {2, 4};
  c.time_dim = 4;
  c.num_classes = 3;
  Denoiser model(c, 5);
  Rng rng(6);
  auto theta = model.params().flatten();
  for (double& v : theta) v += 0.3 * rng.normal();
  model.params().assign(theta);
  const auto s = build_schedule(ScheduleKind::cosine, 20);
  Tensor x0({2, 4, 4, 1}), eps({2, 4, 4, 1});
  for (double& v : x0.values()) v = rng.uniform();
  for (double& v : eps.values()) v = rng.normal();
  const std::vector<int> labels{0, 2};
  const std::vector<std::size_t> t{3, 17};
  model.params().zero_grad();
  ddpm_loss_at(model, x0, labels, {}, t, eps, s).backward();
  const auto grad = model.params().flat_grad();
  auto loss = [&](const std::vector<double>& th) {
    model.params().assign(th);
    ag::NoGradGuard guard;
    return ddpm_loss_at(model, x0, labels, {}, t, eps, s).item();
  };
  double worst = 0.0;
  const double h = 1e-5;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    auto p = theta, m = theta;
    p[i] += h;
    m[i] -= h;
    worst = std::max(worst, rel_err((loss(p) - loss(m)) / (2 * h), grad[i]));
  }
  return worst;
}

double ewc_grad_error() {
  Rng rng(7);
  AnchorSet set;
  for (int k = 1; k <= 3; ++k) {
    FisherAnchor a;
    a.task_id = k;
    for (int i = 0; i < 20; ++i) {
      a.fisher.push_back(std::abs(rng.normal()));
      a.anchor.push_back(rng.normal());
    }
    set.add(a);
  }
  std::vector<double> theta(20);
  for (double& v : theta) v = rng.normal();
  const auto g = ewc_gradient(theta, set);
  double worst = 0.0;
  const double h = 1e-3;  // exact quadratic: no truncation error
  for (std::size_t i = 0; i < theta.size(); ++i) {
    auto p = theta, m = theta;
    p[i] += h;
    m[i] -= h;
    const double numeric = (ewc_penalty(p, set) - ewc_penalty(m, set)) / (2 * h);
    worst = std::max(worst, std::abs(numeric - g[i]) / std::max(std::abs(g[i]), 1e-12));
  }
  return worst;
}

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  const double cls = classifier_grad_error(), ddpm = ddpm_grad_error(), ewc = ewc_grad_error();
  const double secs = seconds_since(t0);
  return {cls < 1e-4 && ddpm < 1e-3 && ewc < 1e-8 && secs < 60.0,
          "max rel err: classifier " + fmt("%.2e", cls) + " (tol 1e-4), DDPM " + fmt("%.2e", ddpm) +
              " (tol 1e-3), EWC penalty " + fmt("%.2e", ewc) + " (tol 1e-8), " + fmt("%.1f", secs) +
              " s (limit 60 s)"};
}

// ---------------------------------------------------------------- diffusion

Outcome diffusion_statistics() {
  Rng pick(31);
  double worst = 0.0;
  std::string where;
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    const auto s = build_schedule(kind, 1000);
    for (int trial = 0; trial < 5; ++trial) {
      const std::size_t t = 1 + pick.uniform_index(1000);
      const std::size_t n = 10000;
      const Tensor x0({n, 1, 1, 1}, 0.3);
      Rng rng(derive_seed(77, {static_cast<std::uint64_t>(trial), t}));
      Tensor eps({n, 1, 1, 1});
      for (double& v : eps.values()) v = rng.normal();
      const Tensor xt = forward_noise(x0, t, eps, s);
      double m = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        m += xt[i];
        sq += xt[i] * xt[i];
      }
      m /= n;
      const double var = sq / n - m * m;
      const double dev = std::abs(var / (1.0 - s.alpha_bar_at(t)) - 1.0);
      if (dev > worst) {
        worst = dev;
        where = to_string(kind) + " t=" + std::to_string(t);
      }
    }
  }
  bool monotone = true;
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine})
    for (std::size_t T : {100, 250, 500, 1000}) {
      const auto s = build_schedule(kind, T);
      for (std::size_t t = 2; t <= T; ++t) monotone = monotone && s.alpha_bar_at(t) < s.alpha_bar_at(t - 1);
    }
  return {worst <= 0.05 && monotone,
          "worst relative variance error " + fmt("%.4f", worst) + " at " + where +
              " (tol 0.05, n=1e4, 5 t per schedule); alpha_bar strictly decreasing for T in {100,250,500,1000}: " +
              (monotone ? "yes" : "no")};
}

// ---------------------------------------------------------------- KL

Outcome kl_estimator() {
  const auto t0 = Clock::now();
  std::vector<double> est;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(derive_seed(41, {static_cast<std::uint64_t>(trial)}));
    Tensor p({5000, 1}), q({5000, 1});
    for (double& v : p.values()) v = rng.normal();
    for (double& v : q.values()) v = 1.0 + rng.normal();
    est.push_back(estimate_kl(p, q, 5));
  }
  const double med = median(est);
  Rng rng(43);
  // Self-divergence: two independent draws from the same N(0,1).
  Tensor real({5000, 1}), replay({5000, 1});
  for (double& v : real.values()) v = rng.normal();
  for (double& v : replay.values()) v = rng.normal();
  const double self = estimate_kl(real, replay, 5), self_raw = estimate_kl_raw(real, replay, 5);
  const double secs = seconds_since(t0);
  return {std::abs(med - 0.5) <= 0.15 * 0.5 && self < 0.05 && std::abs(self_raw) < 0.05 && secs < 120.0,
          "median of 20 estimates " + fmt("%.4f", med) + " nats vs 0.5 (tol 15%), self-divergence " +
              fmt("%.4f", self) + " (unclamped " + fmt("%.4f", self_raw) + ", |.| < 0.05), " + fmt("%.1f", secs) + " s (limit 120 s)"};
}

// ---------------------------------------------------------------- buffer

Outcome budget_and_roundtrip() {
  Rng rng(2025);
  const std::vector<ImageShape> shapes{{2, 2, 1}, {3, 3, 1}, {2, 2, 3}};
  std::size_t ops = 0, violations = 0, imbalance = 0;
  auto fill = [](std::size_t n, ImageShape s, Rng& r) {
    Tensor t({n, s.height, s.width, s.channels});
    for (double& v : t.values()) v = r.uniform();
    return t;
  };
  while (ops < 10000) {
    const ImageShape shape = shapes[rng.uniform_index(shapes.size())];
    ReplayBuffer buf(shape.pixels() * 4 * (1 + rng.uniform_index(60)));
    std::map<int, std::vector<int>> task_classes;
    int next = 0;
    for (int task = 1; task <= 8 && ops < 10000; ++task, ++ops) {
      std::vector<int> classes;
      for (int c = 0, n = 1 + static_cast<int>(rng.uniform_index(4)); c < n; ++c) classes.push_back(next++);
      task_classes[task] = classes;
      const std::size_t n = 1 + rng.uniform_index(40);
      std::vector<int> labels;
      for (std::size_t i = 0; i < n; ++i) labels.push_back(classes[i % classes.size()]);
      buf.add_task_samples(fill(n, shape, rng), labels, task);
      if (buf.total_bytes() > buf.budget_bytes()) ++violations;
      const auto& counts = buf.per_class_counts();
      for (const auto& [t, cls] : task_classes) {
        std::size_t lo = SIZE_MAX, hi = 0;
        for (int c : cls) {
          const auto it = counts.find(c);
          const std::size_t k = it == counts.end() ? 0 : it->second;
          lo = std::min(lo, k);
          hi = std::max(hi, k);
        }
        if (hi - lo > 1) ++imbalance;
      }
      if (!buf.empty() && rng.uniform() < 0.5) {
        ++ops;
        buf.sample_balanced(1 + rng.uniform_index(20), rng);
      }
    }
  }
  // Round trip.
  ReplayBuffer buf(1 << 20);
  buf.add_task_samples(fill(9, {3, 3, 1}, rng), {0, 1, 0, 1, 0, 1, 0, 1, 0}, 1);
  buf.add_task_samples(fill(6, {3, 3, 1}, rng), {2, 3, 2, 3, 2, 3}, 2);
  const fs::path a = fs::temp_directory_path() / ("ewcdr_acc_buf_a_" + std::to_string(::getpid()));
  const fs::path b = fs::temp_directory_path() / ("ewcdr_acc_buf_b_" + std::to_string(::getpid()));
  buf.serialize(a);
  const ReplayBuffer back = ReplayBuffer::deserialize(a);
  back.serialize(b);
  auto bytes = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const bool exact = back == buf && bytes(a) == bytes(b);
  fs::remove(a);
  fs::remove(b);
  return {violations == 0 && imbalance == 0 && exact,
          std::to_string(ops) + " random ops: " + std::to_string(violations) + " budget violations, " +
              std::to_string(imbalance) + " per-task imbalance > 1; serialization round trip " +
              (exact ? "bit-exact" : "NOT exact")};
}

// ---------------------------------------------------------------- end to end

// Bound regression grid.
const std::vector<double> kRegressionLambdas{10, 50, 100};
const std::vector<double> kRegressionBudgetsMb{0.05, 100};
const std::vector<std::uint64_t> kRegressionSeeds{0, 1};

struct Desk {
  json config;
  std::vector<std::uint64_t> seeds;
  GeneratorCache cache;
  std::map<std::string, RunRecord> memo;

  // Applies "key=value" overrides and runs (memoized per point and seed).
  const RunRecord& run(const std::vector<std::string>& overrides, std::uint64_t seed) {
    json c = config;
    for (const auto& o : overrides) apply_override(c, o);
    c["seeds"] = {seed};
    const auto point = expand_runs(c).front();
    auto it = memo.find(point.id);
    if (it != memo.end()) return it->second;
    const auto t0 = Clock::now();
    const TaskStream stream = make_synthetic_stream(make_stream_config(point.config, seed));
    RunRecord r = run_sequence(stream, make_run_config(point.config, seed), &cache);
    std::string tag;
    for (const auto& o : overrides) tag += o + " ";
    std::fprintf(stderr, "  ran %sseed=%llu  F=%.4f  A=%.4f  (%.0f s)\n", tag.c_str(),
                 static_cast<unsigned long long>(seed), r.metrics.forgetting.mean, r.metrics.average_accuracy,
                 seconds_since(t0));
    return memo.emplace(point.id, std::move(r)).first->second;
  }

  static std::vector<std::string> method_overrides(const std::string& method) { return {"train.method=" + method}; }
};

struct MethodStats {
  double forgetting = 0.0;
  double t1 = 0.0;
};

MethodStats stats_of(Desk& desk, const std::string& method, const std::string& order) {
  std::vector<double> f, t1;
  auto overrides = desk.method_overrides(method);
  overrides.push_back("stream.order=" + order);
  for (auto seed : desk.seeds) {
    const RunRecord& r = desk.run(overrides, seed);
    f.push_back(r.metrics.forgetting.mean);
    t1.push_back(r.metrics.taskwise.first);
  }
  return {mean(f), mean(t1)};
}

Outcome ablation_ordering(Desk& desk) {
  const auto t0 = Clock::now();
  const auto fin = stats_of(desk, "finetune", "canonical");
  const auto ewc = stats_of(desk, "ewc_only", "canonical");
  const auto ddpm = stats_of(desk, "ddpm_only", "canonical");
  const auto full = stats_of(desk, "full", "canonical");
  const bool c1 = fin.forgetting > ewc.forgetting, c2 = fin.forgetting > ddpm.forgetting;
  const bool c3 = full.forgetting < ewc.forgetting && full.forgetting < ddpm.forgetting;
  const bool c4 = full.t1 - fin.t1 >= 0.10;
  auto mark = [](bool ok) { return ok ? "ok" : "violated"; };
  return {c1 && c2 && c3 && c4,
          std::to_string(desk.seeds.size()) + "-seed mean F: finetune " + fmt("%.4f", fin.forgetting) +
              ", ewc_only " + fmt("%.4f", ewc.forgetting) + ", ddpm_only " + fmt("%.4f", ddpm.forgetting) +
              ", full " + fmt("%.4f", full.forgetting) + "; finetune>ewc_only " + mark(c1) + ", finetune>ddpm_only " +
              mark(c2) + ", full<both " + mark(c3) + "; T1 full " + fmt("%.3f", full.t1) + " vs finetune " +
              fmt("%.3f", fin.t1) + " (need +0.10) " + mark(c4) + "; " + fmt("%.0f", seconds_since(t0)) + " s"};
}

Outcome order_robustness(Desk& desk) {
  const auto full_c = stats_of(desk, "full", "canonical"), full_r = stats_of(desk, "full", "reversed");
  const auto fin_c = stats_of(desk, "finetune", "canonical"), fin_r = stats_of(desk, "finetune", "reversed");
  const double gap_full = std::abs(full_c.forgetting - full_r.forgetting);
  const double gap_fin = std::abs(fin_c.forgetting - fin_r.forgetting);
  return {gap_full <= gap_fin, "|F(canonical) - F(reversed)|: full " + fmt("%.4f", gap_full) + " (" +
                                   fmt("%.4f", full_c.forgetting) + " vs " + fmt("%.4f", full_r.forgetting) +
                                   "), finetune " + fmt("%.4f", gap_fin) + " (" + fmt("%.4f", fin_c.forgetting) +
                                   " vs " + fmt("%.4f", fin_r.forgetting) + ")"};
}

Outcome bound_regression(Desk& desk) {
  std::vector<BoundTerms> terms;
  std::size_t runs = 0;
  for (double lambda : kRegressionLambdas)
    for (double mb : kRegressionBudgetsMb)
      for (auto seed : kRegressionSeeds) {
        auto o = desk.method_overrides("full");
        o.push_back("train.lambda=" + fmt("%g", lambda));
        o.push_back("train.replay_budget_mb=" + fmt("%g", mb));
        o.push_back("diagnostics.enabled=true");
        for (const auto& t : desk.run(o, seed).bound_terms()) terms.push_back(t);
        ++runs;
      }
  const RegressionFit fit = fit_regression(terms);
  const bool r2_ok = !fit.degenerate && fit.r2_joint >= std::max(fit.r2_kl_only, fit.r2_drift_only) - 1e-9;
  const bool signs = !fit.degenerate && fit.a >= 0.0 && fit.b >= 0.0;

  // Generate-and-recover.
  Rng rng(606);
  std::vector<BoundTerms> planted;
  for (int i = 0; i < 60; ++i) {
    BoundTerms t;
    t.task_id = i + 1;
    t.kl_estimate = rng.uniform(0.0, 2.0);
    t.drift = rng.uniform(0.0, 1.0);
    t.observed_forgetting = 0.3 * t.kl_estimate + 0.7 * t.drift + 0.01 * rng.normal();
    planted.push_back(t);
  }
  const RegressionFit rec = fit_regression(planted);
  const bool recovered = !rec.degenerate && std::abs(rec.a - 0.3) <= 0.05 && std::abs(rec.b - 0.7) <= 0.05;
  std::string detail = std::to_string(runs) + " runs, " + std::to_string(terms.size()) + " task rows; ";
  if (fit.degenerate) {
    detail += "fit degenerate (" + fit.note + ")";
  } else {
    detail += "a=" + fmt("%.4g", fit.a) + " b=" + fmt("%.4g", fit.b) + " (need >= 0), R2 joint " +
              fmt("%.4f", fit.r2_joint) + " vs KL-only " + fmt("%.4f", fit.r2_kl_only) + ", drift-only " +
              fmt("%.4f", fit.r2_drift_only) + " (margin >= 0.02 over both: " +
              (fit.r2_joint >= std::max(fit.r2_kl_only, fit.r2_drift_only) + 0.02 ? "yes" : "no") + ", not asserted)";
  }
  detail += "; planted (0.3, 0.7) recovered as (" + fmt("%.4f", rec.a) + ", " + fmt("%.4f", rec.b) + ") tol 0.05";
  return {runs >= 12 && r2_ok && signs && recovered, detail};
}

Outcome determinism(Desk& desk) {
  json c = desk.config;
  for (const auto& o : desk.method_overrides("full")) apply_override(c, o);
  c["seeds"] = {desk.seeds.front()};
  const auto point = expand_runs(c).front();
  std::string dumps[2];
  for (auto& d : dumps) {
    // Cold start each time: no generator cache.
    const TaskStream stream = make_synthetic_stream(make_stream_config(point.config, point.seed));
    d = run_sequence(stream, make_run_config(point.config, point.seed), nullptr).to_json().dump(2);
  }
  return {dumps[0] == dumps[1], "method=full seed=" + std::to_string(point.seed) + ", two cold runs: record.json " +
                                    (dumps[0] == dumps[1] ? "byte-identical" : "DIFFERS") + " (" +
                                    std::to_string(dumps[0].size()) + " bytes)"};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path config_path = EWCDR_ACCEPTANCE_CONFIG;
  std::string only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) config_path = argv[++i];
    else if (a == "--only" && i + 1 < argc) only = argv[++i];
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> unit_checks{
      {"metric oracle", metric_oracle},
      {"gradient checks", gradient_checks},
      {"diffusion statistics", diffusion_statistics},
      {"KL estimator", kl_estimator},
      {"budget safety and serialization", budget_and_roundtrip},
  };

  Desk desk;
  try {
    desk.config = load_experiment_config(config_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance: %s\n", e.what());
    return 2;
  }
  desk.seeds = desk.config.at("seeds").get<std::vector<std::uint64_t>>();
  desk.config["sweeps"] = json::object();

  const std::vector<std::pair<std::string, std::function<Outcome()>>> e2e_checks{
      {"ablation ordering", [&] { return ablation_ordering(desk); }},
      {"order robustness", [&] { return order_robustness(desk); }},
      {"bound regression", [&] { return bound_regression(desk); }},
      {"determinism", [&] { return determinism(desk); }},
  };

  int failed = 0, ran = 0;
  auto run_check = [&](const std::string& name, const std::function<Outcome()>& fn) {
    if (!only.empty() && name.find(only) == std::string::npos) return;
    ++ran;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s  %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  };
  for (const auto& [name, fn] : unit_checks) run_check(name, fn);
  for (const auto& [name, fn] : e2e_checks) run_check(name, fn);
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
