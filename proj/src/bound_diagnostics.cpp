#include "ewcdr/bound_diagnostics.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "ewcdr/errors.hpp"

namespace ewcdr {

namespace {

constexpr double kMinDistance = 1e-12;

// Distance to the k-th nearest row of `pool`, optionally skipping row `self`.
double kth_distance(const double* q, const Tensor& pool, std::size_t k, std::size_t self, std::vector<double>& best) {
  const std::size_t d = pool.cols(), n = pool.rows();
  best.assign(k, std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < n; ++r) {
    if (r == self) continue;
    const double* p = pool.data() + r * d;
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = q[c] - p[c];
      s += diff * diff;
      if (s >= best[k - 1]) break;
    }
    if (s < best[k - 1]) {
      std::size_t pos = k - 1;
      while (pos > 0 && best[pos - 1] > s) {
        best[pos] = best[pos - 1];
        --pos;
      }
      best[pos] = s;
    }
  }
  return std::max(std::sqrt(best[k - 1]), kMinDistance);
}

double r_squared(const Eigen::VectorXd& y, const Eigen::VectorXd& fitted) {
  const double mean = y.mean();
  const double ss_tot = (y.array() - mean).square().sum();
  if (ss_tot <= 0.0) return 0.0;
  return 1.0 - (y - fitted).squaredNorm() / ss_tot;
}

struct Ols {
  bool ok = false;
  Eigen::VectorXd coef;
  double r2 = 0.0;
};

// OLS with intercept on standardized predictors; coefficients returned on
// the original scale as [intercept, slopes...].
Ols ols(const Eigen::VectorXd& y, const std::vector<Eigen::VectorXd>& predictors) {
  const Eigen::Index n = y.size();
  const Eigen::Index p = static_cast<Eigen::Index>(predictors.size());
  Eigen::MatrixXd Z(n, p + 1);
  Z.col(0).setOnes();
  std::vector<double> mu(predictors.size()), sd(predictors.size());
  for (std::size_t k = 0; k < predictors.size(); ++k) {
    const auto& x = predictors[k];
    mu[k] = x.mean();
    sd[k] = std::sqrt((x.array() - mu[k]).square().sum() / static_cast<double>(n));
    if (!(sd[k] > 0.0)) return {};
    Z.col(static_cast<Eigen::Index>(k) + 1) = (x.array() - mu[k]) / sd[k];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Z);
  qr.setThreshold(1e-9);
  if (qr.rank() < p + 1) return {};
  const Eigen::VectorXd beta = qr.solve(y);
  Ols out;
  out.ok = true;
  out.r2 = r_squared(y, Z * beta);
  out.coef.resize(p + 1);
  out.coef(0) = beta(0);
  for (std::size_t k = 0; k < predictors.size(); ++k) {
    const Eigen::Index i = static_cast<Eigen::Index>(k) + 1;
    out.coef(i) = beta(i) / sd[k];
    out.coef(0) -= out.coef(i) * mu[k];
  }
  return out;
}

}  // namespace

double estimate_kl_raw(const Tensor& real, const Tensor& replay, std::size_t k) {
  if (k < 1) throw ContractError("k-NN KL needs k >= 1");
  if (real.rank() != 2 || replay.rank() != 2 || real.cols() != replay.cols() || real.cols() == 0) {
    throw ShapeError("estimate_kl: feature matrices [n, d] with equal d required");
  }
  const std::size_t n = real.rows(), m = replay.rows(), d = real.cols();
  if (n <= k || m <= k) {
    throw ContractError("estimate_kl: need more than k=" + std::to_string(k) + " points in each set (got " +
                        std::to_string(n) + " and " + std::to_string(m) + ")");
  }
  std::vector<double> scratch;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* q = real.data() + i * d;
    const double rho = kth_distance(q, real, k, i, scratch);
    const double nu = kth_distance(q, replay, k, std::numeric_limits<std::size_t>::max(), scratch);
    sum += std::log(nu / rho);
  }
  const double estimate = static_cast<double>(d) / static_cast<double>(n) * sum +
                          std::log(static_cast<double>(m) / static_cast<double>(n - 1));
  return estimate;
}

double estimate_kl(const Tensor& real, const Tensor& replay, std::size_t k) {
  return std::max(0.0, estimate_kl_raw(real, replay, k));
}

double mean_row_norm(const Tensor& features) {
  if (features.rows() == 0) return 0.0;
  return as_matrix(features).rowwise().norm().mean();
}

Tensor append_label_coordinates(const Tensor& features, std::span<const int> labels, std::span<const int> classes,
                                double scale) {
  const std::size_t n = features.rows(), d = features.cols(), c = classes.size();
  if (labels.size() != n) throw ShapeError("one label per feature row required");
  Tensor out({n, d + c}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(features.data() + i * d, d, out.data() + i * (d + c));
    const auto it = std::find(classes.begin(), classes.end(), labels[i]);
    if (it == classes.end()) throw ContractError("label " + std::to_string(labels[i]) + " not among the classes");
    out[i * (d + c) + d + static_cast<std::size_t>(it - classes.begin())] = scale;
  }
  return out;
}

double fisher_drift(std::span<const double> theta_final, const FisherAnchor& anchor) {
  return fisher_weighted_drift(theta_final, anchor);
}

RegressionFit fit_regression(std::span<const BoundTerms> terms) {
  if (terms.size() < 3) throw ContractError("regression needs at least 3 observations");
  const Eigen::Index n = static_cast<Eigen::Index>(terms.size());
  Eigen::VectorXd y(n), kl(n), drift(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    y(i) = terms[static_cast<std::size_t>(i)].observed_forgetting;
    kl(i) = terms[static_cast<std::size_t>(i)].kl_estimate;
    drift(i) = terms[static_cast<std::size_t>(i)].drift;
  }
  RegressionFit fit;
  fit.n = terms.size();
  const Ols joint = ols(y, {kl, drift});
  if (!joint.ok) {
    fit.degenerate = true;
    fit.note = "rank-deficient design (constant or collinear predictors)";
    return fit;
  }
  fit.intercept = joint.coef(0);
  fit.a = joint.coef(1);
  fit.b = joint.coef(2);
  fit.r2_joint = joint.r2;
  fit.r2_kl_only = ols(y, {kl}).r2;
  fit.r2_drift_only = ols(y, {drift}).r2;
  return fit;
}

void to_json(nlohmann::json& j, const RegressionFit& f) {
  j = {{"degenerate", f.degenerate}, {"n", f.n}, {"r2_joint", f.r2_joint}, {"r2_kl_only", f.r2_kl_only},
       {"r2_drift_only", f.r2_drift_only}};
  if (f.degenerate) {
    j["note"] = f.note;
  } else {
    j["a"] = f.a;
    j["b"] = f.b;
    j["intercept"] = f.intercept;
  }
}

PinskerCheck pinsker_gap_check(std::span<const double> losses_real, std::span<const double> losses_replay,
                               double L_max, double kl) {
  if (losses_real.empty() || losses_replay.empty()) throw ContractError("Pinsker check needs samples on both sides");
  if (L_max < 0.0 || kl < 0.0) throw ContractError("Pinsker check needs L_max >= 0 and kl >= 0");
  auto moments = [L_max](std::span<const double> xs) {
    double mean = 0.0;
    for (double x : xs) mean += std::clamp(x, 0.0, L_max);
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += std::pow(std::clamp(x, 0.0, L_max) - mean, 2);
    var = xs.size() > 1 ? var / static_cast<double>(xs.size() - 1) : 0.0;
    return std::pair{mean, var / static_cast<double>(xs.size())};
  };
  const auto [mr, vr] = moments(losses_real);
  const auto [mp, vp] = moments(losses_replay);
  PinskerCheck c;
  c.gap = std::abs(mr - mp);
  c.bound = L_max * std::sqrt(kl / 2.0);
  c.slack = 2.576 * std::sqrt(vr + vp);
  c.holds = c.gap <= c.bound + c.slack;
  return c;
}

BoundSurface bound_surface(double alpha, double beta, std::span<const double> delta_grid,
                           std::span<const double> lambda_grid) {
  if (delta_grid.empty() || lambda_grid.empty()) throw ContractError("bound surface needs nonempty grids");
  for (double l : lambda_grid)
    if (!(l > 0.0)) throw ContractError("bound surface: lambda must be positive");
  for (double d : delta_grid)
    if (d < 0.0) throw ContractError("bound surface: delta must be nonnegative");
  BoundSurface s;
  s.alpha = alpha;
  s.beta = beta;
  s.delta.assign(delta_grid.begin(), delta_grid.end());
  s.lambda.assign(lambda_grid.begin(), lambda_grid.end());
  for (double d : s.delta)
    for (double l : s.lambda) s.values.push_back(alpha * d + beta / l);
  return s;
}

void write_bound_terms_csv(const std::filesystem::path& path, std::span<const BoundTerms> terms) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.precision(17);
  out << "task_id,kl_estimate,drift,observed_forgetting,tv_weighted\n";
  for (const auto& t : terms) {
    out << t.task_id << ',' << t.kl_estimate << ',' << t.drift << ',' << t.observed_forgetting << ',' << t.tv_weighted
        << '\n';
  }
}

std::vector<BoundTerms> read_bound_terms_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<BoundTerms> terms;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    BoundTerms t;
    if (!(row >> t.task_id >> t.kl_estimate >> t.drift >> t.observed_forgetting >> t.tv_weighted)) {
      throw SchemaError("malformed bound-terms row in " + path.string() + ": " + line);
    }
    terms.push_back(t);
  }
  return terms;
}

}  // namespace ewcdr
