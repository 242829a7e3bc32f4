#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ewcdr/ewc.hpp"
#include "ewcdr/tensor.hpp"

namespace ewcdr {

struct BoundTerms {
  int task_id = 0;
  double kl_estimate = 0.0;
  double drift = 0.0;
  double observed_forgetting = 0.0;
  // Pinsker total-variation proxy min(1, sqrt(KL/2)) weighted by the task's
  // share of the data seen so far; reported, never regressed.
  double tv_weighted = 0.0;
};

// Wang-Kulkarni-Verdu k-NN estimate of KL(real || replay) in nats, clamped
// at zero. Rows are points. Brute-force Euclidean neighbours.
double estimate_kl(const Tensor& real_features, const Tensor& replay_features, std::size_t k = 5);
// The same estimate before clamping; can be slightly negative when the two
// sets come from one distribution.
double estimate_kl_raw(const Tensor& real_features, const Tensor& replay_features, std::size_t k = 5);

// Appends one-hot label coordinates scaled by the mean feature norm so that
// the divergence is taken over joint (feature, label) points.
Tensor append_label_coordinates(const Tensor& features, std::span<const int> labels, std::span<const int> classes,
                                double scale);
double mean_row_norm(const Tensor& features);

double fisher_drift(std::span<const double> theta_final, const FisherAnchor& anchor);

struct RegressionFit {
  bool degenerate = false;
  std::string note;
  double a = 0.0;
  double b = 0.0;
  double intercept = 0.0;
  double r2_joint = 0.0;
  double r2_kl_only = 0.0;
  double r2_drift_only = 0.0;
  std::size_t n = 0;
};

// OLS of observed forgetting on (KL, drift) with intercept, plus the two
// single-predictor fits. A rank-deficient design yields degenerate = true
// and no coefficients.
RegressionFit fit_regression(std::span<const BoundTerms> terms);
void to_json(nlohmann::json& j, const RegressionFit& fit);

struct PinskerCheck {
  double gap = 0.0;    // |mean real loss - mean replay loss|
  double bound = 0.0;  // L_max * sqrt(kl / 2)
  double slack = 0.0;  // 99% two-sided normal interval on the mean difference
  bool holds = false;
};

PinskerCheck pinsker_gap_check(std::span<const double> losses_real, std::span<const double> losses_replay,
                               double L_max, double kl);

struct BoundSurface {
  double alpha = 0.0;
  double beta = 0.0;
  std::vector<double> delta;
  std::vector<double> lambda;
  std::vector<double> values;  // [delta.size() x lambda.size()], row-major

  double at(std::size_t i, std::size_t j) const { return values[i * lambda.size() + j]; }
};

BoundSurface bound_surface(double alpha, double beta, std::span<const double> delta_grid,
                           std::span<const double> lambda_grid);

void write_bound_terms_csv(const std::filesystem::path& path, std::span<const BoundTerms> terms);
std::vector<BoundTerms> read_bound_terms_csv(const std::filesystem::path& path);

}  // namespace ewcdr
