#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ewcdr/bound_diagnostics.hpp"
#include "ewcdr/continual_trainer.hpp"
#include "ewcdr/metrics.hpp"

namespace ewcdr {

struct StoredRun;

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> err;  // optional half-width bars
  bool as_line = false;     // polyline only, even in a points-only chart
};

struct LineChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  bool points_only = false;
  std::vector<std::string> notes;  // extra text lines under the title
};

std::string svg_line_chart(const LineChart& chart);
// Rows top to bottom, columns left to right; values mapped onto a
// white-to-blue ramp between lo and hi.
std::string svg_heatmap(const std::string& title, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels, const std::vector<std::vector<double>>& values,
                        const std::string& row_axis, const std::string& col_axis);

std::string svg_accuracy_matrix(const AccuracyMatrix& m, const std::string& title);
std::string svg_loss_trace(const RunRecord& record);

// One image plus the data behind it, as CSV.
struct PlotOutput {
  std::string name;
  std::string svg;
  std::string csv;
};

// Final average accuracy against replay budget, one line per method.
// Throws ConfigError naming the budget axis when fewer than two budgets exist.
PlotOutput plot_budget(const std::vector<StoredRun>& runs);
// Final average accuracy against DDPM timesteps, one line per (method, schedule).
PlotOutput plot_timesteps(const std::vector<StoredRun>& runs);
// alpha * delta + beta / lambda over a grid; throws if the grid
// data is not monotone.
PlotOutput plot_surface(double alpha, double beta);
// Observed forgetting against KL and drift with the fitted plane.
PlotOutput plot_bound_scatter(const std::vector<StoredRun>& runs);

}  // namespace ewcdr
