#include "ewcdr/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "ewcdr/errors.hpp"
#include "ewcdr/experiment.hpp"

namespace ewcdr {

namespace {

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

struct Box {
  double x, y, w, h;
};

struct Range {
  double lo = 0.0, hi = 1.0;
};

Range range_of(const std::vector<Series>& series, bool use_x) {
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : series) {
    const auto& v = use_x ? s.x : s.y;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double e = (!use_x && i < s.err.size()) ? s.err[i] : 0.0;
      lo = std::min(lo, v[i] - e);
      hi = std::max(hi, v[i] + e);
    }
  }
  if (!std::isfinite(lo)) return {};
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

// Renders one chart into `box` (plot area plus its own axes and labels).
std::string render_chart(const LineChart& chart, Box box, bool legend) {
  const double left = 62, right = legend ? 150 : 16, top = 34 + 14.0 * chart.notes.size(), bottom = 46;
  const Box area{box.x + left, box.y + top, box.w - left - right, box.h - top - bottom};
  const Range xr = range_of(chart.series, true), yr = range_of(chart.series, false);
  auto px = [&](double v) { return area.x + (v - xr.lo) / (xr.hi - xr.lo) * area.w; };
  auto py = [&](double v) { return area.y + area.h - (v - yr.lo) / (yr.hi - yr.lo) * area.h; };

  std::ostringstream o;
  o << "<text x='" << box.x + box.w / 2 << "' y='" << box.y + 18
    << "' text-anchor='middle' font-size='14' font-weight='bold'>" << esc(chart.title) << "</text>\n";
  for (std::size_t i = 0; i < chart.notes.size(); ++i)
    o << "<text x='" << box.x + box.w / 2 << "' y='" << box.y + 32 + 14.0 * i
      << "' text-anchor='middle' font-size='11'>" << esc(chart.notes[i]) << "</text>\n";
  o << "<rect x='" << area.x << "' y='" << area.y << "' width='" << area.w << "' height='" << area.h
    << "' fill='none' stroke='#444'/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = xr.lo + (xr.hi - xr.lo) * i / 4.0, yv = yr.lo + (yr.hi - yr.lo) * i / 4.0;
    o << "<line x1='" << px(xv) << "' y1='" << area.y + area.h << "' x2='" << px(xv) << "' y2='" << area.y + area.h + 4
      << "' stroke='#444'/><text x='" << px(xv) << "' y='" << area.y + area.h + 16
      << "' text-anchor='middle' font-size='10'>" << num(xv) << "</text>\n";
    o << "<line x1='" << area.x - 4 << "' y1='" << py(yv) << "' x2='" << area.x << "' y2='" << py(yv)
      << "' stroke='#444'/><text x='" << area.x - 6 << "' y='" << py(yv) + 3
      << "' text-anchor='end' font-size='10'>" << num(yv) << "</text>\n";
  }
  o << "<text x='" << area.x + area.w / 2 << "' y='" << box.y + box.h - 8 << "' text-anchor='middle' font-size='12'>"
    << esc(chart.x_label) << "</text>\n";
  o << "<text transform='translate(" << box.x + 14 << "," << area.y + area.h / 2
    << ") rotate(-90)' text-anchor='middle' font-size='12'>" << esc(chart.y_label) << "</text>\n";

  for (std::size_t s = 0; s < chart.series.size(); ++s) {
    const auto& series = chart.series[s];
    const char* color = kPalette[s % std::size(kPalette)];
    if ((series.as_line || !chart.points_only) && series.x.size() > 1) {
      o << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
      for (std::size_t i = 0; i < series.x.size(); ++i) o << px(series.x[i]) << ',' << py(series.y[i]) << ' ';
      o << "'/>\n";
    }
    if (!series.as_line && (chart.points_only || series.x.size() <= 50)) {
      for (std::size_t i = 0; i < series.x.size(); ++i) {
        o << "<circle cx='" << px(series.x[i]) << "' cy='" << py(series.y[i]) << "' r='3' fill='" << color << "'/>\n";
        if (i < series.err.size() && series.err[i] > 0)
          o << "<line x1='" << px(series.x[i]) << "' y1='" << py(series.y[i] - series.err[i]) << "' x2='"
            << px(series.x[i]) << "' y2='" << py(series.y[i] + series.err[i]) << "' stroke='" << color << "'/>\n";
      }
    }
    if (legend) {
      const double ly = area.y + 8 + 16.0 * s;
      o << "<rect x='" << area.x + area.w + 12 << "' y='" << ly - 8 << "' width='10' height='10' fill='" << color
        << "'/><text x='" << area.x + area.w + 26 << "' y='" << ly + 1 << "' font-size='11'>" << esc(series.name)
        << "</text>\n";
    }
  }
  return o.str();
}

std::string svg_document(double w, double h, const std::string& body) {
  std::ostringstream o;
  o << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "' viewBox='0 0 " << w << ' '
    << h << "' font-family='sans-serif'>\n<rect width='100%' height='100%' fill='white'/>\n"
    << body << "</svg>\n";
  return o.str();
}

std::string config_string(const RunRecord& r, const std::string& dotted) {
  const auto& v = at_path(r.config, dotted);
  return v.is_string() ? v.get<std::string>() : v.dump();
}

// (line name, x) -> accuracies, for plots of final accuracy over one axis.
PlotOutput accuracy_over_axis(const std::vector<StoredRun>& runs, const std::string& name, const std::string& axis_key,
                              const std::string& axis_name, const std::string& x_label,
                              const std::function<std::string(const RunRecord&)>& line_of) {
  std::map<std::string, std::map<double, std::vector<double>>> data;
  std::set<double> xs;
  for (const auto& run : runs) {
    const auto& v = at_path(run.record.config, axis_key);
    if (!v.is_number()) continue;
    xs.insert(v.get<double>());
    data[line_of(run.record)][v.get<double>()].push_back(run.record.metrics.average_accuracy);
  }
  if (xs.size() < 2)
    throw ConfigError("plot " + name + ": sweep axis '" + axis_name + "' (" + axis_key + ") is absent; found " +
                      std::to_string(xs.size()) + " distinct value(s)");
  LineChart chart{"Final average accuracy vs " + x_label, x_label, "average accuracy", {}, false, {}};
  std::ostringstream csv;
  csv << "line," << axis_name << ",n,mean_accuracy,std_accuracy\n";
  for (const auto& [line, points] : data) {
    Series s{line, {}, {}, {}};
    for (const auto& [x, values] : points) {
      const Stat st = summarize(values);
      s.x.push_back(x);
      s.y.push_back(st.mean);
      s.err.push_back(st.std);
      csv << line << ',' << num(x) << ',' << st.n << ',' << st.mean << ',' << st.std << '\n';
    }
    chart.series.push_back(std::move(s));
  }
  return {name, svg_line_chart(chart), csv.str()};
}

}  // namespace

std::string svg_line_chart(const LineChart& chart) {
  const double w = 720, h = 440;
  return svg_document(w, h, render_chart(chart, {0, 0, w, h}, true));
}

std::string svg_heatmap(const std::string& title, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels, const std::vector<std::vector<double>>& values,
                        const std::string& row_axis, const std::string& col_axis) {
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& row : values)
    for (double v : row)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi - lo < 1e-12) hi = lo + 1;
  const double cell = std::clamp(360.0 / std::max(row_labels.size(), col_labels.size()), 14.0, 60.0);
  const double left = 90, top = 50;
  const double w = left + cell * col_labels.size() + 30, h = top + cell * row_labels.size() + 60;
  const bool text = cell >= 36;
  std::ostringstream o;
  o << "<text x='" << w / 2 << "' y='20' text-anchor='middle' font-size='14' font-weight='bold'>" << esc(title)
    << "</text>\n";
  for (std::size_t r = 0; r < row_labels.size(); ++r) {
    o << "<text x='" << left - 6 << "' y='" << top + cell * (r + 0.5) + 4 << "' text-anchor='end' font-size='10'>"
      << esc(row_labels[r]) << "</text>\n";
    for (std::size_t c = 0; c < col_labels.size(); ++c) {
      const double v = values[r][c];
      std::string fill = "#dddddd";
      if (std::isfinite(v)) {
        const double t = (v - lo) / (hi - lo);
        const int red = static_cast<int>(255 - 215 * t), green = static_cast<int>(255 - 155 * t);
        char buf[16];
        std::snprintf(buf, sizeof(buf), "#%02x%02xff", red, green);
        fill = buf;
      }
      o << "<rect x='" << left + cell * c << "' y='" << top + cell * r << "' width='" << cell << "' height='" << cell
        << "' fill='" << fill << "' stroke='white'/>\n";
      if (text && std::isfinite(v))
        o << "<text x='" << left + cell * (c + 0.5) << "' y='" << top + cell * (r + 0.5) + 4
          << "' text-anchor='middle' font-size='10'>" << num(v) << "</text>\n";
    }
  }
  for (std::size_t c = 0; c < col_labels.size(); ++c)
    if (text || c % std::max<std::size_t>(1, col_labels.size() / 8) == 0)
      o << "<text x='" << left + cell * (c + 0.5) << "' y='" << top + cell * row_labels.size() + 14
        << "' text-anchor='middle' font-size='10'>" << esc(col_labels[c]) << "</text>\n";
  o << "<text x='" << left + cell * col_labels.size() / 2 << "' y='" << h - 14
    << "' text-anchor='middle' font-size='12'>" << esc(col_axis) << "</text>\n";
  o << "<text transform='translate(16," << top + cell * row_labels.size() / 2
    << ") rotate(-90)' text-anchor='middle' font-size='12'>" << esc(row_axis) << "</text>\n";
  return svg_document(w, h, o.str());
}

std::string svg_accuracy_matrix(const AccuracyMatrix& m, const std::string& title) {
  const int K = m.num_tasks();
  std::vector<std::string> rows, cols;
  std::vector<std::vector<double>> values(K, std::vector<double>(K, NAN));
  for (int j = 1; j <= K; ++j) {
    rows.push_back("task " + std::to_string(j));
    cols.push_back("after " + std::to_string(j));
    for (int t = j; t <= K; ++t)
      if (m.has(j, t)) values[j - 1][t - 1] = m.at(j, t);
  }
  return svg_heatmap("Accuracy matrix (" + title + ")", rows, cols, values, "evaluated task", "training step");
}

std::string svg_loss_trace(const RunRecord& record) {
  Series ce{"cross-entropy", {}, {}, {}}, pen{"penalty", {}, {}, {}}, total{"total", {}, {}, {}};
  double step = 0;
  for (const auto& t : record.tasks)
    for (const auto& s : t.steps) {
      ce.x.push_back(step);
      ce.y.push_back(s.ce);
      pen.x.push_back(step);
      pen.y.push_back(s.penalty);
      total.x.push_back(step);
      total.y.push_back(s.total);
      step += 1;
    }
  LineChart chart{"Classifier objective per step", "step", "loss", {total, ce, pen}, false, {}};
  return svg_line_chart(chart);
}

PlotOutput plot_budget(const std::vector<StoredRun>& runs) {
  return accuracy_over_axis(runs, "budget", "train.replay_budget_mb", "budget_mb", "replay budget (MiB)",
                            [](const RunRecord& r) { return to_string(r.method); });
}

PlotOutput plot_timesteps(const std::vector<StoredRun>& runs) {
  return accuracy_over_axis(runs, "timesteps", "ddpm.timesteps", "timesteps", "DDPM timesteps T",
                            [](const RunRecord& r) {
                              return to_string(r.method) + " / " + config_string(r, "ddpm.schedule");
                            });
}

PlotOutput plot_surface(double alpha, double beta) {
  if (alpha < 0 || beta < 0) throw ConfigError("plot surface: alpha and beta must be nonnegative");
  std::vector<double> delta, lambda;
  for (int i = 0; i <= 20; ++i) delta.push_back(0.1 * i);
  for (int i = 0; i < 20; ++i) lambda.push_back(std::pow(10.0, 3.0 * i / 19.0) * 0.1);  // 0.1 .. 100
  const BoundSurface s = bound_surface(alpha, beta, delta, lambda);
  // The rendered grid must be nondecreasing in delta and nonincreasing in lambda.
  for (std::size_t i = 0; i < delta.size(); ++i)
    for (std::size_t j = 0; j < lambda.size(); ++j) {
      if (i > 0 && s.at(i, j) < s.at(i - 1, j)) throw ContractError("bound surface not monotone in delta");
      if (j > 0 && s.at(i, j) > s.at(i, j - 1)) throw ContractError("bound surface not monotone in lambda");
    }
  std::vector<std::string> rows, cols;
  std::vector<std::vector<double>> values;
  std::ostringstream csv;
  csv << "delta,lambda,bound\n";
  for (std::size_t ii = delta.size(); ii-- > 0;) {
    rows.push_back(num(delta[ii]));
    values.emplace_back();
    for (std::size_t j = 0; j < lambda.size(); ++j) values.back().push_back(s.at(ii, j));
  }
  for (double l : lambda) cols.push_back(num(l));
  for (std::size_t i = 0; i < delta.size(); ++i)
    for (std::size_t j = 0; j < lambda.size(); ++j) csv << num(delta[i]) << ',' << num(lambda[j]) << ',' << s.at(i, j) << '\n';
  const std::string title = "Forgetting bound surface (alpha=" + num(alpha) + ", beta=" + num(beta) + ")";
  return {"surface", svg_heatmap(title, rows, cols, values, "distribution shift delta", "EWC strength lambda"),
          csv.str()};
}

PlotOutput plot_bound_scatter(const std::vector<StoredRun>& runs) {
  std::vector<BoundTerms> terms;
  for (const auto& r : runs)
    for (const auto& t : r.record.bound_terms()) terms.push_back(t);
  if (terms.size() < 4)
    throw ConfigError("plot bound-scatter: needs runs with diagnostics (KL and drift); found " +
                      std::to_string(terms.size()) + " task rows");
  const RegressionFit fit = fit_regression(terms);
  std::ostringstream csv;
  csv << "kl,drift,observed_forgetting,fitted\n";
  double mean_kl = 0, mean_drift = 0;
  for (const auto& t : terms) {
    mean_kl += t.kl_estimate / terms.size();
    mean_drift += t.drift / terms.size();
  }
  Series kl_pts{"runs", {}, {}, {}}, drift_pts{"runs", {}, {}, {}}, fitted_pts{"runs", {}, {}, {}};
  for (const auto& t : terms) {
    const double f = fit.degenerate ? NAN : fit.a * t.kl_estimate + fit.b * t.drift + fit.intercept;
    kl_pts.x.push_back(t.kl_estimate);
    kl_pts.y.push_back(t.observed_forgetting);
    drift_pts.x.push_back(t.drift);
    drift_pts.y.push_back(t.observed_forgetting);
    if (!fit.degenerate) {
      fitted_pts.x.push_back(f);
      fitted_pts.y.push_back(t.observed_forgetting);
    }
    csv << t.kl_estimate << ',' << t.drift << ',' << t.observed_forgetting << ',' << f << '\n';
  }
  std::vector<std::string> notes;
  if (fit.degenerate) {
    notes.push_back("degenerate fit: " + fit.note);
  } else {
    notes.push_back("F = " + num(fit.a) + " KL + " + num(fit.b) + " drift + " + num(fit.intercept));
    notes.push_back("R2 joint " + num(fit.r2_joint) + ", KL only " + num(fit.r2_kl_only) + ", drift only " +
                    num(fit.r2_drift_only));
  }
  auto plane_line = [&](const Series& pts, bool kl_axis) {
    Series line{"fitted plane", {}, {}, {}, true};
    if (fit.degenerate || pts.x.empty()) return line;
    const auto [lo, hi] = std::minmax_element(pts.x.begin(), pts.x.end());
    for (double x : {*lo, *hi}) {
      line.x.push_back(x);
      line.y.push_back(kl_axis ? fit.a * x + fit.b * mean_drift + fit.intercept
                               : fit.a * mean_kl + fit.b * x + fit.intercept);
    }
    return line;
  };
  LineChart a{"Forgetting vs KL", "KL estimate (nats)", "observed forgetting", {kl_pts}, true, {}};
  LineChart b{"Forgetting vs drift", "Fisher-weighted drift", "observed forgetting", {drift_pts}, true, {}};
  LineChart c{"Observed vs fitted", "fitted forgetting", "observed forgetting", {fitted_pts}, true, {}};
  if (!fit.degenerate) {
    a.series.push_back(plane_line(kl_pts, true));
    b.series.push_back(plane_line(drift_pts, false));
  }
  std::string body;
  body += "<text x='600' y='20' text-anchor='middle' font-size='12'>";
  for (std::size_t i = 0; i < notes.size(); ++i) body += (i ? " | " : "") + esc(notes[i]);
  body += "</text>\n";
  body += render_chart(a, {0, 30, 400, 380}, false);
  body += render_chart(b, {400, 30, 400, 380}, false);
  body += render_chart(c, {800, 30, 400, 380}, false);
  return {"bound_scatter", svg_document(1200, 420, body), csv.str()};
}

}  // namespace ewcdr
