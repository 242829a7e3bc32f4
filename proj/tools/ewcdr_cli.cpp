// Experiment driver: run, report, plot, inspect-buffer.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <deque>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "ewcdr/experiment.hpp"
#include "ewcdr/plots.hpp"
#include "ewcdr/replay_buffer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ewcdr;

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    if (part.empty()) continue;
    try {
      const auto dash = part.find('-');
      if (dash == std::string::npos) {
        seeds.push_back(std::stoull(part));
      } else {
        const auto lo = std::stoull(part.substr(0, dash)), hi = std::stoull(part.substr(dash + 1));
        if (hi < lo) throw ConfigError("");
        for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
      }
    } catch (const std::exception&) {
      throw ConfigError("--seeds: cannot read '" + part + "' (use 0,1,2 or 0-4)");
    }
  }
  if (seeds.empty()) throw ConfigError("--seeds: empty list");
  return seeds;
}

void ensure_writable(const fs::path& root) {
  std::error_code ec;
  fs::create_directories(root / "runs", ec);
  const fs::path probe = root / ".write_probe";
  std::ofstream out(probe);
  if (ec || !out) throw ConfigError("output_dir: " + root.string() + " is not writable");
  out.close();
  fs::remove(probe);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

std::string fmt(const json& v, int digits) {
  if (!v.is_number()) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v.get<double>());
  return buf;
}

RunStatus status_from_disk(const RunPoint& point, const fs::path& root) {
  RunStatus s{point.id, "failed", "worker exited without a status", std::nullopt};
  const fs::path dir = run_directory(root, point.id);
  try {
    std::ifstream in(dir / "status.json");
    if (in) {
      const json sj = json::parse(in);
      s.status = sj.at("status");
      s.message = sj.value("error", "");
    }
    if (s.status == "ok") {
      std::ifstream rin(dir / "record.json");
      const RunRecord r = RunRecord::from_json(json::parse(rin));
      s.metrics = json{{"method", to_string(r.method)},
                       {"average_accuracy", r.metrics.average_accuracy},
                       {"forgetting", r.metrics.forgetting.mean},
                       {"auc", r.metrics.macro_auc.empty() || !r.metrics.macro_auc.back()
                                   ? json()
                                   : json(*r.metrics.macro_auc.back())}};
    }
  } catch (const std::exception& e) {
    s.status = "failed";
    s.message = e.what();
  }
  return s;
}

std::vector<RunStatus> run_parallel(const std::vector<RunPoint>& points, const fs::path& root,
                                    const ExecuteOptions& options, int jobs) {
  std::vector<RunStatus> statuses(points.size());
  std::deque<std::size_t> queue;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!options.force && fs::exists(run_directory(root, points[i].id) / "record.json")) {
      statuses[i] = execute_run(points[i], root, options, nullptr);  // reports the skip
    } else {
      queue.push_back(i);
    }
  }
  std::map<pid_t, std::size_t> running;
  auto reap_one = [&] {
    int wstatus = 0;
    const pid_t pid = ::wait(&wstatus);
    if (pid <= 0) return;
    const std::size_t i = running.at(pid);
    running.erase(pid);
    statuses[i] = status_from_disk(points[i], root);
    std::cout << "  [" << statuses[i].status << "] " << points[i].id << std::endl;
  };
  while (!queue.empty() || !running.empty()) {
    while (!queue.empty() && static_cast<int>(running.size()) < jobs) {
      const std::size_t i = queue.front();
      queue.pop_front();
      std::cout.flush();
      std::fflush(nullptr);
      const pid_t pid = ::fork();
      if (pid < 0) throw Error("fork failed");
      if (pid == 0) {
        int code = 1;
        try {
          GeneratorCache cache(root / "cache");
          code = execute_run(points[i], root, options, &cache).status == "ok" ? 0 : 1;
        } catch (...) {
        }
        std::fflush(nullptr);
        ::_exit(code);
      }
      running[pid] = i;
    }
    if (!running.empty()) reap_one();
  }
  return statuses;
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& seeds,
            int jobs, const std::optional<double>& budget_mb, bool measure_fwt, const ExecuteOptions& options,
            const std::string& output_dir) {
  json config = load_experiment_config(config_path);
  for (const auto& o : overrides) apply_override(config, o);
  if (!seeds.empty()) config["seeds"] = parse_seeds(seeds);
  if (budget_mb) {
    if (config["sweeps"].contains("budget_mb"))
      throw ConfigError("--replay-budget-mb conflicts with sweeps.budget_mb");
    config["train"]["replay_budget_mb"] = *budget_mb;
  }
  if (measure_fwt) config["train"]["measure_fwt"] = true;
  if (!output_dir.empty()) config["output_dir"] = output_dir;
  validate_experiment_config(config);

  const auto points = expand_runs(config);
  const fs::path root = resolve_output_dir(config);
  ensure_writable(root);
  std::cout << points.size() << " run(s) into " << root.string() << std::endl;

  std::vector<RunStatus> statuses;
  if (jobs <= 1) {
    GeneratorCache cache(root / "cache");
    for (const auto& p : points) {
      statuses.push_back(execute_run(p, root, options, &cache));
      std::cout << "  [" << statuses.back().status << "] " << p.id << std::endl;
    }
  } else {
    statuses = run_parallel(points, root, options, jobs);
  }

  std::cout << "\n| run | method | seed | status | Acc | F | AUC |\n|---|---|---|---|---|---|---|\n";
  int failures = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& s = statuses[i];
    const json m = s.metrics.value_or(json::object());
    std::cout << "| " << s.id << " | " << points[i].config["train"]["method"].get<std::string>() << " | "
              << points[i].seed << " | " << s.status << " | " << fmt(m.value("average_accuracy", json()), 3)
              << " | " << fmt(m.value("forgetting", json()), 3) << " | " << fmt(m.value("auc", json()), 3) << " |\n";
    if (s.status == "failed") {
      ++failures;
      std::cerr << "run " << s.id << " failed: " << s.message << "\n";
    }
  }
  return failures == 0 ? 0 : 1;
}

fs::path default_results_dir(const std::string& given) {
  if (!given.empty()) return given;
  return resolve_output_dir(json::object());
}

int cmd_report(const fs::path& root, const std::string& md_out, const std::string& json_out) {
  const auto runs = load_runs(root);
  if (runs.empty()) throw ConfigError("no completed runs under " + (root / "runs").string());
  const std::string md = report_markdown(runs);
  const json summary = report_json(runs);
  write_file(md_out.empty() ? root / "report.md" : fs::path(md_out), md);
  write_file(json_out.empty() ? root / "report.json" : fs::path(json_out), summary.dump(2) + "\n");
  std::cout << md;
  return 0;
}

int cmd_plot(const fs::path& root, const std::string& kind, double alpha, double beta, const std::string& out_dir) {
  PlotOutput plot;
  if (kind == "surface") {
    plot = plot_surface(alpha, beta);
  } else {
    const auto runs = load_runs(root);
    if (runs.empty()) throw ConfigError("no completed runs under " + (root / "runs").string());
    if (kind == "budget") plot = plot_budget(runs);
    else if (kind == "timesteps") plot = plot_timesteps(runs);
    else if (kind == "bound-scatter") plot = plot_bound_scatter(runs);
    else throw ConfigError("unknown plot kind '" + kind + "'");
  }
  const fs::path dir = out_dir.empty() ? root / "plots" : fs::path(out_dir);
  fs::create_directories(dir);
  write_file(dir / (plot.name + ".svg"), plot.svg);
  write_file(dir / (plot.name + ".csv"), plot.csv);
  std::cout << (dir / (plot.name + ".svg")).string() << "\n" << (dir / (plot.name + ".csv")).string() << "\n";
  return 0;
}

int cmd_inspect(const fs::path& path, bool as_json) {
  const ReplayBuffer buffer = ReplayBuffer::deserialize(path);
  std::map<int, std::size_t> per_task;
  std::map<int, std::map<int, std::size_t>> per_task_class;
  std::size_t generated = 0;
  for (const auto& item : buffer.items()) {
    ++per_task[item.task_id];
    ++per_task_class[item.task_id][item.label];
    if (item.provenance == Provenance::generated) ++generated;
  }
  json j = {{"items", buffer.size()},
            {"bytes", buffer.total_bytes()},
            {"generated", generated},
            {"real", buffer.size() - generated}};
  j["budget_bytes"] = buffer.budget_bytes() == ReplayBuffer::kUnlimited ? json("unlimited") : json(buffer.budget_bytes());
  json tasks = json::object();
  for (const auto& [t, classes] : per_task_class) {
    json c = json::object();
    for (const auto& [label, n] : classes) c[std::to_string(label)] = n;
    tasks[std::to_string(t)] = {{"items", per_task[t]}, {"per_class", c}};
  }
  j["tasks"] = tasks;
  if (!buffer.empty()) {
    const auto& s = buffer.items().front().shape;
    j["image_shape"] = {s.height, s.width, s.channels};
  }
  if (as_json) {
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  std::cout << "items    " << buffer.size() << " (" << generated << " generated, " << buffer.size() - generated
            << " real)\nbytes    " << buffer.total_bytes() << "\nbudget   " << j["budget_bytes"].dump() << "\n";
  for (const auto& [t, classes] : per_task_class) {
    std::cout << "task " << t << ": " << per_task[t] << " items;";
    for (const auto& [label, n] : classes) std::cout << " class " << label << "=" << n;
    std::cout << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exemplar-free continual learning experiments"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run every (sweep point, seed) of a config");
  std::string config_path, seeds, output_dir;
  std::vector<std::string> overrides;
  int jobs = 1;
  std::optional<double> budget_mb;
  bool measure_fwt = false;
  ExecuteOptions options;
  run->add_option("--config", config_path, "YAML experiment config")->required();
  run->add_option("--set", overrides, "Override a key, e.g. train.method=ewc_only")->take_all();
  run->add_option("--seeds", seeds, "Seeds, e.g. 0,1,2 or 0-4");
  run->add_option("--jobs", jobs, "Worker processes")->check(CLI::PositiveNumber);
  run->add_option("--replay-budget-mb", budget_mb, "Replay buffer budget in MiB");
  run->add_flag("--measure-fwt", measure_fwt, "Evaluate each task before training it");
  run->add_flag("--force", options.force, "Re-run existing ids");
  run->add_flag("--save-checkpoints", options.save_checkpoints, "Keep classifier and generator checkpoints");
  run->add_option("--output-dir", output_dir, "Results root (default: config, then $EWCDR_OUTPUT_DIR)");

  auto* report = app.add_subcommand("report", "Aggregate runs into Markdown tables and a JSON summary");
  std::string results_dir, md_out, json_out;
  report->add_option("results-dir", results_dir, "Results root");
  report->add_option("--markdown", md_out, "Markdown path (default <dir>/report.md)");
  report->add_option("--json", json_out, "JSON path (default <dir>/report.json)");

  auto* plot = app.add_subcommand("plot", "Render a figure as SVG plus CSV data");
  std::string kind, plot_out;
  double alpha = 1.0, beta = 1.0;
  plot->add_option("results-dir", results_dir, "Results root");
  plot->add_option("--kind", kind, "budget | timesteps | surface | bound-scatter")
      ->required()
      ->check(CLI::IsMember({"budget", "timesteps", "surface", "bound-scatter"}));
  plot->add_option("--alpha", alpha, "Surface coefficient on the shift term");
  plot->add_option("--beta", beta, "Surface coefficient on 1/lambda");
  plot->add_option("--out", plot_out, "Directory for the files (default <dir>/plots)");

  auto* inspect = app.add_subcommand("inspect-buffer", "Summarize a serialized replay buffer");
  std::string buffer_path;
  bool as_json = false;
  inspect->add_option("path", buffer_path, "buffer.bin")->required();
  inspect->add_flag("--json", as_json, "Print JSON");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(config_path, overrides, seeds, jobs, budget_mb, measure_fwt, options, output_dir);
    if (*report) return cmd_report(default_results_dir(results_dir), md_out, json_out);
    if (*plot) return cmd_plot(default_results_dir(results_dir), kind, alpha, beta, plot_out);
    if (*inspect) return cmd_inspect(buffer_path, as_json);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const GroupingError& e) {
    std::cerr << "grouping error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
