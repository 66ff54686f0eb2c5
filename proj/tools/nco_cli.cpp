// nco: generate datasets, train, evaluate, sweep and plot.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nco/config_file.hpp"

namespace fs = std::filesystem;
using namespace nco;

namespace {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void progress(const std::string& msg) { std::cerr << msg << std::endl; }

std::string command_line(int argc, char** argv) {
  std::string s = "nco";
  for (int i = 1; i < argc; ++i) s += std::string(" ") + argv[i];
  return s;
}

struct ConfigOptions {
  std::string preset = "paper";
  std::string file;
  std::vector<std::string> overrides;
  std::vector<std::pair<std::string, std::string>> flags;  // applied between file and overrides

  void add(CLI::App* app, bool with_preset) {
    if (with_preset) {
      app->add_option("--preset", preset, "Base configuration before the config file")
          ->check(CLI::IsMember({"paper", "desk"}));
    }
    app->add_option("--config", file, "INI config file")->check(CLI::ExistingFile);
    app->add_option("--set", overrides, "Override section.key=value (repeatable)");
  }

  void flag(const std::string& key, const std::string& value) { flags.emplace_back(key, value); }

  RunConfig resolve() const {
    RunConfig cfg;
    if (preset == "desk") cfg.train = TrainConfig::desk();
    if (!file.empty()) apply_ini_file(cfg, file);
    for (const auto& [k, v] : flags) set_config_value(cfg, k, v);
    for (const auto& o : overrides) apply_override(cfg, o);
    cfg.validate();
    return cfg;
  }
};

void echo_config(const RunConfig& cfg, const fs::path& dir, const std::string& cmdline) {
  write_ini_file(cfg, (dir / "config.ini").string(), {cmdline});
}

fs::path prepare_dir(const std::string& dir) {
  fs::create_directories(dir);
  return fs::path(dir);
}

// ---- generate ----

struct GenerateArgs {
  std::size_t size = 0;
  std::size_t count = 0;
  std::uint64_t seed = 1;
  std::string solve = "none";
  std::string out;
};

int cmd_generate(const GenerateArgs& a, std::size_t workers) {
  if (a.size < 2) throw UsageError("--size must be at least 2");
  if (a.solve == "heldkarp" && a.size > kHeldKarpMaxNodes) {
    throw UsageError("heldkarp supports at most " + std::to_string(kHeldKarpMaxNodes) + " nodes");
  }
  if (a.solve == "bruteforce" && a.size > kBruteForceMaxNodes) {
    throw UsageError("bruteforce supports at most " + std::to_string(kBruteForceMaxNodes) + " nodes");
  }
  Dataset ds = make_dataset(a.size, a.count, a.seed, "none");
  ds.meta.solver = a.solve;
  if (a.solve != "none") {
    ds.solutions.assign(a.count, Tour{});
    std::atomic<std::size_t> done{0};
    std::mutex mu;
    parallel_for(a.count, workers, [&](std::size_t i) {
      ds.solutions[i] = solve_with(a.solve, ds.instances[i]);
      const std::size_t d = ++done;
      if (d % 1000 == 0) {
        std::lock_guard lock(mu);
        progress("solved " + std::to_string(d) + "/" + std::to_string(a.count));
      }
    });
  }
  if (auto parent = fs::path(a.out).parent_path(); !parent.empty()) fs::create_directories(parent);
  write_dataset(ds, a.out);
  progress("wrote " + std::to_string(a.count) + " instances to " + a.out);
  return 0;
}

// ---- train ----

struct TrainArgs {
  ConfigOptions config;
  std::string paradigm, baseline, encoder, data, val_data, out;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  bool resume = false;
};

Dataset load_labelled(const std::string& path, const char* what) {
  Dataset ds = read_dataset(path);
  if (ds.instances.empty()) throw UsageError(std::string(what) + " '" + path + "' is empty");
  if (!ds.labelled()) throw UsageError(std::string(what) + " '" + path + "' has no solutions");
  return ds;
}

int cmd_train(TrainArgs a, const std::string& cmdline) {
  if (!a.paradigm.empty()) a.config.flag("train.paradigm", a.paradigm);
  if (!a.baseline.empty()) a.config.flag("train.baseline", a.baseline);
  if (!a.encoder.empty()) a.config.flag("model.encoder", a.encoder);
  if (a.epochs) a.config.flag("train.epochs", std::to_string(*a.epochs));
  if (a.seed) a.config.flag("train.seed", std::to_string(*a.seed));
  RunConfig cfg = a.config.resolve();
  TrainConfig& tc = cfg.train;

  std::optional<Dataset> train_ds, val_ds;
  if (tc.paradigm == Paradigm::sl && a.data.empty()) throw UsageError("supervised training needs --data");
  if (!a.data.empty()) {
    train_ds = load_labelled(a.data, "training data");
    const std::size_t n = train_ds->instances.front().size();
    if (!cfg.explicit_keys.count("train.graph_size")) {
      tc.graph_size = n;
    } else if (tc.graph_size != n) {
      throw UsageError("training data has n=" + std::to_string(n) + " but train.graph_size=" +
                       std::to_string(tc.graph_size));
    }
  }
  if (!a.val_data.empty()) {
    val_ds = load_labelled(a.val_data, "validation data");
    if (val_ds->instances.front().size() != tc.graph_size) throw UsageError("validation data has the wrong size");
  }

  const fs::path dir = prepare_dir(a.out);
  echo_config(cfg, dir, cmdline);
  TrainOptions opt;
  opt.checkpoint_path = (dir / "checkpoint.bin").string();
  opt.resume = a.resume;
  opt.progress = progress;
  const TrainData data{train_ds ? &*train_ds : nullptr, val_ds ? &*val_ds : nullptr};
  const TrainResult res = train(tc, data, opt);
  if (res.epochs_completed == 0) save_model(opt.checkpoint_path, res.model);

  std::ofstream log((dir / "train_log.csv").string());
  res.log.write_csv(log);
  if (!log) throw std::runtime_error("cannot write train_log.csv");

  std::optional<double> gap;
  for (const auto& row : res.log.rows)
    if (row.val_gap) gap = row.val_gap;
  nlohmann::json summary = {{"checkpoint", opt.checkpoint_path},
                            {"epochs", res.epochs_completed},
                            {"mini_batches", res.log.rows.empty() ? 0 : res.log.rows.back().mini_batch},
                            {"baseline_replacements", res.replacements}};
  summary["final_val_gap_pct"] = gap ? nlohmann::json(*gap) : nlohmann::json(nullptr);
  std::cout << summary.dump() << std::endl;
  return 0;
}

// ---- eval / sweep ----

struct LoadedModel {
  PolicyModel model;
  RunInfo info;
};

LoadedModel load_checkpoint(const std::string& path, const std::string& name) {
  const Container c = load_container(path);
  LoadedModel m{model_from_container(c), {}};
  const auto& h = c.header;
  const std::string encoder = to_string(m.model.config().encoder.kind);
  if (h.contains("train")) {
    const TrainConfig tc = train_config_from_json(h.at("train"));
    m.info.paradigm = to_string(tc.paradigm);
    m.info.train_size = tc.graph_size;
    m.info.model = m.info.paradigm + (tc.paradigm == Paradigm::rl ? "-" + to_string(tc.baseline) : "") + "-" +
                   encoder + "-n" + std::to_string(tc.graph_size);
  } else {
    m.info.model = "model-" + encoder;
  }
  if (!name.empty()) m.info.model = name;
  check_field(m.info.model, "model name");
  return m;
}

void log_row(const EvalRow& r) {
  progress(r.model + " " + r.decode + " n=" + std::to_string(r.size) + " gap " + format_double(r.mean_gap_pct) +
           "% (" + r.ref + ")");
}

void write_report(const EvalReport& rep, const fs::path& dir) {
  rep.write_csv((dir / "report.csv").string());
  progress("wrote " + (dir / "report.csv").string());
}

struct EvalArgs {
  ConfigOptions config;
  std::string checkpoint, name, data, decode, out;
  std::optional<std::size_t> size, count;
  std::optional<std::uint64_t> seed;
};

int cmd_eval(EvalArgs a, std::size_t workers, const std::string& cmdline) {
  if (!a.decode.empty()) a.config.flag("decode.modes", a.decode);
  if (a.count) a.config.flag("sweep.count", std::to_string(*a.count));
  if (a.seed) a.config.flag("sweep.seed", std::to_string(*a.seed));
  if (a.data.empty() == !a.size) throw UsageError("eval needs exactly one of --data or --size");
  const RunConfig cfg = a.config.resolve();
  const LoadedModel m = load_checkpoint(a.checkpoint, a.name);

  ValSet refs;
  if (!a.data.empty()) {
    const Dataset ds = read_dataset(a.data);
    if (ds.instances.empty()) throw UsageError("dataset '" + a.data + "' is empty");
    refs = reference_set(ds, cfg.sweep.exact_only, workers);
  } else {
    if (*a.size < 2) throw UsageError("--size must be at least 2");
    if (cfg.sweep.exact_only && *a.size > kExactMaxNodes) throw UsageError("no exact reference above n=20");
    ReferenceCache cache(cfg.sweep, workers);
    refs = cache.get(*a.size);
  }
  const fs::path dir = prepare_dir(a.out);
  echo_config(cfg, dir, cmdline);
  EvalReport rep;
  for (const auto& d : cfg.decode_configs()) {
    rep.rows.push_back(evaluate(m.model, refs, d, m.info, workers));
    log_row(rep.rows.back());
  }
  write_report(rep, dir);
  return 0;
}

struct SweepArgs {
  ConfigOptions config;
  std::vector<std::string> checkpoints, names;
  std::string sizes, decode, out;
  std::optional<std::size_t> count;
  std::optional<std::uint64_t> seed;
  bool exact_only = false;
};

int cmd_sweep(SweepArgs a, std::size_t workers, const std::string& cmdline) {
  if (!a.sizes.empty()) a.config.flag("sweep.sizes", a.sizes);
  if (!a.decode.empty()) a.config.flag("decode.modes", a.decode);
  if (a.count) a.config.flag("sweep.count", std::to_string(*a.count));
  if (a.seed) a.config.flag("sweep.seed", std::to_string(*a.seed));
  if (a.exact_only) a.config.flag("sweep.exact_only", "true");
  if (!a.names.empty() && a.names.size() != a.checkpoints.size()) {
    throw UsageError("--name must be given once per --checkpoint");
  }
  const RunConfig cfg = a.config.resolve();
  const SweepSpec spec = cfg.sweep_spec();
  if (spec.exact_only && spec.sizes.back() > kExactMaxNodes) throw UsageError("no exact reference above n=20");

  std::vector<LoadedModel> models;
  for (std::size_t i = 0; i < a.checkpoints.size(); ++i) {
    models.push_back(load_checkpoint(a.checkpoints[i], a.names.empty() ? "" : a.names[i]));
  }
  const fs::path dir = prepare_dir(a.out);
  echo_config(cfg, dir, cmdline);
  ReferenceCache cache(spec, workers);
  EvalReport rep;
  for (const auto& m : models) {
    const EvalReport part = generalization_sweep(m.model, spec, m.info, cache, workers, log_row);
    rep.rows.insert(rep.rows.end(), part.rows.begin(), part.rows.end());
  }
  write_report(rep, dir);
  return 0;
}

// ---- plot ----

struct PlotArgs {
  std::vector<std::string> reports;
  std::string out;
};

int cmd_plot(const PlotArgs& a, const std::string& cmdline) {
  std::vector<EvalReport> reports;
  for (const auto& p : a.reports) reports.push_back(EvalReport::read_csv(p));
  const fs::path dir = prepare_dir(a.out);
  {
    std::ofstream echo((dir / "plot_inputs.txt").string());
    echo << "; " << cmdline << '\n';
    for (const auto& p : a.reports) echo << p << '\n';
  }
  for (const auto& path : emit_plot_data(curves_from(reports), dir.string())) progress("wrote " + path);

  // Comparison is per model, so split merged reports by model id.
  std::vector<EvalReport> per_model;
  for (const auto& rep : reports) {
    for (const auto& row : rep.rows) {
      auto it = std::find_if(per_model.begin(), per_model.end(),
                             [&](const EvalReport& r) { return r.rows.front().model == row.model; });
      if (it == per_model.end()) {
        per_model.push_back({});
        it = std::prev(per_model.end());
      }
      it->rows.push_back(row);
    }
  }
  try {
    const Comparison c = compare_runs(per_model);
    std::ofstream table((dir / "comparison.csv").string());
    c.write_table_csv(table);
    std::ofstream winners((dir / "winners.csv").string());
    c.write_winners_csv(winners);
    progress("wrote comparison.csv and winners.csv");
  } catch (const std::invalid_argument& e) {
    progress(std::string("comparison skipped: ") + e.what());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural combinatorial optimization toolkit for 2D Euclidean TSP"};
  app.require_subcommand(1);
  std::size_t workers = default_workers();
  app.add_option("--workers", workers, "Worker threads for evaluation and generation")
      ->check(CLI::PositiveNumber);
  const std::string cmdline = command_line(argc, argv);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Generate a (solved) dataset");
  g->add_option("--size", gen.size, "Nodes per instance")->required();
  g->add_option("--count", gen.count, "Number of instances")->required();
  g->add_option("--seed", gen.seed, "Random seed");
  g->add_option("--solve", gen.solve, "Label solver")
      ->check(CLI::IsMember({"none", "heldkarp", "bruteforce", "twoopt"}));
  g->add_option("--out", gen.out, "Output dataset path")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a policy (SL or RL)");
  tr.config.add(t, true);
  t->add_option("--paradigm", tr.paradigm, "sl or rl")->check(CLI::IsMember({"sl", "rl"}));
  t->add_option("--baseline", tr.baseline, "rollout or critic")->check(CLI::IsMember({"rollout", "critic"}));
  t->add_option("--encoder", tr.encoder, "gat or gcn")->check(CLI::IsMember({"gat", "gcn"}));
  t->add_option("--data", tr.data, "Labelled training dataset")->check(CLI::ExistingFile);
  t->add_option("--val-data", tr.val_data, "Labelled validation dataset")->check(CLI::ExistingFile);
  t->add_option("--epochs", tr.epochs, "Number of epochs");
  t->add_option("--seed", tr.seed, "Training seed");
  t->add_flag("--resume", tr.resume, "Resume from the checkpoint in --out");
  t->add_option("--out", tr.out, "Output directory")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on one test set");
  ev.config.add(e, false);
  e->add_option("--checkpoint", ev.checkpoint, "Model or training checkpoint")->required()->check(CLI::ExistingFile);
  e->add_option("--name", ev.name, "Model id used in the report");
  e->add_option("--data", ev.data, "Test dataset")->check(CLI::ExistingFile);
  e->add_option("--size", ev.size, "Generate the test set at this size instead");
  e->add_option("--count", ev.count, "Instances when generating");
  e->add_option("--seed", ev.seed, "Test set seed when generating");
  e->add_option("--decode", ev.decode, "Comma list of greedy, sample:K, beam:W");
  e->add_option("--out", ev.out, "Output directory")->required();

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Evaluate checkpoints across graph sizes");
  sw.config.add(s, false);
  s->add_option("--checkpoint", sw.checkpoints, "Checkpoint (repeatable)")->required()->check(CLI::ExistingFile);
  s->add_option("--name", sw.names, "Model id per checkpoint (repeatable)");
  s->add_option("--sizes", sw.sizes, "Comma list of sizes");
  s->add_option("--decode", sw.decode, "Comma list of greedy, sample:K, beam:W");
  s->add_option("--count", sw.count, "Instances per size");
  s->add_option("--seed", sw.seed, "Test set seed");
  s->add_flag("--exact-only", sw.exact_only, "Refuse heuristic references");
  s->add_option("--out", sw.out, "Output directory")->required();

  PlotArgs pl;
  auto* p = app.add_subcommand("plot", "Emit curve data, chart and comparison tables");
  p->add_option("--report", pl.reports, "Report CSV (repeatable)")->required()->check(CLI::ExistingFile);
  p->add_option("--out", pl.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }

  try {
    if (*g) return cmd_generate(gen, workers);
    if (*t) return cmd_train(tr, cmdline);
    if (*e) return cmd_eval(ev, workers, cmdline);
    if (*s) return cmd_sweep(sw, workers, cmdline);
    if (*p) return cmd_plot(pl, cmdline);
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << std::endl;
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << std::endl;
    return 1;
  }
  return 2;
}
