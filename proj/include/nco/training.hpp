#pragma once

// Supervised (teacher-forced cross-entropy) and REINFORCE training of a
// PolicyModel, with either a greedy-rollout or a critic baseline.

#include <chrono>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "nco/adam.hpp"
#include "nco/dataset.hpp"
#include "nco/model.hpp"
#include "nco/search.hpp"
#include "nco/serialize.hpp"
#include "nco/solvers.hpp"

namespace nco {

enum class Paradigm { sl, rl };
enum class BaselineKind { rollout, critic };

inline std::string to_string(Paradigm p) { return p == Paradigm::sl ? "sl" : "rl"; }
inline std::string to_string(BaselineKind b) { return b == BaselineKind::rollout ? "rollout" : "critic"; }

inline Paradigm parse_paradigm(const std::string& s) {
  if (s == "sl") return Paradigm::sl;
  if (s == "rl") return Paradigm::rl;
  throw std::invalid_argument("unknown paradigm '" + s + "' (expected sl or rl)");
}

inline BaselineKind parse_baseline(const std::string& s) {
  if (s == "rollout") return BaselineKind::rollout;
  if (s == "critic") return BaselineKind::critic;
  throw std::invalid_argument("unknown baseline '" + s + "' (expected rollout or critic)");
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  Paradigm paradigm = Paradigm::sl;
  BaselineKind baseline = BaselineKind::rollout;
  std::size_t graph_size = 20;
  std::size_t epochs = 100;
  std::size_t epoch_size = 1000000;
  std::size_t batch_size = 512;
  double lr = 1e-4;
  std::uint64_t seed = 1;
  ModelConfig model;
  std::size_t val_size = 1000;
  std::size_t val_every = 0;  // extra validation every N mini-batches; 0 = epoch ends only
  double alpha = 0.05;        // rollout replacement significance level

  /// Small configuration that trains TSP10 on one CPU core.
  static TrainConfig desk() {
    TrainConfig c;
    c.graph_size = 10;
    c.epochs = 10;
    c.epoch_size = 20000;
    c.batch_size = 128;
    c.model.encoder.layers = 2;
    c.model.encoder.embed_dim = 64;
    c.model.encoder.heads = 4;
    c.model.encoder.ff_dim = 256;
    return c;
  }

  void validate() const {
    model.validate();
    if (graph_size < 2) throw std::invalid_argument("graph_size must be at least 2");
    if (batch_size < 1 || epoch_size < 1) throw std::invalid_argument("batch_size and epoch_size must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (val_size < 1) throw std::invalid_argument("val_size must be at least 1");
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must be in (0, 1)");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"paradigm", to_string(c.paradigm)},
          {"baseline", to_string(c.baseline)},
          {"graph_size", c.graph_size},
          {"epochs", c.epochs},
          {"epoch_size", c.epoch_size},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"seed", c.seed},
          {"model", to_json(c.model)},
          {"val_size", c.val_size},
          {"val_every", c.val_every},
          {"alpha", c.alpha}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.paradigm = parse_paradigm(j.at("paradigm").get<std::string>());
  c.baseline = parse_baseline(j.at("baseline").get<std::string>());
  c.graph_size = j.at("graph_size").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.epoch_size = j.at("epoch_size").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.model = model_config_from_json(j.at("model"));
  c.val_size = j.at("val_size").get<std::size_t>();
  c.val_every = j.at("val_every").get<std::size_t>();
  c.alpha = j.at("alpha").get<double>();
  return c;
}

// ---- validation ----

struct ValSet {
  std::vector<TspInstance> instances;
  std::vector<double> optima;  // reference lengths
  bool exact = true;
};

/// Seeded instances with exact references (Held-Karp) where n allows.
inline ValSet make_val_set(std::size_t n, std::size_t count, std::uint64_t seed) {
  ValSet v;
  v.instances = generate_instances(n, count, seed);
  for (const auto& inst : v.instances) {
    Reference r = reference_solve(inst);
    v.optima.push_back(r.tour.length);
    v.exact = v.exact && r.exact;
  }
  return v;
}

inline ValSet val_set_from(const Dataset& ds) {
  if (!ds.labelled()) throw std::invalid_argument("validation data has no reference tours");
  ValSet v;
  v.instances = ds.instances;
  for (const auto& t : ds.solutions) v.optima.push_back(t.length);
  v.exact = ds.meta.exact();
  return v;
}

/// Greedy lengths for many instances, decoded in chunks.
inline std::vector<double> greedy_lengths(const PolicyModel& model, const std::vector<TspInstance>& insts,
                                          std::size_t chunk = 250) {
  std::vector<double> out;
  out.reserve(insts.size());
  std::vector<const TspInstance*> ptrs;
  for (std::size_t s = 0; s < insts.size(); s += chunk) {
    ptrs.clear();
    for (std::size_t i = s; i < std::min(insts.size(), s + chunk); ++i) ptrs.push_back(&insts[i]);
    for (const auto& t : greedy_decode(model, ptrs)) out.push_back(t.length);
  }
  return out;
}

/// Mean per-instance greedy optimality gap (%).
inline double validate(const PolicyModel& model, const ValSet& val) {
  if (val.optima.size() != val.instances.size()) throw std::invalid_argument("validate: missing references");
  return mean_gap(greedy_lengths(model, val.instances), val.optima);
}

// ---- losses ----

/// Mean over instances of the summed negative log-likelihood of the
/// canonical target tours under teacher forcing.
inline Var sl_loss(Tape& tape, const PolicyModel& model, InstanceBatch batch, const std::vector<Order>& targets) {
  if (batch.empty()) throw std::invalid_argument("sl_step: empty batch");
  if (targets.size() != batch.size()) throw std::invalid_argument("sl_step: missing labels");
  std::vector<Order> canon;
  canon.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!is_permutation(targets[i], batch[i]->size())) throw std::invalid_argument("sl_step: label is not a tour");
    canon.push_back(canonicalize(targets[i]));
  }
  Rollout ro = run_decoder(tape, model, batch, 1, Mode::train, make_forcer(canon), true);
  return op::scale(op::mean(*ro.log_prob_sum), -1.0);
}

/// mean_i(advantage_i · log p_i); the advantages are constants.
inline Var reinforce_surrogate(Var log_prob_sum, const std::vector<double>& advantage) {
  if (log_prob_sum.numel() != advantage.size()) throw ShapeError("reinforce: advantage count mismatch");
  Tensor a(log_prob_sum.shape());
  std::copy(advantage.begin(), advantage.end(), a.data().begin());
  return op::mean(log_prob_sum * log_prob_sum.tape->constant(std::move(a)));
}

/// Mean squared error between predicted values [B] and observed lengths.
inline Var critic_loss(Var values, const std::vector<double>& lengths) {
  if (values.numel() != lengths.size()) throw ShapeError("critic: target count mismatch");
  Tensor target(values.shape());
  std::copy(lengths.begin(), lengths.end(), target.data().begin());
  return op::mean(op::square(values - values.tape->constant(std::move(target))));
}

// ---- steps: each zeroes the gradients, then accumulates fresh ones ----

inline double sl_step(PolicyModel& model, InstanceBatch batch, const std::vector<Order>& targets) {
  model.params().zero_grad();
  Tape tape;
  Var loss = sl_loss(tape, model, batch, targets);
  tape.backward(loss);
  return loss.value().item();
}

struct RlStepResult {
  double loss = 0.0;           // surrogate value
  double mean_length = 0.0;    // sampled tours
  double mean_baseline = 0.0;
  double critic_loss = 0.0;    // critic baseline only
};

/// One sampled tour per instance, recorded for backward. rngs[i] drives instance i.
inline Rollout sample_rollout(Tape& tape, const PolicyModel& model, InstanceBatch batch, std::vector<Rng>& rngs) {
  if (rngs.size() != batch.size()) throw std::invalid_argument("one rng stream per instance required");
  return run_decoder(tape, model, batch, 1, Mode::train, make_sampler(rngs), true);
}

inline std::vector<double> rollout_lengths(InstanceBatch batch, const Rollout& ro) {
  std::vector<double> out;
  for (std::size_t i = 0; i < batch.size(); ++i) out.push_back(tour_length(*batch[i], ro.orders[i]));
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline RlStepResult rl_step_rollout(PolicyModel& model, const PolicyModel& baseline, InstanceBatch batch,
                                    std::vector<Rng>& rngs) {
  model.params().zero_grad();
  Tape tape;
  Rollout ro = sample_rollout(tape, model, batch, rngs);
  const auto lengths = rollout_lengths(batch, ro);
  std::vector<double> base;
  for (const auto& t : greedy_decode(baseline, batch)) base.push_back(t.length);
  std::vector<double> adv(lengths.size());
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = lengths[i] - base[i];
  Var loss = reinforce_surrogate(*ro.log_prob_sum, adv);
  tape.backward(loss);
  return {loss.value().item(), mean_of(lengths), mean_of(base), 0.0};
}

inline RlStepResult rl_step_critic(PolicyModel& model, Critic& critic, InstanceBatch batch, std::vector<Rng>& rngs) {
  model.params().zero_grad();
  critic.params().zero_grad();
  Tape tape;
  Rollout ro = sample_rollout(tape, model, batch, rngs);
  const auto lengths = rollout_lengths(batch, ro);

  Tape ctape;
  Var values = critic.value(ctape, batch, Mode::train);
  const std::vector<double> base(values.value().data().begin(), values.value().data().end());
  Var closs = critic_loss(values, lengths);
  ctape.backward(closs);

  std::vector<double> adv(lengths.size());
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = lengths[i] - base[i];
  Var loss = reinforce_surrogate(*ro.log_prob_sum, adv);
  tape.backward(loss);
  return {loss.value().item(), mean_of(lengths), mean_of(base), closs.value().item()};
}

// ---- rollout baseline ----

struct TTestResult {
  double mean_diff = 0.0;  // mean(baseline - candidate)
  double t = 0.0;
  double p = 1.0;          // one-sided: candidate shorter
};

/// One-sided paired t-test of H1: candidate lengths are shorter on average.
/// Zero spread in the differences gives p = 0 when every candidate is
/// shorter by the same margin and p = 1 otherwise.
inline TTestResult paired_t_test(const std::vector<double>& baseline, const std::vector<double>& candidate) {
  if (baseline.size() != candidate.size()) throw std::invalid_argument("paired_t_test: size mismatch");
  TTestResult r;
  const std::size_t n = baseline.size();
  if (n < 2) return r;
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = baseline[i] - candidate[i];
  r.mean_diff = mean_of(d);
  double ss = 0.0;
  for (double x : d) ss += (x - r.mean_diff) * (x - r.mean_diff);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) {
    r.t = r.mean_diff > 0 ? std::numeric_limits<double>::infinity() : 0.0;
    r.p = r.mean_diff > 0 ? 0.0 : 1.0;
    return r;
  }
  r.t = r.mean_diff / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t dist(static_cast<double>(n - 1));
  r.p = boost::math::cdf(boost::math::complement(dist, r.t));
  return r;
}

struct RolloutBaseline {
  PolicyModel model;
  ValSet val;                    // set the replacement test runs on
  std::vector<double> lengths;   // baseline greedy lengths on `val`
  std::uint64_t generation = 0;  // number of replacements so far

  RolloutBaseline(const PolicyModel& policy, ValSet v) : model(policy), val(std::move(v)) {
    lengths = greedy_lengths(model, val.instances);
  }
};

struct BaselineUpdate {
  bool replaced = false;
  TTestResult test;
  double candidate_mean = 0.0;
  double baseline_mean = 0.0;
};

/// Replaces the frozen baseline with `policy` when the policy's greedy tours
/// on the baseline's set are significantly shorter; then asks `resample` for
/// a fresh set, keyed by the new generation.
inline BaselineUpdate update_rollout_baseline(const PolicyModel& policy, RolloutBaseline& b, double alpha,
                                              const std::function<ValSet(std::uint64_t)>& resample = {}) {
  BaselineUpdate u;
  const auto cand = greedy_lengths(policy, b.val.instances);
  u.candidate_mean = mean_of(cand);
  u.baseline_mean = mean_of(b.lengths);
  u.test = paired_t_test(b.lengths, cand);
  if (u.candidate_mean < u.baseline_mean && u.test.p < alpha) {
    u.replaced = true;
    b.model.copy_weights_from(policy);
    ++b.generation;
    if (resample) {
      b.val = resample(b.generation);
      b.lengths = greedy_lengths(b.model, b.val.instances);
    } else {
      b.lengths = cand;
    }
  }
  return u;
}

// ---- training loop ----

struct TrainLogRow {
  std::size_t mini_batch = 0;
  double loss = 0.0;
  std::optional<double> val_gap;  // % when validated after this mini-batch
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;

  std::optional<double> last_val_gap() const {
    for (auto it = rows.rbegin(); it != rows.rend(); ++it)
      if (it->val_gap) return it->val_gap;
    return std::nullopt;
  }

  void write_csv(std::ostream& out) const {
    out << "mini_batch,loss,val_gap_pct,seconds\n";
    char secs[32];
    for (const auto& r : rows) {
      std::snprintf(secs, sizeof secs, "%.3f", r.seconds);
      out << r.mini_batch << ',' << format_double(r.loss) << ','
          << (r.val_gap ? format_double(*r.val_gap) : std::string()) << ',' << secs << '\n';
    }
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    write_csv(out);
  }

  nlohmann::json to_json() const {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : rows) {
      a.push_back({r.mini_batch, r.loss, r.val_gap ? nlohmann::json(*r.val_gap) : nlohmann::json(), r.seconds});
    }
    return a;
  }

  static TrainLog from_json(const nlohmann::json& a) {
    TrainLog log;
    for (const auto& r : a) {
      TrainLogRow row{r.at(0).get<std::size_t>(), r.at(1).get<double>(), std::nullopt, r.at(3).get<double>()};
      if (!r.at(2).is_null()) row.val_gap = r.at(2).get<double>();
      log.rows.push_back(row);
    }
    return log;
  }
};

struct TrainData {
  const Dataset* train = nullptr;  // SL: labelled training set
  const Dataset* val = nullptr;    // optional labelled validation set
};

struct TrainOptions {
  std::string checkpoint_path;  // written after every epoch when set
  bool resume = false;          // continue from checkpoint_path if it exists
  std::function<void(const std::string&)> progress;
};

struct TrainResult {
  PolicyModel model;
  TrainLog log;
  std::size_t epochs_completed = 0;
  std::size_t replacements = 0;  // rollout baseline only
};

namespace detail {

// Stream keys separating the random uses of one run.
enum : std::uint64_t { kKeyData = 1, kKeySample = 2, kKeyVal = 3, kKeyShuffle = 4, kKeyCritic = 5 };

inline std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.next() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

inline void add_prefixed(const ParameterStore& store, const std::string& prefix, std::vector<NamedTensor>& out) {
  std::vector<NamedTensor> tmp;
  append_tensors(store, tmp);
  for (auto& t : tmp) out.push_back({prefix + t.name, std::move(t.value)});
}

inline void restore_prefixed(const Container& c, const std::string& prefix, ParameterStore& store) {
  Container view;
  for (const auto& t : c.tensors)
    if (t.name.rfind(prefix, 0) == 0) view.tensors.push_back({t.name.substr(prefix.size()), t.value});
  restore_tensors(view, store);
}

inline void add_adam(const AdamState& adam, const std::string& prefix, std::vector<NamedTensor>& out) {
  for (const auto& [name, mom] : adam.moments()) {
    out.push_back({prefix + "m/" + name, mom.m});
    out.push_back({prefix + "v/" + name, mom.v});
  }
}

inline void restore_adam(const Container& c, const std::string& prefix, AdamState& adam, std::uint64_t steps) {
  adam.moments().clear();
  for (const auto& t : c.tensors) {
    if (t.name.rfind(prefix + "m/", 0) == 0) adam.moments()[t.name.substr(prefix.size() + 2)].m = t.value;
    if (t.name.rfind(prefix + "v/", 0) == 0) adam.moments()[t.name.substr(prefix.size() + 2)].v = t.value;
  }
  adam.set_step_count(steps);
}

inline bool same_run(TrainConfig a, TrainConfig b) {
  a.epochs = b.epochs = 0;
  return to_json(a) == to_json(b);
}

}  // namespace detail

/// Runs `cfg.epochs` epochs of `cfg.epoch_size / cfg.batch_size` Adam steps.
/// All randomness is derived from cfg.seed and the (epoch, mini-batch)
/// position, so a resumed run reproduces an uninterrupted one.
inline TrainResult train(const TrainConfig& cfg, const TrainData& data = {}, const TrainOptions& opt = {}) {
  cfg.validate();
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const std::size_t n = cfg.graph_size;
  auto say = [&](const std::string& s) {
    if (opt.progress) opt.progress(s);
  };

  if (cfg.paradigm == Paradigm::sl) {
    if (!data.train || !data.train->labelled()) throw std::invalid_argument("supervised training needs a labelled dataset");
    if (data.train->instances.front().size() != n) {
      throw std::invalid_argument("training data has n=" + std::to_string(data.train->instances.front().size()) +
                                  ", config expects " + std::to_string(n));
    }
  }

  TrainResult res{PolicyModel(cfg.model), {}, 0, 0};
  PolicyModel& model = res.model;
  AdamState adam(AdamConfig{cfg.lr});
  std::optional<Critic> critic;
  AdamState critic_adam(AdamConfig{cfg.lr});
  if (cfg.paradigm == Paradigm::rl && cfg.baseline == BaselineKind::critic) {
    critic.emplace(cfg.model.encoder, derive_seed(cfg.seed, {detail::kKeyCritic}));
  }

  auto resample = [&](std::uint64_t generation) {
    return make_val_set(n, cfg.val_size, derive_seed(cfg.seed, {detail::kKeyVal, generation}));
  };
  ValSet fixed_val = data.val ? val_set_from(*data.val) : resample(0);
  if (fixed_val.instances.front().size() != n) throw std::invalid_argument("validation data has the wrong n");
  std::optional<RolloutBaseline> baseline;
  if (cfg.paradigm == Paradigm::rl && cfg.baseline == BaselineKind::rollout) baseline.emplace(model, fixed_val);
  auto current_val = [&]() -> const ValSet& { return baseline ? baseline->val : fixed_val; };

  std::size_t start_epoch = 0, global = 0;
  double time_offset = 0.0;
  if (opt.resume && !opt.checkpoint_path.empty() && std::filesystem::exists(opt.checkpoint_path)) {
    const Container c = load_container(opt.checkpoint_path);
    const auto& h = c.header;
    if (h.value("kind", "") != "checkpoint") throw FormatError("'" + opt.checkpoint_path + "' is not a checkpoint");
    if (!detail::same_run(train_config_from_json(h.at("train")), cfg)) {
      throw std::invalid_argument("checkpoint was written by a different configuration");
    }
    restore_tensors(c, model.params());
    detail::restore_adam(c, "adam/", adam, h.at("adam_steps").get<std::uint64_t>());
    if (critic) {
      detail::restore_prefixed(c, "critic/", critic->params());
      detail::restore_adam(c, "critic_adam/", critic_adam, h.at("critic_adam_steps").get<std::uint64_t>());
    }
    if (baseline) {
      detail::restore_prefixed(c, "baseline/", baseline->model.params());
      baseline->generation = h.at("baseline_generation").get<std::uint64_t>();
      if (baseline->generation > 0) baseline->val = resample(baseline->generation);
      baseline->lengths = greedy_lengths(baseline->model, baseline->val.instances);
    }
    start_epoch = h.at("epoch").get<std::size_t>();
    global = h.at("mini_batch").get<std::size_t>();
    res.replacements = h.value("replacements", std::size_t{0});
    res.log = TrainLog::from_json(h.at("log"));
    time_offset = res.log.rows.empty() ? 0.0 : res.log.rows.back().seconds;
    say("resumed from " + opt.checkpoint_path + " at epoch " + std::to_string(start_epoch));
  }
  auto elapsed = [&] { return time_offset + std::chrono::duration<double>(clock::now() - t0).count(); };

  auto save_checkpoint = [&](std::size_t epochs_done) {
    Container c;
    c.header = {{"kind", "checkpoint"},
                {"model", to_json(cfg.model)},
                {"train", to_json(cfg)},
                {"epoch", epochs_done},
                {"mini_batch", global},
                {"adam_steps", adam.step_count()},
                {"critic_adam_steps", critic_adam.step_count()},
                {"baseline_generation", baseline ? baseline->generation : 0},
                {"replacements", res.replacements},
                {"log", res.log.to_json()}};
    append_tensors(model.params(), c.tensors);
    detail::add_adam(adam, "adam/", c.tensors);
    if (critic) {
      detail::add_prefixed(critic->params(), "critic/", c.tensors);
      detail::add_adam(critic_adam, "critic_adam/", c.tensors);
    }
    if (baseline) detail::add_prefixed(baseline->model.params(), "baseline/", c.tensors);
    const std::string tmp = opt.checkpoint_path + ".tmp";
    save_container(tmp, c);
    std::filesystem::rename(tmp, opt.checkpoint_path);
  };

  const std::size_t batches = (cfg.epoch_size + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<TspInstance> gen;
  std::vector<const TspInstance*> ptrs;
  std::vector<Order> targets;
  std::vector<Rng> rngs;

  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order;
    if (cfg.paradigm == Paradigm::sl) {
      // Cycle the fixed set: concatenated shuffles until the epoch is covered.
      for (std::uint64_t pass = 0; order.size() < cfg.epoch_size; ++pass) {
        Rng shuf(cfg.seed, {detail::kKeyShuffle, epoch, pass});
        for (std::size_t i : detail::shuffled(data.train->size(), shuf)) order.push_back(i);
      }
    }
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t bs = std::min(cfg.batch_size, cfg.epoch_size - lo);
      ptrs.clear();
      double loss = 0.0;
      try {
        if (cfg.paradigm == Paradigm::sl) {
          targets.clear();
          for (std::size_t i = lo; i < lo + bs; ++i) {
            ptrs.push_back(&data.train->instances[order[i]]);
            targets.push_back(data.train->solutions[order[i]].order);
          }
          loss = sl_step(model, ptrs, targets);
        } else {
          gen.clear();
          rngs.clear();
          const std::uint64_t data_seed = derive_seed(cfg.seed, {detail::kKeyData, epoch, b});
          for (std::size_t i = 0; i < bs; ++i) {
            gen.push_back(generate_instance(n, data_seed, i));
            rngs.emplace_back(cfg.seed, std::initializer_list<std::uint64_t>{detail::kKeySample, epoch, b, i});
          }
          for (const auto& g : gen) ptrs.push_back(&g);
          if (baseline) {
            loss = rl_step_rollout(model, baseline->model, ptrs, rngs).loss;
          } else {
            loss = rl_step_critic(model, *critic, ptrs, rngs).loss;
            critic_adam.step(critic->params());
          }
        }
      } catch (const NumericError& e) {
        throw TrainingDiverged("training diverged at mini-batch " + std::to_string(global + 1) + ": " + e.what());
      }
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("training diverged: loss is " + std::to_string(loss) + " at mini-batch " +
                               std::to_string(global + 1));
      }
      adam.step(model.params());
      ++global;
      TrainLogRow row{global, loss, std::nullopt, 0.0};
      const bool epoch_end = b + 1 == batches;
      if (epoch_end || (cfg.val_every > 0 && global % cfg.val_every == 0)) {
        row.val_gap = validate(model, current_val());
      }
      row.seconds = elapsed();
      res.log.rows.push_back(row);
    }

    std::string msg = "epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) +
                      " val gap " + format_double(*res.log.rows.back().val_gap) + "%";
    if (baseline) {
      const BaselineUpdate u = update_rollout_baseline(model, *baseline, cfg.alpha, resample);
      if (u.replaced) ++res.replacements;
      msg += u.replaced ? " (baseline replaced, p=" + format_double(u.test.p) + ")" : " (baseline kept)";
    }
    say(msg);
    res.epochs_completed = epoch + 1;
    if (!opt.checkpoint_path.empty()) save_checkpoint(epoch + 1);
  }
  res.epochs_completed = std::max(res.epochs_completed, start_epoch);
  return res;
}

}  // namespace nco
