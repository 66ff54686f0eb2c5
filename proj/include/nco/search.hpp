#pragma once

// Inference procedures over a PolicyModel: greedy, best-of-k sampling and
// beam search, plus the shared autoregressive rollout loop used by training.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nco/model.hpp"
#include "nco/rng.hpp"
#include "nco/tsp.hpp"

namespace nco {

/// Picks the next node for every row given that step's log-probabilities
/// (a [B, m, n] tensor) and each row's cumulative log-probability so far.
using Chooser = std::function<void(const Tensor& log_probs, const DecoderState& state,
                                   const std::vector<double>& cumulative, std::vector<NodeId>& choice)>;

struct Rollout {
  std::vector<Order> orders;        // [B·m]
  std::vector<double> log_probs;    // [B·m], summed step log-probabilities
  std::optional<Var> log_prob_sum;  // [B, m] on the tape when recording
};

/// Runs the decoder to completion for B instances × m rows. A
/// non-recording tape is trimmed after every step unless `keep_graph`.
inline Rollout run_decoder(Tape& tape, const PolicyModel& model, InstanceBatch batch,
                           std::size_t rows, Mode mode, const Chooser& choose, bool keep_graph = false) {
  const std::size_t B = batch.size();
  const std::size_t n = batch_node_count(batch);
  Embeddings emb = model.encode(tape, batch, mode);
  DecoderCache cache = model.decoder().precompute(emb);
  DecoderState state = DecoderState::start(B, rows, n);
  const std::size_t mark = tape.size();
  std::vector<double> cum(B * rows, 0.0);
  std::vector<NodeId> choice(B * rows);
  Rollout out;
  while (!state.done()) {
    Var logp = model.decoder().step_log_probs(cache, state);
    const Tensor& lp = logp.value();
    choose(lp, state, cum, choice);
    for (std::size_t r = 0; r < choice.size(); ++r) cum[r] += lp[r * n + choice[r]];
    if (tape.recording() || keep_graph) {
      Var picked = op::pick(logp, choice);
      out.log_prob_sum = out.log_prob_sum ? op::add(*out.log_prob_sum, picked) : picked;
    } else {
      tape.truncate(mark);
    }
    state.advance(choice);
  }
  out.orders = std::move(state.partial);
  out.log_probs = std::move(cum);
  return out;
}

/// argmax of cumulative + step log-prob per row, ties to the lower index.
inline void choose_greedy(const Tensor& lp, const DecoderState& s, const std::vector<double>& cum,
                          std::vector<NodeId>& choice) {
  const std::size_t n = s.n;
  for (std::size_t r = 0; r < choice.size(); ++r) {
    double best = -std::numeric_limits<double>::infinity();
    NodeId arg = n;
    for (NodeId v = 0; v < n; ++v) {
      if (!s.allowed[r * n + v]) continue;
      const double score = cum[r] + lp[r * n + v];
      if (arg == n || score > best) {
        best = score;
        arg = v;
      }
    }
    choice[r] = arg;
  }
}

/// Inverse-CDF draw from row r's distribution using stream `rngs[r]`.
inline Chooser make_sampler(std::vector<Rng>& rngs) {
  return [&rngs](const Tensor& lp, const DecoderState& s, const std::vector<double>&,
                 std::vector<NodeId>& choice) {
    const std::size_t n = s.n;
    for (std::size_t r = 0; r < choice.size(); ++r) {
      const double u = rngs[r].uniform();
      double acc = 0.0;
      NodeId pick = n, last_allowed = n;
      for (NodeId v = 0; v < n; ++v) {
        if (!s.allowed[r * n + v]) continue;
        last_allowed = v;
        acc += std::exp(lp[r * n + v]);
        if (u < acc) {
          pick = v;
          break;
        }
      }
      choice[r] = pick == n ? last_allowed : pick;
    }
  };
}

/// Teacher forcing: row r follows `targets[r]`.
inline Chooser make_forcer(const std::vector<Order>& targets) {
  return [&targets](const Tensor&, const DecoderState& s, const std::vector<double>&,
                    std::vector<NodeId>& choice) {
    for (std::size_t r = 0; r < choice.size(); ++r) choice[r] = targets[r][s.step];
  };
}

/// Summed step log-probability the model assigns to producing `order`.
inline double tour_log_prob(const PolicyModel& model, const TspInstance& inst, const Order& order) {
  if (!is_permutation(order, inst.size())) throw std::invalid_argument("tour_log_prob: not a permutation");
  const TspInstance* p = &inst;
  const std::vector<Order> targets{order};
  Tape tape(false);
  return run_decoder(tape, model, InstanceBatch(&p, 1), 1, Mode::eval, make_forcer(targets)).log_probs[0];
}

inline std::vector<Tour> to_tours(InstanceBatch batch, std::size_t rows, const Rollout& ro) {
  std::vector<Tour> tours;
  tours.reserve(ro.orders.size());
  for (std::size_t r = 0; r < ro.orders.size(); ++r) {
    Tour t = make_tour(*batch[r / rows], ro.orders[r]);
    t.log_prob = ro.log_probs[r];
    tours.push_back(std::move(t));
  }
  return tours;
}

inline std::vector<Tour> greedy_decode(const PolicyModel& model, InstanceBatch batch) {
  Tape tape(false);
  Rollout ro = run_decoder(tape, model, batch, 1, Mode::eval, choose_greedy);
  return to_tours(batch, 1, ro);
}

inline Tour greedy_decode(const PolicyModel& model, const TspInstance& inst) {
  const TspInstance* p = &inst;
  return greedy_decode(model, InstanceBatch(&p, 1)).front();
}

struct SampleResult {
  Tour best;
  std::vector<double> lengths;  // all k, in sample order
};

/// k independent rollouts at temperature 1. Sample j of instance `key` draws
/// from stream (seed, key, j), so the first k samples do not depend on k.
inline SampleResult sample_decode(const PolicyModel& model, const TspInstance& inst, std::size_t k,
                                  std::uint64_t seed, std::uint64_t key = 0,
                                  std::size_t chunk = 256) {
  if (k < 1) throw std::invalid_argument("sample_decode: k must be at least 1");
  SampleResult res;
  const TspInstance* p = &inst;
  InstanceBatch batch(&p, 1);
  std::optional<Tour> best;
  for (std::size_t start = 0; start < k; start += chunk) {
    const std::size_t rows = std::min(chunk, k - start);
    std::vector<Rng> rngs;
    rngs.reserve(rows);
    for (std::size_t j = 0; j < rows; ++j) rngs.emplace_back(seed, std::initializer_list<std::uint64_t>{key, start + j});
    Tape tape(false);
    Rollout ro = run_decoder(tape, model, batch, rows, Mode::eval, make_sampler(rngs));
    for (auto& t : to_tours(batch, rows, ro)) {
      res.lengths.push_back(t.length);
      if (!best || t.length < best->length) best = std::move(t);
    }
  }
  res.best = std::move(*best);
  return res;
}

struct BeamResult {
  Tour shortest;       // headline result
  Tour most_probable;  // highest cumulative log-probability
  std::size_t completed = 0;
};

/// Breadth-wise search keeping the `width` partial tours with the highest
/// cumulative log-probability (ties: lexicographically smaller first).
inline BeamResult beam_search(const PolicyModel& model, const TspInstance& inst, std::size_t width) {
  if (width < 1) throw std::invalid_argument("beam_search: width must be at least 1");
  struct Beam {
    Order seq;
    double cum = 0.0;
  };
  struct Candidate {
    std::size_t parent;
    NodeId node;
    double score;
  };
  const std::size_t n = inst.size();
  const TspInstance* p = &inst;
  InstanceBatch batch(&p, 1);
  Tape tape(false);
  Embeddings emb = model.encode(tape, batch, Mode::eval);
  DecoderCache cache = model.decoder().precompute(emb);
  const std::size_t mark = tape.size();

  std::vector<Beam> beams(1);
  std::vector<Candidate> cands;
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t m = beams.size();
    DecoderState s = DecoderState::start(1, m, n);
    s.step = step;
    for (std::size_t r = 0; r < m; ++r) {
      s.partial[r] = beams[r].seq;
      if (step > 0) {
        s.first[r] = beams[r].seq.front();
        s.last[r] = beams[r].seq.back();
      }
      for (NodeId v : beams[r].seq) s.allowed[r * n + v] = 0;
    }
    const Tensor lp = model.decoder().step_log_probs(cache, s).value();
    tape.truncate(mark);

    cands.clear();
    for (std::size_t r = 0; r < m; ++r)
      for (NodeId v = 0; v < n; ++v)
        if (s.allowed[r * n + v]) cands.push_back({r, v, beams[r].cum + lp[r * n + v]});
    auto better = [&](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      const Order& sa = beams[a.parent].seq;
      const Order& sb = beams[b.parent].seq;
      if (sa != sb) return sa < sb;
      return a.node < b.node;
    };
    const std::size_t keep = std::min(width, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), better);
    std::vector<Beam> next;
    next.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
      Beam b{beams[cands[i].parent].seq, cands[i].score};
      b.seq.push_back(cands[i].node);
      next.push_back(std::move(b));
    }
    beams = std::move(next);
  }

  BeamResult res;
  res.completed = beams.size();
  std::optional<Tour> shortest, probable;
  for (const auto& b : beams) {
    Tour t = make_tour(inst, b.seq);
    t.log_prob = b.cum;
    if (!probable) probable = t;  // beams are sorted best-first
    if (!shortest || t.length < shortest->length) shortest = t;
  }
  res.shortest = std::move(*shortest);
  res.most_probable = std::move(*probable);
  return res;
}

enum class DecodeMode { greedy, sample, beam };

struct DecodeConfig {
  DecodeMode mode = DecodeMode::greedy;
  std::size_t k = 1280;      // samples
  std::size_t width = 1280;  // beam width
  bool beam_by_probability = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 1) throw std::invalid_argument("sample count must be at least 1");
    if (width < 1) throw std::invalid_argument("beam width must be at least 1");
  }

  std::string label() const {
    switch (mode) {
      case DecodeMode::greedy: return "greedy";
      case DecodeMode::sample: return "sample:" + std::to_string(k);
      case DecodeMode::beam: return "beam:" + std::to_string(width) + (beam_by_probability ? ":prob" : "");
    }
    return "?";
  }
};

/// Parses `greedy`, `sample:K`, `beam:W` (shortest tour) or `beam:W:prob`.
inline DecodeConfig parse_decode(const std::string& spec) {
  DecodeConfig cfg;
  auto parse_count = [&](const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw std::invalid_argument("malformed decode spec '" + spec + "'");
    }
    const std::size_t v = std::stoull(s);
    if (v < 1) throw std::invalid_argument("decode spec '" + spec + "' needs a count >= 1");
    return v;
  };
  if (spec == "greedy") return cfg;
  if (spec.rfind("sample:", 0) == 0) {
    cfg.mode = DecodeMode::sample;
    cfg.k = parse_count(spec.substr(7));
    return cfg;
  }
  if (spec.rfind("beam:", 0) == 0) {
    cfg.mode = DecodeMode::beam;
    std::string rest = spec.substr(5);
    if (auto colon = rest.find(':'); colon != std::string::npos) {
      if (rest.substr(colon + 1) != "prob") throw std::invalid_argument("malformed decode spec '" + spec + "'");
      cfg.beam_by_probability = true;
      rest = rest.substr(0, colon);
    }
    cfg.width = parse_count(rest);
    return cfg;
  }
  throw std::invalid_argument("malformed decode spec '" + spec + "' (expected greedy, sample:K or beam:W)");
}

/// Single-instance dispatch; `key` selects the sampling stream.
inline Tour decode(const PolicyModel& model, const TspInstance& inst, const DecodeConfig& cfg,
                   std::uint64_t key = 0) {
  switch (cfg.mode) {
    case DecodeMode::greedy: return greedy_decode(model, inst);
    case DecodeMode::sample: return sample_decode(model, inst, cfg.k, cfg.seed, key).best;
    case DecodeMode::beam: {
      BeamResult r = beam_search(model, inst, cfg.width);
      return cfg.beam_by_probability ? r.most_probable : r.shortest;
    }
  }
  throw std::logic_error("unknown decode mode");
}

}  // namespace nco
