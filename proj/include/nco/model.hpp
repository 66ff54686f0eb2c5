#pragma once

// The autoregressive policy (encoder + attention decoder) and the critic
// value network used as an alternative REINFORCE baseline.

#include <cmath>
#include <string>
#include <vector>

#include "nco/encoders.hpp"
#include "nco/nn.hpp"

namespace nco {

struct ModelConfig {
  EncoderConfig encoder;
  double clip = 10.0;  // logits are clip·tanh(·)
  std::uint64_t init_seed = 1234;

  void validate() const {
    encoder.validate();
    if (!(clip > 0.0)) throw std::invalid_argument("clip constant must be positive");
  }
};

/// Decoding state for B instances × m parallel rows (samples or beams).
struct DecoderState {
  std::size_t batch = 0;
  std::size_t rows = 1;  // m
  std::size_t n = 0;
  std::size_t step = 0;
  std::vector<NodeId> first;  // [B·m], valid once step > 0
  std::vector<NodeId> last;   // [B·m]
  Mask allowed;               // [B·m·n], 1 = not yet visited
  std::vector<Order> partial;  // [B·m]

  static DecoderState start(std::size_t batch, std::size_t rows, std::size_t n) {
    DecoderState s;
    s.batch = batch;
    s.rows = rows;
    s.n = n;
    s.first.assign(batch * rows, 0);
    s.last.assign(batch * rows, 0);
    s.allowed.assign(batch * rows * n, 1);
    s.partial.assign(batch * rows, {});
    return s;
  }

  bool done() const { return step == n; }

  /// Appends `choice[r]` to every row.
  void advance(const std::vector<NodeId>& choice) {
    if (choice.size() != batch * rows) throw std::invalid_argument("advance: wrong choice count");
    for (std::size_t r = 0; r < choice.size(); ++r) {
      const NodeId v = choice[r];
      if (v >= n || !allowed[r * n + v]) {
        throw std::logic_error("decoder chose visited or invalid node " + std::to_string(v));
      }
      if (step == 0) first[r] = v;
      last[r] = v;
      allowed[r * n + v] = 0;
      partial[r].push_back(v);
    }
    ++step;
  }
};

/// Per-instance tensors computed once from the embeddings.
struct DecoderCache {
  Var node;         // [B, n, d]
  Var fixed;        // [B, 1, d]
  Var glimpse_key;  // [B·H, n, dk]
  Var glimpse_val;  // [B·H, n, dk]
  Var logit_key;    // [B, n, d]
  std::size_t batch = 0;
  std::size_t n = 0;
};

class AttentionDecoder {
 public:
  AttentionDecoder() = default;
  AttentionDecoder(std::size_t d, std::size_t heads, double clip, ParameterStore& store,
                   const std::string& prefix, Rng& rng)
      : d_(d), heads_(heads), clip_(clip) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    placeholder_ = &store.add(prefix + ".placeholder", uniform_init({1, 2 * d}, bound, rng));
    project_node_ = Linear::create(store, prefix + ".project_node", d, 3 * d, false, rng);
    project_fixed_ = Linear::create(store, prefix + ".project_fixed", d, d, false, rng);
    project_step_ = Linear::create(store, prefix + ".project_step", 2 * d, d, false, rng);
    project_out_ = Linear::create(store, prefix + ".project_out", d, d, false, rng);
  }

  std::size_t heads() const { return heads_; }
  double clip() const { return clip_; }

  DecoderCache precompute(const Embeddings& emb) const {
    DecoderCache c;
    c.batch = emb.node.shape()[0];
    c.n = emb.node.shape()[1];
    c.node = emb.node;
    c.fixed = op::reshape(project_fixed_(emb.graph), {c.batch, 1, d_});
    Var proj = project_node_(emb.node);
    c.glimpse_key = op::split_heads(op::slice_last(proj, 0, d_), heads_);
    c.glimpse_val = op::split_heads(op::slice_last(proj, d_, d_), heads_);
    c.logit_key = op::slice_last(proj, 2 * d_, d_);
    return c;
  }

  /// Log-probabilities [B, m, n] over next nodes; visited nodes get -inf.
  Var step_log_probs(const DecoderCache& c, const DecoderState& s) const {
    if (s.done()) throw std::logic_error("decode_step: all nodes already visited");
    if (s.batch != c.batch || s.n != c.n) throw std::invalid_argument("decoder state/cache mismatch");
    Tape& tape = *c.node.tape;
    const std::size_t B = c.batch, m = s.rows, n = c.n;
    Var step_ctx;
    if (s.step == 0) {
      Var ph = project_step_(tape.leaf(*placeholder_));  // [1, d]
      step_ctx = op::broadcast_to(op::reshape(ph, {1, 1, d_}), {B, m, d_});
    } else {
      Var pair = op::concat_last(op::gather_rows(c.node, s.first, m), op::gather_rows(c.node, s.last, m));
      step_ctx = project_step_(pair);
    }
    Var query = op::add(op::broadcast_to(c.fixed, {B, m, d_}), step_ctx);

    // Glimpse: one multi-head attention over the unvisited nodes.
    const double head_scale = 1.0 / std::sqrt(static_cast<double>(d_ / heads_));
    Var qh = op::split_heads(query, heads_);
    Var compat = op::scale(op::bmm_nt(qh, c.glimpse_key), head_scale);
    Mask head_mask(B * heads_ * m * n);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads_; ++h)
        std::copy_n(s.allowed.begin() + static_cast<std::ptrdiff_t>(b * m * n), m * n,
                    head_mask.begin() + static_cast<std::ptrdiff_t>((b * heads_ + h) * m * n));
    Var attn = op::softmax(compat, &head_mask);
    Var glimpse = project_out_(op::merge_heads(op::bmm(attn, c.glimpse_val), heads_));

    // Single-head compatibility, clipped with tanh.
    Var logits = op::scale(op::bmm_nt(glimpse, c.logit_key), 1.0 / std::sqrt(static_cast<double>(d_)));
    logits = op::scale(op::tanh(logits), clip_);
    return op::log_softmax(logits, &s.allowed);
  }

 private:
  std::size_t d_ = 0;
  std::size_t heads_ = 1;
  double clip_ = 10.0;
  Parameter* placeholder_ = nullptr;
  Linear project_node_, project_fixed_, project_step_, project_out_;
};

class PolicyModel {
 public:
  explicit PolicyModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed, {0x706f6c696379ULL});
    encoder_ = Encoder(cfg_.encoder, store_, "encoder", rng);
    decoder_ = AttentionDecoder(cfg_.encoder.embed_dim, cfg_.encoder.heads, cfg_.clip, store_,
                                "decoder", rng);
  }

  PolicyModel(const PolicyModel& other) : PolicyModel(other.cfg_) { copy_weights_from(other); }
  PolicyModel& operator=(const PolicyModel& other) {
    if (this != &other) {
      PolicyModel tmp(other);
      *this = std::move(tmp);
    }
    return *this;
  }
  PolicyModel(PolicyModel&&) = default;
  PolicyModel& operator=(PolicyModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const Encoder& encoder() const { return encoder_; }
  const AttentionDecoder& decoder() const { return decoder_; }

  std::size_t parameter_count() const { return store_.count(); }

  void copy_weights_from(const PolicyModel& other) {
    auto dst = store_.params();
    auto src = other.store_.params();
    if (dst.size() != src.size()) throw std::invalid_argument("copy_weights_from: architecture mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i]->name != src[i]->name || dst[i]->value.shape() != src[i]->value.shape()) {
        throw std::invalid_argument("copy_weights_from: parameter mismatch at " + dst[i]->name);
      }
      dst[i]->value = src[i]->value;
    }
    for (auto& [name, buf] : store_.buffers()) buf = other.store_.buffers().at(name);
  }

  Embeddings encode(Tape& tape, InstanceBatch batch, Mode mode) const {
    return encoder_.encode(tape, batch, mode);
  }

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  Encoder encoder_;
  AttentionDecoder decoder_;
};

/// Exact trainable-parameter count of the policy for `cfg`.
inline std::size_t parameter_count(const ModelConfig& cfg) { return PolicyModel(cfg).parameter_count(); }

/// Value network: same encoder architecture, mean-pooled, then an MLP with
/// one ReLU hidden layer and a scalar output.
class Critic {
 public:
  static constexpr std::size_t kHidden = 128;

  explicit Critic(const EncoderConfig& cfg, std::uint64_t init_seed = 4321) : cfg_(cfg) {
    Rng rng(init_seed, {0x637269746963ULL});
    encoder_ = Encoder(cfg_, store_, "critic.encoder", rng);
    hidden_ = Linear::create(store_, "critic.hidden", cfg_.embed_dim, kHidden, true, rng);
    out_ = Linear::create(store_, "critic.out", kHidden, 1, true, rng);
  }
  Critic(const Critic&) = delete;
  Critic& operator=(const Critic&) = delete;
  Critic(Critic&&) = default;
  Critic& operator=(Critic&&) = default;

  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const EncoderConfig& config() const { return cfg_; }

  /// Predicted tour length per instance, [B].
  Var value(Tape& tape, InstanceBatch batch, Mode mode) const {
    Embeddings emb = encoder_.encode(tape, batch, mode);
    Var v = out_(op::relu(hidden_(emb.graph)));  // [B, 1]
    return op::reshape(v, {batch.size()});
  }

 private:
  EncoderConfig cfg_;
  ParameterStore store_;
  Encoder encoder_;
  Linear hidden_, out_;
};

}  // namespace nco
