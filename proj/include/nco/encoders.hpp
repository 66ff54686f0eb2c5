#pragma once

// Graph encoders mapping node coordinates to per-node embeddings h_i and a
// graph embedding (the mean of the h_i).
//
// * graph-transformer: multi-head self-attention over the complete graph,
//   each sublayer wrapped in a residual connection and batch norm, no
//   positional encoding.
// * gated-gcn: node and edge streams; edges start from the pairwise
//   Euclidean distance, node aggregation is weighted by sigmoid edge gates
//   normalised over neighbours.

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nco/nn.hpp"
#include "nco/tsp.hpp"

namespace nco {

enum class EncoderKind { graph_transformer, gated_gcn };

inline std::string to_string(EncoderKind k) {
  return k == EncoderKind::graph_transformer ? "gat" : "gcn";
}

inline EncoderKind parse_encoder_kind(const std::string& s) {
  if (s == "gat" || s == "graph-transformer") return EncoderKind::graph_transformer;
  if (s == "gcn" || s == "gated-gcn") return EncoderKind::gated_gcn;
  throw std::invalid_argument("unknown encoder '" + s + "' (expected gat or gcn)");
}

struct EncoderConfig {
  EncoderKind kind = EncoderKind::graph_transformer;
  std::size_t layers = 3;
  std::size_t embed_dim = 128;
  std::size_t heads = 8;     // graph-transformer only
  std::size_t ff_dim = 512;  // graph-transformer only

  void validate() const {
    if (layers < 1) throw std::invalid_argument("encoder needs at least one layer");
    if (embed_dim < 1) throw std::invalid_argument("embed_dim must be positive");
    if (heads < 1 || embed_dim % heads != 0) {
      throw std::invalid_argument("embed_dim " + std::to_string(embed_dim) +
                                  " is not divisible by heads " + std::to_string(heads));
    }
    if (kind == EncoderKind::graph_transformer && ff_dim < 1) {
      throw std::invalid_argument("ff_dim must be positive");
    }
  }
};

struct Embeddings {
  Var node;   // [B, n, d]
  Var graph;  // [B, d]
};

using InstanceBatch = std::span<const TspInstance* const>;

inline std::size_t batch_node_count(InstanceBatch batch) {
  if (batch.empty()) throw std::invalid_argument("empty instance batch");
  const std::size_t n = batch.front()->size();
  for (const auto* inst : batch) {
    if (inst->size() != n) throw std::invalid_argument("instances in a batch must share n");
  }
  return n;
}

/// [B, n, 2] coordinates.
inline Tensor coords_tensor(InstanceBatch batch) {
  const std::size_t n = batch_node_count(batch);
  Tensor t({batch.size(), n, 2});
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t i = 0; i < n; ++i) {
      t[(b * n + i) * 2] = (*batch[b])[i].x;
      t[(b * n + i) * 2 + 1] = (*batch[b])[i].y;
    }
  return t;
}

/// [B, n, n, 1] pairwise Euclidean distances.
inline Tensor distance_tensor(InstanceBatch batch) {
  const std::size_t n = batch_node_count(batch);
  Tensor t({batch.size(), n, n, 1});
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) t[(b * n + i) * n + j] = batch[b]->dist(i, j);
  return t;
}

/// Multi-head scaled dot-product attention of queries q[B,m,d] over keys
/// k[B,n,d] / values v[B,n,d]; `mask` (optional) is [B,m,n].
inline Var multi_head_attention(Var q, Var k, Var v, std::size_t heads, const Mask* mask) {
  const std::size_t B = q.shape()[0], m = q.shape()[1], d = q.shape()[2];
  const std::size_t n = k.shape()[1];
  const double scale = 1.0 / std::sqrt(static_cast<double>(d / heads));
  Var qh = op::split_heads(q, heads);
  Var kh = op::split_heads(k, heads);
  Var vh = op::split_heads(v, heads);
  Var compat = op::scale(op::bmm_nt(qh, kh), scale);
  Mask head_mask;
  if (mask != nullptr) {
    head_mask.resize(B * heads * m * n);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(mask->begin() + static_cast<std::ptrdiff_t>(b * m * n), m * n,
                    head_mask.begin() + static_cast<std::ptrdiff_t>((b * heads + h) * m * n));
  }
  Var attn = op::softmax(compat, mask ? &head_mask : nullptr);
  return op::merge_heads(op::bmm(attn, vh), heads);
}

class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, ParameterStore& store, const std::string& prefix, Rng& rng)
      : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.embed_dim;
    if (cfg_.kind == EncoderKind::graph_transformer) {
      init_ = Linear::create(store, prefix + ".init", 2, d, true, rng);
      for (std::size_t l = 0; l < cfg_.layers; ++l) {
        const std::string p = prefix + ".layers." + std::to_string(l);
        TransformerLayer layer;
        layer.wq = Linear::create(store, p + ".attn.wq", d, d, false, rng);
        layer.wk = Linear::create(store, p + ".attn.wk", d, d, false, rng);
        layer.wv = Linear::create(store, p + ".attn.wv", d, d, false, rng);
        layer.wo = Linear::create(store, p + ".attn.wo", d, d, false, rng);
        layer.norm1 = BatchNorm::create(store, p + ".norm1", d);
        layer.ff1 = Linear::create(store, p + ".ff1", d, cfg_.ff_dim, true, rng);
        layer.ff2 = Linear::create(store, p + ".ff2", cfg_.ff_dim, d, true, rng);
        layer.norm2 = BatchNorm::create(store, p + ".norm2", d);
        transformer_.push_back(layer);
      }
    } else {
      init_ = Linear::create(store, prefix + ".init", 2, d, true, rng);
      edge_init_ = Linear::create(store, prefix + ".edge_init", 1, d, true, rng);
      for (std::size_t l = 0; l < cfg_.layers; ++l) {
        const std::string p = prefix + ".layers." + std::to_string(l);
        GcnLayer layer;
        layer.u = Linear::create(store, p + ".u", d, d, true, rng);
        layer.v = Linear::create(store, p + ".v", d, d, true, rng);
        layer.a = Linear::create(store, p + ".a", d, d, true, rng);
        layer.b = Linear::create(store, p + ".b", d, d, true, rng);
        layer.norm_h = BatchNorm::create(store, p + ".norm_h", d);
        layer.norm_e = BatchNorm::create(store, p + ".norm_e", d);
        gcn_.push_back(layer);
      }
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  Embeddings encode(Tape& tape, InstanceBatch batch, Mode mode) const {
    return cfg_.kind == EncoderKind::graph_transformer ? encode_graph_transformer(tape, batch, mode)
                                                       : encode_gated_gcn(tape, batch, mode);
  }

  Embeddings encode_graph_transformer(Tape& tape, InstanceBatch batch, Mode mode) const {
    const std::size_t B = batch.size(), n = batch_node_count(batch), d = cfg_.embed_dim;
    Var h = init_(tape.constant(coords_tensor(batch)));
    for (const auto& layer : transformer_) {
      Var attn = layer.wo(multi_head_attention(layer.wq(h), layer.wk(h), layer.wv(h), cfg_.heads, nullptr));
      h = op::reshape(layer.norm1(op::reshape(h + attn, {B * n, d}), mode), {B, n, d});
      Var ff = layer.ff2(op::relu(layer.ff1(h)));
      h = op::reshape(layer.norm2(op::reshape(h + ff, {B * n, d}), mode), {B, n, d});
    }
    return {h, op::mean_axis(h, 1)};
  }

  Embeddings encode_gated_gcn(Tape& tape, InstanceBatch batch, Mode mode) const {
    const std::size_t B = batch.size(), n = batch_node_count(batch), d = cfg_.embed_dim;
    constexpr double kGateEps = 1e-20;
    Var h = init_(tape.constant(coords_tensor(batch)));
    Var e = edge_init_(tape.constant(distance_tensor(batch)));  // [B, n, n, d]
    for (const auto& layer : gcn_) {
      Var bh = layer.b(h);
      Var e_hat = layer.a(e) + op::reshape(bh, {B, n, 1, d}) + op::reshape(bh, {B, 1, n, d});
      Var gates = op::sigmoid(e_hat);
      Var vh = op::reshape(layer.v(h), {B, 1, n, d});
      Var agg = op::sum_axis(gates * vh, 2);
      Var norm = op::add_scalar(op::sum_axis(gates, 2), kGateEps);
      Var h_tilde = layer.u(h) + op::div(agg, norm);
      Var h_new = op::relu(layer.norm_h(op::reshape(h_tilde, {B * n, d}), mode));
      Var e_new = op::relu(layer.norm_e(op::reshape(e_hat, {B * n * n, d}), mode));
      h = h + op::reshape(h_new, {B, n, d});
      e = e + op::reshape(e_new, {B, n, n, d});
    }
    return {h, op::mean_axis(h, 1)};
  }

 private:
  struct TransformerLayer {
    Linear wq, wk, wv, wo;
    BatchNorm norm1;
    Linear ff1, ff2;
    BatchNorm norm2;
  };
  struct GcnLayer {
    Linear u, v, a, b;
    BatchNorm norm_h, norm_e;
  };

  EncoderConfig cfg_;
  Linear init_;
  Linear edge_init_;
  std::vector<TransformerLayer> transformer_;
  std::vector<GcnLayer> gcn_;
};

}  // namespace nco
