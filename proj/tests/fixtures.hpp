#pragma once

#include <cmath>
#include <vector>

#include "nco/model.hpp"
#include "nco/rng.hpp"
#include "nco/tsp.hpp"

namespace nco::testing {

inline ModelConfig small_config(EncoderKind kind, std::size_t d = 8, std::size_t layers = 2,
                                std::size_t heads = 2, std::uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.encoder.kind = kind;
  cfg.encoder.layers = layers;
  cfg.encoder.embed_dim = d;
  cfg.encoder.heads = heads;
  cfg.encoder.ff_dim = 2 * d;
  cfg.init_seed = seed;
  return cfg;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Moves batch-norm running statistics away from (0, 1) so eval mode is not
/// an identity map.
inline void perturb_buffers(ParameterStore& store, Rng& rng) {
  for (auto& [name, buf] : store.buffers()) {
    const bool is_var = name.find("running_var") != std::string::npos;
    for (auto& v : buf.data()) v = is_var ? rng.uniform(0.5, 2.0) : rng.uniform(-0.5, 0.5);
  }
}

/// Moves every parameter by a small random amount so zero-initialised
/// entries (batch-norm beta) are exercised too.
inline void perturb_params(ParameterStore& store, Rng& rng, double amount = 0.1) {
  for (Parameter* p : store.params())
    for (auto& v : p->value.data()) v += rng.uniform(-amount, amount);
}

inline std::vector<const TspInstance*> pointers(const std::vector<TspInstance>& v) {
  std::vector<const TspInstance*> out;
  for (const auto& i : v) out.push_back(&i);
  return out;
}

}  // namespace nco::testing
