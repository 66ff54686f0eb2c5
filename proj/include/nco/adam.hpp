#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "nco/nn.hpp"

namespace nco {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Moments are keyed by parameter name.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(AdamConfig config) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  std::uint64_t step_count() const { return step_; }

  /// Applies one update to every parameter in `store` from its current grad.
  void step(ParameterStore& store) {
    ++step_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (Parameter* p : store.params()) {
      auto [it, fresh] = moments_.try_emplace(p->name);
      if (fresh) {
        it->second.m = Tensor(p->value.shape());
        it->second.v = Tensor(p->value.shape());
      }
      Moments& mom = it->second;
      if (mom.m.shape() != p->value.shape() || p->grad.shape() != p->value.shape()) {
        throw ShapeError("adam: shape mismatch for " + p->name);
      }
      auto& w = p->value.vec();
      const auto& g = p->grad.vec();
      auto& m = mom.m.vec();
      auto& v = mom.v.vec();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        w[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.epsilon);
      }
    }
  }

  struct Moments {
    Tensor m;
    Tensor v;
  };
  const std::map<std::string, Moments>& moments() const { return moments_; }
  std::map<std::string, Moments>& moments() { return moments_; }
  void set_step_count(std::uint64_t s) { step_ = s; }

 private:
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace nco
