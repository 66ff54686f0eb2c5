#pragma once

// Building blocks shared by the encoders, decoder and critic: the parameter
// store, initialisation, linear layers and batch normalisation.

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nco/autodiff.hpp"
#include "nco/rng.hpp"

namespace nco {

enum class Mode { train, eval };

/// Owns trainable parameters and non-trainable buffers, in insertion order.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other) { *this = other; }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this == &other) return *this;
    params_.clear();
    index_.clear();
    for (const auto& p : other.params_) add(p->name, p->value);
    buffers_ = other.buffers_;
    return *this;
  }
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& add(const std::string& name, Tensor init) {
    if (index_.count(name) || buffers_.count(name)) {
      throw std::invalid_argument("duplicate parameter name " + name);
    }
    params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
    index_[name] = params_.size() - 1;
    return *params_.back();
  }

  Tensor& add_buffer(const std::string& name, Tensor init) {
    if (index_.count(name) || buffers_.count(name)) {
      throw std::invalid_argument("duplicate buffer name " + name);
    }
    return buffers_[name] = std::move(init);
  }

  Parameter& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return *params_[it->second];
  }
  const Parameter& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return *params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& buffer(const std::string& name) { return buffers_.at(name); }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }
  std::map<std::string, Tensor>& buffers() { return buffers_; }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<const Parameter*> params() const {
    std::vector<const Parameter*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  /// Number of trainable scalars.
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, Tensor> buffers_;
};

inline Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = rng.uniform(-bound, bound);
  return t;
}

/// Affine map x·W (+ b). W is stored [in, out]; init is uniform(±1/√in).
struct Linear {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;

  static Linear create(ParameterStore& store, const std::string& name, std::size_t in,
                       std::size_t out, bool with_bias, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l;
    l.weight = &store.add(name + ".weight", uniform_init({in, out}, bound, rng));
    if (with_bias) l.bias = &store.add(name + ".bias", uniform_init({out}, bound, rng));
    return l;
  }

  Var operator()(Var x) const {
    Var y = op::matmul(x, x.tape->leaf(*weight));
    if (bias != nullptr) y = op::add(y, x.tape->leaf(*bias));
    return y;
  }
};

namespace op {

/// Batch normalisation over all leading axes of x[..., d].
///
/// Train mode normalises with the batch mean and population variance and
/// moves the running statistics toward them; eval mode uses the running
/// statistics. epsilon keeps constant batches finite.
inline Var batch_norm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
                      Mode mode, double momentum = 0.1, double eps = 1e-5) {
  const Shape& xs = x.shape();
  const std::size_t d = xs.back();
  const std::size_t rows = x.numel() / d;
  if (gamma.numel() != d || beta.numel() != d || running_mean.numel() != d ||
      running_var.numel() != d) {
    throw ShapeError("batch_norm: feature size mismatch for " + shape_str(xs));
  }
  if (mode == Mode::train && rows < 2) {
    throw std::invalid_argument("batch_norm: train mode needs at least 2 rows");
  }
  const auto& xv = x.value().vec();
  std::vector<double> mu(d, 0.0), var(d, 0.0);
  if (mode == Mode::train) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) mu[j] += xv[r * d + j];
    for (auto& m : mu) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = xv[r * d + j] - mu[j];
        var[j] += c * c;
      }
    for (auto& v : var) v /= static_cast<double>(rows);
    const double unbias = static_cast<double>(rows) / static_cast<double>(rows - 1);
    for (std::size_t j = 0; j < d; ++j) {
      running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * mu[j];
      running_var[j] = (1.0 - momentum) * running_var[j] + momentum * var[j] * unbias;
    }
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      mu[j] = running_mean[j];
      var[j] = running_var[j];
    }
  }
  auto inv_std = std::make_shared<std::vector<double>>(d);
  for (std::size_t j = 0; j < d; ++j) (*inv_std)[j] = 1.0 / std::sqrt(var[j] + eps);
  auto xhat = std::make_shared<std::vector<double>>(rows * d);
  Tensor out(xs);
  const auto& gv = gamma.value().vec();
  const auto& bv = beta.value().vec();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xv[r * d + j] - mu[j]) * (*inv_std)[j];
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  const bool batch_stats = mode == Mode::train;
  return x.tape->push(std::move(out), {x, gamma, beta}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    const auto& gam = t.value(ig).vec();
    const auto& xh = *xhat;
    if (t.requires_grad(ig)) {
      auto& gg = t.grad(ig).vec();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xh[r * d + j];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib).vec();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
    }
    if (!t.requires_grad(ix)) return;
    auto& gx = t.grad(ix).vec();
    if (!batch_stats) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] * gam[j] * (*inv_std)[j];
      return;
    }
    std::vector<double> sum_g(d, 0.0), sum_gx(d, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        sum_g[j] += g[r * d + j];
        sum_gx[j] += g[r * d + j] * xh[r * d + j];
      }
    const double inv_n = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        const double dxh = g[r * d + j] - inv_n * sum_g[j] - xh[r * d + j] * inv_n * sum_gx[j];
        gx[r * d + j] += gam[j] * (*inv_std)[j] * dxh;
      }
  }, "batch_norm");
}

}  // namespace op

/// Batch-norm layer: affine gamma/beta plus running statistics buffers.
struct BatchNorm {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;

  static BatchNorm create(ParameterStore& store, const std::string& name, std::size_t d) {
    BatchNorm bn;
    bn.gamma = &store.add(name + ".gamma", Tensor({d}, 1.0));
    bn.beta = &store.add(name + ".beta", Tensor({d}, 0.0));
    bn.running_mean = &store.add_buffer(name + ".running_mean", Tensor({d}, 0.0));
    bn.running_var = &store.add_buffer(name + ".running_var", Tensor({d}, 1.0));
    return bn;
  }

  Var operator()(Var x, Mode mode) const {
    return op::batch_norm(x, x.tape->leaf(*gamma), x.tape->leaf(*beta), *running_mean,
                          *running_var, mode);
  }
};

}  // namespace nco
