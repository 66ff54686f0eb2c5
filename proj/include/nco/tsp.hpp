#pragma once

// 2D Euclidean TSP instances, tours and tour metrics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nco/rng.hpp"

namespace nco {

using NodeId = std::size_t;
using Order = std::vector<NodeId>;

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(const Point& a, const Point& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

class TspInstance {
 public:
  TspInstance() = default;
  explicit TspInstance(std::vector<Point> coords) : coords_(std::move(coords)) {
    if (coords_.size() < 2) throw std::invalid_argument("a TSP instance needs at least 2 nodes");
    for (const auto& p : coords_) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
        throw std::invalid_argument("non-finite coordinate");
      }
    }
  }

  std::size_t size() const { return coords_.size(); }
  const std::vector<Point>& coords() const { return coords_; }
  const Point& operator[](NodeId i) const { return coords_[i]; }
  double dist(NodeId a, NodeId b) const { return distance(coords_[a], coords_[b]); }

  bool in_unit_square() const {
    return std::all_of(coords_.begin(), coords_.end(), [](const Point& p) {
      return p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0;
    });
  }

  friend bool operator==(const TspInstance&, const TspInstance&) = default;

 private:
  std::vector<Point> coords_;
};

struct Tour {
  Order order;
  double length = 0.0;
  std::optional<double> log_prob;
};

inline bool is_permutation(const Order& order, std::size_t n) {
  if (order.size() != n) return false;
  std::vector<bool> seen(n, false);
  for (NodeId v : order) {
    if (v >= n || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

/// n i.i.d. uniform points in the unit square.
inline TspInstance generate_instance(std::size_t n, Rng& rng) {
  if (n < 2) throw std::invalid_argument("generate_instance: n must be at least 2");
  std::vector<Point> pts(n);
  for (auto& p : pts) {
    p.x = rng.uniform();
    p.y = rng.uniform();
  }
  return TspInstance(std::move(pts));
}

/// Instance `index` of a seeded family; independent of how many are drawn.
inline TspInstance generate_instance(std::size_t n, std::uint64_t seed, std::uint64_t index) {
  Rng rng(seed, {n, index});
  return generate_instance(n, rng);
}

inline std::vector<TspInstance> generate_instances(std::size_t n, std::size_t count,
                                                   std::uint64_t seed) {
  std::vector<TspInstance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_instance(n, seed, i));
  return out;
}

/// Closed-cycle Euclidean length of `order`.
inline double tour_length(const TspInstance& inst, const Order& order) {
  if (!is_permutation(order, inst.size())) {
    throw std::invalid_argument("tour_length: order is not a permutation of 0..n-1");
  }
  double len = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    len += inst.dist(order[i], order[(i + 1) % order.size()]);
  }
  return len;
}

inline Tour make_tour(const TspInstance& inst, Order order) {
  Tour t;
  t.length = tour_length(inst, order);
  t.order = std::move(order);
  return t;
}

/// Percent excess of `pred_len` over `opt_len`.
inline double optimality_gap(double pred_len, double opt_len) {
  if (!(opt_len > 0.0)) throw std::invalid_argument("optimality_gap: optimum must be positive");
  return (pred_len / opt_len - 1.0) * 100.0;
}

/// Mean of per-instance gaps (the reported aggregate).
inline double mean_gap(const std::vector<double>& pred, const std::vector<double>& opt) {
  if (pred.size() != opt.size() || pred.empty()) {
    throw std::invalid_argument("mean_gap: length mismatch or empty input");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += optimality_gap(pred[i], opt[i]);
  return s / static_cast<double>(pred.size());
}

/// Rotates node 0 to the front and orients the cycle so order[1] < order[n-1].
inline Order canonicalize(Order order) {
  if (order.empty()) return order;
  auto zero = std::find(order.begin(), order.end(), NodeId{0});
  if (zero == order.end()) throw std::invalid_argument("canonicalize: node 0 missing");
  std::rotate(order.begin(), zero, order.end());
  if (order.size() > 2 && order[1] > order.back()) std::reverse(order.begin() + 1, order.end());
  return order;
}

}  // namespace nco
