#pragma once

// Exact and heuristic TSP solvers used as label generators and references.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "nco/tsp.hpp"

namespace nco {

inline constexpr std::size_t kBruteForceMaxNodes = 10;
inline constexpr std::size_t kHeldKarpMaxNodes = 20;
inline constexpr std::size_t kExactMaxNodes = kHeldKarpMaxNodes;

class SolverLimitError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Enumerates every cycle through node 0 (one orientation each).
inline Tour brute_force_solve(const TspInstance& inst) {
  const std::size_t n = inst.size();
  if (n > kBruteForceMaxNodes) {
    throw SolverLimitError("brute force refuses n=" + std::to_string(n) + " (limit " +
                           std::to_string(kBruteForceMaxNodes) + ")");
  }
  if (n <= 3) {
    Order order(n);
    std::iota(order.begin(), order.end(), NodeId{0});
    return make_tour(inst, canonicalize(order));
  }
  Order rest(n - 1);
  std::iota(rest.begin(), rest.end(), NodeId{1});
  double best = std::numeric_limits<double>::infinity();
  Order best_order;
  do {
    if (rest.front() > rest.back()) continue;
    double len = inst.dist(0, rest.front()) + inst.dist(rest.back(), 0);
    for (std::size_t i = 0; i + 1 < rest.size(); ++i) len += inst.dist(rest[i], rest[i + 1]);
    if (len < best) {
      best = len;
      best_order = rest;
    }
  } while (std::next_permutation(rest.begin(), rest.end()));
  Order order{0};
  order.insert(order.end(), best_order.begin(), best_order.end());
  return make_tour(inst, canonicalize(order));
}

/// Held-Karp dynamic program over (visited subset, last node), O(n² 2ⁿ).
inline Tour held_karp_solve(const TspInstance& inst) {
  const std::size_t n = inst.size();
  if (n > kHeldKarpMaxNodes) {
    throw SolverLimitError("Held-Karp refuses n=" + std::to_string(n) + " (limit " +
                           std::to_string(kHeldKarpMaxNodes) + ")");
  }
  if (n <= 3) return brute_force_solve(inst);

  // Nodes 1..n-1 are re-indexed 0..m-1; node 0 is the fixed start.
  const std::size_t m = n - 1;
  const std::size_t full = (std::size_t{1} << m) - 1;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> into(m * m);  // into[j*m + k] = dist(k -> j)
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t k = 0; k < m; ++k) into[j * m + k] = inst.dist(k + 1, j + 1);

  std::vector<double> cost((full + 1) * m, kInf);
  std::vector<std::uint8_t> parent((full + 1) * m, 0);
  for (std::size_t j = 0; j < m; ++j) cost[(std::size_t{1} << j) * m + j] = inst.dist(0, j + 1);

  for (std::size_t set = 1; set <= full; ++set) {
    if ((set & (set - 1)) == 0) continue;
    for (std::size_t j = 0; j < m; ++j) {
      if (!(set & (std::size_t{1} << j))) continue;
      const double* prev = &cost[(set ^ (std::size_t{1} << j)) * m];
      const double* dj = &into[j * m];
      double best = kInf;
      std::size_t arg = 0;
      for (std::size_t k = 0; k < m; ++k) {
        const double c = prev[k] + dj[k];
        if (c < best) {
          best = c;
          arg = k;
        }
      }
      cost[set * m + j] = best;
      parent[set * m + j] = static_cast<std::uint8_t>(arg);
    }
  }

  double best = kInf;
  std::size_t last = 0;
  for (std::size_t j = 0; j < m; ++j) {
    const double c = cost[full * m + j] + inst.dist(j + 1, 0);
    if (c < best) {
      best = c;
      last = j;
    }
  }
  Order rev;
  std::size_t set = full;
  std::size_t cur = last;
  while (true) {
    rev.push_back(cur + 1);
    const std::size_t next_set = set ^ (std::size_t{1} << cur);
    if (next_set == 0) break;
    cur = parent[set * m + cur];
    set = next_set;
  }
  Order order{0};
  order.insert(order.end(), rev.rbegin(), rev.rend());
  return make_tour(inst, canonicalize(order));
}

/// Greedy nearest-unvisited construction; ties go to the lower index.
inline Tour nearest_neighbor(const TspInstance& inst, NodeId start = 0) {
  const std::size_t n = inst.size();
  if (start >= n) throw std::out_of_range("nearest_neighbor: start node out of range");
  std::vector<bool> seen(n, false);
  Order order{start};
  seen[start] = true;
  NodeId cur = start;
  for (std::size_t step = 1; step < n; ++step) {
    NodeId best = n;
    double best_d = std::numeric_limits<double>::infinity();
    for (NodeId v = 0; v < n; ++v) {
      if (seen[v]) continue;
      const double d = inst.dist(cur, v);
      if (d < best_d) {
        best_d = d;
        best = v;
      }
    }
    order.push_back(best);
    seen[best] = true;
    cur = best;
  }
  return make_tour(inst, std::move(order));
}

/// First-improvement 2-opt: applies every improving segment reversal found
/// while sweeping, until a full sweep finds none.
inline Tour two_opt(const TspInstance& inst, const Tour& start) {
  const std::size_t n = inst.size();
  if (!is_permutation(start.order, n)) throw std::invalid_argument("two_opt: invalid tour");
  Order t = start.order;
  constexpr double kMinGain = 1e-12;
  bool improved = n >= 4;
  while (improved) {
    improved = false;
    for (std::size_t i = 0; i + 2 < n; ++i) {
      for (std::size_t j = i + 2; j < n; ++j) {
        if (i == 0 && j == n - 1) continue;
        const NodeId a = t[i], b = t[i + 1], c = t[j], d = t[(j + 1) % n];
        const double delta = inst.dist(a, c) + inst.dist(b, d) - inst.dist(a, b) - inst.dist(c, d);
        if (delta < -kMinGain) {
          std::reverse(t.begin() + static_cast<std::ptrdiff_t>(i + 1),
                       t.begin() + static_cast<std::ptrdiff_t>(j + 1));
          improved = true;
        }
      }
    }
  }
  Tour out = make_tour(inst, std::move(t));
  Tour original = make_tour(inst, start.order);
  return out.length <= original.length ? out : original;
}

struct Reference {
  Tour tour;
  bool exact = false;
};

/// Exact for n ≤ 20 (Held-Karp), otherwise 2-opt over nearest-neighbor.
inline Reference reference_solve(const TspInstance& inst) {
  if (inst.size() <= kExactMaxNodes) return {held_karp_solve(inst), true};
  return {two_opt(inst, nearest_neighbor(inst, 0)), false};
}

}  // namespace nco
