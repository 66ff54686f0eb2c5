#pragma once

// Labelled/unlabelled instance collections and their line-oriented text
// format:
//
//   x1 y1 x2 y2 ... xn yn output t1 t2 ... tn t1
//
// Tour indices are 1-based and the tour closes on its first node. An
// unlabelled record ends right after the `output` token. Coordinates are
// written in shortest round-trip form. A JSON sidecar `<path>.meta.json`
// carries size/count/seed/solver when written by this library.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "nco/solvers.hpp"
#include "nco/tsp.hpp"

namespace nco {

class DatasetParseError : public std::runtime_error {
 public:
  DatasetParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct DatasetMeta {
  std::size_t size = 0;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::string solver = "unknown";  // none | bruteforce | heldkarp | twoopt | unknown

  bool exact() const { return solver == "bruteforce" || solver == "heldkarp"; }
};

struct Dataset {
  std::vector<TspInstance> instances;
  std::vector<Tour> solutions;  // empty, or aligned with instances
  DatasetMeta meta;

  bool labelled() const { return !solutions.empty(); }
  std::size_t size() const { return instances.size(); }
};

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// Solves one instance with a named solver: bruteforce, heldkarp or twoopt.
inline Tour solve_with(const std::string& solver, const TspInstance& inst) {
  if (solver == "heldkarp") return held_karp_solve(inst);
  if (solver == "bruteforce") return brute_force_solve(inst);
  if (solver == "twoopt") return two_opt(inst, nearest_neighbor(inst, 0));
  throw std::invalid_argument("unknown solver '" + solver + "'");
}

/// Generates `count` instances of size n and optionally solves them.
inline Dataset make_dataset(std::size_t n, std::size_t count, std::uint64_t seed,
                            const std::string& solver) {
  Dataset ds;
  ds.meta = {n, count, seed, solver};
  ds.instances = generate_instances(n, count, seed);
  if (solver == "none") return ds;
  ds.solutions.reserve(count);
  for (const auto& inst : ds.instances) ds.solutions.push_back(solve_with(solver, inst));
  return ds;
}

inline std::string format_record(const TspInstance& inst, const Tour* tour) {
  std::string line;
  for (const auto& p : inst.coords()) {
    line += format_double(p.x);
    line += ' ';
    line += format_double(p.y);
    line += ' ';
  }
  line += "output";
  if (tour != nullptr) {
    for (NodeId v : tour->order) line += ' ' + std::to_string(v + 1);
    line += ' ' + std::to_string(tour->order.front() + 1);
  }
  return line;
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
  if (ds.labelled() && ds.solutions.size() != ds.instances.size()) {
    throw std::invalid_argument("write_dataset: solutions not aligned with instances");
  }
  for (const auto& inst : ds.instances) {
    if (inst.size() != ds.instances.front().size()) {
      throw std::invalid_argument("write_dataset: inconsistent node counts");
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (std::size_t i = 0; i < ds.instances.size(); ++i) {
    out << format_record(ds.instances[i], ds.labelled() ? &ds.solutions[i] : nullptr) << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path);

  nlohmann::json meta = {{"size", ds.instances.empty() ? 0 : ds.instances.front().size()},
                         {"count", ds.instances.size()},
                         {"seed", ds.meta.seed},
                         {"solver", ds.meta.solver}};
  std::ofstream mout(path + ".meta.json", std::ios::binary);
  mout << meta.dump(2) << '\n';
}

namespace detail {

inline double parse_double(const std::string& tok, std::size_t line) {
  double v = 0.0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    throw DatasetParseError(line, "bad coordinate '" + tok + "'");
  }
  return v;
}

inline std::size_t parse_index(const std::string& tok, std::size_t line) {
  std::size_t v = 0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    throw DatasetParseError(line, "bad tour index '" + tok + "'");
  }
  return v;
}

}  // namespace detail

/// Parses one record; `line` is only used for error messages.
inline std::pair<TspInstance, std::optional<Tour>> parse_record(const std::string& text,
                                                                std::size_t line = 1) {
  std::istringstream is(text);
  std::vector<std::string> coords, tour;
  std::string tok;
  bool seen_output = false;
  while (is >> tok) {
    if (tok == "output") {
      if (seen_output) throw DatasetParseError(line, "repeated 'output' keyword");
      seen_output = true;
    } else {
      (seen_output ? tour : coords).push_back(tok);
    }
  }
  if (!seen_output) throw DatasetParseError(line, "missing 'output' keyword");
  if (coords.size() % 2 != 0) throw DatasetParseError(line, "odd number of coordinates");
  const std::size_t n = coords.size() / 2;
  if (n < 2) throw DatasetParseError(line, "fewer than 2 nodes");
  std::vector<Point> pts(n);
  for (std::size_t i = 0; i < n; ++i) {
    pts[i] = {detail::parse_double(coords[2 * i], line), detail::parse_double(coords[2 * i + 1], line)};
  }
  TspInstance inst(std::move(pts));
  if (tour.empty()) return {std::move(inst), std::nullopt};
  if (tour.size() != n + 1) {
    throw DatasetParseError(line, "tour has " + std::to_string(tour.size()) + " entries, expected " +
                                      std::to_string(n + 1));
  }
  Order order;
  for (std::size_t i = 0; i < tour.size(); ++i) {
    const std::size_t v = detail::parse_index(tour[i], line);
    if (v < 1 || v > n) throw DatasetParseError(line, "tour index " + tour[i] + " out of range");
    if (i < n) order.push_back(v - 1);
    else if (v - 1 != order.front()) throw DatasetParseError(line, "tour does not close on its first node");
  }
  if (!is_permutation(order, n)) throw DatasetParseError(line, "tour is not a permutation");
  Tour t = make_tour(inst, std::move(order));
  return {std::move(inst), std::move(t)};
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  Dataset ds;
  std::string text;
  std::size_t line = 0;
  std::optional<bool> labelled;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto [inst, tour] = parse_record(text, line);
    if (labelled.has_value() && *labelled != tour.has_value()) {
      throw DatasetParseError(line, "mix of labelled and unlabelled records");
    }
    labelled = tour.has_value();
    if (!ds.instances.empty() && inst.size() != ds.instances.front().size()) {
      throw DatasetParseError(line, "node count differs from previous records");
    }
    ds.instances.push_back(std::move(inst));
    if (tour) ds.solutions.push_back(std::move(*tour));
  }
  ds.meta.count = ds.instances.size();
  ds.meta.size = ds.instances.empty() ? 0 : ds.instances.front().size();
  ds.meta.solver = ds.labelled() ? "unknown" : "none";
  std::ifstream min(path + ".meta.json");
  if (min) {
    auto meta = nlohmann::json::parse(min, nullptr, /*allow_exceptions=*/false);
    if (meta.is_object()) {
      ds.meta.seed = meta.value("seed", std::uint64_t{0});
      ds.meta.solver = meta.value("solver", ds.meta.solver);
    }
  }
  return ds;
}

}  // namespace nco
