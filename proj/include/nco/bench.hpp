#pragma once

// Evaluation protocol: per-size test sets with reference tours, decoding
// under several modes, CSV reports, paradigm comparison and curve output.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "nco/search.hpp"
#include "nco/solvers.hpp"
#include "nco/training.hpp"

namespace nco {

inline constexpr const char* kExactRef = "exact";
inline constexpr const char* kHeuristicRef = "heuristic-reference";

inline std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

/// Runs fn(i) for i in [0, count) on `workers` threads. Work is claimed by
/// index, so results stored per index do not depend on scheduling.
inline void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          next = count;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// Test instances with reference lengths, exact (Held-Karp) up to n = 20
/// and 2-opt-refined nearest neighbour above.
inline ValSet reference_set(std::size_t n, std::size_t count, std::uint64_t seed, bool exact_only = false,
                            std::size_t workers = 1) {
  if (exact_only && n > kExactMaxNodes) {
    throw std::invalid_argument("no exact reference for n=" + std::to_string(n) + " (limit " +
                                std::to_string(kExactMaxNodes) + ")");
  }
  ValSet v;
  v.instances = generate_instances(n, count, seed);
  v.optima.assign(count, 0.0);
  parallel_for(count, workers, [&](std::size_t i) { v.optima[i] = reference_solve(v.instances[i]).tour.length; });
  v.exact = n <= kExactMaxNodes;
  return v;
}

inline ValSet reference_set(const Dataset& ds, bool exact_only = false, std::size_t workers = 1) {
  if (ds.labelled()) {
    if (exact_only && !ds.meta.exact()) throw std::invalid_argument("dataset references are not exact");
    return val_set_from(ds);
  }
  const std::size_t n = ds.instances.empty() ? 0 : ds.instances.front().size();
  if (exact_only && n > kExactMaxNodes) throw std::invalid_argument("no exact reference for n=" + std::to_string(n));
  ValSet v;
  v.instances = ds.instances;
  v.optima.assign(ds.size(), 0.0);
  parallel_for(ds.size(), workers, [&](std::size_t i) { v.optima[i] = reference_solve(v.instances[i]).tour.length; });
  v.exact = n <= kExactMaxNodes;
  return v;
}

/// Anything that maps an instance (and its index, for sampling streams) to a tour.
using TourSolver = std::function<Tour(const TspInstance&, std::uint64_t key)>;

inline TourSolver policy_solver(const PolicyModel& model, const DecodeConfig& cfg) {
  cfg.validate();
  return [&model, cfg](const TspInstance& inst, std::uint64_t key) { return decode(model, inst, cfg, key); };
}

struct RunInfo {
  std::string model = "model";
  std::string paradigm = "-";
  std::size_t train_size = 0;
};

struct EvalRow {
  std::string model;
  std::string paradigm;
  std::size_t train_size = 0;
  std::string decode;
  std::size_t size = 0;
  std::size_t count = 0;
  double mean_len = 0.0;
  double mean_gap_pct = 0.0;
  std::string ref = kExactRef;
  double seconds = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  static constexpr const char* kHeader = "model,paradigm,train_size,decode,size,count,mean_len,mean_gap_pct,ref,seconds";

  void write_csv(std::ostream& out, bool with_time = true) const {
    out << kHeader << '\n';
    char secs[32];
    for (const auto& r : rows) {
      std::snprintf(secs, sizeof secs, "%.3f", r.seconds);
      out << r.model << ',' << r.paradigm << ',' << r.train_size << ',' << r.decode << ',' << r.size << ','
          << r.count << ',' << format_double(r.mean_len) << ',' << format_double(r.mean_gap_pct) << ',' << r.ref
          << ',' << (with_time ? secs : "") << '\n';
    }
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    write_csv(out);
  }

  static EvalReport read_csv(std::istream& in) {
    EvalReport rep;
    std::string line;
    if (!std::getline(in, line) || line != kHeader) throw std::runtime_error("not an evaluation report (bad header)");
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
      if (!line.empty() && line.back() == ',') f.emplace_back();
      if (f.size() != 10) throw std::runtime_error("report line " + std::to_string(lineno) + ": expected 10 fields");
      try {
        rep.rows.push_back({f[0], f[1], std::stoull(f[2]), f[3], std::stoull(f[4]), std::stoull(f[5]),
                            std::stod(f[6]), std::stod(f[7]), f[8], f[9].empty() ? 0.0 : std::stod(f[9])});
      } catch (const std::logic_error&) {
        throw std::runtime_error("report line " + std::to_string(lineno) + ": malformed number");
      }
    }
    return rep;
  }

  static EvalReport read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    return read_csv(in);
  }
};

inline void check_field(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_of(",\n") != std::string::npos) {
    throw std::invalid_argument(std::string(what) + " '" + s + "' must be non-empty without commas");
  }
}

/// Decodes every instance of `refs` and aggregates the per-instance gap mean.
inline EvalRow evaluate(const TourSolver& solver, const ValSet& refs, const RunInfo& info, const std::string& decode_label,
                        std::size_t workers = 1) {
  check_field(info.model, "model id");
  check_field(info.paradigm, "paradigm");
  if (refs.instances.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (refs.optima.size() != refs.instances.size()) throw std::invalid_argument("evaluate: reference unavailable");
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> lengths(refs.instances.size());
  parallel_for(refs.instances.size(), workers, [&](std::size_t i) {
    const Tour t = solver(refs.instances[i], i);
    if (!is_permutation(t.order, refs.instances[i].size())) throw std::logic_error("solver returned a non-tour");
    lengths[i] = t.length;
  });
  EvalRow row;
  row.model = info.model;
  row.paradigm = info.paradigm;
  row.train_size = info.train_size;
  row.decode = decode_label;
  row.size = refs.instances.front().size();
  row.count = refs.instances.size();
  row.mean_len = mean_of(lengths);
  row.mean_gap_pct = mean_gap(lengths, refs.optima);
  row.ref = refs.exact ? kExactRef : kHeuristicRef;
  row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

inline EvalRow evaluate(const PolicyModel& model, const ValSet& refs, const DecodeConfig& cfg, const RunInfo& info,
                        std::size_t workers = 1) {
  return evaluate(policy_solver(model, cfg), refs, info, cfg.label(), workers);
}

struct SweepSpec {
  std::vector<std::size_t> sizes;
  std::size_t count = 1000;
  std::vector<DecodeConfig> decodes;
  std::uint64_t seed = 1;
  bool exact_only = false;

  void validate() const {
    if (sizes.empty()) throw std::invalid_argument("sweep needs at least one size");
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (sizes[i] < 2) throw std::invalid_argument("sweep sizes must be at least 2");
      if (i > 0 && sizes[i] <= sizes[i - 1]) throw std::invalid_argument("sweep sizes must be strictly increasing");
    }
    if (count < 1) throw std::invalid_argument("sweep count must be at least 1");
    if (decodes.empty()) throw std::invalid_argument("sweep needs at least one decode mode");
    for (const auto& d : decodes) d.validate();
  }
};

/// Test sets per size, keyed by size, so several models share one set.
class ReferenceCache {
 public:
  ReferenceCache(const SweepSpec& spec, std::size_t workers = 1) : spec_(spec), workers_(workers) {}

  const ValSet& get(std::size_t n) {
    auto it = sets_.find(n);
    if (it == sets_.end()) {
      it = sets_.emplace(n, reference_set(n, spec_.count, derive_seed(spec_.seed, {n}), spec_.exact_only, workers_)).first;
    }
    return it->second;
  }

 private:
  SweepSpec spec_;
  std::size_t workers_;
  std::map<std::size_t, ValSet> sets_;
};

/// One row per (size, decode mode), in that order.
inline EvalReport generalization_sweep(const std::function<TourSolver(const DecodeConfig&)>& make_solver,
                                       const SweepSpec& spec, const RunInfo& info, ReferenceCache& refs,
                                       std::size_t workers = 1,
                                       const std::function<void(const EvalRow&)>& on_row = {}) {
  spec.validate();
  EvalReport rep;
  for (std::size_t n : spec.sizes) {
    const ValSet& set = refs.get(n);
    for (const auto& d : spec.decodes) {
      rep.rows.push_back(evaluate(make_solver(d), set, info, d.label(), workers));
      if (on_row) on_row(rep.rows.back());
    }
  }
  return rep;
}

inline EvalReport generalization_sweep(const PolicyModel& model, const SweepSpec& spec, const RunInfo& info,
                                       ReferenceCache& refs, std::size_t workers = 1,
                                       const std::function<void(const EvalRow&)>& on_row = {}) {
  return generalization_sweep([&](const DecodeConfig& d) { return policy_solver(model, d); }, spec, info, refs,
                              workers, on_row);
}

// ---- comparison ----

struct ComparisonRow {
  std::string model;
  std::string paradigm;
  std::size_t train_size = 0;
  std::string decode;
  std::vector<double> gaps;  // aligned with Comparison::sizes
};

struct Winner {
  std::size_t train_size = 0;
  std::string decode;
  std::size_t size = 0;
  std::string winner;  // model id, or "tie"
  double best_gap = 0.0;
};

struct Comparison {
  std::vector<std::size_t> sizes;
  std::vector<ComparisonRow> rows;
  std::vector<Winner> winners;

  void write_table_csv(std::ostream& out) const {
    out << "model,paradigm,train_size,decode";
    for (auto s : sizes) out << ",gap_" << s;
    out << '\n';
    for (const auto& r : rows) {
      out << r.model << ',' << r.paradigm << ',' << r.train_size << ',' << r.decode;
      for (double g : r.gaps) out << ',' << format_double(g);
      out << '\n';
    }
  }

  void write_winners_csv(std::ostream& out) const {
    out << "train_size,decode,size,winner,best_gap_pct\n";
    for (const auto& w : winners)
      out << w.train_size << ',' << w.decode << ',' << w.size << ',' << w.winner << ',' << format_double(w.best_gap)
          << '\n';
  }
};

/// Side-by-side table keyed by (paradigm, training size, decode mode); each
/// (training size, decode mode, test size) cell goes to the lowest gap.
inline Comparison compare_runs(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("compare_runs: no reports");
  auto grid = [](const EvalReport& r) {
    std::vector<std::pair<std::string, std::size_t>> g;
    for (const auto& row : r.rows) g.emplace_back(row.decode, row.size);
    std::sort(g.begin(), g.end());
    return g;
  };
  const auto ref_grid = grid(reports.front());
  for (const auto& r : reports) {
    if (grid(r) != ref_grid) throw std::invalid_argument("compare_runs: reports do not share sizes and decode modes");
  }
  Comparison c;
  for (const auto& [decode, size] : ref_grid)
    if (std::find(c.sizes.begin(), c.sizes.end(), size) == c.sizes.end()) c.sizes.push_back(size);
  std::sort(c.sizes.begin(), c.sizes.end());

  std::vector<std::string> decodes;
  for (const auto& row : reports.front().rows)
    if (std::find(decodes.begin(), decodes.end(), row.decode) == decodes.end()) decodes.push_back(row.decode);

  for (const auto& decode : decodes) {
    for (const auto& rep : reports) {
      std::map<std::pair<std::string, std::size_t>, ComparisonRow> by_model;
      for (const auto& row : rep.rows) {
        if (row.decode != decode) continue;
        auto& cr = by_model[{row.model, row.train_size}];
        if (cr.gaps.empty()) {
          cr = {row.model, row.paradigm, row.train_size, decode, std::vector<double>(c.sizes.size(), 0.0)};
        }
        const auto col = static_cast<std::size_t>(std::find(c.sizes.begin(), c.sizes.end(), row.size) - c.sizes.begin());
        cr.gaps[col] = row.mean_gap_pct;
      }
      for (auto& [key, cr] : by_model) c.rows.push_back(std::move(cr));
    }
  }

  std::vector<std::size_t> train_sizes;
  for (const auto& r : c.rows)
    if (std::find(train_sizes.begin(), train_sizes.end(), r.train_size) == train_sizes.end())
      train_sizes.push_back(r.train_size);
  std::sort(train_sizes.begin(), train_sizes.end());
  for (std::size_t ts : train_sizes) {
    for (const auto& decode : decodes) {
      for (std::size_t col = 0; col < c.sizes.size(); ++col) {
        Winner w{ts, decode, c.sizes[col], "", std::numeric_limits<double>::infinity()};
        std::size_t at_best = 0;
        for (const auto& r : c.rows) {
          if (r.train_size != ts || r.decode != decode) continue;
          if (r.gaps[col] < w.best_gap) {
            w.best_gap = r.gaps[col];
            w.winner = r.model;
            at_best = 1;
          } else if (r.gaps[col] == w.best_gap) {
            ++at_best;
          }
        }
        if (at_best > 1) w.winner = "tie";
        c.winners.push_back(w);
      }
    }
  }
  return c;
}

// ---- curves ----

struct Curve {
  std::string model;
  std::string paradigm;
  std::string decode;
  std::vector<std::pair<double, double>> points;  // (size, gap %)
};

/// One curve per (model, paradigm, decode) found in the reports.
inline std::vector<Curve> curves_from(const std::vector<EvalReport>& reports) {
  std::vector<Curve> curves;
  for (const auto& rep : reports) {
    for (const auto& row : rep.rows) {
      auto it = std::find_if(curves.begin(), curves.end(), [&](const Curve& c) {
        return c.model == row.model && c.paradigm == row.paradigm && c.decode == row.decode;
      });
      if (it == curves.end()) {
        curves.push_back({row.model, row.paradigm, row.decode, {}});
        it = std::prev(curves.end());
      }
      it->points.emplace_back(static_cast<double>(row.size), row.mean_gap_pct);
    }
  }
  for (auto& c : curves) std::sort(c.points.begin(), c.points.end());
  return curves;
}

inline std::string file_safe(const std::string& s) {
  std::string out = s;
  for (char& ch : out)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') ch = '_';
  return out;
}

struct AxisRange {
  double x_min, x_max, y_min, y_max;
};

inline AxisRange data_range(const std::vector<Curve>& curves) {
  AxisRange r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
              std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& c : curves)
    for (const auto& [x, y] : c.points) {
      r.x_min = std::min(r.x_min, x);
      r.x_max = std::max(r.x_max, x);
      r.y_min = std::min(r.y_min, y);
      r.y_max = std::max(r.y_max, y);
    }
  return r;
}

/// Line chart of gap vs. size. The root element carries the axis ranges as
/// data-x-min/data-x-max/data-y-min/data-y-max attributes.
inline std::string render_svg(const std::vector<Curve>& curves, const std::string& title) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  const AxisRange r = data_range(curves);
  const double W = 640, H = 400, left = 60, right = 190, top = 30, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  auto sx = [&](double x) { return r.x_max > r.x_min ? left + (x - r.x_min) / (r.x_max - r.x_min) * pw : left + pw / 2; };
  auto sy = [&](double y) { return r.y_max > r.y_min ? top + ph - (y - r.y_min) / (r.y_max - r.y_min) * ph : top + ph / 2; };
  auto num = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", v);
    return std::string(b);
  };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" data-x-min=\""
    << format_double(r.x_min) << "\" data-x-max=\"" << format_double(r.x_max) << "\" data-y-min=\""
    << format_double(r.y_min) << "\" data-y-max=\"" << format_double(r.y_max) << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << left << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << left << "\" y=\"" << top + ph + 18 << "\" font-family=\"sans-serif\" font-size=\"11\">"
    << format_double(r.x_min) << "</text>\n";
  o << "<text x=\"" << left + pw << "\" y=\"" << top + ph + 18
    << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << format_double(r.x_max) << "</text>\n";
  o << "<text x=\"" << left - 6 << "\" y=\"" << top + ph
    << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << num(r.y_min) << "</text>\n";
  o << "<text x=\"" << left - 6 << "\" y=\"" << top + 10
    << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << num(r.y_max) << "</text>\n";
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12
    << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">graph size</text>\n";
  o << "<text x=\"14\" y=\"" << top + ph / 2 << "\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 "
    << top + ph / 2 << ")\" text-anchor=\"middle\">optimality gap (%)</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    const char* color = palette[i % 8];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < c.points.size(); ++k)
      o << (k ? " " : "") << num(sx(c.points[k].first)) << ',' << num(sy(c.points[k].second));
    o << "\"/>\n";
    for (const auto& [x, y] : c.points)
      o << "<circle cx=\"" << num(sx(x)) << "\" cy=\"" << num(sy(y)) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    const double ly = top + 14 + 16 * static_cast<double>(i);
    o << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 32 << "\" y2=\""
      << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << left + pw + 36 << "\" y=\"" << ly << "\" font-family=\"sans-serif\" font-size=\"11\">"
      << c.model << " (" << c.paradigm << ", " << c.decode << ")</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

/// Writes plot_<decode>.csv (size,gap,model,paradigm) for every decode mode
/// and plot.svg into `dir`; returns the written paths.
inline std::vector<std::string> emit_plot_data(const std::vector<Curve>& curves, const std::string& dir) {
  if (curves.empty()) throw std::invalid_argument("emit_plot_data: no curves");
  std::filesystem::create_directories(dir);
  std::vector<std::string> decodes;
  for (const auto& c : curves)
    if (std::find(decodes.begin(), decodes.end(), c.decode) == decodes.end()) decodes.push_back(c.decode);
  std::vector<std::string> written;
  for (const auto& d : decodes) {
    const std::string path = (std::filesystem::path(dir) / ("plot_" + file_safe(d) + ".csv")).string();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << "size,gap,model,paradigm\n";
    for (const auto& c : curves) {
      if (c.decode != d) continue;
      for (const auto& [x, y] : c.points) out << format_double(x) << ',' << format_double(y) << ',' << c.model << ',' << c.paradigm << '\n';
    }
    written.push_back(path);
  }
  const std::string svg = (std::filesystem::path(dir) / "plot.svg").string();
  std::ofstream out(svg);
  if (!out) throw std::runtime_error("cannot write '" + svg + "'");
  out << render_svg(curves, "optimality gap vs. graph size");
  written.push_back(svg);
  return written;
}

}  // namespace nco
