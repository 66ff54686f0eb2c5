#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "fixtures.hpp"
#include "nco/bench.hpp"

namespace nco {
namespace {

using testing::small_config;

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("nco_bench_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TourSolver exact_stub() {
  return [](const TspInstance& inst, std::uint64_t) { return held_karp_solve(inst); };
}

TourSolver nn_stub() {
  return [](const TspInstance& inst, std::uint64_t) { return nearest_neighbor(inst, 0); };
}

TEST(Evaluate, ReplayOptimalStubHasZeroGap) {
  const ValSet refs = reference_set(8, 30, 4);
  const EvalRow row = evaluate(exact_stub(), refs, {"oracle", "-", 0}, "greedy");
  EXPECT_EQ(row.mean_gap_pct, 0.0);
  EXPECT_EQ(row.count, 30u);
  EXPECT_EQ(row.ref, std::string(kExactRef));
}

TEST(Evaluate, SingleInstanceReportsItsOwnMetrics) {
  PolicyModel model(small_config(EncoderKind::graph_transformer));
  const ValSet refs = reference_set(9, 1, 5);
  const EvalRow row = evaluate(model, refs, parse_decode("greedy"), {});
  const Tour t = greedy_decode(model, refs.instances[0]);
  EXPECT_EQ(row.mean_len, t.length);
  EXPECT_EQ(row.mean_gap_pct, optimality_gap(t.length, refs.optima[0]));
}

TEST(Evaluate, RandomPolicyGapMatchesBruteForceLoop) {
  PolicyModel model(small_config(EncoderKind::gated_gcn, 8, 2, 2, 41));
  const auto insts = generate_instances(6, 100, 6);
  ValSet refs;
  refs.instances = insts;
  for (const auto& i : insts) refs.optima.push_back(held_karp_solve(i).length);
  const EvalRow row = evaluate(model, refs, parse_decode("sample:8"), {});
  DecodeConfig cfg = parse_decode("sample:8");
  double acc = 0;
  for (std::size_t i = 0; i < insts.size(); ++i) {
    const double pred = sample_decode(model, insts[i], 8, cfg.seed, i).best.length;
    const double opt = brute_force_solve(insts[i]).length;
    const double gap = 100.0 * (pred / opt - 1.0);
    EXPECT_GE(gap, -1e-12);
    acc += gap;
  }
  EXPECT_NEAR(row.mean_gap_pct, acc / 100.0, 1e-10);
}

TEST(Evaluate, MatchesTrainingValidationBitExactly) {
  PolicyModel model(small_config(EncoderKind::graph_transformer, 8, 2, 2, 3));
  const ValSet refs = reference_set(10, 60, 8);
  EXPECT_EQ(evaluate(model, refs, parse_decode("greedy"), {}).mean_gap_pct, validate(model, refs));
}

TEST(Evaluate, ResultsIndependentOfWorkerCount) {
  PolicyModel model(small_config(EncoderKind::graph_transformer, 8, 2, 2, 3));
  const ValSet refs = reference_set(9, 24, 9);
  for (const char* spec : {"greedy", "sample:8", "beam:4"}) {
    const EvalRow a = evaluate(model, refs, parse_decode(spec), {}, 1);
    const EvalRow b = evaluate(model, refs, parse_decode(spec), {}, 3);
    EXPECT_EQ(a.mean_len, b.mean_len) << spec;
    EXPECT_EQ(a.mean_gap_pct, b.mean_gap_pct) << spec;
  }
}

TEST(Evaluate, RejectsMissingReferences) {
  ValSet refs = reference_set(6, 4, 1);
  refs.optima.pop_back();
  EXPECT_THROW(evaluate(nn_stub(), refs, {}, "nn"), std::invalid_argument);
  EXPECT_THROW(reference_set(25, 2, 1, true), std::invalid_argument);
  EXPECT_THROW(evaluate(nn_stub(), reference_set(6, 2, 1), {"bad,id", "-", 0}, "nn"), std::invalid_argument);
}

TEST(Evaluate, HeuristicReferenceFlagged) {
  const ValSet refs = reference_set(25, 3, 2);
  EXPECT_FALSE(refs.exact);
  EXPECT_EQ(evaluate(nn_stub(), refs, {}, "nn").ref, std::string(kHeuristicRef));
}

SweepSpec spec_of(std::vector<std::size_t> sizes, std::size_t count, std::vector<std::string> decodes) {
  SweepSpec s;
  s.sizes = std::move(sizes);
  s.count = count;
  for (const auto& d : decodes) s.decodes.push_back(parse_decode(d));
  return s;
}

TEST(Sweep, AtTrainingSizeReducesToEvaluate) {
  PolicyModel model(small_config(EncoderKind::graph_transformer, 8, 1, 2, 2));
  const SweepSpec spec = spec_of({10}, 20, {"greedy"});
  ReferenceCache cache(spec);
  const EvalReport rep = generalization_sweep(model, spec, {"m", "sl", 10}, cache);
  ASSERT_EQ(rep.rows.size(), 1u);
  const EvalRow direct = evaluate(model, cache.get(10), parse_decode("greedy"), {"m", "sl", 10});
  EXPECT_EQ(rep.rows[0].mean_gap_pct, direct.mean_gap_pct);
  EXPECT_EQ(rep.rows[0].mean_len, direct.mean_len);
}

TEST(Sweep, RowPerSizeAndMode) {
  PolicyModel model(small_config(EncoderKind::gated_gcn, 8, 1, 2, 2));
  const SweepSpec spec = spec_of({5, 10, 15, 20}, 3, {"greedy", "sample:4", "beam:3"});
  ReferenceCache cache(spec);
  const EvalReport rep = generalization_sweep(model, spec, {"m", "rl", 10}, cache);
  ASSERT_EQ(rep.rows.size(), 12u);
  for (const auto& r : rep.rows) {
    EXPECT_TRUE(std::isfinite(r.mean_gap_pct));
    EXPECT_GE(r.mean_gap_pct, 0.0);
  }
  EXPECT_EQ(rep.rows[4].size, 10u);
  EXPECT_EQ(rep.rows[4].decode, "sample:4");
}

TEST(Sweep, NearestNeighbourStubMatchesDirectGaps) {
  const SweepSpec spec = spec_of({5, 8, 12}, 25, {"greedy"});
  ReferenceCache cache(spec);
  const EvalReport rep =
      generalization_sweep([](const DecodeConfig&) { return nn_stub(); }, spec, {"nn", "-", 0}, cache);
  for (const auto& row : rep.rows) {
    const auto insts = generate_instances(row.size, 25, derive_seed(spec.seed, {row.size}));
    double acc = 0;
    for (const auto& i : insts) acc += optimality_gap(nearest_neighbor(i, 0).length, held_karp_solve(i).length);
    EXPECT_NEAR(row.mean_gap_pct, acc / 25, 1e-10);
  }
}

TEST(Sweep, SpecValidation) {
  EXPECT_THROW(spec_of({10, 5}, 1, {"greedy"}).validate(), std::invalid_argument);
  EXPECT_THROW(spec_of({5, 5}, 1, {"greedy"}).validate(), std::invalid_argument);
  EXPECT_THROW(spec_of({5}, 0, {"greedy"}).validate(), std::invalid_argument);
  EXPECT_THROW(spec_of({5}, 1, {}).validate(), std::invalid_argument);
}

EvalReport fake_report(const std::string& model, const std::string& paradigm, std::size_t train,
                       const std::vector<std::string>& decodes, const std::vector<std::size_t>& sizes, double base) {
  EvalReport r;
  for (std::size_t s : sizes)
    for (std::size_t d = 0; d < decodes.size(); ++d)
      r.rows.push_back({model, paradigm, train, decodes[d], s, 10, 4.0, base + static_cast<double>(s) / 10 + static_cast<double>(d), kExactRef, 0.0});
  return r;
}

TEST(Compare, SelfComparisonIsAllTies) {
  const EvalReport r = fake_report("a", "sl", 10, {"greedy", "beam:4"}, {5, 10}, 1.0);
  const Comparison c = compare_runs({r, r});
  ASSERT_EQ(c.winners.size(), 4u);
  for (const auto& w : c.winners) EXPECT_EQ(w.winner, "tie");
}

TEST(Compare, KnownWinnersPerCell) {
  EvalReport sl = fake_report("sl10", "sl", 10, {"greedy"}, {5, 10, 20}, 1.0);
  EvalReport rl = fake_report("rl10", "rl", 10, {"greedy"}, {5, 10, 20}, 0.0);
  sl.rows[0].mean_gap_pct = 0.1;  // SL wins at size 5 only
  const Comparison c = compare_runs({sl, rl});
  ASSERT_EQ(c.winners.size(), 3u);
  EXPECT_EQ(c.winners[0].winner, "sl10");
  EXPECT_EQ(c.winners[1].winner, "rl10");
  EXPECT_EQ(c.winners[2].winner, "rl10");
  EXPECT_EQ(c.rows.size(), 2u);
}

TEST(Compare, TableOneStructure) {
  std::vector<EvalReport> reps;
  const std::vector<std::string> decodes{"greedy", "sample:128", "beam:128"};
  for (std::size_t train : {20, 50, 100})
    for (const char* p : {"sl", "rl"})
      reps.push_back(fake_report(std::string(p) + std::to_string(train), p, train, decodes, {20, 50, 100}, train / 10.0));
  const Comparison c = compare_runs(reps);
  EXPECT_EQ(c.rows.size(), 18u);
  EXPECT_EQ(c.winners.size(), 27u);
  std::ostringstream os;
  c.write_table_csv(os);
  const std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 19);
}

TEST(Compare, MisalignedReportsRejected) {
  const EvalReport a = fake_report("a", "sl", 10, {"greedy"}, {5, 10}, 1.0);
  const EvalReport b = fake_report("b", "rl", 10, {"greedy"}, {5, 20}, 1.0);
  EXPECT_THROW(compare_runs({a, b}), std::invalid_argument);
}

TEST(Report, CsvRoundTripAndHeader) {
  const EvalReport r = fake_report("m", "rl", 20, {"greedy", "sample:16"}, {5, 10}, 0.5);
  std::stringstream buf;
  r.write_csv(buf);
  EXPECT_EQ(buf.str().rfind("model,paradigm,train_size,decode,size,count,mean_len,mean_gap_pct,ref,seconds\n", 0), 0u);
  const EvalReport back = EvalReport::read_csv(buf);
  ASSERT_EQ(back.rows.size(), r.rows.size());
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    EXPECT_EQ(back.rows[i].mean_gap_pct, r.rows[i].mean_gap_pct);
    EXPECT_EQ(back.rows[i].decode, r.rows[i].decode);
  }
}

std::vector<std::vector<std::string>> read_csv_cells(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> out;
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> row;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) row.push_back(cell);
    out.push_back(row);
  }
  return out;
}

TEST(Plot, SinglePointCurve) {
  const auto dir = temp_dir("single");
  emit_plot_data({{"m", "sl", "greedy", {{10, 2.5}}}}, dir.string());
  const auto cells = read_csv_cells(dir / "plot_greedy.csv");
  ASSERT_EQ(cells.size(), 2u);
  EXPECT_EQ(cells[1], (std::vector<std::string>{"10", "2.5", "m", "sl"}));
  EXPECT_THROW(emit_plot_data({}, dir.string()), std::invalid_argument);
}

TEST(Plot, CsvPerModeRoundTripsAndAxisCoversData) {
  const EvalReport a = fake_report("a", "sl", 10, {"greedy", "beam:8"}, {5, 10, 20}, 0.25);
  const EvalReport b = fake_report("b", "rl", 10, {"greedy", "beam:8"}, {5, 10, 20}, 1.75);
  const auto curves = curves_from({a, b});
  ASSERT_EQ(curves.size(), 4u);
  const auto dir = temp_dir("modes");
  const auto files = emit_plot_data(curves, dir.string());
  EXPECT_EQ(files.size(), 3u);
  const auto cells = read_csv_cells(dir / "plot_beam_8.csv");
  ASSERT_EQ(cells.size(), 7u);
  double ymin = 1e9, ymax = -1e9;
  for (std::size_t i = 1; i < cells.size(); ++i) {
    const double gap = std::stod(cells[i][1]);
    const std::string model = cells[i][2];
    const auto& src = model == "a" ? a : b;
    bool found = false;
    for (const auto& row : src.rows)
      if (row.decode == "beam:8" && static_cast<double>(row.size) == std::stod(cells[i][0])) found = row.mean_gap_pct == gap;
    EXPECT_TRUE(found) << i;
  }
  for (const auto& c : curves)
    for (const auto& [x, y] : c.points) {
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  std::ifstream svg(dir / "plot.svg");
  const std::string text((std::istreambuf_iterator<char>(svg)), std::istreambuf_iterator<char>());
  std::smatch m;
  ASSERT_TRUE(std::regex_search(text, m, std::regex(
      "data-x-min=\"([^\"]+)\" data-x-max=\"([^\"]+)\" data-y-min=\"([^\"]+)\" data-y-max=\"([^\"]+)\"")));
  EXPECT_EQ(std::stod(m[1]), 5.0);
  EXPECT_EQ(std::stod(m[2]), 20.0);
  EXPECT_EQ(std::stod(m[3]), ymin);
  EXPECT_EQ(std::stod(m[4]), ymax);
  // Deterministic output.
  const auto dir2 = temp_dir("modes2");
  emit_plot_data(curves, dir2.string());
  std::ifstream svg2(dir2 / "plot.svg");
  EXPECT_EQ(text, std::string((std::istreambuf_iterator<char>(svg2)), std::istreambuf_iterator<char>()));
}

}  // namespace
}  // namespace nco
