#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "nco/dataset.hpp"
#include "nco/solvers.hpp"
#include "nco/tsp.hpp"

namespace nco {
namespace {

TspInstance unit_square() { return TspInstance({{0, 0}, {1, 0}, {1, 1}, {0, 1}}); }

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("nco_tsp_test_" + name);
}

TEST(Generate, DeterministicPerSeed) {
  EXPECT_EQ(generate_instance(20, 7, 3), generate_instance(20, 7, 3));
  EXPECT_NE(generate_instance(20, 7, 3), generate_instance(20, 8, 3));
  Rng a(42), b(42);
  EXPECT_EQ(generate_instance(5, a), generate_instance(5, b));
}

TEST(Generate, UniformMeanCoordinate) {
  const auto inst = generate_instance(10000, 99, 0);
  double sx = 0, sy = 0;
  for (const auto& p : inst.coords()) {
    sx += p.x;
    sy += p.y;
  }
  EXPECT_GE(sx / 1e4, 0.49);
  EXPECT_LE(sx / 1e4, 0.51);
  EXPECT_GE(sy / 1e4, 0.49);
  EXPECT_LE(sy / 1e4, 0.51);
  EXPECT_TRUE(inst.in_unit_square());
}

TEST(Generate, TwoNodesAndRejectsOne) {
  const auto inst = generate_instance(2, 1, 0);
  EXPECT_DOUBLE_EQ(held_karp_solve(inst).length, 2 * inst.dist(0, 1));
  Rng rng(1);
  EXPECT_THROW(generate_instance(1, rng), std::invalid_argument);
}

TEST(TourLength, UnitSquare) { EXPECT_DOUBLE_EQ(tour_length(unit_square(), {0, 1, 2, 3}), 4.0); }

TEST(TourLength, CollinearDegenerateCycle) {
  TspInstance line({{0, 0}, {1, 0}, {2, 0}});
  for (Order o : {Order{0, 1, 2}, Order{1, 0, 2}, Order{2, 1, 0}}) EXPECT_DOUBLE_EQ(tour_length(line, o), 4.0);
}

TEST(TourLength, MatchesNaiveResummation) {
  const auto inst = generate_instance(7, 5, 0);
  Order o{3, 1, 6, 0, 2, 5, 4};
  double expect = 0;
  for (std::size_t i = 0; i < 7; ++i) {
    const auto& a = inst[o[i]];
    const auto& b = inst[o[(i + 1) % 7]];
    expect += std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y));
  }
  EXPECT_NEAR(tour_length(inst, o), expect, 1e-12);
}

TEST(TourLength, RejectsNonPermutation) {
  EXPECT_THROW(tour_length(unit_square(), {0, 1, 1, 3}), std::invalid_argument);
  EXPECT_THROW(tour_length(unit_square(), {0, 1, 2}), std::invalid_argument);
}

TEST(BruteForce, SmallCases) {
  EXPECT_DOUBLE_EQ(brute_force_solve(unit_square()).length, 4.0);
  TspInstance tri({{0, 0}, {0.3, 0}, {0, 0.4}});
  EXPECT_NEAR(brute_force_solve(tri).length, 0.3 + 0.4 + 0.5, 1e-15);
}

TEST(BruteForce, RefusesLargeInstances) {
  EXPECT_THROW(brute_force_solve(generate_instance(11, 1, 0)), SolverLimitError);
}

TEST(BruteForce, DominatesTwoOpt) {
  for (std::uint64_t i = 0; i < 100; ++i) {
    const auto inst = generate_instance(8, 11, i);
    const double opt = brute_force_solve(inst).length;
    EXPECT_LE(opt, two_opt(inst, nearest_neighbor(inst, 0)).length + 1e-12);
    EXPECT_LE(opt, two_opt(inst, make_tour(inst, {0, 1, 2, 3, 4, 5, 6, 7})).length + 1e-12);
  }
}

TEST(HeldKarp, EqualsBruteForceExactly) {
  for (std::size_t n = 2; n <= 9; ++n) {
    for (std::uint64_t i = 0; i < 200; ++i) {
      const auto inst = generate_instance(n, 2024, i);
      const Tour hk = held_karp_solve(inst);
      const Tour bf = brute_force_solve(inst);
      ASSERT_EQ(hk.length, bf.length) << "n=" << n << " i=" << i;
      EXPECT_EQ(hk.order, bf.order);
    }
  }
}

TEST(HeldKarp, CornersAndLimit) {
  EXPECT_DOUBLE_EQ(held_karp_solve(unit_square()).length, 4.0);
  EXPECT_THROW(held_karp_solve(generate_instance(21, 1, 0)), SolverLimitError);
}

TEST(NearestNeighbor, Corners) { EXPECT_DOUBLE_EQ(nearest_neighbor(unit_square(), 0).length, 4.0); }

TEST(NearestNeighbor, MatchesIndependentGreedyAndBoundsOptimum) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto inst = generate_instance(8, 3, s);
    // Independent recomputation: repeatedly take the closest remaining node.
    std::vector<NodeId> remaining(7);
    std::iota(remaining.begin(), remaining.end(), 1);
    Order expect{0};
    while (!remaining.empty()) {
      auto it = std::min_element(remaining.begin(), remaining.end(), [&](NodeId a, NodeId b) {
        return inst.dist(expect.back(), a) < inst.dist(expect.back(), b);
      });
      expect.push_back(*it);
      remaining.erase(it);
    }
    const Tour nn = nearest_neighbor(inst, 0);
    EXPECT_EQ(nn.order, expect);
    EXPECT_GE(nn.length, brute_force_solve(inst).length);
  }
}

TEST(TwoOpt, OptimalTourUnchanged) {
  const auto inst = generate_instance(8, 4, 0);
  const Tour opt = brute_force_solve(inst);
  EXPECT_DOUBLE_EQ(two_opt(inst, opt).length, opt.length);
}

TEST(TwoOpt, UncrossesSquare) {
  const auto sq = unit_square();
  const Tour crossed = make_tour(sq, {0, 2, 1, 3});
  EXPECT_GT(crossed.length, 4.0);
  EXPECT_DOUBLE_EQ(two_opt(sq, crossed).length, 4.0);
}

TEST(TwoOpt, NeverIncreasesAndStaysNearOptimal) {
  double gap_sum = 0;
  for (std::uint64_t i = 0; i < 200; ++i) {
    const auto inst = generate_instance(9, 77, i);
    const Tour start = nearest_neighbor(inst, i % 9);
    const Tour improved = two_opt(inst, start);
    EXPECT_LE(improved.length, start.length);
    EXPECT_TRUE(is_permutation(improved.order, 9));
    gap_sum += optimality_gap(improved.length, brute_force_solve(inst).length);
  }
  EXPECT_LT(gap_sum / 200, 5.0);
}

TEST(Gap, Basics) {
  EXPECT_EQ(optimality_gap(3.5, 3.5), 0.0);
  EXPECT_DOUBLE_EQ(optimality_gap(10, 8), 25.0);
  EXPECT_THROW(optimality_gap(1, 0), std::invalid_argument);
  double prev = -1e9;
  for (double p = 1.0; p < 3.0; p += 0.125) {
    const double g = optimality_gap(p, 1.5);
    EXPECT_GT(g, prev);
    prev = g;
  }
}

TEST(Gap, PerInstanceMeanDiffersFromRatioOfMeans) {
  const std::vector<double> pred{2, 3, 5}, opt{1, 3, 4};
  // Per-instance gaps 100%, 0%, 25% average to 41.666...%; the gap of the
  // means is 10/8 - 1 = 25%.
  EXPECT_NEAR(mean_gap(pred, opt), 125.0 / 3.0, 1e-12);
  EXPECT_NEAR(optimality_gap(10.0 / 3.0, 8.0 / 3.0), 25.0, 1e-12);
}

TEST(Canonicalize, Examples) {
  EXPECT_EQ(canonicalize({2, 0, 1, 3}), (Order{0, 1, 3, 2}));
  const Order c = canonicalize({4, 1, 3, 0, 2});
  EXPECT_EQ(canonicalize(c), c);
}

TEST(Canonicalize, AllSymmetriesShareOneRepresentative) {
  Order base{3, 0, 5, 1, 4, 2};
  const Order rep = canonicalize(base);
  for (std::size_t r = 0; r < 6; ++r) {
    Order rot = base;
    std::rotate(rot.begin(), rot.begin() + static_cast<std::ptrdiff_t>(r), rot.end());
    EXPECT_EQ(canonicalize(rot), rep);
    std::reverse(rot.begin(), rot.end());
    EXPECT_EQ(canonicalize(rot), rep);
  }
  EXPECT_EQ(rep.front(), 0u);
  EXPECT_LT(rep[1], rep.back());
}

TEST(Dataset, RoundTrip) {
  Dataset ds = make_dataset(7, 25, 13, "heldkarp");
  const auto path = temp_path("roundtrip.txt");
  write_dataset(ds, path.string());
  Dataset back = read_dataset(path.string());
  ASSERT_EQ(back.size(), ds.size());
  ASSERT_TRUE(back.labelled());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.instances[i], ds.instances[i]);
    EXPECT_EQ(back.solutions[i].order, ds.solutions[i].order);
    EXPECT_EQ(back.solutions[i].length, ds.solutions[i].length);
  }
  EXPECT_EQ(back.meta.solver, "heldkarp");
  EXPECT_EQ(back.meta.seed, 13u);
  EXPECT_TRUE(back.meta.exact());
}

TEST(Dataset, UnlabelledRoundTrip) {
  Dataset ds = make_dataset(5, 3, 1, "none");
  const auto path = temp_path("unlabelled.txt");
  write_dataset(ds, path.string());
  Dataset back = read_dataset(path.string());
  EXPECT_FALSE(back.labelled());
  EXPECT_EQ(back.instances, ds.instances);
}

TEST(Dataset, MinimalRecord) {
  auto [inst, tour] = parse_record("0.25 0.5 0.75 0.5 output 1 2 1");
  EXPECT_EQ(inst.size(), 2u);
  ASSERT_TRUE(tour.has_value());
  EXPECT_EQ(tour->order, (Order{0, 1}));
  EXPECT_DOUBLE_EQ(tour->length, 1.0);
}

TEST(Dataset, ParseErrors) {
  const auto path = temp_path("bad.txt");
  {
    std::ofstream out(path);
    out << "0.1 0.2 0.3 0.4 output 1 2 1\n";
    out << "0.1 0.2 0.3 0.4 1 2 1\n";
  }
  try {
    read_dataset(path.string());
    FAIL() << "expected a parse error";
  } catch (const DatasetParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(parse_record("0.1 0.2 0.3 0.4 output 1 3 1"), DatasetParseError);
  EXPECT_THROW(parse_record("0.1 0.2 0.3 0.4 output 1 2 2"), DatasetParseError);
  EXPECT_THROW(parse_record("0.1 0.2 0.3 0.4 0.5 0.6 output 1 2 3"), DatasetParseError);
  EXPECT_THROW(parse_record("0.1 0.2 0.3 output"), DatasetParseError);
}

}  // namespace
}  // namespace nco
