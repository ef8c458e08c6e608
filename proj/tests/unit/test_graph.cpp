#include <algorithm>
#include <map>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "hpgn/grid_graph.hpp"
#include "oracles.hpp"

using namespace hpgn;

TEST(GridGraph, MatchesBruteForceForSmallGrids) {
  for (std::size_t h = 1; h <= 6; ++h)
    for (std::size_t w = 1; w <= 6; ++w) {
      const GridGraph g(h, w);
      const auto adj = oracle::grid_adjacency(h, w);
      for (std::size_t i = 0; i < g.nodes(); ++i) {
        std::vector<int> row(g.nodes(), 0);
        for (auto j : g.neighbors(i)) row[j] = 1;
        EXPECT_EQ(row, adj[i]) << h << "x" << w << " node " << i;
      }
    }
}

TEST(GridGraph, TwoByTwoHasDegreeTwoAndHalfWeights) {
  const GridGraph g(2, 2);
  ASSERT_EQ(g.nodes(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(g.degree(i), 2u);
    EXPECT_DOUBLE_EQ(g.weight(i), 0.5);
  }
}

TEST(GridGraph, ThreeByThreeDegreeHistogram) {
  const GridGraph g(3, 3);
  std::map<std::size_t, int> hist;
  for (std::size_t i = 0; i < g.nodes(); ++i) ++hist[g.degree(i)];
  EXPECT_EQ(hist, (std::map<std::size_t, int>{{2, 4}, {3, 4}, {4, 1}}));
}

TEST(GridGraph, SingleCellHasNoNeighbours) {
  const GridGraph g(1, 1);
  EXPECT_EQ(g.nodes(), 1u);
  EXPECT_TRUE(g.neighbors(0).empty());
  EXPECT_TRUE(serialize_graph(g).empty());
}

TEST(GridGraph, LineGridsHaveDegreeOneOrTwo) {
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{1, 5}, {4, 1}}) {
    const GridGraph g(h, w);
    for (std::size_t i = 0; i < g.nodes(); ++i) {
      EXPECT_GE(g.degree(i), 1u);
      EXPECT_LE(g.degree(i), 2u);
    }
  }
}

TEST(GridGraph, AdjacencyIsSymmetricAndRowsSumToOne) {
  for (std::size_t h = 1; h <= 6; ++h)
    for (std::size_t w = 1; w <= 6; ++w) {
      const GridGraph g(h, w);
      for (std::size_t i = 0; i < g.nodes(); ++i) {
        double row = 0;
        for (auto j : g.neighbors(i)) {
          row += g.weight(i);
          const auto back = g.neighbors(j);
          EXPECT_NE(std::find(back.begin(), back.end(), i), back.end());
        }
        EXPECT_NEAR(row, g.nodes() >= 2 ? 1.0 : 0.0, 1e-12);
      }
    }
}

TEST(GridGraph, RejectsNonPositiveSizes) {
  EXPECT_THROW(build_grid_graph(0, 3), InvalidArgument);
  EXPECT_THROW(build_grid_graph(2, -1), InvalidArgument);
}

TEST(Aggregate, HandExample) {
  const GridGraph g(2, 2);
  const Tensor<double> v(Shape{4, 1}, std::vector<double>{1, 2, 3, 4});
  const auto a = aggregate(g, v);
  EXPECT_EQ(a.storage(), (std::vector<double>{3.5, 4.5, 5.5, 6.5}));
}

TEST(Aggregate, ZerosAndSingleCell) {
  EXPECT_EQ(aggregate(GridGraph(3, 2), Tensor<double>(Shape{6, 2})).storage(), std::vector<double>(12, 0.0));
  const Tensor<double> v(Shape{1, 3}, std::vector<double>{1, -2, 5});
  EXPECT_EQ(aggregate(GridGraph(1, 1), v), v);
}

TEST(Aggregate, MatchesDenseOracleAndIsLinear) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{3, 4}, {1, 6}, {5, 5}}) {
    const GridGraph g(h, w);
    const std::size_t d = h * w, c = 3;
    Tensor<double> v1(Shape{d, c}), v2(Shape{d, c});
    for (auto& x : v1.storage()) x = u(rng);
    for (auto& x : v2.storage()) x = u(rng);
    const auto dense = oracle::dense_aggregate(h, w, v1.storage(), c);
    const auto a1 = aggregate(g, v1);
    for (std::size_t k = 0; k < d * c; ++k) EXPECT_NEAR(a1[k], dense[k], 1e-12);

    const double a = 0.7, b = -1.3;
    Tensor<double> mix(Shape{d, c});
    for (std::size_t k = 0; k < d * c; ++k) mix[k] = a * v1[k] + b * v2[k];
    const auto am = aggregate(g, mix), a2 = aggregate(g, v2);
    for (std::size_t k = 0; k < d * c; ++k) EXPECT_NEAR(am[k], a * a1[k] + b * a2[k], 1e-10);
  }
}

TEST(Aggregate, ConstantMapDoubles) {
  const GridGraph g(4, 3);
  const auto a = aggregate(g, Tensor<double>(Shape{12, 2}, 1.5));
  for (double x : a.data()) EXPECT_NEAR(x, 3.0, 1e-12);
}

TEST(Aggregate, RejectsWrongRowCount) {
  EXPECT_THROW(aggregate(GridGraph(2, 2), Tensor<double>(Shape{5, 1})), ShapeError);
}

TEST(Serialize, OneByTwo) {
  const auto t = serialize_graph(GridGraph(1, 2));
  EXPECT_EQ(t, (std::vector<GraphTriplet>{{0, 1, 1.0}, {1, 0, 1.0}}));
}

TEST(Serialize, TwoByTwoHasEightHalfTriplets) {
  const auto t = serialize_graph(GridGraph(2, 2));
  ASSERT_EQ(t.size(), 8u);
  for (const auto& x : t) EXPECT_EQ(x.weight, 0.5);
  EXPECT_TRUE(std::is_sorted(t.begin(), t.end(), [](const auto& a, const auto& b) {
    return std::pair(a.i, a.j) < std::pair(b.i, b.j);
  }));
}

TEST(Serialize, DumpRoundTrips) {
  for (auto [h, w] : {std::pair<std::int64_t, std::int64_t>{3, 5}, {1, 1}, {6, 1}}) {
    std::stringstream ss;
    write_graph_dump(ss, build_grid_graph(h, w));
    const GridGraph back = read_graph_dump(ss);
    EXPECT_EQ(back.height(), static_cast<std::size_t>(h));
    EXPECT_EQ(back.width(), static_cast<std::size_t>(w));
  }
}

TEST(Serialize, DumpRejectsTamperedTriplets) {
  std::stringstream ss("2 2\n0 1 0.5\n");
  EXPECT_THROW(read_graph_dump(ss), FormatError);
  std::stringstream bad("x y\n");
  EXPECT_THROW(read_graph_dump(bad), FormatError);
}
