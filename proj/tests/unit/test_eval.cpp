#include <numeric>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "hpgn/eval.hpp"
#include "oracles.hpp"
#include "retrieval_fixture.hpp"

using namespace hpgn;

using namespace fixture;

TEST(AveragePrecision, HandValues) {
  EXPECT_NEAR(*average_precision({true, false, true}), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(*average_precision({true, true, false, false}), 1.0);
  for (std::size_t p = 1; p <= 6; ++p) {
    std::vector<bool> r(6, false);
    r[p - 1] = true;
    EXPECT_NEAR(*average_precision(r), 1.0 / static_cast<double>(p), 1e-15);
  }
  EXPECT_FALSE(average_precision({false, false}).has_value());
}

TEST(Cosine, IdenticalOrthogonalAndScaled) {
  const Tensor<double> a(Shape{2, 3}, std::vector<double>{1, 2, 3, 0, 0, 1});
  const Tensor<double> b(Shape{3, 3}, std::vector<double>{2, 4, 6, -2, 1, 0, 0, 0, -4});
  const auto d = pairwise_cosine(a, b);
  EXPECT_NEAR(d[0], 0.0, 1e-15);
  EXPECT_NEAR(d[1], 1.0, 1e-15);
  EXPECT_NEAR(d[5], 2.0, 1e-15);
  EXPECT_THROW(pairwise_cosine(a, Tensor<double>(Shape{1, 2}, 1.0)), ShapeError);
}

TEST(Cosine, ZeroNormRowIsDegenerate) {
  const Tensor<double> a(Shape{2, 2}, std::vector<double>{1, 0, 0, 0});
  EXPECT_THROW(pairwise_cosine(a, a), DegenerateFeatureError);
}

TEST(RankQuery, TiesBreakByGalleryIndex) {
  const std::vector<double> dist{0.5, 0.5, 0.5};
  const std::vector<char> rel{0, 0, 1}, none(3, 0), first{1, 0, 0};
  auto q = rank_query(dist, rel, none);
  EXPECT_EQ(q.first_hit, 3u);
  EXPECT_NEAR(q.ap, 1.0 / 3.0, 1e-15);
  q = rank_query(dist, rel, first);
  EXPECT_EQ(q.first_hit, 2u);
  EXPECT_FALSE(rank_query(dist, none, none).valid);
}

TEST(CMC, FirstHitAtRankThree) {
  const std::vector<std::size_t> hits{3};
  EXPECT_EQ(cmc_curve(hits, 5), (std::vector<double>{0, 0, 1, 1, 1}));
  const std::vector<std::size_t> mix{1, 2, 2, 4};
  EXPECT_EQ(cmc_curve(mix, 4), (std::vector<double>{0.25, 0.75, 0.75, 1.0}));
}

TEST(CrossCamera, HandInstance) {
  const HandInstance h;
  const auto r = evaluate_crosscam(h.pf, h.probe, h.gf, h.gallery);
  EXPECT_EQ(r.valid_queries, 3u);
  EXPECT_EQ(r.excluded_queries, 0u);
  EXPECT_NEAR(r.rank1, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(r.rank5, 1.0);
  ASSERT_EQ(r.per_query_ap.size(), 3u);
  EXPECT_NEAR(r.per_query_ap[0], (1.0 + 2.0 / 3.0 + 3.0 / 6.0) / 3.0, 1e-15);
  EXPECT_NEAR(r.per_query_ap[1], 1.0, 1e-15);
  EXPECT_NEAR(r.per_query_ap[2], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.map, 37.0 / 54.0, 1e-15);
  EXPECT_EQ(r.first_hit_rank, (std::vector<std::size_t>{1, 1, 3}));
  EXPECT_NEAR(r.cmc[1], 2.0 / 3.0, 1e-15);
  EXPECT_EQ(r.cmc[2], 1.0);

  const auto o = oracle::naive_crosscam(rows_of(h.pf), ids_of(h.probe), cams_of(h.probe), rows_of(h.gf),
                                        ids_of(h.gallery), cams_of(h.gallery));
  EXPECT_EQ(o.rank1, r.rank1);
  EXPECT_EQ(o.map, r.map);
}

TEST(CrossCamera, RandomInstancesMatchTheNaiveOracle) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t q = 1 + trial % 50, g = 5 + (trial * 37) % 196, dim = 2 + trial % 7;
    const std::int64_t ids = 2 + trial % 9, cams = 1 + trial % 4;
    std::uniform_int_distribution<std::int64_t> id(0, ids - 1), cam(0, cams - 1);
    Tensor<double> pf(Shape{q, dim}), gf(Shape{g, dim});
    for (auto& v : pf.storage()) v = n(rng);
    for (auto& v : gf.storage()) v = n(rng);
    std::vector<Sample> probe(q), gallery(g);
    for (auto& s : probe) s.identity = id(rng), s.camera = cam(rng);
    for (auto& s : gallery) s.identity = id(rng), s.camera = cam(rng);
    const auto r = evaluate_crosscam(pf, probe, gf, gallery);
    const auto o = oracle::naive_crosscam(rows_of(pf), ids_of(probe), cams_of(probe), rows_of(gf), ids_of(gallery),
                                          cams_of(gallery));
    EXPECT_EQ(r.valid_queries, o.valid) << trial;
    EXPECT_EQ(r.excluded_queries, o.excluded) << trial;
    EXPECT_EQ(r.rank1, o.rank1) << trial;
    EXPECT_EQ(r.rank5, o.rank5) << trial;
    EXPECT_EQ(r.map, o.map) << trial;
  }
}

TEST(CrossCamera, InvariantToGalleryOrderAndFeatureScale) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 1);
  const std::size_t q = 10, g = 40, dim = 5;
  Tensor<double> pf(Shape{q, dim}), gf(Shape{g, dim});
  for (auto& v : pf.storage()) v = n(rng);
  for (auto& v : gf.storage()) v = n(rng);
  std::vector<Sample> probe(q), gallery(g);
  for (std::size_t i = 0; i < q; ++i) probe[i] = {"", static_cast<std::int64_t>(i % 5), 0, ""};
  for (std::size_t j = 0; j < g; ++j) gallery[j] = {"", static_cast<std::int64_t>(j % 5), static_cast<std::int64_t>(j % 3), ""};
  const auto base = evaluate_crosscam(pf, probe, gf, gallery);

  std::vector<std::size_t> perm(g);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor<double> gp(Shape{g, dim});
  std::vector<Sample> sp(g);
  for (std::size_t j = 0; j < g; ++j) {
    sp[j] = gallery[perm[j]];
    for (std::size_t k = 0; k < dim; ++k) gp[j * dim + k] = 3.0 * gf[perm[j] * dim + k];
  }
  Tensor<double> ps = pf;
  for (auto& v : ps.storage()) v *= 0.25;
  const auto moved = evaluate_crosscam(ps, probe, gp, sp);
  EXPECT_EQ(moved.rank1, base.rank1);
  EXPECT_EQ(moved.first_hit_rank, base.first_hit_rank);
  EXPECT_NEAR(moved.map, base.map, 1e-12);
}

TEST(CrossCamera, SingleCameraDataIsFullyExcluded) {
  const Tensor<double> f = unit_angles({0, 10, 20, 30});
  const auto s = samples({0, 0, 1, 1}, {0, 0, 0, 0});
  const auto r = evaluate_crosscam(f, s, f, s);
  EXPECT_EQ(r.valid_queries, 0u);
  EXPECT_EQ(r.excluded_queries, 4u);
  EXPECT_EQ(r.map, 0.0);
  ASSERT_FALSE(r.warnings.empty());
  EXPECT_NE(r.warnings[0].find("excluded"), std::string::npos);
}

TEST(RepeatedSplits, SeparatedIdentitiesArePerfect) {
  // Two identities, two images each, far apart on the circle.
  const Tensor<double> f = unit_angles({0, 5, 90, 95});
  const auto s = samples({0, 0, 1, 1}, {0, 1, 0, 1});
  for (auto mode : {SplitMode::conventional, SplitMode::literal}) {
    const auto r = evaluate_repeated_splits(f, s, 10, 3, mode);
    EXPECT_DOUBLE_EQ(r.rank1, 1.0);  // mean of ten exact ones
    EXPECT_DOUBLE_EQ(r.map, 1.0);
    EXPECT_EQ(r.per_repeat.size(), 10u);
    EXPECT_EQ(r.valid_queries, 20u);
  }
}

TEST(RepeatedSplits, SeededAndModeDependent) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 1);
  const std::size_t ids = 12, per = 4, dim = 6;
  Tensor<double> f(Shape{ids * per, dim});
  for (auto& v : f.storage()) v = n(rng);
  std::vector<Sample> s(ids * per);
  for (std::size_t i = 0; i < s.size(); ++i) s[i].identity = static_cast<std::int64_t>(i / per);
  const auto a = evaluate_repeated_splits(f, s, 5, 11), b = evaluate_repeated_splits(f, s, 5, 11);
  EXPECT_EQ(a.per_query_ap, b.per_query_ap);
  EXPECT_EQ(a.rank1, b.rank1);
  const auto c = evaluate_repeated_splits(f, s, 5, 12);
  EXPECT_NE(a.per_query_ap, c.per_query_ap);
  // Conventional: every non-gallery image queries a one-per-identity gallery.
  EXPECT_EQ(a.valid_queries, 5 * ids * (per - 1));
  const auto lit = evaluate_repeated_splits(f, s, 5, 11, SplitMode::literal);
  EXPECT_EQ(lit.valid_queries, 5 * ids);
  EXPECT_EQ(lit.protocol, "repeated-literal");
  double mean = 0;
  for (const auto& rr : a.per_repeat) mean += rr.map / 5;
  EXPECT_NEAR(a.map, mean, 1e-15);
}

TEST(RepeatedSplits, SingleImageIdentitiesAreDroppedWithWarning) {
  const Tensor<double> f = unit_angles({0, 5, 90, 180});
  const auto s = samples({0, 0, 1, 2}, {0, 0, 0, 0});
  const auto r = evaluate_repeated_splits(f, s, 2, 1);
  ASSERT_FALSE(r.warnings.empty());
  EXPECT_NE(r.warnings[0].find("2 identities"), std::string::npos);
  EXPECT_EQ(r.valid_queries, 2u);
  EXPECT_THROW(evaluate_repeated_splits(f, s, 0, 1), InvalidArgument);
  EXPECT_THROW(parse_split_mode("random"), ConfigError);
}

TEST(Report, CsvAndSummary) {
  const HandInstance h;
  const auto r = evaluate_crosscam(h.pf, h.probe, h.gf, h.gallery);
  std::ostringstream csv, txt;
  write_report_csv(csv, r, true);
  write_report_summary(txt, r);
  EXPECT_EQ(csv.str().substr(0, 13), "metric,value\n");
  EXPECT_NE(csv.str().find("protocol,crosscam"), std::string::npos);
  EXPECT_NE(csv.str().find("\nrepeat,rank1"), std::string::npos);
  EXPECT_NE(txt.str().find("rank-1   66.67%"), std::string::npos);
}
