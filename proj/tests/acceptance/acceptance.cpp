// End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
// if any criterion fails. `acceptance --only 1,3` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hpgn/cli.hpp"
#include "hpgn/hpgn.hpp"
#include "oracles.hpp"
#include "retrieval_fixture.hpp"
#include "tiny_run.hpp"

#ifndef HPGN_SOURCE_DIR
#define HPGN_SOURCE_DIR "."
#endif

using namespace hpgn;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail = what;
      pass = false;
    }
  }
};

struct Criterion {
  int id;
  std::string name;
  double budget_s;  // wall-clock limit, 0 for none
  std::function<Verdict()> run;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ------------------------------------------------------------------ 1

Verdict graph_oracle() {
  Verdict v;
  for (std::int64_t h = 1; h <= 6; ++h)
    for (std::int64_t w = 1; w <= 6; ++w) {
      const GridGraph g = build_grid_graph(h, w);
      const auto adj = oracle::grid_adjacency(h, w);
      const auto s = oracle::grid_s_matrix(h, w);
      const std::size_t d = static_cast<std::size_t>(h * w);
      const std::string where = std::to_string(h) + "x" + std::to_string(w);
      v.require(g.nodes() == d, where + ": node count");
      for (std::size_t i = 0; i < d; ++i) {
        std::vector<std::size_t> want;
        for (std::size_t j = 0; j < d; ++j)
          if (adj[i][j]) want.push_back(j);
        std::vector<std::size_t> got(g.neighbors(i).begin(), g.neighbors(i).end());
        std::sort(got.begin(), got.end());
        v.require(got == want, where + ": neighbours of node " + std::to_string(i));
        v.require(g.degree(i) == want.size(), where + ": degree of node " + std::to_string(i));
        std::vector<double> row(d, 0.0);
        for (std::size_t j : g.neighbors(i)) row[j] += g.weight(i);
        double sum = 0;
        for (std::size_t j = 0; j < d; ++j) {
          v.require(std::abs(row[j] - s[i][j]) <= 1e-15, where + ": weight mismatch");
          sum += row[j];
        }
        if (d >= 2) v.require(std::abs(sum - 1.0) <= 1e-12, where + ": row sum " + fmt("%.17g", sum));
      }
    }
  if (v.pass) v.detail = "36 grids";
  return v;
}

// ------------------------------------------------------------------ 2

Verdict gradient_suite() {
  std::ostringstream out, err;
  const char* argv[] = {"hpgn", "gradcheck", "--scope", "all", "--eps", "1e-5", "--tol", "1e-4"};
  const int code = run(8, argv, out, err);
  Verdict v;
  v.require(code == kExitOk, "gradcheck exit code " + std::to_string(code) + "\n" + out.str() + err.str());
  const std::string text = out.str();
  for (const auto& scope : gradcheck_scopes())
    v.require(text.find("\n" + scope + " ") != std::string::npos, "scope " + scope + " missing from the report");
  if (v.pass) {
    std::size_t checks = 0;
    for (char c : text) checks += c == '\n';
    v.detail = std::to_string(checks - 2) + " checks over " + std::to_string(gradcheck_scopes().size()) + " scopes";
  }
  return v;
}

// ------------------------------------------------------------------ 3

std::vector<std::vector<double>> rows_of(const Tensor<double>& t) { return fixture::rows_of(t); }

Verdict loss_oracles() {
  Verdict v;
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0, 2);

  // Targets: exactly one for dyadic smoothing, to the last bit otherwise.
  for (std::size_t k : {2, 4, 8, 16, 64})
    for (double eps : {0.0, 0.5, 0.25, 0.125}) {
      double s = 0;
      for (std::size_t j = 0; j < k; ++j) s += smoothed_target(0, j, k, eps);
      v.require(s == 1.0, "smoothed targets do not sum to 1 (K=" + std::to_string(k) + ")");
    }
  for (std::size_t k : {3, 7, 10, 25, 576})
    for (double eps : {0.1, 0.3, 0.05}) {
      long double s = 0;
      for (std::size_t j = 0; j < k; ++j) s += smoothed_target(1, j, k, eps);
      v.require(std::abs(static_cast<double>(s) - 1.0) <= 4 * k * 1.1102230246251565e-16,
                "smoothed targets drift from 1 (K=" + std::to_string(k) + ")");
    }

  double worst_ce = 0, worst_mix = 0, worst_tri = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 1 + trial % 8, k = 2 + trial % 9;
    Tensor<double> z(Shape{b, k});
    for (auto& x : z.storage()) x = n(rng);
    std::vector<std::size_t> labels(b);
    for (auto& l : labels) l = std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
    Tape<double> t;
    const auto zv = t.constant(z);
    const double ce0 = lsrs_from_logits(zv, labels, 0.0).value().item();
    const double ce = oracle::smoothed_cross_entropy(rows_of(z), labels, 0.0);
    worst_ce = std::max(worst_ce, std::abs(ce0 - ce));
    const double eps = 0.05 + 0.05 * (trial % 8);
    double uniform = 0;
    for (std::size_t i = 0; i < b; ++i) {
      double m = z[i * k];
      for (std::size_t j = 1; j < k; ++j) m = std::max(m, z[i * k + j]);
      double lse = 0;
      for (std::size_t j = 0; j < k; ++j) lse += std::exp(z[i * k + j] - m);
      lse = m + std::log(lse);
      for (std::size_t j = 0; j < k; ++j) uniform += (lse - z[i * k + j]) / static_cast<double>(k);
    }
    uniform /= static_cast<double>(b);
    const double smoothed = lsrs_from_logits(zv, labels, eps).value().item();
    worst_mix = std::max(worst_mix, std::abs(smoothed - ((1 - eps) * ce + eps * uniform)));
  }
  v.require(worst_ce <= 1e-10, "LSRS at zero smoothing differs from cross-entropy by " + fmt("%.3e", worst_ce));
  v.require(worst_mix <= 1e-10, "mixture identity off by " + fmt("%.3e", worst_mix));

  std::normal_distribution<double> f(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t ids = 2 + trial % 5;
    const std::size_t per = 2 + (trial / 5) % (12 / ids - 1);
    const std::size_t dim = 1 + trial % 6;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < ids; ++i)
      for (std::size_t j = 0; j < per; ++j) labels.push_back(i);
    std::shuffle(labels.begin(), labels.end(), rng);
    Tensor<double> x(Shape{labels.size(), dim});
    for (auto& e : x.storage()) e = f(rng);
    const double margin = 0.2 * (trial % 7);
    Tape<double> t;
    const double got = batch_hard_triplet(t.constant(x), labels, margin).value().item();
    worst_tri = std::max(worst_tri, std::abs(got - oracle::batch_hard_triplet(rows_of(x), labels, margin)));
  }
  v.require(worst_tri <= 1e-12, "batch-hard triplet off by " + fmt("%.3e", worst_tri));
  v.detail = "max errors: CE " + fmt("%.1e", worst_ce) + ", mixture " + fmt("%.1e", worst_mix) + ", triplet " +
             fmt("%.1e", worst_tri) + " over 200 batches";
  return v;
}

// ------------------------------------------------------------------ 4

template <class T>
double telescoping_error(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-3, 3);
  Tensor<T> x(Shape{4, 8, 16, 16});
  for (auto& e : x.storage()) e = static_cast<T>(u(rng));
  Tape<T> t;
  const auto xv = t.constant(x);
  const auto ref = ops::global_avg_pool(xv).value();
  double worst = 0;
  for (std::size_t k : {1, 2, 4, 8, 16}) {
    const auto got = ops::global_avg_pool(ops::avg_pool2d(xv, k)).value();
    for (std::size_t i = 0; i < ref.size(); ++i)
      worst = std::max(worst, std::abs(static_cast<double>(got[i]) - static_cast<double>(ref[i])));
  }
  return worst;
}

Verdict pooling_algebra() {
  Verdict v;
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    worst = std::max(worst, telescoping_error<float>(seed));
    worst = std::max(worst, telescoping_error<double>(seed));
  }
  v.require(worst <= 1e-6, "GAP after average pooling differs by " + fmt("%.3e", worst));
  v.detail = "windows 1,2,4,8,16; max abs error " + fmt("%.2e", worst);
  return v;
}

// ------------------------------------------------------------------ 5

Verdict schedule_exactness() {
  Verdict v;
  const ScheduleConfig s;
  const std::pair<std::size_t, double> table[] = {{1, 3e-4},  {10, 3e-2}, {50, 3e-2},  {51, 3e-3},
                                                   {85, 3e-3}, {86, 3e-4}, {119, 3e-4}, {120, 3e-5}};
  for (auto [epoch, lr] : table)
    v.require(lr_at_epoch(epoch, s) == lr, "epoch " + std::to_string(epoch) + " gives " +
                                               fmt("%.17g", lr_at_epoch(epoch, s)));
  if (v.pass) v.detail = "8 boundary epochs exact";
  return v;
}

// ------------------------------------------------------------------ 6

Verdict metric_oracles() {
  Verdict v;
  const fixture::HandInstance h;
  const auto r = evaluate_crosscam(h.pf, h.probe, h.gf, h.gallery);
  v.require(r.first_hit_rank == std::vector<std::size_t>{1, 1, 3}, "hand instance first-hit ranks");
  v.require(std::abs(r.rank1 - 2.0 / 3.0) <= 1e-15 && r.rank5 == 1.0, "hand instance CMC");
  v.require(r.cmc.size() == 6 && r.cmc[1] == r.rank1 && r.cmc[2] == 1.0, "hand instance CMC curve");
  v.require(std::abs(r.map - 37.0 / 54.0) <= 1e-15, "hand instance mAP " + fmt("%.17g", r.map));

  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0, 1);
  std::size_t instances = 0;
  for (std::size_t q : {1, 5, 17, 50})
    for (std::size_t g : {6, 40, 123, 200})
      for (std::int64_t cams : {1, 2, 4}) {
        const std::size_t dim = 3 + instances % 6;
        const std::int64_t ids = 2 + static_cast<std::int64_t>(instances % 12);
        std::uniform_int_distribution<std::int64_t> id(0, ids - 1), cam(0, cams - 1);
        Tensor<double> pf(Shape{q, dim}), gf(Shape{g, dim});
        for (auto& e : pf.storage()) e = n(rng);
        for (auto& e : gf.storage()) e = n(rng);
        std::vector<Sample> probe(q), gallery(g);
        for (auto& s : probe) s.identity = id(rng), s.camera = cam(rng);
        for (auto& s : gallery) s.identity = id(rng), s.camera = cam(rng);
        const auto got = evaluate_crosscam(pf, probe, gf, gallery);
        const auto want = oracle::naive_crosscam(rows_of(pf), fixture::ids_of(probe), fixture::cams_of(probe),
                                                 rows_of(gf), fixture::ids_of(gallery), fixture::cams_of(gallery));
        const std::string where = std::to_string(q) + "x" + std::to_string(g);
        v.require(got.valid_queries == want.valid && got.excluded_queries == want.excluded, where + ": query counts");
        v.require(got.rank1 == want.rank1 && got.rank5 == want.rank5, where + ": CMC");
        v.require(got.map == want.map, where + ": mAP " + fmt("%.17g", got.map) + " vs " + fmt("%.17g", want.map));
        ++instances;
      }
  if (v.pass) v.detail = "hand 3x6 instance and " + std::to_string(instances) + " random instances up to 50x200";
  return v;
}

// ------------------------------------------------------------------ 7

Verdict overfit_oracle() {
  RunConfig cfg;  // desk model: 32 px input, widths 16/32/64, 8x8 base map
  cfg.schedule.total_epochs = 60;
  cfg.identities_per_batch = 4;
  cfg.images_per_identity = 4;
  cfg.synth.identities = 4;
  cfg.synth.images_per_identity = 8;
  cfg.synth.color_groups = 2;
  cfg.synth.train_fraction = 1.0;
  Verdict v;
  v.require(cfg.model.base_size() == 8, "base map is not 8x8");
  v.require(*std::max_element(cfg.model.channels.begin(), cfg.model.channels.end()) <= 128, "channels above 128");

  const Dataset train_set = render_synthetic(cfg.synth).dataset;
  auto res = train(initial_state(cfg, train_set), train_set);
  const auto f = embed_dataset(*res.state, train_set);
  // Leave-one-out retrieval: a distinct camera per image excludes only the query itself.
  std::vector<Sample> s = train_set.samples;
  for (std::size_t i = 0; i < s.size(); ++i) s[i].camera = static_cast<std::int64_t>(i);
  const auto report = evaluate_crosscam(f, s, f, s);
  v.require(report.valid_queries == 32, "expected 32 training queries");
  v.require(report.rank1 == 1.0, "training rank-1 " + fmt("%.4f", report.rank1));
  v.detail = "training rank-1 " + fmt("%.4f", report.rank1) + ", final loss " + fmt("%.4f", res.log.back().total);
  return v;
}

// ------------------------------------------------------------------ 8

double ablation_rank1(Variant variant, std::uint64_t seed) {
  RunConfig cfg = load_run_config(fs::path(HPGN_SOURCE_DIR) / "configs" / "ablation.ini");
  cfg.model.variant = variant;
  cfg.seed = seed;
  cfg.synth.seed = 100 + seed;
  const Dataset all = render_synthetic(cfg.synth).dataset;
  const Dataset train_set = all.select("train"), probe = all.select("probe"), gallery = all.select("gallery");
  auto res = train(initial_state(cfg, train_set), train_set);
  const auto pf = embed_dataset(*res.state, probe), gf = embed_dataset(*res.state, gallery);
  return evaluate_crosscam(pf, probe.samples, gf, gallery.samples).rank1;
}

Verdict ablation_ordering() {
  const Variant variants[] = {Variant::hpgn, Variant::hpgn_ng, Variant::baseline};
  double mean[3] = {0, 0, 0};
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    per_seed += " seed " + std::to_string(seed) + ":";
    for (int i = 0; i < 3; ++i) {
      const double r1 = ablation_rank1(variants[i], seed);
      mean[i] += r1 / 3;
      per_seed += " " + fmt("%.3f", r1);
    }
    per_seed += ";";
  }
  Verdict v;
  v.require(mean[0] >= mean[1], "HPGN below HPGN-NG");
  v.require(mean[1] >= mean[2], "HPGN-NG below baseline");
  v.require(mean[0] - mean[2] >= 0.02, "HPGN leads baseline by less than 2 points");
  if (!v.pass) v.detail += "; ";
  v.detail += "mean rank-1 HPGN " + fmt("%.4f", mean[0]) + ", HPGN-NG " + fmt("%.4f", mean[1]) + ", baseline " +
              fmt("%.4f", mean[2]) + " (" + per_seed.substr(1, per_seed.size() - 2) + ")";
  return v;
}

// ------------------------------------------------------------------ 9

Verdict checkpoint_round_trip() {
  set_num_threads(1);
  Verdict v;
  RunConfig cfg = tiny::config();
  const Dataset train_set = tiny::data(cfg).select("train");
  tiny::TempDir straight("acceptance_straight"), split("acceptance_split");

  TrainOptions opt;
  opt.out_dir = straight.path;
  const auto full = train(initial_state(cfg, train_set), train_set, opt);

  opt.out_dir = split.path;
  opt.stop_after = 2;
  auto first = train(initial_state(cfg, train_set), train_set, opt);
  save_checkpoint(make_checkpoint(*first.state), split.path / "copy.ckpt");
  TrainState loaded = restore_state(load_checkpoint(split.path / "copy.ckpt"));
  auto pa = first.state->model.parameters(), pb = loaded.model.parameters();
  bool same = pa.size() == pb.size();
  for (std::size_t i = 0; same && i < pa.size(); ++i)
    same = std::memcmp(pa[i]->value.raw(), pb[i]->value.raw(), pa[i]->value.size() * sizeof(float)) == 0;
  v.require(same, "parameters changed across save/load");

  opt.stop_after = 0;
  const auto rest = train(restore_state(load_checkpoint(split.path / "last.ckpt")), train_set, opt);
  std::vector<EpochMetrics> joined = first.log;
  joined.insert(joined.end(), rest.log.begin(), rest.log.end());
  v.require(joined == full.log, "resumed loss log differs from the uninterrupted run");
  auto bytes = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  };
  v.require(bytes(split.path / "last.ckpt") == bytes(straight.path / "last.ckpt"), "final checkpoints differ");
  if (v.pass) v.detail = std::to_string(pa.size()) + " tensors bitwise equal; 4-epoch log identical after resume";
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HPGN acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "criterion numbers to run (default: all)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria = {
      {1, "graph oracle", 1, graph_oracle},
      {2, "gradient suite", 120, gradient_suite},
      {3, "loss oracles", 0, loss_oracles},
      {4, "pooling algebra", 0, pooling_algebra},
      {5, "schedule exactness", 0, schedule_exactness},
      {6, "metric oracles", 0, metric_oracles},
      {7, "overfit oracle", 300, overfit_oracle},
      {8, "ablation ordering", 45 * 60, ablation_ordering},
      {9, "checkpoint round-trip", 0, checkpoint_round_trip},
  };
  set_num_threads(1);
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    const double secs = seconds_since(t0);
    if (c.budget_s > 0 && secs >= c.budget_s) {
      v.pass = false;
      v.detail += " [over the " + fmt("%.0f", c.budget_s) + " s budget]";
    }
    std::printf("%s %d %s: %s (%.2f s)\n", v.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), v.detail.c_str(), secs);
    std::fflush(stdout);
    failures += !v.pass;
  }
  return failures == 0 ? 0 : 1;
}
