#pragma once

// Cosine retrieval, CMC / mAP, and the two evaluation protocols.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hpgn/errors.hpp"
#include "hpgn/sample.hpp"
#include "hpgn/tensor.hpp"

namespace hpgn {

// d = 1 - cos(q, g) for every probe/gallery pair: [q,dim] x [g,dim] -> [q,g].
inline Tensor<double> pairwise_cosine(const Tensor<double>& probe, const Tensor<double>& gallery) {
  require_rank(probe.shape(), 2, "pairwise_cosine probe");
  require_rank(gallery.shape(), 2, "pairwise_cosine gallery");
  const std::size_t q = probe.dim(0), g = gallery.dim(0), dim = probe.dim(1);
  if (gallery.dim(1) != dim) throw ShapeError("pairwise_cosine: feature dimensions differ");
  auto norms = [dim](const Tensor<double>& m, const char* what) {
    std::vector<double> out(m.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) {
      double acc = 0;
      for (std::size_t k = 0; k < dim; ++k) acc += m[i * dim + k] * m[i * dim + k];
      out[i] = std::sqrt(acc);
      if (!(out[i] > 0))
        throw DegenerateFeatureError(std::string(what) + " feature row " + std::to_string(i) +
                                     " has zero norm");
    }
    return out;
  };
  const auto nq = norms(probe, "probe");
  const auto ng = norms(gallery, "gallery");
  Tensor<double> out(Shape{q, g});
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < dim; ++k) dot += probe[i * dim + k] * gallery[j * dim + k];
      out[i * g + j] = 1.0 - dot / (nq[i] * ng[j]);
    }
  return out;
}

// Mean over relevant positions r (1-based) of (#relevant in top r) / r.
// Empty when nothing is relevant.
inline std::optional<double> average_precision(const std::vector<bool>& ranking) {
  double acc = 0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < ranking.size(); ++r)
    if (ranking[r]) {
      ++hits;
      acc += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  if (hits == 0) return std::nullopt;
  return acc / static_cast<double>(hits);
}

struct QueryOutcome {
  bool valid = false;
  std::size_t first_hit = 0;  // 1-based rank of the first relevant item
  double ap = 0;
};

// Ranks the non-excluded gallery by ascending distance, ties by gallery index.
inline QueryOutcome rank_query(std::span<const double> dist, std::span<const char> relevant,
                               std::span<const char> excluded) {
  std::vector<std::size_t> order;
  order.reserve(dist.size());
  for (std::size_t j = 0; j < dist.size(); ++j)
    if (!excluded[j]) order.push_back(j);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  std::vector<bool> flags(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) flags[r] = relevant[order[r]] != 0;
  QueryOutcome out;
  auto ap = average_precision(flags);
  if (!ap) return out;
  out.valid = true;
  out.ap = *ap;
  out.first_hit = static_cast<std::size_t>(std::find(flags.begin(), flags.end(), true) - flags.begin()) + 1;
  return out;
}

// rate[k-1] = fraction of queries whose first hit is at rank <= k.
inline std::vector<double> cmc_curve(std::span<const std::size_t> first_hits, std::size_t max_rank) {
  std::vector<double> curve(max_rank, 0.0);
  if (first_hits.empty()) return curve;
  std::vector<std::size_t> counts(max_rank + 1, 0);
  for (auto r : first_hits)
    if (r >= 1 && r <= max_rank) ++counts[r];
  std::size_t acc = 0;
  for (std::size_t k = 1; k <= max_rank; ++k) {
    acc += counts[k];
    curve[k - 1] = static_cast<double>(acc) / static_cast<double>(first_hits.size());
  }
  return curve;
}

struct RepeatResult {
  double rank1 = 0, rank5 = 0, rank10 = 0, map = 0;
  std::size_t valid_queries = 0, excluded_queries = 0;
};

struct EvalReport {
  std::string protocol;
  std::size_t repeats = 1;
  double rank1 = 0, rank5 = 0, rank10 = 0, map = 0;
  std::vector<double> cmc;                  // cmc[k-1]: rate at rank k
  std::vector<double> per_query_ap;         // valid queries, all repeats in order
  std::vector<std::size_t> first_hit_rank;  // parallel to per_query_ap
  std::size_t valid_queries = 0;
  std::size_t excluded_queries = 0;
  std::vector<RepeatResult> per_repeat;
  std::vector<std::string> warnings;
};

// CMC curve averaged over the repeats of a report.
inline std::vector<double> cmc_curve(const EvalReport& report) { return report.cmc; }

namespace detail {

inline double rate_at(const std::vector<double>& cmc, std::size_t k) {
  if (cmc.empty()) return 0;
  return cmc[std::min(k, cmc.size()) - 1];
}

inline RepeatResult summarize_outcomes(const std::vector<QueryOutcome>& outcomes, std::size_t gallery,
                                       EvalReport& report, std::vector<double>& cmc) {
  RepeatResult rr;
  std::vector<std::size_t> hits;
  double ap_sum = 0;
  for (const auto& q : outcomes) {
    if (!q.valid) {
      ++rr.excluded_queries;
      continue;
    }
    ++rr.valid_queries;
    hits.push_back(q.first_hit);
    ap_sum += q.ap;
    report.per_query_ap.push_back(q.ap);
    report.first_hit_rank.push_back(q.first_hit);
  }
  cmc = cmc_curve(hits, gallery);
  if (rr.valid_queries > 0) {
    rr.rank1 = rate_at(cmc, 1);
    rr.rank5 = rate_at(cmc, 5);
    rr.rank10 = rate_at(cmc, 10);
    rr.map = ap_sum / static_cast<double>(rr.valid_queries);
  }
  return rr;
}

}  // namespace detail

// Cross-camera protocol: per probe, gallery items sharing both identity and
// camera are dropped; a probe left without any positive is excluded and
// counted.
inline EvalReport evaluate_crosscam(const Tensor<double>& probe_features, std::span<const Sample> probe,
                                    const Tensor<double>& gallery_features,
                                    std::span<const Sample> gallery) {
  if (probe_features.rank() != 2 || probe_features.dim(0) != probe.size())
    throw ShapeError("evaluate_crosscam: probe features do not match probe samples");
  if (gallery_features.rank() != 2 || gallery_features.dim(0) != gallery.size())
    throw ShapeError("evaluate_crosscam: gallery features do not match gallery samples");
  EvalReport report;
  report.protocol = "crosscam";
  if (probe.empty() || gallery.empty()) {
    report.warnings.push_back("empty probe or gallery set");
    report.excluded_queries = probe.size();
    return report;
  }
  const Tensor<double> dist = pairwise_cosine(probe_features, gallery_features);
  const std::size_t g = gallery.size();
  std::vector<QueryOutcome> outcomes;
  outcomes.reserve(probe.size());
  std::vector<char> rel(g), exc(g);
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (std::size_t j = 0; j < g; ++j) {
      const bool same_id = gallery[j].identity == probe[i].identity;
      exc[j] = same_id && gallery[j].camera == probe[i].camera;
      rel[j] = same_id && !exc[j];
    }
    outcomes.push_back(rank_query({dist.raw() + i * g, g}, rel, exc));
  }
  auto rr = detail::summarize_outcomes(outcomes, g, report, report.cmc);
  report.rank1 = rr.rank1;
  report.rank5 = rr.rank5;
  report.rank10 = rr.rank10;
  report.map = rr.map;
  report.valid_queries = rr.valid_queries;
  report.excluded_queries = rr.excluded_queries;
  report.per_repeat.push_back(rr);
  if (rr.valid_queries == 0)
    report.warnings.push_back("every query was excluded by the cross-camera rule; metrics are empty");
  return report;
}

enum class SplitMode {
  conventional,  // one random image per identity in the gallery, the rest query it
  literal,       // one random image per identity is the probe, the rest form the gallery
};

inline SplitMode parse_split_mode(const std::string& s) {
  if (s == "conventional") return SplitMode::conventional;
  if (s == "literal") return SplitMode::literal;
  throw ConfigError("unknown split mode '" + s + "' (valid: conventional, literal)");
}

// Repeated random single-instance splits; metrics are averaged over repeats.
inline EvalReport evaluate_repeated_splits(const Tensor<double>& features, std::span<const Sample> samples,
                                           std::size_t repeats, std::uint64_t seed,
                                           SplitMode mode = SplitMode::conventional) {
  if (repeats < 1) throw InvalidArgument("evaluate_repeated_splits: repeats must be >= 1");
  if (features.rank() != 2 || features.dim(0) != samples.size())
    throw ShapeError("evaluate_repeated_splits: features do not match samples");
  EvalReport report;
  report.protocol = mode == SplitMode::conventional ? "repeated" : "repeated-literal";
  report.repeats = repeats;

  std::map<std::int64_t, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < samples.size(); ++i) by_id[samples[i].identity].push_back(i);
  std::vector<std::vector<std::size_t>> groups;
  std::size_t dropped = 0;
  for (auto& [id, idx] : by_id) {
    if (idx.size() < 2) {
      ++dropped;
      continue;
    }
    groups.push_back(idx);
  }
  if (dropped)
    report.warnings.push_back(std::to_string(dropped) + " identities with a single image excluded");
  if (groups.empty()) {
    report.warnings.push_back("no identity has two images; metrics are empty");
    return report;
  }

  const Tensor<double> dist = pairwise_cosine(features, features);
  const std::size_t n = samples.size();
  std::mt19937_64 rng(seed);
  std::vector<double> cmc_sum;
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    std::vector<std::size_t> singles, rest;
    for (const auto& idx : groups) {
      std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
      const std::size_t chosen = pick(rng);
      for (std::size_t k = 0; k < idx.size(); ++k) (k == chosen ? singles : rest).push_back(idx[k]);
    }
    std::sort(singles.begin(), singles.end());
    std::sort(rest.begin(), rest.end());
    const auto& queries = mode == SplitMode::conventional ? rest : singles;
    const auto& gal = mode == SplitMode::conventional ? singles : rest;
    std::vector<QueryOutcome> outcomes;
    std::vector<double> row(gal.size());
    std::vector<char> rel(gal.size()), exc(gal.size(), 0);
    for (std::size_t q : queries) {
      for (std::size_t j = 0; j < gal.size(); ++j) {
        row[j] = dist[q * n + gal[j]];
        rel[j] = samples[gal[j]].identity == samples[q].identity;
      }
      outcomes.push_back(rank_query(row, rel, exc));
    }
    std::vector<double> cmc;
    auto rr = detail::summarize_outcomes(outcomes, gal.size(), report, cmc);
    if (cmc_sum.size() < cmc.size()) cmc_sum.resize(cmc.size(), 0.0);
    for (std::size_t k = 0; k < cmc.size(); ++k) cmc_sum[k] += cmc[k];
    report.per_repeat.push_back(rr);
    report.valid_queries += rr.valid_queries;
    report.excluded_queries += rr.excluded_queries;
  }
  const double inv = 1.0 / static_cast<double>(repeats);
  for (const auto& rr : report.per_repeat) {
    report.rank1 += rr.rank1 * inv;
    report.rank5 += rr.rank5 * inv;
    report.rank10 += rr.rank10 * inv;
    report.map += rr.map * inv;
  }
  report.cmc = cmc_sum;
  for (auto& v : report.cmc) v *= inv;
  return report;
}

inline void write_report_csv(std::ostream& os, const EvalReport& r, bool per_repeat = false) {
  os << "metric,value\n";
  os << "protocol," << r.protocol << '\n';
  os << "repeats," << r.repeats << '\n';
  os << "rank1," << r.rank1 << '\n';
  os << "rank5," << r.rank5 << '\n';
  os << "rank10," << r.rank10 << '\n';
  os << "mAP," << r.map << '\n';
  os << "valid_queries," << r.valid_queries << '\n';
  os << "excluded_queries," << r.excluded_queries << '\n';
  if (per_repeat) {
    os << "\nrepeat,rank1,rank5,rank10,mAP,valid_queries,excluded_queries\n";
    for (std::size_t i = 0; i < r.per_repeat.size(); ++i) {
      const auto& p = r.per_repeat[i];
      os << i + 1 << ',' << p.rank1 << ',' << p.rank5 << ',' << p.rank10 << ',' << p.map << ','
         << p.valid_queries << ',' << p.excluded_queries << '\n';
    }
  }
}

inline void write_report_summary(std::ostream& os, const EvalReport& r) {
  char buf[256];
  os << "== evaluation (" << r.protocol << ", repeats " << r.repeats << ") ==\n";
  std::snprintf(buf, sizeof buf, "  rank-1  %6.2f%%\n  rank-5  %6.2f%%\n  rank-10 %6.2f%%\n  mAP     %6.2f%%\n",
                100 * r.rank1, 100 * r.rank5, 100 * r.rank10, 100 * r.map);
  os << buf;
  os << "  valid queries " << r.valid_queries << ", excluded " << r.excluded_queries << '\n';
  for (const auto& w : r.warnings) os << "  warning: " << w << '\n';
}

}  // namespace hpgn
