#pragma once

// Central-difference gradient checking in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hpgn/errors.hpp"
#include "hpgn/tape.hpp"

namespace hpgn {

struct GradcheckEntry {
  std::string name;
  std::size_t coordinates = 0;  // coordinates actually perturbed
  double max_rel_error = 0;     // over coordinates above the rounding floor
  std::size_t rounding_limited = 0;
  bool pass = true;
  // Worst coordinate, for diagnostics.
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0;
  bool pass = true;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

inline constexpr double kRoundingUlps = 8;

// Scalar-valued program that binds the checked parameters with tape.param().
using GradProgram = std::function<Var<double>(Tape<double>&)>;

// Compares backward() against (f(p+eps) - f(p-eps)) / (2 eps) for every
// coordinate of every parameter (or a seeded random subset of at most
// max_coords per parameter when max_coords > 0). A coordinate passes when its
// relative error is strictly below tol.
//
// Exactly vanishing gradients (e.g. a shift that a later batch norm cancels)
// cannot meet a relative test: the numeric side is pure rounding noise of
// order ulp(f)/eps. When tol > 0, a coordinate whose absolute discrepancy is
// within that rounding floor is counted as rounding-limited instead; tol == 0
// keeps every coordinate strict.
inline GradcheckReport gradcheck(const GradProgram& program, std::span<Parameter<double>* const> params,
                                 double eps, double tol, std::size_t max_coords = 0,
                                 std::uint64_t seed = 0) {
  if (!(eps > 0)) throw InvalidArgument("gradcheck: eps must be positive");
  auto evaluate = [&] {
    Tape<double> tape;
    return program(tape).value().item();
  };

  Tape<double> tape;
  Var<double> loss = program(tape);
  const double f0 = loss.value().item();
  Gradients<double> grads = tape.backward(loss);
  const double f1 = evaluate();
  if (f0 != f1)
    throw DeterminismError("gradcheck: two forward passes disagree (" + std::to_string(f0) + " vs " +
                           std::to_string(f1) + ")");

  std::mt19937_64 rng(seed);
  GradcheckReport report;
  for (Parameter<double>* p : params) {
    const Tensor<double> analytic = grads.of(*p);
    std::vector<std::size_t> coords(p->value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords > 0 && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
      std::sort(coords.begin(), coords.end());
    }
    GradcheckEntry entry{p->name, coords.size(), 0.0, 0, true, 0, 0.0, 0.0};
    for (std::size_t i : coords) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double fp = evaluate();
      p->value[i] = saved - eps;
      const double fm = evaluate();
      p->value[i] = saved;
      const double numeric = (fp - fm) / (2 * eps);
      const double rel = relative_error(analytic[i], numeric);
      const double floor = kRoundingUlps * std::numeric_limits<double>::epsilon() *
                           std::max(std::abs(fp), std::abs(fm)) / (2 * eps);
      if (tol > 0 && !(rel < tol) && std::abs(analytic[i] - numeric) <= floor) {
        ++entry.rounding_limited;
        continue;
      }
      if (rel >= entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
        entry.worst_analytic = analytic[i];
        entry.worst_numeric = numeric;
      }
      if (!(rel < tol)) entry.pass = false;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.pass = report.pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace hpgn
