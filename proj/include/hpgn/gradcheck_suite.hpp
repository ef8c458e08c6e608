#pragma once

// Named finite-difference checks grouped by scope, as run by `hpgn gradcheck`.

#include <algorithm>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "hpgn/gradcheck.hpp"
#include "hpgn/layers.hpp"
#include "hpgn/losses.hpp"
#include "hpgn/model.hpp"

namespace hpgn {

struct ScopedReport {
  std::string scope;
  std::string check;
  GradcheckReport report;
};

inline const std::vector<std::string>& gradcheck_scopes() {
  static const std::vector<std::string> s{"graph", "sg", "bn", "cbr", "losses", "model"};
  return s;
}

namespace detail {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

// Projects a tensor onto a fixed random direction so every output coordinate
// reaches the loss with a distinct weight.
inline Var<double> probe_sum(Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Var<double> w = y.tape()->constant(random_tensor(y.shape(), rng));
  return ops::sum(ops::mul(y, w));
}

struct Check {
  std::string name;
  GradProgram program;
  std::vector<Parameter<double>*> params;
};

// Owns the parameters a scope's programs refer to.
struct ScopeFixture {
  std::vector<std::unique_ptr<Parameter<double>>> owned;
  std::vector<std::unique_ptr<SGParams<double>>> sg;
  std::vector<std::unique_ptr<BatchNorm<double>>> bn;
  std::vector<std::unique_ptr<CBRParams<double>>> cbr;
  std::vector<std::unique_ptr<ClassifierHead<double>>> heads;
  std::vector<std::unique_ptr<GridGraph>> graphs;
  std::vector<std::unique_ptr<Model<double>>> models;
  std::vector<Check> checks;

  Parameter<double>* param(const std::string& name, Tensor<double> value) {
    owned.push_back(std::make_unique<Parameter<double>>(name, std::move(value)));
    return owned.back().get();
  }
  const GridGraph& graph(std::size_t h, std::size_t w) {
    graphs.push_back(std::make_unique<GridGraph>(h, w));
    return *graphs.back();
  }
};

inline void build_graph_scope(ScopeFixture& fx, std::mt19937_64& rng) {
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{3, 4}, {1, 5}, {1, 1}})
    for (bool nb : {true, false}) {
      const GridGraph& g = fx.graph(h, w);
      auto* x = fx.param("x", random_tensor(Shape{2, 3, h, w}, rng));
      const std::string name = "aggregate " + std::to_string(h) + "x" + std::to_string(w) +
                               (nb ? "" : " (self only)");
      fx.checks.push_back({name,
                           [&g, x, nb](Tape<double>& t) {
                             return probe_sum(ops::graph_aggregate(t.param(*x), g, nb), 11);
                           },
                           {x}});
    }
}

inline void build_sg_scope(ScopeFixture& fx, std::mt19937_64& rng) {
  const std::size_t h = 3, w = 3, c = 4;
  const GridGraph& g = fx.graph(h, w);
  auto* v = fx.param("v", random_tensor(Shape{3, c, h, w}, rng));
  for (bool nb : {true, false}) {
    fx.sg.push_back(std::make_unique<SGParams<double>>("sg", h * w, c));
    SGParams<double>* p = fx.sg.back().get();
    p->theta.value = random_tensor(Shape{h * w, c}, rng, 0.5, 1.5);
    p->bn.gamma.value = random_tensor(Shape{c}, rng, 0.5, 1.5);
    p->bn.beta.value = random_tensor(Shape{c}, rng, -0.5, 0.5);
    fx.checks.push_back({nb ? "SG layer" : "SG layer (self only)",
                         [&g, v, p, nb](Tape<double>& t) {
                           return probe_sum(sg_forward(t.param(*v), g, *p, Mode::train, nb), 12);
                         },
                         {v, &p->theta, &p->bn.gamma, &p->bn.beta}});
  }
  // Three stacked layers, as in one SGN.
  auto stack = std::make_shared<std::vector<SGParams<double>>>();
  std::vector<Parameter<double>*> ps{v};
  for (int l = 0; l < 3; ++l) {
    stack->emplace_back("sgn" + std::to_string(l), h * w, c);
    stack->back().theta.value = random_tensor(Shape{h * w, c}, rng, 0.5, 1.5);
    // A zero shift would make each layer positively homogeneous, so the next
    // batch norm would cancel gamma exactly and leave a zero gradient.
    stack->back().bn.gamma.value = random_tensor(Shape{c}, rng, 0.5, 1.5);
    stack->back().bn.beta.value = random_tensor(Shape{c}, rng, -0.5, 0.5);
  }
  for (auto& l : *stack) {
    ps.push_back(&l.theta);
    ps.push_back(&l.bn.gamma);
    ps.push_back(&l.bn.beta);
  }
  fx.checks.push_back({"SGN depth 3",
                       [&g, v, stack](Tape<double>& t) {
                         return probe_sum(sgn_forward(t.param(*v), g, std::span<SGParams<double>>(*stack),
                                                      Mode::train, true),
                                          13);
                       },
                       ps});
}

inline void build_bn_scope(ScopeFixture& fx, std::mt19937_64& rng) {
  for (bool map : {true, false})
    for (Mode mode : {Mode::train, Mode::infer}) {
      const std::size_t c = 3;
      fx.bn.push_back(std::make_unique<BatchNorm<double>>("bn", c));
      BatchNorm<double>* bn = fx.bn.back().get();
      bn->gamma.value = random_tensor(Shape{c}, rng, 0.5, 1.5);
      bn->beta.value = random_tensor(Shape{c}, rng);
      bn->running_mean = random_tensor(Shape{c}, rng, -0.2, 0.2);
      bn->running_var = random_tensor(Shape{c}, rng, 0.5, 2.0);
      auto* x = fx.param("x", random_tensor(map ? Shape{4, c, 2, 3} : Shape{5, c}, rng));
      const std::string name = std::string("batch norm ") + (map ? "[n,c,h,w]" : "[n,c]") +
                               (mode == Mode::train ? " train" : " infer");
      fx.checks.push_back({name,
                           [bn, x, mode](Tape<double>& t) { return probe_sum((*bn)(t.param(*x), mode), 14); },
                           {x, &bn->gamma, &bn->beta}});
    }
}

inline void build_cbr_scope(ScopeFixture& fx, std::mt19937_64& rng) {
  fx.cbr.push_back(std::make_unique<CBRParams<double>>("cbr", 6, 4));
  CBRParams<double>* p = fx.cbr.back().get();
  p->init(rng);
  p->bn.beta.value = random_tensor(Shape{4}, rng, 0.2, 0.8);  // keep most outputs off the ReLU kink
  auto* x = fx.param("x", random_tensor(Shape{5, 6}, rng));
  fx.checks.push_back({"CBR",
                       [p, x](Tape<double>& t) { return probe_sum(cbr_forward(t.param(*x), *p, Mode::train), 15); },
                       {x, &p->weight, &p->bn.gamma, &p->bn.beta}});
}

inline void build_loss_scope(ScopeFixture& fx, std::mt19937_64& rng) {
  const std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2, 1, 0};
  auto shared_labels = std::make_shared<std::vector<std::size_t>>(labels);
  fx.heads.push_back(std::make_unique<ClassifierHead<double>>("head", 5, 3));
  ClassifierHead<double>* head = fx.heads.back().get();
  head->weight.value = random_tensor(Shape{5, 3}, rng);
  auto* f = fx.param("features", random_tensor(Shape{labels.size(), 5}, rng));
  for (double eps : {0.0, 0.1})
    fx.checks.push_back({"smoothed softmax eps=" + std::string(eps == 0 ? "0" : "0.1"),
                         [head, f, shared_labels, eps](Tape<double>& t) {
                           return lsrs_loss(t.param(*f), *head, *shared_labels, eps);
                         },
                         {f, &head->weight}});
  auto* e = fx.param("embedding", random_tensor(Shape{labels.size(), 5}, rng));
  for (double margin : {1.2, 50.0})
    fx.checks.push_back({std::string(margin < 10 ? "batch-hard triplet margin=1.2" : "batch-hard triplet margin=50 (all hinges active)"),
                         [e, shared_labels, margin](Tape<double>& t) {
                           return batch_hard_triplet(t.param(*e), *shared_labels, margin);
                         },
                         {e}});
}

inline ModelConfig tiny_model_config(Variant v) {
  ModelConfig cfg;
  cfg.input_size = 16;
  cfg.channels = {4, 8};  // 16 -> 8 -> 8: base map 8x8x8, windows 1, 2 and 4
  cfg.embed_dim = 6;
  cfg.num_classes = 4;
  cfg.sgn_depth = 2;
  cfg.variant = v;
  return cfg;
}

inline void build_model_scope(ScopeFixture& fx, std::mt19937_64& rng) {
  const std::vector<std::size_t> labels{0, 1, 2, 3, 0, 1, 2, 3};
  auto shared_labels = std::make_shared<std::vector<std::size_t>>(labels);
  auto images = std::make_shared<Tensor<double>>(random_tensor(Shape{labels.size(), 3, 16, 16}, rng));
  for (const auto& [v, name] : variant_names()) {
    fx.models.push_back(std::make_unique<Model<double>>(tiny_model_config(v), 7));
    Model<double>* m = fx.models.back().get();
    // Perturb the identity-initialised theta and BN shift away from symmetric values.
    for (auto* p : m->parameters()) {
      if (p->name.ends_with(".theta")) p->value = random_tensor(p->value.shape(), rng, 0.5, 1.5);
      if (p->name.ends_with(".beta")) p->value = random_tensor(p->value.shape(), rng, 0.1, 0.6);
    }
    LossConfig loss;
    fx.checks.push_back({"tiny " + to_string(v) + " total loss",
                         [m, images, shared_labels, loss](Tape<double>& t) {
                           auto out = m->forward(t, *images, Mode::train);
                           return total_loss(out, *shared_labels, loss).total;
                         },
                         m->parameters()});
  }
}

}  // namespace detail

// Runs every check of the requested scope ("all" expands to each scope).
inline std::vector<ScopedReport> run_gradcheck_scope(const std::string& scope, double eps, double tol,
                                                     std::uint64_t seed = 2024) {
  std::vector<std::string> scopes;
  if (scope == "all")
    scopes = gradcheck_scopes();
  else if (std::find(gradcheck_scopes().begin(), gradcheck_scopes().end(), scope) != gradcheck_scopes().end())
    scopes = {scope};
  else
    throw ConfigError("unknown gradcheck scope '" + scope + "' (valid: all, graph, sg, bn, cbr, losses, model)");

  std::vector<ScopedReport> out;
  for (const auto& s : scopes) {
    std::mt19937_64 rng(seed);
    detail::ScopeFixture fx;
    if (s == "graph") detail::build_graph_scope(fx, rng);
    if (s == "sg") detail::build_sg_scope(fx, rng);
    if (s == "bn") detail::build_bn_scope(fx, rng);
    if (s == "cbr") detail::build_cbr_scope(fx, rng);
    if (s == "losses") detail::build_loss_scope(fx, rng);
    if (s == "model") detail::build_model_scope(fx, rng);
    for (auto& c : fx.checks)
      out.push_back({s, c.name, gradcheck(c.program, std::span<Parameter<double>* const>(c.params), eps, tol)});
  }
  return out;
}

}  // namespace hpgn
