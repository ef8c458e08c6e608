#pragma once

// Backbone + pyramidal graph network, its ablation variants, feature
// extraction and Theta significance export.
//
// For a 2^n x 2^n base map the pyramid has n SGN branches (average-pool
// windows 2^0 .. 2^(n-1)) plus one global-max branch. Scales are named from
// the full map down: S1 is the window-1 branch, S_n the smallest SGN map and
// S_(n+1) the global max pool. The hpgnK variants keep the GMP branch and the
// K smallest SGN maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hpgn/errors.hpp"
#include "hpgn/forward_output.hpp"
#include "hpgn/grid_graph.hpp"
#include "hpgn/layers.hpp"
#include "hpgn/losses.hpp"

namespace hpgn {

enum class Variant { hpgn, baseline, hpgn_ng, hpgn_oi, hpgn1, hpgn2, hpgn3 };

inline const std::vector<std::pair<Variant, std::string>>& variant_names() {
  static const std::vector<std::pair<Variant, std::string>> names = {
      {Variant::hpgn, "hpgn"},     {Variant::baseline, "baseline"}, {Variant::hpgn_ng, "hpgn-ng"},
      {Variant::hpgn_oi, "hpgn-oi"}, {Variant::hpgn1, "hpgn1"},     {Variant::hpgn2, "hpgn2"},
      {Variant::hpgn3, "hpgn3"}};
  return names;
}

inline std::string to_string(Variant v) {
  for (const auto& [value, name] : variant_names())
    if (value == v) return name;
  return "unknown";
}

inline std::string valid_variant_list() {
  std::string out;
  for (const auto& [value, name] : variant_names()) out += (out.empty() ? "" : ", ") + name;
  return out;
}

inline Variant parse_variant(const std::string& name) {
  for (const auto& [value, n] : variant_names())
    if (n == name) return value;
  throw ConfigError("unknown variant '" + name + "' (valid: " + valid_variant_list() + ")");
}

struct ModelConfig {
  std::size_t input_size = 32;
  std::vector<std::size_t> channels{16, 32, 64};  // one backbone stage per entry
  std::vector<std::size_t> kernels;               // per stage; empty means all 3x3
  bool last_stride_one = true;
  std::size_t sgn_depth = 3;
  std::size_t embed_dim = 256;
  std::size_t num_classes = 2;
  Variant variant = Variant::hpgn;
  std::vector<std::size_t> scales;  // explicit SGN window list; overrides the variant's subset

  std::size_t stage_kernel(std::size_t i) const { return kernels.empty() ? 3 : kernels.at(i); }
  std::size_t stage_stride(std::size_t i) const {
    return (i + 1 == channels.size() && last_stride_one) ? 1 : 2;
  }
  std::size_t base_channels() const { return channels.empty() ? 3 : channels.back(); }

  std::size_t base_size() const {
    std::size_t s = input_size;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (stage_stride(i) == 2) {
        if (s % 2 != 0)
          throw ConfigError("input size " + std::to_string(input_size) +
                            " does not halve evenly through the backbone");
        s /= 2;
      }
    }
    return s;
  }

  // log2 of the base map side.
  std::size_t pyramid_levels() const {
    const std::size_t s = base_size();
    std::size_t n = 0;
    while ((std::size_t{1} << n) < s) ++n;
    return n;
  }

  bool has_sgn() const { return variant != Variant::baseline && variant != Variant::hpgn_ng; }
  bool has_pyramid() const { return variant != Variant::baseline; }

  // Average-pool windows of the enabled branches, full map first.
  std::vector<std::size_t> enabled_windows() const {
    validate_shape();
    const std::size_t n = pyramid_levels();
    if (variant == Variant::baseline) return {};
    if (!scales.empty()) {
      std::vector<std::size_t> w = scales;
      std::sort(w.begin(), w.end());
      if (std::adjacent_find(w.begin(), w.end()) != w.end())
        throw ConfigError("duplicate pyramid window in scale set");
      for (auto k : w)
        if (k == 0 || (k & (k - 1)) != 0 || k >= (std::size_t{1} << n))
          throw ConfigError("scale window " + std::to_string(k) +
                            " is not part of the generated pyramid");
      return w;
    }
    std::size_t keep = n;
    if (variant == Variant::hpgn1) keep = 1;
    if (variant == Variant::hpgn2) keep = 2;
    if (variant == Variant::hpgn3) keep = 3;
    if (keep > n)
      throw ConfigError("variant " + to_string(variant) + " needs " + std::to_string(keep) +
                        " SGN scales but the base map only provides " + std::to_string(n));
    std::vector<std::size_t> w;
    for (std::size_t j = n - keep; j < n; ++j) w.push_back(std::size_t{1} << j);
    return w;
  }

  void validate_shape() const {
    if (channels.empty()) throw ConfigError("backbone needs at least one stage");
    if (!kernels.empty() && kernels.size() != channels.size())
      throw ConfigError("kernel list length must match the channel plan");
    for (auto c : channels)
      if (c == 0) throw ConfigError("backbone channel counts must be positive");
    for (std::size_t i = 0; i < channels.size(); ++i)
      if (stage_kernel(i) == 0 || stage_kernel(i) % 2 == 0)
        throw ConfigError("backbone kernels must be odd");
    const std::size_t s = base_size();
    if (s == 0 || (s & (s - 1)) != 0)
      throw ConfigError("base map side " + std::to_string(s) + " is not a power of two");
  }

  void validate() const {
    validate_shape();
    if (embed_dim == 0) throw ConfigError("embedding dimension must be positive");
    if (num_classes < 2) throw ConfigError("need at least 2 classes");
    if (has_sgn() && sgn_depth == 0) throw ConfigError("SGN depth must be at least 1");
    if (has_pyramid() && enabled_windows().empty())
      throw ConfigError("variant " + to_string(variant) + " has no pyramid branch on a " +
                        std::to_string(base_size()) + "x" + std::to_string(base_size()) +
                        " base map");
  }
};

template <class T>
struct PyramidBranch {
  PyramidBranch(std::size_t window, std::size_t side, std::size_t channels, std::size_t depth,
                const std::string& name)
      : window(window), graph(side, side) {
    stack.reserve(depth);
    for (std::size_t l = 0; l < depth; ++l)
      stack.emplace_back(name + ".sg" + std::to_string(l), graph.nodes(), channels);
  }

  std::size_t window;
  GridGraph graph;
  std::vector<SGParams<T>> stack;  // empty for hpgn-ng
};

template <class T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    std::size_t in = 3;
    for (std::size_t i = 0; i < config_.channels.size(); ++i) {
      stages_.emplace_back("backbone.stage" + std::to_string(i), in, config_.channels[i],
                           config_.stage_kernel(i), config_.stage_stride(i));
      stages_.back().init(rng);
      in = config_.channels[i];
    }
    const std::size_t c0 = config_.base_channels(), side = config_.base_size();
    const std::size_t depth = config_.has_sgn() ? config_.sgn_depth : 0;
    for (std::size_t w : config_.enabled_windows())
      branches_.emplace_back(w, side / w, c0, depth, "pyramid.w" + std::to_string(w));
    if (config_.has_pyramid()) {
      cbr1_.emplace("cbr1", c0, config_.embed_dim);
      cbr1_->init(rng);
      head1_.emplace("head1", config_.embed_dim, config_.num_classes);
      head1_->init(rng);
    }
    cbr2_.emplace("cbr2", c0, config_.embed_dim);
    cbr2_->init(rng);
    head2_.emplace("head2", config_.embed_dim, config_.num_classes);
    head2_->init(rng);
  }

  const ModelConfig& config() const { return config_; }
  bool has_cbr1() const { return cbr1_.has_value(); }
  std::size_t feature_dim() const { return (has_cbr1() ? 2 : 1) * config_.embed_dim; }
  std::vector<PyramidBranch<T>>& branches() { return branches_; }
  const std::vector<PyramidBranch<T>>& branches() const { return branches_; }
  std::vector<ConvStage<T>>& stages() { return stages_; }
  CBRParams<T>* cbr1() { return cbr1_ ? &*cbr1_ : nullptr; }
  CBRParams<T>& cbr2() { return *cbr2_; }

  // images [b, 3, s, s]
  ForwardOutput<T> forward(Tape<T>& tape, const Tensor<T>& images, Mode mode) {
    const std::size_t s = config_.input_size;
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s)
      throw ShapeError("forward: expected images [b,3," + std::to_string(s) + "," +
                       std::to_string(s) + "], got " + shape_str(images.shape()));
    Var<T> x = tape.constant(images);
    for (auto& stage : stages_) x = stage(x, mode);
    ForwardOutput<T> out;
    const bool neighbors = config_.variant != Variant::hpgn_oi;
    std::optional<Var<T>> branch_sum;
    for (auto& br : branches_) {
      Var<T> p = scale_pool(x, br.window);
      if (!br.stack.empty()) p = sgn_forward(p, br.graph, std::span<SGParams<T>>(br.stack), mode, neighbors);
      Var<T> g = ops::global_avg_pool(p);
      out.branch_pooled.push_back(g);
      branch_sum = branch_sum ? ops::add(*branch_sum, g) : g;
    }
    if (cbr1_) {
      out.embed1 = cbr_forward(*branch_sum, *cbr1_, mode);
      out.logits1 = head1_->logits(*out.embed1);
    }
    out.max_pooled = ops::global_max_pool(x);
    out.embed2 = cbr_forward(out.max_pooled, *cbr2_, mode);
    out.logits2 = head2_->logits(out.embed2);
    return out;
  }

  // Learnable tensors in a fixed order with unique names.
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    auto bn = [&](BatchNorm<T>& b) {
      out.push_back(&b.gamma);
      out.push_back(&b.beta);
    };
    for (auto& st : stages_) {
      out.push_back(&st.weight);
      bn(st.bn);
    }
    for (auto& br : branches_)
      for (auto& sg : br.stack) {
        out.push_back(&sg.theta);
        bn(sg.bn);
      }
    if (cbr1_) {
      out.push_back(&cbr1_->weight);
      bn(cbr1_->bn);
      out.push_back(&head1_->weight);
    }
    out.push_back(&cbr2_->weight);
    bn(cbr2_->bn);
    out.push_back(&head2_->weight);
    return out;
  }

  // Running statistics of every batch norm, keyed by owner name.
  std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    auto bn = [&](BatchNorm<T>& b) {
      const std::string base = b.gamma.name.substr(0, b.gamma.name.size() - std::string(".gamma").size());
      out.emplace_back(base + ".running_mean", &b.running_mean);
      out.emplace_back(base + ".running_var", &b.running_var);
    };
    for (auto& st : stages_) bn(st.bn);
    for (auto& br : branches_)
      for (auto& sg : br.stack) bn(sg.bn);
    if (cbr1_) bn(cbr1_->bn);
    bn(cbr2_->bn);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

 private:
  ModelConfig config_;
  std::vector<ConvStage<T>> stages_;
  std::vector<PyramidBranch<T>> branches_;
  std::optional<CBRParams<T>> cbr1_, cbr2_;
  std::optional<ClassifierHead<T>> head1_, head2_;
};

// Retrieval features in inference mode: embed1 ++ embed2, or embed2 alone for
// the baseline. images [n, 3, s, s].
template <class T>
Tensor<T> extract_features(Model<T>& model, const Tensor<T>& images, std::size_t batch = 64) {
  if (images.rank() != 4) throw ShapeError("extract_features: expected [n,3,s,s] images");
  const std::size_t n = images.dim(0), per = images.size() / std::max<std::size_t>(n, 1);
  const std::size_t dim = model.feature_dim(), e = model.config().embed_dim;
  Tensor<T> out(Shape{n, dim});
  for (std::size_t b0 = 0; b0 < n; b0 += batch) {
    const std::size_t b1 = std::min(n, b0 + batch);
    Shape s = images.shape();
    s[0] = b1 - b0;
    std::vector<T> chunk(images.raw() + b0 * per, images.raw() + b1 * per);
    Tape<T> tape;
    auto fo = model.forward(tape, Tensor<T>(s, std::move(chunk)), Mode::infer);
    for (std::size_t i = 0; i < b1 - b0; ++i) {
      T* row = out.raw() + (b0 + i) * dim;
      std::size_t off = 0;
      if (fo.embed1) {
        std::copy_n(fo.embed1->value().raw() + i * e, e, row);
        off = e;
      }
      std::copy_n(fo.embed2.value().raw() + i * e, e, row + off);
    }
  }
  return out;
}

struct SignificanceMap {
  std::size_t window = 1;  // pyramid branch
  std::size_t layer = 0;   // SG index inside the stack
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major, in [0,1]
};

struct SignificanceExport {
  std::vector<SignificanceMap> maps;
  std::string warning;
};

// Per-location L2 norm of Theta across channels, min-max scaled to [0,1]. A
// constant map scales to all zeros.
template <class T>
SignificanceExport export_significance(const Model<T>& model) {
  SignificanceExport out;
  for (const auto& br : model.branches()) {
    for (std::size_t l = 0; l < br.stack.size(); ++l) {
      const auto& theta = br.stack[l].theta.value;
      const std::size_t d = theta.dim(0), c = theta.dim(1);
      SignificanceMap m{br.window, l, br.graph.height(), br.graph.width(), std::vector<double>(d)};
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0;
        for (std::size_t k = 0; k < c; ++k) acc += static_cast<double>(theta[i * c + k]) * theta[i * c + k];
        m.values[i] = std::sqrt(acc);
      }
      const auto [lo, hi] = std::minmax_element(m.values.begin(), m.values.end());
      const double mn = *lo, range = *hi - *lo;
      for (auto& v : m.values) v = range > 0 ? (v - mn) / range : 0.0;
      out.maps.push_back(std::move(m));
    }
  }
  if (out.maps.empty())
    out.warning = "variant " + to_string(model.config().variant) +
                  " has no spatial graph networks; nothing to export";
  return out;
}

inline void write_heatmap_text(std::ostream& os, const SignificanceMap& m) {
  os << m.height << ' ' << m.width << '\n';
  char buf[32];
  for (std::size_t r = 0; r < m.height; ++r) {
    for (std::size_t c = 0; c < m.width; ++c) {
      std::snprintf(buf, sizeof buf, "%.9g", m.values[r * m.width + c]);
      os << (c ? " " : "") << buf;
    }
    os << '\n';
  }
}

inline void write_heatmap_pgm(std::ostream& os, const SignificanceMap& m) {
  os << "P5\n" << m.width << ' ' << m.height << "\n255\n";
  for (double v : m.values) {
    const auto byte = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    os.put(static_cast<char>(byte));
  }
}

}  // namespace hpgn
