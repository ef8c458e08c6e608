#pragma once

// Spatial grid graph over the locations of a feature map.
//
// Nodes are the h*w locations in row-major order (node (r, c) has index
// r*width + c). Edges join 4-connected neighbours, clipped at the border
// (no padding). Every outgoing edge of node i carries weight 1/|N_i|, so the
// implied matrix S is row-stochastic except for the isolated 1x1 grid. The
// same graph serves every channel.

#include <cstdint>
#include <cstdio>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hpgn/errors.hpp"
#include "hpgn/tensor.hpp"

namespace hpgn {

class GridGraph {
 public:
  GridGraph(std::size_t height, std::size_t width) : height_(height), width_(width) {
    if (height == 0 || width == 0) throw InvalidArgument("grid dimensions must be positive");
    const std::size_t d = height * width;
    offsets_.reserve(d + 1);
    offsets_.push_back(0);
    weights_.reserve(d);
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t c = 0; c < width; ++c) {
        // Ascending index order: up, left, right, down.
        if (r > 0) adjacency_.push_back(index(r - 1, c));
        if (c > 0) adjacency_.push_back(index(r, c - 1));
        if (c + 1 < width) adjacency_.push_back(index(r, c + 1));
        if (r + 1 < height) adjacency_.push_back(index(r + 1, c));
        const std::size_t degree = adjacency_.size() - offsets_.back();
        offsets_.push_back(adjacency_.size());
        weights_.push_back(degree ? 1.0 / static_cast<double>(degree) : 0.0);
      }
    }
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t nodes() const { return height_ * width_; }
  std::size_t index(std::size_t r, std::size_t c) const { return r * width_ + c; }

  std::span<const std::size_t> neighbors(std::size_t i) const {
    return {adjacency_.data() + offsets_[i], offsets_[i + 1] - offsets_[i]};
  }
  std::size_t degree(std::size_t i) const { return offsets_[i + 1] - offsets_[i]; }
  // Weight of every edge leaving node i: 1/|N_i|, or 0 for an isolated node.
  double weight(std::size_t i) const { return weights_[i]; }
  std::size_t edges() const { return adjacency_.size(); }

  bool operator==(const GridGraph& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }

 private:
  std::size_t height_;
  std::size_t width_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> adjacency_;
  std::vector<double> weights_;
};

// Signed entry point so callers parsing user input get a typed error for
// zero or negative sizes instead of a wrapped-around size_t.
inline GridGraph build_grid_graph(std::int64_t height, std::int64_t width) {
  if (height < 1 || width < 1)
    throw InvalidArgument("grid dimensions must be >= 1, got " + std::to_string(height) + "x" +
                          std::to_string(width));
  return GridGraph(static_cast<std::size_t>(height), static_cast<std::size_t>(width));
}

struct GraphTriplet {
  std::size_t i;
  std::size_t j;
  double weight;
  bool operator==(const GraphTriplet&) const = default;
};

// Nonzeros of S sorted by (i, j).
inline std::vector<GraphTriplet> serialize_graph(const GridGraph& graph) {
  std::vector<GraphTriplet> out;
  out.reserve(graph.edges());
  for (std::size_t i = 0; i < graph.nodes(); ++i)
    for (std::size_t j : graph.neighbors(i)) out.push_back({i, j, graph.weight(i)});
  return out;
}

inline void write_graph_dump(std::ostream& os, const GridGraph& graph) {
  os << graph.height() << ' ' << graph.width() << '\n';
  char buf[64];
  for (const auto& t : serialize_graph(graph)) {
    std::snprintf(buf, sizeof buf, "%.17g", t.weight);
    os << t.i << ' ' << t.j << ' ' << buf << '\n';
  }
}

// Parses a dump and checks that its triplets are exactly those of the grid
// named in its header.
inline GridGraph read_graph_dump(std::istream& is) {
  std::int64_t h = 0, w = 0;
  if (!(is >> h >> w)) throw FormatError("graph dump: missing 'h w' header");
  GridGraph graph = build_grid_graph(h, w);
  std::vector<GraphTriplet> triplets;
  GraphTriplet t{};
  while (is >> t.i >> t.j >> t.weight) triplets.push_back(t);
  if (!is.eof()) throw FormatError("graph dump: malformed triplet line");
  if (triplets != serialize_graph(graph))
    throw FormatError("graph dump: triplets do not match a " + std::to_string(h) + "x" +
                      std::to_string(w) + " grid");
  return graph;
}

// A = (I + S) V for a single channel plane of length d. With
// include_neighbors == false the S term is dropped (A = V).
template <class T>
void aggregate_plane(const GridGraph& graph, const T* in, T* out, bool include_neighbors = true) {
  const std::size_t d = graph.nodes();
  for (std::size_t i = 0; i < d; ++i) {
    T acc = in[i];
    if (include_neighbors) {
      T nb = T(0);
      for (std::size_t j : graph.neighbors(i)) nb += in[j];
      acc += static_cast<T>(graph.weight(i)) * nb;
    }
    out[i] = acc;
  }
}

// Adjoint of aggregate_plane: grad_in += (I + S)^T grad_out.
template <class T>
void aggregate_plane_adjoint(const GridGraph& graph, const T* grad_out, T* grad_in,
                             bool include_neighbors = true) {
  const std::size_t d = graph.nodes();
  for (std::size_t i = 0; i < d; ++i) {
    grad_in[i] += grad_out[i];
    if (include_neighbors) {
      const T g = static_cast<T>(graph.weight(i)) * grad_out[i];
      for (std::size_t j : graph.neighbors(i)) grad_in[j] += g;
    }
  }
}

// Matrix form: V is d x c (node-major), returns (I + S) V.
template <class T>
Tensor<T> aggregate(const GridGraph& graph, const Tensor<T>& v) {
  if (v.rank() != 2 || v.dim(0) != graph.nodes())
    throw ShapeError("aggregate: expected " + std::to_string(graph.nodes()) + " x c matrix, got " +
                     shape_str(v.shape()));
  const std::size_t d = v.dim(0), c = v.dim(1);
  Tensor<T> out(v.shape());
  for (std::size_t i = 0; i < d; ++i) {
    const double w = graph.weight(i);
    for (std::size_t k = 0; k < c; ++k) {
      T nb = T(0);
      for (std::size_t j : graph.neighbors(i)) nb += v[j * c + k];
      out[i * c + k] = v[i * c + k] + static_cast<T>(w) * nb;
    }
  }
  return out;
}

}  // namespace hpgn
