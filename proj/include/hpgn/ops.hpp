#pragma once

// Differentiable primitives. Each function computes its forward value and
// records the adjoint on the input's tape. Image-like tensors are NCHW;
// feature vectors are [batch, dim].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hpgn/errors.hpp"
#include "hpgn/grid_graph.hpp"
#include "hpgn/parallel.hpp"
#include "hpgn/tape.hpp"
#include "hpgn/tensor.hpp"

namespace hpgn {

namespace detail {

// C[MxN] += A[MxK] * B[KxN]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    for (std::size_t p = 0; p < K; ++p) {
      const T a = A[i * K + p];
      const T* b = B + p * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C[MxN] += A[MxK] * B[NxK]^T
template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T acc = T(0);
      for (std::size_t p = 0; p < K; ++p) acc += a[p] * b[p];
      C[i * N + j] += acc;
    }
  }
}

// C[MxN] += A[KxM]^T * B[KxN]
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t p = 0; p < K; ++p) {
    const T* b = B + p * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T a = A[p * M + i];
      T* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

struct ConvGeometry {
  std::size_t in_c, in_h, in_w, out_c, k, stride, pad, out_h, out_w;
  std::size_t col_rows() const { return in_c * k * k; }
  std::size_t col_cols() const { return out_h * out_w; }
};

template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.in_c; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * cols;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = x + (c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w))
                          ? T(0)
                          : src[static_cast<std::size_t>(iw)];
          }
        }
      }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* col, T* x) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.in_c; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * cols;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          T* dst = x + (c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.in_w))
              dst[static_cast<std::size_t>(iw)] += row[oh * g.out_w + ow];
          }
        }
      }
}

template <class T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape() != b.tape()) throw InvalidHandleError("operands live on different tapes");
}

// Product of all dimensions after the channel axis.
inline std::size_t spatial_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

template <class T>
void add_into(Tensor<T>* dst, const Tensor<T>& src, T factor = T(1)) {
  if (!dst) return;
  T* d = dst->raw();
  const T* s = src.raw();
  for (std::size_t i = 0, n = src.size(); i < n; ++i) d[i] += factor * s[i];
}

}  // namespace detail

namespace ops {

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  require_shape(b.shape(), a.shape(), "add");
  Tensor<T> out = a.value();
  detail::add_into(&out, b.value());
  return a.tape()->record(std::move(out), {a, b}, [a, b](const Tensor<T>& g, Tape<T>& t) {
    detail::add_into(t.grad(a), g);
    detail::add_into(t.grad(b), g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  require_shape(b.shape(), a.shape(), "sub");
  Tensor<T> out = a.value();
  detail::add_into(&out, b.value(), T(-1));
  return a.tape()->record(std::move(out), {a, b}, [a, b](const Tensor<T>& g, Tape<T>& t) {
    detail::add_into(t.grad(a), g);
    detail::add_into(t.grad(b), g, T(-1));
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  require_shape(b.shape(), a.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](const Tensor<T>& g, Tape<T>& t) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (auto* ga = t.grad(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    if (auto* gb = t.grad(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= s;
  return a.tape()->record(std::move(out), {a}, [a, s](const Tensor<T>& g, Tape<T>& t) {
    detail::add_into(t.grad(a), g, s);
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  T acc = T(0);
  for (T v : a.value().data()) acc += v;
  return a.tape()->record(Tensor<T>::scalar(acc), {a}, [a](const Tensor<T>& g, Tape<T>& t) {
    if (auto* ga = t.grad(a))
      for (auto& v : ga->storage()) v += g[0];
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(n));
}

// [m,k] x [k,n] -> [m,n]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  require_rank(a.shape(), 2, "matmul lhs");
  require_rank(b.shape(), 2, "matmul rhs");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor<T> out(Shape{m, n});
  detail::gemm_nn(m, n, k, a.value().raw(), b.value().raw(), out.raw());
  return a.tape()->record(std::move(out), {a, b}, [a, b, m, k, n](const Tensor<T>& g, Tape<T>& t) {
    if (auto* ga = t.grad(a)) detail::gemm_nt(m, k, n, g.raw(), t.value(b).raw(), ga->raw());
    if (auto* gb = t.grad(b)) detail::gemm_tn(k, n, m, t.value(a).raw(), g.raw(), gb->raw());
  });
}

template <class T>
Var<T> leaky_relu(Var<T> a, T slope) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = v > T(0) ? v : slope * v;
  return a.tape()->record(std::move(out), {a}, [a, slope](const Tensor<T>& g, Tape<T>& t) {
    auto* ga = t.grad(a);
    if (!ga) return;
    const auto& x = t.value(a);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += x[i] > T(0) ? g[i] : slope * g[i];
  });
}

template <class T>
Var<T> relu(Var<T> a) {
  return leaky_relu(a, T(0));
}

// x [N,C,H,W], w [O,C,k,k] -> [N,O,OH,OW]; symmetric zero padding `pad`.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride, std::size_t pad) {
  detail::require_same_tape(x, w);
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws[1] != xs[1] || ws[2] != ws[3])
    throw ShapeError("conv2d: weight " + shape_str(ws) + " incompatible with input " +
                     shape_str(xs));
  if (stride == 0) throw InvalidArgument("conv2d: stride must be positive");
  const std::size_t k = ws[2];
  if (xs[2] + 2 * pad < k || xs[3] + 2 * pad < k)
    throw ShapeError("conv2d: kernel larger than padded input");
  detail::ConvGeometry geo{xs[1], xs[2], xs[3], ws[0], k, stride, pad,
                           (xs[2] + 2 * pad - k) / stride + 1, (xs[3] + 2 * pad - k) / stride + 1};
  const std::size_t batch = xs[0];
  Tensor<T> out(Shape{batch, geo.out_c, geo.out_h, geo.out_w});
  const std::size_t in_stride = geo.in_c * geo.in_h * geo.in_w;
  const std::size_t out_stride = geo.out_c * geo.col_cols();
  {
    const T* xd = x.value().raw();
    const T* wd = w.value().raw();
    T* od = out.raw();
    parallel_chunks(batch, [&](std::size_t, std::size_t b0, std::size_t b1) {
      std::vector<T> col(geo.col_rows() * geo.col_cols());
      for (std::size_t n = b0; n < b1; ++n) {
        detail::im2col(geo, xd + n * in_stride, col.data());
        detail::gemm_nn(geo.out_c, geo.col_cols(), geo.col_rows(), wd, col.data(),
                        od + n * out_stride);
      }
    });
  }
  return x.tape()->record(
      std::move(out), {x, w},
      [x, w, geo, batch, in_stride, out_stride](const Tensor<T>& g, Tape<T>& t) {
        Tensor<T>* gx = t.grad(x);
        Tensor<T>* gw = t.grad(w);
        const T* xd = t.value(x).raw();
        const T* wd = t.value(w).raw();
        const std::size_t workers = chunk_workers(batch);
        std::vector<std::vector<T>> gw_part(gw ? workers : 0);
        parallel_chunks(batch, [&](std::size_t worker, std::size_t b0, std::size_t b1) {
          std::vector<T> col(geo.col_rows() * geo.col_cols());
          std::vector<T> dcol(gx ? col.size() : 0);
          T* gw_dst = nullptr;
          if (gw) {
            if (worker == 0) {
              gw_dst = gw->raw();
            } else {
              gw_part[worker].assign(gw->size(), T(0));
              gw_dst = gw_part[worker].data();
            }
          }
          for (std::size_t n = b0; n < b1; ++n) {
            const T* gout = g.raw() + n * out_stride;
            if (gw) {
              detail::im2col(geo, xd + n * in_stride, col.data());
              detail::gemm_nt(geo.out_c, geo.col_rows(), geo.col_cols(), gout, col.data(), gw_dst);
            }
            if (gx) {
              std::fill(dcol.begin(), dcol.end(), T(0));
              detail::gemm_tn(geo.col_rows(), geo.col_cols(), geo.out_c, wd, gout, dcol.data());
              detail::col2im_add(geo, dcol.data(), gx->raw() + n * in_stride);
            }
          }
        });
        if (gw)
          for (std::size_t w_i = 1; w_i < gw_part.size(); ++w_i)
            for (std::size_t i = 0; i < gw->size(); ++i) (*gw)[i] += gw_part[w_i][i];
      });
}

// Non-overlapping average pooling: window k, stride k, no padding.
template <class T>
Var<T> avg_pool2d(Var<T> x, std::size_t k) {
  require_rank(x.shape(), 4, "avg_pool2d");
  const auto& s = x.shape();
  if (k == 0 || s[2] % k != 0 || s[3] % k != 0)
    throw InvalidArgument("avg_pool2d: window " + std::to_string(k) +
                          " does not tile a " + std::to_string(s[2]) + "x" +
                          std::to_string(s[3]) + " map");
  if (k == 1) return x;
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / k, ow = w / k;
  const T inv = T(1) / static_cast<T>(k * k);
  Tensor<T> out(Shape{s[0], s[1], oh, ow});
  const T* xd = x.value().raw();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out[(p * oh + i / k) * ow + j / k] += xd[(p * h + i) * w + j];
  for (auto& v : out.storage()) v *= inv;
  return x.tape()->record(std::move(out), {x}, [x, planes, h, w, k, oh, ow, inv](
                                                   const Tensor<T>& g, Tape<T>& t) {
    auto* gx = t.grad(x);
    if (!gx) return;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
          (*gx)[(p * h + i) * w + j] += inv * g[(p * oh + i / k) * ow + j / k];
  });
}

// [N,C,H,W] -> [N,C]
template <class T>
Var<T> global_avg_pool(Var<T> x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const auto& s = x.shape();
  const std::size_t planes = s[0] * s[1], d = s[2] * s[3];
  const T inv = T(1) / static_cast<T>(d);
  Tensor<T> out(Shape{s[0], s[1]});
  const T* xd = x.value().raw();
  for (std::size_t p = 0; p < planes; ++p) {
    T acc = T(0);
    for (std::size_t i = 0; i < d; ++i) acc += xd[p * d + i];
    out[p] = acc * inv;
  }
  return x.tape()->record(std::move(out), {x}, [x, planes, d, inv](const Tensor<T>& g, Tape<T>& t) {
    auto* gx = t.grad(x);
    if (!gx) return;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < d; ++i) (*gx)[p * d + i] += inv * g[p];
  });
}

// [N,C,H,W] -> [N,C]; ties resolve to the first location.
template <class T>
Var<T> global_max_pool(Var<T> x) {
  require_rank(x.shape(), 4, "global_max_pool");
  const auto& s = x.shape();
  const std::size_t planes = s[0] * s[1], d = s[2] * s[3];
  Tensor<T> out(Shape{s[0], s[1]});
  auto argmax = std::make_shared<std::vector<std::size_t>>(planes);
  const T* xd = x.value().raw();
  for (std::size_t p = 0; p < planes; ++p) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < d; ++i)
      if (xd[p * d + i] > xd[p * d + best]) best = i;
    (*argmax)[p] = best;
    out[p] = xd[p * d + best];
  }
  return x.tape()->record(std::move(out), {x}, [x, planes, d, argmax](const Tensor<T>& g, Tape<T>& t) {
    auto* gx = t.grad(x);
    if (!gx) return;
    for (std::size_t p = 0; p < planes; ++p) (*gx)[p * d + (*argmax)[p]] += g[p];
  });
}

// (I + S) applied to every [h,w] plane of x [N,C,h,w]. With
// include_neighbors == false only the identity term remains.
template <class T>
Var<T> graph_aggregate(Var<T> x, const GridGraph& graph, bool include_neighbors = true) {
  require_rank(x.shape(), 4, "graph_aggregate");
  const auto& s = x.shape();
  if (s[2] != graph.height() || s[3] != graph.width())
    throw ShapeError("graph_aggregate: map " + shape_str(s) + " does not match " +
                     std::to_string(graph.height()) + "x" + std::to_string(graph.width()) +
                     " graph");
  const std::size_t planes = s[0] * s[1], d = graph.nodes();
  Tensor<T> out(s);
  const T* xd = x.value().raw();
  for (std::size_t p = 0; p < planes; ++p)
    aggregate_plane(graph, xd + p * d, out.raw() + p * d, include_neighbors);
  auto g_ptr = std::make_shared<GridGraph>(graph);
  return x.tape()->record(std::move(out), {x}, [x, g_ptr, planes, d, include_neighbors](
                                                   const Tensor<T>& g, Tape<T>& t) {
    auto* gx = t.grad(x);
    if (!gx) return;
    for (std::size_t p = 0; p < planes; ++p)
      aggregate_plane_adjoint(*g_ptr, g.raw() + p * d, gx->raw() + p * d, include_neighbors);
  });
}

// Per-location, per-channel re-weighting: out[n,c,i] = x[n,c,i] * theta[i,c],
// theta laid out node-major as d x C.
template <class T>
Var<T> reweight(Var<T> x, Var<T> theta) {
  detail::require_same_tape(x, theta);
  require_rank(x.shape(), 4, "reweight input");
  const auto& s = x.shape();
  const std::size_t n_b = s[0], c = s[1], d = s[2] * s[3];
  require_shape(theta.shape(), Shape{d, c}, "reweight theta");
  Tensor<T> out(s);
  const T* xd = x.value().raw();
  const T* th = theta.value().raw();
  for (std::size_t n = 0; n < n_b; ++n)
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t base = (n * c + k) * d;
      for (std::size_t i = 0; i < d; ++i) out[base + i] = xd[base + i] * th[i * c + k];
    }
  return x.tape()->record(std::move(out), {x, theta}, [x, theta, n_b, c, d](const Tensor<T>& g,
                                                                           Tape<T>& t) {
    const T* xd = t.value(x).raw();
    const T* th = t.value(theta).raw();
    auto* gx = t.grad(x);
    auto* gt = t.grad(theta);
    for (std::size_t n = 0; n < n_b; ++n)
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t base = (n * c + k) * d;
        for (std::size_t i = 0; i < d; ++i) {
          if (gx) (*gx)[base + i] += g[base + i] * th[i * c + k];
          if (gt) (*gt)[i * c + k] += g[base + i] * xd[base + i];
        }
      }
  });
}

// Batch statistics computed by a training-mode batch_norm call.
template <class T>
struct BatchStats {
  std::vector<T> mean;
  std::vector<T> var;  // biased
  std::size_t count = 0;
};

// Per-channel normalisation of x ([N,C] or [N,C,...]) over the batch and
// every trailing axis. Training mode normalises with batch statistics (and
// reports them through `stats`); inference mode uses the supplied running
// statistics.
template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, const Tensor<T>& running_mean,
                  const Tensor<T>& running_var, bool training, T eps,
                  BatchStats<T>* stats = nullptr) {
  detail::require_same_tape(x, gamma);
  detail::require_same_tape(x, beta);
  const auto& s = x.shape();
  if (s.size() < 2) throw ShapeError("batch_norm: input needs a channel axis, got " + shape_str(s));
  const std::size_t nb = s[0], c = s[1], sp = detail::spatial_size(s), m = nb * sp;
  require_shape(gamma.shape(), Shape{c}, "batch_norm gamma");
  require_shape(beta.shape(), Shape{c}, "batch_norm beta");
  const T* xd = x.value().raw();
  auto mean = std::make_shared<std::vector<T>>(c);
  auto inv_std = std::make_shared<std::vector<T>>(c);
  std::vector<T> var(c);
  if (training) {
    if (m == 0) throw ShapeError("batch_norm: empty batch");
    for (std::size_t k = 0; k < c; ++k) {
      T acc = T(0);
      for (std::size_t n = 0; n < nb; ++n)
        for (std::size_t i = 0; i < sp; ++i) acc += xd[(n * c + k) * sp + i];
      const T mu = acc / static_cast<T>(m);
      T sq = T(0);
      for (std::size_t n = 0; n < nb; ++n)
        for (std::size_t i = 0; i < sp; ++i) {
          const T dv = xd[(n * c + k) * sp + i] - mu;
          sq += dv * dv;
        }
      (*mean)[k] = mu;
      var[k] = sq / static_cast<T>(m);
    }
    if (stats) {
      stats->mean = *mean;
      stats->var = var;
      stats->count = m;
    }
  } else {
    require_shape(running_mean.shape(), Shape{c}, "batch_norm running mean");
    require_shape(running_var.shape(), Shape{c}, "batch_norm running var");
    for (std::size_t k = 0; k < c; ++k) {
      (*mean)[k] = running_mean[k];
      var[k] = running_var[k];
    }
  }
  for (std::size_t k = 0; k < c; ++k) (*inv_std)[k] = T(1) / std::sqrt(var[k] + eps);

  const T* gm = gamma.value().raw();
  const T* bt = beta.value().raw();
  Tensor<T> out(s);
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < sp; ++i) {
        const std::size_t idx = (n * c + k) * sp + i;
        out[idx] = gm[k] * (xd[idx] - (*mean)[k]) * (*inv_std)[k] + bt[k];
      }
  return x.tape()->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, nb, c, sp, m, mean, inv_std, training](const Tensor<T>& g, Tape<T>& t) {
        const T* xd = t.value(x).raw();
        const T* gm = t.value(gamma).raw();
        auto* gx = t.grad(x);
        auto* gg = t.grad(gamma);
        auto* gb = t.grad(beta);
        for (std::size_t k = 0; k < c; ++k) {
          const T mu = (*mean)[k], is = (*inv_std)[k];
          T sum_g = T(0), sum_gx = T(0);
          for (std::size_t n = 0; n < nb; ++n)
            for (std::size_t i = 0; i < sp; ++i) {
              const std::size_t idx = (n * c + k) * sp + i;
              sum_g += g[idx];
              sum_gx += g[idx] * (xd[idx] - mu) * is;
            }
          if (gg) (*gg)[k] += sum_gx;
          if (gb) (*gb)[k] += sum_g;
          if (!gx) continue;
          if (training) {
            const T scale = gm[k] * is / static_cast<T>(m);
            for (std::size_t n = 0; n < nb; ++n)
              for (std::size_t i = 0; i < sp; ++i) {
                const std::size_t idx = (n * c + k) * sp + i;
                const T xhat = (xd[idx] - mu) * is;
                (*gx)[idx] += scale * (static_cast<T>(m) * g[idx] - sum_g - xhat * sum_gx);
              }
          } else {
            for (std::size_t n = 0; n < nb; ++n)
              for (std::size_t i = 0; i < sp; ++i) {
                const std::size_t idx = (n * c + k) * sp + i;
                (*gx)[idx] += gm[k] * is * g[idx];
              }
          }
        }
      });
}

// [b,m] ++ [b,n] -> [b,m+n]
template <class T>
Var<T> concat_features(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  require_rank(a.shape(), 2, "concat lhs");
  require_rank(b.shape(), 2, "concat rhs");
  const std::size_t rows = a.shape()[0], m = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != rows) throw ShapeError("concat: batch sizes differ");
  Tensor<T> out(Shape{rows, m + n});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().raw() + r * m, m, out.raw() + r * (m + n));
    std::copy_n(b.value().raw() + r * n, n, out.raw() + r * (m + n) + m);
  }
  return a.tape()->record(std::move(out), {a, b}, [a, b, rows, m, n](const Tensor<T>& g, Tape<T>& t) {
    auto* ga = t.grad(a);
    auto* gb = t.grad(b);
    for (std::size_t r = 0; r < rows; ++r) {
      if (ga)
        for (std::size_t j = 0; j < m; ++j) (*ga)[r * m + j] += g[r * (m + n) + j];
      if (gb)
        for (std::size_t j = 0; j < n; ++j) (*gb)[r * n + j] += g[r * (m + n) + m + j];
    }
  });
}

// Euclidean distance between every pair of rows: [b,dim] -> [b,b]. The
// gradient of a zero distance is taken as zero.
template <class T>
Var<T> pairwise_distance(Var<T> x) {
  require_rank(x.shape(), 2, "pairwise_distance");
  const std::size_t b = x.shape()[0], dim = x.shape()[1];
  const T* xd = x.value().raw();
  auto dist = std::make_shared<Tensor<T>>(Shape{b, b});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = i + 1; j < b; ++j) {
      T acc = T(0);
      for (std::size_t k = 0; k < dim; ++k) {
        const T dv = xd[i * dim + k] - xd[j * dim + k];
        acc += dv * dv;
      }
      (*dist)[i * b + j] = (*dist)[j * b + i] = std::sqrt(acc);
    }
  Tensor<T> out = *dist;
  return x.tape()->record(std::move(out), {x}, [x, b, dim, dist](const Tensor<T>& g, Tape<T>& t) {
    auto* gx = t.grad(x);
    if (!gx) return;
    const T* xd = t.value(x).raw();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j) {
        const T dij = (*dist)[i * b + j];
        if (i == j || dij <= T(0)) continue;
        // Both D_ij and D_ji depend on the pair; each entry is handled once.
        const T coef = g[i * b + j] / dij;
        if (coef == T(0)) continue;
        for (std::size_t k = 0; k < dim; ++k) {
          const T dv = coef * (xd[i * dim + k] - xd[j * dim + k]);
          (*gx)[i * dim + k] += dv;
          (*gx)[j * dim + k] -= dv;
        }
      }
  });
}

// Hardest positive and negative of one anchor inside a distance matrix.
struct HardPair {
  std::size_t anchor;
  std::size_t positive;
  std::size_t negative;
};

// Batch-hard mining over a [b,b] distance matrix: per anchor, the farthest
// same-label sample (self excluded) and the nearest different-label sample.
// Ties resolve to the lowest index. Anchors without a positive or a negative
// are omitted.
template <class T>
std::vector<HardPair> mine_hard_pairs(const Tensor<T>& dist, std::span<const std::size_t> labels) {
  const std::size_t b = labels.size();
  std::vector<HardPair> out;
  for (std::size_t a = 0; a < b; ++a) {
    std::size_t pos = b, neg = b;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == a) continue;
      const T dj = dist[a * b + j];
      if (labels[j] == labels[a]) {
        if (pos == b || dj > dist[a * b + pos]) pos = j;
      } else if (neg == b || dj < dist[a * b + neg]) {
        neg = j;
      }
    }
    if (pos != b && neg != b) out.push_back({a, pos, neg});
  }
  return out;
}

// mean over mined anchors of max(D[a,p] - D[a,n] + margin, 0).
template <class T>
Var<T> batch_hard_hinge(Var<T> dist, std::span<const std::size_t> labels, T margin) {
  require_rank(dist.shape(), 2, "batch_hard_hinge");
  const std::size_t b = labels.size();
  require_shape(dist.shape(), Shape{b, b}, "batch_hard_hinge distances");
  auto pairs = std::make_shared<std::vector<HardPair>>(mine_hard_pairs(dist.value(), labels));
  if (pairs->empty()) throw BatchCompositionError("batch_hard_hinge: no anchor has both a positive and a negative");
  const auto& d = dist.value();
  auto active = std::make_shared<std::vector<bool>>(pairs->size());
  T acc = T(0);
  for (std::size_t q = 0; q < pairs->size(); ++q) {
    const auto& p = (*pairs)[q];
    const T h = d[p.anchor * b + p.positive] - d[p.anchor * b + p.negative] + margin;
    (*active)[q] = h > T(0);
    if (h > T(0)) acc += h;
  }
  const T inv = T(1) / static_cast<T>(pairs->size());
  return dist.tape()->record(Tensor<T>::scalar(acc * inv), {dist},
                             [dist, pairs, active, b, inv](const Tensor<T>& g, Tape<T>& t) {
                               auto* gd = t.grad(dist);
                               if (!gd) return;
                               for (std::size_t q = 0; q < pairs->size(); ++q) {
                                 if (!(*active)[q]) continue;
                                 const auto& p = (*pairs)[q];
                                 (*gd)[p.anchor * b + p.positive] += g[0] * inv;
                                 (*gd)[p.anchor * b + p.negative] -= g[0] * inv;
                               }
                             });
}

// Softmax cross-entropy against an explicit target distribution per row:
// -(1/b) sum_i sum_j target[i,j] * log softmax(logits_i)_j, evaluated with
// log-sum-exp.
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, const Tensor<T>& targets) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy");
  require_shape(targets.shape(), logits.shape(), "softmax_cross_entropy targets");
  const std::size_t b = logits.shape()[0], k = logits.shape()[1];
  if (b == 0 || k == 0) throw ShapeError("softmax_cross_entropy: empty logits");
  const T* z = logits.value().raw();
  auto probs = std::make_shared<Tensor<T>>(logits.shape());
  T total = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    const T* zi = z + i * k;
    const T mx = *std::max_element(zi, zi + k);
    T se = T(0);
    for (std::size_t j = 0; j < k; ++j) se += std::exp(zi[j] - mx);
    const T lse = mx + std::log(se);
    for (std::size_t j = 0; j < k; ++j) {
      (*probs)[i * k + j] = std::exp(zi[j] - lse);
      total += targets[i * k + j] * (lse - zi[j]);
    }
  }
  const T inv = T(1) / static_cast<T>(b);
  auto tgt = std::make_shared<Tensor<T>>(targets);
  return logits.tape()->record(Tensor<T>::scalar(total * inv), {logits},
                               [logits, probs, tgt, b, k, inv](const Tensor<T>& g, Tape<T>& t) {
                                 auto* gz = t.grad(logits);
                                 if (!gz) return;
                                 for (std::size_t i = 0; i < b; ++i) {
                                   T tsum = T(0);
                                   for (std::size_t j = 0; j < k; ++j) tsum += (*tgt)[i * k + j];
                                   for (std::size_t j = 0; j < k; ++j)
                                     (*gz)[i * k + j] += g[0] * inv *
                                                         (tsum * (*probs)[i * k + j] - (*tgt)[i * k + j]);
                                 }
                               });
}

}  // namespace ops
}  // namespace hpgn
