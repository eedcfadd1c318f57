#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "affectkit/errors.hpp"
#include "affectkit/graph.hpp"
#include "affectkit/random.hpp"
#include "affectkit/tensor.hpp"

namespace affectkit {

enum class Padding { same, valid };
enum class Activation { none, relu, tanh, sigmoid };
enum class Mode { train, eval };

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using VectorMap = Eigen::Map<Eigen::RowVectorXd>;
using ConstVectorMap = Eigen::Map<const Eigen::RowVectorXd>;

inline ConstMatrixMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MatrixMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatrixMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

/// Spatial tensors are [H,W,C] or [N,H,W,C]; both views normalize to N frames.
struct SpatialDims {
  std::size_t n, h, w, c;
  bool batched;
};

inline SpatialDims spatial_dims(const Tensor& t, const char* op) {
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), false};
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), true};
  throw ShapeError(std::string(op) + " expects [H,W,C] or [N,H,W,C], got " + to_string(t.shape()));
}

inline Shape spatial_shape(const SpatialDims& d, std::size_t h, std::size_t w, std::size_t c) {
  return d.batched ? Shape{d.n, h, w, c} : Shape{h, w, c};
}

/// Rows x features view of a rank-1 or rank-2 tensor.
struct RowDims {
  std::size_t rows, cols;
  bool batched;
};

inline RowDims row_dims(const Tensor& t, const char* op) {
  if (t.rank() == 1) return {1, t.dim(0), false};
  if (t.rank() == 2) return {t.dim(0), t.dim(1), true};
  throw ShapeError(std::string(op) + " expects [n] or [N,n], got " + to_string(t.shape()));
}

inline bool wants_backward(const Graph& g, std::initializer_list<NodeId> ids) {
  if (g.mode() != GradMode::enabled) return false;
  return std::any_of(ids.begin(), ids.end(), [&](NodeId id) { return g.requires_grad(id); });
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct ConvGeometry {
  SpatialDims in;
  std::size_t k, stride, pad, out_h, out_w, cout;
  std::size_t rows() const { return in.n * out_h * out_w; }
  std::size_t patch() const { return k * k * in.c; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

inline void im2col(const ConvGeometry& g, const double* src, double* cols) {
  const auto& d = g.in;
  std::size_t row = 0;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        double* dst = cols + row * g.patch();
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t kx = 0; kx < g.k; ++kx, dst += d.c) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(d.h) || ix >= static_cast<long>(d.w)) {
              std::fill(dst, dst + d.c, 0.0);
            } else {
              const double* px = src + ((n * d.h + static_cast<std::size_t>(iy)) * d.w + static_cast<std::size_t>(ix)) * d.c;
              std::copy(px, px + d.c, dst);
            }
          }
        }
      }
    }
  }
}

inline void col2im_add(const ConvGeometry& g, const double* cols, double* dst_grad) {
  const auto& d = g.in;
  std::size_t row = 0;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        const double* src = cols + row * g.patch();
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t kx = 0; kx < g.k; ++kx, src += d.c) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(d.h) || ix >= static_cast<long>(d.w)) continue;
            double* px = dst_grad + ((n * d.h + static_cast<std::size_t>(iy)) * d.w + static_cast<std::size_t>(ix)) * d.c;
            for (std::size_t c = 0; c < d.c; ++c) px[c] += src[c];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Output extent of a strided window: floor((extent - k + 2 pad) / stride) + 1.
inline std::size_t conv_output_extent(std::size_t extent, std::size_t k, std::size_t stride, Padding padding) {
  const std::size_t pad = padding == Padding::same ? k / 2 : 0;
  if (extent + 2 * pad < k) throw ShapeError("window " + std::to_string(k) + " exceeds extent " + std::to_string(extent));
  return (extent + 2 * pad - k) / stride + 1;
}

/**
 * 2-D cross-correlation (no kernel flip) of [H,W,Cin] or [N,H,W,Cin] frames
 * with kernels laid out [k,k,Cin,Cout]. `same` pads k/2 zeros per side.
 */
inline NodeId conv2d(Graph& g, NodeId input, NodeId kernels, std::size_t stride, Padding padding) {
  const Tensor& x = g.value(input);
  const Tensor& w = g.value(kernels);
  const auto dims = detail::spatial_dims(x, "conv2d");
  if (w.rank() != 4 || w.dim(0) != w.dim(1)) {
    throw ShapeError("conv2d kernels must be [k,k,Cin,Cout], got " + to_string(w.shape()));
  }
  if (w.dim(2) != dims.c) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(x.shape()) + " has Cin=" + std::to_string(dims.c) +
                     " but kernels " + to_string(w.shape()) + " expect Cin=" + std::to_string(w.dim(2)));
  }
  if (padding == Padding::same && w.dim(0) % 2 == 0) {
    throw ShapeError("conv2d with same padding needs an odd kernel, got " + std::to_string(w.dim(0)));
  }
  if (stride == 0) throw ArgumentError("conv2d stride must be positive");

  detail::ConvGeometry geo{dims, w.dim(0), stride, padding == Padding::same ? w.dim(0) / 2 : 0, 0, 0, w.dim(3)};
  if (padding == Padding::valid && (dims.h < geo.k || dims.w < geo.k)) {
    throw ShapeError("conv2d valid window " + std::to_string(geo.k) + " exceeds input " + to_string(x.shape()));
  }
  geo.out_h = conv_output_extent(dims.h, geo.k, stride, padding);
  geo.out_w = conv_output_extent(dims.w, geo.k, stride, padding);

  auto cols = std::make_shared<AlignedBuffer>();
  const double* cols_ptr = x.data();
  if (!geo.pointwise()) {
    cols->resize(geo.rows() * geo.patch());
    detail::im2col(geo, x.data(), cols->data());
    cols_ptr = cols->data();
  }
  Tensor out(detail::spatial_shape(dims, geo.out_h, geo.out_w, geo.cout));
  detail::as_matrix(out, geo.rows(), geo.cout).noalias() =
      detail::ConstMatrixMap(cols_ptr, static_cast<Eigen::Index>(geo.rows()), static_cast<Eigen::Index>(geo.patch())) *
      detail::as_matrix(w, geo.patch(), geo.cout);
  if (!detail::wants_backward(g, {input, kernels})) cols.reset();

  return g.record("conv2d", std::move(out), {input, kernels}, [geo, cols](const BackwardContext& ctx) {
    const auto dout = detail::as_matrix(ctx.grad_output(), geo.rows(), geo.cout);
    const double* cp = geo.pointwise() ? ctx.input(0).data() : cols->data();
    const detail::ConstMatrixMap colm(cp, static_cast<Eigen::Index>(geo.rows()), static_cast<Eigen::Index>(geo.patch()));
    if (Tensor* dw = ctx.input_grad(1)) {
      detail::as_matrix(*dw, geo.patch(), geo.cout).noalias() += colm.transpose() * dout;
    }
    if (Tensor* dx = ctx.input_grad(0)) {
      const auto wm = detail::as_matrix(ctx.input(1), geo.patch(), geo.cout);
      if (geo.pointwise()) {
        detail::as_matrix(*dx, geo.rows(), geo.patch()).noalias() += dout * wm.transpose();
      } else {
        detail::RowMatrix dcols = dout * wm.transpose();
        detail::col2im_add(geo, dcols.data(), dx->data());
      }
    }
  });
}

/// Adds a per-channel bias [C] along the last axis of any tensor.
inline NodeId add_bias(Graph& g, NodeId input, NodeId bias) {
  const Tensor& x = g.value(input);
  const Tensor& b = g.value(bias);
  if (b.rank() != 1 || x.rank() == 0 || x.shape().back() != b.dim(0)) {
    throw ShapeError("add_bias: bias " + to_string(b.shape()) + " does not match last axis of " + to_string(x.shape()));
  }
  const std::size_t c = b.dim(0);
  const std::size_t rows = x.size() / c;
  Tensor out = x;
  detail::as_matrix(out, rows, c).rowwise() += detail::ConstVectorMap(b.data(), static_cast<Eigen::Index>(c));
  return g.record("add_bias", std::move(out), {input, bias}, [rows, c](const BackwardContext& ctx) {
    if (Tensor* dx = ctx.input_grad(0)) *dx += ctx.grad_output();
    if (Tensor* db = ctx.input_grad(1)) {
      detail::VectorMap(db->data(), static_cast<Eigen::Index>(c)) +=
          detail::as_matrix(ctx.grad_output(), rows, c).colwise().sum();
    }
  });
}

/**
 * Max over k x k windows. Backward routes each output gradient to the first
 * (row-major) maximal input of its window.
 */
inline NodeId maxpool2d(Graph& g, NodeId input, std::size_t k, std::size_t stride) {
  const Tensor& x = g.value(input);
  const auto d = detail::spatial_dims(x, "maxpool2d");
  if (k == 0 || stride == 0) throw ArgumentError("maxpool2d window and stride must be positive");
  if (d.h < k || d.w < k) {
    throw ShapeError("maxpool2d window " + std::to_string(k) + " larger than input " + to_string(x.shape()));
  }
  const std::size_t oh = (d.h - k) / stride + 1;
  const std::size_t ow = (d.w - k) / stride + 1;
  Tensor out(detail::spatial_shape(d, oh, ow, d.c));
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t o = 0;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        for (std::size_t c = 0; c < d.c; ++c, ++o) {
          std::size_t best = ((n * d.h + oy * stride) * d.w + ox * stride) * d.c + c;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::size_t idx = ((n * d.h + oy * stride + ky) * d.w + ox * stride + kx) * d.c + c;
              if (x[idx] > x[best]) best = idx;
            }
          }
          out[o] = x[best];
          (*argmax)[o] = best;
        }
      }
    }
  }
  return g.record("maxpool2d", std::move(out), {input}, [argmax](const BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    const Tensor& dout = ctx.grad_output();
    for (std::size_t i = 0; i < dout.size(); ++i) (*dx)[(*argmax)[i]] += dout[i];
  });
}

/// Mean over the spatial axes: [N,H,W,C] -> [N,C], [H,W,C] -> [C].
inline NodeId global_avg_pool(Graph& g, NodeId input) {
  const Tensor& x = g.value(input);
  const auto d = detail::spatial_dims(x, "global_avg_pool");
  const std::size_t area = d.h * d.w;
  Tensor out(d.batched ? Shape{d.n, d.c} : Shape{d.c});
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t p = 0; p < area; ++p) {
      for (std::size_t c = 0; c < d.c; ++c) out[n * d.c + c] += x[(n * area + p) * d.c + c];
    }
  }
  for (double& v : out.values()) v /= static_cast<double>(area);
  return g.record("global_avg_pool", std::move(out), {input}, [d, area](const BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    const Tensor& dout = ctx.grad_output();
    const double scale = 1.0 / static_cast<double>(area);
    for (std::size_t n = 0; n < d.n; ++n) {
      for (std::size_t p = 0; p < area; ++p) {
        for (std::size_t c = 0; c < d.c; ++c) (*dx)[(n * area + p) * d.c + c] += dout[n * d.c + c] * scale;
      }
    }
  });
}

/// Affine map x W + b for x of shape [n] or [N,n], W [n,m], b [m].
inline NodeId dense(Graph& g, NodeId input, NodeId weights, NodeId bias) {
  const Tensor& x = g.value(input);
  const Tensor& w = g.value(weights);
  const Tensor& b = g.value(bias);
  const auto d = detail::row_dims(x, "dense");
  if (w.rank() != 2 || w.dim(0) != d.cols) {
    throw ShapeError("dense: input " + to_string(x.shape()) + " does not match weights " + to_string(w.shape()));
  }
  const std::size_t m = w.dim(1);
  if (b.rank() != 1 || b.dim(0) != m) {
    throw ShapeError("dense: bias " + to_string(b.shape()) + " does not match weights " + to_string(w.shape()));
  }
  Tensor out(d.batched ? Shape{d.rows, m} : Shape{m});
  auto om = detail::as_matrix(out, d.rows, m);
  om.noalias() = detail::as_matrix(x, d.rows, d.cols) * detail::as_matrix(w, d.cols, m);
  om.rowwise() += detail::ConstVectorMap(b.data(), static_cast<Eigen::Index>(m));
  return g.record("dense", std::move(out), {input, weights, bias}, [d, m](const BackwardContext& ctx) {
    const auto dout = detail::as_matrix(ctx.grad_output(), d.rows, m);
    if (Tensor* dx = ctx.input_grad(0)) {
      detail::as_matrix(*dx, d.rows, d.cols).noalias() += dout * detail::as_matrix(ctx.input(1), d.cols, m).transpose();
    }
    if (Tensor* dw = ctx.input_grad(1)) {
      detail::as_matrix(*dw, d.cols, m).noalias() += detail::as_matrix(ctx.input(0), d.rows, d.cols).transpose() * dout;
    }
    if (Tensor* db = ctx.input_grad(2)) {
      detail::VectorMap(db->data(), static_cast<Eigen::Index>(m)) += dout.colwise().sum();
    }
  });
}

/// Elementwise nonlinearity. relu'(0) is taken as 0.
inline NodeId activation(Graph& g, NodeId input, Activation kind) {
  if (kind == Activation::none) return input;
  Tensor out = g.value(input);
  for (double& v : out.values()) {
    switch (kind) {
      case Activation::relu: v = v > 0.0 ? v : 0.0; break;
      case Activation::tanh: v = std::tanh(v); break;
      case Activation::sigmoid: v = detail::sigmoid(v); break;
      case Activation::none: break;
    }
  }
  const char* name = kind == Activation::relu ? "relu" : kind == Activation::tanh ? "tanh" : "sigmoid";
  return g.record(name, std::move(out), {input}, [kind](const BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    const Tensor& y = ctx.output();
    const Tensor& dy = ctx.grad_output();
    for (std::size_t i = 0; i < y.size(); ++i) {
      double local = 0.0;
      switch (kind) {
        case Activation::relu: local = ctx.input(0)[i] > 0.0 ? 1.0 : 0.0; break;
        case Activation::tanh: local = 1.0 - y[i] * y[i]; break;
        case Activation::sigmoid: local = y[i] * (1.0 - y[i]); break;
        case Activation::none: local = 1.0; break;
      }
      (*dx)[i] += dy[i] * local;
    }
  });
}

/**
 * Inverted dropout: in train mode each element is zeroed with probability
 * `drop_prob` and survivors are scaled by 1/(1 - drop_prob). Identity in eval mode.
 */
inline NodeId dropout(Graph& g, NodeId input, double drop_prob, Mode mode, Rng* rng) {
  if (!(drop_prob >= 0.0 && drop_prob < 1.0)) {
    throw ArgumentError("dropout probability must lie in [0,1), got " + std::to_string(drop_prob));
  }
  if (mode == Mode::eval || drop_prob == 0.0) return input;
  if (rng == nullptr) throw ArgumentError("dropout in train mode needs a random source");
  const double keep_scale = 1.0 / (1.0 - drop_prob);
  auto mask = std::make_shared<std::vector<double>>(g.value(input).size());
  for (double& m : *mask) m = rng->uniform() < drop_prob ? 0.0 : keep_scale;
  Tensor out = g.value(input);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
  return g.record("dropout", std::move(out), {input}, [mask](const BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    const Tensor& dy = ctx.grad_output();
    for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i] * (*mask)[i];
  });
}

/// Order-preserving concatenation along the last axis; leading extents must agree.
inline NodeId concat(Graph& g, std::span<const NodeId> parts) {
  if (parts.empty()) throw ArgumentError("concat of an empty list");
  const Shape& first = g.value(parts[0]).shape();
  if (first.empty()) throw ShapeError("concat needs tensors of rank >= 1");
  if (parts.size() == 1) return parts[0];
  const Shape lead(first.begin(), first.end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (NodeId p : parts) {
    const Shape& s = g.value(p).shape();
    if (s.size() != first.size() || !std::equal(lead.begin(), lead.end(), s.begin())) {
      throw ShapeError("concat: part " + to_string(s) + " is incompatible with " + to_string(first));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  const std::size_t rows = element_count(lead);
  Shape shape = lead;
  shape.push_back(total);
  Tensor out(shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& src = g.value(parts[p]);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(src.data() + r * widths[p], widths[p], out.data() + r * total + offset);
    }
    offset += widths[p];
  }
  return g.record("concat", std::move(out), std::vector<NodeId>(parts.begin(), parts.end()),
                  [widths, rows, total](const BackwardContext& ctx) {
                    std::size_t off = 0;
                    for (std::size_t p = 0; p < widths.size(); ++p) {
                      if (Tensor* dp = ctx.input_grad(p)) {
                        for (std::size_t r = 0; r < rows; ++r) {
                          const double* src = ctx.grad_output().data() + r * total + off;
                          double* dst = dp->data() + r * widths[p];
                          for (std::size_t i = 0; i < widths[p]; ++i) dst[i] += src[i];
                        }
                      }
                      off += widths[p];
                    }
                  });
}

inline NodeId concat(Graph& g, std::initializer_list<NodeId> parts) {
  return concat(g, std::span<const NodeId>(parts.begin(), parts.size()));
}

/// Elementwise sum of two same-shape tensors.
inline NodeId add(Graph& g, NodeId a, NodeId b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  if (x.shape() != y.shape()) throw ShapeError("add: " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  Tensor out = x;
  out += y;
  return g.record("add", std::move(out), {a, b}, [](const BackwardContext& ctx) {
    if (Tensor* da = ctx.input_grad(0)) *da += ctx.grad_output();
    if (Tensor* db = ctx.input_grad(1)) *db += ctx.grad_output();
  });
}

inline NodeId reshape(Graph& g, NodeId input, Shape shape) {
  Tensor out = g.value(input).reshaped(std::move(shape));
  return g.record("reshape", std::move(out), {input}, [](const BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    const Tensor& dy = ctx.grad_output();
    for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i];
  });
}

/// Collapses everything after the first axis: [N,...] -> [N, prod(...)].
inline NodeId flatten_rows(Graph& g, NodeId input) {
  const Shape& s = g.value(input).shape();
  if (s.empty()) throw ShapeError("flatten_rows on a scalar");
  return reshape(g, input, Shape{s[0], element_count(s) / s[0]});
}

/// Selects rows (axis 0) in the given order; backward scatter-adds.
inline NodeId gather_rows(Graph& g, NodeId input, std::vector<std::size_t> rows) {
  const Tensor& x = g.value(input);
  if (x.rank() == 0) throw ShapeError("gather_rows on a scalar");
  if (rows.empty()) throw ArgumentError("gather_rows with no rows");
  const std::size_t width = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) throw ShapeError("gather_rows index " + std::to_string(rows[i]) + " out of range");
    std::copy_n(x.data() + rows[i] * width, width, out.data() + i * width);
  }
  return g.record("gather_rows", std::move(out), {input}, [rows = std::move(rows), width](const BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double* src = ctx.grad_output().data() + i * width;
      double* dst = dx->data() + rows[i] * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
    }
  });
}

/// Stacks tensors along axis 0; trailing extents must agree.
inline NodeId concat_rows(Graph& g, std::span<const NodeId> parts) {
  if (parts.empty()) throw ArgumentError("concat_rows of an empty list");
  const Shape& first = g.value(parts[0]).shape();
  if (first.empty()) throw ShapeError("concat_rows needs tensors of rank >= 1");
  std::vector<std::size_t> sizes;
  Shape shape = first;
  shape[0] = 0;
  for (NodeId p : parts) {
    const Shape& s = g.value(p).shape();
    if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1)) {
      throw ShapeError("concat_rows: part " + to_string(s) + " is incompatible with " + to_string(first));
    }
    shape[0] += s[0];
    sizes.push_back(g.value(p).size());
  }
  Tensor out(shape);
  std::size_t offset = 0;
  for (NodeId p : parts) {
    const Tensor& src = g.value(p);
    std::copy_n(src.data(), src.size(), out.data() + offset);
    offset += src.size();
  }
  return g.record("concat_rows", std::move(out), std::vector<NodeId>(parts.begin(), parts.end()),
                  [sizes](const BackwardContext& ctx) {
                    std::size_t off = 0;
                    for (std::size_t p = 0; p < sizes.size(); ++p) {
                      if (Tensor* dp = ctx.input_grad(p)) {
                        for (std::size_t i = 0; i < sizes[p]; ++i) (*dp)[i] += ctx.grad_output()[off + i];
                      }
                      off += sizes[p];
                    }
                  });
}

/// Sum of all elements as a scalar.
inline NodeId sum(Graph& g, NodeId input) {
  const Tensor& x = g.value(input);
  double total = 0.0;
  for (double v : x.values()) total += v;
  return g.record("sum", Tensor::scalar(total), {input}, [](const BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    const double s = ctx.grad_output().item();
    for (double& v : dx->values()) v += s;
  });
}

/// Node ids of one GRU layer's weights. Gate order along the 3m axis is (update, reset, candidate).
struct GruWeights {
  NodeId input;   ///< [n, 3m]
  NodeId hidden;  ///< [m, 3m]
  NodeId bias;    ///< [3m]
};

/**
 * One GRU update for x [n] or [B,n] and h_prev [m] or [B,m]:
 *   z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
 *   c = tanh(x Wc + (r * h) Uc + bc), h' = (1 - z) * h + z * c.
 */
inline NodeId gru_step(Graph& g, NodeId x, NodeId h_prev, const GruWeights& w) {
  const Tensor& xv = g.value(x);
  const Tensor& hv = g.value(h_prev);
  const Tensor& wx = g.value(w.input);
  const Tensor& wh = g.value(w.hidden);
  const Tensor& b = g.value(w.bias);
  const auto xd = detail::row_dims(xv, "gru_step input");
  const auto hd = detail::row_dims(hv, "gru_step state");
  const std::size_t n = xd.cols;
  const std::size_t m = hd.cols;
  const std::size_t rows = xd.rows;
  if (hd.rows != rows || xd.batched != hd.batched) {
    throw ShapeError("gru_step: input " + to_string(xv.shape()) + " and state " + to_string(hv.shape()) + " disagree");
  }
  if (wx.shape() != Shape{n, 3 * m} || wh.shape() != Shape{m, 3 * m} || b.shape() != Shape{3 * m}) {
    throw ShapeError("gru_step: weights " + to_string(wx.shape()) + ", " + to_string(wh.shape()) + ", " +
                     to_string(b.shape()) + " do not fit input width " + std::to_string(n) + " and state width " +
                     std::to_string(m));
  }
  using detail::RowMatrix;
  const auto em = static_cast<Eigen::Index>(m);
  const auto xm = detail::as_matrix(xv, rows, n);
  const auto hm = detail::as_matrix(hv, rows, m);
  const auto wxm = detail::as_matrix(wx, n, 3 * m);
  const auto whm = detail::as_matrix(wh, m, 3 * m);

  RowMatrix pre = xm * wxm;
  pre.rowwise() += detail::ConstVectorMap(b.data(), static_cast<Eigen::Index>(3 * m));
  pre.leftCols(2 * em).noalias() += hm * whm.leftCols(2 * em);

  auto gates = std::make_shared<RowMatrix>(static_cast<Eigen::Index>(rows), 4 * em);  // z | r | c | r*h
  auto& gm = *gates;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(rows); ++i) {
    for (Eigen::Index j = 0; j < em; ++j) {
      gm(i, j) = detail::sigmoid(pre(i, j));
      gm(i, em + j) = detail::sigmoid(pre(i, em + j));
      gm(i, 3 * em + j) = gm(i, em + j) * hm(i, j);
    }
  }
  pre.rightCols(em).noalias() += gm.rightCols(em) * whm.rightCols(em);
  gm.middleCols(2 * em, em) = pre.rightCols(em).array().tanh();

  Tensor out(hd.batched ? Shape{rows, m} : Shape{m});
  auto om = detail::as_matrix(out, rows, m);
  om.array() = (1.0 - gm.leftCols(em).array()) * hm.array() + gm.leftCols(em).array() * gm.middleCols(2 * em, em).array();

  return g.record("gru_step", std::move(out), {x, h_prev, w.input, w.hidden, w.bias},
                  [gates, rows, n, m](const BackwardContext& ctx) {
                    const auto em = static_cast<Eigen::Index>(m);
                    const auto& gm = *gates;
                    const auto dh_map = detail::as_matrix(ctx.grad_output(), rows, m);
                    const auto dh_out = dh_map.array();
                    const auto hm = detail::as_matrix(ctx.input(1), rows, m);
                    const auto whm = detail::as_matrix(ctx.input(3), m, 3 * m);
                    const auto z = gm.leftCols(em).array();
                    const auto r = gm.middleCols(em, em).array();
                    const auto c = gm.middleCols(2 * em, em).array();

                    RowMatrix dpre(static_cast<Eigen::Index>(rows), 3 * em);
                    dpre.middleCols(2 * em, em) = (dh_out * z * (1.0 - c * c)).matrix();
                    const RowMatrix drh = dpre.middleCols(2 * em, em) * whm.rightCols(em).transpose();
                    dpre.leftCols(em) = (dh_out * (c - hm.array()) * z * (1.0 - z)).matrix();
                    dpre.middleCols(em, em) = (drh.array() * hm.array() * r * (1.0 - r)).matrix();

                    if (Tensor* dx = ctx.input_grad(0)) {
                      detail::as_matrix(*dx, rows, n).noalias() += dpre * detail::as_matrix(ctx.input(2), n, 3 * m).transpose();
                    }
                    if (Tensor* dh = ctx.input_grad(1)) {
                      auto dhm = detail::as_matrix(*dh, rows, m);
                      dhm.array() += dh_out * (1.0 - z) + drh.array() * r;
                      dhm.noalias() += dpre.leftCols(2 * em) * whm.leftCols(2 * em).transpose();
                    }
                    if (Tensor* dwx = ctx.input_grad(2)) {
                      detail::as_matrix(*dwx, n, 3 * m).noalias() +=
                          detail::as_matrix(ctx.input(0), rows, n).transpose() * dpre;
                    }
                    if (Tensor* dwh = ctx.input_grad(3)) {
                      auto dwhm = detail::as_matrix(*dwh, m, 3 * m);
                      dwhm.leftCols(2 * em).noalias() += hm.transpose() * dpre.leftCols(2 * em);
                      dwhm.rightCols(em).noalias() += gm.rightCols(em).transpose() * dpre.rightCols(em);
                    }
                    if (Tensor* db = ctx.input_grad(4)) {
                      detail::VectorMap(db->data(), 3 * em) += dpre.colwise().sum();
                    }
                  });
}

}  // namespace affectkit
