#include "tokenflow/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace tokenflow {

namespace {

using RowMatrix = Tensor::RowMatrix;

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

void require_defined(const char* op, const Var& v) {
  if (!v.defined()) shape_error(op, "undefined operand");
}

void require_finite(const char* op, const Var& v) {
  require_defined(op, v);
  if (!v.value().all_finite()) {
    throw std::domain_error(std::string(op) + ": non-finite input of shape " + shape_string(v.shape()));
  }
}

/// Wraps a forward result; records it when a tape is active and any input
/// needs a gradient.
Var make_result(const char* op, Tensor value, std::initializer_list<Var> inputs, std::function<void(Node&)> backward) {
  Tape* tape = Tape::active();
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || (in.defined() && in.requires_grad());
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  if (tape && needs_grad) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.handle());
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Var(node);
}

bool wants(const Node& node, std::size_t i) {
  return i < node.inputs.size() && node.inputs[i] && node.inputs[i]->requires_grad;
}

// Broadcasting of one operand against a 2-D output view.
enum class Broadcast { kSame, kScalar, kColumn, kRow };

Broadcast classify(const char* op, const Tensor& x, const Tensor& out_like) {
  if (x.shape() == out_like.shape()) return Broadcast::kSame;
  if (x.numel() == 1) return Broadcast::kScalar;
  if (x.rank() == 2 && x.cols() == 1 && x.rows() == out_like.rows()) return Broadcast::kColumn;
  if (x.rows() == 1 && x.numel() == out_like.cols()) return Broadcast::kRow;
  shape_error(op, "cannot broadcast " + shape_string(x.shape()) + " against " + shape_string(out_like.shape()));
}

RowMatrix expand(const Tensor& x, Broadcast kind, Index rows, Index cols) {
  switch (kind) {
    case Broadcast::kSame: return x.matrix();
    case Broadcast::kScalar: return RowMatrix::Constant(rows, cols, x[0]);
    case Broadcast::kColumn: return x.matrix().replicate(1, cols);
    case Broadcast::kRow: return Eigen::Map<const RowMatrix>(x.data(), 1, cols).replicate(rows, 1);
  }
  return {};
}

template <typename Derived>
Tensor reduce(const Eigen::MatrixBase<Derived>& g, Broadcast kind, const Shape& shape) {
  Tensor out(shape);
  switch (kind) {
    case Broadcast::kSame: out.matrix() = g; break;
    case Broadcast::kScalar: out[0] = g.sum(); break;
    case Broadcast::kColumn: out.matrix() = g.rowwise().sum(); break;
    case Broadcast::kRow: Eigen::Map<RowMatrix>(out.data(), 1, g.cols()) = g.colwise().sum(); break;
  }
  return out;
}

enum class Binary { kAdd, kSub, kMul };

Var binary(const char* op, Binary kind, const Var& a, const Var& b) {
  require_finite(op, a);
  require_finite(op, b);
  const bool a_larger = a.numel() >= b.numel();
  const Tensor& big = a_larger ? a.value() : b.value();
  const Broadcast ka = classify(op, a.value(), big);
  const Broadcast kb = classify(op, b.value(), big);
  const Index rows = big.rows(), cols = big.cols();
  RowMatrix am = expand(a.value(), ka, rows, cols);
  RowMatrix bm = expand(b.value(), kb, rows, cols);
  Tensor out = Tensor::uninitialized(big.shape());
  switch (kind) {
    case Binary::kAdd: out.matrix() = am + bm; break;
    case Binary::kSub: out.matrix() = am - bm; break;
    case Binary::kMul: out.matrix() = am.cwiseProduct(bm); break;
  }
  const Shape sa = a.shape(), sb = b.shape();
  if (kind == Binary::kMul) {
    return make_result(op, std::move(out), {a, b},
                       [ka, kb, sa, sb, am = std::move(am), bm = std::move(bm)](Node& n) {
                         const auto g = n.grad.matrix();
                         if (wants(n, 0)) n.inputs[0]->accumulate(reduce(g.cwiseProduct(bm), ka, sa));
                         if (wants(n, 1)) n.inputs[1]->accumulate(reduce(g.cwiseProduct(am), kb, sb));
                       });
  }
  return make_result(op, std::move(out), {a, b}, [kind, ka, kb, sa, sb](Node& n) {
    const auto g = n.grad.matrix();
    if (wants(n, 0)) n.inputs[0]->accumulate(reduce(g, ka, sa));
    if (wants(n, 1)) n.inputs[1]->accumulate(kind == Binary::kSub ? reduce(-g, kb, sb) : reduce(g, kb, sb));
  });
}

void require_rank2(const char* op, const Var& v) {
  if (v.value().rank() != 2) shape_error(op, "expected a 2-D operand, got " + shape_string(v.shape()));
}

// im2col for one image [C,H,W] -> [C*k*k, Ho*Wo]
RowMatrix im2col(const double* img, Index C, Index H, Index W, Index k, Index stride, Index pad, Index Ho, Index Wo) {
  RowMatrix cols = RowMatrix::Zero(C * k * k, Ho * Wo);
  for (Index c = 0; c < C; ++c) {
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        double* row = cols.row((c * k + ki) * k + kj).data();
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) continue;
          const double* src = img + (c * H + iy) * W;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < W) row[oy * Wo + ox] = src[ix];
          }
        }
      }
    }
  }
  return cols;
}

void col2im(const RowMatrix& cols, double* img, Index C, Index H, Index W, Index k, Index stride, Index pad, Index Ho,
            Index Wo) {
  for (Index c = 0; c < C; ++c) {
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        const double* row = cols.row((c * k + ki) * k + kj).data();
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) continue;
          double* dst = img + (c * H + iy) * W;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < W) dst[ix] += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

struct ImageDims {
  Index n, c, h, w;
  bool batched;
};

ImageDims image_dims(const char* op, const Tensor& x) {
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2), false};
  shape_error(op, "expected [N,C,H,W] or [C,H,W], got " + shape_string(x.shape()));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var add(const Var& a, const Var& b) { return binary("add", Binary::kAdd, a, b); }
Var sub(const Var& a, const Var& b) { return binary("sub", Binary::kSub, a, b); }
Var mul(const Var& a, const Var& b) { return binary("mul", Binary::kMul, a, b); }

Var scale(const Var& a, double factor) {
  require_finite("scalar-mul", a);
  Tensor out(a.shape(), a.value().values() * factor);
  return make_result("scalar-mul", std::move(out), {a}, [factor](Node& n) {
    n.inputs[0]->accumulate(Tensor(n.grad.shape(), n.grad.values() * factor));
  });
}

Var matmul(const Var& a, const Var& b) {
  require_finite("matmul", a);
  require_finite("matmul", b);
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  if (a.value().cols() != b.value().rows()) {
    shape_error("matmul", "inner dimensions differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out = Tensor::uninitialized(Shape{a.value().rows(), b.value().cols()});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return make_result("matmul", std::move(out), {a, b}, [](Node& n) {
    const auto g = n.grad.matrix();
    if (wants(n, 0)) n.inputs[0]->accumulate_matrix(g * n.inputs[1]->value.matrix().transpose());
    if (wants(n, 1)) n.inputs[1]->accumulate_matrix(n.inputs[0]->value.matrix().transpose() * g);
  });
}

Var transpose(const Var& a) {
  require_finite("transpose", a);
  require_rank2("transpose", a);
  Tensor out = Tensor::uninitialized(Shape{a.value().cols(), a.value().rows()});
  out.matrix() = a.value().matrix().transpose();
  return make_result("transpose", std::move(out), {a},
                     [](Node& n) { n.inputs[0]->accumulate_matrix(n.grad.matrix().transpose()); });
}

Var reshape(const Var& a, Shape shape) {
  require_finite("reshape", a);
  if (shape_numel(shape) != a.numel()) {
    shape_error("reshape", "cannot reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  Tensor out(std::move(shape), a.value().values());
  return make_result("reshape", std::move(out), {a}, [](Node& n) {
    n.inputs[0]->accumulate(Tensor(n.inputs[0]->value.shape(), n.grad.values()));
  });
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) shape_error("concat", "no operands");
  if (axis != 0 && axis != 1) shape_error("concat", "axis must be 0 or 1");
  for (const auto& p : parts) {
    require_finite("concat", p);
    require_rank2("concat", p);
  }
  const Index fixed = axis == 0 ? parts[0].value().cols() : parts[0].value().rows();
  Index total = 0;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    const Index f = axis == 0 ? p.value().cols() : p.value().rows();
    if (f != fixed) {
      shape_error("concat", "mismatched operand " + shape_string(p.shape()) + " vs " + shape_string(parts[0].shape()));
    }
    offsets.push_back(total);
    total += axis == 0 ? p.value().rows() : p.value().cols();
  }
  Tensor out = Tensor::uninitialized(axis == 0 ? Shape{total, fixed} : Shape{fixed, total});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto m = parts[i].value().matrix();
    if (axis == 0) {
      out.matrix().middleRows(offsets[i], m.rows()) = m;
    } else {
      out.matrix().middleCols(offsets[i], m.cols()) = m;
    }
  }
  // Variable arity: build the node by hand.
  Tape* tape = Tape::active();
  bool needs_grad = false;
  for (const auto& p : parts) needs_grad = needs_grad || p.requires_grad();
  auto node = std::make_shared<Node>();
  node->value = std::move(out);
  node->op = "concat";
  if (tape && needs_grad) {
    node->requires_grad = true;
    for (const auto& p : parts) node->inputs.push_back(p.handle());
    node->backward = [axis, offsets](Node& n) {
      const auto g = n.grad.matrix();
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        if (!wants(n, i)) continue;
        const Tensor& v = n.inputs[i]->value;
        if (axis == 0) {
          n.inputs[i]->accumulate_matrix(g.middleRows(offsets[i], v.rows()));
        } else {
          n.inputs[i]->accumulate_matrix(g.middleCols(offsets[i], v.cols()));
        }
      }
    };
    tape->record(node);
  }
  return Var(node);
}

Var slice_cols(const Var& a, Index start, Index count) {
  require_finite("slice-cols", a);
  require_rank2("slice-cols", a);
  if (start < 0 || count < 0 || start + count > a.value().cols()) {
    shape_error("slice-cols", "columns [" + std::to_string(start) + "," + std::to_string(start + count) +
                                  ") out of range for " + shape_string(a.shape()));
  }
  Tensor out = Tensor::uninitialized(Shape{a.value().rows(), count});
  out.matrix() = a.value().matrix().middleCols(start, count);
  return make_result("slice-cols", std::move(out), {a}, [start, count](Node& n) {
    Node& in = *n.inputs[0];
    if (in.grad.numel() == 0) in.grad = Tensor(in.value.shape());
    in.grad.matrix().middleCols(start, count) += n.grad.matrix();
  });
}

namespace {

Var gather_impl(const char* op, const Var& a, std::span<const Index> rows) {
  require_finite(op, a);
  const Index n_rows = a.value().rows(), cols = a.value().cols();
  std::vector<Index> idx(rows.begin(), rows.end());
  for (Index r : idx) {
    if (r < 0 || r >= n_rows) {
      shape_error(op, "row " + std::to_string(r) + " out of range for " + shape_string(a.shape()));
    }
  }
  Tensor out = Tensor::uninitialized(Shape{Index(idx.size()), cols});
  for (std::size_t i = 0; i < idx.size(); ++i) out.matrix().row(Index(i)) = a.value().matrix().row(idx[i]);
  return make_result(op, std::move(out), {a}, [idx = std::move(idx)](Node& n) {
    Node& in = *n.inputs[0];
    if (in.grad.numel() == 0) in.grad = Tensor(in.value.shape());
    auto gin = in.grad.matrix();
    const auto g = n.grad.matrix();
    for (std::size_t i = 0; i < idx.size(); ++i) gin.row(idx[i]) += g.row(Index(i));
  });
}

}  // namespace

Var gather_rows(const Var& a, std::span<const Index> rows) { return gather_impl("gather-rows", a, rows); }

Var embedding(const Var& table, std::span<const Index> ids) {
  require_rank2("embedding", table);
  return gather_impl("embedding", table, ids);
}

Var scatter_rows_add(const Var& base, std::span<const Index> rows, const Var& values) {
  require_finite("scatter-rows-add", base);
  require_finite("scatter-rows-add", values);
  const Index n_rows = base.value().rows(), cols = base.value().cols();
  if (values.value().rows() != Index(rows.size()) || values.value().cols() != cols) {
    shape_error("scatter-rows-add", "values " + shape_string(values.shape()) + " do not match " +
                                        std::to_string(rows.size()) + " rows of " + shape_string(base.shape()));
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  Tensor out = base.value();
  auto om = out.matrix();
  const auto vm = values.value().matrix();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n_rows) shape_error("scatter-rows-add", "row index out of range");
    om.row(idx[i]) += vm.row(Index(i));
  }
  return make_result("scatter-rows-add", std::move(out), {base, values}, [idx = std::move(idx)](Node& n) {
    if (wants(n, 0)) n.inputs[0]->accumulate(n.grad);
    if (wants(n, 1)) {
      const auto g = n.grad.matrix();
      RowMatrix gv(Index(idx.size()), g.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) gv.row(Index(i)) = g.row(idx[i]);
      n.inputs[1]->accumulate_matrix(gv);
    }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& bias, Index stride, Index pad) {
  require_finite("conv2d", x);
  require_finite("conv2d", w);
  if (bias.defined()) require_finite("conv2d", bias);
  const ImageDims d = image_dims("conv2d", x.value());
  if (w.value().rank() != 4 || w.value().dim(1) != d.c || w.value().dim(2) != w.value().dim(3)) {
    shape_error("conv2d", "weight " + shape_string(w.shape()) + " incompatible with input " + shape_string(x.shape()));
  }
  if (stride < 1 || pad < 0) shape_error("conv2d", "invalid stride/pad");
  const Index F = w.value().dim(0), k = w.value().dim(2);
  if (bias.defined() && bias.numel() != F) {
    shape_error("conv2d", "bias " + shape_string(bias.shape()) + " for " + std::to_string(F) + " filters");
  }
  if (d.h + 2 * pad < k || d.w + 2 * pad < k) shape_error("conv2d", "kernel larger than padded input");
  const Index Ho = (d.h + 2 * pad - k) / stride + 1;
  const Index Wo = (d.w + 2 * pad - k) / stride + 1;
  Shape out_shape = d.batched ? Shape{d.n, F, Ho, Wo} : Shape{F, Ho, Wo};
  Tensor out = Tensor::uninitialized(out_shape);
  const Eigen::Map<const RowMatrix> wm(w.value().data(), F, d.c * k * k);
  std::vector<RowMatrix> saved(std::size_t(d.n));
  for (Index n = 0; n < d.n; ++n) {
    saved[std::size_t(n)] = im2col(x.value().data() + n * d.c * d.h * d.w, d.c, d.h, d.w, k, stride, pad, Ho, Wo);
    Eigen::Map<RowMatrix> om(out.data() + n * F * Ho * Wo, F, Ho * Wo);
    om.noalias() = wm * saved[std::size_t(n)];
    if (bias.defined()) om.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.value().data(), F);
  }
  return make_result("conv2d", std::move(out), {x, w, bias},
                     [d, F, k, stride, pad, Ho, Wo, saved = std::move(saved)](Node& node) {
                       const Eigen::Map<const RowMatrix> wm(node.inputs[1]->value.data(), F, d.c * k * k);
                       RowMatrix dw = RowMatrix::Zero(F, d.c * k * k);
                       Eigen::VectorXd db = Eigen::VectorXd::Zero(F);
                       Tensor dx;
                       if (wants(node, 0)) dx = Tensor(node.inputs[0]->value.shape());
                       for (Index n = 0; n < d.n; ++n) {
                         const Eigen::Map<const RowMatrix> g(node.grad.data() + n * F * Ho * Wo, F, Ho * Wo);
                         if (wants(node, 1)) dw.noalias() += g * saved[std::size_t(n)].transpose();
                         if (wants(node, 2)) db += g.rowwise().sum();
                         if (wants(node, 0)) {
                           const RowMatrix dcols = wm.transpose() * g;
                           col2im(dcols, dx.data() + n * d.c * d.h * d.w, d.c, d.h, d.w, k, stride, pad, Ho, Wo);
                         }
                       }
                       if (wants(node, 0)) node.inputs[0]->accumulate(dx);
                       if (wants(node, 1)) node.inputs[1]->accumulate(Tensor(node.inputs[1]->value.shape(),
                                                                              Eigen::Map<Eigen::VectorXd>(dw.data(), dw.size())));
                       if (wants(node, 2)) node.inputs[2]->accumulate(Tensor(node.inputs[2]->value.shape(), db));
                     });
}

Var max_pool2d(const Var& x, Index kernel, Index stride) {
  require_finite("max-pool", x);
  const ImageDims d = image_dims("max-pool", x.value());
  if (kernel < 1 || stride < 1 || kernel > d.h || kernel > d.w) shape_error("max-pool", "invalid kernel/stride");
  const Index Ho = (d.h - kernel) / stride + 1;
  const Index Wo = (d.w - kernel) / stride + 1;
  Tensor out = Tensor::uninitialized(d.batched ? Shape{d.n, d.c, Ho, Wo} : Shape{d.c, Ho, Wo});
  std::vector<Index> argmax(std::size_t(out.numel()));
  const double* in = x.value().data();
  Index o = 0;
  for (Index plane = 0; plane < d.n * d.c; ++plane) {
    const Index base = plane * d.h * d.w;
    for (Index oy = 0; oy < Ho; ++oy) {
      for (Index ox = 0; ox < Wo; ++ox, ++o) {
        Index best = base + (oy * stride) * d.w + ox * stride;
        for (Index ky = 0; ky < kernel; ++ky) {
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index at = base + (oy * stride + ky) * d.w + ox * stride + kx;
            if (in[at] > in[best]) best = at;
          }
        }
        argmax[std::size_t(o)] = best;
        out[o] = in[best];
      }
    }
  }
  return make_result("max-pool", std::move(out), {x}, [argmax = std::move(argmax)](Node& n) {
    Tensor dx(n.inputs[0]->value.shape());
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += n.grad[Index(i)];
    n.inputs[0]->accumulate(dx);
  });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  require_finite("linear", x);
  require_finite("linear", w);
  require_rank2("linear", w);
  if (bias.defined()) require_finite("linear", bias);
  const Index in = w.value().rows(), outd = w.value().cols();
  if (x.value().cols() != in) {
    shape_error("linear", "input " + shape_string(x.shape()) + " does not match weight " + shape_string(w.shape()));
  }
  if (bias.defined() && bias.numel() != outd) {
    shape_error("linear", "bias " + shape_string(bias.shape()) + " does not match weight " + shape_string(w.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  Tensor out = Tensor::uninitialized(out_shape);
  out.matrix().noalias() = x.value().matrix() * w.value().matrix();
  if (bias.defined()) out.matrix().rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data(), outd);
  return make_result("linear", std::move(out), {x, w, bias}, [](Node& n) {
    const auto g = n.grad.matrix();
    if (wants(n, 0)) n.inputs[0]->accumulate_matrix(g * n.inputs[1]->value.matrix().transpose());
    if (wants(n, 1)) n.inputs[1]->accumulate_matrix(n.inputs[0]->value.matrix().transpose() * g);
    if (wants(n, 2)) {
      Node& b = *n.inputs[2];
      if (b.grad.numel() == 0) b.grad = Tensor(b.value.shape());
      Eigen::Map<Eigen::RowVectorXd>(b.grad.data(), g.cols()) += g.colwise().sum();
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_finite("layernorm", x);
  require_finite("layernorm", gamma);
  require_finite("layernorm", beta);
  const Index rows = x.value().rows(), cols = x.value().cols();
  if (gamma.numel() != cols || beta.numel() != cols) {
    shape_error("layernorm", "affine params " + shape_string(gamma.shape()) + "/" + shape_string(beta.shape()) +
                                 " for input " + shape_string(x.shape()));
  }
  const auto xm = x.value().matrix();
  RowMatrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const double mu = xm.row(r).mean();
    const double var = (xm.row(r).array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xm.row(r).array() - mu) * inv_std[r];
  }
  const Eigen::Map<const Eigen::RowVectorXd> gm(gamma.value().data(), cols);
  const Eigen::Map<const Eigen::RowVectorXd> bm(beta.value().data(), cols);
  Tensor out = Tensor::uninitialized(x.shape());
  out.matrix() = (xhat.array().rowwise() * gm.array()).rowwise() + bm.array();
  return make_result("layernorm", std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                       const auto g = n.grad.matrix();
                       const Index cols = g.cols();
                       if (wants(n, 0)) {
                         const Eigen::Map<const Eigen::RowVectorXd> gm(n.inputs[1]->value.data(), cols);
                         RowMatrix dxhat = g.array().rowwise() * gm.array();
                         RowMatrix dx(g.rows(), cols);
                         for (Index r = 0; r < g.rows(); ++r) {
                           const double m1 = dxhat.row(r).mean();
                           const double m2 = dxhat.row(r).dot(xhat.row(r)) / double(cols);
                           dx.row(r) = inv_std[r] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                         }
                         n.inputs[0]->accumulate_matrix(dx);
                       }
                       if (wants(n, 1)) {
                         Node& gnode = *n.inputs[1];
                         if (gnode.grad.numel() == 0) gnode.grad = Tensor(gnode.value.shape());
                         Eigen::Map<Eigen::RowVectorXd>(gnode.grad.data(), cols) +=
                             g.cwiseProduct(xhat).colwise().sum();
                       }
                       if (wants(n, 2)) {
                         Node& bnode = *n.inputs[2];
                         if (bnode.grad.numel() == 0) bnode.grad = Tensor(bnode.value.shape());
                         Eigen::Map<Eigen::RowVectorXd>(bnode.grad.data(), cols) += g.colwise().sum();
                       }
                     });
}

Var softmax(const Var& x) {
  require_finite("softmax", x);
  const auto xm = x.value().matrix();
  Tensor out = Tensor::uninitialized(x.shape());
  auto om = out.matrix();
  for (Index r = 0; r < xm.rows(); ++r) {
    const double mx = xm.row(r).maxCoeff();
    om.row(r) = (xm.row(r).array() - mx).exp();
    om.row(r) /= om.row(r).sum();
  }
  return make_result("softmax", std::move(out), {x}, [](Node& n) {
    const auto y = n.value.matrix();
    const auto g = n.grad.matrix();
    const Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
    RowMatrix dx = y.array() * (g.array().colwise() - dots.array());
    n.inputs[0]->accumulate_matrix(dx);
  });
}

Var gelu(const Var& x) {
  require_finite("gelu", x);
  const auto& xv = x.value().values();
  // tanh(u) = 1 - 2 / (exp(2u) + 1); Eigen vectorizes exp but not tanh for doubles.
  const Eigen::ArrayXd u = (2.0 * kGeluC) * (xv.array() + kGeluA * xv.array().cube());
  const Eigen::ArrayXd t = 1.0 - 2.0 / (u.min(700.0).exp() + 1.0);
  Tensor out(x.shape(), (0.5 * xv.array() * (1.0 + t)).matrix());
  return make_result("gelu", std::move(out), {x}, [t](Node& n) {
    const Eigen::ArrayXd xa = n.inputs[0]->value.values().array();
    const Eigen::ArrayXd dy =
        0.5 * (1.0 + t) + 0.5 * xa * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluA * xa.square());
    n.inputs[0]->accumulate(Tensor(n.grad.shape(), (n.grad.values().array() * dy).matrix()));
  });
}

Var sigmoid(const Var& x) {
  require_finite("sigmoid", x);
  Tensor out(x.shape(), (1.0 / (1.0 + (-x.value().values().array()).exp())).matrix());
  return make_result("sigmoid", std::move(out), {x}, [](Node& n) {
    const Eigen::ArrayXd y = n.value.values().array();
    n.inputs[0]->accumulate(Tensor(n.grad.shape(), (n.grad.values().array() * y * (1.0 - y)).matrix()));
  });
}

Var log(const Var& x) {
  require_finite("log", x);
  const Eigen::ArrayXd clamped = x.value().values().array().max(std::numeric_limits<double>::min());
  Tensor out(x.shape(), clamped.log().matrix());
  return make_result("log", std::move(out), {x}, [clamped](Node& n) {
    n.inputs[0]->accumulate(Tensor(n.grad.shape(), (n.grad.values().array() / clamped).matrix()));
  });
}

Var mean(const Var& x) {
  require_finite("mean", x);
  if (x.numel() == 0) shape_error("mean", "empty input");
  const double count = double(x.numel());
  return make_result("mean", Tensor::scalar(x.value().values().mean()), {x}, [count](Node& n) {
    const Tensor& in = n.inputs[0]->value;
    n.inputs[0]->accumulate(Tensor::full(in.shape(), n.grad[0] / count));
  });
}

Var sum(const Var& x) {
  require_finite("sum", x);
  return make_result("sum", Tensor::scalar(x.value().values().sum()), {x}, [](Node& n) {
    n.inputs[0]->accumulate(Tensor::full(n.inputs[0]->value.shape(), n.grad[0]));
  });
}

Var cross_entropy(const Var& logits, std::span<const Index> targets) {
  require_finite("cross-entropy", logits);
  const auto lm = logits.value().matrix();
  const Index rows = lm.rows(), classes = lm.cols();
  if (Index(targets.size()) != rows) {
    shape_error("cross-entropy", std::to_string(targets.size()) + " targets for logits " + shape_string(logits.shape()));
  }
  RowMatrix probs(rows, classes);
  double loss = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const Index t = targets[std::size_t(r)];
    if (t < 0 || t >= classes) {
      throw std::out_of_range("cross-entropy: class index " + std::to_string(t) + " outside [0," +
                              std::to_string(classes) + ")");
    }
    const double mx = lm.row(r).maxCoeff();
    probs.row(r) = (lm.row(r).array() - mx).exp();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    loss += mx + std::log(z) - lm(r, t);
  }
  loss /= double(rows);
  std::vector<Index> tg(targets.begin(), targets.end());
  return make_result("cross-entropy", Tensor::scalar(loss), {logits},
                     [probs = std::move(probs), tg = std::move(tg)](Node& n) {
                       RowMatrix d = probs;
                       for (std::size_t r = 0; r < tg.size(); ++r) d(Index(r), tg[r]) -= 1.0;
                       d *= n.grad[0] / double(tg.size());
                       n.inputs[0]->accumulate_matrix(d);
                     });
}

Var bce_with_logits(const Var& logits, const Tensor& targets) {
  require_finite("binary-cross-entropy", logits);
  if (targets.numel() != logits.numel()) {
    shape_error("binary-cross-entropy",
                "targets " + shape_string(targets.shape()) + " for logits " + shape_string(logits.shape()));
  }
  const Eigen::ArrayXd x = logits.value().values().array();
  const Eigen::ArrayXd t = targets.values().array();
  const double loss = (x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).log()).mean();
  return make_result("binary-cross-entropy", Tensor::scalar(loss), {logits}, [t](Node& n) {
    const Eigen::ArrayXd x = n.inputs[0]->value.values().array();
    const Eigen::ArrayXd sig = 1.0 / (1.0 + (-x).exp());
    n.inputs[0]->accumulate(
        Tensor(n.inputs[0]->value.shape(), ((sig - t) * (n.grad[0] / double(x.size()))).matrix()));
  });
}

Var mse(const Var& a, const Var& b) {
  require_finite("mse", a);
  require_finite("mse", b);
  if (a.shape() != b.shape()) shape_error("mse", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const Eigen::VectorXd diff = a.value().values() - b.value().values();
  const double count = double(diff.size());
  return make_result("mse", Tensor::scalar(diff.squaredNorm() / count), {a, b}, [diff, count](Node& n) {
    const Eigen::VectorXd g = diff * (2.0 * n.grad[0] / count);
    if (wants(n, 0)) n.inputs[0]->accumulate(Tensor(n.inputs[0]->value.shape(), g));
    if (wants(n, 1)) n.inputs[1]->accumulate(Tensor(n.inputs[1]->value.shape(), -g));
  });
}

std::string_view primitive_name(Primitive p) {
  switch (p) {
    case Primitive::kAdd: return "add";
    case Primitive::kSub: return "sub";
    case Primitive::kMul: return "mul";
    case Primitive::kScalarMul: return "scalar-mul";
    case Primitive::kMatmul: return "matmul";
    case Primitive::kTranspose: return "transpose";
    case Primitive::kReshape: return "reshape";
    case Primitive::kConcat: return "concat";
    case Primitive::kGatherRows: return "gather-rows";
    case Primitive::kScatterRowsAdd: return "scatter-rows-add";
    case Primitive::kConv2d: return "conv2d";
    case Primitive::kMaxPool: return "max-pool";
    case Primitive::kLinear: return "linear";
    case Primitive::kLayerNorm: return "layernorm";
    case Primitive::kSoftmax: return "softmax";
    case Primitive::kGelu: return "gelu";
    case Primitive::kSigmoid: return "sigmoid";
    case Primitive::kLog: return "log";
    case Primitive::kMean: return "mean";
    case Primitive::kSum: return "sum";
    case Primitive::kEmbedding: return "embedding";
    case Primitive::kCrossEntropy: return "cross-entropy";
    case Primitive::kBinaryCrossEntropy: return "binary-cross-entropy";
    case Primitive::kMse: return "mse";
  }
  return "unknown";
}

std::span<const Primitive> all_primitives() {
  static constexpr std::array kAll{
      Primitive::kAdd,       Primitive::kSub,        Primitive::kMul,          Primitive::kScalarMul,
      Primitive::kMatmul,    Primitive::kTranspose,  Primitive::kReshape,      Primitive::kConcat,
      Primitive::kGatherRows, Primitive::kScatterRowsAdd, Primitive::kConv2d,  Primitive::kMaxPool,
      Primitive::kLinear,    Primitive::kLayerNorm,  Primitive::kSoftmax,      Primitive::kGelu,
      Primitive::kSigmoid,   Primitive::kLog,        Primitive::kMean,         Primitive::kSum,
      Primitive::kEmbedding, Primitive::kCrossEntropy, Primitive::kBinaryCrossEntropy, Primitive::kMse,
  };
  return kAll;
}

Var evaluate(Primitive p, std::span<const Var> in, const OpAttrs& attrs) {
  auto arg = [&](std::size_t i) -> const Var& {
    static const Var kNone;
    return i < in.size() ? in[i] : kNone;
  };
  auto need = [&](std::size_t n) {
    if (in.size() < n) {
      throw std::invalid_argument(std::string(primitive_name(p)) + ": expected " + std::to_string(n) + " inputs");
    }
  };
  switch (p) {
    case Primitive::kAdd: need(2); return add(in[0], in[1]);
    case Primitive::kSub: need(2); return sub(in[0], in[1]);
    case Primitive::kMul: need(2); return mul(in[0], in[1]);
    case Primitive::kScalarMul: need(1); return scale(in[0], attrs.scalar);
    case Primitive::kMatmul: need(2); return matmul(in[0], in[1]);
    case Primitive::kTranspose: need(1); return transpose(in[0]);
    case Primitive::kReshape: need(1); return reshape(in[0], attrs.shape);
    case Primitive::kConcat: need(1); return concat(in, attrs.axis);
    case Primitive::kGatherRows: need(1); return gather_rows(in[0], attrs.indices);
    case Primitive::kScatterRowsAdd: need(2); return scatter_rows_add(in[0], attrs.indices, in[1]);
    case Primitive::kConv2d: need(2); return conv2d(in[0], in[1], arg(2), attrs.stride, attrs.pad);
    case Primitive::kMaxPool: need(1); return max_pool2d(in[0], attrs.kernel, attrs.stride);
    case Primitive::kLinear: need(2); return linear(in[0], in[1], arg(2));
    case Primitive::kLayerNorm: need(3); return layer_norm(in[0], in[1], in[2], attrs.eps);
    case Primitive::kSoftmax: need(1); return softmax(in[0]);
    case Primitive::kGelu: need(1); return gelu(in[0]);
    case Primitive::kSigmoid: need(1); return sigmoid(in[0]);
    case Primitive::kLog: need(1); return log(in[0]);
    case Primitive::kMean: need(1); return mean(in[0]);
    case Primitive::kSum: need(1); return sum(in[0]);
    case Primitive::kEmbedding: need(1); return embedding(in[0], attrs.indices);
    case Primitive::kCrossEntropy: need(1); return cross_entropy(in[0], attrs.indices);
    case Primitive::kBinaryCrossEntropy: need(1); return bce_with_logits(in[0], attrs.targets);
    case Primitive::kMse: need(2); return mse(in[0], in[1]);
  }
  throw std::invalid_argument("evaluate: unknown primitive");
}

}  // namespace tokenflow
