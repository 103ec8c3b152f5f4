#include "mucp/ops.hpp"

#include "mucp/errors.hpp"
#include "mucp/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace mucp {
namespace {

Graph& graph_of(Var v) {
  if (!v.valid()) throw ContractError("operation on an empty variable");
  return *v.graph();
}

void same_graph(Var a, Var b) {
  if (a.graph() != b.graph()) throw ContractError("operands belong to different graphs");
}

void require_rank(Var v, int rank, const char* op) {
  if (v.value().rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(v.shape()));
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
}

MatrixMap as_matrix(std::span<float> s, std::int64_t rows, std::int64_t cols) { return {s.data(), rows, cols}; }
ConstMatrixMap as_matrix(std::span<const float> s, std::int64_t rows, std::int64_t cols) {
  return {s.data(), rows, cols};
}
VectorMap as_vector(std::span<float> s) { return {s.data(), static_cast<Eigen::Index>(s.size())}; }
ConstVectorMap as_vector(std::span<const float> s) { return {s.data(), static_cast<Eigen::Index>(s.size())}; }

}  // namespace

Var matmul(Var a, Var b) {
  same_graph(a, b);
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner extents differ for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Graph& g = graph_of(a);
  Tensor out({a.dim(0), b.dim(1)});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return g.record(std::move(out), {a, b}, [a, b, &g](std::span<const float> gout) {
    auto G = as_matrix(gout, a.dim(0), b.dim(1));
    if (auto ga = g.grad_buffer(a); !ga.empty())
      as_matrix(ga, a.dim(0), a.dim(1)).noalias() += G * b.value().matrix().transpose();
    if (auto gb = g.grad_buffer(b); !gb.empty())
      as_matrix(gb, b.dim(0), b.dim(1)).noalias() += a.value().matrix().transpose() * G;
  });
}

Var linear(Var x, Var w, Var b) {
  same_graph(x, w);
  same_graph(x, b);
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  if (x.dim(1) != w.dim(0) || b.numel() != w.dim(1))
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                         shape_str(b.shape()));
  Graph& g = graph_of(x);
  const auto n = x.dim(0), out_dim = w.dim(1);
  Tensor out({n, out_dim});
  auto O = out.matrix();
  O.noalias() = x.value().matrix() * w.value().matrix();
  O.rowwise() += as_vector(b.value().data()).transpose();
  return g.record(std::move(out), {x, w, b}, [x, w, b, &g, n, out_dim](std::span<const float> gout) {
    auto G = as_matrix(gout, n, out_dim);
    if (auto gx = g.grad_buffer(x); !gx.empty())
      as_matrix(gx, n, x.dim(1)).noalias() += G * w.value().matrix().transpose();
    if (auto gw = g.grad_buffer(w); !gw.empty())
      as_matrix(gw, w.dim(0), out_dim).noalias() += x.value().matrix().transpose() * G;
    if (auto gb = g.grad_buffer(b); !gb.empty()) as_vector(gb) += G.colwise().sum().transpose();
  });
}

Var add(Var a, Var b) {
  same_graph(a, b);
  require_same_shape(a, b, "add");
  Graph& g = graph_of(a);
  Tensor out(a.shape());
  as_vector(out.data()) = as_vector(a.value().data()) + as_vector(b.value().data());
  return g.record(std::move(out), {a, b}, [a, b, &g](std::span<const float> gout) {
    if (auto ga = g.grad_buffer(a); !ga.empty()) as_vector(ga) += as_vector(gout);
    if (auto gb = g.grad_buffer(b); !gb.empty()) as_vector(gb) += as_vector(gout);
  });
}

Var sub(Var a, Var b) {
  same_graph(a, b);
  require_same_shape(a, b, "sub");
  Graph& g = graph_of(a);
  Tensor out(a.shape());
  as_vector(out.data()) = as_vector(a.value().data()) - as_vector(b.value().data());
  return g.record(std::move(out), {a, b}, [a, b, &g](std::span<const float> gout) {
    if (auto ga = g.grad_buffer(a); !ga.empty()) as_vector(ga) += as_vector(gout);
    if (auto gb = g.grad_buffer(b); !gb.empty()) as_vector(gb) -= as_vector(gout);
  });
}

Var mul(Var a, Var b) {
  same_graph(a, b);
  require_same_shape(a, b, "mul");
  Graph& g = graph_of(a);
  Tensor out(a.shape());
  as_vector(out.data()) = as_vector(a.value().data()).cwiseProduct(as_vector(b.value().data()));
  return g.record(std::move(out), {a, b}, [a, b, &g](std::span<const float> gout) {
    if (auto ga = g.grad_buffer(a); !ga.empty())
      as_vector(ga) += as_vector(gout).cwiseProduct(as_vector(b.value().data()));
    if (auto gb = g.grad_buffer(b); !gb.empty())
      as_vector(gb) += as_vector(gout).cwiseProduct(as_vector(a.value().data()));
  });
}

Var div(Var a, Var b) {
  same_graph(a, b);
  require_same_shape(a, b, "div");
  Graph& g = graph_of(a);
  Tensor out(a.shape());
  as_vector(out.data()) = as_vector(a.value().data()).cwiseQuotient(as_vector(b.value().data()));
  return g.record(std::move(out), {a, b}, [a, b, &g](std::span<const float> gout) {
    auto B = as_vector(b.value().data());
    if (auto ga = g.grad_buffer(a); !ga.empty()) as_vector(ga) += as_vector(gout).cwiseQuotient(B);
    if (auto gb = g.grad_buffer(b); !gb.empty())
      as_vector(gb).array() -=
          as_vector(gout).array() * as_vector(a.value().data()).array() / (B.array() * B.array());
  });
}

Var scale(Var x, float factor) {
  Graph& g = graph_of(x);
  Tensor out(x.shape());
  as_vector(out.data()) = as_vector(x.value().data()) * factor;
  return g.record(std::move(out), {x}, [x, &g, factor](std::span<const float> gout) {
    if (auto gx = g.grad_buffer(x); !gx.empty()) as_vector(gx) += as_vector(gout) * factor;
  });
}

Var scale_by(Var x, Var s) {
  same_graph(x, s);
  if (s.numel() != 1) throw DimensionError("scale_by: factor must have one element, got " + shape_str(s.shape()));
  Graph& g = graph_of(x);
  Tensor out(x.shape());
  const float factor = s.value()[0];
  as_vector(out.data()) = as_vector(x.value().data()) * factor;
  return g.record(std::move(out), {x, s}, [x, s, &g](std::span<const float> gout) {
    if (auto gx = g.grad_buffer(x); !gx.empty()) as_vector(gx) += as_vector(gout) * s.value()[0];
    if (auto gs = g.grad_buffer(s); !gs.empty()) gs[0] += as_vector(gout).dot(as_vector(x.value().data()));
  });
}

Var add_row(Var x, Var b) {
  same_graph(x, b);
  require_rank(x, 2, "add_row");
  if (b.numel() != x.dim(1))
    throw DimensionError("add_row: " + shape_str(b.shape()) + " does not match columns of " + shape_str(x.shape()));
  Graph& g = graph_of(x);
  Tensor out(x.shape());
  out.matrix() = x.value().matrix();
  out.matrix().rowwise() += as_vector(b.value().data()).transpose();
  return g.record(std::move(out), {x, b}, [x, b, &g](std::span<const float> gout) {
    auto G = as_matrix(gout, x.dim(0), x.dim(1));
    if (auto gx = g.grad_buffer(x); !gx.empty()) as_vector(gx) += as_vector(gout);
    if (auto gb = g.grad_buffer(b); !gb.empty()) as_vector(gb) += G.colwise().sum().transpose();
  });
}

Var add_tiled(Var x, Var t) {
  same_graph(x, t);
  require_rank(x, 2, "add_tiled");
  require_rank(t, 2, "add_tiled");
  const auto n = x.dim(0), m = x.dim(1), r = t.dim(0);
  if (t.dim(1) != m || n % r != 0)
    throw DimensionError("add_tiled: cannot tile " + shape_str(t.shape()) + " over " + shape_str(x.shape()));
  Graph& g = graph_of(x);
  Tensor out(x.shape());
  auto O = out.matrix();
  auto X = x.value().matrix();
  auto T = t.value().matrix();
  for (std::int64_t blk = 0; blk < n / r; ++blk) O.middleRows(blk * r, r) = X.middleRows(blk * r, r) + T;
  return g.record(std::move(out), {x, t}, [x, t, &g, n, m, r](std::span<const float> gout) {
    if (auto gx = g.grad_buffer(x); !gx.empty()) as_vector(gx) += as_vector(gout);
    if (auto gt = g.grad_buffer(t); !gt.empty()) {
      auto G = as_matrix(gout, n, m);
      auto GT = as_matrix(gt, r, m);
      for (std::int64_t blk = 0; blk < n / r; ++blk) GT += G.middleRows(blk * r, r);
    }
  });
}

Var scale_rows(Var x, Var s) {
  same_graph(x, s);
  require_rank(x, 2, "scale_rows");
  const auto n = x.dim(0), m = x.dim(1);
  if (s.numel() != n)
    throw DimensionError("scale_rows: " + shape_str(s.shape()) + " does not match rows of " + shape_str(x.shape()));
  Graph& g = graph_of(x);
  Tensor out(x.shape());
  out.matrix() = as_vector(s.value().data()).asDiagonal() * x.value().matrix();
  return g.record(std::move(out), {x, s}, [x, s, &g, n, m](std::span<const float> gout) {
    auto G = as_matrix(gout, n, m);
    if (auto gx = g.grad_buffer(x); !gx.empty())
      as_matrix(gx, n, m) += as_vector(s.value().data()).asDiagonal() * G;
    if (auto gs = g.grad_buffer(s); !gs.empty())
      as_vector(gs) += G.cwiseProduct(x.value().matrix()).rowwise().sum();
  });
}

namespace {
constexpr float kGeluK = 0.7978845608028654f, kGeluC = 0.044715f;
}  // namespace

Var gelu(Var x) {
  Graph& g = graph_of(x);
  const auto X = as_vector(x.value().data()).array();
  auto t = std::make_shared<Eigen::ArrayXf>((kGeluK * (X + kGeluC * X.cube())).tanh());
  Tensor out(x.shape());
  as_vector(out.data()).array() = 0.5f * X * (1.0f + *t);
  return g.record(std::move(out), {x}, [x, &g, t](std::span<const float> gout) {
    auto gx = g.grad_buffer(x);
    if (gx.empty()) return;
    const auto X = as_vector(x.value().data()).array();
    const Eigen::ArrayXf& T = *t;
    as_vector(gx).array() += as_vector(gout).array() *
                             (0.5f * (1.0f + T) + 0.5f * X * (1.0f - T.square()) * (kGeluK * (1.0f + 3.0f * kGeluC * X.square())));
  });
}

Var exp(Var x) {
  Graph& g = graph_of(x);
  Tensor out(x.shape());
  as_vector(out.data()) = as_vector(x.value().data()).array().exp().matrix();
  return g.record(std::move(out), {x}, [x, &g](std::span<const float> gout) {
    if (auto gx = g.grad_buffer(x); !gx.empty())
      as_vector(gx).array() += as_vector(gout).array() * as_vector(x.value().data()).array().exp();
  });
}

Var log(Var x) {
  Graph& g = graph_of(x);
  auto xs = x.value().data();
  if (std::any_of(xs.begin(), xs.end(), [](float v) { return !(v > 0.0f); }))
    throw NumericError("log: non-positive input");
  Tensor out(x.shape());
  as_vector(out.data()) = as_vector(xs).array().log().matrix();
  return g.record(std::move(out), {x}, [x, &g](std::span<const float> gout) {
    if (auto gx = g.grad_buffer(x); !gx.empty())
      as_vector(gx).array() += as_vector(gout).array() / as_vector(x.value().data()).array();
  });
}

Var reshape(Var x, Shape shape) {
  Graph& g = graph_of(x);
  Tensor out = x.value().reshaped(std::move(shape));
  return g.record(std::move(out), {x}, [x, &g](std::span<const float> gout) {
    if (auto gx = g.grad_buffer(x); !gx.empty()) as_vector(gx) += as_vector(gout);
  });
}

Var transpose(Var x) {
  require_rank(x, 2, "transpose");
  Graph& g = graph_of(x);
  const auto n = x.dim(0), m = x.dim(1);
  Tensor out({m, n});
  out.matrix() = x.value().matrix().transpose();
  return g.record(std::move(out), {x}, [x, &g, n, m](std::span<const float> gout) {
    if (auto gx = g.grad_buffer(x); !gx.empty()) as_matrix(gx, n, m) += as_matrix(gout, m, n).transpose();
  });
}

Var concat_rows(Var a, Var b) {
  same_graph(a, b);
  require_rank(a, 2, "concat_rows");
  require_rank(b, 2, "concat_rows");
  if (a.dim(1) != b.dim(1))
    throw DimensionError("concat_rows: column counts differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  Graph& g = graph_of(a);
  const auto na = a.numel();
  Tensor out({a.dim(0) + b.dim(0), a.dim(1)});
  std::copy(a.value().data().begin(), a.value().data().end(), out.data().begin());
  std::copy(b.value().data().begin(), b.value().data().end(), out.data().begin() + na);
  return g.record(std::move(out), {a, b}, [a, b, &g, na](std::span<const float> gout) {
    if (auto ga = g.grad_buffer(a); !ga.empty()) as_vector(ga) += as_vector(gout.first(na));
    if (auto gb = g.grad_buffer(b); !gb.empty()) as_vector(gb) += as_vector(gout.subspan(na));
  });
}

Var gather_rows(Var x, std::span<const std::int64_t> idx) {
  require_rank(x, 2, "gather_rows");
  const auto n = x.dim(0), m = x.dim(1);
  for (auto i : idx)
    if (i < 0 || i >= n)
      throw IndexError("gather_rows: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
  Graph& g = graph_of(x);
  const auto len = static_cast<std::int64_t>(idx.size());
  if (len == 0) throw DimensionError("gather_rows: empty index list");
  Tensor out({len, m});
  auto O = out.matrix();
  auto X = x.value().matrix();
  for (std::int64_t r = 0; r < len; ++r) O.row(r) = X.row(idx[static_cast<std::size_t>(r)]);
  std::vector<std::int64_t> keep(idx.begin(), idx.end());
  return g.record(std::move(out), {x}, [x, &g, keep = std::move(keep), n, m](std::span<const float> gout) {
    auto gx = g.grad_buffer(x);
    if (gx.empty()) return;
    auto GX = as_matrix(gx, n, m);
    auto G = as_matrix(gout, static_cast<std::int64_t>(keep.size()), m);
    for (std::size_t r = 0; r < keep.size(); ++r) GX.row(keep[r]) += G.row(static_cast<Eigen::Index>(r));
  });
}

Var scatter_add_rows(Var x, std::span<const std::int64_t> idx, std::int64_t rows) {
  require_rank(x, 2, "scatter_add_rows");
  const auto len = x.dim(0), m = x.dim(1);
  if (static_cast<std::int64_t>(idx.size()) != len)
    throw DimensionError("scatter_add_rows: " + std::to_string(idx.size()) + " indices for " + shape_str(x.shape()));
  for (auto i : idx)
    if (i < 0 || i >= rows)
      throw IndexError("scatter_add_rows: index " + std::to_string(i) + " out of range for " + std::to_string(rows) +
                       " rows");
  Graph& g = graph_of(x);
  Tensor out({rows, m});
  auto O = out.matrix();
  auto X = x.value().matrix();
  for (std::int64_t r = 0; r < len; ++r) O.row(idx[static_cast<std::size_t>(r)]) += X.row(r);
  std::vector<std::int64_t> keep(idx.begin(), idx.end());
  return g.record(std::move(out), {x}, [x, &g, keep = std::move(keep), rows, m, len](std::span<const float> gout) {
    auto gx = g.grad_buffer(x);
    if (gx.empty()) return;
    auto GX = as_matrix(gx, len, m);
    auto G = as_matrix(gout, rows, m);
    for (std::int64_t r = 0; r < len; ++r) GX.row(r) += G.row(keep[static_cast<std::size_t>(r)]);
  });
}

Var take(Var x, std::span<const std::int64_t> idx) {
  const auto n = x.numel();
  for (auto i : idx)
    if (i < 0 || i >= n) throw IndexError("take: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
  if (idx.empty()) throw DimensionError("take: empty index list");
  Graph& g = graph_of(x);
  Tensor out({static_cast<std::int64_t>(idx.size())});
  auto xs = x.value().data();
  for (std::size_t r = 0; r < idx.size(); ++r) out[static_cast<std::int64_t>(r)] = xs[static_cast<std::size_t>(idx[r])];
  std::vector<std::int64_t> keep(idx.begin(), idx.end());
  return g.record(std::move(out), {x}, [x, &g, keep = std::move(keep)](std::span<const float> gout) {
    auto gx = g.grad_buffer(x);
    if (gx.empty()) return;
    for (std::size_t r = 0; r < keep.size(); ++r) gx[static_cast<std::size_t>(keep[r])] += gout[r];
  });
}

Var sum(Var x) {
  Graph& g = graph_of(x);
  Tensor out = Tensor::scalar(as_vector(x.value().data()).sum());
  return g.record(std::move(out), {x}, [x, &g](std::span<const float> gout) {
    if (auto gx = g.grad_buffer(x); !gx.empty()) as_vector(gx).array() += gout[0];
  });
}

Var mean(Var x) {
  const float inv = 1.0f / static_cast<float>(x.numel());
  Graph& g = graph_of(x);
  Tensor out = Tensor::scalar(as_vector(x.value().data()).sum() * inv);
  return g.record(std::move(out), {x}, [x, &g, inv](std::span<const float> gout) {
    if (auto gx = g.grad_buffer(x); !gx.empty()) as_vector(gx).array() += gout[0] * inv;
  });
}

Var column_mean(Var x) {
  require_rank(x, 2, "column_mean");
  const auto n = x.dim(0), m = x.dim(1);
  Graph& g = graph_of(x);
  Tensor out({m});
  as_vector(out.data()) = x.value().matrix().colwise().mean().transpose();
  return g.record(std::move(out), {x}, [x, &g, n, m](std::span<const float> gout) {
    auto gx = g.grad_buffer(x);
    if (gx.empty()) return;
    as_matrix(gx, n, m).rowwise() += as_vector(gout).transpose() / static_cast<float>(n);
  });
}

Var row_sum(Var x) {
  require_rank(x, 2, "row_sum");
  const auto n = x.dim(0), m = x.dim(1);
  Graph& g = graph_of(x);
  Tensor out({n});
  as_vector(out.data()) = x.value().matrix().rowwise().sum();
  return g.record(std::move(out), {x}, [x, &g, n, m](std::span<const float> gout) {
    auto gx = g.grad_buffer(x);
    if (gx.empty()) return;
    as_matrix(gx, n, m).colwise() += as_vector(gout);
  });
}

namespace {

struct AxisLayout {
  std::int64_t outer = 1, extent = 1, inner = 1;
};

AxisLayout axis_layout(const Shape& shape, int& axis, const char* op) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw IndexError(std::string(op) + ": axis out of range for " + shape_str(shape));
  AxisLayout l;
  for (int i = 0; i < axis; ++i) l.outer *= shape[static_cast<std::size_t>(i)];
  l.extent = shape[static_cast<std::size_t>(axis)];
  for (int i = axis + 1; i < rank; ++i) l.inner *= shape[static_cast<std::size_t>(i)];
  return l;
}

}  // namespace

Var softmax(Var x, int axis) {
  const auto l = axis_layout(x.shape(), axis, "softmax");
  Graph& g = graph_of(x);
  Tensor out(x.shape());
  auto xs = x.value().data();
  auto os = out.data();
  std::vector<float> lane(static_cast<std::size_t>(l.extent));
  for (std::int64_t o = 0; o < l.outer; ++o)
    for (std::int64_t i = 0; i < l.inner; ++i) {
      const auto base = o * l.extent * l.inner + i;
      for (std::int64_t a = 0; a < l.extent; ++a) lane[static_cast<std::size_t>(a)] = xs[static_cast<std::size_t>(base + a * l.inner)];
      softmax_inplace<float>(lane);
      for (std::int64_t a = 0; a < l.extent; ++a) os[static_cast<std::size_t>(base + a * l.inner)] = lane[static_cast<std::size_t>(a)];
    }
  auto probs = std::make_shared<std::vector<float>>(os.begin(), os.end());
  return g.record(std::move(out), {x}, [x, &g, l, probs](std::span<const float> gout) {
    auto gx = g.grad_buffer(x);
    if (gx.empty()) return;
    const auto& y = *probs;
    for (std::int64_t o = 0; o < l.outer; ++o)
      for (std::int64_t i = 0; i < l.inner; ++i) {
        const auto base = o * l.extent * l.inner + i;
        float dot = 0.0f;
        for (std::int64_t a = 0; a < l.extent; ++a) {
          const auto k = static_cast<std::size_t>(base + a * l.inner);
          dot += gout[k] * y[k];
        }
        for (std::int64_t a = 0; a < l.extent; ++a) {
          const auto k = static_cast<std::size_t>(base + a * l.inner);
          gx[k] += y[k] * (gout[k] - dot);
        }
      }
  });
}

Var logsumexp(Var x, int axis) {
  const auto l = axis_layout(x.shape(), axis, "logsumexp");
  Shape out_shape;
  for (int i = 0; i < x.value().rank(); ++i)
    if (i != axis) out_shape.push_back(x.shape()[static_cast<std::size_t>(i)]);
  if (out_shape.empty()) out_shape = {1};
  Graph& g = graph_of(x);
  Tensor out(out_shape);
  auto xs = x.value().data();
  std::vector<float> lane(static_cast<std::size_t>(l.extent));
  for (std::int64_t o = 0; o < l.outer; ++o)
    for (std::int64_t i = 0; i < l.inner; ++i) {
      const auto base = o * l.extent * l.inner + i;
      for (std::int64_t a = 0; a < l.extent; ++a) lane[static_cast<std::size_t>(a)] = xs[static_cast<std::size_t>(base + a * l.inner)];
      out[o * l.inner + i] = mucp::logsumexp<float>(lane);
    }
  return g.record(std::move(out), {x}, [x, &g, l](std::span<const float> gout) {
    auto gx = g.grad_buffer(x);
    if (gx.empty()) return;
    auto xs = x.value().data();
    std::vector<float> lane(static_cast<std::size_t>(l.extent));
    for (std::int64_t o = 0; o < l.outer; ++o)
      for (std::int64_t i = 0; i < l.inner; ++i) {
        const auto base = o * l.extent * l.inner + i;
        for (std::int64_t a = 0; a < l.extent; ++a) lane[static_cast<std::size_t>(a)] = xs[static_cast<std::size_t>(base + a * l.inner)];
        softmax_inplace<float>(lane);
        const float go = gout[static_cast<std::size_t>(o * l.inner + i)];
        for (std::int64_t a = 0; a < l.extent; ++a) gx[static_cast<std::size_t>(base + a * l.inner)] += go * lane[static_cast<std::size_t>(a)];
      }
  });
}

Var layer_norm(Var x, Var gain, Var bias, float eps) {
  same_graph(x, gain);
  same_graph(x, bias);
  require_rank(x, 2, "layer_norm");
  const auto n = x.dim(0), m = x.dim(1);
  if (gain.numel() != m || bias.numel() != m)
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match " + shape_str(x.shape()));
  Graph& g = graph_of(x);
  auto xhat = std::make_shared<RowMatrixXf>(n, m);
  auto rstd = std::make_shared<Eigen::VectorXf>(n);
  auto X = x.value().matrix();
  for (std::int64_t r = 0; r < n; ++r) {
    const float mu = X.row(r).mean();
    const float var = (X.row(r).array() - mu).square().mean();
    (*rstd)(r) = 1.0f / std::sqrt(var + eps);
    xhat->row(r) = (X.row(r).array() - mu) * (*rstd)(r);
  }
  Tensor out(x.shape());
  auto gv = as_vector(gain.value().data());
  auto bv = as_vector(bias.value().data());
  out.matrix() = (xhat->array().rowwise() * gv.transpose().array()).rowwise() + bv.transpose().array();
  return g.record(std::move(out), {x, gain, bias}, [x, gain, bias, &g, n, m, xhat, rstd](std::span<const float> gout) {
    auto G = as_matrix(gout, n, m);
    if (auto gg = g.grad_buffer(gain); !gg.empty()) as_vector(gg) += G.cwiseProduct(*xhat).colwise().sum().transpose();
    if (auto gb = g.grad_buffer(bias); !gb.empty()) as_vector(gb) += G.colwise().sum().transpose();
    auto gx = g.grad_buffer(x);
    if (gx.empty()) return;
    auto GX = as_matrix(gx, n, m);
    auto gv = as_vector(gain.value().data());
    for (std::int64_t r = 0; r < n; ++r) {
      Eigen::RowVectorXf dxhat = G.row(r).cwiseProduct(gv.transpose());
      const float mean_d = dxhat.mean();
      const float mean_dx = dxhat.dot(xhat->row(r)) / static_cast<float>(m);
      GX.row(r).array() += (*rstd)(r) * (dxhat.array() - mean_d - xhat->row(r).array() * mean_dx);
    }
  });
}

Var l2_normalize_rows(Var x, float eps) {
  require_rank(x, 2, "l2_normalize_rows");
  const auto n = x.dim(0), m = x.dim(1);
  Graph& g = graph_of(x);
  auto norms = std::make_shared<Eigen::VectorXf>(x.value().matrix().rowwise().norm());
  for (Eigen::Index r = 0; r < norms->size(); ++r) (*norms)(r) = std::max((*norms)(r), eps);
  Tensor out(x.shape());
  out.matrix() = norms->cwiseInverse().asDiagonal() * x.value().matrix();
  auto y = std::make_shared<RowMatrixXf>(out.matrix());
  return g.record(std::move(out), {x}, [x, &g, n, m, norms, y](std::span<const float> gout) {
    auto gx = g.grad_buffer(x);
    if (gx.empty()) return;
    auto G = as_matrix(gout, n, m);
    auto GX = as_matrix(gx, n, m);
    for (std::int64_t r = 0; r < n; ++r) {
      const float d = G.row(r).dot(y->row(r));
      GX.row(r) += (G.row(r) - d * y->row(r)) / (*norms)(r);
    }
  });
}

Var multi_head_attention(Var qkv, std::int64_t batch, std::int64_t seq, std::int64_t heads,
                         std::span<const std::uint8_t> key_padding) {
  require_rank(qkv, 2, "multi_head_attention");
  const auto rows = qkv.dim(0), width = qkv.dim(1);
  if (rows != batch * seq || width % 3 != 0 || (width / 3) % heads != 0)
    throw DimensionError("multi_head_attention: " + shape_str(qkv.shape()) + " incompatible with batch " +
                         std::to_string(batch) + ", seq " + std::to_string(seq) + ", heads " + std::to_string(heads));
  if (!key_padding.empty() && static_cast<std::int64_t>(key_padding.size()) != rows)
    throw DimensionError("multi_head_attention: key padding mask has wrong length");
  const auto d = width / 3, dh = d / heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  using Strided = Eigen::Map<const RowMatrixXf, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMatrixXf, 0, Eigen::OuterStride<>>;

  Graph& g = graph_of(qkv);
  Tensor out({rows, d});
  // Attention probabilities per (sample, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<RowMatrixXf>>(static_cast<std::size_t>(batch * heads));
  const float* src = qkv.value().data().data();
  float* dst = out.data().data();
  for (std::int64_t b = 0; b < batch; ++b) {
    Eigen::RowVectorXf mask_bias = Eigen::RowVectorXf::Zero(seq);
    if (!key_padding.empty()) {
      bool any_key = false;
      for (std::int64_t t = 0; t < seq; ++t) {
        if (key_padding[static_cast<std::size_t>(b * seq + t)])
          mask_bias(t) = -std::numeric_limits<float>::infinity();
        else
          any_key = true;
      }
      if (!any_key) throw ContractError("multi_head_attention: sample " + std::to_string(b) + " has no valid keys");
    }
    for (std::int64_t h = 0; h < heads; ++h) {
      const float* base = src + b * seq * width + h * dh;
      Strided Q(base, seq, dh, Eigen::OuterStride<>(width));
      Strided K(base + d, seq, dh, Eigen::OuterStride<>(width));
      Strided V(base + 2 * d, seq, dh, Eigen::OuterStride<>(width));
      RowMatrixXf& P = (*probs)[static_cast<std::size_t>(b * heads + h)];
      P.noalias() = Q * K.transpose();
      P *= inv_sqrt;
      P.rowwise() += mask_bias;
      for (std::int64_t t = 0; t < seq; ++t) {
        const float mx = P.row(t).maxCoeff();
        P.row(t) = (P.row(t).array() - mx).exp();
        P.row(t) /= P.row(t).sum();
      }
      StridedMut O(dst + b * seq * d + h * dh, seq, dh, Eigen::OuterStride<>(d));
      O.noalias() = P * V;
    }
  }
  return g.record(std::move(out), {qkv}, [qkv, &g, batch, seq, heads, d, dh, width, inv_sqrt, probs](
                                              std::span<const float> gout) {
    auto gq = g.grad_buffer(qkv);
    if (gq.empty()) return;
    const float* src = qkv.value().data().data();
    RowMatrixXf dP, dS;
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t h = 0; h < heads; ++h) {
        const float* base = src + b * seq * width + h * dh;
        Strided Q(base, seq, dh, Eigen::OuterStride<>(width));
        Strided K(base + d, seq, dh, Eigen::OuterStride<>(width));
        Strided V(base + 2 * d, seq, dh, Eigen::OuterStride<>(width));
        Strided dO(gout.data() + b * seq * d + h * dh, seq, dh, Eigen::OuterStride<>(d));
        float* gbase = gq.data() + b * seq * width + h * dh;
        StridedMut dQ(gbase, seq, dh, Eigen::OuterStride<>(width));
        StridedMut dK(gbase + d, seq, dh, Eigen::OuterStride<>(width));
        StridedMut dV(gbase + 2 * d, seq, dh, Eigen::OuterStride<>(width));
        const RowMatrixXf& P = (*probs)[static_cast<std::size_t>(b * heads + h)];
        dV.noalias() += P.transpose() * dO;
        dP.noalias() = dO * V.transpose();
        dS = P.cwiseProduct(dP);
        const Eigen::VectorXf row_dot = dS.rowwise().sum();
        dS -= (P.array().colwise() * row_dot.array()).matrix();
        dS *= inv_sqrt;
        dQ.noalias() += dS * K;
        dK.noalias() += dS.transpose() * Q;
      }
  });
}

}  // namespace mucp
