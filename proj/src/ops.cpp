#include "dyns/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace dyns {

namespace {

template <typename S>
using MapM = Eigen::Map<RowMat<S>>;
template <typename S>
using CMapM = Eigen::Map<const RowMat<S>>;
template <typename S>
using CMapRow = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>;

template <typename S>
BasicTensor<S> make(Shape shape, Vec<S> data) {
  return BasicTensor<S>(std::move(shape), std::move(data), detail::Unchecked{});
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_to_string(a) + " and " +
                       shape_to_string(b));
}

// Layout of a suffix broadcast: the big operand viewed as reps x inner, the
// small one as a single row of `inner` values.
struct Broadcast {
  bool a_is_big = true;
  Index reps = 1;
  Index inner = 1;
  Shape out;
};

Broadcast plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  Broadcast p;
  if (is_suffix(b, a)) {
    p.a_is_big = true;
    p.out = a;
    p.inner = shape_numel(b);
  } else if (is_suffix(a, b)) {
    p.a_is_big = false;
    p.out = b;
    p.inner = shape_numel(a);
  } else {
    shape_mismatch(op, a, b);
  }
  p.reps = shape_numel(p.out) / p.inner;
  return p;
}

// Sum of a (reps x inner) buffer over its rows.
template <typename S>
Vec<S> reduce_reps(const Vec<S>& g, Index reps, Index inner) {
  if (reps == 1) return g;
  return CMapM<S>(g.data(), reps, inner).colwise().sum().transpose();
}

template <typename S, typename Fwd, typename Dfdx>
BasicTensor<S> unary(const BasicTensor<S>& a, Fwd fwd, Dfdx dfdx) {
  Vec<S> out = a.data().unaryExpr(fwd);
  auto result = make<S>(a.shape(), std::move(out));
  const BasicTensor<S> saved_in = a;
  const BasicTensor<S> saved_out = result;
  return record_op<S>(result, {&a}, [saved_in, saved_out, dfdx](const Vec<S>& g, auto& sink) {
    const Vec<S>& x = saved_in.data();
    const Vec<S>& y = saved_out.data();
    Vec<S>& ga = sink.buffer(0);
    for (Index i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
  });
}

template <typename S>
S stable_softplus(S x) {
  return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename S>
S stable_sigmoid(S x) {
  if (x >= 0) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

// Row-major strides for a shape.
std::vector<Index> strides_of(const Shape& shape) {
  std::vector<Index> strides(shape.size(), 1);
  for (Index i = static_cast<Index>(shape.size()) - 2; i >= 0; --i)
    strides[static_cast<std::size_t>(i)] = strides[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];
  return strides;
}

// dst[permuted index] = src[index], where out axis i is input axis axes[i].
template <typename S>
void permute_copy(const Vec<S>& src, const Shape& in_shape, const std::vector<Index>& axes, Vec<S>& dst) {
  const std::size_t r = in_shape.size();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
  const auto in_strides = strides_of(in_shape);
  // stride in the input for each output axis
  std::vector<Index> step(r);
  for (std::size_t i = 0; i < r; ++i) step[i] = in_strides[static_cast<std::size_t>(axes[i])];
  std::vector<Index> counter(r, 0);
  Index src_off = 0;
  const Index n = src.size();
  for (Index flat = 0; flat < n; ++flat) {
    dst[flat] = src[src_off];
    for (Index ax = static_cast<Index>(r) - 1; ax >= 0; --ax) {
      const auto u = static_cast<std::size_t>(ax);
      if (++counter[u] < out_shape[u]) {
        src_off += step[u];
        break;
      }
      src_off -= step[u] * (out_shape[u] - 1);
      counter[u] = 0;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- binary

template <typename S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  const Broadcast p = plan_broadcast("add", a.shape(), b.shape());
  const BasicTensor<S>& big = p.a_is_big ? a : b;
  const BasicTensor<S>& small = p.a_is_big ? b : a;
  Vec<S> out = big.data();
  MapM<S>(out.data(), p.reps, p.inner).rowwise() += CMapRow<S>(small.data().data(), p.inner);
  return record_op<S>(make<S>(p.out, std::move(out)), {&a, &b}, [p](const Vec<S>& g, auto& sink) {
    const std::size_t big_i = p.a_is_big ? 0 : 1;
    if (sink.wants(big_i)) sink.add(big_i, g);
    if (sink.wants(1 - big_i)) sink.add(1 - big_i, reduce_reps<S>(g, p.reps, p.inner));
  });
}

template <typename S>
BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  const Broadcast p = plan_broadcast("sub", a.shape(), b.shape());
  Vec<S> out(shape_numel(p.out));
  MapM<S> o(out.data(), p.reps, p.inner);
  if (p.a_is_big) {
    o = CMapM<S>(a.data().data(), p.reps, p.inner);
    o.rowwise() -= CMapRow<S>(b.data().data(), p.inner);
  } else {
    o = -CMapM<S>(b.data().data(), p.reps, p.inner);
    o.rowwise() += CMapRow<S>(a.data().data(), p.inner);
  }
  return record_op<S>(make<S>(p.out, std::move(out)), {&a, &b}, [p](const Vec<S>& g, auto& sink) {
    if (sink.wants(0)) sink.add(0, p.a_is_big ? g : reduce_reps<S>(g, p.reps, p.inner));
    if (sink.wants(1)) sink.add(1, p.a_is_big ? Vec<S>(-reduce_reps<S>(g, p.reps, p.inner)) : Vec<S>(-g));
  });
}

template <typename S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  const Broadcast p = plan_broadcast("mul", a.shape(), b.shape());
  const BasicTensor<S> big = p.a_is_big ? a : b;
  const BasicTensor<S> small = p.a_is_big ? b : a;
  Vec<S> out = big.data();
  {
    MapM<S> o(out.data(), p.reps, p.inner);
    const CMapRow<S> row(small.data().data(), p.inner);
    for (Index r = 0; r < p.reps; ++r) o.row(r).array() *= row.array();
  }
  return record_op<S>(make<S>(p.out, std::move(out)), {&a, &b}, [p, big, small](const Vec<S>& g, auto& sink) {
    const std::size_t big_i = p.a_is_big ? 0 : 1;
    const std::size_t small_i = 1 - big_i;
    if (sink.wants(big_i)) {
      Vec<S>& gb = sink.buffer(big_i);
      MapM<S> dst(gb.data(), p.reps, p.inner);
      const CMapM<S> gm(g.data(), p.reps, p.inner);
      const CMapRow<S> row(small.data().data(), p.inner);
      for (Index r = 0; r < p.reps; ++r) dst.row(r).array() += gm.row(r).array() * row.array();
    }
    if (sink.wants(small_i)) {
      Vec<S> prod = g.cwiseProduct(big.data());
      sink.add(small_i, reduce_reps<S>(prod, p.reps, p.inner));
    }
  });
}

// ---------------------------------------------------------------- unary

template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& a, S factor) {
  return record_op<S>(make<S>(a.shape(), a.data() * factor), {&a},
                      [factor](const Vec<S>& g, auto& sink) { sink.add(0, g * factor); });
}

template <typename S>
BasicTensor<S> add_scalar(const BasicTensor<S>& a, S value) {
  return record_op<S>(make<S>(a.shape(), a.data().array() + value), {&a},
                      [](const Vec<S>& g, auto& sink) { sink.add(0, g); });
}

template <typename S>
BasicTensor<S> relu(const BasicTensor<S>& a) {
  return unary(a, [](S x) { return x > S(0) ? x : S(0); }, [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <typename S>
BasicTensor<S> exp(const BasicTensor<S>& a) {
  return unary(a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
BasicTensor<S> log(const BasicTensor<S>& a) {
  if ((a.data().array() <= S(0)).any()) throw NumericalError("log of a non-positive value");
  return unary(a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <typename S>
BasicTensor<S> softplus(const BasicTensor<S>& a) {
  return unary(a, [](S x) { return stable_softplus(x); }, [](S x, S) { return stable_sigmoid(x); });
}

template <typename S>
BasicTensor<S> sigmoid(const BasicTensor<S>& a) {
  return unary(a, [](S x) { return stable_sigmoid(x); }, [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
BasicTensor<S> tanh(const BasicTensor<S>& a) {
  return unary(a, [](S x) { return std::tanh(x); }, [](S, S y) { return S(1) - y * y; });
}

// ---------------------------------------------------------------- reductions

template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& a) {
  return record_op<S>(make<S>({}, Vec<S>::Constant(1, a.data().sum())), {&a},
                      [](const Vec<S>& g, auto& sink) { sink.buffer(0).array() += g[0]; });
}

template <typename S>
BasicTensor<S> mean(const BasicTensor<S>& a) {
  const S inv = S(1) / static_cast<S>(a.numel());
  return record_op<S>(make<S>({}, Vec<S>::Constant(1, a.data().sum() * inv)), {&a},
                      [inv](const Vec<S>& g, auto& sink) { sink.buffer(0).array() += g[0] * inv; });
}

template <typename S>
BasicTensor<S> mean_leading(const BasicTensor<S>& a) {
  if (a.rank() < 1) throw DimensionError("mean_leading needs rank >= 1");
  const Index rows = a.shape()[0];
  const Index inner = a.numel() / rows;
  Shape out_shape(a.shape().begin() + 1, a.shape().end());
  Vec<S> out = CMapM<S>(a.data().data(), rows, inner).colwise().mean().transpose();
  return record_op<S>(make<S>(std::move(out_shape), std::move(out)), {&a}, [rows, inner](const Vec<S>& g, auto& sink) {
    MapM<S> dst(sink.buffer(0).data(), rows, inner);
    const S inv = S(1) / static_cast<S>(rows);
    dst.rowwise() += (g.transpose() * inv);
  });
}

// ---------------------------------------------------------------- shape

template <typename S>
BasicTensor<S> reshape(const BasicTensor<S>& a, Shape shape) {
  for (Index e : shape)
    if (e <= 0) throw DimensionError("reshape: extents must be positive, got " + shape_to_string(shape));
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) + " as " + shape_to_string(shape));
  return record_op<S>(make<S>(std::move(shape), a.data()), {&a},
                      [](const Vec<S>& g, auto& sink) { sink.add(0, g); });
}

template <typename S>
BasicTensor<S> transpose(const BasicTensor<S>& a) {
  if (a.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_to_string(a.shape()));
  std::vector<Index> axes(static_cast<std::size_t>(a.rank()));
  std::iota(axes.begin(), axes.end(), Index{0});
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(a, axes);
}

template <typename S>
BasicTensor<S> permute(const BasicTensor<S>& a, const std::vector<Index>& axes) {
  const auto r = static_cast<std::size_t>(a.rank());
  if (axes.size() != r) throw DimensionError("permute: axis list does not match rank of " + shape_to_string(a.shape()));
  std::vector<Index> inverse(r, -1);
  for (std::size_t i = 0; i < r; ++i) {
    const Index ax = axes[i];
    if (ax < 0 || ax >= static_cast<Index>(r) || inverse[static_cast<std::size_t>(ax)] != -1)
      throw DimensionError("permute: axes must be a permutation");
    inverse[static_cast<std::size_t>(ax)] = static_cast<Index>(i);
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[static_cast<std::size_t>(axes[i])];
  Vec<S> out(a.numel());
  permute_copy<S>(a.data(), a.shape(), axes, out);
  return record_op<S>(make<S>(out_shape, std::move(out)), {&a}, [out_shape, inverse](const Vec<S>& g, auto& sink) {
    Vec<S> back(g.size());
    permute_copy<S>(g, out_shape, inverse, back);
    sink.add(0, back);
  });
}

template <typename S>
BasicTensor<S> concat_rows(std::span<const BasicTensor<S>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const Shape& first = parts[0].shape();
  if (first.empty()) throw DimensionError("concat_rows needs rank >= 1");
  Shape out_shape = first;
  out_shape[0] = 0;
  std::vector<Index> sizes;
  std::vector<const BasicTensor<S>*> inputs;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<Index>(first.size()) || !std::equal(first.begin() + 1, first.end(), p.shape().begin() + 1))
      shape_mismatch("concat_rows", first, p.shape());
    out_shape[0] += p.shape()[0];
    sizes.push_back(p.numel());
    inputs.push_back(&p);
  }
  Vec<S> out(shape_numel(out_shape));
  Index off = 0;
  for (const auto& p : parts) {
    out.segment(off, p.numel()) = p.data();
    off += p.numel();
  }
  return record_op<S>(make<S>(std::move(out_shape), std::move(out)),
                      std::span<const BasicTensor<S>* const>(inputs.data(), inputs.size()),
                      [sizes](const Vec<S>& g, auto& sink) {
                        Index o = 0;
                        for (std::size_t i = 0; i < sizes.size(); ++i) {
                          if (sink.wants(i)) sink.add(i, g.segment(o, sizes[i]));
                          o += sizes[i];
                        }
                      });
}

template <typename S>
BasicTensor<S> slice_rows(const BasicTensor<S>& a, Index begin, Index count) {
  if (a.rank() < 1) throw DimensionError("slice_rows needs rank >= 1");
  if (begin < 0 || count <= 0 || begin + count > a.shape()[0])
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of bounds for " + shape_to_string(a.shape()));
  const Index inner = a.numel() / a.shape()[0];
  Shape out_shape = a.shape();
  out_shape[0] = count;
  Vec<S> out = a.data().segment(begin * inner, count * inner);
  return record_op<S>(make<S>(std::move(out_shape), std::move(out)), {&a},
                      [begin, count, inner](const Vec<S>& g, auto& sink) {
                        sink.buffer(0).segment(begin * inner, count * inner) += g;
                      });
}

template <typename S>
BasicTensor<S> gather_rows(const BasicTensor<S>& table, std::span<const Index> ids) {
  if (table.rank() != 2) throw DimensionError("gather_rows needs a rank-2 table, got " + shape_to_string(table.shape()));
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  const Index rows = table.shape()[0];
  const Index width = table.shape()[1];
  std::vector<Index> idx(ids.begin(), ids.end());
  for (Index id : idx)
    if (id < 0 || id >= rows)
      throw DimensionError("gather_rows: id " + std::to_string(id) + " outside table of " + std::to_string(rows) + " rows");
  Vec<S> out(static_cast<Index>(idx.size()) * width);
  for (std::size_t i = 0; i < idx.size(); ++i)
    out.segment(static_cast<Index>(i) * width, width) = table.data().segment(idx[i] * width, width);
  return record_op<S>(make<S>({static_cast<Index>(idx.size()), width}, std::move(out)), {&table},
                      [idx, width](const Vec<S>& g, auto& sink) {
                        Vec<S>& gt = sink.buffer(0);
                        for (std::size_t i = 0; i < idx.size(); ++i)
                          gt.segment(idx[i] * width, width) += g.segment(static_cast<Index>(i) * width, width);
                      });
}

// ---------------------------------------------------------------- matmul

template <typename S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.rank() < 2 || b.rank() < 2) shape_mismatch("matmul", a.shape(), b.shape());
  const Index m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) shape_mismatch("matmul", a.shape(), b.shape());

  Shape out_shape = a.shape();
  out_shape.back() = n;

  if (b.rank() == 2) {
    // Shared right operand: fold the batch into the row dimension.
    const Index rows = a.numel() / k;
    Vec<S> out(rows * n);
    MapM<S>(out.data(), rows, n).noalias() = CMapM<S>(a.data().data(), rows, k) * CMapM<S>(b.data().data(), k, n);
    const BasicTensor<S> sa = a, sb = b;
    return record_op<S>(make<S>(std::move(out_shape), std::move(out)), {&a, &b},
                        [sa, sb, rows, k, n](const Vec<S>& g, auto& sink) {
                          const CMapM<S> gm(g.data(), rows, n);
                          if (sink.wants(0))
                            MapM<S>(sink.buffer(0).data(), rows, k).noalias() += gm * CMapM<S>(sb.data().data(), k, n).transpose();
                          if (sink.wants(1))
                            MapM<S>(sink.buffer(1).data(), k, n).noalias() += CMapM<S>(sa.data().data(), rows, k).transpose() * gm;
                        });
  }

  if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
    shape_mismatch("matmul", a.shape(), b.shape());
  const Index batch = a.numel() / (m * k);
  Vec<S> out(batch * m * n);
  for (Index i = 0; i < batch; ++i)
    MapM<S>(out.data() + i * m * n, m, n).noalias() =
        CMapM<S>(a.data().data() + i * m * k, m, k) * CMapM<S>(b.data().data() + i * k * n, k, n);
  const BasicTensor<S> sa = a, sb = b;
  return record_op<S>(make<S>(std::move(out_shape), std::move(out)), {&a, &b},
                      [sa, sb, batch, m, k, n](const Vec<S>& g, auto& sink) {
                        for (Index i = 0; i < batch; ++i) {
                          const CMapM<S> gm(g.data() + i * m * n, m, n);
                          if (sink.wants(0))
                            MapM<S>(sink.buffer(0).data() + i * m * k, m, k).noalias() +=
                                gm * CMapM<S>(sb.data().data() + i * k * n, k, n).transpose();
                          if (sink.wants(1))
                            MapM<S>(sink.buffer(1).data() + i * k * n, k, n).noalias() +=
                                CMapM<S>(sa.data().data() + i * m * k, m, k).transpose() * gm;
                        }
                      });
}

// ---------------------------------------------------------------- softmax / norm

template <typename S>
BasicTensor<S> masked_softmax_rows(const BasicTensor<S>& a, std::span<const bool> keep) {
  if (a.rank() < 1) throw DimensionError("softmax_rows needs rank >= 1");
  const Index cols = a.dim(-1);
  const Index rows = a.numel() / cols;
  std::vector<bool> mask(static_cast<std::size_t>(cols), true);
  if (!keep.empty()) {
    if (static_cast<Index>(keep.size()) != cols)
      throw DimensionError("softmax mask has " + std::to_string(keep.size()) + " entries for rows of " +
                           std::to_string(cols));
    mask.assign(keep.begin(), keep.end());
    if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
      throw ContractError("softmax mask removes every column");
  }
  Vec<S> out(a.numel());
  const CMapM<S> x(a.data().data(), rows, cols);
  MapM<S> y(out.data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Index c = 0; c < cols; ++c)
      if (mask[static_cast<std::size_t>(c)]) mx = std::max(mx, x(r, c));
    S total = 0;
    for (Index c = 0; c < cols; ++c) {
      const S e = mask[static_cast<std::size_t>(c)] ? std::exp(x(r, c) - mx) : S(0);
      y(r, c) = e;
      total += e;
    }
    y.row(r) /= total;
  }
  auto result = make<S>(a.shape(), std::move(out));
  const BasicTensor<S> saved = result;
  return record_op<S>(result, {&a}, [saved, rows, cols](const Vec<S>& g, auto& sink) {
    const CMapM<S> y(saved.data().data(), rows, cols);
    const CMapM<S> gm(g.data(), rows, cols);
    MapM<S> dst(sink.buffer(0).data(), rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const S dot = gm.row(r).dot(y.row(r));
      dst.row(r).array() += y.row(r).array() * (gm.row(r).array() - dot);
    }
  });
}

template <typename S>
BasicTensor<S> softmax_rows(const BasicTensor<S>& a) {
  return masked_softmax_rows(a, std::span<const bool>{});
}

template <typename S>
BasicTensor<S> rms_norm_rows(const BasicTensor<S>& a, S eps) {
  const Index cols = a.dim(-1);
  const Index rows = a.numel() / cols;
  Vec<S> out(a.numel());
  Vec<S> inv_rms(rows);
  const CMapM<S> x(a.data().data(), rows, cols);
  MapM<S> y(out.data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    inv_rms[r] = S(1) / std::sqrt(x.row(r).squaredNorm() / static_cast<S>(cols) + eps);
    y.row(r) = x.row(r) * inv_rms[r];
  }
  auto result = make<S>(a.shape(), std::move(out));
  const BasicTensor<S> saved = result;
  return record_op<S>(result, {&a}, [saved, inv_rms, rows, cols](const Vec<S>& g, auto& sink) {
    const CMapM<S> y(saved.data().data(), rows, cols);
    const CMapM<S> gm(g.data(), rows, cols);
    MapM<S> dst(sink.buffer(0).data(), rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const S proj = gm.row(r).dot(y.row(r)) / static_cast<S>(cols);
      dst.row(r) += (gm.row(r) - y.row(r) * proj) * inv_rms[r];
    }
  });
}

// ---------------------------------------------------------------- conv

template <typename S>
BasicTensor<S> grouped_conv1d(const BasicTensor<S>& x, Index kernel_size, const BasicTensor<S>& weights,
                              Index group_count) {
  if (x.rank() != 2) throw DimensionError("grouped_conv1d: input must be [T, C], got " + shape_to_string(x.shape()));
  if (weights.rank() != 4)
    throw DimensionError("grouped_conv1d: weights must be [G, C_out/G, C_in/G, k], got " + shape_to_string(weights.shape()));
  if (kernel_size <= 0 || kernel_size % 2 == 0)
    throw ConfigError("grouped_conv1d: kernel_size must be odd and positive, got " + std::to_string(kernel_size));
  const Index steps = x.shape()[0];
  const Index c_in = x.shape()[1];
  if (group_count <= 0 || c_in % group_count != 0)
    throw ConfigError("grouped_conv1d: group_count " + std::to_string(group_count) + " does not divide " +
                      std::to_string(c_in) + " input channels");
  const Index gw = weights.shape()[0];
  const Index co = weights.shape()[1];
  const Index ci = weights.shape()[2];
  if (weights.shape()[3] != kernel_size || ci != c_in / group_count || (gw != 1 && gw != group_count))
    throw DimensionError("grouped_conv1d: weights " + shape_to_string(weights.shape()) + " do not fit input " +
                         shape_to_string(x.shape()) + " with " + std::to_string(group_count) + " groups");
  const Index c_out = co * group_count;
  const Index pad = (kernel_size - 1) / 2;

  auto w_at = [=](const S* w, Index g, Index o, Index i, Index j) {
    const Index gi = gw == 1 ? 0 : g;
    return w[((gi * co + o) * ci + i) * kernel_size + j];
  };

  Vec<S> out = Vec<S>::Zero(steps * c_out);
  const S* xd = x.data().data();
  const S* wd = weights.data().data();
  for (Index t = 0; t < steps; ++t)
    for (Index g = 0; g < group_count; ++g)
      for (Index o = 0; o < co; ++o) {
        S acc = 0;
        for (Index i = 0; i < ci; ++i)
          for (Index j = 0; j < kernel_size; ++j) {
            const Index src = t + j - pad;
            if (src < 0 || src >= steps) continue;
            acc += w_at(wd, g, o, i, j) * xd[src * c_in + g * ci + i];
          }
        out[t * c_out + g * co + o] = acc;
      }

  const BasicTensor<S> sx = x, sw = weights;
  return record_op<S>(make<S>({steps, c_out}, std::move(out)), {&x, &weights},
                      [=](const Vec<S>& grad, auto& sink) {
                        const S* xs = sx.data().data();
                        const S* ws = sw.data().data();
                        S* gx = sink.wants(0) ? sink.buffer(0).data() : nullptr;
                        S* gwt = sink.wants(1) ? sink.buffer(1).data() : nullptr;
                        for (Index t = 0; t < steps; ++t)
                          for (Index g = 0; g < group_count; ++g)
                            for (Index o = 0; o < co; ++o) {
                              const S go = grad[t * c_out + g * co + o];
                              if (go == S(0)) continue;
                              const Index gi = gw == 1 ? 0 : g;
                              for (Index i = 0; i < ci; ++i)
                                for (Index j = 0; j < kernel_size; ++j) {
                                  const Index src = t + j - pad;
                                  if (src < 0 || src >= steps) continue;
                                  const Index xi = src * c_in + g * ci + i;
                                  if (gx) gx[xi] += go * w_at(ws, g, o, i, j);
                                  if (gwt) gwt[((gi * co + o) * ci + i) * kernel_size + j] += go * xs[xi];
                                }
                            }
                      });
}

// ---------------------------------------------------------------- gram

template <typename S>
BasicTensor<S> pairwise_gram(const BasicTensor<S>& h, S factor) {
  if (h.rank() < 2) throw DimensionError("pairwise_gram needs [..., N, d], got " + shape_to_string(h.shape()));
  const Index n = h.dim(-2), d = h.dim(-1);
  const Index batch = h.numel() / (n * d);
  Shape out_shape = h.shape();
  out_shape.back() = n;
  Vec<S> out(batch * n * n);
  for (Index b = 0; b < batch; ++b) {
    const CMapM<S> hb(h.data().data() + b * n * d, n, d);
    MapM<S> gb(out.data() + b * n * n, n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = i; j < n; ++j) {
        S acc = 0;
        for (Index c = 0; c < d; ++c) acc += hb(i, c) * hb(j, c);
        gb(i, j) = acc * factor;
        gb(j, i) = gb(i, j);
      }
  }
  const BasicTensor<S> sh = h;
  return record_op<S>(make<S>(std::move(out_shape), std::move(out)), {&h},
                      [sh, batch, n, d, factor](const Vec<S>& g, auto& sink) {
                        for (Index b = 0; b < batch; ++b) {
                          const CMapM<S> gm(g.data() + b * n * n, n, n);
                          const CMapM<S> hb(sh.data().data() + b * n * d, n, d);
                          RowMat<S> sym = (gm + gm.transpose()) * factor;
                          MapM<S>(sink.buffer(0).data() + b * n * d, n, d).noalias() += sym * hb;
                        }
                      });
}

// ---------------------------------------------------------------- attention

template <typename S>
BasicTensor<S> multi_head_attention(const BasicTensor<S>& q, const BasicTensor<S>& k, const BasicTensor<S>& v,
                                    Index heads) {
  if (q.rank() < 2 || q.rank() > 3) throw DimensionError("attention expects [L, d] or [B, L, d], got " + shape_to_string(q.shape()));
  if (k.shape() != v.shape() || q.rank() != k.rank() || q.dim(-1) != k.dim(-1))
    shape_mismatch("multi_head_attention", q.shape(), k.shape());
  const Index d = q.dim(-1);
  if (heads <= 0 || d % heads != 0)
    throw ConfigError("attention: width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
  const Index hd = d / heads;
  const Index batch = q.rank() == 3 ? q.dim(0) : 1;
  const Index lq = q.dim(-2), lk = k.dim(-2);

  auto split = [&](const BasicTensor<S>& t, Index len) {
    auto r = reshape(t, {batch, len, heads, hd});
    r = permute(r, {0, 2, 1, 3});
    return reshape(r, {batch * heads, len, hd});
  };
  const auto qh = split(q, lq);
  const auto kh = split(k, lk);
  const auto vh = split(v, lk);
  auto scores = scale(matmul(qh, transpose(kh)), S(1) / std::sqrt(static_cast<S>(hd)));
  auto attn = softmax_rows(scores);
  auto ctx = matmul(attn, vh);
  ctx = permute(reshape(ctx, {batch, heads, lq, hd}), {0, 2, 1, 3});
  return reshape(ctx, q.shape());
}

#define DYNS_INSTANTIATE_OPS(S)                                                                   \
  template BasicTensor<S> add(const BasicTensor<S>&, const BasicTensor<S>&);                     \
  template BasicTensor<S> sub(const BasicTensor<S>&, const BasicTensor<S>&);                     \
  template BasicTensor<S> mul(const BasicTensor<S>&, const BasicTensor<S>&);                     \
  template BasicTensor<S> scale(const BasicTensor<S>&, S);                                       \
  template BasicTensor<S> add_scalar(const BasicTensor<S>&, S);                                  \
  template BasicTensor<S> relu(const BasicTensor<S>&);                                           \
  template BasicTensor<S> exp(const BasicTensor<S>&);                                            \
  template BasicTensor<S> log(const BasicTensor<S>&);                                            \
  template BasicTensor<S> softplus(const BasicTensor<S>&);                                       \
  template BasicTensor<S> sigmoid(const BasicTensor<S>&);                                        \
  template BasicTensor<S> tanh(const BasicTensor<S>&);                                           \
  template BasicTensor<S> sum(const BasicTensor<S>&);                                            \
  template BasicTensor<S> mean(const BasicTensor<S>&);                                           \
  template BasicTensor<S> mean_leading(const BasicTensor<S>&);                                   \
  template BasicTensor<S> reshape(const BasicTensor<S>&, Shape);                                 \
  template BasicTensor<S> transpose(const BasicTensor<S>&);                                      \
  template BasicTensor<S> permute(const BasicTensor<S>&, const std::vector<Index>&);             \
  template BasicTensor<S> concat_rows(std::span<const BasicTensor<S>>);                          \
  template BasicTensor<S> slice_rows(const BasicTensor<S>&, Index, Index);                       \
  template BasicTensor<S> gather_rows(const BasicTensor<S>&, std::span<const Index>);            \
  template BasicTensor<S> matmul(const BasicTensor<S>&, const BasicTensor<S>&);                  \
  template BasicTensor<S> softmax_rows(const BasicTensor<S>&);                                   \
  template BasicTensor<S> masked_softmax_rows(const BasicTensor<S>&, std::span<const bool>);     \
  template BasicTensor<S> rms_norm_rows(const BasicTensor<S>&, S);                               \
  template BasicTensor<S> grouped_conv1d(const BasicTensor<S>&, Index, const BasicTensor<S>&, Index); \
  template BasicTensor<S> pairwise_gram(const BasicTensor<S>&, S);                               \
  template BasicTensor<S> multi_head_attention(const BasicTensor<S>&, const BasicTensor<S>&,     \
                                               const BasicTensor<S>&, Index);

DYNS_INSTANTIATE_OPS(double)
DYNS_INSTANTIATE_OPS(float)

}  // namespace dyns
