#pragma once

// Differentiable primitives. Every op here records its own backward rule.

#include "chainflow/tensor.hpp"

#include <algorithm>
#include <limits>
#include <span>

namespace chainflow {

namespace detail {

template <typename S>
BasicGraph<S>& same_graph(const BasicVar<S>& a, const BasicVar<S>& b) {
  if (&a.graph() != &b.graph()) throw std::invalid_argument("operands belong to different graphs");
  return a.graph();
}

template <typename S>
void require_same_shape(const char* op, const BasicVar<S>& a, const BasicVar<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) + " vs " +
                     shape_string(b.rows(), b.cols()));
}

template <typename S, typename F, typename D>
BasicVar<S> unary(const BasicVar<S>& x, F&& fwd, D&& dfdx) {
  using M = Mat<S>;
  auto& g = x.graph();
  M out = x.value().unaryExpr(fwd);
  const int ix = x.id();
  return g.record(std::move(out), {ix}, [ix, dfdx](BasicGraph<S>& g, const M& go) {
    const M& in = g.value(ix);
    M d(in.rows(), in.cols());
    for (Index i = 0; i < in.size(); ++i) d.data()[i] = dfdx(in.data()[i]);
    g.accumulate(ix, go.cwiseProduct(d));
  });
}

}  // namespace detail

template <typename S>
BasicVar<S> matmul(const BasicVar<S>& a, const BasicVar<S>& b) {
  auto& g = detail::same_graph(a, b);
  if (a.cols() != b.rows())
    throw ShapeError("matmul: shape mismatch " + shape_string(a.rows(), a.cols()) + " vs " +
                     shape_string(b.rows(), b.cols()));
  using M = Mat<S>;
  M out = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](BasicGraph<S>& g, const M& go) {
    if (g.requires_grad(ia)) g.accumulate(ia, go * g.value(ib).transpose());
    if (g.requires_grad(ib)) g.accumulate(ib, g.value(ia).transpose() * go);
  });
}

/// Elementwise sum. `b` may also be a single row broadcast over the rows of `a`.
template <typename S>
BasicVar<S> add(const BasicVar<S>& a, const BasicVar<S>& b) {
  auto& g = detail::same_graph(a, b);
  using M = Mat<S>;
  const int ia = a.id(), ib = b.id();
  if (a.rows() == b.rows() && a.cols() == b.cols()) {
    M out = a.value() + b.value();
    return g.record(std::move(out), {ia, ib}, [ia, ib](BasicGraph<S>& g, const M& go) {
      g.accumulate(ia, go);
      g.accumulate(ib, go);
    });
  }
  if (b.rows() == 1 && b.cols() == a.cols()) {
    M out = a.value().rowwise() + b.value().row(0);
    return g.record(std::move(out), {ia, ib}, [ia, ib](BasicGraph<S>& g, const M& go) {
      g.accumulate(ia, go);
      if (g.requires_grad(ib)) g.accumulate(ib, go.colwise().sum());
    });
  }
  throw ShapeError("add: shape mismatch " + shape_string(a.rows(), a.cols()) + " vs " +
                   shape_string(b.rows(), b.cols()));
}

template <typename S>
BasicVar<S> sub(const BasicVar<S>& a, const BasicVar<S>& b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape("sub", a, b);
  using M = Mat<S>;
  M out = a.value() - b.value();
  const int ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](BasicGraph<S>& g, const M& go) {
    g.accumulate(ia, go);
    if (g.requires_grad(ib)) g.accumulate(ib, -go);
  });
}

/// Hadamard product.
template <typename S>
BasicVar<S> mul(const BasicVar<S>& a, const BasicVar<S>& b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape("mul", a, b);
  using M = Mat<S>;
  M out = a.value().cwiseProduct(b.value());
  const int ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](BasicGraph<S>& g, const M& go) {
    if (g.requires_grad(ia)) g.accumulate(ia, go.cwiseProduct(g.value(ib)));
    if (g.requires_grad(ib)) g.accumulate(ib, go.cwiseProduct(g.value(ia)));
  });
}

template <typename S>
BasicVar<S> scale(const BasicVar<S>& a, S s) {
  using M = Mat<S>;
  M out = a.value() * s;
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia, s](BasicGraph<S>& g, const M& go) { g.accumulate(ia, go * s); });
}

template <typename S>
BasicVar<S> concat_cols(std::span<const BasicVar<S>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no operands");
  auto& g = parts.front().graph();
  using M = Mat<S>;
  const Index rows = parts.front().rows();
  Index cols = 0;
  std::vector<int> ids;
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw ShapeError("concat_cols: shape mismatch " + shape_string(parts.front().rows(), parts.front().cols()) +
                       " vs " + shape_string(p.rows(), p.cols()));
    cols += p.cols();
    ids.push_back(p.id());
  }
  M out(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return g.record(std::move(out), ids, [ids](BasicGraph<S>& g, const M& go) {
    Index off = 0;
    for (int id : ids) {
      const Index c = g.value(id).cols();
      g.accumulate_block(id, 0, 0, go.middleCols(off, c));
      off += c;
    }
  });
}

template <typename S>
BasicVar<S> concat_cols(std::initializer_list<BasicVar<S>> parts) {
  return concat_cols(std::span<const BasicVar<S>>(parts.begin(), parts.size()));
}

template <typename S>
BasicVar<S> concat_rows(std::span<const BasicVar<S>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no operands");
  auto& g = parts.front().graph();
  using M = Mat<S>;
  const Index cols = parts.front().cols();
  Index rows = 0;
  std::vector<int> ids;
  for (const auto& p : parts) {
    if (p.cols() != cols)
      throw ShapeError("concat_rows: shape mismatch " + shape_string(parts.front().rows(), parts.front().cols()) +
                       " vs " + shape_string(p.rows(), p.cols()));
    rows += p.rows();
    ids.push_back(p.id());
  }
  M out(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return g.record(std::move(out), ids, [ids](BasicGraph<S>& g, const M& go) {
    Index off = 0;
    for (int id : ids) {
      const Index r = g.value(id).rows();
      g.accumulate_block(id, 0, 0, go.middleRows(off, r));
      off += r;
    }
  });
}

template <typename S>
BasicVar<S> concat_rows(std::initializer_list<BasicVar<S>> parts) {
  return concat_rows(std::span<const BasicVar<S>>(parts.begin(), parts.size()));
}

template <typename S>
BasicVar<S> slice_cols(const BasicVar<S>& a, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > a.cols())
    throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_string(a.rows(), a.cols()));
  using M = Mat<S>;
  M out = a.value().middleCols(start, count);
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia, start](BasicGraph<S>& g, const M& go) { g.accumulate_block(ia, 0, start, go); });
}

template <typename S>
BasicVar<S> slice_rows(const BasicVar<S>& a, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > a.rows())
    throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_string(a.rows(), a.cols()));
  using M = Mat<S>;
  M out = a.value().middleRows(start, count);
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia, start](BasicGraph<S>& g, const M& go) { g.accumulate_block(ia, start, 0, go); });
}

template <typename S>
BasicVar<S> row(const BasicVar<S>& a, Index i) {
  return slice_rows(a, i, 1);
}

/// Selects rows by index; repeated indices accumulate in backward.
template <typename S>
BasicVar<S> gather_rows(const BasicVar<S>& a, std::vector<Index> idx) {
  using M = Mat<S>;
  M out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= a.rows())
      throw ShapeError("gather_rows: index " + std::to_string(idx[r]) + " outside " + shape_string(a.rows(), a.cols()));
    out.row(static_cast<Index>(r)) = a.value().row(idx[r]);
  }
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia, idx = std::move(idx)](BasicGraph<S>& g, const M& go) {
    for (std::size_t r = 0; r < idx.size(); ++r) g.accumulate_block(ia, idx[r], 0, go.row(static_cast<Index>(r)));
  });
}

/// Row-major reinterpretation.
template <typename S>
BasicVar<S> reshape(const BasicVar<S>& a, Index rows, Index cols) {
  if (rows * cols != a.value().size())
    throw ShapeError("reshape: cannot view " + shape_string(a.rows(), a.cols()) + " as " + shape_string(rows, cols));
  using M = Mat<S>;
  M out = Eigen::Map<const M>(a.value().data(), rows, cols);
  const int ia = a.id();
  const Index r0 = a.rows(), c0 = a.cols();
  return a.graph().record(std::move(out), {ia}, [ia, r0, c0](BasicGraph<S>& g, const M& go) {
    g.accumulate(ia, Eigen::Map<const M>(go.data(), r0, c0));
  });
}

template <typename S>
BasicVar<S> transpose(const BasicVar<S>& a) {
  using M = Mat<S>;
  M out = a.value().transpose();
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia](BasicGraph<S>& g, const M& go) {
    g.accumulate(ia, go.transpose());
  });
}

template <typename S>
BasicVar<S> sigmoid(const BasicVar<S>& x) {
  using M = Mat<S>;
  M out = x.value().unaryExpr([](S v) { return S(1) / (S(1) + std::exp(-v)); });
  const int ix = x.id();
  const int self = static_cast<int>(x.graph().size());
  return x.graph().record(std::move(out), {ix}, [ix, self](BasicGraph<S>& g, const M& go) {
    const M& y = g.value(self);
    g.accumulate(ix, (go.array() * y.array() * (S(1) - y.array())).matrix());
  });
}

template <typename S>
BasicVar<S> tanh(const BasicVar<S>& x) {
  using M = Mat<S>;
  M out = x.value().array().tanh().matrix();
  const int ix = x.id();
  const int self = static_cast<int>(x.graph().size());
  return x.graph().record(std::move(out), {ix}, [ix, self](BasicGraph<S>& g, const M& go) {
    const M& y = g.value(self);
    g.accumulate(ix, go.cwiseProduct((S(1) - y.array().square()).matrix()));
  });
}

template <typename S>
BasicVar<S> relu(const BasicVar<S>& x) {
  return detail::unary(
      x, [](S v) { return v > S(0) ? v : S(0); }, [](S v) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
BasicVar<S> leaky_relu(const BasicVar<S>& x, S slope = S(0.01)) {
  return detail::unary(
      x, [slope](S v) { return v > S(0) ? v : slope * v; }, [slope](S v) { return v > S(0) ? S(1) : slope; });
}

template <typename S>
BasicVar<S> exp(const BasicVar<S>& x) {
  return detail::unary(
      x, [](S v) { return std::exp(v); }, [](S v) { return std::exp(v); });
}

template <typename S>
BasicVar<S> log(const BasicVar<S>& x) {
  return detail::unary(
      x, [](S v) { return std::log(v); }, [](S v) { return S(1) / v; });
}

template <typename S>
BasicVar<S> square(const BasicVar<S>& x) {
  return detail::unary(
      x, [](S v) { return v * v; }, [](S v) { return S(2) * v; });
}

template <typename S>
BasicVar<S> sum(const BasicVar<S>& a) {
  using M = Mat<S>;
  M out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia](BasicGraph<S>& g, const M& go) {
    const M& in = g.value(ia);
    g.accumulate(ia, M::Constant(in.rows(), in.cols(), go(0, 0)));
  });
}

template <typename S>
BasicVar<S> mean(const BasicVar<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.value().size()));
}

template <typename S>
BasicVar<S> dot(const BasicVar<S>& a, const BasicVar<S>& b) {
  return sum(mul(a, b));
}

/// Row-wise softmax of logits / tau with max subtraction.
template <typename S>
BasicVar<S> temperature_softmax(const BasicVar<S>& logits, S tau) {
  if (!(tau > S(0))) throw std::invalid_argument("temperature_softmax: tau must be positive");
  if (!logits.value().allFinite()) throw NumericError("temperature_softmax: non-finite logits");
  using M = Mat<S>;
  const M& z = logits.value();
  M out(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const S mx = z.row(r).maxCoeff();
    out.row(r) = ((z.row(r).array() - mx) / tau).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  const int iz = logits.id();
  const int self = static_cast<int>(logits.graph().size());
  return logits.graph().record(std::move(out), {iz}, [iz, self, tau](BasicGraph<S>& g, const M& go) {
    const M& p = g.value(self);
    M d(p.rows(), p.cols());
    for (Index r = 0; r < p.rows(); ++r) {
      const S inner = go.row(r).dot(p.row(r));
      d.row(r) = (p.row(r).array() * (go.row(r).array() - inner) / tau).matrix();
    }
    g.accumulate(iz, d);
  });
}

/// Softmax over a single row of scores where masked-out entries get zero mass.
template <typename S>
BasicVar<S> masked_softmax(const BasicVar<S>& scores, const std::vector<bool>& valid) {
  if (scores.rows() != 1 || static_cast<std::size_t>(scores.cols()) != valid.size())
    throw ShapeError("masked_softmax: mask of length " + std::to_string(valid.size()) + " for scores " +
                     shape_string(scores.rows(), scores.cols()));
  using M = Mat<S>;
  const M& z = scores.value();
  S mx = -std::numeric_limits<S>::infinity();
  for (Index i = 0; i < z.cols(); ++i) {
    if (!valid[i]) continue;
    if (!std::isfinite(z(0, i))) throw NumericError("masked_softmax: non-finite score");
    mx = std::max(mx, z(0, i));
  }
  if (!std::isfinite(mx)) throw std::invalid_argument("masked_softmax: every position is masked");
  M out = M::Zero(1, z.cols());
  for (Index i = 0; i < z.cols(); ++i)
    if (valid[i]) out(0, i) = std::exp(z(0, i) - mx);
  out /= out.sum();
  const int iz = scores.id();
  const int self = static_cast<int>(scores.graph().size());
  return scores.graph().record(std::move(out), {iz}, [iz, self](BasicGraph<S>& g, const M& go) {
    const M& p = g.value(self);
    const S inner = go.row(0).dot(p.row(0));
    g.accumulate(iz, (p.array() * (go.array() - inner)).matrix());
  });
}

template <typename S>
BasicVar<S> mse(const BasicVar<S>& a, const BasicVar<S>& b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape("mse", a, b);
  using M = Mat<S>;
  const S n = static_cast<S>(a.value().size());
  M out(1, 1);
  out(0, 0) = (a.value() - b.value()).squaredNorm() / n;
  const int ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib, n](BasicGraph<S>& g, const M& go) {
    const M d = (g.value(ia) - g.value(ib)) * (S(2) * go(0, 0) / n);
    g.accumulate(ia, d);
    if (g.requires_grad(ib)) g.accumulate(ib, -d);
  });
}

/// Sum of squared differences over every entry.
template <typename S>
BasicVar<S> sse(const BasicVar<S>& a, const BasicVar<S>& b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape("sse", a, b);
  using M = Mat<S>;
  M out(1, 1);
  out(0, 0) = (a.value() - b.value()).squaredNorm();
  const int ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](BasicGraph<S>& g, const M& go) {
    const M d = (g.value(ia) - g.value(ib)) * (S(2) * go(0, 0));
    g.accumulate(ia, d);
    if (g.requires_grad(ib)) g.accumulate(ib, -d);
  });
}

/// -(1/N) sum over unmasked rows t of log(max(probs[t, target[t]], floor)),
/// where N counts unmasked rows.
template <typename S>
BasicVar<S> masked_cross_entropy(const BasicVar<S>& probs, const std::vector<int>& targets,
                                 const std::vector<bool>& mask, S floor = S(1e-12)) {
  using M = Mat<S>;
  const Index T = probs.rows();
  if (static_cast<Index>(targets.size()) != T || static_cast<Index>(mask.size()) != T)
    throw std::invalid_argument("masked_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(T) + " probability rows");
  S count = 0;
  S total = 0;
  for (Index t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    if (targets[t] < 0 || targets[t] >= probs.cols())
      throw std::invalid_argument("masked_cross_entropy: target " + std::to_string(targets[t]) + " out of range");
    total -= std::log(std::max(probs.value()(t, targets[t]), floor));
    count += 1;
  }
  if (count == 0) throw std::invalid_argument("masked_cross_entropy: every position is masked");
  M out(1, 1);
  out(0, 0) = total / count;
  const int ip = probs.id();
  return probs.graph().record(std::move(out), {ip}, [ip, targets, mask, count, floor](BasicGraph<S>& g, const M& go) {
    const M& p = g.value(ip);
    M d = M::Zero(p.rows(), p.cols());
    for (Index t = 0; t < p.rows(); ++t) {
      if (!mask[t]) continue;
      const S v = p(t, targets[t]);
      if (v > floor) d(t, targets[t]) = -go(0, 0) / (v * count);
    }
    g.accumulate(ip, d);
  });
}

/// Mean binary cross-entropy with probabilities clamped to [eps, 1-eps].
template <typename S>
BasicVar<S> binary_cross_entropy(const BasicVar<S>& probs, const Mat<S>& targets, S eps = S(1e-7)) {
  if (probs.rows() != targets.rows() || probs.cols() != targets.cols())
    throw ShapeError("binary_cross_entropy: shape mismatch " + shape_string(probs.rows(), probs.cols()) + " vs " +
                     shape_string(targets));
  using M = Mat<S>;
  const S n = static_cast<S>(targets.size());
  S total = 0;
  for (Index i = 0; i < targets.size(); ++i) {
    const S p = std::clamp(probs.value().data()[i], eps, S(1) - eps);
    const S b = targets.data()[i];
    total -= b * std::log(p) + (S(1) - b) * std::log(S(1) - p);
  }
  M out(1, 1);
  out(0, 0) = total / n;
  const int ip = probs.id();
  return probs.graph().record(std::move(out), {ip}, [ip, targets, eps, n](BasicGraph<S>& g, const M& go) {
    const M& pv = g.value(ip);
    M d = M::Zero(pv.rows(), pv.cols());
    for (Index i = 0; i < pv.size(); ++i) {
      const S raw = pv.data()[i];
      if (raw < eps || raw > S(1) - eps) continue;
      const S b = targets.data()[i];
      d.data()[i] = go(0, 0) * (-b / raw + (S(1) - b) / (S(1) - raw)) / n;
    }
    g.accumulate(ip, d);
  });
}

/// Pointwise half of an LSTM step. `gates` is 1x4H laid out [input|forget|cell|output],
/// `c` is 1xH. Returns [h' | c'] as 1x2H.
template <typename S>
BasicVar<S> lstm_pointwise(const BasicVar<S>& gates, const BasicVar<S>& c) {
  auto& g = detail::same_graph(gates, c);
  const Index H = c.cols();
  if (gates.rows() != 1 || c.rows() != 1 || gates.cols() != 4 * H)
    throw ShapeError("lstm_pointwise: shape mismatch " + shape_string(gates.rows(), gates.cols()) + " vs " +
                     shape_string(c.rows(), c.cols()));
  using M = Mat<S>;
  using A = Eigen::Array<S, 1, Eigen::Dynamic>;
  const auto& z = gates.value();
  auto sig = [](const auto& v) { return (S(1) / (S(1) + (-v).exp())).eval(); };
  A i = sig(z.middleCols(0, H).array());
  A f = sig(z.middleCols(H, H).array());
  A u = z.middleCols(2 * H, H).array().tanh();
  A o = sig(z.middleCols(3 * H, H).array());
  A cn = f * c.value().array() + i * u;
  A tc = cn.tanh();
  M out(1, 2 * H);
  out.middleCols(0, H) = (o * tc).matrix();
  out.middleCols(H, H) = cn.matrix();
  const int ig = gates.id(), ic = c.id();
  return g.record(std::move(out), {ig, ic}, [ig, ic, H, i, f, u, o, tc](BasicGraph<S>& g, const M& go) {
    const A dh = go.middleCols(0, H).array();
    const A dc = go.middleCols(H, H).array() + dh * o * (S(1) - tc.square());
    const A cprev = g.value(ic).array();
    if (g.requires_grad(ig)) {
      M dz(1, 4 * H);
      dz.middleCols(0, H) = (dc * u * i * (S(1) - i)).matrix();
      dz.middleCols(H, H) = (dc * cprev * f * (S(1) - f)).matrix();
      dz.middleCols(2 * H, H) = (dc * i * (S(1) - u.square())).matrix();
      dz.middleCols(3 * H, H) = (dh * tc * o * (S(1) - o)).matrix();
      g.accumulate(ig, dz);
    }
    if (g.requires_grad(ic)) g.accumulate(ic, (dc * f).matrix());
  });
}

/// Forward-only copy: downstream gradients stop here.
template <typename S>
BasicVar<S> detach(const BasicVar<S>& x) {
  return x.graph().constant(x.value());
}

/// Node whose forward is `forward(x)` and whose backward replaces the true
/// derivative with `rule(upstream, x, y)`. The rule's output must match x's shape.
template <typename S, typename Fwd, typename Rule>
BasicVar<S> custom_backward_op(const BasicVar<S>& x, Fwd&& forward, Rule&& rule) {
  using M = Mat<S>;
  M out = forward(x.value());
  const int ix = x.id();
  const int self = static_cast<int>(x.graph().size());
  return x.graph().record(std::move(out), {ix},
                          [ix, self, rule = std::forward<Rule>(rule)](BasicGraph<S>& g, const M& go) {
                            M d = rule(go, g.value(ix), g.value(self));
                            const M& in = g.value(ix);
                            if (d.rows() != in.rows() || d.cols() != in.cols())
                              throw ShapeError("custom backward rule returned " + shape_string(d) +
                                               " for input of shape " + shape_string(in));
                            g.accumulate(ix, d);
                          });
}

}  // namespace chainflow
