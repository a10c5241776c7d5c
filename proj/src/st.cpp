#include "chainflow/st.hpp"

#include <cmath>
#include <stdexcept>

namespace chainflow {

namespace {

constexpr double kMassTolerance = 1e-6;

void check_probability_row(const Var& p, const char* op) {
  if (p.rows() != 1 || p.cols() == 0)
    throw std::invalid_argument(std::string(op) + ": expected a non-empty probability row, got " +
                                shape_string(p.rows(), p.cols()));
  const Matrix& v = p.value();
  if (!v.allFinite()) throw std::invalid_argument(std::string(op) + ": non-finite probability");
  if ((v.array() < 0.0).any()) throw std::invalid_argument(std::string(op) + ": negative probability");
  if (std::abs(v.sum() - 1.0) > kMassTolerance)
    throw std::invalid_argument(std::string(op) + ": probability mass " + std::to_string(v.sum()) + " is not 1");
}

Matrix identity_rule(const Matrix& upstream, const Matrix&, const Matrix&) { return upstream; }

}  // namespace

Matrix one_hot_row(Index classes, int index) {
  if (index < 0 || index >= classes)
    throw std::invalid_argument("one_hot_row: index " + std::to_string(index) + " outside [0, " +
                                std::to_string(classes) + ")");
  Matrix m = Matrix::Zero(1, classes);
  m(0, index) = 1.0;
  return m;
}

double gumbel_from_uniform(double u) { return -std::log(-std::log(u)); }

GumbelNoise sample_gumbel(Index classes, Rng& rng) {
  if (classes < 1) throw std::invalid_argument("sample_gumbel: need at least one class");
  GumbelNoise g;
  g.rng_seed = rng.seed();
  g.values.reserve(static_cast<std::size_t>(classes));
  for (Index c = 0; c < classes; ++c) g.values.push_back(gumbel_from_uniform(rng.uniform_open()));
  return g;
}

int sample_categorical(const Matrix& p, double u) {
  double cdf = 0.0;
  int last_positive = 0;
  for (Index c = 0; c < p.size(); ++c) {
    if (p(c) <= 0.0) continue;
    last_positive = static_cast<int>(c);
    cdf += p(c);
    if (u < cdf) return static_cast<int>(c);
  }
  // u landed past the accumulated mass through rounding.
  return last_positive;
}

Var gumbel_softmax_probs(const Var& logits, double tau, const GumbelNoise& noise) {
  if (logits.rows() != 1 || static_cast<std::size_t>(logits.cols()) != noise.values.size())
    throw ShapeError("gumbel_softmax_probs: shape mismatch " + shape_string(logits.rows(), logits.cols()) + " vs " +
                     shape_string(1, static_cast<Index>(noise.values.size())));
  Matrix g = Eigen::Map<const Matrix>(noise.values.data(), 1, logits.cols());
  return temperature_softmax(add(logits, logits.graph().constant(std::move(g))), tau);
}

Var gumbel_softmax_probs(const Var& logits, double tau, Rng& rng) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax_probs: tau must be positive");
  return gumbel_softmax_probs(logits, tau, sample_gumbel(logits.cols(), rng));
}

OneHotToken st_argmax_onehot(const Var& p) {
  check_probability_row(p, "st_argmax_onehot");
  const int k = argmax_lowest(p.value().row(0));
  const Index C = p.cols();
  Var y = custom_backward_op(p, [C, k](const Matrix&) { return one_hot_row(C, k); }, identity_rule);
  return {y, k};
}

OneHotToken st_gumbel_sample(const Var& p, Rng& rng) {
  check_probability_row(p, "st_gumbel_sample");
  const int k = sample_categorical(p.value(), rng.uniform_open());
  const Index C = p.cols();
  Var y = custom_backward_op(p, [C, k](const Matrix&) { return one_hot_row(C, k); }, identity_rule);
  return {y, k};
}

OneHotToken detached_onehot(Graph& g, Index classes, int index) {
  return {g.constant(one_hot_row(classes, index)), index};
}

}  // namespace chainflow
