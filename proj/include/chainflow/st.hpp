#pragma once

// Discretization with straight-through backward rules.
//
// Forward emits a one-hot row; backward hands the upstream gradient to the
// probability row unchanged.

#include "chainflow/ops.hpp"
#include "chainflow/rng.hpp"

#include <cstdint>
#include <vector>

namespace chainflow {

struct OneHotToken {
  Var vector;  // 1 x C
  int class_index = -1;
};

struct GumbelNoise {
  std::vector<double> values;
  std::uint64_t rng_seed = 0;
};

/// Index of the largest entry of a row; ties go to the lowest index.
template <typename Derived>
int argmax_lowest(const Eigen::MatrixBase<Derived>& row) {
  int best = 0;
  for (Index i = 1; i < row.size(); ++i)
    if (row(i) > row(best)) best = static_cast<int>(i);
  return best;
}

Matrix one_hot_row(Index classes, int index);

double gumbel_from_uniform(double u);
GumbelNoise sample_gumbel(Index classes, Rng& rng);

/// Inverse-CDF draw from a probability row with a single uniform.
int sample_categorical(const Matrix& p, double u);

/// temperature_softmax(logits + g, tau) where g is held constant.
Var gumbel_softmax_probs(const Var& logits, double tau, const GumbelNoise& noise);
Var gumbel_softmax_probs(const Var& logits, double tau, Rng& rng);

OneHotToken st_argmax_onehot(const Var& p);
OneHotToken st_gumbel_sample(const Var& p, Rng& rng);

/// Plain one-hot of `index` that carries no gradient.
OneHotToken detached_onehot(Graph& g, Index classes, int index);

}  // namespace chainflow
