#pragma once

// Finite-difference verification of the analytic gradients.

#include "chainflow/chain.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace chainflow {

struct CheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// ||a - n|| / max(||a||, ||n||); 0 when both vanish.
double relative_error(const Matrix& analytic, const Matrix& numeric);

/// Central differences of f() with respect to every entry of x, which is
/// perturbed in place and restored.
Matrix numeric_gradient(const std::function<double()>& f, Matrix& x, double h = 1e-5);

std::vector<CheckResult> check_primitives(std::uint64_t seed = 7, int trials = 5, double tolerance = 1e-4);

/// Straight-through identity (bit-exact) and the chained softmax Jacobian.
std::vector<CheckResult> check_straight_through(std::uint64_t seed = 7, int trials = 100);

/// Vocabulary 4, every width 8: the chain configuration used by the chain check.
ChainConfig micro_chain_config(StMode st);
Utterance micro_utterance(std::uint64_t seed);

/// Gradients from chain_step against central differences of a surrogate in
/// which the discrete realization is frozen and only the distribution it was
/// drawn from moves with the parameters. Checks L_F over all parameters and
/// L_rec alone over the recognizer.
std::vector<CheckResult> check_chain_gradient(StMode st, std::uint64_t seed = 7, double tolerance = 1e-3);
std::vector<CheckResult> check_chain(std::uint64_t seed = 7, double tolerance = 1e-3);

}  // namespace chainflow
