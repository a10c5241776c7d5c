#pragma once

#include "chainflow/ops.hpp"
#include "chainflow/rng.hpp"

#include <deque>
#include <string>
#include <utility>
#include <vector>

namespace chainflow {

/// Owns model parameters at stable addresses, in registration order.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;

  /// Weight of shape rows x cols drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), fan_in = rows.
  const Parameter& add_weight(const std::string& name, Index rows, Index cols, Rng& rng);
  const Parameter& add_zeros(const std::string& name, Index rows, Index cols, int rank = 2);
  const Parameter& add(Parameter p);

  const Parameter& get(const std::string& name) const;
  Parameter& get_mutable(const std::string& name);
  bool contains(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  Index total_entries() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
};

struct Linear {
  const Parameter* weight = nullptr;  // in x out
  const Parameter* bias = nullptr;    // 1 x out

  static Linear create(ParameterSet& ps, const std::string& name, Index in, Index out, Rng& rng);
  Var operator()(Graph& g, const Var& x) const { return add(matmul(x, g.parameter(*weight)), g.parameter(*bias)); }
  Index in_dim() const { return weight->value.rows(); }
  Index out_dim() const { return weight->value.cols(); }
};

struct LstmState {
  Var h;
  Var c;
};

/// LSTM cell with gates laid out [input|forget|cell|output].
struct LstmCell {
  const Parameter* w_input = nullptr;   // in x 4H
  const Parameter* w_hidden = nullptr;  // H x 4H
  const Parameter* bias = nullptr;      // 1 x 4H

  static LstmCell create(ParameterSet& ps, const std::string& name, Index in, Index hidden, Rng& rng);

  Index hidden() const { return w_hidden->value.rows(); }
  Index in_dim() const { return w_input->value.rows(); }

  LstmState zero_state(Graph& g) const;
  LstmState step(Graph& g, const Var& x, const LstmState& s) const;
  /// Step with the input projection x*W_input already computed (1 x 4H).
  LstmState step_projected(Graph& g, const Var& x_proj, const LstmState& s) const;
};

/// Runs `cell` over the rows of `xs` (T x in), forward or reversed, returning T x H.
Var run_lstm(Graph& g, const LstmCell& cell, const Var& xs, bool reverse);

struct BiLstm {
  LstmCell fwd;
  LstmCell bwd;

  static BiLstm create(ParameterSet& ps, const std::string& name, Index in, Index hidden, Rng& rng);
  /// T x in -> T x 2H, forward states then backward states per row.
  Var operator()(Graph& g, const Var& xs) const;
  Index out_dim() const { return 2 * fwd.hidden(); }
};

}  // namespace chainflow
