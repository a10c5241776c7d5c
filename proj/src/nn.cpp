#include "chainflow/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace chainflow {

const Parameter& ParameterSet::add(Parameter p) {
  if (contains(p.name)) throw std::invalid_argument("duplicate parameter '" + p.name + "'");
  params_.push_back(std::move(p));
  return params_.back();
}

const Parameter& ParameterSet::add_weight(const std::string& name, Index rows, Index cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  Matrix w(rows, cols);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
  return add(Parameter(name, std::move(w)));
}

const Parameter& ParameterSet::add_zeros(const std::string& name, Index rows, Index cols, int rank) {
  return add(Parameter(name, Matrix::Zero(rows, cols), rank));
}

const Parameter& ParameterSet::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw std::out_of_range("unknown parameter '" + name + "'");
}

Parameter& ParameterSet::get_mutable(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw std::out_of_range("unknown parameter '" + name + "'");
}

bool ParameterSet::contains(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return true;
  return false;
}

Index ParameterSet::total_entries() const {
  Index n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

Linear Linear::create(ParameterSet& ps, const std::string& name, Index in, Index out, Rng& rng) {
  Linear l;
  l.weight = &ps.add_weight(name + ".weight", in, out, rng);
  l.bias = &ps.add_zeros(name + ".bias", 1, out, 1);
  return l;
}

LstmCell LstmCell::create(ParameterSet& ps, const std::string& name, Index in, Index hidden, Rng& rng) {
  LstmCell c;
  c.w_input = &ps.add_weight(name + ".w_input", in, 4 * hidden, rng);
  c.w_hidden = &ps.add_weight(name + ".w_hidden", hidden, 4 * hidden, rng);
  c.bias = &ps.add_zeros(name + ".bias", 1, 4 * hidden, 1);
  return c;
}

LstmState LstmCell::zero_state(Graph& g) const {
  return {g.constant(Matrix::Zero(1, hidden())), g.constant(Matrix::Zero(1, hidden()))};
}

LstmState LstmCell::step_projected(Graph& g, const Var& x_proj, const LstmState& s) const {
  const Index H = hidden();
  Var gates = add(add(x_proj, matmul(s.h, g.parameter(*w_hidden))), g.parameter(*bias));
  Var hc = lstm_pointwise(gates, s.c);
  return {slice_cols(hc, 0, H), slice_cols(hc, H, H)};
}

LstmState LstmCell::step(Graph& g, const Var& x, const LstmState& s) const {
  if (x.cols() != in_dim())
    throw ShapeError("lstm step: shape mismatch " + shape_string(x.rows(), x.cols()) + " vs " +
                     shape_string(w_input->value));
  return step_projected(g, matmul(x, g.parameter(*w_input)), s);
}

Var run_lstm(Graph& g, const LstmCell& cell, const Var& xs, bool reverse) {
  if (xs.cols() != cell.in_dim())
    throw ShapeError("lstm layer: shape mismatch " + shape_string(xs.rows(), xs.cols()) + " vs " +
                     shape_string(cell.w_input->value));
  const Index T = xs.rows();
  Var proj = matmul(xs, g.parameter(*cell.w_input));
  LstmState s = cell.zero_state(g);
  std::vector<Var> out(static_cast<std::size_t>(T));
  for (Index k = 0; k < T; ++k) {
    const Index t = reverse ? T - 1 - k : k;
    s = cell.step_projected(g, row(proj, t), s);
    out[static_cast<std::size_t>(t)] = s.h;
  }
  return concat_rows(std::span<const Var>(out));
}

BiLstm BiLstm::create(ParameterSet& ps, const std::string& name, Index in, Index hidden, Rng& rng) {
  return {LstmCell::create(ps, name + ".fwd", in, hidden, rng), LstmCell::create(ps, name + ".bwd", in, hidden, rng)};
}

Var BiLstm::operator()(Graph& g, const Var& xs) const {
  return concat_cols({run_lstm(g, fwd, xs, false), run_lstm(g, bwd, xs, true)});
}

}  // namespace chainflow
