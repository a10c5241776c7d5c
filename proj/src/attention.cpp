#include "chainflow/attention.hpp"

#include <stdexcept>

namespace chainflow {

std::string to_string(ScoreKind k) {
  switch (k) {
    case ScoreKind::dot: return "dot";
    case ScoreKind::bilinear: return "bilinear";
    case ScoreKind::mlp: return "mlp";
  }
  return "?";
}

ScoreKind score_kind_from_string(const std::string& s) {
  if (s == "dot") return ScoreKind::dot;
  if (s == "bilinear") return ScoreKind::bilinear;
  if (s == "mlp") return ScoreKind::mlp;
  throw std::invalid_argument("unknown score kind '" + s + "'");
}

AttentionParams AttentionParams::create(ParameterSet& ps, const std::string& name, ScoreKind kind, Index value_dim,
                                        Index query_dim, Index att_dim, Rng& rng, bool history) {
  AttentionParams p;
  p.kind = kind;
  p.value_dim = value_dim;
  p.query_dim = query_dim;
  switch (kind) {
    case ScoreKind::dot:
      if (value_dim != query_dim)
        throw ShapeError("dot attention: shape mismatch " + shape_string(1, value_dim) + " vs " +
                         shape_string(1, query_dim));
      break;
    case ScoreKind::bilinear:
      p.bilinear = &ps.add_weight(name + ".bilinear", value_dim, query_dim, rng);
      break;
    case ScoreKind::mlp:
      p.key_proj = &ps.add_weight(name + ".key_proj", value_dim, att_dim, rng);
      p.query_proj = &ps.add_weight(name + ".query_proj", query_dim, att_dim, rng);
      p.bias = &ps.add_zeros(name + ".bias", 1, att_dim, 1);
      p.v = &ps.add_weight(name + ".v", att_dim, 1, rng);
      if (history) p.history = &ps.add_weight(name + ".history", 1, att_dim, rng);
      break;
  }
  return p;
}

AttentionMemory prepare_attention(Graph& g, const AttentionParams& p, const Var& values, std::vector<bool> valid) {
  if (values.cols() != p.value_dim)
    throw ShapeError("attention values: shape mismatch " + shape_string(values.rows(), values.cols()) + " vs " +
                     shape_string(values.rows(), p.value_dim));
  AttentionMemory mem;
  mem.values = values;
  mem.valid = valid.empty() ? std::vector<bool>(static_cast<std::size_t>(values.rows()), true) : std::move(valid);
  if (static_cast<Index>(mem.valid.size()) != values.rows())
    throw ShapeError("attention mask length " + std::to_string(mem.valid.size()) + " for " +
                     std::to_string(values.rows()) + " frames");
  switch (p.kind) {
    case ScoreKind::dot: mem.keys_t = transpose(values); break;
    case ScoreKind::bilinear: mem.keys_t = transpose(matmul(values, g.parameter(*p.bilinear))); break;
    case ScoreKind::mlp: mem.keys = matmul(values, g.parameter(*p.key_proj)); break;
  }
  return mem;
}

AttentionResult attend(Graph& g, const AttentionParams& p, const AttentionMemory& mem, const Var& query,
                       const Var& previous) {
  if (query.rows() != 1 || query.cols() != p.query_dim)
    throw ShapeError("attention query: shape mismatch " + shape_string(query.rows(), query.cols()) + " vs " +
                     shape_string(1, p.query_dim));
  Var scores;
  if (p.kind == ScoreKind::mlp) {
    Var q = add(matmul(query, g.parameter(*p.query_proj)), g.parameter(*p.bias));
    Var pre = add(mem.keys, q);
    if (p.history && previous.valid()) {
      if (previous.rows() != 1 || previous.cols() != mem.values.rows())
        throw ShapeError("attention history: shape mismatch " + shape_string(previous.rows(), previous.cols()) +
                         " vs " + shape_string(1, mem.values.rows()));
      pre = add(pre, matmul(transpose(previous), g.parameter(*p.history)));
    }
    scores = transpose(matmul(tanh(pre), g.parameter(*p.v)));
  } else {
    scores = matmul(query, mem.keys_t);
  }
  Var weights = masked_softmax(scores, mem.valid);
  return {matmul(weights, mem.values), weights};
}

}  // namespace chainflow
