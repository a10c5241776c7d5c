#pragma once

// Content-based attention: a_t = softmax_s(score(h^e_s, query)), c_t = sum_s a_t(s) h^e_s.
// mlp: score = v^T tanh(K h^e_s + Q query + b), optionally with a history term u a_{t-1}(s).

#include "chainflow/nn.hpp"

#include <string>
#include <vector>

namespace chainflow {

enum class ScoreKind { dot, bilinear, mlp };

std::string to_string(ScoreKind k);
ScoreKind score_kind_from_string(const std::string& s);

struct AttentionParams {
  ScoreKind kind = ScoreKind::mlp;
  Index value_dim = 0;
  Index query_dim = 0;
  const Parameter* bilinear = nullptr;  // value_dim x query_dim
  const Parameter* key_proj = nullptr;  // value_dim x att_dim
  const Parameter* query_proj = nullptr;  // query_dim x att_dim
  const Parameter* bias = nullptr;      // 1 x att_dim
  const Parameter* v = nullptr;         // att_dim x 1
  const Parameter* history = nullptr;   // 1 x att_dim, only with history

  /// dot needs value_dim == query_dim; anything else is a ShapeError.
  static AttentionParams create(ParameterSet& ps, const std::string& name, ScoreKind kind, Index value_dim,
                                Index query_dim, Index att_dim, Rng& rng, bool history = false);
};

/// Per-sequence precomputation shared by every decoder step.
struct AttentionMemory {
  Var values;          // S x value_dim
  Var keys_t;          // K x S, for dot and bilinear
  Var keys;            // S x att_dim, for mlp
  std::vector<bool> valid;
};

struct AttentionResult {
  Var context;  // 1 x value_dim
  Var weights;  // 1 x S
};

/// `valid` masks padded frames (empty means every frame is valid).
AttentionMemory prepare_attention(Graph& g, const AttentionParams& p, const Var& values, std::vector<bool> valid = {});
/// `previous` is a_{t-1} (1 x S). Ignored unless the mlp params were created with history.
AttentionResult attend(Graph& g, const AttentionParams& p, const AttentionMemory& mem, const Var& query,
                       const Var& previous = {});

}  // namespace chainflow
