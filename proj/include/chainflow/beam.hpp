#pragma once

// Beam search over an abstract autoregressive scorer with length-normalized
// final ranking.

#include "chainflow/tensor.hpp"

#include <algorithm>
#include <stdexcept>
#include <utility>
#include <vector>

namespace chainflow {

struct Hypothesis {
  std::vector<int> tokens;  // includes the final eos when one was emitted
  double log_likelihood = 0.0;
  double score = 0.0;       // log_likelihood / tokens.size()
  bool truncated = false;
};

/// `expand(state, prev_token)` consumes prev_token and returns
/// {row of log-probabilities over the next token, next state}.
/// Hypotheses finish on eos or once they hold `max_chars` non-eos tokens.
/// The search stops when k hypotheses have finished or no prefix is active.
template <typename State, typename Expand>
Hypothesis beam_search_generic(State initial, int start_token, int eos, int k, Index max_chars, Expand&& expand) {
  if (k < 1) throw std::invalid_argument("beam size must be at least 1");
  struct Prefix {
    State state;
    std::vector<int> tokens;
    double ll = 0.0;
  };
  struct Candidate {
    std::size_t beam;
    int token;
    double ll;
  };
  std::vector<Prefix> active;
  active.push_back({std::move(initial), {}, 0.0});
  std::vector<Hypothesis> finished;
  auto finish = [&](std::vector<int> toks, double ll, bool truncated) {
    Hypothesis h;
    h.tokens = std::move(toks);
    h.log_likelihood = ll;
    h.score = ll / static_cast<double>(h.tokens.size());
    h.truncated = truncated;
    finished.push_back(std::move(h));
  };

  while (!active.empty() && static_cast<int>(finished.size()) < k) {
    std::vector<State> next_states;
    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < active.size(); ++b) {
      const int prev = active[b].tokens.empty() ? start_token : active[b].tokens.back();
      auto [logp, ns] = expand(active[b].state, prev);
      next_states.push_back(std::move(ns));
      for (Index c = 0; c < logp.size(); ++c) cands.push_back({b, static_cast<int>(c), active[b].ll + logp(c)});
    }
    // Highest score first; ties by beam order then lowest token.
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.ll > b.ll; });
    if (cands.size() > static_cast<std::size_t>(k)) cands.resize(static_cast<std::size_t>(k));

    std::vector<Prefix> next;
    for (const auto& c : cands) {
      std::vector<int> toks = active[c.beam].tokens;
      toks.push_back(c.token);
      if (c.token == eos) {
        finish(std::move(toks), c.ll, false);
        continue;
      }
      if (static_cast<Index>(toks.size()) >= max_chars) {
        finish(std::move(toks), c.ll, true);
        continue;
      }
      next.push_back({next_states[c.beam], std::move(toks), c.ll});
    }
    active = std::move(next);
  }

  if (finished.empty()) throw std::logic_error("beam search finished no hypothesis");
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i)
    if (finished[i].score > finished[best].score) best = i;
  return finished[best];
}

}  // namespace chainflow
