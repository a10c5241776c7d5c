#pragma once

// Attention-based sequence-to-sequence recognizer.
//
// Encoder: stacked bidirectional LSTM layers, each followed by keeping every
// second frame. Decoder: one LSTM fed with [embedding(prev one-hot), previous
// context], attention over encoder states, linear output over [h, context].

#include "chainflow/attention.hpp"
#include "chainflow/beam.hpp"
#include "chainflow/nn.hpp"
#include "chainflow/st.hpp"
#include "chainflow/vocab.hpp"

#include <optional>
#include <string>
#include <vector>

namespace chainflow {

class SequenceTooShortError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class StMode { none, argmax, gumbel };
enum class GenMode { teacher_forcing, greedy, sample };

std::string to_string(StMode m);
std::string to_string(GenMode m);
StMode st_mode_from_string(const std::string& s);
GenMode gen_mode_from_string(const std::string& s);

struct AsrConfig {
  Index input_dim = 8;
  Index vocab = Vocabulary::kSize;
  int eos = Vocabulary::kEos;
  Index enc_layers = 3;
  Index enc_hidden = 32;  // per direction
  Index dec_hidden = 64;
  Index embed = 32;
  Index att_dim = 32;
  ScoreKind score = ScoreKind::mlp;
  bool att_history = false;
};

/// ceil(S / 2) applied once per encoder layer.
Index subsampled_length(Index frames, Index layers = 3);

struct EncodedSpeech {
  Var states;  // S' x 2H
  Index original_length = 0;
  Index subsampled_length = 0;
  AttentionMemory memory;
};

struct DecoderState {
  LstmState lstm;
  Var context;
  Var alignment;  // a_{t-1}; empty before the first step
  int step = 0;
};

struct DecodeStepOutput {
  Var logits;  // 1 x C
  DecoderState state;
  Var alignment;  // 1 x S'
};

struct GenerateOptions {
  GenMode mode = GenMode::teacher_forcing;
  double tau = 1.0;
  StMode st = StMode::none;
  const TokenSequence* targets = nullptr;  // required for teacher forcing
  Rng* rng = nullptr;                      // required for sampling and gumbel
  Index max_chars = -1;                    // default 2 * S'
};

struct Generation {
  std::vector<Var> probs;            // T rows of 1 x C, tempered softmax of the logits
  std::vector<OneHotToken> tokens;   // discretized outputs, one per step
  std::vector<Var> sources;          // distribution each token was drawn from (Gumbel-perturbed under gumbel)
  bool truncated = false;

  std::vector<int> ids() const;
  Var prob_matrix() const;    // T x C
  Var onehot_matrix() const;  // T x C
};

class AsrModel {
 public:
  AsrModel(const AsrConfig& cfg, ParameterSet& ps, Rng& rng);

  const AsrConfig& config() const { return cfg_; }

  EncodedSpeech encode(Graph& g, const Matrix& features) const;
  DecoderState initial_state(Graph& g) const;
  DecodeStepOutput decode_step(Graph& g, const Var& prev_onehot, const DecoderState& state,
                               const EncodedSpeech& enc) const;

  Generation generate(Graph& g, const EncodedSpeech& enc, const GenerateOptions& opt) const;
  Generation generate(Graph& g, const Matrix& features, const GenerateOptions& opt) const;

  /// Greedy token ids (eos included when reached), evaluated without gradients.
  std::vector<int> greedy_decode(const Matrix& features) const;
  Hypothesis beam_search(const Matrix& features, int k) const;

 private:
  AsrConfig cfg_;
  std::vector<BiLstm> encoder_;
  const Parameter* embedding_ = nullptr;  // C x embed
  LstmCell decoder_;
  AttentionParams attention_;
  Linear output_;
};

/// -(1/T) sum_t log p_t[y_t] over unmasked steps, with a 1e-12 floor inside the log.
Var asr_nll_loss(const Generation& gen, const TokenSequence& y, const std::vector<bool>& mask = {});
Var asr_nll_loss(const Var& probs, const TokenSequence& y, const std::vector<bool>& mask = {});

}  // namespace chainflow
