#pragma once

// Text-to-feature decoder driven by one-hot token rows.
//
// Text encoder: one-hot x embedding, leaky-ReLU projection, bidirectional LSTM.
// Decoder (teacher forced): each step sees the last frame of the previous
// group, the previous attention context and the speaker vector, runs two
// stacked LSTMs, attends over the text states and emits kReductionFactor mel
// frames plus their stop probabilities. A per-frame post-net maps mel to lin.

#include "chainflow/attention.hpp"
#include "chainflow/data.hpp"
#include "chainflow/nn.hpp"
#include "chainflow/st.hpp"

#include <span>
#include <vector>

namespace chainflow {

struct TtsConfig {
  Index vocab = Vocabulary::kSize;
  Index mel_dim = 8;
  Index lin_dim = 20;
  Index embed = 32;
  Index enc_hidden = 32;  // per direction
  Index prenet = 32;
  Index dec_hidden = 64;
  Index att_dim = 32;
  Index speaker_dim = 8;
  Index n_speakers = 1;
  Index post_hidden = 32;
  double lrelu_slope = 0.01;
  bool att_history = false;
};

struct TtsOutput {
  Var mel;   // S x D_M
  Var lin;   // S x D_R
  Var stop;  // S x 1, each in (0, 1)
  Index steps = 0;
};

class TtsModel {
 public:
  TtsModel(const TtsConfig& cfg, ParameterSet& ps, Rng& rng);

  const TtsConfig& config() const { return cfg_; }

  /// T x C one-hot rows -> T x 2H text states.
  Var encode_text(Graph& g, const Var& onehots) const;
  Var encode_text(Graph& g, std::span<const OneHotToken> tokens) const;

  Var speaker_embedding(Graph& g, Index speaker_id) const;

  /// Teacher-forced decoding against `target_mel` (S x D_M, S a multiple of 4).
  TtsOutput decode(Graph& g, const Var& text_states, const Var& speaker, const Matrix& target_mel) const;

  TtsOutput forward(Graph& g, const Var& onehots, const Matrix& target_mel, Index speaker_id = 0) const;

 private:
  TtsConfig cfg_;
  const Parameter* embedding_ = nullptr;
  Linear text_prenet_;
  BiLstm text_encoder_;
  const Parameter* speakers_ = nullptr;
  Linear frame_prenet_;
  LstmCell lstm1_;
  LstmCell lstm2_;
  AttentionParams attention_;
  Linear mel_head_;
  Linear stop_head_;
  Linear post1_;
  Linear post2_;
};

/// mean_d (x^M - x^M_hat)^2 + mean_d (x^R - x^R_hat)^2 + BCE(b, b_hat), each averaged over frames.
Var tts_full_loss(const TtsOutput& out, const Matrix& mel, const Matrix& lin, const std::vector<double>& stop);

/// (1/S) sum_s ||x_s - x_hat_s||^2.
Var tts_recon_loss(const Var& mel_hat, const Matrix& mel);

}  // namespace chainflow
