#include "chainflow/tts.hpp"

#include <stdexcept>

namespace chainflow {

TtsModel::TtsModel(const TtsConfig& cfg, ParameterSet& ps, Rng& rng) : cfg_(cfg) {
  if (cfg.n_speakers < 1) throw std::invalid_argument("tts needs at least one speaker");
  embedding_ = &ps.add_weight("tts.embedding", cfg.vocab, cfg.embed, rng);
  text_prenet_ = Linear::create(ps, "tts.text_prenet", cfg.embed, cfg.embed, rng);
  text_encoder_ = BiLstm::create(ps, "tts.text_enc", cfg.embed, cfg.enc_hidden, rng);
  speakers_ = &ps.add_weight("tts.speakers", cfg.n_speakers, cfg.speaker_dim, rng);
  frame_prenet_ = Linear::create(ps, "tts.frame_prenet", cfg.mel_dim, cfg.prenet, rng);
  lstm1_ = LstmCell::create(ps, "tts.dec1", cfg.prenet + 2 * cfg.enc_hidden + cfg.speaker_dim, cfg.dec_hidden, rng);
  lstm2_ = LstmCell::create(ps, "tts.dec2", cfg.dec_hidden, cfg.dec_hidden, rng);
  attention_ = AttentionParams::create(ps, "tts.att", ScoreKind::mlp, 2 * cfg.enc_hidden, cfg.dec_hidden,
                                       cfg.att_dim, rng, cfg.att_history);
  mel_head_ = Linear::create(ps, "tts.mel_head", cfg.dec_hidden + 2 * cfg.enc_hidden, kReductionFactor * cfg.mel_dim, rng);
  stop_head_ = Linear::create(ps, "tts.stop_head", cfg.dec_hidden + 2 * cfg.enc_hidden, kReductionFactor, rng);
  post1_ = Linear::create(ps, "tts.post1", cfg.mel_dim, cfg.post_hidden, rng);
  post2_ = Linear::create(ps, "tts.post2", cfg.post_hidden, cfg.lin_dim, rng);
}

Var TtsModel::encode_text(Graph& g, const Var& onehots) const {
  if (onehots.rows() == 0) throw std::invalid_argument("tts encode_text: empty token sequence");
  if (onehots.cols() != cfg_.vocab)
    throw ShapeError("tts encode_text: shape mismatch " + shape_string(onehots.rows(), onehots.cols()) + " vs " +
                     shape_string(onehots.rows(), cfg_.vocab));
  Var emb = matmul(onehots, g.parameter(*embedding_));
  Var pre = leaky_relu(text_prenet_(g, emb), cfg_.lrelu_slope);
  return text_encoder_(g, pre);
}

Var TtsModel::encode_text(Graph& g, std::span<const OneHotToken> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("tts encode_text: empty token sequence");
  std::vector<Var> rows;
  rows.reserve(tokens.size());
  for (const auto& t : tokens) rows.push_back(t.vector);
  return encode_text(g, concat_rows(std::span<const Var>(rows)));
}

Var TtsModel::speaker_embedding(Graph& g, Index speaker_id) const {
  if (speaker_id < 0 || speaker_id >= cfg_.n_speakers)
    throw std::invalid_argument("unknown speaker " + std::to_string(speaker_id));
  return row(g.parameter(*speakers_), speaker_id);
}

TtsOutput TtsModel::decode(Graph& g, const Var& text_states, const Var& speaker, const Matrix& target_mel) const {
  const Index S = target_mel.rows();
  if (S == 0 || S % kReductionFactor != 0)
    throw std::invalid_argument("tts decode: target length " + std::to_string(S) + " is not a positive multiple of " +
                                std::to_string(kReductionFactor));
  if (target_mel.cols() != cfg_.mel_dim)
    throw ShapeError("tts decode: shape mismatch " + shape_string(target_mel) + " vs " + shape_string(S, cfg_.mel_dim));
  if (speaker.rows() != 1 || speaker.cols() != cfg_.speaker_dim)
    throw ShapeError("tts decode: speaker shape mismatch " + shape_string(speaker.rows(), speaker.cols()) + " vs " +
                     shape_string(1, cfg_.speaker_dim));

  const AttentionMemory mem = prepare_attention(g, attention_, text_states);
  LstmState s1 = lstm1_.zero_state(g);
  LstmState s2 = lstm2_.zero_state(g);
  Var context = g.constant(Matrix::Zero(1, 2 * cfg_.enc_hidden));
  Var alignment;
  const Index steps = S / kReductionFactor;
  std::vector<Var> mel_groups, stop_groups;
  for (Index k = 0; k < steps; ++k) {
    Matrix prev = k == 0 ? Matrix::Zero(1, cfg_.mel_dim) : Matrix(target_mel.row(k * kReductionFactor - 1));
    Var pre = leaky_relu(frame_prenet_(g, g.constant(std::move(prev))), cfg_.lrelu_slope);
    s1 = lstm1_.step(g, concat_cols({pre, context, speaker}), s1);
    s2 = lstm2_.step(g, s1.h, s2);
    AttentionResult att = attend(g, attention_, mem, s2.h, alignment);
    context = att.context;
    alignment = att.weights;
    Var out = concat_cols({s2.h, context});
    mel_groups.push_back(reshape(mel_head_(g, out), kReductionFactor, cfg_.mel_dim));
    stop_groups.push_back(reshape(sigmoid(stop_head_(g, out)), kReductionFactor, 1));
  }
  TtsOutput o;
  o.mel = concat_rows(std::span<const Var>(mel_groups));
  o.stop = concat_rows(std::span<const Var>(stop_groups));
  o.lin = post2_(g, leaky_relu(post1_(g, o.mel), cfg_.lrelu_slope));
  o.steps = steps;
  return o;
}

TtsOutput TtsModel::forward(Graph& g, const Var& onehots, const Matrix& target_mel, Index speaker_id) const {
  return decode(g, encode_text(g, onehots), speaker_embedding(g, speaker_id), target_mel);
}

Var tts_full_loss(const TtsOutput& out, const Matrix& mel, const Matrix& lin, const std::vector<double>& stop) {
  if (out.mel.rows() != mel.rows() || out.mel.cols() != mel.cols() || out.lin.rows() != lin.rows() ||
      out.lin.cols() != lin.cols() || out.stop.rows() != static_cast<Index>(stop.size()))
    throw ShapeError("tts_full_loss: shape mismatch " + shape_string(out.mel.rows(), out.mel.cols()) + " vs " +
                     shape_string(mel));
  Graph& g = out.mel.graph();
  Matrix b = Eigen::Map<const Matrix>(stop.data(), static_cast<Index>(stop.size()), 1);
  Var mel_term = mse(out.mel, g.constant(mel));
  Var lin_term = mse(out.lin, g.constant(lin));
  Var stop_term = binary_cross_entropy(out.stop, b, 1e-7);
  return add(add(mel_term, lin_term), stop_term);
}

Var tts_recon_loss(const Var& mel_hat, const Matrix& mel) {
  if (mel_hat.rows() != mel.rows())
    throw std::invalid_argument("tts_recon_loss: " + std::to_string(mel_hat.rows()) + " frames vs " +
                                std::to_string(mel.rows()));
  if (mel_hat.cols() != mel.cols())
    throw ShapeError("tts_recon_loss: shape mismatch " + shape_string(mel_hat.rows(), mel_hat.cols()) + " vs " +
                     shape_string(mel));
  return scale(sse(mel_hat, mel_hat.graph().constant(mel)), 1.0 / static_cast<double>(mel.rows()));
}

}  // namespace chainflow
