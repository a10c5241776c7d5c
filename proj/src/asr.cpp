#include "chainflow/asr.hpp"

#include <cmath>
#include <stdexcept>

namespace chainflow {

std::string to_string(StMode m) {
  switch (m) {
    case StMode::none: return "none";
    case StMode::argmax: return "argmax";
    case StMode::gumbel: return "gumbel";
  }
  return "?";
}

std::string to_string(GenMode m) {
  switch (m) {
    case GenMode::teacher_forcing: return "teacher_forcing";
    case GenMode::greedy: return "greedy";
    case GenMode::sample: return "sample";
  }
  return "?";
}

StMode st_mode_from_string(const std::string& s) {
  if (s == "none") return StMode::none;
  if (s == "argmax") return StMode::argmax;
  if (s == "gumbel") return StMode::gumbel;
  throw std::invalid_argument("unknown st_mode '" + s + "'");
}

GenMode gen_mode_from_string(const std::string& s) {
  if (s == "teacher_forcing") return GenMode::teacher_forcing;
  if (s == "greedy") return GenMode::greedy;
  if (s == "sample") return GenMode::sample;
  throw std::invalid_argument("unknown gen_mode '" + s + "'");
}

Index subsampled_length(Index frames, Index layers) {
  for (Index i = 0; i < layers; ++i) frames = (frames + 1) / 2;
  return frames;
}

std::vector<int> Generation::ids() const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(t.class_index);
  return out;
}

Var Generation::prob_matrix() const { return concat_rows(std::span<const Var>(probs)); }

Var Generation::onehot_matrix() const {
  std::vector<Var> rows;
  rows.reserve(tokens.size());
  for (const auto& t : tokens) rows.push_back(t.vector);
  return concat_rows(std::span<const Var>(rows));
}

AsrModel::AsrModel(const AsrConfig& cfg, ParameterSet& ps, Rng& rng) : cfg_(cfg) {
  if (cfg.enc_layers < 1) throw std::invalid_argument("asr needs at least one encoder layer");
  if (cfg.eos < 0 || cfg.eos >= cfg.vocab) throw std::invalid_argument("asr eos id outside the vocabulary");
  Index in = cfg.input_dim;
  for (Index l = 0; l < cfg.enc_layers; ++l) {
    encoder_.push_back(BiLstm::create(ps, "asr.enc" + std::to_string(l), in, cfg.enc_hidden, rng));
    in = 2 * cfg.enc_hidden;
  }
  embedding_ = &ps.add_weight("asr.embedding", cfg.vocab, cfg.embed, rng);
  decoder_ = LstmCell::create(ps, "asr.dec", cfg.embed + 2 * cfg.enc_hidden, cfg.dec_hidden, rng);
  attention_ = AttentionParams::create(ps, "asr.att", cfg.score, 2 * cfg.enc_hidden, cfg.dec_hidden, cfg.att_dim, rng,
                                        cfg.att_history);
  output_ = Linear::create(ps, "asr.out", cfg.dec_hidden + 2 * cfg.enc_hidden, cfg.vocab, rng);
}

EncodedSpeech AsrModel::encode(Graph& g, const Matrix& features) const {
  if (features.cols() != cfg_.input_dim)
    throw ShapeError("asr encode: shape mismatch " + shape_string(features) + " vs " +
                     shape_string(features.rows(), cfg_.input_dim));
  const Index min_frames = Index{1} << cfg_.enc_layers;
  if (features.rows() < min_frames)
    throw SequenceTooShortError("asr encode: " + std::to_string(features.rows()) + " frames, need at least " +
                                std::to_string(min_frames));
  Var h = g.constant(features);
  for (const auto& layer : encoder_) {
    h = layer(g, h);
    std::vector<Index> keep;
    for (Index t = 0; t < h.rows(); t += 2) keep.push_back(t);
    h = gather_rows(h, std::move(keep));
  }
  EncodedSpeech enc;
  enc.states = h;
  enc.original_length = features.rows();
  enc.subsampled_length = h.rows();
  enc.memory = prepare_attention(g, attention_, h);
  return enc;
}

DecoderState AsrModel::initial_state(Graph& g) const {
  DecoderState s;
  s.lstm = decoder_.zero_state(g);
  s.context = g.constant(Matrix::Zero(1, 2 * cfg_.enc_hidden));
  s.step = 0;
  return s;
}

DecodeStepOutput AsrModel::decode_step(Graph& g, const Var& prev_onehot, const DecoderState& state,
                                       const EncodedSpeech& enc) const {
  if (prev_onehot.rows() != 1 || prev_onehot.cols() != cfg_.vocab)
    throw ShapeError("asr decode_step: shape mismatch " + shape_string(prev_onehot.rows(), prev_onehot.cols()) +
                     " vs " + shape_string(1, cfg_.vocab));
  // one-hot times matrix keeps a gradient path into the token
  Var emb = matmul(prev_onehot, g.parameter(*embedding_));
  LstmState s = decoder_.step(g, concat_cols({emb, state.context}), state.lstm);
  AttentionResult att = attend(g, attention_, enc.memory, s.h, state.alignment);
  Var logits = output_(g, concat_cols({s.h, att.context}));
  return {logits, DecoderState{s, att.context, att.weights, state.step + 1}, att.weights};
}

namespace {

OneHotToken discretize(Graph& g, const Var& p, const Var& logits, const GenerateOptions& opt, Var& source) {
  source = p;
  switch (opt.st) {
    case StMode::none: {
      const int k = opt.mode == GenMode::sample ? sample_categorical(p.value(), opt.rng->uniform_open())
                                                : argmax_lowest(p.value().row(0));
      return detached_onehot(g, p.cols(), k);
    }
    case StMode::argmax:
      return opt.mode == GenMode::sample ? st_gumbel_sample(p, *opt.rng) : st_argmax_onehot(p);
    case StMode::gumbel: {
      source = gumbel_softmax_probs(logits, opt.tau, *opt.rng);
      return st_gumbel_sample(source, *opt.rng);
    }
  }
  throw std::logic_error("unhandled st mode");
}

}  // namespace

Generation AsrModel::generate(Graph& g, const EncodedSpeech& enc, const GenerateOptions& opt) const {
  if (!(opt.tau > 0.0)) throw std::invalid_argument("generate: tau must be positive");
  const bool needs_rng = opt.mode == GenMode::sample || opt.st == StMode::gumbel;
  if (needs_rng && opt.rng == nullptr) throw std::invalid_argument("generate: this mode needs an rng");
  Generation gen;
  DecoderState state = initial_state(g);
  Var prev = g.constant(one_hot_row(cfg_.vocab, cfg_.eos));

  if (opt.mode == GenMode::teacher_forcing) {
    if (opt.targets == nullptr || opt.targets->empty())
      throw std::invalid_argument("generate: teacher forcing needs ground-truth tokens");
    const TokenSequence& y = *opt.targets;
    for (std::size_t t = 0; t < y.size(); ++t) {
      DecodeStepOutput out = decode_step(g, prev, state, enc);
      Var p = temperature_softmax(out.logits, opt.tau);
      Var source;
      gen.tokens.push_back(discretize(g, p, out.logits, opt, source));
      gen.probs.push_back(p);
      gen.sources.push_back(source);
      state = out.state;
      prev = g.constant(one_hot_row(cfg_.vocab, y[t]));
    }
    return gen;
  }

  const Index max_chars = opt.max_chars > 0 ? opt.max_chars : 2 * enc.subsampled_length;
  Index chars = 0;
  while (true) {
    DecodeStepOutput out = decode_step(g, prev, state, enc);
    Var p = temperature_softmax(out.logits, opt.tau);
    Var source;
    OneHotToken tok = discretize(g, p, out.logits, opt, source);
    gen.probs.push_back(p);
    gen.sources.push_back(source);
    gen.tokens.push_back(tok);
    if (tok.class_index == cfg_.eos) break;
    if (++chars >= max_chars) {
      gen.truncated = true;
      break;
    }
    state = out.state;
    prev = tok.vector;
  }
  return gen;
}

Generation AsrModel::generate(Graph& g, const Matrix& features, const GenerateOptions& opt) const {
  return generate(g, encode(g, features), opt);
}

std::vector<int> AsrModel::greedy_decode(const Matrix& features) const {
  Graph g;
  g.set_grad_enabled(false);
  GenerateOptions opt;
  opt.mode = GenMode::greedy;
  return generate(g, features, opt).ids();
}

Hypothesis AsrModel::beam_search(const Matrix& features, int k) const {
  if (k < 1) throw std::invalid_argument("beam size must be at least 1");
  Graph g;
  g.set_grad_enabled(false);
  const EncodedSpeech enc = encode(g, features);
  auto expand = [&](const DecoderState& s, int prev) {
    DecodeStepOutput out = decode_step(g, g.constant(one_hot_row(cfg_.vocab, prev)), s, enc);
    const auto z = out.logits.value().row(0).array();
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z - mx).exp().sum());
    Eigen::RowVectorXd logp = (z - lse).matrix();
    return std::make_pair(logp, out.state);
  };
  return beam_search_generic(initial_state(g), cfg_.eos, cfg_.eos, k, 2 * enc.subsampled_length, expand);
}

Var asr_nll_loss(const Var& probs, const TokenSequence& y, const std::vector<bool>& mask) {
  if (probs.rows() != static_cast<Index>(y.size()))
    throw std::invalid_argument("asr_nll_loss: " + std::to_string(probs.rows()) + " probability rows for " +
                                std::to_string(y.size()) + " targets");
  const std::vector<bool> m = mask.empty() ? std::vector<bool>(y.size(), true) : mask;
  return masked_cross_entropy(probs, y.ids, m, 1e-12);
}

Var asr_nll_loss(const Generation& gen, const TokenSequence& y, const std::vector<bool>& mask) {
  if (gen.probs.size() != y.size())
    throw std::invalid_argument("asr_nll_loss: " + std::to_string(gen.probs.size()) + " probability rows for " +
                                std::to_string(y.size()) + " targets");
  return asr_nll_loss(gen.prob_matrix(), y, mask);
}

}  // namespace chainflow
