#include "chainflow/chain.hpp"

#include "chainflow/config.hpp"
#include "chainflow/parallel.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace chainflow {

namespace {

constexpr std::uint64_t kStreamInit = 1;
constexpr std::uint64_t kStreamShuffle = 2;
constexpr std::uint64_t kStreamStep = 3;

struct ConfigKey {
  const char* key;
  std::function<void(ChainConfig&, const KeyValue&, const std::string&)> set;
  std::function<std::string(const ChainConfig&)> get;
};

template <typename T>
ConfigKey int_key(const char* key, T ChainConfig::*field) {
  return {key, [field](ChainConfig& c, const KeyValue& kv, const std::string& src) {
            c.*field = static_cast<T>(kv_int(kv, src));
          },
          [field](const ChainConfig& c) { return std::to_string(c.*field); }};
}

template <typename Sub, typename T>
ConfigKey sub_int_key(const char* key, Sub ChainConfig::*sub, T Sub::*field) {
  return {key, [sub, field](ChainConfig& c, const KeyValue& kv, const std::string& src) {
            c.*sub.*field = static_cast<T>(kv_int(kv, src));
          },
          [sub, field](const ChainConfig& c) { return std::to_string(c.*sub.*field); }};
}

ConfigKey double_key(const char* key, double ChainConfig::*field) {
  return {key, [field](ChainConfig& c, const KeyValue& kv, const std::string& src) { c.*field = kv_double(kv, src); },
          [field](const ChainConfig& c) { return format_double(c.*field); }};
}

ConfigKey optim_key(const char* key, double OptimConfig::*field) {
  return {key,
          [field](ChainConfig& c, const KeyValue& kv, const std::string& src) { c.optim.*field = kv_double(kv, src); },
          [field](const ChainConfig& c) { return format_double(c.optim.*field); }};
}

template <typename E>
ConfigKey enum_key(const char* key, E ChainConfig::*field, E (*parse)(const std::string&)) {
  return {key,
          [field, parse](ChainConfig& c, const KeyValue& kv, const std::string& src) {
            try {
              c.*field = parse(kv.value);
            } catch (const std::invalid_argument& e) {
              throw ParseError(src, kv.line, e.what());
            }
          },
          [field](const ChainConfig& c) { return to_string(c.*field); }};
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      enum_key("st_mode", &ChainConfig::st_mode, &st_mode_from_string),
      enum_key("gen_mode", &ChainConfig::gen_mode, &gen_mode_from_string),
      double_key("tau", &ChainConfig::tau),
      {"score",
       [](ChainConfig& c, const KeyValue& kv, const std::string& src) {
         try {
           c.asr.score = score_kind_from_string(kv.value);
         } catch (const std::invalid_argument& e) {
           throw ParseError(src, kv.line, e.what());
         }
       },
       [](const ChainConfig& c) { return to_string(c.asr.score); }},
      {"seed", [](ChainConfig& c, const KeyValue& kv, const std::string& src) { c.seed = kv_u64(kv, src); },
       [](const ChainConfig& c) { return std::to_string(c.seed); }},
      int_key("epochs", &ChainConfig::epochs),
      int_key("batch_size", &ChainConfig::batch_size),
      int_key("beam", &ChainConfig::beam),
      double_key("w_asr", &ChainConfig::w_asr),
      double_key("w_rec", &ChainConfig::w_rec),
      {"freeze_tts", [](ChainConfig& c, const KeyValue& kv, const std::string& src) { c.freeze_tts = kv_bool(kv, src); },
       [](const ChainConfig& c) { return std::string(c.freeze_tts ? "true" : "false"); }},
      {"att_history",
       [](ChainConfig& c, const KeyValue& kv, const std::string& src) {
         c.asr.att_history = c.tts.att_history = kv_bool(kv, src);
       },
       [](const ChainConfig& c) { return std::string(c.asr.att_history ? "true" : "false"); }},
      optim_key("lr", &OptimConfig::lr),
      optim_key("beta1", &OptimConfig::beta1),
      optim_key("beta2", &OptimConfig::beta2),
      optim_key("adam_eps", &OptimConfig::eps),
      optim_key("clip", &OptimConfig::clip),
      sub_int_key("asr_enc_layers", &ChainConfig::asr, &AsrConfig::enc_layers),
      sub_int_key("asr_enc_hidden", &ChainConfig::asr, &AsrConfig::enc_hidden),
      sub_int_key("asr_dec_hidden", &ChainConfig::asr, &AsrConfig::dec_hidden),
      sub_int_key("asr_embed", &ChainConfig::asr, &AsrConfig::embed),
      sub_int_key("asr_att_dim", &ChainConfig::asr, &AsrConfig::att_dim),
      sub_int_key("tts_embed", &ChainConfig::tts, &TtsConfig::embed),
      sub_int_key("tts_enc_hidden", &ChainConfig::tts, &TtsConfig::enc_hidden),
      sub_int_key("tts_prenet", &ChainConfig::tts, &TtsConfig::prenet),
      sub_int_key("tts_dec_hidden", &ChainConfig::tts, &TtsConfig::dec_hidden),
      sub_int_key("tts_att_dim", &ChainConfig::tts, &TtsConfig::att_dim),
      sub_int_key("tts_speaker_dim", &ChainConfig::tts, &TtsConfig::speaker_dim),
      sub_int_key("tts_post_hidden", &ChainConfig::tts, &TtsConfig::post_hidden),
  };
  return keys;
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

void ChainConfig::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  if (epochs < 0) throw std::invalid_argument("epochs must be nonnegative");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (beam < 1) throw std::invalid_argument("beam must be at least 1");
  if (!(optim.lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (!(optim.clip > 0.0)) throw std::invalid_argument("clip must be positive");
  if (asr.vocab != tts.vocab) throw std::invalid_argument("asr and tts vocabularies differ");
  if (asr.input_dim != tts.mel_dim) throw std::invalid_argument("asr input and tts mel dimensions differ");
}

ChainConfig parse_chain_config(const std::string& text, const std::string& source, std::vector<double>* tau_grid) {
  ChainConfig cfg;
  for (const auto& kv : parse_key_values(text, source)) {
    if (kv.key == "tau") {
      const std::vector<double> taus = kv_double_list(kv, source);
      for (double t : taus)
        if (!(t > 0.0)) throw ParseError(source, kv.line, "tau must be positive");
      cfg.tau = taus.front();
      if (tau_grid) *tau_grid = taus;
      continue;
    }
    const auto& keys = config_keys();
    auto it = std::find_if(keys.begin(), keys.end(), [&](const ConfigKey& k) { return kv.key == k.key; });
    if (it == keys.end()) throw ParseError(source, kv.line, "unknown key '" + kv.key + "'");
    it->set(cfg, kv, source);
  }
  if (tau_grid && tau_grid->empty()) tau_grid->push_back(cfg.tau);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(source, 0, e.what());
  }
  return cfg;
}

std::string chain_config_to_text(const ChainConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : config_keys()) os << k.key << " = " << k.get(cfg) << "\n";
  return os.str();
}

ChainModel::ChainModel(const ChainConfig& cfg) : params_(std::make_unique<ParameterSet>()) {
  cfg.validate();
  Rng rng = Rng::derive(cfg.seed, {kStreamInit});
  asr_ = std::make_unique<AsrModel>(cfg.asr, *params_, rng);
  tts_ = std::make_unique<TtsModel>(cfg.tts, *params_, rng);
}

StepResult chain_step(const ChainModel& model, const Utterance& utt, const ChainConfig& cfg, Rng& rng) {
  Graph g;
  const Matrix& x = utt.feats.mel;
  const EncodedSpeech enc = model.asr().encode(g, x);

  GenerateOptions opt;
  opt.mode = cfg.gen_mode;
  opt.tau = cfg.tau;
  opt.st = cfg.st_mode;
  opt.targets = &utt.tokens;
  opt.rng = &rng;
  const Generation gen = model.asr().generate(g, enc, opt);

  Var l_asr;
  if (cfg.gen_mode == GenMode::teacher_forcing) {
    l_asr = asr_nll_loss(gen, utt.tokens);
  } else {
    // The likelihood term always scores the ground truth under teacher forcing.
    GenerateOptions tf;
    tf.mode = GenMode::teacher_forcing;
    tf.tau = cfg.tau;
    tf.targets = &utt.tokens;
    l_asr = asr_nll_loss(model.asr().generate(g, enc, tf), utt.tokens);
  }

  const TtsOutput out = model.tts().forward(g, gen.onehot_matrix(), x, 0);
  Var l_rec = tts_recon_loss(out.mel, x);
  Var weighted_asr = scale(l_asr, cfg.w_asr);
  Var weighted_rec = scale(l_rec, cfg.w_rec);
  Var total = add(weighted_asr, weighted_rec);

  StepResult r;
  r.l_asr = l_asr.item();
  r.l_rec = l_rec.item();
  r.l_total = total.item();
  r.chain_tokens = gen.ids();
  r.truncated = gen.truncated;
  if (!finite(r.l_total)) throw DivergenceError("non-finite loss on utterance " + utt.id);

  r.grads = g.backward(weighted_rec);
  r.grad_norm_asr_from_rec = r.grads.norm("asr.");
  r.grads.accumulate(g.backward(weighted_asr));
  if (!r.grads.all_finite()) throw DivergenceError("non-finite gradient on utterance " + utt.id);
  return r;
}

double Adam::step(ParameterSet& params, GradientMap grads) {
  const double norm = grads.norm();
  if (!std::isfinite(norm)) throw DivergenceError("non-finite gradient norm");
  if (norm > cfg_.clip) grads.scale(cfg_.clip / norm);
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& p : params) {
    if (!grads.contains(p.name)) continue;
    const Matrix& gr = grads.at(p.name);
    auto [mit, m_new] = m_.try_emplace(p.name, Matrix::Zero(p.value.rows(), p.value.cols()));
    auto [vit, v_new] = v_.try_emplace(p.name, Matrix::Zero(p.value.rows(), p.value.cols()));
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * gr;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gr.cwiseProduct(gr);
    p.value.array() -= cfg_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.eps);
  }
  return norm;
}

void Adam::save(ArrayBundle& out) const {
  out.put_scalar("adam.t", static_cast<double>(t_));
  for (const auto& [name, m] : m_) out.put("adam.m/" + name, m);
  for (const auto& [name, v] : v_) out.put("adam.v/" + name, v);
}

void Adam::load(const ArrayBundle& in, const ParameterSet& params) {
  t_ = static_cast<long long>(in.scalar("adam.t"));
  m_.clear();
  v_.clear();
  for (const auto& p : params) {
    if (in.contains("adam.m/" + p.name)) m_[p.name] = in.matrix("adam.m/" + p.name);
    if (in.contains("adam.v/" + p.name)) v_[p.name] = in.matrix("adam.v/" + p.name);
  }
}

std::string metrics_line(const EpochRecord& r, const ChainConfig& cfg) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["l_asr"] = r.l_asr;
  j["l_rec"] = r.l_rec;
  j["l_total"] = r.l_total;
  j["val_cer"] = r.val_cer;
  j["grad_norm_asr_from_rec"] = r.grad_norm_asr_from_rec;
  j["seed"] = cfg.seed;
  j["st_mode"] = to_string(cfg.st_mode);
  j["gen_mode"] = to_string(cfg.gen_mode);
  j["tau"] = cfg.tau;
  return j.dump();
}

Trainer::Trainer(ChainModel& model, const ChainConfig& cfg, const Corpus& corpus)
    : model_(model), cfg_(cfg), corpus_(corpus), adam_(cfg.optim) {
  cfg_.validate();
  if (corpus_.train.empty()) throw std::invalid_argument("training split is empty");
  report_.best_val_cer = std::numeric_limits<double>::infinity();
  snapshot_best();
}

void Trainer::snapshot_best() {
  best_.clear();
  for (const auto& p : model_.params()) best_.push_back(p.value);
}

void Trainer::restore_best() {
  std::size_t i = 0;
  for (auto& p : model_.params()) p.value = best_[i++];
}

double Trainer::validation_cer() const {
  if (corpus_.dev.empty()) return 0.0;
  return evaluate_cer(model_.asr(), corpus_.dev, cfg_.beam, cfg_.threads).cer;
}

EpochRecord Trainer::run_epoch() {
  ++epoch_;
  const std::size_t n = corpus_.train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng = Rng::derive(cfg_.seed, {kStreamShuffle, static_cast<std::uint64_t>(epoch_)});
  std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

  EpochRecord rec;
  rec.epoch = epoch_;
  const std::size_t bs = static_cast<std::size_t>(cfg_.batch_size);
  for (std::size_t start = 0; start < n; start += bs) {
    const std::size_t count = std::min(bs, n - start);
    std::vector<StepResult> results(count);
    parallel_for(count, cfg_.threads, [&](std::size_t b) {
      const std::size_t u = order[start + b];
      Rng rng = Rng::derive(cfg_.seed, {kStreamStep, static_cast<std::uint64_t>(epoch_), u});
      results[b] = chain_step(model_, corpus_.train[u], cfg_, rng);
    });
    GradientMap batch;
    for (const auto& r : results) {
      batch.accumulate(r.grads);
      rec.l_asr += r.l_asr;
      rec.l_rec += r.l_rec;
      rec.l_total += r.l_total;
      rec.grad_norm_asr_from_rec += r.grad_norm_asr_from_rec;
      rec.max_decomposition_residual =
          std::max(rec.max_decomposition_residual, std::abs(r.l_total - (r.l_asr + r.l_rec)));
    }
    batch.scale(1.0 / static_cast<double>(count));
    if (cfg_.freeze_tts) batch.erase_prefix("tts.");
    adam_.step(model_.params(), std::move(batch));
  }
  const double inv = 1.0 / static_cast<double>(n);
  rec.l_asr *= inv;
  rec.l_rec *= inv;
  rec.l_total *= inv;
  rec.grad_norm_asr_from_rec *= inv;
  if (!finite(rec.l_total)) throw DivergenceError("non-finite epoch loss at epoch " + std::to_string(epoch_));
  rec.val_cer = validation_cer();
  if (rec.val_cer < report_.best_val_cer) {
    report_.best_val_cer = rec.val_cer;
    report_.best_epoch = epoch_;
    snapshot_best();
  }
  report_.epochs.push_back(rec);
  return rec;
}

void Trainer::save_state(ArrayBundle& out) const {
  for (const auto& p : model_.params()) out.put(p.name, p.value, static_cast<int>(p.shape.size()));
  adam_.save(out);
  out.put_scalar("train.epoch", epoch_);
  out.put_scalar("train.best_val_cer", report_.best_val_cer);
  out.put_scalar("train.best_epoch", report_.best_epoch);
  std::size_t i = 0;
  for (const auto& p : model_.params()) out.put("best/" + p.name, best_[i++]);
}

void Trainer::load_state(const ArrayBundle& in) {
  load_parameters(model_.params(), in);
  adam_.load(in, model_.params());
  epoch_ = static_cast<int>(in.scalar("train.epoch"));
  report_ = TrainReport{};
  report_.best_val_cer = in.scalar("train.best_val_cer");
  report_.best_epoch = static_cast<int>(in.scalar("train.best_epoch"));
  best_.clear();
  for (const auto& p : model_.params()) {
    Matrix m = in.matrix("best/" + p.name);
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols())
      throw CheckpointError("best/" + p.name + " has the wrong shape");
    best_.push_back(std::move(m));
  }
}

TrainReport train(Trainer& trainer, const ChainConfig& cfg, const TrainHooks& hooks) {
  while (trainer.epoch() < cfg.epochs) {
    const EpochRecord rec = trainer.run_epoch();
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  return trainer.report();
}

namespace {

void put_dims(ArrayBundle& out, const ChainConfig& cfg) {
  const auto& a = cfg.asr;
  const auto& t = cfg.tts;
  const std::pair<const char*, double> dims[] = {
      {"meta.asr.input_dim", double(a.input_dim)},   {"meta.asr.vocab", double(a.vocab)},
      {"meta.asr.eos", double(a.eos)},               {"meta.asr.enc_layers", double(a.enc_layers)},
      {"meta.asr.enc_hidden", double(a.enc_hidden)}, {"meta.asr.dec_hidden", double(a.dec_hidden)},
      {"meta.asr.embed", double(a.embed)},           {"meta.asr.att_dim", double(a.att_dim)},
      {"meta.asr.score", double(static_cast<int>(a.score))}, {"meta.att_history", double(a.att_history)},
      {"meta.tts.mel_dim", double(t.mel_dim)},       {"meta.tts.lin_dim", double(t.lin_dim)},
      {"meta.tts.embed", double(t.embed)},           {"meta.tts.enc_hidden", double(t.enc_hidden)},
      {"meta.tts.prenet", double(t.prenet)},         {"meta.tts.dec_hidden", double(t.dec_hidden)},
      {"meta.tts.att_dim", double(t.att_dim)},       {"meta.tts.speaker_dim", double(t.speaker_dim)},
      {"meta.tts.n_speakers", double(t.n_speakers)}, {"meta.tts.post_hidden", double(t.post_hidden)},
      {"meta.tau", cfg.tau},                         {"meta.seed", double(cfg.seed)},
  };
  for (const auto& [k, v] : dims) out.put_scalar(k, v);
}

void put_stats(ArrayBundle& out, const NormStats& s) {
  out.put("norm.mel_mean", s.mel_mean, 1);
  out.put("norm.mel_std", s.mel_std, 1);
  out.put("norm.lin_mean", s.lin_mean, 1);
  out.put("norm.lin_std", s.lin_std, 1);
}

}  // namespace

void save_model(ArrayBundle& out, const std::vector<Matrix>& values, const ChainModel& model, const ChainConfig& cfg,
                const NormStats& stats) {
  std::size_t i = 0;
  for (const auto& p : model.params()) out.put(p.name, values.at(i++), static_cast<int>(p.shape.size()));
  put_dims(out, cfg);
  put_stats(out, stats);
}

void save_model(ArrayBundle& out, const ChainModel& model, const ChainConfig& cfg, const NormStats& stats) {
  std::vector<Matrix> values;
  for (const auto& p : model.params()) values.push_back(p.value);
  save_model(out, values, model, cfg, stats);
}

void load_parameters(ParameterSet& params, const ArrayBundle& in) {
  for (auto& p : params) {
    Matrix m = in.matrix(p.name);
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols())
      throw CheckpointError("parameter '" + p.name + "' has shape " + shape_string(m) + " in the checkpoint, model expects " +
                            shape_string(p.value));
    p.value = std::move(m);
  }
}

LoadedModel load_model(const ArrayBundle& in) {
  LoadedModel lm;
  auto dim = [&](const char* k) { return static_cast<Index>(in.scalar(k)); };
  auto& a = lm.cfg.asr;
  a.input_dim = dim("meta.asr.input_dim");
  a.vocab = dim("meta.asr.vocab");
  a.eos = static_cast<int>(dim("meta.asr.eos"));
  a.enc_layers = dim("meta.asr.enc_layers");
  a.enc_hidden = dim("meta.asr.enc_hidden");
  a.dec_hidden = dim("meta.asr.dec_hidden");
  a.embed = dim("meta.asr.embed");
  a.att_dim = dim("meta.asr.att_dim");
  a.score = static_cast<ScoreKind>(dim("meta.asr.score"));
  a.att_history = in.scalar("meta.att_history") != 0.0;
  auto& t = lm.cfg.tts;
  t.vocab = a.vocab;
  t.mel_dim = dim("meta.tts.mel_dim");
  t.lin_dim = dim("meta.tts.lin_dim");
  t.embed = dim("meta.tts.embed");
  t.enc_hidden = dim("meta.tts.enc_hidden");
  t.prenet = dim("meta.tts.prenet");
  t.dec_hidden = dim("meta.tts.dec_hidden");
  t.att_dim = dim("meta.tts.att_dim");
  t.speaker_dim = dim("meta.tts.speaker_dim");
  t.n_speakers = dim("meta.tts.n_speakers");
  t.post_hidden = dim("meta.tts.post_hidden");
  t.att_history = a.att_history;
  lm.cfg.tau = in.scalar("meta.tau");
  lm.cfg.seed = static_cast<std::uint64_t>(in.scalar("meta.seed"));
  lm.model = std::make_unique<ChainModel>(lm.cfg);
  load_parameters(lm.model->params(), in);
  lm.stats.mel_mean = in.matrix("norm.mel_mean");
  lm.stats.mel_std = in.matrix("norm.mel_std");
  lm.stats.lin_mean = in.matrix("norm.lin_mean");
  lm.stats.lin_std = in.matrix("norm.lin_std");
  return lm;
}

double AblationReport::mean_baseline_cer() const {
  double s = 0.0;
  for (const auto& r : rows) s += r.baseline.val_cer;
  return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

double AblationReport::mean_proposed_cer() const {
  double s = 0.0;
  for (const auto& r : rows) s += r.proposed.val_cer;
  return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

int AblationReport::proposed_not_worse() const {
  int n = 0;
  for (const auto& r : rows) n += r.proposed.val_cer <= r.baseline.val_cer ? 1 : 0;
  return n;
}

namespace {

ArmResult run_arm(const Corpus& corpus, const std::vector<Utterance>* noiseless_dev, const ChainConfig& cfg) {
  ChainModel model(cfg);
  Trainer trainer(model, cfg, corpus);
  ArmResult r;
  r.report = train(trainer, cfg);
  trainer.restore_best();
  r.val_cer = r.report.epochs.empty() ? trainer.validation_cer() : r.report.best_val_cer;
  if (noiseless_dev) r.noiseless_cer = evaluate_cer(model.asr(), *noiseless_dev, cfg.beam, cfg.threads).cer;
  return r;
}

}  // namespace

std::pair<ArmResult, ArmResult> compare_arms(const Corpus& corpus, const std::vector<Utterance>* noiseless_dev,
                                             const ChainConfig& baseline, const ChainConfig& proposed) {
  if (baseline.seed != proposed.seed) throw std::invalid_argument("ablation arms must share one seed");
  auto dims = [](const ChainConfig& c) {
    ChainConfig d = c;
    d.st_mode = StMode::none;
    d.gen_mode = GenMode::teacher_forcing;
    d.tau = 1.0;
    return chain_config_to_text(d);
  };
  if (dims(baseline) != dims(proposed))
    throw std::invalid_argument("ablation arms must differ only in st_mode, gen_mode and tau");
  return {run_arm(corpus, noiseless_dev, baseline), run_arm(corpus, noiseless_dev, proposed)};
}

AblationReport ablation_compare(const Corpus& corpus, const std::vector<Utterance>* noiseless_dev,
                                const ChainConfig& base, const std::vector<std::uint64_t>& seeds,
                                const std::function<void(const AblationRow&)>& on_row) {
  AblationReport report;
  for (auto seed : seeds) {
    ChainConfig b = base;
    b.seed = seed;
    b.st_mode = StMode::none;
    ChainConfig p = b;
    p.st_mode = StMode::gumbel;
    p.gen_mode = GenMode::teacher_forcing;
    p.tau = 1.0;
    AblationRow row;
    row.seed = seed;
    std::tie(row.baseline, row.proposed) = compare_arms(corpus, noiseless_dev, b, p);
    if (on_row) on_row(row);
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace chainflow
