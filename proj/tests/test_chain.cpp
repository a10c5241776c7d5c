#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "chainflow/chain.hpp"
#include "chainflow/config.hpp"
#include "chainflow/gradcheck.hpp"

#include <cmath>
#include <cstring>

using namespace chainflow;

namespace {

// Two-character words over {a, b, c}: ids 1..3, inside the micro vocabulary.
Corpus micro_corpus(std::size_t n, std::uint64_t seed) {
  SynthSpec spec;
  spec.mel_dim = 4;
  spec.lin_dim = 6;
  spec.alphabet = "abc";
  spec.min_len = 2;
  spec.max_len = 2;
  Corpus c = gen_corpus(n, spec, seed);
  normalize_corpus(c);
  return c;
}

ChainConfig micro_train_config(StMode st) {
  ChainConfig cfg = micro_chain_config(st);
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.beam = 2;
  return cfg;
}

bool same_params(const ParameterSet& a, const ParameterSet& b) {
  auto ia = a.begin();
  for (auto ib = b.begin(); ib != b.end(); ++ia, ++ib) {
    if (ia->name != ib->name || ia->value.size() != ib->value.size()) return false;
    if (std::memcmp(ia->value.data(), ib->value.data(), sizeof(double) * static_cast<std::size_t>(ia->value.size())))
      return false;
  }
  return ia == a.end();
}

}  // namespace

TEST_CASE("config parsing reports the offending line") {
  try {
    parse_chain_config("st_mode = gumbel\n# comment\nwarmup = 3\n", "run.cfg");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
    CHECK(std::string(e.what()).find("warmup") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_chain_config("st_mode = sometimes\n", "run.cfg"), ParseError);
  CHECK_THROWS_AS(parse_chain_config("tau = 0\n", "run.cfg"), ParseError);
  CHECK_THROWS_AS(parse_chain_config("batch_size = 0\n", "run.cfg"), ParseError);
  CHECK_THROWS_AS(parse_chain_config("epochs = many\n", "run.cfg"), ParseError);
}

TEST_CASE("config values and the tau grid") {
  std::vector<double> grid;
  const ChainConfig cfg =
      parse_chain_config("st_mode = argmax\ngen_mode = greedy\ntau = 0.5, 1, 2, 4\nlr = 0.01\nfreeze_tts = true\n",
                         "run.cfg", &grid);
  CHECK(cfg.st_mode == StMode::argmax);
  CHECK(cfg.gen_mode == GenMode::greedy);
  CHECK(cfg.tau == 0.5);
  CHECK(grid == std::vector<double>{0.5, 1.0, 2.0, 4.0});
  CHECK(cfg.optim.lr == 0.01);
  CHECK(cfg.freeze_tts);
  const ChainConfig back = parse_chain_config(chain_config_to_text(cfg), "echo");
  CHECK(chain_config_to_text(back) == chain_config_to_text(cfg));
}

TEST_CASE("without straight-through the reconstruction loss sends no gradient to the recognizer") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ChainConfig cfg = micro_chain_config(StMode::none);
    cfg.seed = seed;
    const ChainModel model(cfg);
    Rng rng(seed);
    const StepResult r = chain_step(model, micro_utterance(seed), cfg, rng);
    CHECK(r.grad_norm_asr_from_rec == 0.0);
  }
}

TEST_CASE("straight-through estimators let the reconstruction loss reach the recognizer") {
  for (StMode st : {StMode::argmax, StMode::gumbel})
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      ChainConfig cfg = micro_chain_config(st);
      cfg.seed = seed;
      const ChainModel model(cfg);
      Rng rng(seed);
      const StepResult r = chain_step(model, micro_utterance(seed), cfg, rng);
      CHECK(r.grad_norm_asr_from_rec > 0.0);
    }
}

TEST_CASE("the combined loss is the sum of its parts") {
  for (StMode st : {StMode::none, StMode::argmax, StMode::gumbel}) {
    ChainConfig cfg = micro_chain_config(st);
    const ChainModel model(cfg);
    Rng rng(3);
    const StepResult r = chain_step(model, micro_utterance(3), cfg, rng);
    CHECK(std::abs(r.l_total - (r.l_asr + r.l_rec)) <= 1e-12);
  }
  ChainConfig cfg = micro_chain_config(StMode::gumbel);
  cfg.w_asr = 0.25;
  cfg.w_rec = 2.0;
  const ChainModel model(cfg);
  Rng rng(3);
  const StepResult r = chain_step(model, micro_utterance(3), cfg, rng);
  CHECK(r.l_total == doctest::Approx(0.25 * r.l_asr + 2.0 * r.l_rec).epsilon(1e-14));
}

TEST_CASE("free-running chain steps score the ground truth by teacher forcing") {
  for (GenMode mode : {GenMode::greedy, GenMode::sample}) {
    ChainConfig cfg = micro_chain_config(StMode::argmax);
    cfg.gen_mode = mode;
    const ChainModel model(cfg);
    Rng rng(4);
    const StepResult r = chain_step(model, micro_utterance(4), cfg, rng);
    ChainConfig tf = cfg;
    tf.gen_mode = GenMode::teacher_forcing;
    tf.st_mode = StMode::none;
    Rng rng2(4);
    CHECK(r.l_asr == chain_step(model, micro_utterance(4), tf, rng2).l_asr);
    CHECK(std::isfinite(r.l_rec));
  }
}

TEST_CASE("chain gradients match finite differences") {
  for (const auto& r : check_chain(5)) {
    INFO(r.name << " " << r.max_rel_error);
    CHECK(r.passed);
  }
}

TEST_CASE("adam update against a hand computation, with clipping") {
  OptimConfig oc;
  oc.lr = 0.1;
  oc.clip = 1.0;
  ParameterSet ps;
  Matrix w0(1, 2);
  w0 << 0.5, -1.0;
  ps.add(Parameter("w", w0));
  Adam adam(oc);
  const Matrix gs[3] = {(Matrix(1, 2) << 3.0, 4.0).finished(), (Matrix(1, 2) << 0.1, -0.2).finished(),
                        (Matrix(1, 2) << -2.0, 0.0).finished()};
  Matrix w = w0, m = Matrix::Zero(1, 2), v = Matrix::Zero(1, 2);
  for (int t = 1; t <= 3; ++t) {
    Matrix g = gs[t - 1];
    if (g.norm() > 1.0) g /= g.norm();
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g.cwiseProduct(g);
    for (Index i = 0; i < 2; ++i) {
      const double mh = m(0, i) / (1.0 - std::pow(0.9, t));
      const double vh = v(0, i) / (1.0 - std::pow(0.999, t));
      w(0, i) -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
    GradientMap gm;
    gm.accumulate("w", gs[t - 1]);
    const double pre = adam.step(ps, gm);
    CHECK(pre == doctest::Approx(gs[t - 1].norm()));
    CHECK((ps.get("w").value - w).cwiseAbs().maxCoeff() < 1e-14);
  }
  CHECK(adam.steps() == 3);
}

TEST_CASE("adam skips parameters without a gradient") {
  ParameterSet ps;
  ps.add(Parameter("a", Matrix::Ones(1, 1)));
  ps.add(Parameter("b", Matrix::Ones(1, 1)));
  Adam adam;
  GradientMap gm;
  gm.accumulate("a", Matrix::Ones(1, 1));
  adam.step(ps, gm);
  CHECK(ps.get("a").value(0, 0) < 1.0);
  CHECK(ps.get("b").value(0, 0) == 1.0);
}

TEST_CASE("training is deterministic, including across worker counts") {
  const Corpus corpus = micro_corpus(12, 2);
  std::vector<std::string> streams;
  for (int threads : {1, 1, 2}) {
    ChainConfig cfg = micro_train_config(StMode::gumbel);
    cfg.threads = threads;
    ChainModel model(cfg);
    Trainer trainer(model, cfg, corpus);
    std::string s;
    train(trainer, cfg, {[&](const EpochRecord& r) { s += metrics_line(r, cfg) + "\n"; }});
    streams.push_back(s);
  }
  CHECK(streams[0] == streams[1]);
  CHECK(streams[0] == streams[2]);
}

TEST_CASE("every training step keeps the loss decomposition exact") {
  const Corpus corpus = micro_corpus(12, 3);
  ChainConfig cfg = micro_train_config(StMode::gumbel);
  ChainModel model(cfg);
  Trainer trainer(model, cfg, corpus);
  for (const auto& r : train(trainer, cfg).epochs) CHECK(r.max_decomposition_residual <= 1e-12);
}

TEST_CASE("a resumed run matches an uninterrupted one") {
  const Corpus corpus = micro_corpus(12, 4);
  ChainConfig cfg = micro_train_config(StMode::argmax);

  ChainModel straight(cfg);
  Trainer t1(straight, cfg, corpus);
  const TrainReport full = train(t1, cfg);

  ChainConfig first = cfg;
  first.epochs = 1;
  ChainModel part(cfg);
  Trainer t2(part, first, corpus);
  train(t2, first);
  ArrayBundle state;
  t2.save_state(state);
  const ArrayBundle restored = decode_checkpoint(encode_checkpoint(state));

  ChainModel resumed(cfg);
  Trainer t3(resumed, cfg, corpus);
  t3.load_state(restored);
  CHECK(t3.epoch() == 1);
  const TrainReport rest = train(t3, cfg);
  CHECK(same_params(straight.params(), resumed.params()));
  REQUIRE(rest.epochs.size() == 2);
  CHECK(metrics_line(rest.epochs.back(), cfg) == metrics_line(full.epochs.back(), cfg));
  CHECK(rest.best_epoch == full.best_epoch);
}

TEST_CASE("zero epochs keep the initial parameters as best") {
  const Corpus corpus = micro_corpus(6, 5);
  ChainConfig cfg = micro_train_config(StMode::gumbel);
  cfg.epochs = 0;
  ChainModel model(cfg);
  ChainModel fresh(cfg);
  Trainer trainer(model, cfg, corpus);
  const TrainReport r = train(trainer, cfg);
  CHECK(r.epochs.empty());
  CHECK(r.best_epoch == 0);
  trainer.restore_best();
  CHECK(same_params(model.params(), fresh.params()));
}

TEST_CASE("frozen tts parameters do not move") {
  const Corpus corpus = micro_corpus(6, 6);
  ChainConfig cfg = micro_train_config(StMode::gumbel);
  cfg.epochs = 1;
  cfg.freeze_tts = true;
  ChainModel model(cfg);
  ChainModel fresh(cfg);
  Trainer trainer(model, cfg, corpus);
  train(trainer, cfg);
  auto it = fresh.params().begin();
  for (const auto& p : model.params()) {
    if (p.name.starts_with("tts."))
      CHECK(p.value == it->value);
    else if (p.name == "asr.out.weight")
      CHECK(p.value != it->value);
    ++it;
  }
}

TEST_CASE("a training split is required") {
  Corpus empty;
  ChainConfig cfg = micro_train_config(StMode::none);
  ChainModel model(cfg);
  CHECK_THROWS_AS(Trainer(model, cfg, empty), std::invalid_argument);
}

TEST_CASE("non-finite features abort the step") {
  ChainConfig cfg = micro_chain_config(StMode::gumbel);
  const ChainModel model(cfg);
  Utterance u = micro_utterance(1);
  u.feats.mel(2, 1) = std::nan("");
  Rng rng(1);
  bool numeric = false;
  try {
    chain_step(model, u, cfg, rng);
  } catch (const DivergenceError&) {
    numeric = true;
  } catch (const NumericError&) {
    numeric = true;
  }
  CHECK(numeric);
}

TEST_CASE("model files round trip") {
  ChainConfig cfg = micro_chain_config(StMode::gumbel);
  cfg.seed = 9;
  const ChainModel model(cfg);
  const Corpus corpus = micro_corpus(6, 7);
  NormStats stats = fit_normalization(corpus.train);
  ArrayBundle out;
  save_model(out, model, cfg, stats);
  const LoadedModel lm = load_model(decode_checkpoint(encode_checkpoint(out)));
  CHECK(same_params(model.params(), lm.model->params()));
  CHECK(lm.stats.mel_mean == stats.mel_mean);
  CHECK(lm.cfg.tau == cfg.tau);
  const Matrix& x = corpus.train[0].feats.mel;
  CHECK(lm.model->asr().greedy_decode(x) == model.asr().greedy_decode(x));

  ChainConfig other = cfg;
  other.asr.dec_hidden = 6;
  ChainModel wrong(other);
  CHECK_THROWS_AS(load_parameters(wrong.params(), out), CheckpointError);
}

TEST_CASE("ablation arms must share the seed and the model") {
  const Corpus corpus = micro_corpus(6, 8);
  ChainConfig a = micro_train_config(StMode::none);
  ChainConfig b = micro_train_config(StMode::gumbel);
  b.seed = a.seed + 1;
  CHECK_THROWS_AS(compare_arms(corpus, nullptr, a, b), std::invalid_argument);
  b.seed = a.seed;
  b.asr.att_dim = 6;
  CHECK_THROWS_AS(compare_arms(corpus, nullptr, a, b), std::invalid_argument);
}

TEST_CASE("ablation runs both arms per seed") {
  const Corpus corpus = micro_corpus(8, 9);
  ChainConfig base = micro_train_config(StMode::argmax);
  base.epochs = 1;
  int rows = 0;
  const AblationReport rep = ablation_compare(corpus, &corpus.dev, base, {1, 2}, [&](const AblationRow&) { ++rows; });
  CHECK(rows == 2);
  REQUIRE(rep.rows.size() == 2);
  for (const auto& r : rep.rows) {
    CHECK(r.baseline.report.epochs.size() == 1);
    CHECK(r.proposed.report.epochs.size() == 1);
    CHECK(r.baseline.val_cer == r.baseline.report.best_val_cer);
  }
  CHECK(rep.proposed_not_worse() >= 0);
  CHECK(rep.mean_baseline_cer() == doctest::Approx((rep.rows[0].baseline.val_cer + rep.rows[1].baseline.val_cer) / 2));
}
