#include "chainflow/gradcheck.hpp"

#include "chainflow/config.hpp"

#include <cmath>
#include <cstring>

namespace chainflow {

double relative_error(const Matrix& analytic, const Matrix& numeric) {
  if (analytic.rows() != numeric.rows() || analytic.cols() != numeric.cols())
    throw ShapeError("relative_error: " + shape_string(analytic) + " vs " + shape_string(numeric));
  const double scale = std::max(analytic.norm(), numeric.norm());
  if (scale < 1e-300) return 0.0;
  return (analytic - numeric).norm() / scale;
}

Matrix numeric_gradient(const std::function<double()>& f, Matrix& x, double h) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + h;
    const double up = f();
    x.data()[i] = orig - h;
    const double down = f();
    x.data()[i] = orig;
    out.data()[i] = (up - down) / (2.0 * h);
  }
  return out;
}

namespace {

enum class Domain { any, positive, away_from_zero, probability };

Matrix draw(Index rows, Index cols, Domain d, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    switch (d) {
      case Domain::any:
        m.data()[i] = rng.normal();
        break;
      case Domain::positive:
        m.data()[i] = rng.uniform(0.2, 2.0);
        break;
      case Domain::away_from_zero:
        m.data()[i] = (rng.uniform_int(0, 1) ? 1.0 : -1.0) * rng.uniform(0.2, 1.5);
        break;
      case Domain::probability:
        m.data()[i] = rng.uniform(0.1, 0.9);
        break;
    }
  }
  return m;
}

struct Input {
  Index rows, cols;
  Domain domain = Domain::any;
};

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

struct OpCase {
  std::string name;
  std::vector<Input> inputs;
  Builder build;
};

// Layers own extra parameters; `setup` registers them and returns the builder.
struct LayerCase {
  std::string name;
  std::vector<Input> inputs;
  std::function<Builder(ParameterSet&, Rng&)> setup;
};

std::vector<OpCase> op_cases() {
  using V = const std::vector<Var>&;
  std::vector<OpCase> c;
  c.push_back({"matmul", {{3, 4}, {4, 2}}, [](Graph&, V x) { return matmul(x[0], x[1]); }});
  c.push_back({"add", {{3, 4}, {3, 4}}, [](Graph&, V x) { return add(x[0], x[1]); }});
  c.push_back({"add_row_broadcast", {{3, 4}, {1, 4}}, [](Graph&, V x) { return add(x[0], x[1]); }});
  c.push_back({"sub", {{3, 4}, {3, 4}}, [](Graph&, V x) { return sub(x[0], x[1]); }});
  c.push_back({"mul", {{3, 4}, {3, 4}}, [](Graph&, V x) { return mul(x[0], x[1]); }});
  c.push_back({"scale", {{3, 4}}, [](Graph&, V x) { return scale(x[0], -1.7); }});
  c.push_back({"concat_cols", {{3, 2}, {3, 3}}, [](Graph&, V x) { return concat_cols({x[0], x[1]}); }});
  c.push_back({"concat_rows", {{2, 4}, {3, 4}}, [](Graph&, V x) { return concat_rows({x[0], x[1]}); }});
  c.push_back({"slice_cols", {{3, 5}}, [](Graph&, V x) { return slice_cols(x[0], 1, 3); }});
  c.push_back({"slice_rows", {{5, 3}}, [](Graph&, V x) { return slice_rows(x[0], 1, 2); }});
  c.push_back({"row", {{4, 3}}, [](Graph&, V x) { return row(x[0], 2); }});
  c.push_back({"gather_rows", {{4, 3}}, [](Graph&, V x) { return gather_rows(x[0], {2, 0, 2, 3}); }});
  c.push_back({"reshape", {{3, 4}}, [](Graph&, V x) { return reshape(x[0], 2, 6); }});
  c.push_back({"transpose", {{3, 4}}, [](Graph&, V x) { return transpose(x[0]); }});
  c.push_back({"sigmoid", {{3, 4}}, [](Graph&, V x) { return sigmoid(x[0]); }});
  c.push_back({"tanh", {{3, 4}}, [](Graph&, V x) { return tanh(x[0]); }});
  c.push_back({"relu", {{3, 4, Domain::away_from_zero}}, [](Graph&, V x) { return relu(x[0]); }});
  c.push_back({"leaky_relu", {{3, 4, Domain::away_from_zero}}, [](Graph&, V x) { return leaky_relu(x[0]); }});
  c.push_back({"exp", {{3, 4}}, [](Graph&, V x) { return exp(x[0]); }});
  c.push_back({"log", {{3, 4, Domain::positive}}, [](Graph&, V x) { return log(x[0]); }});
  c.push_back({"square", {{3, 4}}, [](Graph&, V x) { return square(x[0]); }});
  c.push_back({"sum", {{3, 4}}, [](Graph&, V x) { return sum(x[0]); }});
  c.push_back({"mean", {{3, 4}}, [](Graph&, V x) { return mean(x[0]); }});
  c.push_back({"dot", {{1, 5}, {1, 5}}, [](Graph&, V x) { return dot(x[0], x[1]); }});
  for (double tau : {0.5, 1.0, 2.0})
    c.push_back({"temperature_softmax(tau=" + format_double(tau) + ")",
                 {{1, 5}},
                 [tau](Graph&, V x) { return temperature_softmax(x[0], tau); }});
  c.push_back({"masked_softmax",
               {{1, 5}},
               [](Graph&, V x) { return masked_softmax(x[0], {true, false, true, true, false}); }});
  c.push_back({"mse", {{3, 4}, {3, 4}}, [](Graph&, V x) { return mse(x[0], x[1]); }});
  c.push_back({"sse", {{3, 4}, {3, 4}}, [](Graph&, V x) { return sse(x[0], x[1]); }});
  c.push_back({"masked_cross_entropy",
               {{3, 4, Domain::probability}},
               [](Graph&, V x) { return masked_cross_entropy(x[0], {1, 0, 3}, {true, true, false}, 1e-12); }});
  c.push_back({"binary_cross_entropy", {{3, 1, Domain::probability}}, [](Graph&, V x) {
                 Matrix t(3, 1);
                 t << 1.0, 0.0, 1.0;
                 return binary_cross_entropy(x[0], t);
               }});
  c.push_back({"lstm_pointwise", {{1, 12}, {1, 3}}, [](Graph&, V x) { return lstm_pointwise(x[0], x[1]); }});
  return c;
}

std::vector<LayerCase> layer_cases() {
  std::vector<LayerCase> c;
  c.push_back({"linear", {{3, 4}}, [](ParameterSet& ps, Rng& rng) -> Builder {
                 Linear lin = Linear::create(ps, "lin", 4, 3, rng);
                 ps.get_mutable("lin.bias").value = draw(1, 3, Domain::any, rng);
                 return [lin](Graph& g, const std::vector<Var>& x) { return lin(g, x[0]); };
               }});
  c.push_back({"lstm_sequence", {{4, 3}}, [](ParameterSet& ps, Rng& rng) -> Builder {
                 LstmCell cell = LstmCell::create(ps, "lstm", 3, 2, rng);
                 return [cell](Graph& g, const std::vector<Var>& x) { return run_lstm(g, cell, x[0], false); };
               }});
  c.push_back({"bilstm", {{4, 3}}, [](ParameterSet& ps, Rng& rng) -> Builder {
                 BiLstm b = BiLstm::create(ps, "bilstm", 3, 2, rng);
                 return [b](Graph& g, const std::vector<Var>& x) { return b(g, x[0]); };
               }});
  for (const auto& [kind, history] : std::vector<std::pair<ScoreKind, bool>>{
           {ScoreKind::dot, false}, {ScoreKind::bilinear, false}, {ScoreKind::mlp, false}, {ScoreKind::mlp, true}}) {
    const Index qdim = kind == ScoreKind::dot ? 4 : 3;
    c.push_back({"attention(" + to_string(kind) + (history ? "+history" : "") + ")",
                 {{5, 4}, {1, qdim}, {1, 5, Domain::probability}},
                 [kind, qdim, history](ParameterSet& ps, Rng& rng) -> Builder {
                   AttentionParams a = AttentionParams::create(ps, "att", kind, 4, qdim, 3, rng, history);
                   return [a](Graph& g, const std::vector<Var>& x) {
                     AttentionMemory mem = prepare_attention(g, a, x[0], {true, true, true, false, true});
                     AttentionResult r = attend(g, a, mem, x[1], x[2]);
                     return concat_cols({r.context, r.weights});
                   };
                 }});
  }
  return c;
}

// Loss = sum(W .* f(inputs, params)) with a fixed random W.
CheckResult run_case(const std::string& name, const std::vector<Input>& inputs,
                     const std::function<Builder(ParameterSet&, Rng&)>& setup, std::uint64_t seed, int trials,
                     double tolerance) {
  CheckResult res{name, 0.0, tolerance, true};
  for (int t = 0; t < trials; ++t) {
    Rng rng = Rng::derive(seed, {std::hash<std::string>{}(name), static_cast<std::uint64_t>(t)});
    ParameterSet ps;
    std::vector<const Parameter*> in_params;
    for (std::size_t i = 0; i < inputs.size(); ++i)
      in_params.push_back(&ps.add(Parameter("input" + std::to_string(i),
                                            draw(inputs[i].rows, inputs[i].cols, inputs[i].domain, rng))));
    const Builder build = setup(ps, rng);

    Matrix weights;
    auto loss_of = [&](Graph& g) {
      std::vector<Var> xs;
      for (const Parameter* p : in_params) xs.push_back(g.parameter(*p));
      Var out = build(g, xs);
      if (weights.size() == 0) weights = draw(out.rows(), out.cols(), Domain::any, rng);
      return sum(mul(out, g.constant(weights)));
    };
    Graph g;
    const GradientMap analytic = g.backward(loss_of(g));
    auto value = [&] {
      Graph h;
      h.set_grad_enabled(false);
      return loss_of(h).item();
    };
    for (auto& p : ps) {
      const Matrix numeric = numeric_gradient(value, p.value);
      const Matrix a = analytic.contains(p.name) ? analytic.at(p.name) : Matrix::Zero(p.value.rows(), p.value.cols());
      res.max_rel_error = std::max(res.max_rel_error, relative_error(a, numeric));
    }
  }
  res.passed = res.max_rel_error < tolerance;
  return res;
}

bool bit_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

// Softmax Jacobian-vector product at output y: (diag(y) - y^T y) w / tau.
Matrix softmax_vjp(const Matrix& y, const Matrix& w, double tau) {
  const double inner = (y.array() * w.array()).sum();
  return (y.array() * (w.array() - inner) / tau).matrix();
}

}  // namespace

std::vector<CheckResult> check_primitives(std::uint64_t seed, int trials, double tolerance) {
  std::vector<CheckResult> out;
  for (const auto& c : op_cases()) {
    auto setup = [&c](ParameterSet&, Rng&) { return c.build; };
    out.push_back(run_case(c.name, c.inputs, setup, seed, trials, tolerance));
  }
  for (const auto& c : layer_cases()) out.push_back(run_case(c.name, c.inputs, c.setup, seed, trials, tolerance));
  return out;
}

std::vector<CheckResult> check_straight_through(std::uint64_t seed, int trials) {
  CheckResult argmax_id{"st_argmax identity", 0.0, 0.0, true};
  CheckResult gumbel_id{"st_gumbel identity", 0.0, 0.0, true};
  CheckResult onehot{"st forward one-hot", 0.0, 0.0, true};
  CheckResult argmax_chain{"st_argmax through softmax", 0.0, 1e-10, true};
  CheckResult gumbel_chain{"st_gumbel through gumbel softmax", 0.0, 1e-10, true};

  for (int t = 0; t < trials; ++t) {
    Rng rng = Rng::derive(seed, {static_cast<std::uint64_t>(t)});
    const Index classes = rng.uniform_int(2, 8);
    Matrix logits = draw(1, classes, Domain::any, rng) * 2.0;
    const Matrix upstream = draw(1, classes, Domain::any, rng);
    Matrix p = (logits.array() - logits.maxCoeff()).exp();
    p /= p.sum();

    for (int which = 0; which < 2; ++which) {
      Graph g;
      Var pv = g.variable(p);
      OneHotToken tok = which == 0 ? st_argmax_onehot(pv) : st_gumbel_sample(pv, rng);
      const Matrix& y = tok.vector.value();
      const bool valid = y.sum() == 1.0 && y(0, tok.class_index) == 1.0 &&
                         (which == 1 || tok.class_index == argmax_lowest(p.row(0)));
      if (!valid) onehot.passed = false;
      g.backward(sum(mul(tok.vector, g.constant(upstream))));
      if (!bit_equal(g.grad(pv), upstream)) {
        CheckResult& r = which == 0 ? argmax_id : gumbel_id;
        r.passed = false;
        r.max_rel_error = std::max(r.max_rel_error, relative_error(g.grad(pv), upstream));
      }
    }

    const double tau = rng.uniform(0.25, 2.0);
    {
      Graph g;
      Var lv = g.variable(logits);
      Var probs = temperature_softmax(lv, tau);
      OneHotToken tok = st_argmax_onehot(probs);
      g.backward(sum(mul(tok.vector, g.constant(upstream))));
      const double e = relative_error(g.grad(lv), softmax_vjp(probs.value(), upstream, tau));
      argmax_chain.max_rel_error = std::max(argmax_chain.max_rel_error, e);
    }
    {
      Graph g;
      Var lv = g.variable(logits);
      const GumbelNoise noise = sample_gumbel(classes, rng);
      Var probs = gumbel_softmax_probs(lv, tau, noise);
      OneHotToken tok = st_gumbel_sample(probs, rng);
      g.backward(sum(mul(tok.vector, g.constant(upstream))));
      const double e = relative_error(g.grad(lv), softmax_vjp(probs.value(), upstream, tau));
      gumbel_chain.max_rel_error = std::max(gumbel_chain.max_rel_error, e);
    }
  }
  argmax_chain.passed = argmax_chain.max_rel_error < argmax_chain.tolerance;
  gumbel_chain.passed = gumbel_chain.max_rel_error < gumbel_chain.tolerance;
  return {argmax_id, gumbel_id, onehot, argmax_chain, gumbel_chain};
}

ChainConfig micro_chain_config(StMode st) {
  ChainConfig cfg;
  cfg.st_mode = st;
  cfg.gen_mode = GenMode::teacher_forcing;
  cfg.tau = 1.0;
  cfg.asr.input_dim = 4;
  cfg.asr.vocab = 4;
  cfg.asr.eos = 0;
  cfg.asr.enc_layers = 2;
  cfg.asr.enc_hidden = 8;
  cfg.asr.dec_hidden = 8;
  cfg.asr.embed = 8;
  cfg.asr.att_dim = 8;
  cfg.tts.vocab = 4;
  cfg.tts.mel_dim = 4;
  cfg.tts.lin_dim = 6;
  cfg.tts.embed = 8;
  cfg.tts.enc_hidden = 8;
  cfg.tts.prenet = 8;
  cfg.tts.dec_hidden = 8;
  cfg.tts.att_dim = 8;
  cfg.tts.speaker_dim = 8;
  cfg.tts.post_hidden = 8;
  return cfg;
}

Utterance micro_utterance(std::uint64_t seed) {
  Rng rng = Rng::derive(seed, {99});
  Utterance u;
  u.id = "micro";
  u.tokens.ids = {1, 2, 3, 0};
  u.feats.mel = draw(8, 4, Domain::any, rng);
  u.feats.lin = draw(8, 6, Domain::any, rng);
  u.feats.stop.assign(8, 0.0);
  u.feats.stop.back() = 1.0;
  return u;
}

namespace {

// Compares chain_step gradients of `cfg` against the frozen-realization surrogate
// on `per_tensor` sampled entries of every parameter whose name starts with `prefix`.
double chain_gradient_error(ChainModel& model, const Utterance& utt, const ChainConfig& cfg,
                            std::uint64_t noise_seed, const std::string& prefix, int per_tensor, Rng& pick) {
  Rng step_rng(noise_seed);
  const StepResult step = chain_step(model, utt, cfg, step_rng);

  auto generation = [&](Graph& g) {
    Rng rng(noise_seed);
    GenerateOptions opt;
    opt.tau = cfg.tau;
    opt.st = cfg.st_mode;
    opt.targets = &utt.tokens;
    opt.rng = &rng;
    return model.asr().generate(g, utt.feats.mel, opt);
  };

  // Realization and its source distribution at the base point.
  Matrix y0, s0;
  {
    Graph g;
    g.set_grad_enabled(false);
    const Generation gen = generation(g);
    y0 = gen.onehot_matrix().value();
    s0 = concat_rows(std::span<const Var>(gen.sources)).value();
  }

  auto surrogate = [&] {
    Graph g;
    g.set_grad_enabled(false);
    const Generation gen = generation(g);
    const Matrix s = concat_rows(std::span<const Var>(gen.sources)).value();
    const Matrix input = cfg.st_mode == StMode::none ? y0 : Matrix(y0 + (s - s0));
    const TtsOutput out = model.tts().forward(g, g.constant(input), utt.feats.mel);
    const double l_rec = tts_recon_loss(out.mel, utt.feats.mel).item();
    const double l_asr = asr_nll_loss(gen, utt.tokens).item();
    return cfg.w_asr * l_asr + cfg.w_rec * l_rec;
  };

  std::vector<double> analytic, numeric;
  for (auto& p : model.params()) {
    if (!p.name.starts_with(prefix)) continue;
    for (int k = 0; k < per_tensor; ++k) {
      const Index i = pick.uniform_int(0, static_cast<int>(p.value.size()) - 1);
      analytic.push_back(step.grads.contains(p.name) ? step.grads.at(p.name).data()[i] : 0.0);
      const double orig = p.value.data()[i];
      const double h = 1e-5;
      p.value.data()[i] = orig + h;
      const double up = surrogate();
      p.value.data()[i] = orig - h;
      const double down = surrogate();
      p.value.data()[i] = orig;
      numeric.push_back((up - down) / (2.0 * h));
    }
  }
  const Matrix a = Eigen::Map<const Matrix>(analytic.data(), 1, static_cast<Index>(analytic.size()));
  const Matrix n = Eigen::Map<const Matrix>(numeric.data(), 1, static_cast<Index>(numeric.size()));
  return relative_error(a, n);
}

}  // namespace

std::vector<CheckResult> check_chain_gradient(StMode st, std::uint64_t seed, double tolerance) {
  ChainConfig cfg = micro_chain_config(st);
  cfg.seed = seed;
  ChainModel model(cfg);
  // Zero biases put the go-frame prenet exactly on the leaky-ReLU kink, where
  // central differences straddle two slopes; check at a generic point instead.
  Rng jitter = Rng::derive(seed, {3});
  for (auto& p : model.params())
    if (p.name.ends_with("bias"))
      for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = jitter.uniform(-0.1, 0.1);
  const Utterance utt = micro_utterance(seed);
  const std::uint64_t noise_seed = Rng::mix(seed + 17);
  Rng pick = Rng::derive(seed, {5});

  // L_F over every parameter block, then L_rec alone over the recognizer, whose
  // share of the L_F gradient is small enough to hide an error in the sum.
  const double full = chain_gradient_error(model, utt, cfg, noise_seed, "", 2, pick);
  ChainConfig rec_only = cfg;
  rec_only.w_asr = 0.0;
  const double rec = chain_gradient_error(model, utt, rec_only, noise_seed, "asr.", 4, pick);

  const std::string tag = "(st=" + to_string(st) + ")";
  return {{"chain L_F" + tag, full, tolerance, full < tolerance},
          {"chain L_rec -> asr" + tag, rec, tolerance, rec < tolerance}};
}

std::vector<CheckResult> check_chain(std::uint64_t seed, double tolerance) {
  std::vector<CheckResult> out;
  for (StMode st : {StMode::none, StMode::argmax, StMode::gumbel})
    for (auto& r : check_chain_gradient(st, seed, tolerance)) out.push_back(std::move(r));
  return out;
}

}  // namespace chainflow
