#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "chainflow/asr.hpp"

#include <cmath>
#include <map>

using namespace chainflow;

namespace {

AsrConfig small_asr() {
  AsrConfig c;
  c.input_dim = 6;
  c.vocab = 8;
  c.enc_hidden = 8;
  c.dec_hidden = 12;
  c.embed = 6;
  c.att_dim = 8;
  return c;
}

struct SmallAsr {
  Rng rng;
  ParameterSet ps;
  AsrModel model;
  explicit SmallAsr(std::uint64_t seed) : rng(seed), model(small_asr(), ps, rng) {}
};

Matrix random_features(Rng& rng, Index frames, Index dim) {
  Matrix m(frames, dim);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("encoder output length is three halvings") {
  SmallAsr asr(1);
  Rng rng(2);
  for (Index s : {8, 9, 15, 16, 17, 33, 64, 100, 127, 200}) {
    Graph g;
    g.set_grad_enabled(false);
    const EncodedSpeech enc = asr.model.encode(g, random_features(rng, s, 6));
    const Index expect = (s + 7) / 8;  // ceil(ceil(ceil(s/2)/2)/2) == ceil(s/8)
    CHECK(enc.subsampled_length == expect);
    CHECK(enc.states.rows() == expect);
    CHECK(enc.states.cols() == 16);
    CHECK(subsampled_length(s) == expect);
  }
}

TEST_CASE("inputs shorter than the subsampling factor are rejected") {
  SmallAsr asr(1);
  Rng rng(2);
  Graph g;
  CHECK_THROWS_AS(asr.model.encode(g, random_features(rng, 7, 6)), SequenceTooShortError);
  CHECK_THROWS_AS(asr.model.encode(g, random_features(rng, 16, 5)), ShapeError);
}

TEST_CASE("attention weights form a distribution and the context is their average") {
  Rng rng(4);
  for (const auto& [kind, history] : std::vector<std::pair<ScoreKind, bool>>{
           {ScoreKind::dot, false}, {ScoreKind::bilinear, false}, {ScoreKind::mlp, false}, {ScoreKind::mlp, true}}) {
    ParameterSet ps;
    const AttentionParams p = AttentionParams::create(ps, "att", kind, 5, 5, 6, rng, history);
    Graph g;
    Var values = g.constant(random_features(rng, 7, 5));
    const AttentionMemory mem = prepare_attention(g, p, values);
    Var q = g.constant(random_features(rng, 1, 5));
    AttentionResult first = attend(g, p, mem, q);
    AttentionResult second = attend(g, p, mem, q, first.weights);
    for (const AttentionResult& r : {first, second}) {
      const Matrix& a = r.weights.value();
      CHECK(a.rows() == 1);
      CHECK(a.cols() == 7);
      CHECK((a.array() >= 0.0).all());
      CHECK(a.sum() == doctest::Approx(1.0).epsilon(1e-12));
      const Matrix expect = a * values.value();
      CHECK((r.context.value() - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("bilinear score with the identity equals the dot score") {
  Rng rng(5);
  ParameterSet ps;
  const AttentionParams dot = AttentionParams::create(ps, "dot", ScoreKind::dot, 4, 4, 4, rng);
  const AttentionParams bil = AttentionParams::create(ps, "bil", ScoreKind::bilinear, 4, 4, 4, rng);
  ps.get_mutable("bil.bilinear").value = Matrix::Identity(4, 4);
  Graph g;
  Var values = g.constant(random_features(rng, 6, 4));
  Var q = g.constant(random_features(rng, 1, 4));
  const Matrix a = attend(g, dot, prepare_attention(g, dot, values), q).weights.value();
  const Matrix b = attend(g, bil, prepare_attention(g, bil, values), q).weights.value();
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("masked frames get no attention") {
  Rng rng(6);
  ParameterSet ps;
  const AttentionParams p = AttentionParams::create(ps, "att", ScoreKind::mlp, 3, 4, 5, rng);
  Graph g;
  Var values = g.constant(random_features(rng, 4, 3));
  const AttentionMemory mem = prepare_attention(g, p, values, {true, true, false, true});
  const Matrix a = attend(g, p, mem, g.constant(random_features(rng, 1, 4))).weights.value();
  CHECK(a(0, 2) == 0.0);
  CHECK(a.sum() == doctest::Approx(1.0));
}

TEST_CASE("the history term only exists when requested") {
  Rng rng(8);
  ParameterSet plain, with;
  CHECK(AttentionParams::create(plain, "att", ScoreKind::mlp, 3, 4, 5, rng).history == nullptr);
  CHECK(AttentionParams::create(with, "att", ScoreKind::mlp, 3, 4, 5, rng, true).history != nullptr);
  CHECK(with.size() == plain.size() + 1);
}

TEST_CASE("dot attention needs matching widths") {
  Rng rng(1);
  ParameterSet ps;
  CHECK_THROWS_AS(AttentionParams::create(ps, "att", ScoreKind::dot, 4, 5, 4, rng), ShapeError);
}

TEST_CASE("a one-hot row times the embedding selects one row") {
  Rng rng(7);
  const Matrix e = random_features(rng, 8, 5);
  Graph g;
  const Matrix r = matmul(g.constant(one_hot_row(8, 3)), g.constant(e)).value();
  CHECK((r - e.row(3)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("teacher forcing yields one distribution per target token") {
  SmallAsr asr(3);
  Rng rng(8);
  const TokenSequence y{{3, 1, 4, 1, 0}};
  Graph g;
  GenerateOptions opt;
  opt.targets = &y;
  const Generation gen = asr.model.generate(g, random_features(rng, 24, 6), opt);
  CHECK(gen.probs.size() == 5);
  CHECK(gen.tokens.size() == 5);
  CHECK(gen.prob_matrix().rows() == 5);
  CHECK(gen.prob_matrix().cols() == 8);
  for (const Var& p : gen.probs) CHECK(p.value().sum() == doctest::Approx(1.0));
  GenerateOptions missing;
  CHECK_THROWS_AS(asr.model.generate(g, random_features(rng, 24, 6), missing), std::invalid_argument);
}

TEST_CASE("greedy output does not depend on the temperature") {
  SmallAsr asr(9);
  Rng rng(10);
  const Matrix x = random_features(rng, 32, 6);
  std::vector<int> ref;
  for (double tau : {0.3, 1.0, 2.5}) {
    Graph g;
    g.set_grad_enabled(false);
    GenerateOptions opt;
    opt.mode = GenMode::greedy;
    opt.tau = tau;
    opt.st = StMode::argmax;
    const std::vector<int> ids = asr.model.generate(g, x, opt).ids();
    if (ref.empty()) ref = ids;
    CHECK(ids == ref);
  }
}

TEST_CASE("sampling is reproducible from the rng seed") {
  SmallAsr asr(11);
  Rng frng(12);
  const Matrix x = random_features(frng, 24, 6);
  auto draw = [&](std::uint64_t seed) {
    Rng rng(seed);
    Graph g;
    GenerateOptions opt;
    opt.mode = GenMode::sample;
    opt.st = StMode::gumbel;
    opt.rng = &rng;
    return asr.model.generate(g, x, opt).ids();
  };
  CHECK(draw(5) == draw(5));
  bool differs = false;
  for (std::uint64_t s = 6; s < 16 && !differs; ++s) differs = draw(s) != draw(5);
  CHECK(differs);
  Graph g;
  GenerateOptions opt;
  opt.mode = GenMode::sample;
  CHECK_THROWS_AS(asr.model.generate(g, x, opt), std::invalid_argument);
}

TEST_CASE("free-running generation stops at eos or the length cap") {
  SmallAsr asr(13);
  Rng rng(14);
  Graph g;
  g.set_grad_enabled(false);
  GenerateOptions opt;
  opt.mode = GenMode::greedy;
  opt.max_chars = 3;
  const Generation gen = asr.model.generate(g, random_features(rng, 16, 6), opt);
  const std::vector<int> ids = gen.ids();
  if (gen.truncated) {
    CHECK(ids.size() == 3);
    for (int id : ids) CHECK(id != 0);
  } else {
    CHECK(ids.back() == 0);
    CHECK(ids.size() <= 3);
  }
}

TEST_CASE("uniform predictions cost log C") {
  Graph g;
  const Var p = g.constant(Matrix::Constant(4, 8, 1.0 / 8.0));
  CHECK(asr_nll_loss(p, TokenSequence{{1, 2, 3, 0}}).item() == doctest::Approx(std::log(8.0)).epsilon(1e-14));
}

TEST_CASE("nll against a hand computation, with masking") {
  Matrix p(3, 3);
  p << 0.7, 0.2, 0.1, 0.1, 0.1, 0.8, 0.3, 0.3, 0.4;
  Graph g;
  const TokenSequence y{{0, 2, 1}};
  const double full = -(std::log(0.7) + std::log(0.8) + std::log(0.3)) / 3.0;
  CHECK(asr_nll_loss(g.constant(p), y).item() == doctest::Approx(full).epsilon(1e-14));
  const double masked = -(std::log(0.7) + std::log(0.3)) / 2.0;
  CHECK(asr_nll_loss(g.constant(p), y, {true, false, true}).item() == doctest::Approx(masked).epsilon(1e-14));
  CHECK_THROWS_AS(asr_nll_loss(g.constant(p), TokenSequence{{0, 1}}), std::invalid_argument);
}

TEST_CASE("beam of one reproduces greedy decoding") {
  SmallAsr asr(15);
  Rng rng(16);
  for (int u = 0; u < 50; ++u) {
    const Matrix x = random_features(rng, 8 + rng.uniform_int(0, 40), 6);
    CHECK(asr.model.beam_search(x, 1).tokens == asr.model.greedy_decode(x));
  }
}

TEST_CASE("beam size must be positive") {
  SmallAsr asr(1);
  Rng rng(2);
  CHECK_THROWS_AS(asr.model.beam_search(random_features(rng, 16, 6), 0), std::invalid_argument);
}

namespace {

// Fixed 3-step lattice over 4 classes; class 0 ends a hypothesis.
struct Lattice {
  std::map<std::vector<int>, Eigen::RowVectorXd> table;
  Rng rng{31};

  Eigen::RowVectorXd at(const std::vector<int>& prefix) {
    auto it = table.find(prefix);
    if (it != table.end()) return it->second;
    Eigen::RowVectorXd z(4);
    for (Index c = 0; c < 4; ++c) z(c) = 2.0 * rng.normal();
    const double lse = z.maxCoeff() + std::log((z.array() - z.maxCoeff()).exp().sum());
    Eigen::RowVectorXd logp = (z.array() - lse).matrix();
    table.emplace(prefix, logp);
    return logp;
  }
};

struct Best {
  std::vector<int> tokens;
  double score = -1e300;
  double ll = 0.0;
};

void brute(Lattice& lat, std::vector<int> prefix, double ll, Best& best) {
  const Eigen::RowVectorXd logp = lat.at(prefix);
  for (int c = 0; c < 4; ++c) {
    std::vector<int> t = prefix;
    t.push_back(c);
    const double l = ll + logp(c);
    if (c == 0 || t.size() == 3) {
      const double s = l / static_cast<double>(t.size());
      if (s > best.score) best = {t, s, l};
    } else {
      brute(lat, t, l, best);
    }
  }
}

}  // namespace

TEST_CASE("wide beam search agrees with brute force on a small lattice") {
  for (int trial = 0; trial < 20; ++trial) {
    Lattice lat;
    lat.rng = Rng(100 + static_cast<std::uint64_t>(trial));
    Best best;
    brute(lat, {}, 0.0, best);
    // the state is the prefix before `prev`
    auto expand_with_token = [&](const std::vector<int>& prefix, int prev) {
      std::vector<int> p = prefix;
      if (prev >= 0) p.push_back(prev);
      return std::make_pair(lat.at(p), p);
    };
    const Hypothesis h = beam_search_generic(std::vector<int>{}, -1, 0, 64, 3, expand_with_token);
    CHECK(h.tokens == best.tokens);
    CHECK(h.score == doctest::Approx(best.score).epsilon(1e-12));
    CHECK(h.log_likelihood == doctest::Approx(best.ll).epsilon(1e-12));
  }
}

TEST_CASE("beam search ranks by length-normalized log-likelihood") {
  // eos at step one scores -1.0; "1 eos" scores (-0.1 - 0.2) / 2
  auto expand = [](int depth, int) {
    Eigen::RowVectorXd logp(2);
    if (depth == 0)
      logp << -1.0, -0.1;
    else
      logp << -0.2, -5.0;
    return std::make_pair(logp, depth + 1);
  };
  const Hypothesis h = beam_search_generic(0, 0, 0, 2, 5, expand);
  CHECK(h.tokens == std::vector<int>{1, 0});
  CHECK(h.score == doctest::Approx(-0.15));
}
