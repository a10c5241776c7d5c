#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "chainflow/checkpoint.hpp"
#include "chainflow/gradcheck.hpp"
#include "chainflow/ops.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>

using namespace chainflow;

namespace {

Matrix row_of(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

}  // namespace

TEST_CASE("every primitive matches central differences") {
  for (const auto& r : check_primitives(7, 5)) {
    INFO(r.name << " rel err " << r.max_rel_error);
    CHECK(r.passed);
  }
}

TEST_CASE("primitive gradients hold across seeds") {
  for (std::uint64_t seed : {1u, 2u, 3u})
    for (const auto& r : check_primitives(seed, 2)) {
      INFO(r.name << " seed " << seed);
      CHECK(r.max_rel_error < 1e-4);
    }
}

TEST_CASE("temperature softmax against a hand expansion") {
  Graph g;
  Var z = g.variable(row_of({1.0, 2.0, 3.0}));
  const Matrix p = temperature_softmax(z, 0.5).value();
  // exp(2k) / (e^2 + e^4 + e^6)
  const double denom = std::exp(2.0) + std::exp(4.0) + std::exp(6.0);
  CHECK(p(0, 0) == doctest::Approx(std::exp(2.0) / denom).epsilon(1e-14));
  CHECK(p(0, 1) == doctest::Approx(std::exp(4.0) / denom).epsilon(1e-14));
  CHECK(p(0, 2) == doctest::Approx(std::exp(6.0) / denom).epsilon(1e-14));
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("temperature softmax is shift invariant and stable for large logits") {
  Graph g;
  const Matrix a = temperature_softmax(g.constant(row_of({1000.0, 1001.0, 999.0})), 1.0).value();
  const Matrix b = temperature_softmax(g.constant(row_of({0.0, 1.0, -1.0})), 1.0).value();
  CHECK(a.allFinite());
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("temperature controls sharpness") {
  Graph g;
  Var z = g.constant(row_of({0.3, 1.2, -0.4, 0.9}));
  const double sharp = temperature_softmax(z, 0.25).value().maxCoeff();
  const double base = temperature_softmax(z, 1.0).value().maxCoeff();
  const double flat = temperature_softmax(z, 2.0).value().maxCoeff();
  CHECK(sharp > base);
  CHECK(base > flat);
}

TEST_CASE("temperature softmax rejects bad inputs") {
  Graph g;
  Var z = g.constant(row_of({0.0, 1.0}));
  CHECK_THROWS_AS(temperature_softmax(z, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(temperature_softmax(z, -1.0), std::invalid_argument);
  Var bad = g.constant(row_of({0.0, std::nan("")}));
  CHECK_THROWS_AS(temperature_softmax(bad, 1.0), NumericError);
}

TEST_CASE("masked softmax gives zero mass to masked entries") {
  Graph g;
  const Matrix p = masked_softmax(g.constant(row_of({5.0, 1.0, 2.0})), {true, false, true}).value();
  CHECK(p(0, 1) == 0.0);
  CHECK(p(0, 0) == doctest::Approx(std::exp(3.0) / (std::exp(3.0) + 1.0)));
  CHECK(p.sum() == doctest::Approx(1.0));
}

TEST_CASE("matmul reports both shapes on mismatch") {
  Graph g;
  Var a = g.constant(Matrix::Zero(2, 3));
  Var b = g.constant(Matrix::Zero(4, 5));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    CHECK(what.find("2x3") != std::string::npos);
    CHECK(what.find("4x5") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(mul(a, b), ShapeError);
}

TEST_CASE("backward needs a scalar loss") {
  Graph g;
  Var a = g.variable(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(g.backward(a), std::invalid_argument);
}

TEST_CASE("gradients accumulate over every use of a parameter") {
  Parameter w("w", row_of({1.0, 2.0}));
  Graph g;
  Var a = g.parameter(w);
  Var b = g.parameter(w);
  CHECK(a.id() == b.id());
  Var loss = add(sum(square(a)), sum(scale(b, 3.0)));
  const GradientMap grads = g.backward(loss);
  // d/dw (sum w^2 + 3 sum w) = 2w + 3
  CHECK(grads.at("w")(0, 0) == doctest::Approx(5.0));
  CHECK(grads.at("w")(0, 1) == doctest::Approx(7.0));
}

TEST_CASE("detach blocks gradient flow") {
  Parameter w("w", row_of({1.5, -2.0}));
  Graph g;
  Var x = g.parameter(w);
  Var loss = sum(mul(x, detach(x)));
  const GradientMap grads = g.backward(loss);
  // only the non-detached factor contributes: d/dx (x * c) = c
  CHECK(grads.at("w")(0, 0) == doctest::Approx(1.5));
  CHECK(grads.at("w")(0, 1) == doctest::Approx(-2.0));
}

TEST_CASE("no-grad graphs record no backward state") {
  Parameter w("w", row_of({1.0}));
  Graph g;
  g.set_grad_enabled(false);
  Var loss = sum(square(g.parameter(w)));
  CHECK_FALSE(loss.requires_grad());
  CHECK(g.backward(loss).norm() == 0.0);
}

TEST_CASE("custom backward op checks the rule's shape") {
  Graph g;
  Var x = g.variable(row_of({1.0, 2.0}));
  Var y = custom_backward_op(
      x, [](const Matrix& v) { return Matrix(v * 2.0); },
      [](const Matrix& up, const Matrix&, const Matrix&) { return Matrix(up.transpose()); });
  CHECK_THROWS_AS(g.backward(sum(y)), ShapeError);
}

TEST_CASE("lstm pointwise against a scalar recomputation") {
  Graph g;
  Matrix gates = row_of({0.1, -0.4, 0.3, 0.7, -0.2, 0.5, 1.1, -0.6});  // H = 2
  Matrix c = row_of({0.25, -0.5});
  const Matrix out = lstm_pointwise(g.constant(gates), g.constant(c)).value();
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (int j = 0; j < 2; ++j) {
    const double i = sig(gates(0, j)), f = sig(gates(0, 2 + j)), cand = std::tanh(gates(0, 4 + j)),
                 o = sig(gates(0, 6 + j));
    const double c2 = f * c(0, j) + i * cand;
    CHECK(out(0, 2 + j) == doctest::Approx(c2).epsilon(1e-14));
    CHECK(out(0, j) == doctest::Approx(o * std::tanh(c2)).epsilon(1e-14));
  }
}

TEST_CASE("binary cross entropy clamps with epsilon") {
  Graph g;
  Matrix p(2, 1);
  p << 1.0, 0.0;
  Matrix t(2, 1);
  t << 0.0, 1.0;
  const double v = binary_cross_entropy(g.constant(p), t).item();
  CHECK(std::isfinite(v));
  CHECK(v == doctest::Approx(-std::log(1e-7)).epsilon(1e-6));
}

TEST_CASE("relative error helper") {
  CHECK(relative_error(Matrix::Zero(2, 2), Matrix::Zero(2, 2)) == 0.0);
  CHECK(relative_error(row_of({1.0, 0.0}), row_of({0.0, 0.0})) == doctest::Approx(1.0));
  CHECK(relative_error(row_of({2.0}), row_of({1.0})) == doctest::Approx(0.5));
}

TEST_CASE("checkpoint round trip is bit exact") {
  ArrayBundle b;
  Matrix m(2, 3);
  m << 1.0, -0.0, std::nextafter(1.0, 2.0), 1e-310, -3.5, 42.0;
  b.put("weights", m);
  b.put("bias", row_of({0.1, 0.2, 0.3}), 1);
  b.put_scalar("epoch", 7.0);
  const ArrayBundle r = decode_checkpoint(encode_checkpoint(b));
  const Matrix back = r.matrix("weights");
  CHECK(std::memcmp(back.data(), m.data(), sizeof(double) * 6) == 0);
  CHECK(r.get("bias").shape == std::vector<std::uint64_t>{3});
  CHECK(r.get("weights").shape == std::vector<std::uint64_t>{2, 3});
  CHECK(r.scalar("epoch") == 7.0);
}

TEST_CASE("checkpoint byte layout") {
  ArrayBundle b;
  b.put("ab", row_of({1.0}), 1);
  const std::string bytes = encode_checkpoint(b);
  // magic, u64 name length, name, u64 rank, u64 extent, f64
  REQUIRE(bytes.size() == 10 + 8 + 2 + 8 + 8 + 8);
  CHECK(bytes.substr(0, 10) == "CHAINCKPT1");
  CHECK(static_cast<unsigned char>(bytes[10]) == 2);
  CHECK(bytes.substr(18, 2) == "ab");
  CHECK(static_cast<unsigned char>(bytes[20]) == 1);
  double v;
  std::memcpy(&v, bytes.data() + 36, 8);
  CHECK(v == 1.0);
}

TEST_CASE("checkpoint loader rejects unknown magic and truncation") {
  ArrayBundle b;
  b.put("w", Matrix::Ones(2, 2));
  std::string bytes = encode_checkpoint(b);
  std::string wrong = bytes;
  wrong[9] = '2';
  CHECK_THROWS_AS(decode_checkpoint(wrong), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(std::filesystem::temp_directory_path() / "chainflow_missing.ckpt"),
                  CheckpointError);
}
