#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dsmoe/autograd.h"
#include "dsmoe/errors.h"
#include "dsmoe/tensor.h"
#include "test_util.h"

namespace dsmoe::tensor {
namespace {

using testing::direct_softmax;
using testing::naive_matmul;
using testing::numeric_gradient;
using testing::random_matrix;
using testing::relative_error;

TEST(MatrixTest, ConstructorChecksSizeAndFiniteness) {
  EXPECT_THROW(Matrix(2, 2, {1.0, 2.0, 3.0}), ShapeError);
  EXPECT_THROW(Matrix(1, 2, {1.0, std::nan("")}), ValidationError);
  EXPECT_THROW(Matrix(1, 1, {INFINITY}), ValidationError);
  EXPECT_THROW(Matrix::from_rows({{1.0, 2.0}, {3.0}}), ShapeError);
  const Matrix m(2, 3);
  EXPECT_EQ(m.size(), 6u);
  for (double x : m.data()) EXPECT_EQ(x, 0.0);
}

TEST(MatmulTest, IdentityAndHandExample) {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(Matrix::identity(2), a), a);
  const Matrix b = Matrix::from_rows({{0}, {1}});
  EXPECT_EQ(matmul(a, b), Matrix::from_rows({{2}, {4}}));
}

TEST(MatmulTest, MatchesNaiveTripleLoop) {
  std::mt19937_64 rng(1);
  const Matrix a = random_matrix(8, 8, rng);
  const Matrix b = random_matrix(8, 8, rng);
  EXPECT_LE(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 1e-12);
  const Matrix c = random_matrix(5, 7, rng);
  const Matrix d = random_matrix(7, 3, rng);
  EXPECT_LE(max_abs_diff(matmul(c, d), naive_matmul(c, d)), 1e-12);
}

TEST(MatmulTest, IdentityAssociativityIsBitwise) {
  std::mt19937_64 rng(2);
  const Matrix a = random_matrix(6, 4, rng);
  const Matrix b = random_matrix(4, 5, rng);
  EXPECT_EQ(matmul(matmul(a, Matrix::identity(4)), b), matmul(a, b));
}

TEST(MatmulTest, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
  EXPECT_THROW(add(Matrix(2, 3), Matrix(3, 2)), ShapeError);
  EXPECT_THROW(add_row_bias(Matrix(2, 3), Matrix(1, 2)), ShapeError);
}

TEST(SoftmaxTest, Examples) {
  const std::vector<double> half = softmax(std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(half[0], 0.5);
  EXPECT_DOUBLE_EQ(half[1], 0.5);

  const auto big = softmax(std::vector<double>{1000.0, 0.0});
  EXPECT_TRUE(std::isfinite(big[0]) && std::isfinite(big[1]));
  EXPECT_NEAR(big[0], 1.0, 1e-12);
  EXPECT_NEAR(big[1], 0.0, 1e-12);

  const std::vector<double> v{0.9, 0.1, 0.2, 0.3};
  const auto got = softmax(v);
  const auto want = direct_softmax(v);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(SoftmaxTest, EmptyThrows) {
  EXPECT_THROW(softmax(std::vector<double>{}), ShapeError);
}

TEST(SoftmaxTest, ShiftInvariantAndNormalized) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(1 + trial % 9);
    for (double& x : v) x = d(rng);
    std::vector<double> shifted = v;
    const double c = d(rng) * 10.0;
    for (double& x : shifted) x += c;
    const auto a = softmax(v);
    const auto b = softmax(shifted);
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_NEAR(a[i], b[i], 1e-12);
      EXPECT_GT(a[i], 0.0);
      total += a[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(CrossEntropyTest, AnalyticCases) {
  const Matrix uniform(3, 5);
  const std::vector<std::int64_t> labels{0, 2, 4};
  EXPECT_NEAR(cross_entropy(uniform, labels), std::log(5.0), 1e-12);

  const Matrix sharp = Matrix::from_rows({{200.0, 0.0, 0.0}});
  EXPECT_NEAR(cross_entropy(sharp, std::vector<std::int64_t>{0}), 0.0, 1e-12);
}

TEST(CrossEntropyTest, MatchesDirectFormula) {
  std::mt19937_64 rng(4);
  const Matrix logits = random_matrix(4, 5, rng);
  const std::vector<std::int64_t> labels{1, 4, 0, 2};
  double want = 0.0;
  for (std::size_t r = 0; r < 4; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(logits(r, c));
    want += -std::log(std::exp(logits(r, static_cast<std::size_t>(labels[r]))) / z);
  }
  want /= 4.0;
  EXPECT_NEAR(cross_entropy(logits, labels), want, 1e-10);
  EXPECT_GE(cross_entropy(logits, labels), 0.0);
}

TEST(CrossEntropyTest, BadLabelsThrow) {
  const Matrix logits(2, 3);
  EXPECT_THROW(cross_entropy(logits, std::vector<std::int64_t>{0, 3}), IndexError);
  EXPECT_THROW(cross_entropy(logits, std::vector<std::int64_t>{-1, 0}), IndexError);
  EXPECT_THROW(cross_entropy(logits, std::vector<std::int64_t>{0}), ShapeError);
}

TEST(KlDivergenceTest, Examples) {
  std::mt19937_64 rng(5);
  const Matrix a = random_matrix(3, 4, rng);
  EXPECT_EQ(kl_divergence(a, a), 0.0);

  const Matrix teacher = Matrix::from_rows({{std::log(0.75), std::log(0.25)}});
  const Matrix student(1, 2);
  const double want = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  EXPECT_NEAR(kl_divergence(teacher, student), want, 1e-12);
  EXPECT_NEAR(want, 0.1308, 1e-4);
}

TEST(KlDivergenceTest, RandomMatchesFormulaAndNonNegative) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix p = random_matrix(4, 6, rng, 2.0);
    const Matrix q = random_matrix(4, 6, rng, 2.0);
    double want = 0.0;
    for (std::size_t r = 0; r < 4; ++r) {
      std::vector<double> pr(p.row(r).begin(), p.row(r).end());
      std::vector<double> qr(q.row(r).begin(), q.row(r).end());
      const auto ps = direct_softmax(pr);
      const auto qs = direct_softmax(qr);
      for (std::size_t c = 0; c < 6; ++c)
        want += ps[c] * (std::log(ps[c]) - std::log(qs[c]));
    }
    want /= 4.0;
    const double got = kl_divergence(p, q);
    EXPECT_NEAR(got, want, 1e-10);
    EXPECT_GE(got, 0.0);
  }
  EXPECT_THROW(kl_divergence(Matrix(2, 3), Matrix(3, 2)), ShapeError);
}

TEST(GeluTest, DerivativeMatchesDifference) {
  for (double x = -4.0; x <= 4.0; x += 0.37) {
    const double h = 1e-6;
    const double fd = (gelu(x + h) - gelu(x - h)) / (2 * h);
    EXPECT_NEAR(gelu_derivative(x), fd, 1e-7);
  }
  EXPECT_EQ(gelu(0.0), 0.0);
}

// ---- tape ----

TEST(TapeTest, SumGradientIsAllOnes) {
  Tape tape;
  auto a = tape.leaf(Matrix::filled(3, 2, 0.5));
  tape.backward(tape.sum(a));
  EXPECT_EQ(tape.grad(a), Matrix::filled(3, 2, 1.0));
}

TEST(TapeTest, NonScalarLossThrows) {
  Tape tape;
  auto a = tape.leaf(Matrix(2, 2));
  EXPECT_THROW(tape.backward(a), ShapeError);
}

TEST(TapeTest, GradientsAccumulateAcrossUses) {
  Tape tape;
  auto a = tape.leaf(Matrix::filled(1, 1, 3.0));
  auto loss = tape.sum(tape.add(a, tape.add(a, a)));
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(tape.grad(a)(0, 0), 3.0);
}

TEST(TapeTest, LinearModelCrossEntropyMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const Matrix x = random_matrix(6, 5, rng);
  Matrix w = random_matrix(5, 4, rng);
  Matrix b = random_matrix(1, 4, rng);
  const std::vector<std::int64_t> labels{0, 3, 1, 2, 2, 0};
  auto value = [&] {
    return cross_entropy(add_row_bias(matmul(x, w), b), labels);
  };
  Tape tape;
  auto vw = tape.leaf(w);
  auto vb = tape.leaf(b);
  auto loss = tape.cross_entropy(
      tape.add_row_bias(tape.matmul(tape.constant(x), vw), vb), labels);
  tape.backward(loss);
  EXPECT_LT(relative_error(tape.grad(vw), numeric_gradient(&w, value)), 1e-4);
  EXPECT_LT(relative_error(tape.grad(vb), numeric_gradient(&b, value)), 1e-4);
}

// Every recorded op, composed into one scalar, checked entrywise.
TEST(TapeTest, AllOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix a = random_matrix(5, 4, rng, 0.7);
    Matrix b = random_matrix(4, 4, rng, 0.7);
    Matrix bias = random_matrix(1, 4, rng, 0.7);
    Matrix teacher = random_matrix(3, 4, rng, 1.5);
    const std::vector<std::int64_t> gather{4, -1, 0, 2};
    const std::vector<std::int64_t> scatter{2, 0, -1, 2};
    const std::vector<std::int64_t> rows{0, 1, 3};
    const std::vector<std::int64_t> cols{3, 0, 2};
    const std::vector<std::int64_t> labels{1, 0, 3};

    auto build = [&](Tape& tape, Var va, Var vb, Var vbias, Var vt) {
      auto h = tape.gelu(tape.add_row_bias(tape.matmul(va, vb), vbias));
      auto p = tape.softmax_rows(h);
      auto g = tape.gather_rows(h, gather);
      auto s = tape.scatter_add_rows(g, scatter, 3);
      auto w = tape.pick(p, rows, cols);
      auto sr = tape.scale_rows(s, w);
      auto logits = tape.add(sr, tape.scale(tape.gather_rows(h, rows), 0.5));
      auto ce = tape.cross_entropy(logits, labels);
      auto kl = tape.kl_divergence(vt, logits);
      return tape.add(ce, tape.add(kl, tape.scale(tape.sum(p), 0.1)));
    };
    auto value = [&] {
      Tape t;
      auto out = build(t, t.leaf(a), t.leaf(b), t.leaf(bias), t.leaf(teacher));
      return t.value(out)(0, 0);
    };
    Tape tape;
    auto va = tape.leaf(a), vb = tape.leaf(b), vbias = tape.leaf(bias),
         vt = tape.leaf(teacher);
    tape.backward(build(tape, va, vb, vbias, vt));
    EXPECT_LT(relative_error(tape.grad(va), numeric_gradient(&a, value)), 1e-4);
    EXPECT_LT(relative_error(tape.grad(vb), numeric_gradient(&b, value)), 1e-4);
    EXPECT_LT(relative_error(tape.grad(vbias), numeric_gradient(&bias, value)), 1e-4);
    EXPECT_LT(relative_error(tape.grad(vt), numeric_gradient(&teacher, value)), 1e-4);
  }
}

TEST(TapeTest, ConstantsReceiveNoGradient) {
  Tape tape;
  auto c = tape.constant(Matrix::filled(2, 2, 1.0));
  auto a = tape.leaf(Matrix::filled(2, 2, 2.0));
  tape.backward(tape.sum(tape.matmul(c, a)));
  for (double g : tape.grad(c).data()) EXPECT_EQ(g, 0.0);
}

}  // namespace
}  // namespace dsmoe::tensor
