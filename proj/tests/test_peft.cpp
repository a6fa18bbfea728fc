#include <gtest/gtest.h>

#include "lorm/peft.hpp"
#include "oracles.hpp"

using namespace lorm;

namespace {

LinearLayer random_layer(std::size_t d, std::size_t k, Rng& rng) {
  return {oracle::gaussian(d, k, rng), oracle::gaussian(d, 1, rng), std::monostate{}};
}

Matrix dense_output(const Matrix& w, const Matrix& bias, const Matrix& x) {
  Matrix h = oracle::mul(w, x);
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t j = 0; j < h.cols(); ++j) h(i, j) += bias[i];
  return h;
}

Matrix plus(const Matrix& a, const Matrix& b) {
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

}  // namespace

TEST(InitLora, BIsZero) {
  LoRAModule m = init_lora(4, 6, 2, 0);
  EXPECT_EQ(m.b, Matrix::zeros(4, 2));
  EXPECT_EQ(m.a.rows(), 2u);
  EXPECT_EQ(m.a.cols(), 6u);
  EXPECT_EQ(m.rank(), 2u);
}

TEST(InitLora, SameSeedSameA) {
  EXPECT_EQ(init_lora(4, 6, 2, 99).a, init_lora(4, 6, 2, 99).a);
  EXPECT_NE(init_lora(4, 6, 2, 99).a, init_lora(4, 6, 2, 100).a);
}

TEST(InitLora, AEntriesHaveSmallSpread) {
  LoRAModule m = init_lora(64, 64, 16, 3);
  double s = 0.0;
  for (double v : m.a.data()) s += v * v;
  EXPECT_NEAR(std::sqrt(s / static_cast<double>(m.a.size())), kLoraInitStd, 0.002);
}

TEST(InitLora, RankOutOfRange) {
  EXPECT_THROW(init_lora(4, 6, 0, 0), DomainError);
  EXPECT_THROW(init_lora(4, 6, 5, 0), DomainError);
  EXPECT_NO_THROW(init_lora(4, 6, 4, 0));
}

TEST(InitLora, FreshModuleForwardIsFrozenLayer) {
  Rng rng(1);
  LinearLayer layer = random_layer(5, 3, rng);
  Matrix x = oracle::gaussian(3, 7, rng);
  Matrix frozen = layer_forward(layer, x);
  layer.residual = init_lora(5, 3, 2, 4);
  EXPECT_EQ(lora_forward(layer, x), frozen);
}

TEST(LoraForward, HandArithmetic) {
  LinearLayer layer{Matrix::identity(2), Matrix::zeros(2, 1), LoRAModule{Matrix{{1}, {0}}, Matrix{{0, 1}}}};
  EXPECT_EQ(lora_forward(layer, Matrix::column({3, 5})), Matrix::column({8, 5}));
}

TEST(LoraForward, MatchesDenseProduct) {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    LinearLayer layer = random_layer(6, 5, rng);
    LoRAModule m{oracle::gaussian(6, 2, rng), oracle::gaussian(2, 5, rng)};
    layer.residual = m;
    Matrix x = oracle::gaussian(5, 4, rng);
    Matrix want = dense_output(plus(layer.w0, oracle::mul(m.b, m.a)), layer.bias, x);
    EXPECT_LT(oracle::rel_err(lora_forward(layer, x), want), 1e-10);
  }
}

TEST(LoraForward, ShapeErrors) {
  Rng rng(2);
  LinearLayer layer = random_layer(3, 4, rng);
  layer.residual = init_lora(3, 4, 1, 0);
  EXPECT_THROW(lora_forward(layer, Matrix(3, 2)), ShapeError);
  layer.residual = init_ia3(3);
  EXPECT_THROW(lora_forward(layer, Matrix(4, 2)), Error);
}

TEST(VeraForward, ZeroLambdaBIsFrozenLayer) {
  Rng rng(4);
  LinearLayer layer = random_layer(4, 5, rng);
  Matrix x = oracle::gaussian(5, 3, rng);
  Matrix frozen = layer_forward(layer, x);
  layer.residual = init_vera(4, 5, 2, 8);
  EXPECT_EQ(vera_forward(layer, x), frozen);
}

TEST(VeraForward, UnitScalingsGiveFrozenProduct) {
  Rng rng(5);
  LinearLayer layer = random_layer(4, 5, rng);
  VeRAModule m = init_vera(4, 5, 2, 8);
  m.lambda_b = Matrix(4, 1, 1.0);
  m.lambda_d = Matrix(2, 1, 1.0);
  layer.residual = m;
  Matrix x = oracle::gaussian(5, 3, rng);
  Matrix want = dense_output(plus(layer.w0, oracle::mul(m.b_frozen, m.a_frozen)), layer.bias, x);
  EXPECT_LT(oracle::rel_err(vera_forward(layer, x), want), 1e-12);
}

TEST(VeraForward, MatchesDenseConstruction) {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    LinearLayer layer = random_layer(6, 4, rng);
    VeRAModule m = init_vera(6, 4, 3, rng.engine()());
    m.lambda_b = oracle::gaussian(6, 1, rng);
    m.lambda_d = oracle::gaussian(3, 1, rng);
    layer.residual = m;
    Matrix delta = oracle::mul(oracle::outer_mask(m.lambda_b, m.b_frozen), oracle::outer_mask(m.lambda_d, m.a_frozen));
    Matrix x = oracle::gaussian(4, 5, rng);
    EXPECT_LT(oracle::rel_err(vera_forward(layer, x), dense_output(plus(layer.w0, delta), layer.bias, x)), 1e-10);
  }
}

TEST(Ia3Forward, ZeroEllIsFrozenLayer) {
  Rng rng(6);
  LinearLayer layer = random_layer(3, 4, rng);
  Matrix x = oracle::gaussian(4, 2, rng);
  Matrix frozen = layer_forward(layer, x);
  layer.residual = init_ia3(3);
  EXPECT_EQ(ia3_forward(layer, x), frozen);
}

TEST(Ia3Forward, UnitEllDoubles) {
  Rng rng(7);
  LinearLayer layer = random_layer(3, 4, rng);
  layer.residual = IA3Module{Matrix(3, 1, 1.0)};
  Matrix x = oracle::gaussian(4, 2, rng);
  Matrix want = dense_output(2.0 * layer.w0, layer.bias, x);
  EXPECT_LT(oracle::rel_err(ia3_forward(layer, x), want), 1e-14);
}

TEST(Ia3Forward, ScalingFormEqualsResidualForm) {
  Rng rng(19);
  LinearLayer layer = random_layer(5, 3, rng);
  IA3Module m{oracle::gaussian(5, 1, rng)};
  layer.residual = m;
  Matrix x = oracle::gaussian(3, 6, rng);
  Matrix via_residual = dense_output(plus(layer.w0, residual_matrix(layer)), layer.bias, x);
  EXPECT_LT(max_abs_diff(ia3_forward(layer, x), via_residual), 1e-12);
}

TEST(ResidualMatrix, FreshModulesAreZero) {
  Rng rng(8);
  Matrix w0 = oracle::gaussian(4, 6, rng);
  EXPECT_EQ(residual_matrix(init_lora(4, 6, 3, 1), w0), Matrix::zeros(4, 6));
  EXPECT_EQ(residual_matrix(init_vera(4, 6, 3, 1), w0), Matrix::zeros(4, 6));
  EXPECT_EQ(residual_matrix(init_ia3(4), w0), Matrix::zeros(4, 6));
  EXPECT_EQ(residual_matrix(std::monostate{}, w0), Matrix::zeros(4, 6));
}

TEST(ResidualMatrix, LoraRankOne) {
  LoRAModule m{Matrix{{2}, {0}}, Matrix{{1, 3}}};
  EXPECT_EQ(residual_matrix(m, Matrix::zeros(2, 2)), (Matrix{{2, 6}, {0, 0}}));
}

TEST(ResidualMatrix, VeraMatchesElementwiseOracle) {
  Rng rng(23);
  VeRAModule m = init_vera(5, 4, 2, 77);
  m.lambda_b = oracle::gaussian(5, 1, rng);
  m.lambda_d = oracle::gaussian(2, 1, rng);
  Matrix want(5, 4);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t c = 0; c < 2; ++c)
        want(i, j) += m.lambda_b[i] * m.b_frozen(i, c) * m.lambda_d[c] * m.a_frozen(c, j);
  EXPECT_LT(max_abs_diff(residual_matrix(m, Matrix::zeros(5, 4)), want), 1e-12);
}

TEST(ResidualMatrix, GaugeFreedom) {
  Rng rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    LoRAModule m{oracle::gaussian(6, 3, rng), oracle::gaussian(3, 5, rng)};
    Matrix r = oracle::gaussian(3, 3, rng);
    for (std::size_t i = 0; i < 3; ++i) r(i, i) += 3.0;  // keep R well away from singular
    LoRAModule g{oracle::mul(m.b, r), oracle::mul(oracle::inverse(r), m.a)};
    Matrix w0 = Matrix::zeros(6, 5);
    EXPECT_LT(relative_error(residual_matrix(g, w0), residual_matrix(m, w0)), 1e-8);
  }
}

TEST(ParameterCounts, LoraVersusFull) {
  EXPECT_EQ(lora_trainable_params(768, 768, 16), 24576u);
  EXPECT_EQ(full_trainable_params(768, 768), 589824u);
  EXPECT_EQ(lora_trainable_params(64, 32, 4), 384u);
}
