#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "lorm/linalg.hpp"
#include "oracles.hpp"

using namespace lorm;

namespace {

double max_entry_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
double min_eigenvalue(Matrix a) {
  const std::size_t n = a.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
  }
  double m = a(0, 0);
  for (std::size_t i = 1; i < n; ++i) m = std::min(m, a(i, i));
  return m;
}

}  // namespace

TEST(Matrix, RejectsWrongDataLength) {
  EXPECT_THROW(Matrix(2, 3, std::vector<double>(5, 0.0)), ShapeError);
}

TEST(Matrix, RejectsNonFiniteEntries) {
  EXPECT_THROW(Matrix(1, 2, std::vector<double>{1.0, std::nan("")}), DomainError);
  EXPECT_THROW(Matrix(2, 2, std::numeric_limits<double>::infinity()), DomainError);
}

TEST(Matrix, ProductsAgreeWithTransposedForms) {
  Rng rng(5);
  Matrix a = Matrix::gaussian(3, 4, 1.0, rng), b = Matrix::gaussian(5, 4, 1.0, rng), c = Matrix::gaussian(3, 5, 1.0, rng);
  EXPECT_LT(max_abs_diff(matmul_nt(a, b), oracle::mul(a, oracle::tr(b))), 1e-12);
  EXPECT_LT(max_abs_diff(matmul_tn(a, c), oracle::mul(oracle::tr(a), c)), 1e-12);
  EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(GramAccumulate, IdentityBatch) {
  GramStat g = gram_accumulate(GramStat::zero(2), Matrix::identity(2));
  EXPECT_EQ(g.gram, Matrix::identity(2));
  EXPECT_EQ(g.samples, 2u);
}

TEST(GramAccumulate, SingleColumnIsOuterProduct) {
  GramStat g = gram_accumulate(GramStat::zero(2), Matrix::column({1, 2}));
  EXPECT_EQ(g.gram, (Matrix{{1, 2}, {2, 4}}));
  EXPECT_EQ(g.samples, 1u);
}

TEST(GramAccumulate, SequentialBatchesEqualOneBatch) {
  Rng rng(7);
  Matrix x1 = Matrix::gaussian(4, 3, 1.0, rng), x2 = Matrix::gaussian(4, 5, 1.0, rng);
  GramStat two = gram_accumulate(gram_accumulate(GramStat::zero(4), x1), x2);
  std::vector<Matrix> parts{x1, x2};
  GramStat one = gram_accumulate(GramStat::zero(4), hstack(parts));
  EXPECT_LT(max_entry_diff(two.gram, one.gram), 1e-12);
  EXPECT_EQ(two.samples, 8u);
  EXPECT_EQ(one.samples, 8u);
}

TEST(GramAccumulate, ErrorNamesBothShapes) {
  try {
    gram_accumulate(GramStat::zero(3), Matrix(4, 2));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("4x2"), std::string::npos);
    EXPECT_NE(what.find("3x3"), std::string::npos);
  }
}

TEST(GramAccumulate, RefusesDiagonalOnlyStat) {
  GramStat g = decay_off_diagonal(gram_accumulate(GramStat::zero(2), Matrix::identity(2)), 0.0);
  EXPECT_THROW(gram_accumulate(g, Matrix::identity(2)), DomainError);
}

TEST(GramAccumulate, BatchOrderDoesNotMatter) {
  Rng rng(3);
  std::vector<Matrix> batches;
  for (int i = 0; i < 6; ++i) batches.push_back(Matrix::gaussian(5, 2 + i, 1.0, rng));
  std::vector<std::size_t> order(batches.size());
  std::iota(order.begin(), order.end(), 0);
  GramStat ref = GramStat::zero(5);
  for (const auto& b : batches) ref = gram_accumulate(ref, b);
  for (int trial = 0; trial < 10; ++trial) {
    rng.shuffle(order);
    GramStat g = GramStat::zero(5);
    for (auto i : order) g = gram_accumulate(g, batches[i]);
    EXPECT_LT(max_entry_diff(g.gram, ref.gram), 1e-12 * trace(ref.gram));
    EXPECT_EQ(g.samples, ref.samples);
  }
}

TEST(GramAccumulate, SymmetricAndPositiveSemidefinite) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 2 + trial % 6, n = 1 + trial % 4;  // often rank deficient
    GramStat g = gram_accumulate(GramStat::zero(k), Matrix::gaussian(k, n, 1.0, rng));
    EXPECT_LT(max_entry_diff(g.gram, transpose(g.gram)), 1e-12);
    EXPECT_GE(min_eigenvalue(g.gram), -1e-9 * trace(g.gram));
  }
}

TEST(DecayOffDiagonal, GammaOneIsIdentity) {
  GramStat g{Matrix{{2, 1}, {1, 3}}, 4, false};
  GramStat out = decay_off_diagonal(g, 1.0);
  EXPECT_EQ(out.gram, g.gram);
  EXPECT_FALSE(out.diagonal_only);
}

TEST(DecayOffDiagonal, GammaZeroKeepsDiagonal) {
  GramStat out = decay_off_diagonal({Matrix{{2, 1}, {1, 3}}, 4, false}, 0.0);
  EXPECT_EQ(out.gram, (Matrix{{2, 0}, {0, 3}}));
  EXPECT_TRUE(out.diagonal_only);
  EXPECT_EQ(out.samples, 4u);
}

TEST(DecayOffDiagonal, GammaHalfScalesOffDiagonal) {
  GramStat out = decay_off_diagonal({Matrix{{2, 1}, {1, 3}}, 4, false}, 0.5);
  EXPECT_EQ(out.gram, (Matrix{{2, 0.5}, {0.5, 3}}));
  EXPECT_FALSE(out.diagonal_only);
}

TEST(DecayOffDiagonal, RejectsGammaOutsideUnitInterval) {
  GramStat g{Matrix{{2, 1}, {1, 3}}, 4, false};
  EXPECT_THROW(decay_off_diagonal(g, -0.1), DomainError);
  EXPECT_THROW(decay_off_diagonal(g, 1.5), DomainError);
  EXPECT_THROW(decay_off_diagonal(g, std::nan("")), DomainError);
}

TEST(GramSum, DiagonalOnlyOnlyWhenAllAre) {
  GramStat d{Matrix{{1, 0}, {0, 1}}, 1, true};
  GramStat f{Matrix{{1, 1}, {1, 1}}, 2, false};
  std::vector<GramStat> both{d, d}, mixed{d, f};
  EXPECT_TRUE(gram_sum(both).diagonal_only);
  EXPECT_FALSE(gram_sum(mixed).diagonal_only);
  EXPECT_EQ(gram_sum(mixed).samples, 3u);
}

TEST(SolveRight, IdentityDenominator) {
  Matrix n{{1, 2, 3}, {4, 5, 6}};
  EXPECT_LT(max_entry_diff(solve_right(n, Matrix::identity(3), 0.0), n), 1e-15);
}

TEST(SolveRight, RecoversKnownFactor) {
  Rng rng(11);
  Matrix d = Matrix::gaussian(3, 5, 1.0, rng);
  Matrix y = Matrix::gaussian(5, 20, 1.0, rng);
  Matrix g = matmul_nt(y, y);
  EXPECT_LT(relative_error(solve_right(matmul(d, g), g, 0.0), d), 1e-10);
}

TEST(SolveRight, MatchesExplicitInverseWithRidge) {
  Rng rng(12);
  Matrix n = Matrix::gaussian(4, 6, 1.0, rng);
  Matrix y = Matrix::gaussian(6, 3, 1.0, rng);  // rank 3 of 6: only the ridge makes it solvable
  Matrix g = matmul_nt(y, y);
  const double ridge = 1e-3;
  Matrix shifted = g;
  for (std::size_t i = 0; i < 6; ++i) shifted(i, i) += ridge * trace(g) / 6.0;
  EXPECT_LT(relative_error(solve_right(n, g, ridge), oracle::mul(n, oracle::inverse(shifted))), 1e-9);
}

TEST(SolveRight, SingularDenominatorThrowsWithDiagnostic) {
  try {
    solve_right(Matrix(1, 2, 1.0), Matrix::zeros(2, 2), 0.0);
    FAIL() << "expected SingularError";
  } catch (const SingularError& e) {
    EXPECT_NE(std::string(e.what()).find("singular"), std::string::npos);
    EXPECT_EQ(e.pivot_ratio(), 0.0);
  }
}

TEST(SolveRight, RankDeficientWithoutRidgeThrows) {
  Matrix g{{1, 1}, {1, 1}};
  EXPECT_THROW(solve_right(Matrix(1, 2, 1.0), g, 0.0), SingularError);
  EXPECT_NO_THROW(solve_right(Matrix(1, 2, 1.0), g, 1e-6));
}

TEST(SolveRight, ShapeAndRidgeErrors) {
  EXPECT_THROW(solve_right(Matrix(2, 3), Matrix::identity(2), 0.0), ShapeError);
  EXPECT_THROW(solve_right(Matrix(2, 2), Matrix(2, 3), 0.0), ShapeError);
  EXPECT_THROW(solve_right(Matrix(2, 2), Matrix::identity(2), -1.0), DomainError);
}

TEST(SolveRight, RecoveryUnderModerateConditioning) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 3 + trial % 8;
    // Rows of Y scaled geometrically so that cond(Y Y^T) reaches roughly 1e5.
    Matrix y = Matrix::gaussian(k, 3 * k, 1.0, rng);
    const double spread = 2.5 * static_cast<double>(trial % 5) / 4.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double s = std::pow(10.0, -spread * static_cast<double>(i) / static_cast<double>(k - 1));
      for (double& v : y.row(i)) v *= s;
    }
    Matrix g = matmul_nt(y, y);
    Matrix n = Matrix::gaussian(2, k, 1.0, rng);
    EXPECT_LT(relative_error(solve_right(matmul(n, g), g, 0.0), n), 1e-8);
  }
}
