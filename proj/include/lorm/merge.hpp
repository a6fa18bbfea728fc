#pragma once

#include <span>
#include <string>
#include <vector>

#include "lorm/linalg.hpp"

namespace lorm {

/// One source layer in a merge: its weight (or factor) and the Gram of its inputs.
struct Contributor {
  Matrix weight;
  GramStat gram;
};

namespace detail {

inline void validate_contributors(std::span<const Contributor> cs, const char* op) {
  if (cs.empty()) throw DomainError(std::string(op) + ": no contributors");
  const Matrix& w = cs[0].weight;
  for (std::size_t i = 0; i < cs.size(); ++i) {
    if (!cs[i].weight.same_shape(w)) {
      throw ShapeError(std::string(op) + ": contributor " + std::to_string(i) + " weight " +
                       cs[i].weight.shape() + " vs " + w.shape());
    }
    if (cs[i].gram.gram.rows() != w.cols() || cs[i].gram.gram.cols() != w.cols()) {
      throw ShapeError(std::string(op) + ": contributor " + std::to_string(i) + " gram " +
                       cs[i].gram.gram.shape() + " does not match weight " + w.shape());
    }
  }
}

inline std::vector<Contributor> zip(std::span<const Matrix> weights, std::span<const GramStat> grams,
                                    const char* op) {
  if (weights.size() != grams.size()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(weights.size()) + " payloads but " +
                     std::to_string(grams.size()) + " grams");
  }
  std::vector<Contributor> cs;
  cs.reserve(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) cs.push_back({weights[i], grams[i]});
  return cs;
}

/// M_{jc} / base_{jc}, averaged over c. Guards |base| > 1e-12.
inline Matrix ratio_row_mean(const Matrix& m, const Matrix& base, const char* op) {
  require_same_shape(m, base, op);
  Matrix out(m.rows(), 1);
  for (std::size_t j = 0; j < m.rows(); ++j) {
    double s = 0.0;
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const double b = base(j, c);
      if (!(std::abs(b) > 1e-12)) {
        throw DomainError(std::string(op) + ": frozen entry (" + std::to_string(j) + "," +
                          std::to_string(c) + ") is too close to zero for the ratio step");
      }
      s += m(j, c) / b;
    }
    out[j] = s / static_cast<double>(m.cols());
  }
  return out;
}

inline void require_vectors(std::span<const Matrix> vs, std::size_t n, const char* op) {
  if (vs.empty()) throw DomainError(std::string(op) + ": no contributors");
  for (const auto& v : vs) {
    if (v.rows() != n || v.cols() != 1) {
      throw ShapeError(std::string(op) + ": vector " + v.shape() + " expected " +
                       Matrix::shape_string(n, 1));
    }
  }
}

}  // namespace detail

/// Sum_i trace[(W - W_i) G_i (W - W_i)^T]; equals sum_i ||W X_i - W_i X_i||^2 when G_i = X_i X_i^T.
inline double objective_omega(const Matrix& candidate, std::span<const Contributor> contributors) {
  detail::validate_contributors(contributors, "objective_omega");
  detail::require_same_shape(candidate, contributors[0].weight, "objective_omega");
  double total = 0.0;
  for (const auto& c : contributors) {
    Matrix diff = candidate - c.weight;
    Matrix dg = matmul(diff, c.gram.gram);
    for (std::size_t i = 0; i < diff.size(); ++i) total += dg[i] * diff[i];
  }
  return total;
}

/// d Omega / d W = 2 sum_i (W - W_i) G_i
inline Matrix objective_gradient(const Matrix& candidate, std::span<const Contributor> contributors) {
  detail::validate_contributors(contributors, "objective_gradient");
  Matrix g = Matrix::zeros(candidate.rows(), candidate.cols());
  for (const auto& c : contributors) axpy(2.0, matmul(candidate - c.weight, c.gram.gram), g);
  return g;
}

/// W_M = (sum_i W_i G_i)(sum_i G_i)^{-1}
inline Matrix regmean_merge(std::span<const Contributor> contributors, double ridge = kDefaultRidge) {
  detail::validate_contributors(contributors, "regmean_merge");
  const Matrix& w = contributors[0].weight;
  Matrix numerator = Matrix::zeros(w.rows(), w.cols());
  Matrix denominator = Matrix::zeros(w.cols(), w.cols());
  for (const auto& c : contributors) {
    numerator += matmul(c.weight, c.gram.gram);
    denominator += c.gram.gram;
  }
  return solve_right(numerator, denominator, ridge);
}

/// B_M = (sum_i B_i A G_i) A^T (A (sum_i G_i) A^T)^{-1} for a shared A.
inline Matrix merge_B_fixed_A(std::span<const Matrix> bs, const Matrix& a, std::span<const GramStat> grams,
                              double ridge = kDefaultRidge) {
  if (bs.empty()) throw DomainError("merge_B_fixed_A: no contributors");
  if (bs.size() != grams.size()) throw ShapeError("merge_B_fixed_A: payload/gram count mismatch");
  const std::size_t r = a.rows();
  Matrix numerator = Matrix::zeros(bs[0].rows(), r);
  Matrix denominator = Matrix::zeros(r, r);
  for (std::size_t i = 0; i < bs.size(); ++i) {
    if (bs[i].cols() != r || bs[i].rows() != bs[0].rows()) {
      throw ShapeError("merge_B_fixed_A: B " + bs[i].shape() + " incompatible with A " + a.shape());
    }
    if (grams[i].gram.rows() != a.cols()) {
      throw ShapeError("merge_B_fixed_A: gram " + grams[i].gram.shape() + " vs A " + a.shape());
    }
    Matrix projected = matmul_nt(matmul(a, grams[i].gram), a);  // A G_i A^T
    numerator += matmul(bs[i], projected);
    denominator += projected;
  }
  return solve_right(numerator, denominator, ridge);
}

/// A_M = (sum_i A_i G_i)(sum_i G_i)^{-1}. The shared B cancels and is never needed.
inline Matrix merge_A_fixed_B(std::span<const Matrix> as, std::span<const GramStat> grams,
                              double ridge = kDefaultRidge) {
  auto cs = detail::zip(as, grams, "merge_A_fixed_B");
  return regmean_merge(cs, ridge);
}

/// Same as above; shared_b is accepted for call-site symmetry with the B merge and is not read.
inline Matrix merge_A_fixed_B(const Matrix& /*shared_b*/, std::span<const Matrix> as,
                              std::span<const GramStat> grams, double ridge = kDefaultRidge) {
  return merge_A_fixed_B(as, grams, ridge);
}

/// Cross-task merge of dense residuals Delta W^t weighted by the per-task global Grams.
inline Matrix merge_task_residuals(std::span<const Matrix> deltas, std::span<const GramStat> task_grams,
                                   double ridge = kDefaultRidge) {
  auto cs = detail::zip(deltas, task_grams, "merge_task_residuals");
  return regmean_merge(cs, ridge);
}

/// VeRA lambda_d merge with lambda_b fixed:
/// M = (sum_i ((lambda_d_i 1) .* A) G_i)(sum_i G_i)^{-1}, lambda_d_j = mean_c M_jc / A_jc.
inline Matrix merge_vera_lambda_d(std::span<const Matrix> lambda_ds, const Matrix& a_frozen,
                                  std::span<const GramStat> grams, double ridge = kDefaultRidge) {
  detail::require_vectors(lambda_ds, a_frozen.rows(), "merge_vera_lambda_d");
  std::vector<Matrix> scaled;
  scaled.reserve(lambda_ds.size());
  for (const auto& l : lambda_ds) scaled.push_back(scale_rows(l, a_frozen));
  auto cs = detail::zip(scaled, grams, "merge_vera_lambda_d");
  return detail::ratio_row_mean(regmean_merge(cs, ridge), a_frozen, "merge_vera_lambda_d");
}

/// VeRA lambda_b merge with lambda_d fixed, using the projected Grams S G_i S^T with
/// S = (lambda_d 1) .* A; lambda_b_j = mean_c M_jc / B_jc over the r columns.
inline Matrix merge_vera_lambda_b(std::span<const Matrix> lambda_bs, const Matrix& lambda_d,
                                  const Matrix& a_frozen, const Matrix& b_frozen,
                                  std::span<const GramStat> grams, double ridge = kDefaultRidge) {
  detail::require_vectors(lambda_bs, b_frozen.rows(), "merge_vera_lambda_b");
  if (grams.size() != lambda_bs.size()) throw ShapeError("merge_vera_lambda_b: payload/gram count mismatch");
  const Matrix s = scale_rows(lambda_d, a_frozen);
  std::vector<Contributor> cs;
  cs.reserve(lambda_bs.size());
  for (std::size_t i = 0; i < lambda_bs.size(); ++i) {
    if (grams[i].gram.rows() != s.cols()) {
      throw ShapeError("merge_vera_lambda_b: gram " + grams[i].gram.shape() + " vs A " + s.shape());
    }
    GramStat projected{matmul_nt(matmul(s, grams[i].gram), s), grams[i].samples, false};
    cs.push_back({scale_rows(lambda_bs[i], b_frozen), std::move(projected)});
  }
  return detail::ratio_row_mean(regmean_merge(cs, ridge), b_frozen, "merge_vera_lambda_b");
}

/// (IA)^3 merge: M = (sum_i ((ell_i 1) .* W0) G_i)(sum_i G_i)^{-1}, ell_j = mean_c M_jc / W0_jc.
inline Matrix merge_ia3(std::span<const Matrix> ells, const Matrix& w0, std::span<const GramStat> grams,
                        double ridge = kDefaultRidge) {
  detail::require_vectors(ells, w0.rows(), "merge_ia3");
  std::vector<Matrix> scaled;
  scaled.reserve(ells.size());
  for (const auto& l : ells) scaled.push_back(scale_rows(l, w0));
  auto cs = detail::zip(scaled, grams, "merge_ia3");
  return detail::ratio_row_mean(regmean_merge(cs, ridge), w0, "merge_ia3");
}

/// Unified classifier: task heads stacked row-wise in task order.
inline Matrix assemble_classifier(std::span<const Matrix> task_heads) {
  if (task_heads.empty()) throw DomainError("assemble_classifier: no heads");
  return vstack(task_heads);
}

/// Unweighted arithmetic mean, the FedAvg aggregation rule.
inline Matrix mean_merge(std::span<const Matrix> ms) {
  if (ms.empty()) throw DomainError("mean_merge: no contributors");
  Matrix out = Matrix::zeros(ms[0].rows(), ms[0].cols());
  for (const auto& m : ms) out += m;
  return (1.0 / static_cast<double>(ms.size())) * out;
}

}  // namespace lorm
