#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <variant>

#include "lorm/linalg.hpp"

namespace lorm {

inline constexpr double kLoraInitStd = 0.02;

/// Low-rank residual Delta W = B A with B: d x r and A: r x k.
struct LoRAModule {
  Matrix b;
  Matrix a;

  std::size_t rank() const noexcept { return a.rows(); }
};

/// VeRA residual diag(lambda_b) B diag(lambda_d) A with frozen random B and A.
struct VeRAModule {
  Matrix b_frozen;
  Matrix a_frozen;
  Matrix lambda_b;  // d x 1
  Matrix lambda_d;  // r x 1
};

/// (IA)^3 in zero-shifted residual form: (ell 1^T) .* W0, i.e. output rows scaled by (1 + ell).
struct IA3Module {
  Matrix ell;  // d x 1
};

/// Unconstrained residual; used for full-layer fine-tuning and for merged task residuals.
struct DenseResidual {
  Matrix delta;
};

using Residual = std::variant<std::monostate, LoRAModule, VeRAModule, IA3Module, DenseResidual>;

struct LinearLayer {
  Matrix w0;    // d x k, frozen
  Matrix bias;  // d x 1, frozen
  Residual residual;

  std::size_t out_dim() const noexcept { return w0.rows(); }
  std::size_t in_dim() const noexcept { return w0.cols(); }
};

inline LoRAModule init_lora(std::size_t d, std::size_t k, std::size_t r, std::uint64_t seed) {
  if (r < 1 || r > std::min(d, k)) {
    throw DomainError("init_lora: rank " + std::to_string(r) + " outside [1, min(" +
                      std::to_string(d) + ", " + std::to_string(k) + ")]");
  }
  Rng rng(seed);
  return {Matrix::zeros(d, r), Matrix::gaussian(r, k, kLoraInitStd, rng)};
}

/// Frozen factors are N(0, 1/r); lambda_b starts at zero so the residual vanishes,
/// lambda_d starts at one so lambda_b receives gradient on the first step.
inline VeRAModule init_vera(std::size_t d, std::size_t k, std::size_t r, std::uint64_t seed) {
  if (r < 1 || r > std::min(d, k)) {
    throw DomainError("init_vera: rank " + std::to_string(r) + " out of range");
  }
  Rng rng(seed);
  const double std = 1.0 / std::sqrt(static_cast<double>(r));
  Matrix b = Matrix::gaussian(d, r, std, rng);
  Matrix a = Matrix::gaussian(r, k, std, rng);
  return {std::move(b), std::move(a), Matrix::zeros(d, 1), Matrix(r, 1, 1.0)};
}

inline IA3Module init_ia3(std::size_t d) { return {Matrix::zeros(d, 1)}; }

namespace detail {

inline void require_input(const LinearLayer& layer, const Matrix& x, const char* op) {
  if (x.rows() != layer.in_dim()) {
    throw ShapeError(std::string(op) + ": input " + x.shape() + " does not match layer " +
                     layer.w0.shape());
  }
}

inline Matrix add_bias(Matrix h, const Matrix& bias) {
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (double& v : h.row(i)) v += bias[i];
  return h;
}

inline Matrix vera_b_scaled(const VeRAModule& m) { return scale_rows(m.lambda_b, m.b_frozen); }
inline Matrix vera_a_scaled(const VeRAModule& m) { return scale_rows(m.lambda_d, m.a_frozen); }

template <typename Module>
const Module& residual_as(const LinearLayer& layer, const char* op) {
  const auto* m = std::get_if<Module>(&layer.residual);
  if (m == nullptr) throw DomainError(std::string(op) + ": layer carries a different residual kind");
  return *m;
}

}  // namespace detail

/// Dense Delta W for a residual module attached to a layer with frozen weight w0.
inline Matrix residual_matrix(const Residual& residual, const Matrix& w0) {
  return std::visit(
      [&](const auto& m) -> Matrix {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, std::monostate>) {
          return Matrix::zeros(w0.rows(), w0.cols());
        } else if constexpr (std::is_same_v<T, LoRAModule>) {
          return matmul(m.b, m.a);
        } else if constexpr (std::is_same_v<T, VeRAModule>) {
          return matmul(detail::vera_b_scaled(m), detail::vera_a_scaled(m));
        } else if constexpr (std::is_same_v<T, IA3Module>) {
          return scale_rows(m.ell, w0);
        } else {
          return m.delta;
        }
      },
      residual);
}

inline Matrix residual_matrix(const LinearLayer& layer) {
  return residual_matrix(layer.residual, layer.w0);
}

/// W0 X + B (A X) + bias, low-rank product first.
inline Matrix lora_forward(const LinearLayer& layer, const Matrix& x) {
  detail::require_input(layer, x, "lora_forward");
  const auto& m = detail::residual_as<LoRAModule>(layer, "lora_forward");
  return detail::add_bias(matmul(layer.w0, x) + matmul(m.b, matmul(m.a, x)), layer.bias);
}

inline Matrix vera_forward(const LinearLayer& layer, const Matrix& x) {
  detail::require_input(layer, x, "vera_forward");
  const auto& m = detail::residual_as<VeRAModule>(layer, "vera_forward");
  Matrix low = scale_rows(m.lambda_d, matmul(m.a_frozen, x));
  Matrix res = scale_rows(m.lambda_b, matmul(m.b_frozen, low));
  return detail::add_bias(matmul(layer.w0, x) + res, layer.bias);
}

/// (1 + ell) .* (W0 X) + bias
inline Matrix ia3_forward(const LinearLayer& layer, const Matrix& x) {
  detail::require_input(layer, x, "ia3_forward");
  const auto& m = detail::residual_as<IA3Module>(layer, "ia3_forward");
  Matrix h = matmul(layer.w0, x);
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (double& v : h.row(i)) v *= 1.0 + m.ell[i];
  return detail::add_bias(std::move(h), layer.bias);
}

/// Pre-activation of any layer, dispatching on its residual kind.
inline Matrix layer_forward(const LinearLayer& layer, const Matrix& x) {
  detail::require_input(layer, x, "layer_forward");
  return std::visit(
      [&](const auto& m) -> Matrix {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, LoRAModule>) {
          return lora_forward(layer, x);
        } else if constexpr (std::is_same_v<T, VeRAModule>) {
          return vera_forward(layer, x);
        } else if constexpr (std::is_same_v<T, IA3Module>) {
          return ia3_forward(layer, x);
        } else if constexpr (std::is_same_v<T, DenseResidual>) {
          return detail::add_bias(matmul(layer.w0 + m.delta, x), layer.bias);
        } else {
          return detail::add_bias(matmul(layer.w0, x), layer.bias);
        }
      },
      layer.residual);
}

inline std::size_t lora_trainable_params(std::size_t d, std::size_t k, std::size_t r) {
  return r * (d + k);
}
inline std::size_t full_trainable_params(std::size_t d, std::size_t k) { return d * k; }

}  // namespace lorm
