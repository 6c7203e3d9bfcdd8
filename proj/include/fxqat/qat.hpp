#pragma once

// Training-side fake quantization. Every forward quantizer here is the
// composition quantize -> dequantize from fxp_core, so values seen during
// training are exactly the values the integer engine reconstructs.

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "fxqat/error.hpp"
#include "fxqat/fxp_core.hpp"

namespace fxqat {

enum class QatMethod { None, SQWD, ACR };

inline std::string to_string(QatMethod m) {
  switch (m) {
    case QatMethod::None: return "none";
    case QatMethod::SQWD: return "sqwd";
    case QatMethod::ACR: return "acr";
  }
  return "none";
}

inline QatMethod parse_qat_method(const std::string& s) {
  if (s == "none") return QatMethod::None;
  if (s == "sqwd") return QatMethod::SQWD;
  if (s == "acr") return QatMethod::ACR;
  fail(ErrorCode::ConfigError, "unknown QAT method '" + s + "'");
}

// Latent weights beyond this magnitude are penalized by the SQWD regularizer.
inline constexpr double kSqwdLatentBound = 2.0;

struct FakeQuantConfig {
  BitWidth b_w{8};
  BitWidth b_a{8};
  BitWidth b_in{8};
  QFormat q_in{3};
  QatMethod method = QatMethod::None;
  double lambda_reg = 0.0;
  double c_a = 2.0;
  bool enabled = false;
  RoundingConstant feature_rounding = RoundingConstant::HalfAway;

  static double default_lambda(QatMethod m) {
    switch (m) {
      case QatMethod::ACR: return 0.1;
      case QatMethod::SQWD: return 1e-4;
      case QatMethod::None: return 0.0;
    }
    return 0.0;
  }

  void validate() const {
    require(lambda_reg >= 0.0 && std::isfinite(lambda_reg), ErrorCode::ConfigError,
            "lambda_reg must be non-negative");
    require(c_a > 0.0 && std::isfinite(c_a), ErrorCode::ConfigError, "c_a must be positive");
  }
};

inline double squash(double raw) { return std::tanh(raw); }

inline double squash_grad(double raw) {
  const double t = std::tanh(raw);
  return 1.0 - t * t;
}

inline double fake_quant_unit(double w_hat, BitWidth b) { return dequantize_unit(quantize_unit(w_hat, b)); }

// Straight-through estimator: the rounding node is the identity in the
// backward pass.
inline double ste_backward(double upstream_grad) { return upstream_grad; }

inline double sqwd_reg_loss(std::span<const double> raw, double lambda) {
  if (raw.empty() || lambda == 0.0) return 0.0;
  double sum = 0.0;
  for (double r : raw) {
    const double excess = std::abs(r) - kSqwdLatentBound;
    if (excess > 0.0) sum += excess * excess;
  }
  return lambda * sum / static_cast<double>(raw.size());
}

// d(sqwd_reg_loss)/d(raw_i) for one element, given the collection size n.
inline double sqwd_reg_grad(double raw, double lambda, std::size_t n) {
  const double excess = std::abs(raw) - kSqwdLatentBound;
  if (excess <= 0.0 || n == 0) return 0.0;
  return lambda * 2.0 * excess * (raw > 0.0 ? 1.0 : -1.0) / static_cast<double>(n);
}

inline double acr_phase(double w_hat, BitWidth b) {
  return std::numbers::pi * static_cast<double>(b.half_range()) * (w_hat + 1.0);
}

inline double acr_reg_loss(std::span<const double> w_hat, BitWidth b, double lambda) {
  if (w_hat.empty() || lambda == 0.0) return 0.0;
  double sum = 0.0;
  for (double w : w_hat) sum += std::abs(std::sin(acr_phase(w, b)));
  return lambda * sum / static_cast<double>(w_hat.size());
}

inline double acr_reg_grad(double w_hat, BitWidth b, double lambda, std::size_t n) {
  if (n == 0) return 0.0;
  const double phase = acr_phase(w_hat, b);
  const double s = std::sin(phase);
  if (s == 0.0) return 0.0;
  const double sign = s > 0.0 ? 1.0 : -1.0;
  return lambda * sign * std::cos(phase) * std::numbers::pi * static_cast<double>(b.half_range()) /
         static_cast<double>(n);
}

// Clipped ReLU on [0, c_a], linearly mapped onto [-1, 1], quantized on the
// unit grid and mapped back: a 2^b-level uniform quantizer on [0, c_a].
inline double fake_quant_activation(double x, BitWidth b, double c_a) {
  const double clipped = std::clamp(x, 0.0, c_a);
  const double s = 2.0 * clipped / c_a - 1.0;
  return c_a * (fake_quant_unit(s, b) + 1.0) / 2.0;
}

// Backward of fake_quant_activation: STE through rounding, the clip keeps
// its zero gradient outside (0, c_a).
inline double fake_quant_activation_grad(double x, double c_a) { return (x > 0.0 && x < c_a) ? 1.0 : 0.0; }

inline double fake_quant_feature(double f, BitWidth b, QFormat q,
                                 RoundingConstant rc = RoundingConstant::HalfAway) {
  return dequantize_qformat(quantize_qformat(f, b, q, rc));
}

}  // namespace fxqat
