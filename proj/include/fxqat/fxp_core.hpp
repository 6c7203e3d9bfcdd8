#pragma once

// Fixed-point primitives shared by the training-side fake quantizers and the
// integer inference engine. One rounding rule is used everywhere:
// round-half-away-from-zero.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "fxqat/error.hpp"

namespace fxqat {

class BitWidth {
 public:
  static constexpr int kMin = 2;
  static constexpr int kMax = 16;

  explicit BitWidth(int bits) : bits_(bits) {
    if (bits < kMin || bits > kMax)
      fail(ErrorCode::InvalidInput, "bit width " + std::to_string(bits) + " outside [2, 16]");
  }

  int bits() const noexcept { return bits_; }
  std::int32_t min_code() const noexcept { return -(std::int32_t{1} << (bits_ - 1)); }
  std::int32_t max_code() const noexcept { return (std::int32_t{1} << (bits_ - 1)) - 1; }
  // 2^(b-1), the scale of the unit-range quantizer.
  std::int32_t half_range() const noexcept { return std::int32_t{1} << (bits_ - 1); }

  friend bool operator==(BitWidth, BitWidth) = default;

 private:
  int bits_;
};

class QFormat {
 public:
  static constexpr int kMax = 30;

  explicit QFormat(int frac_bits) : q_(frac_bits) {
    if (frac_bits < 0 || frac_bits > kMax)
      fail(ErrorCode::InvalidInput, "q-format " + std::to_string(frac_bits) + " outside [0, 30]");
  }

  int frac_bits() const noexcept { return q_; }

  friend bool operator==(QFormat, QFormat) = default;

 private:
  int q_;
};

struct FxpCode {
  std::int32_t value;
  BitWidth b;
  QFormat q;

  friend bool operator==(const FxpCode&, const FxpCode&) = default;
};

struct FxpTensor {
  std::vector<int> shape;
  std::vector<std::int32_t> codes;
  BitWidth b{8};
  QFormat q{7};

  std::size_t size() const { return codes.size(); }

  static std::size_t element_count(const std::vector<int>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t acc, int d) { return acc * static_cast<std::size_t>(d); });
  }

  void validate() const {
    require(codes.size() == element_count(shape), ErrorCode::ShapeError,
            "tensor code count does not match its shape");
    for (auto c : codes) {
      if (c < b.min_code() || c > b.max_code())
        fail(ErrorCode::InvalidInput, "code " + std::to_string(c) + " outside " + std::to_string(b.bits()) + "-bit range");
    }
  }
};

// Saturating accumulator of configurable width. Updated functionally.
struct Accumulator {
  std::int64_t acc = 0;
  int acc_bits = 16;
  std::int64_t sat_count = 0;

  std::int64_t upper() const noexcept { return (std::int64_t{1} << (acc_bits - 1)) - 1; }
  std::int64_t lower() const noexcept { return -(std::int64_t{1} << (acc_bits - 1)); }
};

enum class RoundingConstant {
  HalfAway,       // c = +0.5 for f >= 0, -0.5 otherwise
  SignInverted,   // c = +0.5 for f < 0, -0.5 otherwise
};

inline double round_half_away(double x) { return std::round(x); }

// Right shift by `shift` bits with round-half-away-from-zero; a negative
// shift is an exact left shift.
inline std::int64_t shift_round(std::int64_t v, int shift) {
  if (shift <= 0) return v * (std::int64_t{1} << -shift);
  const std::int64_t half = std::int64_t{1} << (shift - 1);
  if (v >= 0) return (v + half) >> shift;
  return -((-v + half) >> shift);
}

inline std::int64_t clamp_to_bits(std::int64_t v, int bits) {
  const std::int64_t hi = (std::int64_t{1} << (bits - 1)) - 1;
  const std::int64_t lo = -(std::int64_t{1} << (bits - 1));
  return std::clamp(v, lo, hi);
}

inline FxpCode quantize_unit(double w, BitWidth b) {
  require(std::isfinite(w), ErrorCode::InvalidInput, "quantize_unit: non-finite input");
  if (std::abs(w) > 1.0 + 1e-9) fail(ErrorCode::InvalidInput, "quantize_unit: |w| > 1 (" + std::to_string(w) + ")");
  w = std::clamp(w, -1.0, 1.0);
  const double half = b.half_range();
  const double top = 2.0 * half - 1.0;
  const double u = std::clamp(round_half_away(half * (w + 1.0)), 0.0, top);
  return FxpCode{static_cast<std::int32_t>(u) - b.half_range(), b, QFormat(b.bits() - 1)};
}

inline double dequantize_unit(const FxpCode& c) {
  const std::int64_t u = std::int64_t{c.value} + c.b.half_range();
  return std::ldexp(static_cast<double>(u), -(c.b.bits() - 1)) - 1.0;
}

inline FxpCode quantize_qformat(double f, BitWidth b, QFormat q,
                                RoundingConstant rc = RoundingConstant::HalfAway) {
  require(std::isfinite(f), ErrorCode::InvalidInput, "quantize_qformat: non-finite input");
  double c = f >= 0.0 ? 0.5 : -0.5;
  if (rc == RoundingConstant::SignInverted) c = -c;
  const double lo = b.min_code();
  const double hi = b.max_code();
  // Clamp before truncation; the clamp bounds are integers so the order of
  // the two steps does not change the result.
  const double scaled = std::clamp(std::ldexp(f, q.frac_bits()) + c, lo, hi);
  return FxpCode{static_cast<std::int32_t>(std::trunc(scaled)), b, q};
}

inline double dequantize_qformat(const FxpCode& c) {
  return std::ldexp(static_cast<double>(c.value), -c.q.frac_bits());
}

// Exact ceil(log2(x)) for x > 0.
inline int ceil_log2(double x) {
  int exp = 0;
  const double mant = std::frexp(x, &exp);  // x = mant * 2^exp, mant in [0.5, 1)
  return mant == 0.5 ? exp - 1 : exp;
}

inline bool is_power_of_two(double x) {
  int exp = 0;
  return x > 0.0 && std::frexp(x, &exp) == 0.5;
}

// Largest q such that max_abs * 2^q <= 2^(b-1).
inline QFormat select_qformat(double max_abs, BitWidth b) {
  require(std::isfinite(max_abs) && max_abs > 0.0, ErrorCode::InvalidInput,
          "select_qformat: max_abs must be positive and finite");
  const int q = b.bits() - 1 - ceil_log2(max_abs);
  return QFormat(std::clamp(q, 0, QFormat::kMax));
}

inline Accumulator sat_add(Accumulator a, std::int64_t x) {
  const std::int64_t sum = a.acc + x;
  if (sum > a.upper()) {
    a.acc = a.upper();
    ++a.sat_count;
  } else if (sum < a.lower()) {
    a.acc = a.lower();
    ++a.sat_count;
  } else {
    a.acc = sum;
  }
  return a;
}

inline FxpCode rescale(const FxpCode& c, BitWidth to_b, QFormat to_q) {
  if (to_q.frac_bits() > c.q.frac_bits())
    fail(ErrorCode::InvalidRescale, "rescale cannot increase the q-format (" + std::to_string(c.q.frac_bits()) +
                                        " -> " + std::to_string(to_q.frac_bits()) + ")");
  const std::int64_t v = shift_round(c.value, c.q.frac_bits() - to_q.frac_bits());
  return FxpCode{static_cast<std::int32_t>(clamp_to_bits(v, to_b.bits())), to_b, to_q};
}

}  // namespace fxqat
