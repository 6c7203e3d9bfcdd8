#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fxqat/fxp_core.hpp"
#include "test_util.hpp"

using namespace fxqat;

namespace {

// Independent reference for round-half-away-from-zero on an exact product.
long double ref_round(long double x) { return x < 0 ? -std::floor(-x + 0.5L) : std::floor(x + 0.5L); }

std::int32_t ref_qformat(long double f, int b, int q) {
  long double v = ref_round(std::ldexp(f, q));
  const long double hi = std::ldexp(1.0L, b - 1) - 1, lo = -std::ldexp(1.0L, b - 1);
  return static_cast<std::int32_t>(std::clamp(v, lo, hi));
}

}  // namespace

TEST(BitWidth, RejectsOutOfRange) {
  EXPECT_FXQAT_ERROR(BitWidth(1), InvalidInput);
  EXPECT_FXQAT_ERROR(BitWidth(17), InvalidInput);
  EXPECT_EQ(BitWidth(8).min_code(), -128);
  EXPECT_EQ(BitWidth(8).max_code(), 127);
}

TEST(QuantizeUnit, Examples) {
  EXPECT_EQ(quantize_unit(-1.0, BitWidth(8)).value, -128);
  EXPECT_EQ(quantize_unit(0.0, BitWidth(8)).value, 0);
  EXPECT_EQ(quantize_unit(0.999, BitWidth(8)).value, 127);
  EXPECT_EQ(quantize_unit(1.0, BitWidth(8)).value, 127);
  EXPECT_EQ(quantize_unit(0.0, BitWidth(8)).q.frac_bits(), 7);
}

TEST(QuantizeUnit, RejectsOutOfRange) {
  EXPECT_FXQAT_ERROR(quantize_unit(1.5, BitWidth(8)), InvalidInput);
  EXPECT_FXQAT_ERROR(quantize_unit(NAN, BitWidth(8)), InvalidInput);
}

TEST(DequantizeUnit, Examples) {
  EXPECT_DOUBLE_EQ(dequantize_unit({-64, BitWidth(8), QFormat(7)}), -0.5);
  EXPECT_DOUBLE_EQ(dequantize_unit({-128, BitWidth(8), QFormat(7)}), -1.0);
  EXPECT_DOUBLE_EQ(dequantize_unit({127, BitWidth(8), QFormat(7)}), 127.0 / 128.0);
}

TEST(QuantizeUnit, RoundTripWithinOneStep) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (int b = 2; b <= 16; ++b) {
    const double step = std::ldexp(1.0, -(b - 1));
    for (int i = 0; i < 2000; ++i) {
      const double w = dist(rng);
      EXPECT_LE(std::abs(dequantize_unit(quantize_unit(w, BitWidth(b))) - w), step) << "b=" << b << " w=" << w;
    }
  }
}

TEST(QuantizeUnit, GridFixpoint) {
  for (int b = 2; b <= 16; ++b) {
    const BitWidth bw(b);
    for (std::int32_t c = bw.min_code(); c <= bw.max_code(); ++c) {
      const FxpCode code{c, bw, QFormat(b - 1)};
      ASSERT_EQ(quantize_unit(dequantize_unit(code), bw).value, c) << "b=" << b;
    }
  }
}

TEST(QuantizeUnit, Monotone) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (int i = 0; i < 5000; ++i) {
    double a = dist(rng), c = dist(rng);
    if (a > c) std::swap(a, c);
    EXPECT_LE(quantize_unit(a, BitWidth(6)).value, quantize_unit(c, BitWidth(6)).value);
    EXPECT_LE(quantize_qformat(8 * a, BitWidth(6), QFormat(3)).value, quantize_qformat(8 * c, BitWidth(6), QFormat(3)).value);
  }
}

TEST(QuantizeQFormat, Examples) {
  EXPECT_EQ(quantize_qformat(0.53, BitWidth(8), QFormat(4)).value, ref_qformat(0.53L, 8, 4));
  EXPECT_EQ(quantize_qformat(0.53, BitWidth(8), QFormat(4)).value, 8);
  EXPECT_EQ(quantize_qformat(100.0, BitWidth(8), QFormat(4)).value, 127);
  EXPECT_EQ(quantize_qformat(-100.0, BitWidth(8), QFormat(4)).value, -128);
  EXPECT_EQ(quantize_qformat(-0.53, BitWidth(8), QFormat(4)).value, -8);
}

TEST(QuantizeQFormat, MatchesReferenceRounding) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(-20.0, 20.0);
  for (int i = 0; i < 10000; ++i) {
    const double f = dist(rng);
    EXPECT_EQ(quantize_qformat(f, BitWidth(10), QFormat(4)).value, ref_qformat(f, 10, 4)) << f;
  }
  // Exact half-way points round away from zero.
  EXPECT_EQ(quantize_qformat(2.5 / 16, BitWidth(8), QFormat(4)).value, 3);
  EXPECT_EQ(quantize_qformat(-2.5 / 16, BitWidth(8), QFormat(4)).value, -3);
}

TEST(QuantizeQFormat, SignInvertedConstantRoundsDown) {
  // c = -0.5 for positive values: trunc(8.48 - 0.5) = 7.
  EXPECT_EQ(quantize_qformat(0.53, BitWidth(8), QFormat(4), RoundingConstant::SignInverted).value, 7);
}

TEST(DequantizeQFormat, Examples) {
  EXPECT_DOUBLE_EQ(dequantize_qformat({-127, BitWidth(8), QFormat(7)}), -0.9921875);
  EXPECT_DOUBLE_EQ(dequantize_qformat({8, BitWidth(8), QFormat(4)}), 0.5);
}

TEST(SelectQFormat, Examples) {
  EXPECT_EQ(select_qformat(1.0, BitWidth(8)).frac_bits(), 7);
  EXPECT_EQ(select_qformat(16.0, BitWidth(8)).frac_bits(), 3);
  EXPECT_EQ(select_qformat(1e6, BitWidth(8)).frac_bits(), 0);
  EXPECT_EQ(select_qformat(0.3, BitWidth(8)).frac_bits(), 8);
  EXPECT_FXQAT_ERROR(select_qformat(0.0, BitWidth(8)), InvalidInput);
}

TEST(SelectQFormat, MaxAbsFitsWithoutNegativeClamp) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> dist(-10.0, 10.0);
  for (int i = 0; i < 2000; ++i) {
    const double m = std::exp(dist(rng));
    for (int b : {4, 8, 12, 16}) {
      const QFormat q = select_qformat(m, BitWidth(b));
      if (b - 1 - ceil_log2(m) < 0) continue;  // too large for any q
      EXPECT_GE(quantize_qformat(-m, BitWidth(b), q).value, BitWidth(b).min_code());
      EXPECT_GE(std::ldexp(-m, q.frac_bits()), BitWidth(b).min_code()) << m << " b=" << b;
      // Positive side only clamps at the exact boundary 2^(b-1).
      EXPECT_LE(std::ldexp(m, q.frac_bits()), std::ldexp(1.0, b - 1)) << m << " b=" << b;
    }
  }
}

TEST(CeilLog2, ExactOnPowersOfTwo) {
  EXPECT_EQ(ceil_log2(1.0), 0);
  EXPECT_EQ(ceil_log2(16.0), 4);
  EXPECT_EQ(ceil_log2(17.0), 5);
  EXPECT_EQ(ceil_log2(0.5), -1);
  EXPECT_EQ(ceil_log2(0.3), -1);
  EXPECT_TRUE(is_power_of_two(0.25));
  EXPECT_FALSE(is_power_of_two(0.3));
}

TEST(SatAdd, Examples) {
  Accumulator a{32760, 16, 0};
  a = sat_add(a, 100);
  EXPECT_EQ(a.acc, 32767);
  EXPECT_EQ(a.sat_count, 1);

  Accumulator b{-32768, 16, 0};
  b = sat_add(b, -5);
  EXPECT_EQ(b.acc, -32768);
  EXPECT_EQ(b.sat_count, 1);

  Accumulator c{10, 16, 0};
  c = sat_add(c, -20);
  EXPECT_EQ(c.acc, -10);
  EXPECT_EQ(c.sat_count, 0);
}

TEST(SatAdd, CommutativeAndInRange) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::int64_t> dist(-40000, 40000);
  for (int i = 0; i < 10000; ++i) {
    const std::int64_t x = std::clamp<std::int64_t>(dist(rng), -32768, 32767), y = dist(rng) % 32768;
    const Accumulator base{0, 16, 0};
    const auto xy = sat_add(sat_add(base, x), y);
    const auto yx = sat_add(sat_add(base, y), x);
    EXPECT_EQ(xy.acc, yx.acc);
    EXPECT_GE(xy.acc, -32768);
    EXPECT_LE(xy.acc, 32767);
  }
}

TEST(Rescale, Examples) {
  EXPECT_EQ(rescale({16384, BitWidth(16), QFormat(14)}, BitWidth(8), QFormat(7)).value, 127);
  // -129 / 2 = -64.5 rounds away from zero.
  EXPECT_EQ(rescale({-129, BitWidth(16), QFormat(8)}, BitWidth(16), QFormat(7)).value, -65);
  EXPECT_EQ(rescale({64, BitWidth(8), QFormat(7)}, BitWidth(8), QFormat(6)).value, 32);
  EXPECT_FXQAT_ERROR(rescale({1, BitWidth(8), QFormat(0)}, BitWidth(8), QFormat(4)), InvalidRescale);
}

TEST(ShiftRound, NegativeShiftIsExactLeftShift) {
  EXPECT_EQ(shift_round(3, -2), 12);
  EXPECT_EQ(shift_round(-3, -2), -12);
  EXPECT_EQ(shift_round(5, 1), 3);
  EXPECT_EQ(shift_round(-5, 1), -3);
  EXPECT_EQ(shift_round(4, 0), 4);
}

TEST(FxpTensor, ValidateChecksShapeAndRange) {
  FxpTensor t{{2, 2}, {1, 2, 3}, BitWidth(8), QFormat(7)};
  EXPECT_FXQAT_ERROR(t.validate(), ShapeError);
  t.codes.push_back(200);
  EXPECT_FXQAT_ERROR(t.validate(), InvalidInput);
  t.codes.back() = -128;
  EXPECT_NO_THROW(t.validate());
}
