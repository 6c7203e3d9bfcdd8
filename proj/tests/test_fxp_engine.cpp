#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include <unistd.h>

#include "fxqat/fxp_engine.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace fxqat;
using fxqat::testing::random_batch;
using fxqat::testing::small_spec;

namespace {

FakeQuantConfig qat_config(int bw = 8, int ba = 8) {
  FakeQuantConfig fq;
  fq.enabled = true;
  fq.method = QatMethod::ACR;
  fq.b_w = BitWidth(bw);
  fq.b_a = BitWidth(ba);
  return fq;
}

// Untrained model with non-trivial batch-norm state.
TrainedModel toy_model(const ModelSpec& spec, const FakeQuantConfig& fq, std::uint64_t seed) {
  TrainedModel m = init_model(spec, fq, seed);
  std::mt19937_64 rng(seed + 11);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& b : m.blocks) {
    for (auto& v : b.bias) v = static_cast<float>(u(rng));
    for (auto& v : b.bn.gamma) v = static_cast<float>(1.0 + u(rng));
    for (auto& v : b.bn.beta) v = static_cast<float>(0.5 + u(rng));
    for (auto& v : b.bn.running_mean) v = static_cast<float>(u(rng));
    for (auto& v : b.bn.running_var) v = static_cast<float>(0.5 + std::abs(u(rng)));
  }
  m.stats.mean.assign(kMelBins, 0.0);
  m.stats.std.assign(kMelBins, 1.0);
  m.stats.max_abs = 4.0;
  return m;
}

std::vector<FeatureMatrix> inputs_for(const ModelSpec& spec, int n, std::uint64_t seed) {
  return random_batch(spec, n, seed).inputs;
}

FxpLayer one_by_one(std::int32_t weight, std::int32_t bias, int in_q, int out_shift) {
  FxpLayer l;
  l.conv = {1, 1, 1, 1, 1, 1, true};
  l.weights = FxpTensor{{1, 1}, {weight}, BitWidth(8), QFormat(7)};
  l.bias = {bias};
  l.in_q = in_q;
  l.acc_q = in_q + 7;
  l.out_shift = out_shift;
  l.out_offset = 0;
  l.out_u_max = 127;
  l.out_q = l.acc_q - out_shift;
  l.out_bits = 8;
  l.finalize();
  return l;
}

const AccumulatorConfig kWide{32, 48, std::nullopt};

}  // namespace

TEST(MacKernel, SaturatesWithoutFlush) {
  const std::vector<std::int32_t> w(4, 127), x(4, 127);
  const auto r = mac_kernel(w, x, AccumulatorConfig{16, 32, std::nullopt});
  EXPECT_GE(r.saturations, 1);
  EXPECT_EQ(r.sum, 32767);
}

TEST(MacKernel, CadenceOneNeverSaturates) {
  const std::vector<std::int32_t> w(4, 127), x(4, 127);
  const auto r = mac_kernel(w, x, AccumulatorConfig{16, 32, 1});
  EXPECT_EQ(r.sum, 4 * 16129);
  EXPECT_EQ(r.saturations, 0);
}

TEST(MacKernel, ZerosGiveZero) {
  const std::vector<std::int32_t> z(9, 0), w(9, -128);
  for (std::optional<int> cad : {std::optional<int>{}, std::optional<int>{1}, std::optional<int>{4}}) {
    const auto r = mac_kernel(w, z, AccumulatorConfig{16, 32, cad});
    EXPECT_EQ(r.sum, 0);
    EXPECT_EQ(r.saturations, 0);
  }
}

TEST(MacKernel, SixteenBitClampsOnSecondExtremeProduct) {
  const AccumulatorConfig cfg{16, 32, std::nullopt};
  const std::vector<std::int32_t> one{-128}, two{-128, -128};
  EXPECT_EQ(mac_kernel(one, one, cfg).saturations, 0);
  const auto r = mac_kernel(two, two, cfg);
  EXPECT_EQ(r.saturations, 1);
  EXPECT_EQ(r.sum, 32767);
}

TEST(MacKernel, MatchesExactSumWhenWide) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> d(-128, 127);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::int32_t> w(1120), x(1120);
    std::int64_t exact = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] = d(rng);
      x[i] = d(rng);
      exact += static_cast<std::int64_t>(w[i]) * x[i];
    }
    const auto r = mac_kernel(w, x, kWide);
    EXPECT_EQ(r.sum, exact);
    EXPECT_EQ(r.saturations, 0);
  }
}

TEST(MacKernel, RejectsLengthMismatch) {
  const std::vector<std::int32_t> a(3, 1), b(2, 1);
  EXPECT_FXQAT_ERROR(mac_kernel(a, b, kWide), ShapeError);
}

TEST(AccumulatorConfig, Validate) {
  EXPECT_FXQAT_ERROR((AccumulatorConfig{16, 16, std::nullopt}.validate()), ConfigError);
  EXPECT_FXQAT_ERROR((AccumulatorConfig{16, 32, 0}.validate()), ConfigError);
  EXPECT_NO_THROW((AccumulatorConfig{16, 32, 64}.validate()));
}

TEST(ConvFxp, IdentityKernel) {
  // Weight 64 is 0.5 on the 8-bit grid: shifting the accumulator by 6
  // reproduces the input codes, shifting by 7 halves them.
  FxpTensor x{{3, 3, 1}, {0, 1, 2, 3, 17, 64, 99, 126, 127}, BitWidth(8), QFormat(4)};
  const auto same = conv_fxp(one_by_one(64, 0, 4, 6), x, {3, 3, 1}, kWide);
  EXPECT_EQ(same.output.codes, x.codes);
  EXPECT_EQ(same.output.q.frac_bits(), 5);
  const auto half = conv_fxp(one_by_one(64, 0, 4, 7), x, {3, 3, 1}, kWide);
  for (std::size_t i = 0; i < x.codes.size(); ++i)
    EXPECT_EQ(half.output.codes[i], rescale({x.codes[i], BitWidth(8), QFormat(4)}, BitWidth(8), QFormat(3)).value);
}

TEST(ConvFxp, ZeroWeightsGiveReluOfBias) {
  FxpTensor x{{2, 2, 1}, {127, -128, 5, -5}, BitWidth(8), QFormat(4)};
  for (std::int32_t bias : {-300, 0, 256, 100000}) {
    const auto r = conv_fxp(one_by_one(0, bias, 4, 4), x, {2, 2, 1}, AccumulatorConfig{});
    const std::int32_t expected = std::min<std::int64_t>(shift_round(std::max(bias, 0), 4), 127);
    for (auto c : r.output.codes) EXPECT_EQ(c, expected);
    EXPECT_EQ(r.counts.saturation_events, 0);
  }
}

TEST(ConvFxp, RejectsQFormatMismatch) {
  FxpTensor x{{1, 1, 1}, {3}, BitWidth(8), QFormat(5)};
  EXPECT_FXQAT_ERROR(conv_fxp(one_by_one(64, 0, 4, 6), x, {1, 1, 1}, kWide), QFormatError);
  EXPECT_NO_THROW(conv_fxp(one_by_one(64, 0, 4, 6), x, {1, 1, 1}, kWide, EngineMode::PtqPerLayer));
}

TEST(ConvFxp, WideAccumulatorNeverSaturates) {
  const auto spec = ModelSpec::kws(12);
  const auto fx = export_model(toy_model(spec, qat_config(), 3));
  for (const auto& f : inputs_for(spec, 2, 5)) {
    const auto r = infer(fx, f, kWide);
    for (const auto& c : r.counts) {
      EXPECT_EQ(c.saturation_events, 0);
      EXPECT_EQ(c.buffer_saturations, 0);
    }
  }
}

TEST(NormalizeQFormat, Examples) {
  std::int64_t ops = -1;
  const FxpTensor t{{1}, {64}, BitWidth(8), QFormat(7)};
  const auto h = normalize_qformat(t, QFormat(6), &ops);
  EXPECT_EQ(h.codes[0], 32);
  EXPECT_EQ(h.q.frac_bits(), 6);
  EXPECT_EQ(ops, 1);
  const auto same = normalize_qformat(t, QFormat(7), &ops);
  EXPECT_EQ(same.codes, t.codes);
  EXPECT_EQ(ops, 0);
  EXPECT_FXQAT_ERROR(normalize_qformat(FxpTensor{{1}, {1}, BitWidth(8), QFormat(0)}, QFormat(4)), InvalidRescale);
}

TEST(Export, WeightsReproduceFakeQuantExactly) {
  const auto spec = small_spec();
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto tm = toy_model(spec, qat_config(), seed);
    const auto fx = export_model(tm);
    const auto eff = effective_blocks(tm);
    for (std::size_t l = 0; l < fx.layers.size(); ++l) {
      ASSERT_EQ(fx.layers[l].weights.codes.size(), eff[l].weights.size());
      double worst = 0.0;
      for (std::size_t i = 0; i < eff[l].weights.size(); ++i)
        worst = std::max(worst, std::abs(dequantize_unit({fx.layers[l].weights.codes[i], fx.b_w, QFormat(7)}) -
                                         eff[l].weights[i]));
      EXPECT_EQ(worst, 0.0) << "layer " << l;
    }
  }
}

TEST(Export, ZeroWeightsGiveZeroCodes) {
  auto tm = toy_model(small_spec(), qat_config(), 4);
  for (auto& b : tm.blocks) std::fill(b.weights.begin(), b.weights.end(), 0.0f);
  for (const auto& l : export_model(tm).layers)
    for (auto c : l.weights.codes) EXPECT_EQ(c, 0);
}

TEST(Export, RejectsFloatModelAndBadClip) {
  auto tm = init_model(small_spec(), FakeQuantConfig{}, 1);
  EXPECT_FXQAT_ERROR(export_model(tm), ExportError);
  auto fq = qat_config();
  fq.c_a = 1.5;
  EXPECT_FXQAT_ERROR(export_model(init_model(small_spec(), fq, 1)), ExportError);
  EXPECT_FXQAT_ERROR(export_ptq(init_model(small_spec(), qat_config(), 1), inputs_for(small_spec(), 2, 1)),
                     ExportError);
}

TEST(Infer, BitExactAgainstFloatReference) {
  for (int bits : {4, 6, 8}) {
    const auto spec = small_spec();
    const auto tm = toy_model(spec, qat_config(bits, bits), 7 + bits);
    const auto fx = export_model(tm);
    const auto inputs = inputs_for(spec, 40, 9);
    const auto rep = verify_against_reference(tm, fx, inputs, kWide);
    EXPECT_TRUE(rep.bit_exact) << "bits " << bits << " first layer " << rep.first_divergent_layer;
    EXPECT_EQ(rep.mismatches, 0);
    EXPECT_TRUE(rep.argmax_equal);
    EXPECT_LE(rep.max_posterior_diff, 1e-12);
  }
}

TEST(Infer, BitExactOnFullTopology) {
  const auto spec = ModelSpec::kws(12);
  const auto tm = toy_model(spec, qat_config(), 21);
  const auto fx = export_model(tm);
  const auto rep = verify_against_reference(tm, fx, inputs_for(spec, 4, 22), kWide);
  EXPECT_TRUE(rep.bit_exact);
  EXPECT_LE(rep.max_posterior_diff, 1e-12);
}

TEST(Infer, SilenceGolden) {
  const auto spec = ModelSpec::kws(12);
  const auto fx = export_model(toy_model(spec, qat_config(), 5));
  FeatureMatrix silence;
  silence.frames = spec.in_h;
  silence.values.assign(static_cast<std::size_t>(spec.in_h) * spec.in_w, -2.0f);
  const auto r = infer(fx, silence, AccumulatorConfig{});
  const std::vector<std::int64_t> golden{15795, 36297, 41488, 52671, 4733, -945, -19018, -17873, -22180, -7212, -4159, 22002};
  EXPECT_EQ(r.logit_codes, golden);
}

TEST(Infer, Deterministic) {
  const auto spec = small_spec();
  const auto fx = export_model(toy_model(spec, qat_config(6, 6), 8));
  const auto f = inputs_for(spec, 1, 3)[0];
  const AccumulatorConfig cfg{12, 32, std::nullopt};
  const auto a = infer(fx, f, cfg), b = infer(fx, f, cfg);
  EXPECT_EQ(a.logit_codes, b.logit_codes);
  EXPECT_EQ(a.posteriors, b.posteriors);
  ASSERT_EQ(a.counts.size(), b.counts.size());
  for (std::size_t l = 0; l < a.counts.size(); ++l) {
    EXPECT_EQ(a.counts[l].corrupted, b.counts[l].corrupted);
    EXPECT_EQ(a.counts[l].saturation_events, b.counts[l].saturation_events);
  }
}

TEST(Infer, RejectsWrongShape) {
  const auto fx = export_model(toy_model(small_spec(), qat_config(), 1));
  FeatureMatrix f;
  f.frames = 5;
  f.values.assign(30, 0.0f);
  EXPECT_FXQAT_ERROR(infer(fx, f, kWide), ShapeError);
}

TEST(Ptq, UniformRelabelIsBitIdentical) {
  const auto spec = ModelSpec::kws(12);
  const auto qat = export_model(toy_model(spec, qat_config(), 6));
  const auto ptq = as_uniform_ptq(qat);
  for (const auto& f : inputs_for(spec, 2, 7)) {
    const auto a = infer(qat, f, AccumulatorConfig{});
    const auto b = infer(ptq, f, AccumulatorConfig{});
    EXPECT_EQ(a.logit_codes, b.logit_codes);
    EXPECT_EQ(b.normalization_ops, 0);
  }
  EXPECT_EQ(instruction_profile(qat, 1, AccumulatorConfig{}).normalization_ops, 0);
  EXPECT_GT(instruction_profile(ptq, 1, AccumulatorConfig{}).normalization_ops, 0);
}

TEST(Ptq, ExportNormalizesHiddenOutputs) {
  const auto spec = small_spec();
  auto fq = FakeQuantConfig{};
  const auto tm = toy_model(spec, fq, 12);
  const auto inputs = inputs_for(spec, 16, 13);
  const auto fx = export_ptq(tm, inputs);
  EXPECT_EQ(fx.mode, EngineMode::PtqPerLayer);
  EXPECT_EQ(fx.ptq_common_q, *std::min_element(fx.ptq_out_q.begin(), fx.ptq_out_q.end()));
  // 16-bit PTQ stays close to the float model.
  Network<double> net(tm);
  for (const auto& f : inputs) {
    const FeatureMatrix* one[] = {&f};
    const auto& logits = net.forward(pack_batch<double>(one, spec), Pass::Eval);
    const auto r = infer(fx, f, kWide);
    for (std::size_t c = 0; c < r.logits.size(); ++c) EXPECT_NEAR(r.logits[c], logits(0, c), 1e-2);
  }
}

TEST(InstructionProfile, FlushRatioFollowsCeilArithmetic) {
  const auto spec = ModelSpec::kws(35);
  const auto fx = export_model(toy_model(spec, qat_config(), 1));
  const auto p16 = instruction_profile(fx, 10, AccumulatorConfig{16, 32, 16});
  const auto p256 = instruction_profile(fx, 10, AccumulatorConfig{16, 32, 256});
  const auto shapes = spec.output_shapes();
  std::int64_t f16 = 0, f256 = 0;
  for (std::size_t l = 0; l < spec.blocks.size(); ++l) {
    const std::int64_t macs = spec.blocks[l].kh * spec.blocks[l].kw * spec.blocks[l].in_ch;
    const std::int64_t acts = static_cast<std::int64_t>(shapes[l].size()) * 10;
    f16 += acts * ((macs + 15) / 16);
    f256 += acts * ((macs + 255) / 256);
    if (macs % 256 == 0) {
      EXPECT_DOUBLE_EQ(static_cast<double>(p16.flush_ops_per_layer[l]) / p256.flush_ops_per_layer[l], 16.0);
    }
  }
  EXPECT_EQ(p16.flush_ops, f16);
  EXPECT_EQ(p256.flush_ops, f256);
  EXPECT_EQ(instruction_profile(fx, 10, AccumulatorConfig{}).flush_ops, 0);
  EXPECT_EQ(p16.normalization_ops, 0);
}

TEST(InstructionProfile, Deterministic) {
  const auto fx = export_model(toy_model(ModelSpec::kws(35), qat_config(), 1));
  const auto a = instruction_profile(fx, 3, AccumulatorConfig{16, 32, 64});
  const auto b = instruction_profile(fx, 3, AccumulatorConfig{16, 32, 64});
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}

TEST(ProfileSaturations, MonotoneInCadence) {
  const auto spec = ModelSpec::kws(12);
  for (std::uint64_t seed : {1, 2}) {
    const auto fx = export_model(toy_model(spec, qat_config(6, 6), seed));
    const auto inputs = inputs_for(spec, 3, seed + 40);
    const auto reps = profile_saturations(fx, inputs, {std::nullopt, 256, 128, 64, 16, 1}, 12);
    for (std::size_t i = 1; i < reps.size(); ++i) EXPECT_LE(reps[i].total_corrupted(), reps[i - 1].total_corrupted());
    EXPECT_EQ(reps.back().total_corrupted(), 0);
    EXPECT_EQ(reps.front().cadence, "none");
    EXPECT_EQ(reps.front().inputs, 3);
  }
}

TEST(FxpModelFile, RoundTrip) {
  const auto spec = small_spec();
  const auto tm = toy_model(spec, FakeQuantConfig{}, 2);
  for (const auto& fx : {export_model(toy_model(spec, qat_config(), 2)), export_ptq(tm, inputs_for(spec, 4, 1))}) {
    const auto bytes = fxp_model_bytes(fx);
    const auto back = parse_fxp_model(ContainerReader(bytes, kFxpModelMagic));
    EXPECT_EQ(fxp_model_bytes(back), bytes);
    const auto f = inputs_for(spec, 1, 8)[0];
    EXPECT_EQ(infer(fx, f, AccumulatorConfig{}).logit_codes, infer(back, f, AccumulatorConfig{}).logit_codes);
  }
}

TEST(FxpModelFile, RejectsCorruptAndMissing) {
  const auto bytes = fxp_model_bytes(export_model(toy_model(small_spec(), qat_config(), 2)));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_FXQAT_ERROR(parse_fxp_model(ContainerReader(bad, kFxpModelMagic)), FormatError);
  std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + 20);
  EXPECT_ANY_THROW(parse_fxp_model(ContainerReader(cut, kFxpModelMagic)));
  EXPECT_FXQAT_ERROR(load_fxp_model("/nonexistent/model.fxpm"), IoError);
}
