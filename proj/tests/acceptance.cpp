// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// check fails. Trains the four desk-scale models once and reuses them.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>
#include <string>

#include "fxqat/trainer.hpp"
#include "gradcheck.hpp"

using namespace fxqat;

namespace {

int failures = 0;

void report(const char* id, bool ok, const std::string& what, const std::string& detail) {
  std::cout << (ok ? "[PASS] " : "[FAIL] ") << id << " " << what << ": " << detail << std::endl;
  if (!ok) ++failures;
}

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

void quantizer_properties() {
  Timer t;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::int64_t bad_roundtrip = 0, bad_idem = 0, bad_monotone = 0, bad_grid = 0;
  for (int b = 4; b <= 16; ++b) {
    const BitWidth bw(b);
    const double step = std::ldexp(1.0, -(b - 1));
    std::vector<double> w(100000);
    for (auto& v : w) v = dist(rng);
    std::sort(w.begin(), w.end());
    std::int32_t prev = std::numeric_limits<std::int32_t>::min();
    for (double v : w) {
      const auto code = quantize_unit(v, bw);
      const double back = dequantize_unit(code);
      if (std::abs(back - v) > step) ++bad_roundtrip;
      if (fake_quant_unit(back, bw) != back) ++bad_idem;
      if (code.value < prev) ++bad_monotone;
      prev = code.value;
    }
    for (std::int32_t c = bw.min_code(); c <= bw.max_code(); ++c)
      if (quantize_unit(dequantize_unit({c, bw, QFormat(b - 1)}), bw).value != c) ++bad_grid;
  }
  const bool ok = bad_roundtrip == 0 && bad_idem == 0 && bad_monotone == 0 && bad_grid == 0;
  report("C2", ok, "quantizer properties, b=4..16, 1e5 values each",
         fmt("round-trip violations %lld, idempotence %lld, monotonicity %lld, grid points %lld (%.1fs)",
             (long long)bad_roundtrip, (long long)bad_idem, (long long)bad_monotone, (long long)bad_grid, t.seconds()));
}

void two_mac_bound() {
  const AccumulatorConfig cfg{16, 32, std::nullopt};
  const std::vector<std::int32_t> one{-128}, two{-128, -128};
  const auto a = mac_kernel(one, one, cfg);
  const auto b = mac_kernel(two, two, cfg);
  const bool ok = a.saturations == 0 && a.sum == 16384 && b.saturations == 1 && b.sum == 32767;
  report("C4", ok, "16-bit accumulator clamps on the second 8x8-bit product",
         fmt("1 MAC: sum %lld, clamps %lld; 2 MACs: sum %lld, clamps %lld", (long long)a.sum,
             (long long)a.saturations, (long long)b.sum, (long long)b.saturations));
}

void gradient_checks() {
  Timer t;
  double flp = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) flp = std::max(flp, testing::flp_gradient_check(seed).rel_error);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> dist(0.0, 1e3);
  std::int64_t ste_bad = 0;
  std::vector<double> probes{0.0, -0.0, std::numeric_limits<double>::denorm_min(), std::numeric_limits<double>::max(),
                             -std::numeric_limits<double>::infinity()};
  for (int i = 0; i < 100000; ++i) probes.push_back(dist(rng));
  for (double g : probes)
    if (std::bit_cast<std::uint64_t>(ste_backward(g)) != std::bit_cast<std::uint64_t>(g)) ++ste_bad;
  double tanh_err = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) tanh_err = std::max(tanh_err, testing::tanh_path_check(seed).rel_error);
  const bool ok = flp < 1e-4 && ste_bad == 0 && tanh_err < 1e-5;
  report("C7", ok, "gradient checks",
         fmt("FLP finite-difference rel. error %.2e (< 1e-4), STE mismatches %lld, tanh path rel. error %.2e (< 1e-5) "
             "(%.1fs)",
             flp, (long long)ste_bad, tanh_err, t.seconds()));
}

void feature_pipeline() {
  Timer t;
  const auto clip = synth_clip(3, 1, 4);
  const auto base = lfbe64(clip);
  bool shift_ok = true;
  for (int k = 1; k <= 3; ++k) {
    AudioClip d;
    d.samples.assign(static_cast<std::size_t>(160 * k), 0);
    d.samples.insert(d.samples.end(), clip.samples.begin(), clip.samples.end());
    const auto f = lfbe64(d);
    if (f.frames != base.frames + k) shift_ok = false;
    for (int tt = 0; tt < base.frames && shift_ok; ++tt)
      for (int m = 0; m < kMelBins; ++m)
        if (f.at(tt + k, m) != base.at(tt, m)) shift_ok = false;
  }
  bool window_ok = true;
  for (int frames : {1, 50, 75, 76, 77, 98, 200}) {
    FeatureMatrix fm;
    fm.frames = frames;
    fm.values.assign(static_cast<std::size_t>(frames) * kMelBins, 1.0f);
    const auto w = window76(fm);
    if (w.frames != 76 || w.values.size() != 76u * kMelBins) window_ok = false;
  }
  if (window76(base).frames != 76) window_ok = false;
  const bool ok = clip.samples.size() == 16000 && base.frames == 98 && shift_ok && window_ok;
  report("C8", ok, "feature pipeline",
         fmt("1 s clip -> %d frames (98), shift covariance %s, window76 shape %s (%.1fs)", base.frames,
             shift_ok ? "exact" : "broken", window_ok ? "always (76, 64)" : "wrong", t.seconds()));
}

// ---------------------------------------------------------------------------

struct Trained {
  TrainedModel model;
  TrainSummary summary;
  double accuracy = 0.0;
};

Trained train_one(const DatasetSplits& data, QatMethod method, int bits) {
  TrainConfig c;
  c.total_steps = 5000;
  c.seed = 1;
  c.fq.enabled = method != QatMethod::None;
  c.fq.method = method;
  c.fq.lambda_reg = FakeQuantConfig::default_lambda(method);
  c.fq.b_w = BitWidth(bits);
  c.fq.b_a = BitWidth(bits);
  Trained t;
  t.model = train(ModelSpec::kws(data.train.num_classes), data.train, data.stats, c, &t.summary);
  t.accuracy = evaluate_accuracy(t.model, data.test);
  std::cout << "  trained " << to_string(method) << " " << bits << "-bit: accuracy " << t.accuracy << ", "
            << t.summary.seconds << " s" << std::endl;
  return t;
}

void training_parity(const Trained& flp, const Trained& sqwd, const Trained& acr) {
  const double worst = std::max({flp.summary.seconds, sqwd.summary.seconds, acr.summary.seconds});
  const bool ok = flp.accuracy >= 0.95 && sqwd.accuracy >= flp.accuracy - 0.02 && acr.accuracy >= flp.accuracy - 0.02 &&
                  worst < 600.0;
  report("C6", ok, "desk-scale training parity (5k steps)",
         fmt("FLP %.2f%% (>= 95%%), SQWD 8-bit %.2f%%, ACR 8-bit %.2f%% (>= FLP - 2 points); slowest run %.0fs (< 600s)",
             100 * flp.accuracy, 100 * sqwd.accuracy, 100 * acr.accuracy, worst));
}

void acr_regularizer_drop(const Trained& acr) {
  const double drop = 1.0 - acr.summary.final_reg_loss / acr.summary.initial_reg_loss;
  report("INV", drop >= 0.5, "ACR regularizer falls by at least 50% over training",
         fmt("%.4g -> %.4g (%.1f%% drop)", acr.summary.initial_reg_loss, acr.summary.final_reg_loss, 100 * drop));
}

std::vector<FeatureMatrix> random_inputs(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<FeatureMatrix> out(static_cast<std::size_t>(n));
  for (auto& f : out) {
    f.frames = kWindowFrames;
    f.values.resize(static_cast<std::size_t>(kWindowFrames) * kMelBins);
    for (auto& v : f.values) v = static_cast<float>(dist(rng));
  }
  return out;
}

void bit_exactness(const DatasetSplits& data, const Trained& sqwd, const Trained& acr) {
  Timer t;
  const AccumulatorConfig wide{32, 48, std::nullopt};
  const auto inputs = random_inputs(1000, 17);
  std::int64_t mismatches = 0;
  double posterior = 0.0;
  bool test_acc_equal = true;
  std::string first;
  for (const auto* tm : {&acr.model, &sqwd.model}) {
    const auto fx = export_model(*tm);
    const auto rep = verify_against_reference(*tm, fx, inputs, wide);
    mismatches += rep.mismatches;
    posterior = std::max(posterior, rep.max_posterior_diff);
    if (!rep.bit_exact && first.empty())
      first = fmt(", first divergence input %d layer %d (reference %lld, engine %lld)", rep.first_divergent_input,
                  rep.first_divergent_layer, (long long)rep.first_reference_code, (long long)rep.first_engine_code);
    const double integer_acc = accuracy_of(predict_fxp(fx, data.test, wide), data.test.labels);
    if (integer_acc != evaluate_accuracy(*tm, data.test)) test_acc_equal = false;
  }
  const double secs = t.seconds();
  report("C1", mismatches == 0 && secs < 120.0 && test_acc_equal,
         "integer inference (acc 32 bits) matches the fake-quant pass, 8-bit ACR and SQWD models, 1000 random inputs each",
         fmt("%lld mismatching inputs, max posterior difference %.2e, test accuracy identical: %s%s (%.1fs, < 120s)",
             (long long)mismatches, posterior, test_acc_equal ? "yes" : "no", first.c_str(), secs));
}

struct SweepResult {
  std::string totals;
  bool monotone = true;
  std::int64_t first = 0, last = 0;
};

SweepResult cadence_sweep(const FxpModel& fx, const DatasetSplits& data, int acc_bits) {
  const auto reps = profile_saturations(fx, data.test.features, {std::nullopt, 512, 256, 128, 64, 1}, acc_bits, 32);
  std::cout << "  accumulator " << acc_bits << " bits\n" << saturation_table(reps);
  SweepResult r;
  std::ostringstream totals;
  for (std::size_t i = 0; i < reps.size(); ++i) {
    totals << (i ? "/" : "") << reps[i].total_corrupted();
    if (i && reps[i].total_corrupted() > reps[i - 1].total_corrupted()) r.monotone = false;
  }
  r.totals = totals.str();
  r.first = reps.front().total_corrupted();
  r.last = reps.back().total_corrupted();
  return r;
}

// The 16-bit sweep is the stated check. A trained 6-bit model can have
// enough headroom that it never saturates at 16 bits, so the same sweep is
// repeated at 13 bits, where it must start above zero.
void saturation_trend(const DatasetSplits& data, const Trained& six) {
  Timer t;
  const auto fx = export_model(six.model);
  const auto a = cadence_sweep(fx, data, 16);
  const auto b = cadence_sweep(fx, data, 13);
  const double secs = t.seconds();
  const bool ok = a.monotone && a.last == 0 && b.monotone && b.last == 0 && b.first > 0 && secs < 300.0;
  report("C3", ok, "6-bit model, corrupted activations over cadences None/512/256/128/64/1",
         fmt("16-bit accumulator %s, 13-bit accumulator %s on %zu test clips; non-increasing: %s, zero at cadence 1: %s "
             "(%.1fs, < 300s)",
             a.totals.c_str(), b.totals.c_str(), data.test.size(), a.monotone && b.monotone ? "yes" : "no",
             a.last == 0 && b.last == 0 ? "yes" : "no", secs));
}

void normalization_cost(const DatasetSplits& data, const Trained& flp, const Trained& acr) {
  Timer t;
  const AccumulatorConfig cfg{32, 48, std::nullopt};
  const auto qat = export_model(acr.model);
  std::vector<FeatureMatrix> calib(data.train.features.begin(), data.train.features.begin() + 256);
  const auto ptq = export_ptq(flp.model, calib);
  const auto n = static_cast<std::int64_t>(data.test.size());
  const auto pq = instruction_profile(qat, n, cfg);
  const auto pp = instruction_profile(ptq, n, cfg);
  std::cout << instruction_table({{"qat_uniform 8-bit", pq}, {"ptq_per_layer 16-bit", pp}});
  const double share = pp.normalization_share();
  report("C5", pq.normalization_ops == 0 && pp.normalization_ops > 0 && share >= 0.02 && share <= 0.15,
         "normalization eliminated by a common q-format",
         fmt("QAT normalization ops %lld, PTQ normalization ops %lld at %.1f%% of modeled cycles (2-15%%) (%.1fs)",
             (long long)pq.normalization_ops, (long long)pp.normalization_ops, 100 * share, t.seconds()));
}

}  // namespace

int main() {
  try {
    quantizer_properties();
    two_mac_bound();
    gradient_checks();
    feature_pipeline();

    Timer t;
    const auto data = synthetic_splits(7);
    std::cout << "  synthetic data: " << data.train.size() << " train / " << data.test.size() << " test clips ("
              << t.seconds() << " s)" << std::endl;
    const auto flp = train_one(data, QatMethod::None, 8);
    const auto sqwd = train_one(data, QatMethod::SQWD, 8);
    const auto acr = train_one(data, QatMethod::ACR, 8);
    training_parity(flp, sqwd, acr);
    acr_regularizer_drop(acr);
    bit_exactness(data, sqwd, acr);
    normalization_cost(data, flp, acr);
    const auto six = train_one(data, QatMethod::ACR, 6);
    saturation_trend(data, six);
  } catch (const Error& e) {
    std::cout << "[FAIL] acceptance run aborted: " << e.what() << std::endl;
    ++failures;
  }
  std::cout << "[SKIP] C9 speech-commands accuracy grid: full-scale reproduction, documented in README, not run in CI"
            << std::endl;
  std::cout << (failures ? "acceptance: FAILED (" + std::to_string(failures) + ")" : std::string("acceptance: all passed"))
            << std::endl;
  return failures ? 1 : 0;
}
