#pragma once

// Desk-scale training loop, evaluation and DET metrics.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fxqat/error.hpp"
#include "fxqat/features.hpp"
#include "fxqat/fxp_engine.hpp"
#include "fxqat/nn_graph.hpp"
#include "fxqat/qat.hpp"

namespace fxqat {

struct TrainConfig {
  std::int64_t total_steps = 5000;
  int batch_size = 32;
  double peak_lr = 1e-3;
  double final_lr = 1e-5;
  double warmup_fraction = 0.10;
  FakeQuantConfig fq;
  std::uint64_t seed = 0;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double bn_momentum = 0.9;       // running = momentum * running + (1 - momentum) * batch

  std::int64_t log_every = 100;
  std::ostream* log = nullptr;    // JSON lines
  const LabeledFeatures* eval_set = nullptr;
  std::int64_t eval_every = 0;    // 0: only at the end
  std::int64_t checkpoint_every = 0;
  std::string checkpoint_dir;

  void validate() const {
    require(total_steps >= 1, ErrorCode::ConfigError, "total_steps must be >= 1");
    require(batch_size >= 1, ErrorCode::ConfigError, "batch_size must be >= 1");
    require(warmup_fraction > 0.0 && warmup_fraction < 1.0, ErrorCode::ConfigError,
            "warmup_fraction must be in (0, 1)");
    require(peak_lr > 0.0 && final_lr >= 0.0 && final_lr <= peak_lr, ErrorCode::ConfigError,
            "need 0 <= final_lr <= peak_lr and peak_lr > 0");
    require(bn_momentum >= 0.0 && bn_momentum < 1.0, ErrorCode::ConfigError, "bn_momentum must be in [0, 1)");
    require(checkpoint_every == 0 || !checkpoint_dir.empty(), ErrorCode::ConfigError,
            "checkpoint_every needs a checkpoint_dir");
    fq.validate();
  }
};

// Linear warmup 0 -> peak over the first warmup_fraction of the steps, then
// linear decay to final_lr at total_steps.
inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    fail(ErrorCode::InvalidStep, "step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) + "]");
  const double t = static_cast<double>(step);
  const double total = static_cast<double>(cfg.total_steps);
  const double warm = cfg.warmup_fraction * total;
  if (t <= warm) return cfg.peak_lr * t / warm;
  return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * (total - t) / (total - warm);
}

namespace detail {

struct AdamState {
  std::vector<double> m, v;
};

inline void adam_update(std::vector<float>& param, const std::vector<double>& grad, AdamState& s, double lr,
                        const TrainConfig& cfg, std::int64_t t) {
  if (s.m.empty()) {
    s.m.assign(param.size(), 0.0);
    s.v.assign(param.size(), 0.0);
  }
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    s.m[i] = cfg.adam_beta1 * s.m[i] + (1.0 - cfg.adam_beta1) * grad[i];
    s.v[i] = cfg.adam_beta2 * s.v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
    const double step = lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + cfg.adam_eps);
    param[i] = static_cast<float>(param[i] - step);
  }
}

// Portable Fisher-Yates on raw 64-bit draws.
inline void shuffle_indices(std::vector<std::size_t>& idx, std::mt19937_64& gen) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(gen() % i);
    std::swap(idx[i - 1], idx[j]);
  }
}

inline void update_running_stats(TrainedModel& m, const BatchStats& s, double momentum) {
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    auto& bn = m.blocks[l].bn;
    if (bn.empty() || s.mean[l].empty()) continue;
    for (std::size_t c = 0; c < bn.gamma.size(); ++c) {
      bn.running_mean[c] = static_cast<float>(momentum * bn.running_mean[c] + (1.0 - momentum) * s.mean[l][c]);
      bn.running_var[c] = static_cast<float>(momentum * bn.running_var[c] + (1.0 - momentum) * s.var[l][c]);
    }
  }
}

}  // namespace detail

struct TrainSummary {
  std::int64_t steps = 0;
  double final_ce_loss = 0.0;
  double initial_reg_loss = 0.0;
  double final_reg_loss = 0.0;
  double seconds = 0.0;
};

// Top-1 accuracy of the evaluation pass; defined with the other evaluation
// helpers below.
inline double evaluate_accuracy(const TrainedModel& m, const LabeledFeatures& data, int batch = 64);

inline TrainedModel train(const ModelSpec& spec, const LabeledFeatures& data, const FeatureStats& stats,
                          const TrainConfig& cfg, TrainSummary* summary = nullptr) {
  cfg.validate();
  spec.validate();
  require(!data.features.empty(), ErrorCode::InvalidInput, "training set is empty");
  require(data.num_classes == spec.num_classes, ErrorCode::ShapeError, "dataset and model disagree on class count");
  require(stats.split == "train", ErrorCode::InvalidInput, "training requires training-split feature statistics");
  const auto t0 = std::chrono::steady_clock::now();

  TrainedModel model = init_model(spec, cfg.fq, cfg.seed);
  model.stats = stats;
  Network<float> net(model);

  std::mt19937_64 gen(detail::mix_seed(cfg.seed, 0x62617463ull));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  std::vector<const FeatureMatrix*> batch_ptrs;
  std::vector<int> batch_labels;
  auto next_batch = [&] {
    batch_ptrs.clear();
    batch_labels.clear();
    for (int i = 0; i < cfg.batch_size; ++i) {
      if (cursor == order.size()) {
        detail::shuffle_indices(order, gen);
        cursor = 0;
      }
      const std::size_t k = order[cursor++];
      batch_ptrs.push_back(&data.features[k]);
      batch_labels.push_back(data.labels[k]);
    }
    return pack_batch<float>(batch_ptrs, spec);
  };

  std::vector<detail::AdamState> adam_w(spec.blocks.size()), adam_b(spec.blocks.size()),
      adam_g(spec.blocks.size()), adam_beta(spec.blocks.size());
  TrainSummary sum;
  sum.initial_reg_loss = regularizer(model, net.effective(), nullptr);

  for (std::int64_t step = 0; step < cfg.total_steps; ++step) {
    const auto x = next_batch();
    const auto& logits = net.forward(x, Pass::Train);
    Network<float>::Mat dlogits;
    const double ce = cross_entropy(logits, batch_labels, &dlogits);
    Gradients g = net.backward(dlogits);
    const double reg = regularizer(model, net.effective(), &g);
    const double loss = ce + reg;
    if (!std::isfinite(loss))
      fail(ErrorCode::TrainingDiverged, "loss became non-finite at step " + std::to_string(step) +
                                            " (ce=" + std::to_string(ce) + ", reg=" + std::to_string(reg) + ")");
    const double lr = lr_at(step + 1, cfg);
    for (std::size_t l = 0; l < spec.blocks.size(); ++l) {
      auto& p = model.blocks[l];
      const auto& bg = g.blocks[l];
      detail::adam_update(p.weights, bg.weights, adam_w[l], lr, cfg, step + 1);
      detail::adam_update(p.bias, bg.bias, adam_b[l], lr, cfg, step + 1);
      if (!p.bn.empty()) {
        detail::adam_update(p.bn.gamma, bg.gamma, adam_g[l], lr, cfg, step + 1);
        detail::adam_update(p.bn.beta, bg.beta, adam_beta[l], lr, cfg, step + 1);
      }
    }
    detail::update_running_stats(model, net.batch_stats(), cfg.bn_momentum);
    net.refresh();

    const std::int64_t done = step + 1;
    sum.final_ce_loss = ce;
    const bool last = done == cfg.total_steps;
    if (cfg.log && (step == 0 || last || (cfg.log_every > 0 && done % cfg.log_every == 0))) {
      json rec = {{"step", done}, {"lr", lr}, {"ce_loss", ce}, {"reg_loss", reg}};
      if (cfg.eval_set && (last || (cfg.eval_every > 0 && done % cfg.eval_every == 0)))
        rec["eval_accuracy"] = evaluate_accuracy(model, *cfg.eval_set);
      *cfg.log << rec.dump() << "\n";
      cfg.log->flush();
    }
    if (cfg.checkpoint_every > 0 && (done % cfg.checkpoint_every == 0 || last)) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      save_checkpoint((std::filesystem::path(cfg.checkpoint_dir) / ("step_" + std::to_string(done) + ".fxck")).string(),
                      model, done);
    }
  }
  sum.steps = cfg.total_steps;
  sum.final_reg_loss = regularizer(model, effective_blocks(model), nullptr);
  sum.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (summary) *summary = sum;
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation

// Posteriors of the floating-point (fake-quant when enabled) evaluation pass.
inline std::vector<std::vector<double>> predict(const TrainedModel& m, const LabeledFeatures& data, int batch = 64) {
  Network<double> net(m);
  std::vector<std::vector<double>> out;
  out.reserve(data.size());
  for (std::size_t s = 0; s < data.size(); s += static_cast<std::size_t>(batch)) {
    const std::size_t e = std::min(data.size(), s + static_cast<std::size_t>(batch));
    std::vector<const FeatureMatrix*> ptrs;
    for (std::size_t i = s; i < e; ++i) ptrs.push_back(&data.features[i]);
    const auto p = softmax_rows(net.forward(pack_batch<double>(ptrs, m.spec), Pass::Eval));
    for (Eigen::Index r = 0; r < p.rows(); ++r) out.emplace_back(p.row(r).data(), p.row(r).data() + p.cols());
  }
  return out;
}

inline std::vector<std::vector<double>> predict_fxp(const FxpModel& m, const LabeledFeatures& data,
                                                    const AccumulatorConfig& cfg) {
  std::vector<std::vector<double>> out;
  out.reserve(data.size());
  for (const auto& f : data.features) out.push_back(infer(m, f, cfg).posteriors);
  return out;
}

inline int argmax(const std::vector<double>& p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

inline double accuracy_of(const std::vector<std::vector<double>>& posteriors, std::span<const int> labels) {
  require(posteriors.size() == labels.size() && !labels.empty(), ErrorCode::InvalidInput,
          "accuracy: posteriors and labels differ in length");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += argmax(posteriors[i]) == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline double evaluate_accuracy(const TrainedModel& m, const LabeledFeatures& data, int batch) {
  return accuracy_of(predict(m, data, batch), data.labels);
}

struct DetPoint {
  double threshold = 0.0;
  double frr = 0.0;
  double fdr = 0.0;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
  std::vector<DetPoint> det;
  double operating_frr = 0.0;  // at the 0.5 detection threshold
  double operating_fdr = 0.0;
  std::optional<double> relative_fdr;
};

// Smallest FDR among curve points whose FRR does not exceed `frr`.
inline double fdr_at_frr(const std::vector<DetPoint>& curve, double frr) {
  double best = 1.0;
  for (const auto& p : curve)
    if (p.frr <= frr + 1e-12) best = std::min(best, p.fdr);
  return best;
}

// Detection view: class 0 is the non-keyword class; every other class is a
// keyword. The detection score is 1 - P(class 0). Sweeping the acceptance
// threshold over every distinct score yields the (FRR, FDR) curve.
inline EvalResult det_metrics(const std::vector<std::vector<double>>& posteriors, std::span<const int> labels,
                              const EvalResult* baseline = nullptr, double operating_threshold = 0.5) {
  require(posteriors.size() == labels.size() && !labels.empty(), ErrorCode::MetricError,
          "det_metrics: posteriors and labels differ in length");
  const std::size_t n = labels.size();
  const int classes = static_cast<int>(posteriors.front().size());
  EvalResult r;
  r.accuracy = accuracy_of(posteriors, labels);
  r.confusion.assign(static_cast<std::size_t>(classes), std::vector<std::int64_t>(static_cast<std::size_t>(classes), 0));
  std::vector<std::pair<double, bool>> scored;  // (score, is keyword)
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n; ++i) {
    require(labels[i] >= 0 && labels[i] < classes, ErrorCode::MetricError, "det_metrics: label out of range");
    ++r.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(argmax(posteriors[i]))];
    const bool kw = labels[i] != 0;
    positives += kw;
    scored.emplace_back(1.0 - posteriors[i][0], kw);
  }
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0)
    fail(ErrorCode::MetricError, "det_metrics: labels contain only one of keyword / non-keyword");

  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  // Threshold above every score: nothing accepted.
  r.det.push_back({std::numeric_limits<double>::infinity(), 1.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    (scored[i].second ? tp : fp) += 1;
    if (i + 1 < scored.size() && scored[i + 1].first == scored[i].first) continue;
    const double frr = static_cast<double>(positives - tp) / static_cast<double>(positives);
    const double fdr = static_cast<double>(fp) / static_cast<double>(tp + fp);
    r.det.push_back({scored[i].first, frr, fdr});
  }
  std::size_t op_tp = 0, op_fp = 0;
  for (const auto& [s, kw] : scored)
    if (s >= operating_threshold) (kw ? op_tp : op_fp) += 1;
  r.operating_frr = static_cast<double>(positives - op_tp) / static_cast<double>(positives);
  r.operating_fdr = op_tp + op_fp > 0 ? static_cast<double>(op_fp) / static_cast<double>(op_tp + op_fp) : 0.0;
  if (baseline) {
    const double frr = baseline->operating_frr;
    const double mine = fdr_at_frr(r.det, frr);
    const double base = fdr_at_frr(baseline->det, frr);
    if (base > 0.0) r.relative_fdr = mine / base;
    else r.relative_fdr = mine == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  }
  return r;
}

inline json to_json(const EvalResult& r) {
  json det = json::array();
  for (const auto& p : r.det)
    det.push_back({{"threshold", std::isfinite(p.threshold) ? json(p.threshold) : json("inf")},
                   {"frr", p.frr},
                   {"fdr", p.fdr}});
  json j = {{"schema", "fxqat.eval/1"},
            {"accuracy", r.accuracy},
            {"confusion", r.confusion},
            {"operating_frr", r.operating_frr},
            {"operating_fdr", r.operating_fdr},
            {"det", det}};
  if (r.relative_fdr) j["relative_fdr"] = *r.relative_fdr;
  return j;
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetSplits {
  LabeledFeatures train, test;  // standardized with train statistics
  FeatureStats stats;
  std::vector<std::string> class_names;
};

// Unstandardized features of both splits.
struct RawSplits {
  LabeledFeatures train, test;
  std::vector<std::string> class_names;
};

struct DataOptions {
  int synth_classes = 4;
  int train_per_class = 400;
  int test_per_class = 100;
};

// Seeded synthetic keyword set; train and test clips come from disjoint
// seed streams.
inline RawSplits synthetic_raw(std::uint64_t seed, const DataOptions& opt = {}) {
  const int n = opt.synth_classes;
  RawSplits r;
  r.train = extract_features(synth_dataset(detail::mix_seed(seed, 0x747261696eull), opt.train_per_class, n), n);
  r.test = extract_features(synth_dataset(detail::mix_seed(seed, 0x74657374ull), opt.test_per_class, n), n);
  r.class_names.push_back("noise");
  for (int k = 1; k < n; ++k) r.class_names.push_back((k % 2 ? "rise" : "fall") + std::to_string(k));
  return r;
}

// "synth" or "gsc:<dir>"; validation clips of the speech set are not used.
inline RawSplits load_raw(const std::string& source, std::uint64_t seed, const DataOptions& opt = {}) {
  if (source == "synth") return synthetic_raw(seed, opt);
  if (source.rfind("gsc:", 0) == 0) {
    const auto g = load_gsc(source.substr(4));
    const int n = static_cast<int>(g.labels.size());
    return RawSplits{extract_features(g.train, n), extract_features(g.test, n), g.labels};
  }
  fail(ErrorCode::ConfigError, "unknown data source '" + source + "' (expected synth or gsc:<dir>)");
}

inline DatasetSplits standardize_splits(RawSplits raw) {
  DatasetSplits d;
  d.stats = compute_stats(raw.train.features, "train");
  d.train = standardize_all(raw.train, d.stats);
  d.test = standardize_all(raw.test, d.stats);
  d.class_names = std::move(raw.class_names);
  return d;
}

inline DatasetSplits synthetic_splits(std::uint64_t seed, const DataOptions& opt = {}) {
  return standardize_splits(synthetic_raw(seed, opt));
}

inline DatasetSplits load_dataset(const std::string& source, std::uint64_t seed, const DataOptions& opt = {}) {
  return standardize_splits(load_raw(source, seed, opt));
}

// ---------------------------------------------------------------------------
// Precision grid

struct GridResult {
  std::vector<int> weight_bits, act_bits;
  std::string method;
  double flp_accuracy = 0.0;
  std::vector<std::vector<double>> accuracy;  // [weight][activation]
};

// One FLP reference and one QAT training per (weight, activation) cell, all
// from the same seed.
inline GridResult eval_grid(const DatasetSplits& data, const std::vector<int>& weight_bits,
                            const std::vector<int>& act_bits, QatMethod method, const TrainConfig& base,
                            std::ostream* progress = nullptr) {
  GridResult g;
  g.weight_bits = weight_bits;
  g.act_bits = act_bits;
  g.method = to_string(method);
  const ModelSpec spec = ModelSpec::kws(data.train.num_classes);
  TrainConfig flp = base;
  flp.fq.enabled = false;
  flp.fq.method = QatMethod::None;
  flp.fq.lambda_reg = 0.0;
  g.flp_accuracy = evaluate_accuracy(train(spec, data.train, data.stats, flp), data.test);
  if (progress) *progress << "flp accuracy " << g.flp_accuracy << "\n";
  for (int wb : weight_bits) {
    std::vector<double> row;
    for (int ab : act_bits) {
      TrainConfig c = base;
      c.fq.enabled = true;
      c.fq.method = method;
      c.fq.lambda_reg = FakeQuantConfig::default_lambda(method);
      c.fq.b_w = BitWidth(wb);
      c.fq.b_a = BitWidth(ab);
      row.push_back(evaluate_accuracy(train(spec, data.train, data.stats, c), data.test));
      if (progress) *progress << "w" << wb << " a" << ab << " accuracy " << row.back() << "\n";
    }
    g.accuracy.push_back(std::move(row));
  }
  return g;
}

inline json to_json(const GridResult& g) {
  return {{"schema", "fxqat.grid/1"},
          {"method", g.method},
          {"weight_bits", g.weight_bits},
          {"act_bits", g.act_bits},
          {"flp_accuracy", g.flp_accuracy},
          {"accuracy", g.accuracy}};
}

// Rows are weight precisions, columns activation precisions, accuracy in %.
inline std::string grid_table(const GridResult& g) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "method " << g.method << ", FLP accuracy " << 100.0 * g.flp_accuracy << "%\n";
  os << std::setw(6) << "w \\ a";
  for (int a : g.act_bits) os << std::setw(8) << a;
  os << "\n";
  for (std::size_t i = 0; i < g.weight_bits.size(); ++i) {
    os << std::setw(6) << g.weight_bits[i];
    for (double v : g.accuracy[i]) os << std::setw(8) << 100.0 * v;
    os << "\n";
  }
  return os.str();
}

}  // namespace fxqat
