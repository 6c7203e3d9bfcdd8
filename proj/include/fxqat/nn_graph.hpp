#pragma once

// Fully convolutional keyword-spotting network: floating-point forward and
// backward passes, with fake-quantization nodes when the model's
// FakeQuantConfig is enabled.
//
// Two parameterizations share one graph:
//
//  * FLP (fq disabled): conv -> batch norm (batch statistics in training,
//    running statistics in evaluation) -> ReLU.
//  * QAT (fq enabled): batch norm is folded into the convolution using the
//    running statistics, the folded weight tanh(raw) * gamma / sigma is
//    clamped to [-1, 1] and fake-quantized on the b_w unit grid, the folded
//    bias is snapped to the accumulator grid, and the ReLU is the clipped,
//    fake-quantized activation on [0, c_a]. The running statistics are
//    updated from batch statistics by the trainer but carry no gradient.
//    This is exactly the arithmetic the integer engine executes, so an
//    exported model reproduces the evaluation pass code for code.
//
// The last block is the classifier: a plain convolution producing logits.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fxqat/container.hpp"
#include "fxqat/error.hpp"
#include "fxqat/features.hpp"
#include "fxqat/fxp_core.hpp"
#include "fxqat/qat.hpp"

namespace fxqat {

struct ConvSpec {
  int kh = 1, kw = 1;
  int in_ch = 1, out_ch = 1;
  int sh = 1, sw = 1;
  bool bn_relu = true;

  int macs_per_activation() const { return kh * kw * in_ch; }
  int fan_in() const { return kh * kw * in_ch; }
};

struct Shape3 {
  int h = 0, w = 0, c = 0;
  int size() const { return h * w * c; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

struct ModelSpec {
  std::vector<ConvSpec> blocks;
  int num_classes = 0;
  int in_h = kWindowFrames;
  int in_w = kMelBins;

  // Five-block topology, valid padding. Strides give the classifier a
  // receptive field spanning the whole 76 x 64 input:
  // (76, 64) -> (10, 16) -> (7, 4) -> (1, 1).
  static ModelSpec kws(int num_classes = 35) {
    ModelSpec s;
    s.num_classes = num_classes;
    s.blocks = {
        {3, 4, 1, 32, 8, 4, true},
        {4, 4, 32, 40, 1, 4, true},
        {7, 4, 40, 128, 1, 1, true},
        {1, 1, 128, 160, 1, 1, true},
        {1, 1, 160, num_classes, 1, 1, false},
    };
    return s;
  }

  // Output shape of every block; throws ShapeError on an inconsistent spec.
  std::vector<Shape3> output_shapes() const {
    require(!blocks.empty(), ErrorCode::ShapeError, "model has no blocks");
    require(num_classes >= 2, ErrorCode::ShapeError, "model needs at least two classes");
    std::vector<Shape3> out;
    Shape3 cur{in_h, in_w, 1};
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      require(b.kh >= 1 && b.kw >= 1 && b.in_ch >= 1 && b.out_ch >= 1 && b.sh >= 1 && b.sw >= 1,
              ErrorCode::ShapeError, "block " + std::to_string(i) + " has a non-positive dimension");
      require(b.in_ch == cur.c, ErrorCode::ShapeError,
              "block " + std::to_string(i) + " expects " + std::to_string(b.in_ch) + " input channels, got " +
                  std::to_string(cur.c));
      require(cur.h >= b.kh && cur.w >= b.kw, ErrorCode::ShapeError,
              "block " + std::to_string(i) + " kernel larger than its input");
      cur = Shape3{(cur.h - b.kh) / b.sh + 1, (cur.w - b.kw) / b.sw + 1, b.out_ch};
      out.push_back(cur);
    }
    const auto& last = blocks.back();
    require(!last.bn_relu, ErrorCode::ShapeError, "the last block must be the linear classifier");
    for (std::size_t i = 0; i + 1 < blocks.size(); ++i)
      require(blocks[i].bn_relu, ErrorCode::ShapeError, "only the last block may omit BN/ReLU");
    require(last.out_ch == num_classes, ErrorCode::ShapeError, "classifier width must equal num_classes");
    require(out.back().h == 1 && out.back().w == 1, ErrorCode::ShapeError, "classifier output must be 1x1");
    return out;
  }

  void validate() const { (void)output_shapes(); }

  // Learnable parameters: conv weights, conv biases, BN gamma and beta.
  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks) {
      n += static_cast<std::size_t>(b.fan_in()) * b.out_ch + b.out_ch;
      if (b.bn_relu) n += 2 * static_cast<std::size_t>(b.out_ch);
    }
    return n;
  }

  json to_json() const {
    json bl = json::array();
    for (const auto& b : blocks)
      bl.push_back({{"kernel", {b.kh, b.kw}}, {"in_channels", b.in_ch}, {"out_channels", b.out_ch},
                    {"stride", {b.sh, b.sw}}, {"bn_relu", b.bn_relu}});
    return {{"blocks", bl}, {"num_classes", num_classes}, {"input_shape", {in_h, in_w, 1}}};
  }

  static ModelSpec from_json(const json& j) {
    ModelSpec s;
    s.num_classes = j.at("num_classes").get<int>();
    const auto shape = j.at("input_shape").get<std::vector<int>>();
    require(shape.size() == 3 && shape[2] == 1, ErrorCode::FormatError, "input_shape must be (h, w, 1)");
    s.in_h = shape[0];
    s.in_w = shape[1];
    for (const auto& b : j.at("blocks")) {
      ConvSpec c;
      const auto k = b.at("kernel").get<std::vector<int>>();
      const auto st = b.at("stride").get<std::vector<int>>();
      require(k.size() == 2 && st.size() == 2, ErrorCode::FormatError, "kernel/stride must have two entries");
      c.kh = k[0];
      c.kw = k[1];
      c.sh = st[0];
      c.sw = st[1];
      c.in_ch = b.at("in_channels").get<int>();
      c.out_ch = b.at("out_channels").get<int>();
      c.bn_relu = b.at("bn_relu").get<bool>();
      s.blocks.push_back(c);
    }
    s.validate();
    return s;
  }
};

struct BatchNormParams {
  std::vector<float> gamma, beta, running_mean, running_var;
  double eps = 1e-3;

  bool empty() const { return gamma.empty(); }
};

struct BlockParams {
  std::vector<float> weights;  // fan_in x out_ch, row-major; fan-in index (i * kw + j) * in_ch + c
  std::vector<float> bias;
  BatchNormParams bn;          // empty for the classifier
};

struct TrainedModel {
  ModelSpec spec;
  std::vector<BlockParams> blocks;
  FeatureStats stats;
  FakeQuantConfig fq;
};

inline json fq_to_json(const FakeQuantConfig& fq) {
  return {{"b_w", fq.b_w.bits()},
          {"b_a", fq.b_a.bits()},
          {"b_in", fq.b_in.bits()},
          {"q_in", fq.q_in.frac_bits()},
          {"method", to_string(fq.method)},
          {"lambda_reg", fq.lambda_reg},
          {"c_a", fq.c_a},
          {"enabled", fq.enabled},
          {"feature_rounding", fq.feature_rounding == RoundingConstant::HalfAway ? "half_away" : "sign_inverted"}};
}

inline FakeQuantConfig fq_from_json(const json& j) {
  FakeQuantConfig fq;
  fq.b_w = BitWidth(j.at("b_w").get<int>());
  fq.b_a = BitWidth(j.at("b_a").get<int>());
  fq.b_in = BitWidth(j.at("b_in").get<int>());
  fq.q_in = QFormat(j.at("q_in").get<int>());
  fq.method = parse_qat_method(j.at("method").get<std::string>());
  fq.lambda_reg = j.at("lambda_reg").get<double>();
  fq.c_a = j.at("c_a").get<double>();
  fq.enabled = j.at("enabled").get<bool>();
  fq.feature_rounding = j.value("feature_rounding", std::string("half_away")) == "sign_inverted"
                            ? RoundingConstant::SignInverted
                            : RoundingConstant::HalfAway;
  fq.validate();
  return fq;
}

inline TrainedModel init_model(const ModelSpec& spec, const FakeQuantConfig& fq, std::uint64_t seed) {
  spec.validate();
  fq.validate();
  TrainedModel m;
  m.spec = spec;
  m.fq = fq;
  std::mt19937_64 gen(seed);
  for (const auto& b : spec.blocks) {
    BlockParams p;
    const double sd = std::sqrt(2.0 / b.fan_in());
    p.weights.resize(static_cast<std::size_t>(b.fan_in()) * b.out_ch);
    // Box-Muller on raw mt19937_64 output keeps initialization portable.
    for (std::size_t i = 0; i < p.weights.size(); i += 2) {
      const double u1 = (static_cast<double>(gen() >> 11) + 1.0) * 0x1.0p-53;
      const double u2 = static_cast<double>(gen() >> 11) * 0x1.0p-53;
      const double r = std::sqrt(-2.0 * std::log(u1));
      p.weights[i] = static_cast<float>(sd * r * std::cos(2.0 * std::numbers::pi * u2));
      if (i + 1 < p.weights.size()) p.weights[i + 1] = static_cast<float>(sd * r * std::sin(2.0 * std::numbers::pi * u2));
    }
    p.bias.assign(b.out_ch, 0.0f);
    if (b.bn_relu) {
      p.bn.gamma.assign(b.out_ch, 1.0f);
      p.bn.beta.assign(b.out_ch, 0.0f);
      p.bn.running_mean.assign(b.out_ch, 0.0f);
      p.bn.running_var.assign(b.out_ch, 1.0f);
    }
    m.blocks.push_back(std::move(p));
  }
  return m;
}

struct FoldedConv {
  std::vector<double> weights;  // fan_in x out_ch
  std::vector<double> bias;
};

// w' = w * gamma / sqrt(var + eps) per output channel;
// b' = (b - mean) * gamma / sqrt(var + eps) + beta.
inline FoldedConv fold_batchnorm(std::span<const double> weights, std::span<const double> bias,
                                 const BatchNormParams& bn) {
  const std::size_t out = bias.size();
  require(out > 0 && weights.size() % out == 0, ErrorCode::ShapeError, "fold_batchnorm: weight/bias mismatch");
  require(bn.gamma.size() == out && bn.beta.size() == out && bn.running_mean.size() == out &&
              bn.running_var.size() == out,
          ErrorCode::ShapeError, "fold_batchnorm: BN channel count mismatch");
  FoldedConv f;
  f.weights.resize(weights.size());
  f.bias.resize(out);
  for (std::size_t c = 0; c < out; ++c) {
    const double denom = static_cast<double>(bn.running_var[c]) + bn.eps;
    require(denom > 0.0, ErrorCode::InvalidBN, "fold_batchnorm: var + eps <= 0 on channel " + std::to_string(c));
    const double g = bn.gamma[c] / std::sqrt(denom);
    f.bias[c] = (bias[c] - bn.running_mean[c]) * g + bn.beta[c];
  }
  const std::size_t fan_in = weights.size() / out;
  for (std::size_t k = 0; k < fan_in; ++k)
    for (std::size_t c = 0; c < out; ++c) {
      const double g = bn.gamma[c] / std::sqrt(static_cast<double>(bn.running_var[c]) + bn.eps);
      f.weights[k * out + c] = weights[k * out + c] * g;
    }
  return f;
}

// Fractional bits carried by the real value of a block's input in the QAT
// parameterization: features use q_in, activations on [0, c_a] with b_a
// bits have step c_a / 2^b_a (exact when c_a is a power of two).
inline int qat_input_frac_bits(const FakeQuantConfig& fq, std::size_t block) {
  if (block == 0) return fq.q_in.frac_bits();
  return fq.b_a.bits() - ceil_log2(fq.c_a);
}

// Accumulator q-format of a block: weight fraction bits plus input fraction bits.
inline int qat_acc_frac_bits(const FakeQuantConfig& fq, std::size_t block) {
  return (fq.b_w.bits() - 1) + qat_input_frac_bits(fq, block);
}

inline constexpr std::int64_t kBiasCodeMax = (std::int64_t{1} << 31) - 1;
inline constexpr std::int64_t kBiasCodeMin = -(std::int64_t{1} << 31);

// Effective (double precision) parameters of one block as the forward pass
// uses them.
struct EffectiveBlock {
  std::vector<double> weights;  // fan_in x out_ch
  std::vector<double> bias;
  // FLP only: batch norm applied after the convolution.
  std::vector<double> gamma, beta, mean, var;
  double eps = 1e-3;
  // QAT only: backward bookkeeping.
  std::vector<double> squashed;         // tanh(raw)
  std::vector<double> fold_scale;       // gamma / sigma (1 for the classifier)
  std::vector<double> sigma;            // sqrt(var + eps) (1 for the classifier)
  std::vector<double> clamped;          // folded weight clamped to [-1, 1]
  std::vector<std::uint8_t> in_range;   // |folded| <= 1
  std::vector<std::int64_t> bias_codes; // bias on the accumulator grid
  int acc_frac_bits = 0;
};

inline std::vector<EffectiveBlock> effective_blocks(const TrainedModel& m) {
  std::vector<EffectiveBlock> out;
  out.reserve(m.blocks.size());
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const auto& spec = m.spec.blocks[l];
    const auto& p = m.blocks[l];
    const std::size_t out_ch = static_cast<std::size_t>(spec.out_ch);
    EffectiveBlock e;
    if (!m.fq.enabled) {
      e.weights.assign(p.weights.begin(), p.weights.end());
      e.bias.assign(p.bias.begin(), p.bias.end());
      if (spec.bn_relu) {
        e.gamma.assign(p.bn.gamma.begin(), p.bn.gamma.end());
        e.beta.assign(p.bn.beta.begin(), p.bn.beta.end());
        e.mean.assign(p.bn.running_mean.begin(), p.bn.running_mean.end());
        e.var.assign(p.bn.running_var.begin(), p.bn.running_var.end());
        e.eps = p.bn.eps;
      }
      out.push_back(std::move(e));
      continue;
    }
    e.squashed.resize(p.weights.size());
    for (std::size_t i = 0; i < p.weights.size(); ++i) e.squashed[i] = squash(p.weights[i]);
    std::vector<double> bias(p.bias.begin(), p.bias.end());
    FoldedConv folded;
    e.fold_scale.assign(out_ch, 1.0);
    e.sigma.assign(out_ch, 1.0);
    if (spec.bn_relu) {
      folded = fold_batchnorm(e.squashed, bias, p.bn);
      for (std::size_t c = 0; c < out_ch; ++c) {
        e.sigma[c] = std::sqrt(static_cast<double>(p.bn.running_var[c]) + p.bn.eps);
        e.fold_scale[c] = p.bn.gamma[c] / e.sigma[c];
      }
    } else {
      folded = FoldedConv{e.squashed, bias};
    }
    e.clamped.resize(folded.weights.size());
    e.in_range.resize(folded.weights.size());
    e.weights.resize(folded.weights.size());
    for (std::size_t i = 0; i < folded.weights.size(); ++i) {
      const double w = folded.weights[i];
      e.in_range[i] = std::abs(w) <= 1.0 ? 1 : 0;
      e.clamped[i] = std::clamp(w, -1.0, 1.0);
      e.weights[i] = fake_quant_unit(e.clamped[i], m.fq.b_w);
    }
    e.acc_frac_bits = qat_acc_frac_bits(m.fq, l);
    e.bias.resize(out_ch);
    e.bias_codes.resize(out_ch);
    for (std::size_t c = 0; c < out_ch; ++c) {
      const double scaled = std::ldexp(folded.bias[c], e.acc_frac_bits);
      const double code = std::clamp(round_half_away(scaled), static_cast<double>(kBiasCodeMin),
                                      static_cast<double>(kBiasCodeMax));
      e.bias_codes[c] = static_cast<std::int64_t>(code);
      e.bias[c] = std::ldexp(code, -e.acc_frac_bits);
    }
    out.push_back(std::move(e));
  }
  return out;
}

struct BlockGradients {
  std::vector<double> weights, bias, gamma, beta;
};

struct Gradients {
  std::vector<BlockGradients> blocks;

  static Gradients zeros_like(const TrainedModel& m) {
    Gradients g;
    for (const auto& b : m.blocks) {
      BlockGradients bg;
      bg.weights.assign(b.weights.size(), 0.0);
      bg.bias.assign(b.bias.size(), 0.0);
      bg.gamma.assign(b.bn.gamma.size(), 0.0);
      bg.beta.assign(b.bn.beta.size(), 0.0);
      g.blocks.push_back(std::move(bg));
    }
    return g;
  }
};

enum class Pass { Train, Eval };

// Batch statistics of the pre-normalization conv output, per hidden block.
struct BatchStats {
  std::vector<std::vector<double>> mean, var;
};

template <class Scalar>
class Network {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

  explicit Network(const TrainedModel& m) : model_(&m) {
    shapes_ = m.spec.output_shapes();
    refresh();
  }

  // Recompute effective parameters after the model changed.
  void refresh() {
    eff_ = effective_blocks(*model_);
    const auto& spec = model_->spec;
    weights_.clear();
    biases_.clear();
    squashed_.clear();
    for (std::size_t l = 0; l < eff_.size(); ++l) {
      const auto& b = spec.blocks[l];
      Mat s;
      if (model_->fq.enabled && b.bn_relu) {
        s.resize(b.fan_in(), b.out_ch);
        for (int k = 0; k < b.fan_in(); ++k)
          for (int c = 0; c < b.out_ch; ++c)
            s(k, c) = static_cast<Scalar>(eff_[l].squashed[static_cast<std::size_t>(k) * b.out_ch + c]);
      }
      squashed_.push_back(std::move(s));
      Mat w(b.fan_in(), b.out_ch);
      for (int k = 0; k < b.fan_in(); ++k)
        for (int c = 0; c < b.out_ch; ++c)
          w(k, c) = static_cast<Scalar>(eff_[l].weights[static_cast<std::size_t>(k) * b.out_ch + c]);
      RowVec bias(b.out_ch);
      for (int c = 0; c < b.out_ch; ++c) bias(c) = static_cast<Scalar>(eff_[l].bias[c]);
      weights_.push_back(std::move(w));
      biases_.push_back(std::move(bias));
    }
  }

  const std::vector<EffectiveBlock>& effective() const { return eff_; }
  const std::vector<Shape3>& shapes() const { return shapes_; }

  // input: batch of (in_h x in_w) standardized features, row-major, one row
  // per sample. Returns logits (batch x num_classes).
  const Mat& forward(const Mat& input, Pass pass) {
    const auto& spec = model_->spec;
    const auto& fq = model_->fq;
    require(input.cols() == spec.in_h * spec.in_w, ErrorCode::ShapeError,
            "forward: expected " + std::to_string(spec.in_h * spec.in_w) + " features per sample, got " +
                std::to_string(input.cols()));
    batch_ = static_cast<int>(input.rows());
    pass_ = pass;
    caches_.resize(spec.blocks.size());
    stats_.mean.assign(spec.blocks.size(), {});
    stats_.var.assign(spec.blocks.size(), {});

    // Block input as (batch * h * w) x channels.
    Mat x = Eigen::Map<const Mat>(input.data(), static_cast<Eigen::Index>(batch_) * spec.in_h * spec.in_w, 1);
    if (fq.enabled) {
      x = x.unaryExpr([&](Scalar v) {
        return static_cast<Scalar>(fake_quant_feature(static_cast<double>(v), fq.b_in, fq.q_in, fq.feature_rounding));
      });
    }
    Shape3 in_shape{spec.in_h, spec.in_w, 1};
    for (std::size_t l = 0; l < spec.blocks.size(); ++l) {
      const auto& b = spec.blocks[l];
      auto& c = caches_[l];
      c.in_shape = in_shape;
      c.patches = im2col(x, in_shape, b, shapes_[l]);
      if (fq.enabled && b.bn_relu && pass == Pass::Train) {
        forward_qat_batch_fold(l, c);
        x = c.out;
        in_shape = shapes_[l];
        continue;
      }
      c.z.noalias() = c.patches * weights_[l];
      c.z.rowwise() += biases_[l];
      if (!b.bn_relu) {
        c.out = c.z;
      } else if (!fq.enabled) {
        forward_bn_relu(l, c);
      } else {
        forward_qat_activation(c);
      }
      x = c.out;
      in_shape = shapes_[l];
    }
    logits_ = Eigen::Map<const Mat>(x.data(), batch_, spec.num_classes);
    return logits_;
  }

  const Mat& logits() const { return logits_; }
  const BatchStats& batch_stats() const { return stats_; }

  // Output of block l after its activation, (batch * h * w) x out_ch.
  const Mat& block_output(std::size_t l) const { return caches_.at(l).out; }

  // Gradients of the parameters given dL/dlogits from the last forward.
  Gradients backward(const Mat& dlogits) {
    const auto& spec = model_->spec;
    const auto& fq = model_->fq;
    require(dlogits.rows() == batch_ && dlogits.cols() == spec.num_classes, ErrorCode::ShapeError,
            "backward: gradient shape does not match the last forward pass");
    Gradients g = Gradients::zeros_like(*model_);
    Mat dout = dlogits;
    for (std::size_t li = spec.blocks.size(); li-- > 0;) {
      const auto& b = spec.blocks[li];
      auto& c = caches_[li];
      Mat dz;
      if (fq.enabled && b.bn_relu && pass_ == Pass::Train) {
        backward_qat_batch_fold(li, c, dout, g.blocks[li], li > 0 ? &dout : nullptr);
        continue;
      }
      if (!b.bn_relu) {
        dz = std::move(dout);
      } else if (!fq.enabled) {
        dz = backward_bn_relu(li, c, dout, g.blocks[li]);
      } else {
        dz = dout.cwiseProduct(c.act_mask);
      }
      const Mat dw = c.patches.transpose() * dz;
      const RowVec db = dz.colwise().sum();
      scatter_param_grads(li, dw, db, g.blocks[li]);
      if (li > 0) {
        const Mat dpatches = dz * weights_[li].transpose();
        dout = col2im(dpatches, c.in_shape, b, shapes_[li]);
      }
    }
    return g;
  }

 private:
  struct Cache {
    Shape3 in_shape;
    Mat patches, z, out;
    Mat normalized;          // (z - mu) / sigma, batch-normalized blocks
    RowVec inv_std;
    Mat act_mask;            // dout -> dz mask (ReLU / clip)
    std::vector<std::uint8_t> fold_in_range;  // QAT train: |folded weight| <= 1
  };

  Mat im2col(const Mat& x, const Shape3& in, const ConvSpec& b, const Shape3& out) const {
    const int k = b.fan_in();
    Mat p(static_cast<Eigen::Index>(batch_) * out.h * out.w, k);
    for (int n = 0; n < batch_; ++n)
      for (int oy = 0; oy < out.h; ++oy)
        for (int ox = 0; ox < out.w; ++ox) {
          const Eigen::Index row = (static_cast<Eigen::Index>(n) * out.h + oy) * out.w + ox;
          Scalar* dst = p.data() + row * k;
          for (int i = 0; i < b.kh; ++i)
            for (int j = 0; j < b.kw; ++j) {
              const Eigen::Index src_row =
                  (static_cast<Eigen::Index>(n) * in.h + oy * b.sh + i) * in.w + ox * b.sw + j;
              std::copy_n(x.data() + src_row * in.c, in.c, dst + (i * b.kw + j) * in.c);
            }
        }
    return p;
  }

  Mat col2im(const Mat& dp, const Shape3& in, const ConvSpec& b, const Shape3& out) const {
    Mat dx = Mat::Zero(static_cast<Eigen::Index>(batch_) * in.h * in.w, in.c);
    const int k = b.fan_in();
    for (int n = 0; n < batch_; ++n)
      for (int oy = 0; oy < out.h; ++oy)
        for (int ox = 0; ox < out.w; ++ox) {
          const Eigen::Index row = (static_cast<Eigen::Index>(n) * out.h + oy) * out.w + ox;
          const Scalar* src = dp.data() + row * k;
          for (int i = 0; i < b.kh; ++i)
            for (int j = 0; j < b.kw; ++j) {
              const Eigen::Index dst_row =
                  (static_cast<Eigen::Index>(n) * in.h + oy * b.sh + i) * in.w + ox * b.sw + j;
              Scalar* dst = dx.data() + dst_row * in.c;
              const Scalar* s = src + (i * b.kw + j) * in.c;
              for (int ch = 0; ch < in.c; ++ch) dst[ch] += s[ch];
            }
        }
    return dx;
  }

  void forward_bn_relu(std::size_t l, Cache& c) {
    const auto& e = eff_[l];
    const Eigen::Index rows = c.z.rows();
    const Eigen::Index ch = c.z.cols();
    RowVec mu(ch), var(ch);
    if (pass_ == Pass::Train) {
      mu = c.z.colwise().mean();
      var = (c.z.rowwise() - mu).array().square().colwise().sum() / static_cast<Scalar>(rows);
    } else {
      for (Eigen::Index j = 0; j < ch; ++j) {
        mu(j) = static_cast<Scalar>(e.mean[j]);
        var(j) = static_cast<Scalar>(e.var[j]);
      }
    }
    stats_.mean[l].assign(mu.data(), mu.data() + ch);
    stats_.var[l].assign(var.data(), var.data() + ch);
    c.inv_std = (var.array() + static_cast<Scalar>(e.eps)).rsqrt().matrix();
    c.normalized = (c.z.rowwise() - mu).array().rowwise() * c.inv_std.array();
    RowVec gamma(ch), beta(ch);
    for (Eigen::Index j = 0; j < ch; ++j) {
      gamma(j) = static_cast<Scalar>(e.gamma[j]);
      beta(j) = static_cast<Scalar>(e.beta[j]);
    }
    Mat y = (c.normalized.array().rowwise() * gamma.array()).rowwise() + beta.array();
    c.act_mask = (y.array() > Scalar(0)).template cast<Scalar>();
    c.out = y.cwiseMax(Scalar(0));
  }

  Mat backward_bn_relu(std::size_t l, const Cache& c, const Mat& dout, BlockGradients& g) const {
    const Eigen::Index rows = c.z.rows();
    const Eigen::Index ch = c.z.cols();
    const Mat dy = dout.cwiseProduct(c.act_mask);
    const RowVec dgamma = dy.cwiseProduct(c.normalized).colwise().sum();
    const RowVec dbeta = dy.colwise().sum();
    for (Eigen::Index j = 0; j < ch; ++j) {
      g.gamma[j] += static_cast<double>(dgamma(j));
      g.beta[j] += static_cast<double>(dbeta(j));
    }
    RowVec gamma(ch);
    for (Eigen::Index j = 0; j < ch; ++j) gamma(j) = static_cast<Scalar>(model_->blocks[l].bn.gamma[j]);
    const Mat dn = dy.array().rowwise() * gamma.array();
    if (pass_ == Pass::Eval) return dn.array().rowwise() * c.inv_std.array();
    const Scalar inv_rows = Scalar(1) / static_cast<Scalar>(rows);
    const RowVec mean_dn = dn.colwise().sum() * inv_rows;
    const RowVec mean_dn_n = dn.cwiseProduct(c.normalized).colwise().sum() * inv_rows;
    Mat centered = (dn.rowwise() - mean_dn) - Mat(c.normalized.array().rowwise() * mean_dn_n.array());
    return centered.array().rowwise() * c.inv_std.array();
  }

  // QAT training pass of a batch-normalized block: the conv with tanh
  // weights gives the batch moments, which are folded into the weights and
  // bias before quantization; the quantized conv then feeds the activation
  // quantizer. The evaluation pass folds the running moments instead.
  void forward_qat_batch_fold(std::size_t l, Cache& c) {
    const auto& fq = model_->fq;
    const auto& p = model_->blocks[l];
    const auto& e = eff_[l];
    const Eigen::Index rows = c.patches.rows();
    const Eigen::Index k = squashed_[l].rows();
    const Eigen::Index ch = squashed_[l].cols();
    c.z.noalias() = c.patches * squashed_[l];
    for (Eigen::Index j = 0; j < ch; ++j) c.z.col(j).array() += static_cast<Scalar>(p.bias[j]);
    const RowVec mu = c.z.colwise().mean();
    const RowVec var = (c.z.rowwise() - mu).array().square().colwise().sum() / static_cast<Scalar>(rows);
    stats_.mean[l].assign(mu.data(), mu.data() + ch);
    stats_.var[l].assign(var.data(), var.data() + ch);
    c.inv_std = (var.array() + static_cast<Scalar>(p.bn.eps)).rsqrt().matrix();
    c.normalized = (c.z.rowwise() - mu).array().rowwise() * c.inv_std.array();

    Mat wq(k, ch);
    RowVec bq(ch);
    c.fold_in_range.assign(static_cast<std::size_t>(k * ch), 0);
    std::vector<double> scale(static_cast<std::size_t>(ch));
    for (Eigen::Index j = 0; j < ch; ++j) scale[j] = p.bn.gamma[j] / std::sqrt(stats_.var[l][j] + p.bn.eps);
    for (Eigen::Index i = 0; i < k; ++i)
      for (Eigen::Index j = 0; j < ch; ++j) {
        const double w = e.squashed[static_cast<std::size_t>(i * ch + j)] * scale[j];
        c.fold_in_range[static_cast<std::size_t>(i * ch + j)] = std::abs(w) <= 1.0 ? 1 : 0;
        wq(i, j) = static_cast<Scalar>(fake_quant_unit(std::clamp(w, -1.0, 1.0), fq.b_w));
      }
    for (Eigen::Index j = 0; j < ch; ++j) {
      const double bias = (p.bias[j] - stats_.mean[l][j]) * scale[j] + p.bn.beta[j];
      const double code = std::clamp(round_half_away(std::ldexp(bias, e.acc_frac_bits)),
                                     static_cast<double>(kBiasCodeMin), static_cast<double>(kBiasCodeMax));
      bq(j) = static_cast<Scalar>(std::ldexp(code, -e.acc_frac_bits));
    }
    Mat y = c.patches * wq;
    y.rowwise() += bq;
    c.out.resize(rows, ch);
    c.act_mask.resize(rows, ch);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index j = 0; j < ch; ++j) {
        const double v = static_cast<double>(y(r, j));
        c.out(r, j) = static_cast<Scalar>(fake_quant_activation(v, fq.b_a, fq.c_a));
        c.act_mask(r, j) = static_cast<Scalar>(fake_quant_activation_grad(v, fq.c_a));
      }
  }

  // Straight-through backward of forward_qat_batch_fold: the quantizers are
  // identities, which leaves batch norm over the tanh-weight conv.
  void backward_qat_batch_fold(std::size_t l, const Cache& c, const Mat& dout, BlockGradients& g, Mat* dinput) {
    const auto& b = model_->spec.blocks[l];
    const auto& e = eff_[l];
    const Mat dz = backward_bn_relu(l, c, dout, g);
    const Mat dw = c.patches.transpose() * dz;
    const RowVec db = dz.colwise().sum();
    const std::size_t out = static_cast<std::size_t>(b.out_ch);
    for (int k = 0; k < b.fan_in(); ++k)
      for (int j = 0; j < b.out_ch; ++j) {
        const std::size_t i = static_cast<std::size_t>(k) * out + j;
        if (!c.fold_in_range[i]) continue;
        const double t = e.squashed[i];
        g.weights[i] += ste_backward(static_cast<double>(dw(k, j))) * (1.0 - t * t);
      }
    for (int j = 0; j < b.out_ch; ++j) g.bias[j] += static_cast<double>(db(j));
    if (dinput) *dinput = col2im(dz * squashed_[l].transpose(), c.in_shape, b, shapes_[l]);
  }

  void forward_qat_activation(Cache& c) {
    const auto& fq = model_->fq;
    const Eigen::Index rows = c.z.rows();
    const Eigen::Index ch = c.z.cols();
    const double c_a = fq.c_a;
    c.out.resize(rows, ch);
    c.act_mask.resize(rows, ch);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index j = 0; j < ch; ++j) {
        const double y = static_cast<double>(c.z(r, j));
        c.out(r, j) = static_cast<Scalar>(fake_quant_activation(y, fq.b_a, c_a));
        c.act_mask(r, j) = static_cast<Scalar>(fake_quant_activation_grad(y, c_a));
      }
  }

  void scatter_param_grads(std::size_t l, const Mat& dw, const RowVec& db, BlockGradients& g) const {
    const auto& b = model_->spec.blocks[l];
    const auto& e = eff_[l];
    const std::size_t out = static_cast<std::size_t>(b.out_ch);
    if (!model_->fq.enabled) {
      for (int k = 0; k < b.fan_in(); ++k)
        for (int c = 0; c < b.out_ch; ++c) g.weights[k * out + c] += static_cast<double>(dw(k, c));
      for (int c = 0; c < b.out_ch; ++c) g.bias[c] += static_cast<double>(db(c));
      return;
    }
    // Quantizers are straight-through; the fold and the tanh are not.
    const auto& p = model_->blocks[l];
    std::vector<double> dgamma(out, 0.0);
    for (int k = 0; k < b.fan_in(); ++k)
      for (int c = 0; c < b.out_ch; ++c) {
        const std::size_t i = static_cast<std::size_t>(k) * out + c;
        if (!e.in_range[i]) continue;
        const double d = ste_backward(static_cast<double>(dw(k, c)));
        const double t = e.squashed[i];
        g.weights[i] += d * e.fold_scale[c] * (1.0 - t * t);
        dgamma[c] += d * t / e.sigma[c];
      }
    for (std::size_t c = 0; c < out; ++c) {
      const double d = ste_backward(static_cast<double>(db(static_cast<Eigen::Index>(c))));
      g.bias[c] += d * e.fold_scale[c];
      if (b.bn_relu) {
        g.beta[c] += d;
        dgamma[c] += d * (p.bias[c] - p.bn.running_mean[c]) / e.sigma[c];
        g.gamma[c] += dgamma[c];
      }
    }
  }

  const TrainedModel* model_;
  std::vector<Shape3> shapes_;
  std::vector<EffectiveBlock> eff_;
  std::vector<Mat> weights_;
  std::vector<Mat> squashed_;  // tanh(raw), QAT batch-normalized blocks only
  std::vector<RowVec> biases_;
  std::vector<Cache> caches_;
  BatchStats stats_;
  Mat logits_;
  int batch_ = 0;
  Pass pass_ = Pass::Eval;
};

template <class Scalar>
inline typename Network<Scalar>::Mat pack_batch(std::span<const FeatureMatrix* const> batch, const ModelSpec& spec) {
  typename Network<Scalar>::Mat x(static_cast<Eigen::Index>(batch.size()), spec.in_h * spec.in_w);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto& fm = *batch[n];
    require(fm.frames == spec.in_h && static_cast<int>(fm.values.size()) == spec.in_h * spec.in_w,
            ErrorCode::ShapeError, "feature matrix shape does not match the model input");
    for (int i = 0; i < spec.in_h * spec.in_w; ++i)
      x(static_cast<Eigen::Index>(n), i) = static_cast<Scalar>(fm.values[static_cast<std::size_t>(i)]);
  }
  return x;
}

template <class Mat>
inline Mat softmax_rows(const Mat& logits) {
  Mat p = logits;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const auto mx = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - mx).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (auto& v : p) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : p) v /= sum;
  return p;
}

// Class posteriors for one standardized (in_h x in_w) feature matrix, in
// double precision.
inline std::vector<double> forward(const TrainedModel& model, const FeatureMatrix& features,
                                   Pass pass = Pass::Eval) {
  Network<double> net(model);
  const FeatureMatrix* one[] = {&features};
  const auto& logits = net.forward(pack_batch<double>(one, model.spec), pass);
  std::vector<double> l(logits.data(), logits.data() + logits.size());
  return softmax(l);
}

// Mean cross-entropy and its gradient w.r.t. the logits.
template <class Mat>
inline double cross_entropy(const Mat& logits, std::span<const int> labels, Mat* dlogits) {
  const Mat p = softmax_rows(logits);
  double loss = 0.0;
  const auto n = static_cast<double>(labels.size());
  for (Eigen::Index r = 0; r < p.rows(); ++r)
    loss -= std::log(std::max(static_cast<double>(p(r, labels[static_cast<std::size_t>(r)])), 1e-300));
  if (dlogits) {
    *dlogits = p;
    for (Eigen::Index r = 0; r < p.rows(); ++r) (*dlogits)(r, labels[static_cast<std::size_t>(r)]) -= 1;
    *dlogits /= static_cast<typename Mat::Scalar>(n);
  }
  return loss / n;
}

// QAT regularizer (SQWD on latent weights, ACR on the clamped folded weights
// that get quantized). Adds its gradient into `g` when non-null.
inline double regularizer(const TrainedModel& m, const std::vector<EffectiveBlock>& eff, Gradients* g) {
  const auto& fq = m.fq;
  if (!fq.enabled || fq.method == QatMethod::None || fq.lambda_reg == 0.0) return 0.0;
  std::size_t n = 0;
  for (const auto& b : m.blocks) n += b.weights.size();
  double loss = 0.0;
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const auto& p = m.blocks[l];
    const auto& e = eff[l];
    const std::size_t out = p.bias.size();
    if (fq.method == QatMethod::SQWD) {
      std::vector<double> raw(p.weights.begin(), p.weights.end());
      loss += sqwd_reg_loss(raw, fq.lambda_reg) * static_cast<double>(raw.size()) / static_cast<double>(n);
      if (g)
        for (std::size_t i = 0; i < raw.size(); ++i) g->blocks[l].weights[i] += sqwd_reg_grad(raw[i], fq.lambda_reg, n);
    } else {
      loss += acr_reg_loss(e.clamped, fq.b_w, fq.lambda_reg) * static_cast<double>(e.clamped.size()) /
              static_cast<double>(n);
      if (g) {
        const bool has_bn = !p.bn.empty();
        for (std::size_t i = 0; i < e.clamped.size(); ++i) {
          if (!e.in_range[i]) continue;
          const std::size_t c = i % out;
          const double d = acr_reg_grad(e.clamped[i], fq.b_w, fq.lambda_reg, n);
          const double t = e.squashed[i];
          g->blocks[l].weights[i] += d * e.fold_scale[c] * (1.0 - t * t);
          if (has_bn) g->blocks[l].gamma[c] += d * t / e.sigma[c];
        }
      }
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::array<char, 4> kCheckpointMagic{'F', 'X', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> checkpoint_bytes(const TrainedModel& m, std::int64_t step = 0) {
  ContainerWriter w(kCheckpointMagic, kCheckpointVersion);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const auto& b = m.spec.blocks[l];
    const auto& p = m.blocks[l];
    const std::string id = std::to_string(l);
    w.add_f32("block" + id + ".weights", {b.kh, b.kw, b.in_ch, b.out_ch}, p.weights);
    w.add_f32("block" + id + ".bias", {b.out_ch}, p.bias);
    if (b.bn_relu) {
      w.add_f32("block" + id + ".bn.gamma", {b.out_ch}, p.bn.gamma);
      w.add_f32("block" + id + ".bn.beta", {b.out_ch}, p.bn.beta);
      w.add_f32("block" + id + ".bn.running_mean", {b.out_ch}, p.bn.running_mean);
      w.add_f32("block" + id + ".bn.running_var", {b.out_ch}, p.bn.running_var);
    }
  }
  json eps = json::array();
  for (const auto& p : m.blocks) eps.push_back(p.bn.eps);
  return w.finish({{"schema", "fxqat.checkpoint/1"},
                   {"spec", m.spec.to_json()},
                   {"fq", fq_to_json(m.fq)},
                   {"stats", stats_to_json(m.stats)},
                   {"bn_eps", eps},
                   {"step", step}});
}

inline void save_checkpoint(const std::string& path, const TrainedModel& m, std::int64_t step = 0) {
  const auto bytes = checkpoint_bytes(m, step);
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCode::IoError, "cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(f), ErrorCode::IoError, "write failed for '" + path + "'");
}

inline TrainedModel load_checkpoint(const std::string& path) {
  const auto r = ContainerReader::from_file(path, kCheckpointMagic);
  require(r.version() == kCheckpointVersion, ErrorCode::FormatError, "unsupported checkpoint version");
  TrainedModel m;
  try {
    const auto& h = r.header();
    m.spec = ModelSpec::from_json(h.at("spec"));
    m.fq = fq_from_json(h.at("fq"));
    m.stats = stats_from_json(h.at("stats"));
    const auto eps = h.at("bn_eps").get<std::vector<double>>();
    require(eps.size() == m.spec.blocks.size(), ErrorCode::FormatError, "bn_eps length mismatch");
    for (std::size_t l = 0; l < m.spec.blocks.size(); ++l) {
      const std::string id = std::to_string(l);
      BlockParams p;
      p.weights = r.f32("block" + id + ".weights");
      p.bias = r.f32("block" + id + ".bias");
      p.bn.eps = eps[l];
      if (m.spec.blocks[l].bn_relu) {
        p.bn.gamma = r.f32("block" + id + ".bn.gamma");
        p.bn.beta = r.f32("block" + id + ".bn.beta");
        p.bn.running_mean = r.f32("block" + id + ".bn.running_mean");
        p.bn.running_var = r.f32("block" + id + ".bn.running_var");
      }
      const auto& b = m.spec.blocks[l];
      require(p.weights.size() == static_cast<std::size_t>(b.fan_in()) * b.out_ch &&
                  p.bias.size() == static_cast<std::size_t>(b.out_ch),
              ErrorCode::FormatError, "checkpoint tensor sizes do not match the spec");
      m.blocks.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, std::string("malformed checkpoint header: ") + e.what());
  }
  return m;
}

}  // namespace fxqat
