#pragma once

// Pure-integer inference for exported models.
//
// Every output activation is a sequential multiply-accumulate chain over its
// receptive field, in (kernel row, kernel column, input channel) order,
// through a saturating accumulator of acc_bits. With a flush cadence k the
// accumulator is added into a wider saturating buffer after every k MACs
// and reset (two-tier accumulator-buffer). The bias, already on the
// accumulator grid, is added into the buffer last.
//
// QAT models keep one q-format per tensor role. Hidden activations on
// [0, c_a] are stored as signed codes s = u - 2^(b_a-1) so the MAC lanes are
// signed; the constant 2^(b_a-1) * sum(w) this removes from every dot
// product is folded into the exported bias.
//
// PTQ models carry per-layer q-formats and normalize every hidden output to
// a common q before the next layer.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fxqat/container.hpp"
#include "fxqat/error.hpp"
#include "fxqat/features.hpp"
#include "fxqat/fxp_core.hpp"
#include "fxqat/nn_graph.hpp"
#include "fxqat/qat.hpp"

namespace fxqat {

enum class EngineMode { QatUniform, PtqPerLayer };

inline std::string to_string(EngineMode m) { return m == EngineMode::QatUniform ? "qat_uniform" : "ptq_per_layer"; }

inline EngineMode parse_engine_mode(const std::string& s) {
  if (s == "qat_uniform") return EngineMode::QatUniform;
  if (s == "ptq_per_layer") return EngineMode::PtqPerLayer;
  fail(ErrorCode::FormatError, "unknown engine mode '" + s + "'");
}

struct AccumulatorConfig {
  int acc_bits = 16;
  int buffer_bits = 32;
  std::optional<int> flush_cadence;  // MACs between flushes; none = never flush

  void validate() const {
    require(acc_bits >= 2 && acc_bits <= 62, ErrorCode::ConfigError, "acc_bits must be in [2, 62]");
    require(buffer_bits > acc_bits && buffer_bits <= 62, ErrorCode::ConfigError,
            "buffer_bits must exceed acc_bits (and be <= 62)");
    require(!flush_cadence || *flush_cadence >= 1, ErrorCode::ConfigError, "flush cadence must be >= 1");
  }

  std::string cadence_label() const { return flush_cadence ? std::to_string(*flush_cadence) : "none"; }
};

struct FxpLayer {
  ConvSpec conv;
  FxpTensor weights;                 // shape {fan_in, out_ch}
  std::vector<std::int32_t> bias;    // accumulator grid, 32-bit
  int in_q = 0;                      // q-format label expected on the input
  int acc_q = 0;                     // fractional bits of the accumulator value
  int out_shift = 0;                 // acc_q minus fractional bits of the output value
  std::int32_t out_offset = 0;       // output code = u - out_offset
  std::int32_t out_u_max = 0;        // largest u
  std::int64_t relu_clip = std::numeric_limits<std::int64_t>::max();  // upper ReLU clip on the accumulator
  int out_q = 0;                     // q-format label of the output tensor
  int out_bits = 8;                  // bit width of the output codes
  bool classifier = false;

  std::vector<std::int32_t> weights_by_out;  // out_ch x fan_in, for contiguous MAC chains

  void finalize() {
    const int k = conv.fan_in();
    const int out = conv.out_ch;
    require(weights.codes.size() == static_cast<std::size_t>(k) * out, ErrorCode::ShapeError,
            "layer weight count does not match its conv spec");
    require(bias.size() == static_cast<std::size_t>(out), ErrorCode::ShapeError, "layer bias count mismatch");
    weights_by_out.resize(weights.codes.size());
    for (int i = 0; i < k; ++i)
      for (int c = 0; c < out; ++c)
        weights_by_out[static_cast<std::size_t>(c) * k + i] = weights.codes[static_cast<std::size_t>(i) * out + c];
  }
};

struct FxpModel {
  ModelSpec spec;
  EngineMode mode = EngineMode::QatUniform;
  BitWidth b_w{8}, b_a{8}, b_in{8};
  QFormat q_in{3};
  double c_a = 1.0;
  RoundingConstant feature_rounding = RoundingConstant::HalfAway;
  FeatureStats stats;
  std::vector<FxpLayer> layers;
  // PTQ only: per-layer weight q and hidden output q, and the common q every
  // hidden output is normalized to.
  std::vector<int> ptq_weight_q;
  std::vector<int> ptq_out_q;
  int ptq_common_q = 0;
};

// ---------------------------------------------------------------------------
// MAC kernel

struct MacResult {
  std::int64_t sum = 0;
  std::int64_t saturations = 0;         // accumulator clamp events
  std::int64_t buffer_saturations = 0;  // buffer clamp events
};

inline MacResult mac_kernel(std::span<const std::int32_t> w, std::span<const std::int32_t> x,
                            const AccumulatorConfig& cfg) {
  require(w.size() == x.size(), ErrorCode::ShapeError, "mac_kernel: operand lengths differ");
  const std::int64_t acc_hi = (std::int64_t{1} << (cfg.acc_bits - 1)) - 1;
  const std::int64_t acc_lo = -(std::int64_t{1} << (cfg.acc_bits - 1));
  const std::int64_t buf_hi = (std::int64_t{1} << (cfg.buffer_bits - 1)) - 1;
  const std::int64_t buf_lo = -(std::int64_t{1} << (cfg.buffer_bits - 1));
  const std::size_t cadence = cfg.flush_cadence ? static_cast<std::size_t>(*cfg.flush_cadence) : w.size() + 1;
  MacResult r;
  std::int64_t acc = 0;
  std::int64_t buf = 0;
  std::size_t since_flush = 0;
  auto flush = [&] {
    buf += acc;
    if (buf > buf_hi) {
      buf = buf_hi;
      ++r.buffer_saturations;
    } else if (buf < buf_lo) {
      buf = buf_lo;
      ++r.buffer_saturations;
    }
    acc = 0;
  };
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += static_cast<std::int64_t>(w[i]) * x[i];
    if (acc > acc_hi) {
      acc = acc_hi;
      ++r.saturations;
    } else if (acc < acc_lo) {
      acc = acc_lo;
      ++r.saturations;
    }
    if (++since_flush == cadence) {
      flush();
      since_flush = 0;
    }
  }
  flush();
  r.sum = buf;
  return r;
}

// ---------------------------------------------------------------------------
// Layer evaluation

struct LayerCounts {
  std::int64_t activations = 0;
  std::int64_t corrupted = 0;           // activations whose chain clamped at least once
  std::int64_t saturation_events = 0;
  std::int64_t buffer_saturations = 0;
};

struct ConvResult {
  FxpTensor output;                     // hidden layers
  std::vector<std::int64_t> acc;        // buffer value per output activation (pre-activation)
  LayerCounts counts;
};

inline ConvResult conv_fxp(const FxpLayer& layer, const FxpTensor& input, const Shape3& in_shape,
                           const AccumulatorConfig& cfg, EngineMode mode = EngineMode::QatUniform) {
  cfg.validate();
  const auto& b = layer.conv;
  require(input.shape.size() == 3 && input.shape[0] == in_shape.h && input.shape[1] == in_shape.w &&
              input.shape[2] == in_shape.c && in_shape.c == b.in_ch,
          ErrorCode::ShapeError, "conv_fxp: input shape does not match the layer");
  require(input.codes.size() == static_cast<std::size_t>(in_shape.size()), ErrorCode::ShapeError,
          "conv_fxp: input code count mismatch");
  if (mode == EngineMode::QatUniform && input.q.frac_bits() != layer.in_q)
    fail(ErrorCode::QFormatError, "conv_fxp: input q-format " + std::to_string(input.q.frac_bits()) +
                                      " does not match the layer's " + std::to_string(layer.in_q));
  require(layer.weights_by_out.size() == layer.weights.codes.size(), ErrorCode::ShapeError,
          "conv_fxp: layer not finalized");
  const Shape3 out{(in_shape.h - b.kh) / b.sh + 1, (in_shape.w - b.kw) / b.sw + 1, b.out_ch};
  const int k = b.fan_in();

  ConvResult r;
  r.acc.resize(static_cast<std::size_t>(out.size()));
  if (!layer.classifier) {
    r.output.shape = {out.h, out.w, out.c};
    r.output.codes.resize(static_cast<std::size_t>(out.size()));
    r.output.b = BitWidth(layer.out_bits);
    r.output.q = QFormat(layer.out_q);
  }
  std::vector<std::int32_t> field(static_cast<std::size_t>(k));
  const std::int64_t buf_hi = (std::int64_t{1} << (cfg.buffer_bits - 1)) - 1;
  const std::int64_t buf_lo = -(std::int64_t{1} << (cfg.buffer_bits - 1));
  for (int oy = 0; oy < out.h; ++oy)
    for (int ox = 0; ox < out.w; ++ox) {
      for (int i = 0; i < b.kh; ++i)
        for (int j = 0; j < b.kw; ++j) {
          const std::size_t src = (static_cast<std::size_t>(oy * b.sh + i) * in_shape.w + ox * b.sw + j) * in_shape.c;
          std::copy_n(input.codes.begin() + static_cast<std::ptrdiff_t>(src), in_shape.c,
                      field.begin() + (i * b.kw + j) * in_shape.c);
        }
      for (int c = 0; c < out.c; ++c) {
        const std::span<const std::int32_t> w(layer.weights_by_out.data() + static_cast<std::size_t>(c) * k,
                                              static_cast<std::size_t>(k));
        MacResult m = mac_kernel(w, field, cfg);
        std::int64_t acc = m.sum + layer.bias[c];
        if (acc > buf_hi) {
          acc = buf_hi;
          ++m.buffer_saturations;
        } else if (acc < buf_lo) {
          acc = buf_lo;
          ++m.buffer_saturations;
        }
        const std::size_t idx = (static_cast<std::size_t>(oy) * out.w + ox) * out.c + c;
        r.acc[idx] = acc;
        ++r.counts.activations;
        if (m.saturations > 0) ++r.counts.corrupted;
        r.counts.saturation_events += m.saturations;
        r.counts.buffer_saturations += m.buffer_saturations;
        if (!layer.classifier) {
          // Integer clipped ReLU, then rescale to the output grid.
          const std::int64_t v = std::clamp<std::int64_t>(acc, 0, layer.relu_clip);
          const std::int64_t u = std::min<std::int64_t>(shift_round(v, layer.out_shift), layer.out_u_max);
          r.output.codes[idx] = static_cast<std::int32_t>(u - layer.out_offset);
        }
      }
    }
  return r;
}

// Shift every code from t.q down to q_to. Returns the number of element
// operations charged (zero when the q-format already matches).
inline FxpTensor normalize_qformat(const FxpTensor& t, QFormat q_to, std::int64_t* charged_ops = nullptr) {
  FxpTensor out = t;
  if (q_to == t.q) {
    if (charged_ops) *charged_ops = 0;
    return out;
  }
  for (auto& c : out.codes) c = rescale(FxpCode{c, t.b, t.q}, t.b, q_to).value;
  out.q = q_to;
  if (charged_ops) *charged_ops = static_cast<std::int64_t>(t.codes.size());
  return out;
}

// ---------------------------------------------------------------------------
// Whole-model inference

struct LayerReport {
  int kh = 0, kw = 0, in_ch = 0;
  int macs_per_activation = 0;
  std::int64_t activations_per_input = 0;
  std::int64_t activations = 0;  // evaluated (per input x inputs)
  std::int64_t corrupted = 0;
  std::int64_t buffer_saturations = 0;
};

struct SaturationReport {
  std::string cadence = "none";
  int acc_bits = 16;
  int buffer_bits = 32;
  std::int64_t inputs = 0;
  std::vector<LayerReport> layers;

  std::int64_t total_corrupted() const {
    std::int64_t t = 0;
    for (const auto& l : layers) t += l.corrupted;
    return t;
  }
  std::int64_t total_buffer_saturations() const {
    std::int64_t t = 0;
    for (const auto& l : layers) t += l.buffer_saturations;
    return t;
  }
};

struct InferResult {
  std::vector<double> logits;
  std::vector<double> posteriors;
  std::vector<std::int64_t> logit_codes;   // classifier accumulator values
  std::vector<FxpTensor> hidden_outputs;   // per hidden block, before any PTQ normalization
  std::vector<LayerCounts> counts;
  std::int64_t normalization_ops = 0;
};

inline FxpTensor quantize_features(const FxpModel& m, const FeatureMatrix& features) {
  require(features.frames == m.spec.in_h && static_cast<int>(features.values.size()) == m.spec.in_h * m.spec.in_w,
          ErrorCode::ShapeError, "infer: feature matrix shape does not match the model input");
  FxpTensor t;
  t.shape = {m.spec.in_h, m.spec.in_w, 1};
  t.b = m.b_in;
  t.q = m.q_in;
  t.codes.resize(features.values.size());
  for (std::size_t i = 0; i < features.values.size(); ++i)
    t.codes[i] = quantize_qformat(features.values[i], m.b_in, m.q_in, m.feature_rounding).value;
  return t;
}

inline InferResult infer(const FxpModel& m, const FeatureMatrix& features, const AccumulatorConfig& cfg) {
  InferResult r;
  FxpTensor x = quantize_features(m, features);
  Shape3 shape{m.spec.in_h, m.spec.in_w, 1};
  for (const auto& layer : m.layers) {
    ConvResult cr = conv_fxp(layer, x, shape, cfg, m.mode);
    r.counts.push_back(cr.counts);
    shape = Shape3{(shape.h - layer.conv.kh) / layer.conv.sh + 1, (shape.w - layer.conv.kw) / layer.conv.sw + 1,
                   layer.conv.out_ch};
    if (layer.classifier) {
      r.logit_codes = cr.acc;
      for (auto a : cr.acc) r.logits.push_back(std::ldexp(static_cast<double>(a), -layer.acc_q));
      break;
    }
    r.hidden_outputs.push_back(cr.output);
    if (m.mode == EngineMode::PtqPerLayer) {
      std::int64_t ops = 0;
      x = normalize_qformat(cr.output, QFormat(m.ptq_common_q), &ops);
      r.normalization_ops += ops;
    } else {
      x = std::move(cr.output);
    }
  }
  r.posteriors = softmax(r.logits);
  return r;
}

inline std::vector<SaturationReport> profile_saturations(const FxpModel& m, std::span<const FeatureMatrix> inputs,
                                                         const std::vector<std::optional<int>>& cadences,
                                                         int acc_bits = 16, int buffer_bits = 32) {
  const auto shapes = m.spec.output_shapes();
  std::vector<SaturationReport> out;
  for (const auto& cad : cadences) {
    AccumulatorConfig cfg{acc_bits, buffer_bits, cad};
    cfg.validate();
    SaturationReport rep;
    rep.cadence = cfg.cadence_label();
    rep.acc_bits = acc_bits;
    rep.buffer_bits = buffer_bits;
    rep.inputs = static_cast<std::int64_t>(inputs.size());
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      const auto& c = m.layers[l].conv;
      LayerReport lr;
      lr.kh = c.kh;
      lr.kw = c.kw;
      lr.in_ch = c.in_ch;
      lr.macs_per_activation = c.macs_per_activation();
      lr.activations_per_input = shapes[l].size();
      rep.layers.push_back(lr);
    }
    for (const auto& f : inputs) {
      const auto r = infer(m, f, cfg);
      for (std::size_t l = 0; l < r.counts.size(); ++l) {
        rep.layers[l].activations += r.counts[l].activations;
        rep.layers[l].corrupted += r.counts[l].corrupted;
        rep.layers[l].buffer_saturations += r.counts[l].buffer_saturations;
      }
    }
    out.push_back(std::move(rep));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instruction accounting
//
// Counts are analytic, from the topology. The cycle model charges one cycle
// per vector instruction; `parallel_degree` lanes of MACs retire per
// instruction. Weights (cycles per vector op) are fields of CycleModel.

struct CycleModel {
  double mac = 1.0;            // one vmlal per `degree` MACs
  double load_per_mac = 2.0;   // weight + activation vector loads per vmlal
  double store = 1.0;          // per output activation (scalar store)
  double flush = 3.0;          // widen-add low/high halves + reset, per vector flush
  double rescale = 3.0;        // rounding shift, clamp, narrow, per vector of outputs
  double normalization = 4.0;  // load, variable shift, saturate, store; scalar per element
  double flp_activation = 1.0; // FLP reference: ReLU per output
};

struct InstructionProfile {
  std::int64_t mac_ops = 0;
  std::int64_t flush_ops = 0;
  std::int64_t normalization_ops = 0;
  std::int64_t rescale_ops = 0;
  std::int64_t load_store_ops = 0;
  int parallel_degree = 1;
  std::vector<std::int64_t> flush_ops_per_layer;
  double cycles_mac = 0, cycles_load_store = 0, cycles_flush = 0, cycles_rescale = 0, cycles_normalization = 0;
  double total_cycles = 0;
  double reference_cycles = 0;  // FLP, non-SIMD, same topology
  double relative_exec_time = 0;

  double normalization_share() const { return total_cycles > 0 ? cycles_normalization / total_cycles : 0.0; }
};

inline int modeled_parallel_degree(int operand_bits, int acc_bits) {
  if (operand_bits <= 8 && acc_bits <= 16) return 8;
  if (operand_bits <= 16 && acc_bits <= 32) return 4;
  return 1;
}

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

inline InstructionProfile instruction_profile(const FxpModel& m, std::int64_t input_count,
                                              const AccumulatorConfig& cfg, const CycleModel& cm = {}) {
  cfg.validate();
  require(input_count >= 0, ErrorCode::InvalidInput, "instruction_profile: negative input count");
  const auto shapes = m.spec.output_shapes();
  InstructionProfile p;
  const int operand_bits = std::max(m.b_w.bits(), std::max(m.b_a.bits(), m.b_in.bits()));
  p.parallel_degree = modeled_parallel_degree(operand_bits, cfg.acc_bits);
  const double deg = p.parallel_degree;
  std::int64_t activations = 0;
  double ref_cycles = 0;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& c = m.layers[l].conv;
    const std::int64_t acts = static_cast<std::int64_t>(shapes[l].size()) * input_count;
    const std::int64_t macs = acts * c.macs_per_activation();
    const std::int64_t flushes = cfg.flush_cadence ? acts * ceil_div(c.macs_per_activation(), *cfg.flush_cadence) : 0;
    p.flush_ops_per_layer.push_back(flushes);
    p.mac_ops += macs;
    p.flush_ops += flushes;
    p.rescale_ops += acts;
    activations += acts;
    if (m.mode == EngineMode::PtqPerLayer && !m.layers[l].classifier) p.normalization_ops += acts;
    ref_cycles += macs * (cm.mac + cm.load_per_mac) + acts * (cm.store + cm.flp_activation);
  }
  p.load_store_ops = static_cast<std::int64_t>(std::ceil(cm.load_per_mac * p.mac_ops / deg)) + activations;
  p.cycles_mac = cm.mac * p.mac_ops / deg;
  p.cycles_load_store = cm.load_per_mac * p.mac_ops / deg + cm.store * activations;
  p.cycles_flush = cm.flush * p.flush_ops / deg;
  p.cycles_rescale = cm.rescale * p.rescale_ops / deg;
  p.cycles_normalization = cm.normalization * p.normalization_ops;
  p.total_cycles = p.cycles_mac + p.cycles_load_store + p.cycles_flush + p.cycles_rescale + p.cycles_normalization;
  p.reference_cycles = ref_cycles;
  p.relative_exec_time = ref_cycles > 0 ? p.total_cycles / ref_cycles : 0.0;
  return p;
}

// ---------------------------------------------------------------------------
// Export

// Lossless export of a QAT-trained model: BN folded, weights on the b_w unit
// grid, biases on the accumulator grid.
inline FxpModel export_model(const TrainedModel& tm) {
  const auto& fq = tm.fq;
  if (!fq.enabled)
    fail(ErrorCode::ExportError, "model was trained without fake quantization; request the PTQ path explicitly");
  if (!is_power_of_two(fq.c_a)) fail(ErrorCode::ExportError, "activation clip c_a must be a power of two");
  const auto shapes = tm.spec.output_shapes();
  const auto eff = effective_blocks(tm);
  FxpModel m;
  m.spec = tm.spec;
  m.mode = EngineMode::QatUniform;
  m.b_w = fq.b_w;
  m.b_a = fq.b_a;
  m.b_in = fq.b_in;
  m.q_in = fq.q_in;
  m.c_a = fq.c_a;
  m.feature_rounding = fq.feature_rounding;
  m.stats = tm.stats;
  const std::int32_t offset = fq.b_a.half_range();
  for (std::size_t l = 0; l < tm.blocks.size(); ++l) {
    const auto& c = tm.spec.blocks[l];
    const auto& e = eff[l];
    FxpLayer layer;
    layer.conv = c;
    layer.classifier = !c.bn_relu;
    layer.weights.shape = {c.fan_in(), c.out_ch};
    layer.weights.b = fq.b_w;
    layer.weights.q = QFormat(fq.b_w.bits() - 1);
    layer.weights.codes.resize(e.clamped.size());
    for (std::size_t i = 0; i < e.clamped.size(); ++i) {
      const FxpCode code = quantize_unit(e.clamped[i], fq.b_w);
      if (dequantize_unit(code) != e.weights[i])
        fail(ErrorCode::ExportError, "exported weight does not reproduce the fake-quantized weight");
      layer.weights.codes[i] = code.value;
    }
    layer.in_q = l == 0 ? fq.q_in.frac_bits() : fq.b_a.bits() - 1;
    layer.acc_q = e.acc_frac_bits;
    layer.bias.resize(static_cast<std::size_t>(c.out_ch));
    for (int ch = 0; ch < c.out_ch; ++ch) {
      std::int64_t bias = e.bias_codes[ch];
      if (l > 0) {
        std::int64_t wsum = 0;
        for (int k = 0; k < c.fan_in(); ++k) wsum += layer.weights.codes[static_cast<std::size_t>(k) * c.out_ch + ch];
        bias += wsum * offset;
      }
      if (bias > kBiasCodeMax || bias < kBiasCodeMin)
        fail(ErrorCode::ExportError, "bias of block " + std::to_string(l) + " overflows 32 bits");
      layer.bias[ch] = static_cast<std::int32_t>(bias);
    }
    if (!layer.classifier) {
      const int out_frac = qat_input_frac_bits(fq, l + 1);
      layer.out_shift = layer.acc_q - out_frac;
      layer.out_offset = offset;
      layer.out_u_max = 2 * offset - 1;
      layer.relu_clip = static_cast<std::int64_t>(std::ldexp(fq.c_a, layer.acc_q));
      layer.out_q = fq.b_a.bits() - 1;
      layer.out_bits = fq.b_a.bits();
    }
    layer.finalize();
    m.layers.push_back(std::move(layer));
  }
  return m;
}

// Post-training quantization of an FLP model: per-layer weight q-formats
// from the folded weight range, per-layer activation q-formats from a
// calibration pass, hidden outputs normalized to the smallest of them.
inline FxpModel export_ptq(const TrainedModel& tm, std::span<const FeatureMatrix> calibration, BitWidth bits = BitWidth(16)) {
  if (tm.fq.enabled) fail(ErrorCode::ExportError, "PTQ export expects a model trained without fake quantization");
  require(!calibration.empty(), ErrorCode::ExportError, "PTQ export needs calibration inputs");
  const auto shapes = tm.spec.output_shapes();
  const std::size_t hidden = tm.blocks.size() - 1;

  // Calibration: largest post-ReLU activation per hidden block.
  std::vector<double> max_act(hidden, 0.0);
  {
    Network<double> net(tm);
    std::vector<const FeatureMatrix*> ptrs;
    for (const auto& f : calibration) ptrs.push_back(&f);
    net.forward(pack_batch<double>(ptrs, tm.spec), Pass::Eval);
    for (std::size_t l = 0; l < hidden; ++l) max_act[l] = net.block_output(l).maxCoeff();
  }

  FxpModel m;
  m.spec = tm.spec;
  m.mode = EngineMode::PtqPerLayer;
  m.b_w = bits;
  m.b_a = bits;
  m.b_in = bits;
  m.q_in = select_qformat(std::max(tm.stats.max_abs, 1e-6), bits);
  m.c_a = 1.0;
  m.feature_rounding = tm.fq.feature_rounding;
  m.stats = tm.stats;
  for (std::size_t l = 0; l < hidden; ++l)
    m.ptq_out_q.push_back(max_act[l] > 0 ? select_qformat(max_act[l], bits).frac_bits() : bits.bits() - 1);
  m.ptq_common_q = *std::min_element(m.ptq_out_q.begin(), m.ptq_out_q.end());

  for (std::size_t l = 0; l < tm.blocks.size(); ++l) {
    const auto& c = tm.spec.blocks[l];
    const auto& p = tm.blocks[l];
    std::vector<double> w(p.weights.begin(), p.weights.end());
    std::vector<double> bias(p.bias.begin(), p.bias.end());
    FoldedConv f = c.bn_relu ? fold_batchnorm(w, bias, p.bn) : FoldedConv{w, bias};
    double wmax = 0.0;
    for (double v : f.weights) wmax = std::max(wmax, std::abs(v));
    const QFormat wq = select_qformat(std::max(wmax, 1e-12), bits);
    m.ptq_weight_q.push_back(wq.frac_bits());
    FxpLayer layer;
    layer.conv = c;
    layer.classifier = !c.bn_relu;
    layer.weights.shape = {c.fan_in(), c.out_ch};
    layer.weights.b = bits;
    layer.weights.q = wq;
    for (double v : f.weights) layer.weights.codes.push_back(quantize_qformat(v, bits, wq).value);
    layer.in_q = l == 0 ? m.q_in.frac_bits() : m.ptq_common_q;
    layer.acc_q = wq.frac_bits() + layer.in_q;
    for (double v : f.bias) {
      const double code = round_half_away(std::ldexp(v, layer.acc_q));
      if (code > static_cast<double>(kBiasCodeMax) || code < static_cast<double>(kBiasCodeMin))
        fail(ErrorCode::ExportError, "PTQ bias of block " + std::to_string(l) + " overflows 32 bits");
      layer.bias.push_back(static_cast<std::int32_t>(code));
    }
    if (!layer.classifier) {
      layer.out_q = m.ptq_out_q[l];
      layer.out_shift = layer.acc_q - layer.out_q;
      layer.out_offset = 0;
      layer.out_u_max = bits.max_code();
      layer.out_bits = bits.bits();
    }
    layer.finalize();
    m.layers.push_back(std::move(layer));
  }
  return m;
}

// The same integer model re-labelled as a PTQ model whose per-layer
// q-formats all coincide; used to isolate the cost of normalization.
inline FxpModel as_uniform_ptq(const FxpModel& qat) {
  require(qat.mode == EngineMode::QatUniform, ErrorCode::InvalidInput, "as_uniform_ptq expects a QAT model");
  FxpModel m = qat;
  m.mode = EngineMode::PtqPerLayer;
  m.ptq_weight_q.assign(m.layers.size(), m.b_w.bits() - 1);
  m.ptq_out_q.assign(m.layers.size() - 1, m.b_a.bits() - 1);
  m.ptq_common_q = m.b_a.bits() - 1;
  return m;
}

// ---------------------------------------------------------------------------
// Reference check against the floating-point fake-quant forward pass

struct OracleReport {
  bool bit_exact = true;
  std::int64_t inputs = 0;
  std::int64_t mismatches = 0;
  int first_divergent_input = -1;
  int first_divergent_layer = -1;
  std::int64_t first_reference_code = 0;
  std::int64_t first_engine_code = 0;
  double max_posterior_diff = 0.0;
  bool argmax_equal = true;
};

// Codes of the floating-point pass for block l, one per output activation.
inline std::vector<std::int64_t> reference_codes(const FxpModel& m, const Network<double>::Mat& out, std::size_t l) {
  std::vector<std::int64_t> codes(static_cast<std::size_t>(out.size()));
  const auto& layer = m.layers[l];
  // Hidden values are multiples of 2^-(acc_q - out_shift); logits of 2^-acc_q.
  const int frac = layer.classifier ? layer.acc_q : layer.acc_q - layer.out_shift;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const double scaled = std::ldexp(out.data()[i], frac);
    if (scaled != std::floor(scaled)) return {};  // off-grid: cannot be a code
    codes[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(scaled) - (layer.classifier ? 0 : layer.out_offset);
  }
  return codes;
}

inline OracleReport verify_against_reference(const TrainedModel& tm, const FxpModel& m,
                                             std::span<const FeatureMatrix> inputs, const AccumulatorConfig& cfg) {
  require(m.mode == EngineMode::QatUniform, ErrorCode::InvalidInput, "reference check applies to QAT models");
  OracleReport rep;
  Network<double> net(tm);
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    const FeatureMatrix* one[] = {&inputs[n]};
    net.forward(pack_batch<double>(one, tm.spec), Pass::Eval);
    const auto r = infer(m, inputs[n], cfg);
    ++rep.inputs;
    bool input_ok = true;
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      const auto ref = reference_codes(m, net.block_output(l), l);
      std::vector<std::int64_t> eng;
      if (m.layers[l].classifier) eng = r.logit_codes;
      else eng.assign(r.hidden_outputs[l].codes.begin(), r.hidden_outputs[l].codes.end());
      const bool size_ok = ref.size() == eng.size();
      std::size_t bad = size_ok ? ref.size() : 0;
      if (size_ok)
        for (std::size_t i = 0; i < ref.size(); ++i)
          if (ref[i] != eng[i]) {
            bad = i;
            break;
          }
      if (!size_ok || bad < ref.size()) {
        ++rep.mismatches;
        if (rep.first_divergent_layer < 0) {
          rep.first_divergent_input = static_cast<int>(n);
          rep.first_divergent_layer = static_cast<int>(l);
          rep.first_reference_code = size_ok ? ref[bad] : 0;
          rep.first_engine_code = size_ok ? eng[bad] : 0;
        }
        input_ok = false;
        break;
      }
    }
    const auto& logits = net.logits();
    std::vector<double> l(logits.data(), logits.data() + logits.size());
    const auto p = softmax(l);
    for (std::size_t i = 0; i < p.size(); ++i)
      rep.max_posterior_diff = std::max(rep.max_posterior_diff, std::abs(p[i] - r.posteriors[i]));
    const auto am = [](const std::vector<double>& v) { return std::max_element(v.begin(), v.end()) - v.begin(); };
    if (am(p) != am(r.posteriors)) rep.argmax_equal = false;
    if (!input_ok) rep.bit_exact = false;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr std::array<char, 4> kFxpModelMagic{'F', 'X', 'P', 'M'};
inline constexpr std::uint16_t kFxpModelVersion = 1;

inline std::vector<std::uint8_t> fxp_model_bytes(const FxpModel& m) {
  ContainerWriter w(kFxpModelMagic, kFxpModelVersion);
  json layers = json::array();
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& layer = m.layers[l];
    const std::string id = std::to_string(l);
    w.add_int("layer" + id + ".weights", int_dtype_for_bits(layer.weights.b.bits()), layer.weights.shape,
              layer.weights.codes);
    w.add_int("layer" + id + ".bias", DType::I32, {static_cast<int>(layer.bias.size())}, layer.bias);
    layers.push_back({{"weight_bits", layer.weights.b.bits()},
                      {"weight_q", layer.weights.q.frac_bits()},
                      {"in_q", layer.in_q},
                      {"acc_q", layer.acc_q},
                      {"out_shift", layer.out_shift},
                      {"out_offset", layer.out_offset},
                      {"out_u_max", layer.out_u_max},
                      {"relu_clip", layer.relu_clip},
                      {"out_q", layer.out_q},
                      {"out_bits", layer.out_bits},
                      {"classifier", layer.classifier}});
  }
  json header = {{"schema", "fxqat.fxpm/1"},
                 {"spec", m.spec.to_json()},
                 {"mode", to_string(m.mode)},
                 {"b_w", m.b_w.bits()},
                 {"b_a", m.b_a.bits()},
                 {"b_in", m.b_in.bits()},
                 {"q_in", m.q_in.frac_bits()},
                 {"c_a", m.c_a},
                 {"feature_rounding", m.feature_rounding == RoundingConstant::HalfAway ? "half_away" : "sign_inverted"},
                 {"stats", stats_to_json(m.stats)},
                 {"layers", layers},
                 {"accumulator_defaults", {{"acc_bits", 16}, {"buffer_bits", 32}, {"flush_cadence", nullptr}}}};
  if (m.mode == EngineMode::PtqPerLayer)
    header["ptq"] = {{"weight_q", m.ptq_weight_q}, {"out_q", m.ptq_out_q}, {"common_q", m.ptq_common_q}};
  return w.finish(header);
}

inline void save_fxp_model(const std::string& path, const FxpModel& m) {
  const auto bytes = fxp_model_bytes(m);
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCode::IoError, "cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(f), ErrorCode::IoError, "write failed for '" + path + "'");
}

inline FxpModel parse_fxp_model(const ContainerReader& r) {
  require(r.version() == kFxpModelVersion, ErrorCode::FormatError, "unsupported FXPM version");
  FxpModel m;
  try {
    const auto& h = r.header();
    m.spec = ModelSpec::from_json(h.at("spec"));
    m.mode = parse_engine_mode(h.at("mode").get<std::string>());
    m.b_w = BitWidth(h.at("b_w").get<int>());
    m.b_a = BitWidth(h.at("b_a").get<int>());
    m.b_in = BitWidth(h.at("b_in").get<int>());
    m.q_in = QFormat(h.at("q_in").get<int>());
    m.c_a = h.at("c_a").get<double>();
    m.feature_rounding = h.at("feature_rounding").get<std::string>() == "sign_inverted" ? RoundingConstant::SignInverted
                                                                                        : RoundingConstant::HalfAway;
    m.stats = stats_from_json(h.at("stats"));
    const auto& layers = h.at("layers");
    require(layers.size() == m.spec.blocks.size(), ErrorCode::FormatError, "FXPM layer count mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& j = layers[l];
      const std::string id = std::to_string(l);
      FxpLayer layer;
      layer.conv = m.spec.blocks[l];
      layer.weights.b = BitWidth(j.at("weight_bits").get<int>());
      layer.weights.q = QFormat(j.at("weight_q").get<int>());
      layer.weights.shape = r.entry("layer" + id + ".weights").shape;
      layer.weights.codes = r.ints("layer" + id + ".weights");
      layer.weights.validate();
      layer.bias = r.ints("layer" + id + ".bias");
      layer.in_q = j.at("in_q").get<int>();
      layer.acc_q = j.at("acc_q").get<int>();
      layer.out_shift = j.at("out_shift").get<int>();
      layer.out_offset = j.at("out_offset").get<std::int32_t>();
      layer.out_u_max = j.at("out_u_max").get<std::int32_t>();
      layer.relu_clip = j.at("relu_clip").get<std::int64_t>();
      layer.out_q = j.at("out_q").get<int>();
      layer.out_bits = j.at("out_bits").get<int>();
      layer.classifier = j.at("classifier").get<bool>();
      layer.finalize();
      m.layers.push_back(std::move(layer));
    }
    if (m.mode == EngineMode::PtqPerLayer) {
      const auto& p = h.at("ptq");
      m.ptq_weight_q = p.at("weight_q").get<std::vector<int>>();
      m.ptq_out_q = p.at("out_q").get<std::vector<int>>();
      m.ptq_common_q = p.at("common_q").get<int>();
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, std::string("malformed FXPM header: ") + e.what());
  }
  return m;
}

inline FxpModel load_fxp_model(const std::string& path) {
  return parse_fxp_model(ContainerReader::from_file(path, kFxpModelMagic));
}

// ---------------------------------------------------------------------------
// Reports

inline json to_json(const SaturationReport& r) {
  json layers = json::array();
  for (const auto& l : r.layers)
    layers.push_back({{"kernel", {l.kh, l.kw, l.in_ch}},
                      {"macs_per_activation", l.macs_per_activation},
                      {"activations_per_input", l.activations_per_input},
                      {"activations", l.activations},
                      {"corrupted", l.corrupted},
                      {"buffer_saturations", l.buffer_saturations}});
  return {{"schema", "fxqat.saturation/1"},
          {"cadence", r.cadence},
          {"acc_bits", r.acc_bits},
          {"buffer_bits", r.buffer_bits},
          {"inputs", r.inputs},
          {"layers", layers},
          {"total_corrupted", r.total_corrupted()},
          {"total_buffer_saturations", r.total_buffer_saturations()}};
}

inline json to_json(const InstructionProfile& p) {
  return {{"schema", "fxqat.instructions/1"},
          {"mac_ops", p.mac_ops},
          {"flush_ops", p.flush_ops},
          {"normalization_ops", p.normalization_ops},
          {"rescale_ops", p.rescale_ops},
          {"load_store_ops", p.load_store_ops},
          {"parallel_degree", p.parallel_degree},
          {"flush_ops_per_layer", p.flush_ops_per_layer},
          {"cycles",
           {{"mac", p.cycles_mac},
            {"load_store", p.cycles_load_store},
            {"flush", p.cycles_flush},
            {"rescale", p.cycles_rescale},
            {"normalization", p.cycles_normalization},
            {"total", p.total_cycles},
            {"flp_reference", p.reference_cycles}}},
          {"normalization_share", p.normalization_share()},
          {"relative_exec_time", p.relative_exec_time}};
}

// One row per layer, one corrupted-activation column per cadence, and a
// TOTAL row.
inline std::string saturation_table(const std::vector<SaturationReport>& reports) {
  require(!reports.empty(), ErrorCode::InvalidInput, "saturation_table: no reports");
  std::ostringstream os;
  auto cadence_header = [](const std::string& c) { return c == "none" ? std::string("None") : c + " MACs"; };
  os << std::left << std::setw(16) << "kernel size" << std::right << std::setw(16) << "# MACs/activation"
     << std::setw(15) << "# activations";
  for (const auto& r : reports) os << std::setw(12) << cadence_header(r.cadence);
  os << "\n";
  const auto& base = reports.front();
  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    const auto& L = base.layers[l];
    std::ostringstream k;
    k << "(" << L.kh << ", " << L.kw << ", " << L.in_ch << ")";
    os << std::left << std::setw(16) << k.str() << std::right << std::setw(16) << L.macs_per_activation
       << std::setw(15) << L.activations;
    for (const auto& r : reports) os << std::setw(12) << r.layers[l].corrupted;
    os << "\n";
  }
  os << std::left << std::setw(16) << "TOTAL" << std::right << std::setw(16) << "" << std::setw(15) << "";
  for (const auto& r : reports) os << std::setw(12) << r.total_corrupted();
  os << "\n";
  return os.str();
}

inline std::string instruction_table(const std::vector<std::pair<std::string, InstructionProfile>>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(28) << "setup" << std::right << std::setw(8) << "degree" << std::setw(14) << "flush ops"
     << std::setw(12) << "norm ops" << std::setw(12) << "norm share" << std::setw(16) << "rel exec time" << "\n";
  for (const auto& [name, p] : rows) {
    os << std::left << std::setw(28) << name << std::right << std::setw(7) << p.parallel_degree << "x"
       << std::setw(14) << p.flush_ops << std::setw(12) << p.normalization_ops << std::setw(11) << std::fixed
       << std::setprecision(1) << 100.0 * p.normalization_share() << "%" << std::setw(16) << std::setprecision(3)
       << p.relative_exec_time << "\n";
    os.unsetf(std::ios::fixed);
  }
  return os.str();
}

}  // namespace fxqat
