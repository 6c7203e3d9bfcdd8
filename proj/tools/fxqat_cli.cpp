// fxqat: train, export, run and profile fixed-point keyword-spotting models.
//
// Exit codes: 0 ok, 1 usage / configuration, 2 data or I/O error,
// 3 failed assertion (for example a --oracle mismatch).

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fxqat/fxqat.hpp"

namespace {

using namespace fxqat;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitAssert = 3;

struct AssertionFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A subcommand whose long options may also come from a JSON file given with
// --config. Flags on the command line win over file values; keys that match
// no option are rejected.
class Command {
 public:
  Command(CLI::App& parent, const std::string& name, const std::string& desc) : app_(parent.add_subcommand(name, desc)) {
    app_->add_option("--config", config_path_, "JSON file with option values");
  }

  CLI::App* app() { return app_; }

  template <class T>
  CLI::Option* option(const std::string& key, T& var, const std::string& desc) {
    CLI::Option* opt = app_->add_option("--" + key, var, desc)->capture_default_str();
    bindings_[key] = Binding{opt, [&var](const json& j) { var = j.get<T>(); }, [&var] { return json(var); }};
    return opt;
  }

  CLI::Option* flag(const std::string& key, bool& var, const std::string& desc) {
    CLI::Option* opt = app_->add_flag("--" + key, var, desc);
    bindings_[key] = Binding{opt, [&var](const json& j) { var = j.get<bool>(); }, [&var] { return json(var); }};
    return opt;
  }

  // Apply the config file (if any) and echo the effective configuration to
  // the log stream.
  void resolve() {
    if (!config_path_.empty()) {
      std::ifstream f(config_path_);
      require(static_cast<bool>(f), ErrorCode::ConfigError, "cannot read config file '" + config_path_ + "'");
      json j;
      try {
        j = json::parse(f);
      } catch (const json::exception& e) {
        fail(ErrorCode::ConfigError, "config file is not valid JSON: " + std::string(e.what()));
      }
      require(j.is_object(), ErrorCode::ConfigError, "config file must hold a JSON object");
      for (const auto& [key, value] : j.items()) {
        const auto it = bindings_.find(key);
        if (it == bindings_.end()) fail(ErrorCode::ConfigError, "unknown config key '" + key + "'");
        if (it->second.opt->count() > 0) continue;
        try {
          it->second.set(value);
        } catch (const json::exception&) {
          fail(ErrorCode::ConfigError, "config key '" + key + "' has the wrong type");
        }
      }
    }
    json eff = json::object();
    for (const auto& [key, b] : bindings_) eff[key] = b.get();
    std::cerr << json{{"command", app_->get_name()}, {"config", eff}}.dump() << "\n";
  }

 private:
  struct Binding {
    CLI::Option* opt;
    std::function<void(const json&)> set;
    std::function<json()> get;
  };
  CLI::App* app_;
  std::string config_path_;
  std::map<std::string, Binding> bindings_;
};

std::optional<int> parse_cadence(const std::string& s) {
  if (s == "none" || s == "None") return std::nullopt;
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos == s.size() && v >= 1) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorCode::ConfigError, "invalid cadence '" + s + "' (expected none or a positive integer)");
}

void emit(const json& j, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream f(out_path);
  require(static_cast<bool>(f), ErrorCode::IoError, "cannot write '" + out_path + "'");
  f << j.dump(2) << "\n";
}

LabeledFeatures limit(LabeledFeatures d, int n) {
  if (n > 0 && static_cast<std::size_t>(n) < d.size()) {
    d.features.resize(static_cast<std::size_t>(n));
    d.labels.resize(static_cast<std::size_t>(n));
  }
  return d;
}

// Test split of `source`, standardized with the statistics stored in a model.
LabeledFeatures eval_features(const std::string& source, std::uint64_t seed, int classes, const FeatureStats& stats,
                              int max_items) {
  DataOptions opt;
  opt.synth_classes = classes;
  opt.train_per_class = 0;
  auto raw = load_raw(source, seed, opt);
  return limit(standardize_all(raw.test, stats), max_items);
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string method = "none";
  int bw = 8, ba = 8;
  std::int64_t steps = 5000;
  std::uint64_t seed = 1;
  std::string data = "synth";
  std::uint64_t data_seed = 7;
  int classes = 4;
  int train_per_class = 400;
  int test_per_class = 100;
  int batch = 32;
  double lambda = -1.0;
  double c_a = 2.0;
  std::int64_t checkpoint_every = 0;
  std::string out = "model.fxck";
  std::string log_file;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg;
  cfg.total_steps = a.steps;
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  cfg.fq.method = parse_qat_method(a.method);
  cfg.fq.enabled = cfg.fq.method != QatMethod::None;
  cfg.fq.b_w = BitWidth(a.bw);
  cfg.fq.b_a = BitWidth(a.ba);
  cfg.fq.c_a = a.c_a;
  cfg.fq.lambda_reg = a.lambda >= 0.0 ? a.lambda : FakeQuantConfig::default_lambda(cfg.fq.method);
  cfg.checkpoint_every = a.checkpoint_every;
  if (a.checkpoint_every > 0) cfg.checkpoint_dir = a.out + ".steps";
  cfg.validate();

  DataOptions opt{a.classes, a.train_per_class, a.test_per_class};
  const auto data = load_dataset(a.data, a.data_seed, opt);
  std::cerr << "data: " << data.train.size() << " train / " << data.test.size() << " test clips, "
            << data.train.num_classes << " classes\n";
  const std::string log_path = a.log_file.empty() ? a.out + ".log.jsonl" : a.log_file;
  std::ofstream log(log_path);
  require(static_cast<bool>(log), ErrorCode::IoError, "cannot write '" + log_path + "'");
  cfg.log = &log;
  cfg.log_every = 100;
  cfg.eval_set = &data.test;
  TrainSummary summary;
  const auto model = train(ModelSpec::kws(data.train.num_classes), data.train, data.stats, cfg, &summary);
  save_checkpoint(a.out, model, summary.steps);
  const double acc = evaluate_accuracy(model, data.test);
  std::cout << json{{"schema", "fxqat.train/1"},
                    {"checkpoint", a.out},
                    {"log", log_path},
                    {"method", a.method},
                    {"b_w", a.bw},
                    {"b_a", a.ba},
                    {"steps", summary.steps},
                    {"seconds", summary.seconds},
                    {"final_ce_loss", summary.final_ce_loss},
                    {"initial_reg_loss", summary.initial_reg_loss},
                    {"final_reg_loss", summary.final_reg_loss},
                    {"test_accuracy", acc}}
                   .dump(2)
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ExportArgs {
  std::string checkpoint;
  std::string out = "model.fxpm";
  bool ptq = false;
  int bits = 16;
  std::string data = "synth";
  std::uint64_t data_seed = 7;
  int calib = 256;
  bool json_out = false;
};

json layer_table_json(const FxpModel& m) {
  json rows = json::array();
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& L = m.layers[l];
    rows.push_back({{"layer", l},
                    {"weight_bits", L.weights.b.bits()},
                    {"weight_q", L.weights.q.frac_bits()},
                    {"in_q", L.in_q},
                    {"acc_q", L.acc_q},
                    {"out_q", L.classifier ? json(nullptr) : json(L.out_q)},
                    {"out_shift", L.classifier ? json(nullptr) : json(L.out_shift)}});
  }
  return rows;
}

int cmd_export(const ExportArgs& a) {
  const TrainedModel tm = load_checkpoint(a.checkpoint);
  FxpModel m;
  if (a.ptq) {
    DataOptions opt;
    opt.synth_classes = tm.spec.num_classes;
    opt.test_per_class = 0;
    auto raw = load_raw(a.data, a.data_seed, opt);
    const auto calib = limit(standardize_all(raw.train, tm.stats), a.calib);
    m = export_ptq(tm, calib.features, BitWidth(a.bits));
  } else {
    m = export_model(tm);
  }
  save_fxp_model(a.out, m);
  const FxpModel back = load_fxp_model(a.out);

  // Round-trip verification: QAT weights against the fake-quantized training
  // weights (expected exact), PTQ weights against the folded floating-point
  // weights (grid error).
  double max_err = 0.0;
  const auto eff = effective_blocks(tm);
  for (std::size_t l = 0; l < back.layers.size(); ++l) {
    const auto& L = back.layers[l];
    std::vector<double> ref = eff[l].weights;
    if (back.mode == EngineMode::PtqPerLayer && tm.spec.blocks[l].bn_relu) {
      const auto& p = tm.blocks[l];
      const std::vector<double> bias(p.bias.begin(), p.bias.end());
      ref = fold_batchnorm(ref, bias, p.bn).weights;
    }
    for (std::size_t i = 0; i < L.weights.codes.size(); ++i) {
      const FxpCode c{L.weights.codes[i], L.weights.b, L.weights.q};
      const double w = back.mode == EngineMode::QatUniform ? dequantize_unit(c) : dequantize_qformat(c);
      max_err = std::max(max_err, std::abs(w - ref[i]));
    }
  }
  const bool identical = fxp_model_bytes(back) == fxp_model_bytes(m);

  json report = {{"schema", "fxqat.export/1"},
                 {"model", a.out},
                 {"mode", to_string(m.mode)},
                 {"max_export_error", max_err},
                 {"file_roundtrip_identical", identical},
                 {"layers", layer_table_json(m)}};
  if (m.mode == EngineMode::PtqPerLayer) report["common_activation_q"] = m.ptq_common_q;
  if (a.json_out) {
    std::cout << report.dump(2) << "\n";
  } else {
    std::cout << "exported " << a.out << " (" << to_string(m.mode) << ", " << m.layers.size() << " layers)\n";
    std::cout << "max export error: " << max_err << "\n";
    std::cout << "file round-trip identical: " << (identical ? "true" : "false") << "\n";
    std::cout << "layer  w_bits  w_q  in_q  acc_q  out_q\n";
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      const auto& L = m.layers[l];
      std::printf("%5zu  %6d  %3d  %4d  %5d  %5s\n", l, L.weights.b.bits(), L.weights.q.frac_bits(), L.in_q, L.acc_q,
                  L.classifier ? "-" : std::to_string(L.out_q).c_str());
    }
    if (m.mode == EngineMode::PtqPerLayer) std::cout << "common activation q: " << m.ptq_common_q << "\n";
  }
  if (m.mode == EngineMode::QatUniform && max_err != 0.0)
    throw AssertionFailure("exported weights differ from the fake-quantized training weights");
  if (!identical) throw AssertionFailure("FXPM file did not round-trip");
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::string model;
  std::string checkpoint;
  std::string wav;
  std::string data = "synth";
  std::uint64_t data_seed = 7;
  int limit = 0;
  int acc_bits = 16;
  int buffer_bits = 32;
  std::string cadence = "none";
  bool oracle = false;
  bool json_out = false;
  std::string out;
};

int cmd_infer(const InferArgs& a) {
  const FxpModel m = load_fxp_model(a.model);
  AccumulatorConfig cfg{a.acc_bits, a.buffer_bits, parse_cadence(a.cadence)};
  cfg.validate();
  if (!a.wav.empty()) {
    const auto fm = standardize(window76(lfbe64(read_wav(a.wav))), m.stats);
    const auto r = infer(m, fm, cfg);
    std::int64_t corrupted = 0;
    for (const auto& c : r.counts) corrupted += c.corrupted;
    const json j = {{"schema", "fxqat.infer/1"},
                    {"input", a.wav},
                    {"posteriors", r.posteriors},
                    {"predicted", argmax(r.posteriors)},
                    {"corrupted_activations", corrupted}};
    if (a.json_out || !a.out.empty()) emit(j, a.out);
    else std::cout << "predicted class " << argmax(r.posteriors) << " (p=" << r.posteriors[argmax(r.posteriors)]
                   << "), corrupted activations " << corrupted << "\n";
    return kExitOk;
  }
  const auto data = eval_features(a.data, a.data_seed, m.spec.num_classes, m.stats, a.limit);
  const auto reports = profile_saturations(m, data.features, {cfg.flush_cadence}, cfg.acc_bits, cfg.buffer_bits);
  const double acc = accuracy_of(predict_fxp(m, data, cfg), data.labels);
  json j = {{"schema", "fxqat.infer/1"},
            {"inputs", data.size()},
            {"accuracy", acc},
            {"saturation", to_json(reports.front())}};
  std::optional<OracleReport> oracle;
  if (a.oracle) {
    require(!a.checkpoint.empty(), ErrorCode::ConfigError, "--oracle needs --checkpoint (the trained model)");
    require(m.mode == EngineMode::QatUniform, ErrorCode::ConfigError, "--oracle applies to QAT exports");
    const TrainedModel tm = load_checkpoint(a.checkpoint);
    oracle = verify_against_reference(tm, m, data.features, cfg);
    j["oracle"] = {{"bit_exact", oracle->bit_exact},
                   {"inputs", oracle->inputs},
                   {"mismatching_inputs", oracle->mismatches},
                   {"max_posterior_diff", oracle->max_posterior_diff},
                   {"argmax_equal", oracle->argmax_equal}};
    if (!oracle->bit_exact)
      j["oracle"]["first_divergence"] = {{"input", oracle->first_divergent_input},
                                         {"layer", oracle->first_divergent_layer},
                                         {"reference_code", oracle->first_reference_code},
                                         {"engine_code", oracle->first_engine_code}};
  }
  if (a.json_out || !a.out.empty()) {
    emit(j, a.out);
  } else {
    std::cout << "inputs: " << data.size() << "\naccuracy: " << acc << "\n";
    std::cout << saturation_table(reports);
    if (oracle) {
      std::cout << "bit-exact: " << (oracle->bit_exact ? "true" : "false") << "\n";
      if (!oracle->bit_exact)
        std::cout << "first divergence: input " << oracle->first_divergent_input << ", layer "
                  << oracle->first_divergent_layer << ", reference code " << oracle->first_reference_code
                  << ", engine code " << oracle->first_engine_code << "\n";
    }
  }
  if (oracle && !oracle->bit_exact) throw AssertionFailure("integer inference diverged from the reference pass");
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ProfileArgs {
  std::string model;
  std::string data = "synth";
  std::uint64_t data_seed = 7;
  int limit = 200;
  int acc_bits = 16;
  int buffer_bits = 32;
  std::vector<std::string> cadences{"none", "512", "256", "128", "64", "32", "16"};
  bool json_out = false;
  std::string out;
};

int cmd_profile(const ProfileArgs& a) {
  const FxpModel m = load_fxp_model(a.model);
  std::vector<std::optional<int>> cads;
  for (const auto& c : a.cadences) cads.push_back(parse_cadence(c));
  const auto data = eval_features(a.data, a.data_seed, m.spec.num_classes, m.stats, a.limit);
  const auto reports = profile_saturations(m, data.features, cads, a.acc_bits, a.buffer_bits);
  bool monotone = true;
  for (std::size_t i = 1; i < reports.size(); ++i)
    if (reports[i].total_corrupted() > reports[i - 1].total_corrupted()) monotone = false;
  std::vector<std::pair<std::string, InstructionProfile>> rows;
  json sat = json::array(), instr = json::array();
  for (const auto& r : reports) sat.push_back(to_json(r));
  for (const auto& c : cads) {
    AccumulatorConfig cfg{a.acc_bits, a.buffer_bits, c};
    const auto p = instruction_profile(m, 1, cfg);
    rows.emplace_back(to_string(m.mode) + " cadence " + cfg.cadence_label(), p);
    json pj = to_json(p);
    pj["cadence"] = cfg.cadence_label();
    instr.push_back(pj);
  }
  const json j = {{"schema", "fxqat.profile/1"},
                  {"inputs", data.size()},
                  {"saturation", sat},
                  {"monotone_non_increasing", monotone},
                  {"instructions", instr}};
  if (a.json_out || !a.out.empty()) {
    emit(j, a.out);
  } else {
    std::cout << "inputs: " << data.size() << ", acc_bits " << a.acc_bits << "\n" << saturation_table(reports);
    std::cout << "totals non-increasing with finer flushing: " << (monotone ? "true" : "false") << "\n\n";
    std::cout << instruction_table(rows);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct GridArgs {
  std::string data = "synth";
  std::uint64_t data_seed = 7;
  int classes = 4;
  std::string method = "acr";
  std::vector<int> wbits{8, 4};
  std::vector<int> abits{8, 4};
  std::int64_t steps = 5000;
  std::uint64_t seed = 1;
  int batch = 32;
  bool json_out = false;
  std::string out;
};

int cmd_eval_grid(const GridArgs& a) {
  const auto method = parse_qat_method(a.method);
  require(method != QatMethod::None, ErrorCode::ConfigError, "eval-grid needs --method sqwd or acr");
  for (int b : a.wbits) (void)BitWidth(b);
  for (int b : a.abits) (void)BitWidth(b);
  TrainConfig base;
  base.total_steps = a.steps;
  base.seed = a.seed;
  base.batch_size = a.batch;
  base.validate();
  DataOptions opt;
  opt.synth_classes = a.classes;
  const auto data = load_dataset(a.data, a.data_seed, opt);
  const auto g = eval_grid(data, a.wbits, a.abits, method, base, &std::cerr);
  if (a.json_out || !a.out.empty()) emit(to_json(g), a.out);
  else std::cout << grid_table(g);
  return kExitOk;
}

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::ConfigError:
    case ErrorCode::InvalidInput:
    case ErrorCode::InvalidStep:
      return kExitUsage;
    default:
      return kExitData;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fixed-point keyword spotting: quantization-aware training and integer inference"};
  app.require_subcommand(1);

  TrainArgs ta;
  Command train_cmd(app, "train", "Train a model and write a checkpoint");
  train_cmd.option("method", ta.method, "QAT method")->check(CLI::IsMember({"none", "sqwd", "acr"}));
  train_cmd.option("bw", ta.bw, "Weight bit width");
  train_cmd.option("ba", ta.ba, "Activation bit width");
  train_cmd.option("steps", ta.steps, "Training steps");
  train_cmd.option("seed", ta.seed, "Training seed");
  train_cmd.option("data", ta.data, "synth or gsc:<dir>");
  train_cmd.option("data-seed", ta.data_seed, "Seed of the synthetic data set");
  train_cmd.option("classes", ta.classes, "Classes of the synthetic data set");
  train_cmd.option("train-per-class", ta.train_per_class, "Synthetic training clips per class");
  train_cmd.option("test-per-class", ta.test_per_class, "Synthetic test clips per class");
  train_cmd.option("batch", ta.batch, "Batch size");
  train_cmd.option("lambda", ta.lambda, "Regularizer weight (negative: method default)");
  train_cmd.option("c-a", ta.c_a, "Activation clip (power of two for export)");
  train_cmd.option("checkpoint-every", ta.checkpoint_every, "Intermediate checkpoint period in steps (0: off)");
  train_cmd.option("out", ta.out, "Checkpoint path");
  train_cmd.option("log-file", ta.log_file, "Training log (JSON lines); default <out>.log.jsonl");

  ExportArgs ea;
  Command export_cmd(app, "export", "Export a checkpoint to an integer model file");
  export_cmd.option("checkpoint", ea.checkpoint, "Checkpoint to export")->required();
  export_cmd.option("out", ea.out, "FXPM output path");
  export_cmd.flag("ptq", ea.ptq, "Post-training quantization of a floating-point checkpoint");
  export_cmd.option("bits", ea.bits, "PTQ bit width");
  export_cmd.option("data", ea.data, "PTQ calibration data: synth or gsc:<dir>");
  export_cmd.option("data-seed", ea.data_seed, "Seed of the synthetic data set");
  export_cmd.option("calib", ea.calib, "PTQ calibration clips");
  export_cmd.flag("json", ea.json_out, "Print the report as JSON");

  InferArgs ia;
  Command infer_cmd(app, "infer", "Run integer inference");
  infer_cmd.option("model", ia.model, "FXPM model")->required();
  infer_cmd.option("checkpoint", ia.checkpoint, "Trained checkpoint (for --oracle)");
  infer_cmd.option("wav", ia.wav, "Classify one 16 kHz PCM16 WAV file");
  infer_cmd.option("data", ia.data, "Evaluation data: synth or gsc:<dir>");
  infer_cmd.option("data-seed", ia.data_seed, "Seed of the synthetic data set");
  infer_cmd.option("limit", ia.limit, "Evaluate at most this many clips (0: all)");
  infer_cmd.option("acc-bits", ia.acc_bits, "Accumulator width");
  infer_cmd.option("buffer-bits", ia.buffer_bits, "Flush buffer width");
  infer_cmd.option("cadence", ia.cadence, "Flush cadence in MACs, or none");
  infer_cmd.flag("oracle", ia.oracle, "Check every layer against the floating-point reference pass");
  infer_cmd.flag("json", ia.json_out, "Print JSON");
  infer_cmd.option("out", ia.out, "Write the JSON report here");

  ProfileArgs pa;
  Command profile_cmd(app, "profile", "Saturation and instruction profiles");
  profile_cmd.option("model", pa.model, "FXPM model")->required();
  profile_cmd.option("data", pa.data, "Profiling data: synth or gsc:<dir>");
  profile_cmd.option("data-seed", pa.data_seed, "Seed of the synthetic data set");
  profile_cmd.option("limit", pa.limit, "Profile at most this many clips (0: all)");
  profile_cmd.option("acc-bits", pa.acc_bits, "Accumulator width");
  profile_cmd.option("buffer-bits", pa.buffer_bits, "Flush buffer width");
  profile_cmd.option("cadence", pa.cadences, "Comma-separated flush cadences")->delimiter(',');
  profile_cmd.flag("json", pa.json_out, "Print JSON");
  profile_cmd.option("out", pa.out, "Write the JSON report here");

  GridArgs ga;
  Command grid_cmd(app, "eval-grid", "Accuracy over weight x activation precisions");
  grid_cmd.option("data", ga.data, "synth or gsc:<dir>");
  grid_cmd.option("data-seed", ga.data_seed, "Seed of the synthetic data set");
  grid_cmd.option("classes", ga.classes, "Classes of the synthetic data set");
  grid_cmd.option("method", ga.method, "QAT method")->check(CLI::IsMember({"sqwd", "acr"}));
  grid_cmd.option("wbits", ga.wbits, "Weight bit widths")->delimiter(',');
  grid_cmd.option("abits", ga.abits, "Activation bit widths")->delimiter(',');
  grid_cmd.option("steps", ga.steps, "Training steps per cell");
  grid_cmd.option("seed", ga.seed, "Training seed");
  grid_cmd.option("batch", ga.batch, "Batch size");
  grid_cmd.flag("json", ga.json_out, "Print JSON");
  grid_cmd.option("out", ga.out, "Write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd.app()) {
      train_cmd.resolve();
      return cmd_train(ta);
    }
    if (*export_cmd.app()) {
      export_cmd.resolve();
      return cmd_export(ea);
    }
    if (*infer_cmd.app()) {
      infer_cmd.resolve();
      return cmd_infer(ia);
    }
    if (*profile_cmd.app()) {
      profile_cmd.resolve();
      return cmd_profile(pa);
    }
    if (*grid_cmd.app()) {
      grid_cmd.resolve();
      return cmd_eval_grid(ga);
    }
  } catch (const AssertionFailure& e) {
    std::cerr << "assertion failed: " << e.what() << "\n";
    return kExitAssert;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
