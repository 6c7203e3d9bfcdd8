#pragma once

// Audio front end: LFBE-64 features (25 ms Hann window, 10 ms hop, 512-point
// FFT magnitude, 64 HTK mel triangles over 20-7600 Hz, natural log floored
// at 1e-10), fixed 76-frame windows, standardization statistics, a seeded
// synthetic keyword dataset and the Speech Commands v2 directory reader.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "fxqat/container.hpp"
#include "fxqat/error.hpp"

namespace fxqat {

inline constexpr int kSampleRate = 16000;
inline constexpr int kFrameLength = 400;  // 25 ms
inline constexpr int kFrameShift = 160;   // 10 ms
inline constexpr int kFftSize = 512;
inline constexpr int kMelBins = 64;
inline constexpr int kWindowFrames = 76;
inline constexpr double kMelLowHz = 20.0;
inline constexpr double kMelHighHz = 7600.0;
inline constexpr double kLogFloor = 1e-10;

struct AudioClip {
  std::vector<std::int16_t> samples;
  int sample_rate = kSampleRate;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct FeatureMatrix {
  int frames = 0;
  std::vector<float> values;  // frames x kMelBins, row-major

  float at(int t, int bin) const { return values[static_cast<std::size_t>(t) * kMelBins + bin]; }
  float& at(int t, int bin) { return values[static_cast<std::size_t>(t) * kMelBins + bin]; }
};

inline int lfbe_frame_count(std::size_t num_samples) {
  if (num_samples < static_cast<std::size_t>(kFrameLength)) return 0;
  return static_cast<int>((num_samples - kFrameLength) / kFrameShift) + 1;
}

namespace detail {

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

struct MelBank {
  // For every FFT bin, up to two (filter, weight) contributions.
  std::vector<std::vector<std::pair<int, double>>> bin_weights;
  std::vector<double> window;

  MelBank() : bin_weights(kFftSize / 2 + 1), window(kFrameLength) {
    const double mel_lo = hz_to_mel(kMelLowHz);
    const double mel_hi = hz_to_mel(kMelHighHz);
    const double step = (mel_hi - mel_lo) / (kMelBins + 1);
    for (int k = 0; k <= kFftSize / 2; ++k) {
      const double mel = hz_to_mel(static_cast<double>(k) * kSampleRate / kFftSize);
      for (int m = 0; m < kMelBins; ++m) {
        const double left = mel_lo + m * step;
        const double center = left + step;
        const double right = center + step;
        double w = 0.0;
        if (mel > left && mel <= center) w = (mel - left) / step;
        else if (mel > center && mel < right) w = (right - mel) / step;
        if (w > 0.0) bin_weights[k].emplace_back(m, w);
      }
    }
    // Symmetric Hann.
    for (int n = 0; n < kFrameLength; ++n)
      window[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / (kFrameLength - 1));
  }
};

inline const MelBank& mel_bank() {
  static const MelBank bank;
  return bank;
}

}  // namespace detail

inline FeatureMatrix lfbe64(const AudioClip& clip) {
  require(clip.sample_rate == kSampleRate, ErrorCode::InvalidInput, "lfbe64 expects 16 kHz audio");
  require(clip.samples.size() >= static_cast<std::size_t>(kFrameLength), ErrorCode::TooShort,
          "clip shorter than one 25 ms analysis window");
  const auto& bank = detail::mel_bank();
  FeatureMatrix fm;
  fm.frames = lfbe_frame_count(clip.samples.size());
  fm.values.assign(static_cast<std::size_t>(fm.frames) * kMelBins, 0.0f);

  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> frame(kFftSize, 0.0);
  std::vector<std::complex<double>> spectrum;
  std::vector<double> energies(kMelBins);
  for (int t = 0; t < fm.frames; ++t) {
    const std::size_t start = static_cast<std::size_t>(t) * kFrameShift;
    for (int n = 0; n < kFrameLength; ++n)
      frame[n] = bank.window[n] * (static_cast<double>(clip.samples[start + n]) / 32768.0);
    std::fill(frame.begin() + kFrameLength, frame.end(), 0.0);
    fft.fwd(spectrum, frame);
    std::fill(energies.begin(), energies.end(), 0.0);
    for (int k = 0; k <= kFftSize / 2; ++k) {
      const double mag = std::abs(spectrum[k]);
      for (const auto& [m, w] : bank.bin_weights[k]) energies[m] += w * mag;
    }
    for (int m = 0; m < kMelBins; ++m)
      fm.at(t, m) = static_cast<float>(std::log(std::max(energies[m], kLogFloor)));
  }
  return fm;
}

// Center-crop or symmetrically pad (with the log floor) to kWindowFrames.
inline FeatureMatrix window76(const FeatureMatrix& fm) {
  FeatureMatrix out;
  out.frames = kWindowFrames;
  out.values.assign(static_cast<std::size_t>(kWindowFrames) * kMelBins, static_cast<float>(std::log(kLogFloor)));
  if (fm.frames >= kWindowFrames) {
    const int offset = (fm.frames - kWindowFrames) / 2;
    std::copy_n(fm.values.begin() + static_cast<std::ptrdiff_t>(offset) * kMelBins,
                static_cast<std::size_t>(kWindowFrames) * kMelBins, out.values.begin());
  } else {
    const int pad_front = (kWindowFrames - fm.frames) / 2;
    std::copy(fm.values.begin(), fm.values.end(),
              out.values.begin() + static_cast<std::ptrdiff_t>(pad_front) * kMelBins);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Standardization

struct FeatureStats {
  std::vector<double> mean;  // per mel bin
  std::vector<double> std;   // per mel bin, floored
  double max_abs = 0.0;      // largest |standardized value| on the source split
  std::string split = "train";
};

inline constexpr double kStdFloor = 1e-6;

inline FeatureStats compute_stats(std::span<const FeatureMatrix> data, const std::string& split = "train") {
  require(!data.empty(), ErrorCode::InvalidInput, "compute_stats on empty data");
  FeatureStats s;
  s.split = split;
  s.mean.assign(kMelBins, 0.0);
  s.std.assign(kMelBins, 0.0);
  std::size_t n = 0;
  for (const auto& fm : data) {
    for (int t = 0; t < fm.frames; ++t)
      for (int b = 0; b < kMelBins; ++b) s.mean[b] += fm.at(t, b);
    n += static_cast<std::size_t>(fm.frames);
  }
  for (auto& m : s.mean) m /= static_cast<double>(n);
  for (const auto& fm : data)
    for (int t = 0; t < fm.frames; ++t)
      for (int b = 0; b < kMelBins; ++b) {
        const double d = fm.at(t, b) - s.mean[b];
        s.std[b] += d * d;
      }
  for (auto& v : s.std) v = std::max(std::sqrt(v / static_cast<double>(n)), kStdFloor);
  for (const auto& fm : data)
    for (int t = 0; t < fm.frames; ++t)
      for (int b = 0; b < kMelBins; ++b)
        s.max_abs = std::max(s.max_abs, std::abs((fm.at(t, b) - s.mean[b]) / s.std[b]));
  return s;
}

// Statistics must come from the training split; anything else is rejected.
inline FeatureMatrix standardize(const FeatureMatrix& fm, const FeatureStats& stats) {
  require(stats.split == "train", ErrorCode::InvalidInput,
          "standardize: statistics computed on split '" + stats.split + "', expected frozen training statistics");
  require(stats.mean.size() == kMelBins && stats.std.size() == kMelBins, ErrorCode::ShapeError,
          "standardize: statistics have wrong bin count");
  FeatureMatrix out = fm;
  for (int t = 0; t < fm.frames; ++t)
    for (int b = 0; b < kMelBins; ++b)
      out.at(t, b) = static_cast<float>((fm.at(t, b) - stats.mean[b]) / stats.std[b]);
  return out;
}

inline json stats_to_json(const FeatureStats& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"max_abs", s.max_abs}, {"split", s.split}};
}

inline FeatureStats stats_from_json(const json& j) {
  FeatureStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.std = j.at("std").get<std::vector<double>>();
  s.max_abs = j.at("max_abs").get<double>();
  s.split = j.at("split").get<std::string>();
  return s;
}

// ---------------------------------------------------------------------------
// Labeled data

struct LabeledClip {
  AudioClip clip;
  int label = 0;
  std::string source;  // file path or synthetic id
};

struct LabeledFeatures {
  std::vector<FeatureMatrix> features;  // each 76 x 64
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
};

inline LabeledFeatures extract_features(std::span<const LabeledClip> clips, int num_classes) {
  LabeledFeatures out;
  out.num_classes = num_classes;
  out.features.reserve(clips.size());
  out.labels.reserve(clips.size());
  for (const auto& c : clips) {
    out.features.push_back(window76(lfbe64(c.clip)));
    out.labels.push_back(c.label);
  }
  return out;
}

inline LabeledFeatures standardize_all(const LabeledFeatures& data, const FeatureStats& stats) {
  LabeledFeatures out;
  out.num_classes = data.num_classes;
  out.labels = data.labels;
  out.features.reserve(data.size());
  for (const auto& fm : data.features) out.features.push_back(standardize(fm, stats));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic keyword set. Class 0 is noise only; class k >= 1 is a chirp with
// a class-specific frequency trajectory buried in white noise. Randomness
// comes from mt19937_64 bit streams only, so clips are reproducible across
// standard libraries (libm differences in sin/log stay within a few ULP).

namespace detail {

class SynthRng {
 public:
  explicit SynthRng(std::uint64_t seed) : gen_(seed) {}

  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace detail

struct SynthOptions {
  double clip_seconds = 1.0;
  double snr_db_min = 5.0;
  double snr_db_max = 20.0;
};

inline AudioClip synth_clip(std::uint64_t seed, int label, int n_classes, const SynthOptions& opt = {}) {
  detail::SynthRng rng(seed);
  const auto n = static_cast<std::size_t>(opt.clip_seconds * kSampleRate);
  std::vector<double> signal(n, 0.0);
  const double noise_rms = 0.02 * std::pow(10.0, rng.uniform(-0.5, 0.5));
  if (label > 0) {
    // Trajectories spread over 300-6000 Hz; odd classes rise, even classes fall.
    const double span = 5700.0 / std::max(1, n_classes - 1);
    const double base = 300.0 + (label - 1) * span;
    double f0 = base + 0.15 * span * rng.uniform();
    double f1 = base + 0.85 * span * rng.uniform(0.8, 1.0) + 1200.0;
    if (label % 2 == 0) std::swap(f0, f1);
    const double dur = rng.uniform(0.35, 0.55);
    const double onset = rng.uniform(0.15, 0.95 - dur) * opt.clip_seconds;
    const double snr_db = rng.uniform(opt.snr_db_min, opt.snr_db_max);
    const double amp = noise_rms * std::sqrt(2.0) * std::pow(10.0, snr_db / 20.0);
    const auto i0 = static_cast<std::size_t>(onset * kSampleRate);
    const auto len = static_cast<std::size_t>(dur * kSampleRate);
    double phase = 0.0;
    for (std::size_t i = 0; i < len && i0 + i < n; ++i) {
      const double frac = static_cast<double>(i) / static_cast<double>(len);
      const double f = f0 + (f1 - f0) * frac;
      phase += 2.0 * std::numbers::pi * f / kSampleRate;
      const double env = std::sin(std::numbers::pi * frac);  // smooth on/off
      signal[i0 + i] = amp * env * std::sin(phase);
    }
  }
  AudioClip clip;
  clip.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = (signal[i] + noise_rms * rng.normal()) * 32768.0;
    clip.samples[i] = static_cast<std::int16_t>(std::clamp(std::round(v), -32768.0, 32767.0));
  }
  return clip;
}

inline std::vector<LabeledClip> synth_dataset(std::uint64_t seed, int n_per_class, int n_classes,
                                              const SynthOptions& opt = {}) {
  require(n_classes >= 2, ErrorCode::InvalidInput, "synth_dataset needs at least two classes");
  require(n_per_class >= 0, ErrorCode::InvalidInput, "synth_dataset: negative clip count");
  std::vector<LabeledClip> out;
  out.reserve(static_cast<std::size_t>(n_per_class) * n_classes);
  for (int i = 0; i < n_per_class; ++i) {
    for (int k = 0; k < n_classes; ++k) {
      const std::uint64_t clip_seed = detail::mix_seed(detail::mix_seed(seed, static_cast<std::uint64_t>(k)),
                                                       static_cast<std::uint64_t>(i));
      out.push_back(LabeledClip{synth_clip(clip_seed, k, n_classes, opt), k,
                                "synth:" + std::to_string(seed) + "/" + std::to_string(k) + "/" + std::to_string(i)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// WAV (PCM16) I/O

inline AudioClip read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCode::IoError, "cannot open '" + path + "'");
  std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  auto u32 = [&](std::size_t o) { return static_cast<std::uint32_t>(detail::get_le(b.data() + o, 4)); };
  auto u16 = [&](std::size_t o) { return static_cast<std::uint16_t>(detail::get_le(b.data() + o, 2)); };
  require(b.size() >= 12 && std::memcmp(b.data(), "RIFF", 4) == 0 && std::memcmp(b.data() + 8, "WAVE", 4) == 0,
          ErrorCode::FormatError, "'" + path + "' is not a RIFF/WAVE file");
  int channels = 0, rate = 0, bits = 0, format = 0;
  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    const std::uint32_t size = u32(pos + 4);
    const std::size_t body = pos + 8;
    require(body + size <= b.size(), ErrorCode::FormatError, "'" + path + "': chunk runs past end of file");
    if (std::memcmp(b.data() + pos, "fmt ", 4) == 0) {
      require(size >= 16, ErrorCode::FormatError, "'" + path + "': short fmt chunk");
      format = u16(body);
      channels = u16(body + 2);
      rate = static_cast<int>(u32(body + 4));
      bits = u16(body + 14);
    } else if (std::memcmp(b.data() + pos, "data", 4) == 0) {
      require(format == 1 && bits == 16, ErrorCode::FormatError, "'" + path + "': only PCM16 is supported");
      require(channels >= 1, ErrorCode::FormatError, "'" + path + "': no channels");
      AudioClip clip;
      clip.sample_rate = rate;
      const std::size_t frames = size / (2u * static_cast<std::size_t>(channels));
      clip.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        std::int64_t acc = 0;
        for (int c = 0; c < channels; ++c)
          acc += static_cast<std::int16_t>(u16(body + 2 * (i * static_cast<std::size_t>(channels) + c)));
        clip.samples[i] = static_cast<std::int16_t>(acc / channels);  // downmix
      }
      return clip;
    }
    pos = body + size + (size & 1u);
  }
  fail(ErrorCode::FormatError, "'" + path + "': no data chunk");
}

inline void write_wav(const std::string& path, const AudioClip& clip) {
  std::vector<std::uint8_t> b;
  auto tag = [&](const char* s) { b.insert(b.end(), s, s + 4); };
  const auto data_bytes = clip.samples.size() * 2;
  tag("RIFF");
  detail::put_le(b, 36 + data_bytes, 4);
  tag("WAVE");
  tag("fmt ");
  detail::put_le(b, 16, 4);
  detail::put_le(b, 1, 2);  // PCM
  detail::put_le(b, 1, 2);  // mono
  detail::put_le(b, static_cast<std::uint64_t>(clip.sample_rate), 4);
  detail::put_le(b, static_cast<std::uint64_t>(clip.sample_rate) * 2, 4);
  detail::put_le(b, 2, 2);
  detail::put_le(b, 16, 2);
  tag("data");
  detail::put_le(b, data_bytes, 4);
  for (auto s : clip.samples) detail::put_le(b, static_cast<std::uint16_t>(s), 2);
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCode::IoError, "cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// ---------------------------------------------------------------------------
// Google Speech Commands v2

struct GscSplits {
  std::vector<std::string> labels;  // sorted keyword directory names
  std::vector<LabeledClip> train, validation, test;
  std::size_t skipped = 0;
};

inline std::set<std::string> read_list_file(const std::filesystem::path& p) {
  std::ifstream f(p);
  require(static_cast<bool>(f), ErrorCode::LayoutError, "missing list file '" + p.string() + "'");
  std::set<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) out.insert(line);
  }
  return out;
}

// Reads every <keyword>/<file>.wav under root (directories starting with '_'
// are excluded) and partitions by validation_list.txt / testing_list.txt.
inline GscSplits load_gsc(const std::string& root_dir) {
  namespace fs = std::filesystem;
  const fs::path root(root_dir);
  require(fs::is_directory(root), ErrorCode::LayoutError, "'" + root_dir + "' is not a directory");
  const auto val = read_list_file(root / "validation_list.txt");
  const auto test = read_list_file(root / "testing_list.txt");

  GscSplits out;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_directory()) continue;
    const auto name = entry.path().filename().string();
    if (name.empty() || name.front() == '_' || name.front() == '.') continue;
    out.labels.push_back(name);
  }
  std::sort(out.labels.begin(), out.labels.end());
  require(!out.labels.empty(), ErrorCode::LayoutError, "no keyword directories under '" + root_dir + "'");

  for (std::size_t li = 0; li < out.labels.size(); ++li) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(root / out.labels[li]))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& path : files) {
      const std::string rel = out.labels[li] + "/" + path.filename().string();
      AudioClip clip;
      try {
        clip = read_wav(path.string());
      } catch (const Error& e) {
        std::cerr << "warning: skipping " << rel << ": " << e.what() << "\n";
        ++out.skipped;
        continue;
      }
      require(clip.sample_rate == kSampleRate, ErrorCode::FormatError,
              rel + ": expected 16 kHz, got " + std::to_string(clip.sample_rate));
      LabeledClip lc{std::move(clip), static_cast<int>(li), rel};
      if (test.count(rel)) out.test.push_back(std::move(lc));
      else if (val.count(rel)) out.validation.push_back(std::move(lc));
      else out.train.push_back(std::move(lc));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature cache

inline constexpr std::array<char, 4> kFeatureMagic{'F', 'X', 'F', 'C'};
inline constexpr std::uint16_t kFeatureVersion = 1;

inline void write_feature_cache(const std::string& path, const LabeledFeatures& data) {
  ContainerWriter w(kFeatureMagic, kFeatureVersion);
  std::vector<float> flat;
  flat.reserve(data.size() * kWindowFrames * kMelBins);
  for (const auto& fm : data.features) {
    require(fm.frames == kWindowFrames, ErrorCode::ShapeError, "feature cache expects 76-frame windows");
    flat.insert(flat.end(), fm.values.begin(), fm.values.end());
  }
  w.add_f32("features", {static_cast<int>(data.size()), kWindowFrames, kMelBins}, flat);
  w.add_int("labels", DType::I32, {static_cast<int>(data.size())}, data.labels);
  w.write_file(path, {{"schema", "fxqat.features/1"}, {"num_classes", data.num_classes}});
}

inline LabeledFeatures read_feature_cache(const std::string& path) {
  const auto r = ContainerReader::from_file(path, kFeatureMagic);
  LabeledFeatures out;
  out.num_classes = r.header().at("num_classes").get<int>();
  const auto flat = r.f32("features");
  out.labels = r.ints("labels");
  const std::size_t per = static_cast<std::size_t>(kWindowFrames) * kMelBins;
  require(flat.size() == out.labels.size() * per, ErrorCode::FormatError, "feature cache size mismatch");
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    FeatureMatrix fm;
    fm.frames = kWindowFrames;
    fm.values.assign(flat.begin() + static_cast<std::ptrdiff_t>(i * per),
                     flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    out.features.push_back(std::move(fm));
  }
  return out;
}

}  // namespace fxqat
