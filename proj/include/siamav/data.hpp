#pragma once

// Synthetic paired audio-visual data, the log-mel front-end and the dataset
// manifest.
//
// A synthetic pair draws 1..max_classes distinct classes. Class c contributes
// an oriented grating at angle pi*c/K to the image and an 8-row mel band
// centred on floor((c + 0.5) * Wa / K) to the spectrogram. Each instance also
// carries an 8-bit code (a bijection of its index) rendered with period equal
// to the patch size: along time inside the active bands, and along x as
// grating amplitude and brightness in the image. The code makes individual
// pairs, not just class sets, matchable across modalities.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numbers>
#include <type_traits>
#include <string>
#include <vector>

#include "json.hpp"
#include "siamav/io.hpp"
#include "siamav/rng.hpp"
#include "siamav/tensor.hpp"

namespace siamav {

inline constexpr int kGeneratorVersion = 1;
inline constexpr std::size_t kBandRows = 8;
inline constexpr std::size_t kCodeBits = 8;

struct SynthConfig {
  std::size_t K = 8;
  double noise_sigma = 0.05;
  std::size_t max_classes = 2;
  std::size_t image_h = 64;
  std::size_t image_w = 64;
  std::size_t audio_frames = 128;
  std::size_t audio_bins = 64;
  std::size_t patch = 16;

  void validate() const {
    if (K < 2) throw ConfigError("synthetic data needs K >= 2 classes");
    if (K > audio_bins / kBandRows) {
      throw ConfigError("K = " + std::to_string(K) + " classes do not fit " + std::to_string(audio_bins) +
                        " mel rows in separate 8-row bands");
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be nonnegative");
    if (max_classes < 1 || max_classes > K) throw ConfigError("max_classes must be in [1, K]");
    if (patch == 0 || image_h == 0 || image_w == 0 || audio_frames == 0) throw ConfigError("synthetic geometry is empty");
  }
};

template <Scalar T>
struct PairedInstance {
  Tensor<T> image;        // [Hv x Wv x 3] in [0, 1]
  Tensor<T> spectrogram;  // [frames x bins]
  std::vector<std::uint8_t> labels;  // multi-hot over K
  std::uint64_t seed = 0;
  std::uint64_t index = 0;
};

// Band centre row for class c.
inline std::size_t band_center(std::size_t c, std::size_t K, std::size_t bins) {
  return static_cast<std::size_t>(std::floor((static_cast<double>(c) + 0.5) * static_cast<double>(bins) / static_cast<double>(K)));
}

// 8-bit code of an instance; odd multiplier mod 256 is a bijection.
inline std::uint32_t instance_code(std::uint64_t index) {
  return static_cast<std::uint32_t>((index * 167u + 13u) & 0xFFu);
}

// Classes of an instance; the first draws of the instance stream.
inline std::vector<std::size_t> synth_classes(const SynthConfig& cfg, Rng& rng) {
  const std::size_t m = 1 + static_cast<std::size_t>(rng.below(cfg.max_classes));
  auto cls = rng.sample_without_replacement(cfg.K, m);
  std::sort(cls.begin(), cls.end());
  return cls;
}

inline std::vector<std::uint8_t> synth_labels(std::uint64_t seed, std::uint64_t index, const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(seed, index));
  std::vector<std::uint8_t> lab(cfg.K, 0);
  for (auto c : synth_classes(cfg, rng)) lab[c] = 1;
  return lab;
}

template <Scalar T>
PairedInstance<T> synth_pair(std::uint64_t seed, std::uint64_t index, const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(seed, index));
  const auto cls = synth_classes(cfg, rng);
  const std::size_t m = cls.size();
  const std::uint32_t code = instance_code(index);
  auto bit = [&](std::size_t t) {
    const std::size_t b = (t % cfg.patch) * kCodeBits / cfg.patch;
    return static_cast<double>((code >> b) & 1u);
  };

  const std::size_t H = cfg.image_h, W = cfg.image_w;
  const double freq = static_cast<double>(W) / 16.0;  // cycles across the image width
  std::vector<double> gray(H * W, 0.0);
  for (auto c : cls) {
    const double th = std::numbers::pi * static_cast<double>(c) / static_cast<double>(cfg.K);
    const double cs = std::cos(th), sn = std::sin(th);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double u = (static_cast<double>(x) * cs + static_cast<double>(y) * sn) / static_cast<double>(W);
        const double g = std::sin(2.0 * std::numbers::pi * freq * u);
        gray[y * W + x] += (0.25 / static_cast<double>(m)) * g * (0.5 + 0.5 * bit(x));
      }
  }
  std::vector<T> img(H * W * 3);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double base = 0.5 + gray[y * W + x] + 0.25 * (bit(x) - 0.5);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = base + cfg.noise_sigma * rng.normal();
        img[(y * W + x) * 3 + ch] = static_cast<T>(std::clamp(v, 0.0, 1.0));
      }
    }

  const std::size_t F = cfg.audio_frames, Wa = cfg.audio_bins;
  std::vector<double> spec(F * Wa, 0.0);
  for (auto c : cls) {
    const std::size_t lo = band_center(c, cfg.K, Wa) - kBandRows / 2;
    for (std::size_t j = 0; j < kBandRows; ++j) {
      const double taper = std::pow(std::sin(std::numbers::pi * (static_cast<double>(j) + 0.5) / kBandRows), 2);
      for (std::size_t t = 0; t < F; ++t) spec[t * Wa + lo + j] += (0.5 + 0.5 * bit(t)) * taper;
    }
  }
  std::vector<T> sp(F * Wa);
  for (std::size_t i = 0; i < sp.size(); ++i) sp[i] = static_cast<T>(spec[i] + cfg.noise_sigma * rng.normal());

  PairedInstance<T> out;
  out.image = Tensor<T>({H, W, 3}, std::move(img));
  out.spectrogram = Tensor<T>({F, Wa}, std::move(sp));
  out.labels.assign(cfg.K, 0);
  for (auto c : cls) out.labels[c] = 1;
  out.seed = seed;
  out.index = index;
  return out;
}

// A materialized split held in memory, stacked per modality.
template <Scalar T>
struct Dataset {
  std::vector<std::uint64_t> indices;
  std::vector<std::vector<std::uint8_t>> labels;
  std::vector<T> audio;   // n x frames x bins
  std::vector<T> visual;  // n x H x W x 3
  SynthConfig cfg;
  std::uint64_t seed = 0;

  std::size_t size() const { return indices.size(); }

  static Dataset generate(std::uint64_t seed, const std::vector<std::uint64_t>& indices, const SynthConfig& cfg) {
    Dataset d;
    d.cfg = cfg;
    d.seed = seed;
    d.indices = indices;
    for (auto i : indices) {
      auto p = synth_pair<T>(seed, i, cfg);
      d.audio.insert(d.audio.end(), p.spectrogram.data().begin(), p.spectrogram.data().end());
      d.visual.insert(d.visual.end(), p.image.data().begin(), p.image.data().end());
      d.labels.push_back(std::move(p.labels));
    }
    return d;
  }

  // Rows `rows` as [B x frames x bins] and [B x H x W x 3].
  Tensor<T> audio_batch(const std::vector<std::size_t>& rows) const {
    return gather_rows(audio, cfg.audio_frames * cfg.audio_bins, rows, {cfg.audio_frames, cfg.audio_bins});
  }
  Tensor<T> visual_batch(const std::vector<std::size_t>& rows) const {
    return gather_rows(visual, cfg.image_h * cfg.image_w * 3, rows, {cfg.image_h, cfg.image_w, 3});
  }

 private:
  static Tensor<T> gather_rows(const std::vector<T>& src, std::size_t stride, const std::vector<std::size_t>& rows,
                               Shape item) {
    std::vector<T> out;
    out.reserve(rows.size() * stride);
    for (auto r : rows) {
      if (r * stride >= src.size()) throw ContractError("dataset row " + std::to_string(r) + " out of range");
      out.insert(out.end(), src.begin() + static_cast<std::ptrdiff_t>(r * stride),
                 src.begin() + static_cast<std::ptrdiff_t>((r + 1) * stride));
    }
    item.insert(item.begin(), rows.size());
    return Tensor<T>(std::move(item), std::move(out));
  }
};

// Train ids are [0, n_train), eval ids follow. Labels are listed so class
// balance can be audited without materializing instances.
inline nlohmann::json build_manifest(std::size_t n_train, std::size_t n_eval, std::uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  if (n_eval < 2) throw ConfigError("retrieval needs at least 2 eval instances");
  nlohmann::json j;
  j["generator_version"] = kGeneratorVersion;
  j["seed"] = seed;
  j["K"] = cfg.K;
  j["synth"] = {{"noise_sigma", cfg.noise_sigma}, {"max_classes", cfg.max_classes}, {"image_h", cfg.image_h},
                {"image_w", cfg.image_w},         {"audio_frames", cfg.audio_frames}, {"audio_bins", cfg.audio_bins},
                {"patch", cfg.patch}};
  auto& inst = j["instances"] = nlohmann::json::array();
  for (std::size_t i = 0; i < n_train + n_eval; ++i) {
    std::vector<std::size_t> cls;
    const auto lab = synth_labels(seed, i, cfg);
    for (std::size_t c = 0; c < lab.size(); ++c)
      if (lab[c]) cls.push_back(c);
    inst.push_back({{"id", std::to_string(seed) + ":" + std::to_string(i)},
                    {"index", i},
                    {"split", i < n_train ? "train" : "eval"},
                    {"classes", cls}});
  }
  return j;
}

inline std::vector<std::uint64_t> manifest_split(const nlohmann::json& manifest, const std::string& split) {
  std::vector<std::uint64_t> out;
  for (const auto& i : manifest.at("instances"))
    if (i.at("split") == split) out.push_back(i.at("index").get<std::uint64_t>());
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const nlohmann::json& manifest) {
  write_file_atomic(path, manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Log-mel front-end

struct MelConfig {
  std::size_t sample_rate = 16000;
  std::size_t window = 400;
  std::size_t hop = 160;
  std::size_t n_fft = 512;
  std::size_t mel_bins = 128;
  std::size_t target_frames = 1024;
  double norm_mean = -5.081;
  double norm_std = 4.485;
  bool double_std = false;  // divide by 2*std instead of std

  void validate() const {
    if (hop == 0 || hop > window || window > n_fft) throw ConfigError("mel config needs 0 < hop <= window <= n_fft");
    if (mel_bins == 0 || target_frames == 0 || sample_rate == 0) throw ConfigError("mel config sizes must be positive");
    if (!(norm_std > 0.0)) throw ConfigError("mel normalization std must be positive");
  }
  double divisor() const { return double_std ? 2.0 * norm_std : norm_std; }
  // Normalized value of a silent frame; used for padding.
  double silence_value() const { return (std::log(1e-6) - norm_mean) / divisor(); }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Centre frequency (Hz) of mel filter b: edges are equally spaced in mel
// between 0 and Nyquist.
inline double mel_center_hz(std::size_t b, const MelConfig& cfg) {
  const double top = hz_to_mel(static_cast<double>(cfg.sample_rate) / 2.0);
  return mel_to_hz(top * static_cast<double>(b + 1) / static_cast<double>(cfg.mel_bins + 1));
}

// [mel_bins x (n_fft/2 + 1)] triangular filters. FFT bin k covers the
// frequency interval [(k - 1/2) df, (k + 1/2) df]; its weight is the mean of
// the triangle over that interval, so filters narrower than one bin still get
// positive mass.
inline std::vector<double> mel_filterbank(const MelConfig& cfg) {
  cfg.validate();
  const std::size_t nb = cfg.n_fft / 2 + 1;
  const double df = static_cast<double>(cfg.sample_rate) / static_cast<double>(cfg.n_fft);
  const double top = hz_to_mel(static_cast<double>(cfg.sample_rate) / 2.0);
  std::vector<double> edges(cfg.mel_bins + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(cfg.mel_bins + 1));
  // Integral of the triangle (lo, mid, hi) from lo to f.
  auto cumulative = [](double lo, double mid, double hi, double f) {
    if (f <= lo) return 0.0;
    if (f >= hi) return 0.5 * (hi - lo);
    if (f <= mid) return 0.5 * (f - lo) * (f - lo) / (mid - lo);
    return 0.5 * (hi - lo) - 0.5 * (hi - f) * (hi - f) / (hi - mid);
  };
  std::vector<double> fb(cfg.mel_bins * nb, 0.0);
  for (std::size_t b = 0; b < cfg.mel_bins; ++b) {
    const double lo = edges[b], mid = edges[b + 1], hi = edges[b + 2];
    for (std::size_t k = 0; k < nb; ++k) {
      const double a = (static_cast<double>(k) - 0.5) * df, z = (static_cast<double>(k) + 0.5) * df;
      fb[b * nb + k] = (cumulative(lo, mid, hi, z) - cumulative(lo, mid, hi, a)) / df;
    }
  }
  return fb;
}

inline std::size_t raw_frame_count(std::size_t samples, const MelConfig& cfg) {
  if (samples < cfg.window) return 0;
  return 1 + (samples - cfg.window) / cfg.hop;
}

struct LogMel {
  Tensor<double> features;  // [target_frames x mel_bins], normalized
  std::size_t raw_frames = 0;
};

// Hann-windowed magnitude STFT -> mel filterbank -> log(x + 1e-6) ->
// normalization -> pad with normalized silence or crop to target_frames.
inline LogMel log_mel(const std::vector<double>& wave, const MelConfig& cfg = {}) {
  cfg.validate();
  if (wave.size() <= cfg.window) {
    throw InputError("waveform of " + std::to_string(wave.size()) + " samples is not longer than the " +
                     std::to_string(cfg.window) + "-sample window");
  }
  for (std::size_t i = 0; i < wave.size(); ++i)
    if (!std::isfinite(wave[i])) throw InputError("non-finite sample at index " + std::to_string(i));

  const std::size_t nb = cfg.n_fft / 2 + 1;
  const auto fb = mel_filterbank(cfg);
  std::vector<double> hann(cfg.window);
  for (std::size_t n = 0; n < cfg.window; ++n)
    hann[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(cfg.window));

  std::unique_ptr<double, decltype(&fftw_free)> in(fftw_alloc_real(cfg.n_fft), &fftw_free);
  std::unique_ptr<fftw_complex, decltype(&fftw_free)> out(fftw_alloc_complex(nb), &fftw_free);
  std::unique_ptr<std::remove_pointer_t<fftw_plan>, decltype(&fftw_destroy_plan)> plan(
      fftw_plan_dft_r2c_1d(static_cast<int>(cfg.n_fft), in.get(), out.get(), FFTW_ESTIMATE), &fftw_destroy_plan);

  const std::size_t frames = raw_frame_count(wave.size(), cfg);
  const double pad = cfg.silence_value();
  std::vector<double> feat(cfg.target_frames * cfg.mel_bins, pad);
  std::vector<double> mag(nb);
  for (std::size_t f = 0; f < std::min(frames, cfg.target_frames); ++f) {
    std::fill(in.get(), in.get() + cfg.n_fft, 0.0);
    for (std::size_t n = 0; n < cfg.window; ++n) in.get()[n] = wave[f * cfg.hop + n] * hann[n];
    fftw_execute(plan.get());
    for (std::size_t k = 0; k < nb; ++k) mag[k] = std::hypot(out.get()[k][0], out.get()[k][1]);
    for (std::size_t b = 0; b < cfg.mel_bins; ++b) {
      double e = 0.0;
      for (std::size_t k = 0; k < nb; ++k) e += fb[b * nb + k] * mag[k];
      feat[f * cfg.mel_bins + b] = (std::log(e + 1e-6) - cfg.norm_mean) / cfg.divisor();
    }
  }
  return {Tensor<double>({cfg.target_frames, cfg.mel_bins}, std::move(feat)), frames};
}

}  // namespace siamav
