#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <set>

#include "siamav/data.hpp"

using namespace siamav;

namespace {

SynthConfig single_label(double noise) {
  SynthConfig c;
  c.noise_sigma = noise;
  c.max_classes = 1;
  return c;
}

std::uint64_t first_index_of_class(std::size_t cls, const SynthConfig& cfg, std::uint64_t seed) {
  for (std::uint64_t i = 0;; ++i)
    if (synth_labels(seed, i, cfg)[cls]) return i;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "siamav_test_data";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::vector<double> sinusoid(double hz, std::size_t samples, double amp = 0.5) {
  std::vector<double> w(samples);
  for (std::size_t i = 0; i < samples; ++i) w[i] = amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / 16000.0);
  return w;
}

}  // namespace

TEST(Synth, DeterministicPerSeedAndIndex) {
  SynthConfig cfg;
  auto a = synth_pair<float>(3, 17, cfg);
  auto b = synth_pair<float>(3, 17, cfg);
  EXPECT_EQ(a.image.values(), b.image.values());
  EXPECT_EQ(a.spectrogram.values(), b.spectrogram.values());
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.labels, synth_labels(3, 17, cfg));
  auto c = synth_pair<float>(4, 17, cfg);
  EXPECT_NE(a.spectrogram.values(), c.spectrogram.values());
}

TEST(Synth, ImageRangeAndLabelCount) {
  SynthConfig cfg;
  for (std::uint64_t i = 0; i < 50; ++i) {
    auto p = synth_pair<double>(1, i, cfg);
    for (double v : p.image.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    std::size_t m = 0;
    for (auto l : p.labels) m += l;
    EXPECT_GE(m, 1u);
    EXPECT_LE(m, 2u);
  }
}

TEST(Synth, ClassZeroBandSupport) {
  const auto cfg = single_label(0.0);
  auto p = synth_pair<double>(0, first_index_of_class(0, cfg, 0), cfg);
  for (std::size_t t = 0; t < cfg.audio_frames; ++t)
    for (std::size_t r = 0; r < cfg.audio_bins; ++r) {
      const double v = p.spectrogram[t * cfg.audio_bins + r];
      if (r < 8) {
        EXPECT_GT(v, 0.0);
      } else {
        EXPECT_EQ(v, 0.0);
      }
    }
}

TEST(Synth, BandCentres) {
  EXPECT_EQ(band_center(0, 8, 64), 4u);
  EXPECT_EQ(band_center(7, 8, 64), 60u);
  EXPECT_EQ(band_center(0, 16, 128), 4u);
}

TEST(Synth, TooManyClassesForBands) {
  SynthConfig cfg;
  cfg.K = 9;
  EXPECT_THROW(synth_pair<float>(0, 0, cfg), ConfigError);
  cfg.K = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Synth, ClassMeanImagesAreSeparated) {
  const auto cfg = single_label(0.05);
  const std::size_t px = cfg.image_h * cfg.image_w * 3;
  std::vector<std::vector<double>> sum(cfg.K, std::vector<double>(px, 0.0));
  std::vector<std::size_t> count(cfg.K, 0);
  for (std::uint64_t i = 0; *std::min_element(count.begin(), count.end()) < 100; ++i) {
    auto p = synth_pair<double>(0, i, cfg);
    const auto c = static_cast<std::size_t>(std::find(p.labels.begin(), p.labels.end(), 1) - p.labels.begin());
    if (count[c] >= 100) continue;
    ++count[c];
    for (std::size_t j = 0; j < px; ++j) sum[c][j] += p.image[j] - 0.5;
  }
  for (std::size_t a = 0; a < cfg.K; ++a)
    for (std::size_t b = a + 1; b < cfg.K; ++b) {
      double dot = 0, na = 0, nb = 0;
      for (std::size_t j = 0; j < px; ++j) {
        dot += sum[a][j] * sum[b][j];
        na += sum[a][j] * sum[a][j];
        nb += sum[b][j] * sum[b][j];
      }
      EXPECT_LT(dot / std::sqrt(na * nb), 0.5) << a << " vs " << b;
    }
}

TEST(Dataset, BatchesMatchInstances) {
  SynthConfig cfg;
  auto d = Dataset<float>::generate(2, {5, 9, 11}, cfg);
  ASSERT_EQ(d.size(), 3u);
  auto a = d.audio_batch({2, 0});
  EXPECT_EQ(a.shape(), (Shape{2, cfg.audio_frames, cfg.audio_bins}));
  auto p = synth_pair<float>(2, 11, cfg);
  for (std::size_t i = 0; i < p.spectrogram.numel(); ++i) ASSERT_EQ(a[i], p.spectrogram[i]);
  EXPECT_THROW(d.visual_batch({3}), ContractError);
}

TEST(Manifest, SplitsDeterminismAndBalance) {
  SynthConfig cfg;
  auto m = build_manifest(256, 64, 7, cfg);
  auto train = manifest_split(m, "train"), eval = manifest_split(m, "eval");
  EXPECT_EQ(train.size(), 256u);
  EXPECT_EQ(eval.size(), 64u);
  std::set<std::uint64_t> ids(train.begin(), train.end());
  for (auto e : eval) EXPECT_EQ(ids.count(e), 0u);
  EXPECT_EQ(m["instances"].size(), 320u);
  EXPECT_EQ(build_manifest(256, 64, 7, cfg).dump(), m.dump());
  EXPECT_EQ(m["generator_version"], kGeneratorVersion);
  EXPECT_THROW(build_manifest(10, 1, 7, cfg), ConfigError);

  // m is uniform on {1, 2}; each class is present with probability (1/K + 2/K) / 2.
  const double p = 1.5 / static_cast<double>(cfg.K), n = 320.0;
  const double sigma = std::sqrt(n * p * (1 - p));
  std::vector<double> counts(cfg.K, 0.0);
  for (const auto& inst : m["instances"])
    for (auto c : inst["classes"]) counts[c.get<std::size_t>()] += 1;
  for (double c : counts) EXPECT_NEAR(c, n * p, 3 * sigma);
}

TEST(Mel, TenSecondsIs998FramesPaddedTo1024) {
  const MelConfig cfg;
  EXPECT_EQ(raw_frame_count(160000, cfg), 998u);
  auto lm = log_mel(sinusoid(1000.0, 160000), cfg);
  EXPECT_EQ(lm.raw_frames, 998u);
  EXPECT_EQ(lm.features.shape(), (Shape{1024, 128}));
  for (std::size_t f = 998; f < 1024; ++f)
    for (std::size_t b = 0; b < 128; ++b) ASSERT_EQ(lm.features[f * 128 + b], cfg.silence_value());
}

TEST(Mel, LongInputIsCropped) {
  auto lm = log_mel(sinusoid(500.0, 16000 * 12));
  EXPECT_EQ(lm.features.shape(), (Shape{1024, 128}));
  EXPECT_GT(lm.raw_frames, 1024u);
}

TEST(Mel, SilenceIsConstant) {
  const MelConfig cfg;
  auto lm = log_mel(std::vector<double>(16000, 0.0), cfg);
  const double want = (std::log(1e-6) - cfg.norm_mean) / cfg.norm_std;
  for (double v : lm.features.data()) ASSERT_EQ(v, want);
  MelConfig two = cfg;
  two.double_std = true;
  EXPECT_DOUBLE_EQ(two.silence_value(), want / 2);
}

TEST(Mel, FilterRowsHavePositiveMass) {
  const MelConfig cfg;
  const auto fb = mel_filterbank(cfg);
  const std::size_t nb = cfg.n_fft / 2 + 1;
  for (std::size_t b = 0; b < cfg.mel_bins; ++b) {
    double s = 0;
    for (std::size_t k = 0; k < nb; ++k) s += fb[b * nb + k];
    EXPECT_GT(s, 0.0) << b;
  }
}

// The three lowest filters are narrower than one FFT bin and share their
// energy with neighbours, so the check starts at bin 3.
TEST(Mel, SinusoidAtCentreLightsThatBin) {
  const MelConfig cfg;
  for (std::size_t b = 3; b < cfg.mel_bins; ++b) {
    auto lm = log_mel(sinusoid(mel_center_hz(b, cfg), 16000), cfg);
    for (std::size_t f = 0; f < lm.raw_frames; ++f) {
      const double* row = lm.features.data().data() + f * cfg.mel_bins;
      const auto arg = static_cast<std::size_t>(std::max_element(row, row + cfg.mel_bins) - row);
      ASSERT_EQ(arg, b) << "frame " << f;
    }
  }
}

TEST(Mel, ScalingUpNeverDecreases) {
  Rng rng(3);
  std::vector<double> w(8000);
  for (auto& x : w) x = rng.uniform(-0.3, 0.3);
  auto scaled = w;
  for (auto& x : scaled) x *= 1.7;
  auto a = log_mel(w), b = log_mel(scaled);
  for (std::size_t i = 0; i < a.features.numel(); ++i) ASSERT_GE(b.features[i], a.features[i]);
}

TEST(Mel, InputErrors) {
  EXPECT_THROW(log_mel({}), InputError);
  EXPECT_THROW(log_mel(std::vector<double>(400, 0.1)), InputError);
  auto w = sinusoid(440, 1000);
  w[500] = std::nan("");
  EXPECT_THROW(log_mel(w), InputError);
}

TEST(Avsm, RoundTripAllDtypesAndRanks) {
  Rng rng(4);
  std::vector<StoredTensor> ts;
  for (std::size_t rank = 1; rank <= 4; ++rank) {
    Shape s;
    for (std::size_t k = 0; k < rank; ++k) s.push_back(1 + rng.below(4));
    for (DType dt : {DType::f32, DType::f64}) {
      StoredTensor t{"t" + std::to_string(rank) + dtype_name(dt), dt, s, {}};
      for (std::size_t i = 0; i < shape_numel(s); ++i) {
        const double v = rng.normal() * 1e3;
        t.values.push_back(dt == DType::f32 ? static_cast<double>(static_cast<float>(v)) : v);
      }
      ts.push_back(t);
    }
  }
  EXPECT_EQ(decode_tensors(encode_tensors(ts)), ts);
  EXPECT_TRUE(decode_tensors(encode_tensors({})).empty());
  EXPECT_EQ(encode_tensors({}).size(), 12u);
}

TEST(Avsm, GoldenLittleEndianBytes) {
  const std::vector<StoredTensor> ts{{"w", DType::f32, {2}, {1.0, -2.0}}, {"d", DType::f64, {1}, {0.5}}};
  const std::vector<unsigned char> want{
      'A', 'V', 'S', 'M', 1, 0, 0, 0, 2, 0, 0, 0,           // magic, version, count
      1, 0, 'w', 0, 1, 2, 0, 0, 0, 0, 0, 0, 0,               // name, f32, rank 1, dim 2
      0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0xC0,        // 1.0f, -2.0f
      1, 0, 'd', 1, 1, 1, 0, 0, 0, 0, 0, 0, 0,               // name, f64, rank 1, dim 1
      0, 0, 0, 0, 0, 0, 0xE0, 0x3F};                         // 0.5
  const auto got = encode_tensors(ts);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(static_cast<unsigned char>(got[i]), want[i]) << i;
  EXPECT_EQ(decode_tensors(std::vector<char>(want.begin(), want.end())), ts);
}

TEST(Avsm, ErrorsCarryByteOffsets) {
  auto bytes = encode_tensors({{"w", DType::f64, {2}, {1.0, 2.0}}});
  auto bad = bytes;
  bad[0] = 'X';
  try {
    decode_tensors(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  bad = bytes;
  bad[4] = 2;
  try {
    decode_tensors(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  bad = bytes;
  bad.resize(bytes.size() - 3);
  EXPECT_THROW(decode_tensors(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(decode_tensors(bad), FormatError);
  auto dup = encode_tensors({{"a", DType::f32, {1}, {1}}, {"b", DType::f32, {1}, {1}}});
  dup[12 + 2 + 11 + 4 + 2] = 'a';
  EXPECT_THROW(decode_tensors(dup), FormatError);
}

TEST(Avsm, FuzzedBytesOnlyRaiseFormatErrors) {
  Rng rng(5);
  const auto clean = encode_tensors({{"alpha", DType::f32, {3, 2}, {1, 2, 3, 4, 5, 6}}, {"b", DType::f64, {2}, {7, 8}}});
  for (int trial = 0; trial < 5000; ++trial) {
    auto b = clean;
    const auto flips = 1 + rng.below(4);
    for (std::uint64_t f = 0; f < flips; ++f) b[rng.below(b.size())] = static_cast<char>(rng.below(256));
    if (rng.below(4) == 0) b.resize(rng.below(b.size()));
    try {
      decode_tensors(b);
    } catch (const FormatError&) {
    }
  }
}

TEST(Avsm, FileRoundTripIsAtomic) {
  const auto path = temp_path("t.avsm");
  Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6.5f});
  write_tensor(path, "x", t);
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
  EXPECT_EQ(read_tensor<float>(path).values(), t.values());
  EXPECT_THROW(read_tensor<double>(path), ContractError);
  EXPECT_THROW(read_tensors(temp_path("missing.avsm")), IoError);
}

TEST(Wav, RoundTripAndRejections) {
  std::vector<double> s{0.0, 0.5, -0.5, 0.25};
  auto back = decode_wav(encode_wav(s, 16000));
  EXPECT_EQ(back.sample_rate, 16000u);
  EXPECT_EQ(back.samples, s);
  auto stereo = encode_wav(s, 16000);
  stereo[22] = 2;
  EXPECT_THROW(decode_wav(stereo), InputError);
  EXPECT_THROW(decode_wav(std::vector<char>(10, 'x')), FormatError);
}
