#pragma once

// Retrieval and classification metrics, masking throughput benchmark and
// embedding export. Ties are broken by the lowest index everywhere.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "siamav/train.hpp"

namespace siamav {

// Row-major square-or-rectangular matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  Matrix transposed() const {
    Matrix t{cols, rows, std::vector<double>(values.size())};
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) t.values[c * rows + r] = values[r * cols + c];
    return t;
  }
};

// Rank (0-based) of column `target` in row r: the number of columns that sort
// ahead of it, where a column sorts ahead if its score is higher, or equal
// with a lower index.
inline std::size_t rank_in_row(const Matrix& s, std::size_t r, std::size_t target) {
  const double v = s(r, target);
  std::size_t ahead = 0;
  for (std::size_t c = 0; c < s.cols; ++c) {
    const double x = s(r, c);
    if (x > v || (x == v && c < target)) ++ahead;
  }
  return ahead;
}

// Fraction of rows whose matching column (same index) ranks within the top k.
inline double recall_at_k(const Matrix& s, std::size_t k) {
  if (s.rows != s.cols || s.rows == 0) throw ContractError("recall needs a non-empty square similarity matrix");
  if (k == 0 || k > s.cols) throw ContractError("recall k=" + std::to_string(k) + " outside [1, " + std::to_string(s.cols) + "]");
  std::size_t hits = 0;
  for (std::size_t r = 0; r < s.rows; ++r)
    if (rank_in_row(s, r, r) < k) ++hits;
  return static_cast<double>(hits) / static_cast<double>(s.rows);
}

// Per-class AP is the mean precision at the rank of each positive, with items
// ordered by descending score and ties by lower index (a stable sort). Classes
// without positives are left out of the mean.
inline double mean_average_precision(const std::vector<double>& scores, const std::vector<std::vector<std::uint8_t>>& labels,
                                     std::size_t K) {
  const std::size_t N = labels.size();
  if (scores.size() != N * K) throw DimensionError("score matrix does not match the label matrix");
  double total = 0.0;
  std::size_t counted = 0;
  std::vector<std::size_t> order(N);
  for (std::size_t k = 0; k < K; ++k) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a * K + k] > scores[b * K + k]; });
    std::size_t positives = 0;
    double ap = 0.0;
    for (std::size_t rank = 0; rank < N; ++rank) {
      if (labels[order[rank]].at(k)) {
        ++positives;
        ap += static_cast<double>(positives) / static_cast<double>(rank + 1);
      }
    }
    if (positives == 0) continue;
    total += ap / static_cast<double>(positives);
    ++counted;
  }
  if (counted == 0) throw ContractError("mAP is undefined: no class has a positive label");
  return total / static_cast<double>(counted);
}

inline std::size_t argmax_row(const std::vector<double>& logits, std::size_t r, std::size_t K) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < K; ++k)
    if (logits[r * K + k] > logits[r * K + best]) best = k;
  return best;
}

inline double top1_accuracy(const std::vector<double>& logits, const std::vector<std::size_t>& labels, std::size_t K) {
  if (logits.size() != labels.size() * K) throw DimensionError("logit matrix does not match the label count");
  if (labels.empty()) throw ContractError("top-1 accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= K) throw ContractError("label " + std::to_string(labels[r]) + " outside [0, K)");
    if (argmax_row(logits, r, K) == labels[r]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// Pooled encoder features [N x d] of one modality with every token kept.
template <Scalar T>
std::vector<double> pooled_features(const SiameseModel<T>& model, const Dataset<T>& data, Modality m, std::size_t batch) {
  std::vector<double> out;
  for (std::size_t s = 0; s < data.size(); s += batch) {
    std::vector<std::size_t> rows;
    for (std::size_t i = s; i < std::min(data.size(), s + batch); ++i) rows.push_back(i);
    const auto x = m == Modality::audio ? data.audio_batch(rows) : data.visual_batch(rows);
    const auto enc = model.encode_full(x, m);
    out.insert(out.end(), enc.pooled.data().begin(), enc.pooled.data().end());
  }
  return out;
}

// Cosine similarity between rows of a [n x d] and rows of b [n x d].
inline Matrix cosine_matrix(const std::vector<double>& a, const std::vector<double>& b, std::size_t d) {
  const std::size_t n = a.size() / d, m = b.size() / d;
  auto norms = [d](const std::vector<double>& x) {
    std::vector<double> out(x.size() / d);
    for (std::size_t i = 0; i < out.size(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += x[i * d + j] * x[i * d + j];
      if (s == 0.0) throw DegenerateInputError("embedding row " + std::to_string(i) + " has zero norm");
      out[i] = std::sqrt(s);
    }
    return out;
  };
  const auto na = norms(a), nb = norms(b);
  Matrix s{n, m, std::vector<double>(n * m)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += a[i * d + k] * b[j * d + k];
      s.values[i * m + j] = dot / (na[i] * nb[j]);
    }
  return s;
}

struct RetrievalReport {
  std::size_t n = 0;
  std::vector<std::size_t> ks;
  std::vector<double> audio_to_visual;
  std::vector<double> visual_to_audio;

  json to_json() const {
    json a2v, v2a;
    for (std::size_t i = 0; i < ks.size(); ++i) {
      a2v["R@" + std::to_string(ks[i])] = audio_to_visual[i];
      v2a["R@" + std::to_string(ks[i])] = visual_to_audio[i];
    }
    return {{"audio_to_visual", a2v}, {"visual_to_audio", v2a}, {"n", n}};
  }
};

// Audio queries against the visual gallery use S; visual queries use S^T.
template <Scalar T>
RetrievalReport evaluate_retrieval(const SiameseModel<T>& model, const Dataset<T>& data, std::vector<std::size_t> ks,
                                   std::size_t batch) {
  const std::size_t d = model.config().d;
  const auto fa = pooled_features(model, data, Modality::audio, batch);
  const auto fv = pooled_features(model, data, Modality::visual, batch);
  const auto s = cosine_matrix(fa, fv, d);
  const auto st = s.transposed();
  RetrievalReport r;
  r.n = data.size();
  for (auto k : ks) {
    k = std::min(k, data.size());
    r.ks.push_back(k);
    r.audio_to_visual.push_back(recall_at_k(s, k));
    r.visual_to_audio.push_back(recall_at_k(st, k));
  }
  return r;
}

struct ThroughputReport {
  std::string label;
  double mean_ratio = 0.0;
  std::size_t steps = 0;
  std::size_t batch = 0;
  double wall_seconds = 0.0;  // fastest repeat
  double samples_per_sec = 0.0;
  double expected_tokens_per_sample = 0.0;
  double measured_tokens_per_sample = 0.0;
  std::size_t total_tokens_per_sample = 0;
  std::string config_fingerprint;

  json to_json() const {
    return {{"label", label},
            {"mean_ratio", mean_ratio},
            {"steps", steps},
            {"batch", batch},
            {"wall_seconds", wall_seconds},
            {"samples_per_sec", samples_per_sec},
            {"expected_tokens_per_sample", expected_tokens_per_sample},
            {"measured_tokens_per_sample", measured_tokens_per_sample},
            {"total_tokens_per_sample", total_tokens_per_sample},
            {"config_fingerprint", config_fingerprint}};
  }
};

// Encoder tokens per instance the planner keeps on average (audio + visual).
inline double expected_kept_tokens(const RatioSet& set, std::size_t tokens_audio, std::size_t tokens_visual) {
  double s = 0.0;
  for (double r : set.ratios)
    s += static_cast<double>(tokens_audio - masked_count(r, tokens_audio) + tokens_visual - masked_count(r, tokens_visual));
  return s / static_cast<double>(set.ratios.size());
}

inline std::string ratio_label(const RatioSet& s) {
  std::ostringstream os;
  if (s.multi()) os << "multi";
  else os << "fixed";
  os << "[";
  for (std::size_t i = 0; i < s.ratios.size(); ++i) os << (i ? "," : "") << s.ratios[i];
  os << "]";
  return os.str();
}

// Forward + backward of the pretraining loss for each ratio configuration on
// an identical model and batch. Wall time is the fastest of `repeats` runs of
// `steps` steps, which suppresses scheduler noise on a shared host.
template <Scalar T>
std::vector<ThroughputReport> bench_masking(const ModelConfig& cfg, const std::vector<RatioSet>& configs,
                                            const Dataset<T>& data, std::size_t batch, std::size_t steps,
                                            std::size_t repeats, std::uint64_t seed, const PretrainSettings& base) {
  const std::size_t ka = cfg.audio_grid().tokens(), kv = cfg.visual_grid().tokens();
  std::vector<std::size_t> rows(batch);
  for (std::size_t i = 0; i < batch; ++i) rows[i] = i % data.size();
  const auto audio = data.audio_batch(rows);
  const auto visual = data.visual_batch(rows);
  std::vector<ThroughputReport> out;
  for (const auto& set : configs) {
    set.validate();
    SiameseModel<T> model(cfg, seed);
    auto settings = base;
    settings.ratios = set;
    ThroughputReport r;
    r.label = ratio_label(set);
    r.mean_ratio = std::accumulate(set.ratios.begin(), set.ratios.end(), 0.0) / static_cast<double>(set.ratios.size());
    r.steps = steps;
    r.batch = batch;
    r.total_tokens_per_sample = ka + kv;
    r.expected_tokens_per_sample = expected_kept_tokens(set, ka, kv);
    r.config_fingerprint = json_hash(model_to_json(cfg)) + "/" + r.label;
    double best = std::numeric_limits<double>::infinity();
    std::size_t tokens = 0, instances = 0;
    for (std::size_t rep = 0; rep < repeats; ++rep) {
      Rng rng(mix_seed(seed, rep));
      auto params = model.parameters();
      const auto t0 = std::chrono::steady_clock::now();
      for (std::size_t s = 0; s < steps; ++s) {
        const auto plan = plan_masks(batch, ka, kv, set, rng);
        auto loss = pretrain_loss(model, audio, visual, plan, settings);
        zero_grads(params);
        backward(loss.total);
        tokens += loss.forward.kept_audio_tokens + loss.forward.kept_visual_tokens;
        instances += batch;
      }
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      zero_grads(params);
    }
    r.wall_seconds = best;
    r.samples_per_sec = static_cast<double>(batch * steps) / best;
    r.measured_tokens_per_sample = static_cast<double>(tokens) / static_cast<double>(instances);
    out.push_back(r);
  }
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

// CSV: id, modality (a|v), labels (class ids joined by ';'), e_0..e_{d-1}.
template <Scalar T>
std::string embeddings_csv(const SiameseModel<T>& model, const Dataset<T>& data, std::size_t batch) {
  const std::size_t d = model.config().d;
  const auto fa = pooled_features(model, data, Modality::audio, batch);
  const auto fv = pooled_features(model, data, Modality::visual, batch);
  std::ostringstream os;
  os << "id,modality,labels";
  for (std::size_t j = 0; j < d; ++j) os << ",e_" << j;
  os << "\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::string labels;
    for (std::size_t c = 0; c < data.labels[i].size(); ++c)
      if (data.labels[i][c]) labels += (labels.empty() ? "" : ";") + std::to_string(c);
    const std::string id = std::to_string(data.seed) + ":" + std::to_string(data.indices[i]);
    for (int m = 0; m < 2; ++m) {
      const auto& f = m == 0 ? fa : fv;
      os << id << "," << (m == 0 ? "a" : "v") << "," << labels;
      for (std::size_t j = 0; j < d; ++j) os << "," << format_double(f[i * d + j]);
      os << "\n";
    }
  }
  return os.str();
}

template <Scalar T>
void export_embeddings(const SiameseModel<T>& model, const Dataset<T>& data, const std::filesystem::path& path,
                       std::size_t batch) {
  write_file_atomic(path, embeddings_csv(model, data, batch));
}

}  // namespace siamav
