#pragma once

// Run configuration: a JSON document with sections model, loss, mask, data,
// train and eval. Every field has a default from the selected profile,
// unknown keys are rejected, and the hash is FNV-1a over the canonical dump
// (object keys sorted), so it does not depend on key order in the file.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "siamav/data.hpp"
#include "siamav/io.hpp"
#include "siamav/loss.hpp"
#include "siamav/model.hpp"
#include "siamav/optim.hpp"

namespace siamav {

using nlohmann::json;

enum class Profile { tiny, paper };

inline Profile parse_profile(const std::string& s) {
  if (s == "tiny") return Profile::tiny;
  if (s == "paper") return Profile::paper;
  throw ConfigError("unknown profile '" + s + "' (expected tiny or paper)");
}

enum class FinetuneTask { multilabel_bce, multiclass_ce };

inline FinetuneTask parse_task(const std::string& s) {
  if (s == "bce") return FinetuneTask::multilabel_bce;
  if (s == "ce") return FinetuneTask::multiclass_ce;
  throw ConfigError("unknown task '" + s + "' (expected bce or ce)");
}

inline const char* task_name(FinetuneTask t) { return t == FinetuneTask::multilabel_bce ? "bce" : "ce"; }

struct DataConfig {
  std::size_t K = 8;
  std::size_t n_train = 256;
  std::size_t n_eval = 64;
  double noise_sigma = 0.05;
  std::size_t max_classes = 2;
  std::uint64_t seed = 0;
  bool norm_double_std = false;
};

struct PretrainConfig {
  std::size_t batch_size = 48;
  std::size_t epochs = 60;
  Schedule schedule{1e-3, 40, 0.5, 10, 1.0};
  AdamConfig adam;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

struct FinetuneConfig {
  FinetuneTask task = FinetuneTask::multiclass_ce;
  std::size_t max_classes = 1;
  std::size_t batch_size = 32;
  std::size_t epochs = 25;
  Schedule schedule{1e-3, 15, 0.5, 5, 10.0};
  double p_audio = 0.25;
  double p_visual = 0.25;
  double p_both = 0.5;
};

struct EvalConfig {
  std::size_t batch_size = 64;
  std::vector<std::size_t> recall_k{1, 5};
  std::vector<double> bench_ratios{0.0, 0.25, 0.5, 0.75};
  std::size_t bench_steps = 3;
  std::size_t bench_batch = 24;
};

struct RunConfig {
  ModelConfig model;
  ContrastiveConfig contrastive;
  LossScalers scalers;
  ReconMode recon_mode = ReconMode::full;
  RatioSet ratios;
  DataConfig data;
  PretrainConfig train;
  FinetuneConfig finetune;
  EvalConfig eval;

  SynthConfig synth() const {
    return {data.K, data.noise_sigma, data.max_classes, model.image_h, model.image_w, model.audio_h, model.audio_w,
            model.patch};
  }
  SynthConfig finetune_synth() const {
    auto s = synth();
    s.max_classes = finetune.max_classes;
    return s;
  }

  void validate() const {
    model.validate();
    contrastive.validate();
    scalers.validate();
    ratios.validate();
    synth().validate();
    finetune_synth().validate();
    train.schedule.validate();
    finetune.schedule.validate();
    if (train.batch_size < 2) throw ConfigError("pretraining batch size must be at least 2");
    if (ratios.multi() && train.batch_size % ratios.ratios.size() != 0) {
      throw ConfigError("batch size " + std::to_string(train.batch_size) + " is not divisible by the " +
                        std::to_string(ratios.ratios.size()) + " masking ratios");
    }
    if (data.n_train < train.batch_size) throw ConfigError("n_train is smaller than one pretraining batch");
    if (data.n_eval < 2) throw ConfigError("n_eval must be at least 2");
    if (finetune.batch_size == 0 || data.n_train < finetune.batch_size) {
      throw ConfigError("finetune batch size must be in [1, n_train]");
    }
    const double psum = finetune.p_audio + finetune.p_visual + finetune.p_both;
    if (finetune.p_audio < 0 || finetune.p_visual < 0 || finetune.p_both < 0 || std::abs(psum - 1.0) > 1e-12) {
      throw ConfigError("modality sampling probabilities must be nonnegative and sum to 1");
    }
    if (finetune.task == FinetuneTask::multiclass_ce && finetune.max_classes != 1) {
      throw ConfigError("task ce needs single-label data (finetune.max_classes = 1), got multi-hot labels with up to " +
                        std::to_string(finetune.max_classes) + " classes");
    }
    for (auto k : eval.recall_k)
      if (k == 0) throw ConfigError("recall k must be positive");
    if (eval.bench_steps == 0 || eval.bench_batch == 0) throw ConfigError("bench sizes must be positive");
  }
};

inline RunConfig profile_defaults(Profile p) {
  RunConfig c;
  if (p == Profile::paper) {
    c.model.d = 768;
    c.model.encoder_depth = 12;
    c.model.heads = 12;
    c.model.dec_width = 384;
    c.model.dec_heads = 12;
    c.model.image_h = 224;
    c.model.image_w = 224;
    c.model.audio_h = 1024;
    c.model.audio_w = 128;
    c.data.K = 16;
    c.train.batch_size = 96;
    c.train.epochs = 20;
    c.train.schedule = {1e-4, 10, 0.5, 5, 1.0};
    c.finetune.task = FinetuneTask::multilabel_bce;
    c.finetune.max_classes = 2;
    c.finetune.batch_size = 8;
    c.finetune.epochs = 15;
    c.finetune.schedule = {1e-4, 2, 0.75, 1, 100.0};
  }
  return c;
}

inline json to_json(const Schedule& s) {
  return {{"lr", s.base_lr},
          {"decay_start_epoch", s.decay_start_epoch},
          {"decay_rate", s.decay_rate},
          {"decay_step", s.decay_step},
          {"head_lr_multiplier", s.head_lr_multiplier}};
}

inline json model_to_json(const ModelConfig& m) {
  return {{"d", m.d},
          {"encoder_depth", m.encoder_depth},
          {"heads", m.heads},
          {"mlp_ratio", m.mlp_ratio},
          {"mm_depth", m.mm_depth},
          {"dec_depth", m.dec_depth},
          {"dec_width", m.dec_width},
          {"dec_heads", m.dec_heads},
          {"patch", m.patch},
          {"image_h", m.image_h},
          {"image_w", m.image_w},
          {"audio_frames", m.audio_h},
          {"audio_bins", m.audio_w},
          {"shared_encoder", m.shared_encoder},
          {"modality_embedding", m.modality_embedding}};
}

inline json to_json(const RunConfig& c) {
  json j;
  j["model"] = model_to_json(c.model);
  j["loss"] = {{"tau", c.contrastive.tau},
               {"symmetric", c.contrastive.symmetric},
               {"scale_contrastive", c.scalers.scale_contrastive},
               {"scale_reconstruction", c.scalers.scale_reconstruction},
               {"recon_mode", recon_mode_name(c.recon_mode)}};
  j["mask"] = {{"ratios", c.ratios.ratios}};
  j["data"] = {{"K", c.data.K},
               {"n_train", c.data.n_train},
               {"n_eval", c.data.n_eval},
               {"noise_sigma", c.data.noise_sigma},
               {"max_classes", c.data.max_classes},
               {"seed", c.data.seed},
               {"norm_double_std", c.data.norm_double_std}};
  j["train"] = {{"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"schedule", to_json(c.train.schedule)},
                {"beta1", c.train.adam.beta1},
                {"beta2", c.train.adam.beta2},
                {"eps", c.train.adam.eps},
                {"weight_decay", c.train.adam.weight_decay},
                {"clip_norm", c.train.clip_norm},
                {"seed", c.train.seed},
                {"finetune",
                 {{"task", task_name(c.finetune.task)},
                  {"max_classes", c.finetune.max_classes},
                  {"batch_size", c.finetune.batch_size},
                  {"epochs", c.finetune.epochs},
                  {"schedule", to_json(c.finetune.schedule)},
                  {"p_audio", c.finetune.p_audio},
                  {"p_visual", c.finetune.p_visual},
                  {"p_both", c.finetune.p_both}}}};
  j["eval"] = {{"batch_size", c.eval.batch_size},
               {"recall_k", c.eval.recall_k},
               {"bench_ratios", c.eval.bench_ratios},
               {"bench_steps", c.eval.bench_steps},
               {"bench_batch", c.eval.bench_batch}};
  return j;
}

namespace detail {

// Overlays `patch` onto `base`, rejecting keys that `base` does not have.
inline void overlay(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      overlay(slot, it.value(), key);
    } else {
      const bool numeric = slot.is_number() && it.value().is_number();
      if (!numeric && slot.type() != it.value().type()) throw ConfigError("config key '" + key + "' has the wrong type");
      slot = it.value();
    }
  }
}

template <typename V>
V get(const json& j, const char* key, const std::string& section) {
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + section + "." + key + "': " + e.what());
  }
}

inline Schedule schedule_from(const json& j, const std::string& s) {
  return {get<double>(j, "lr", s), get<std::size_t>(j, "decay_start_epoch", s), get<double>(j, "decay_rate", s),
          get<std::size_t>(j, "decay_step", s), get<double>(j, "head_lr_multiplier", s)};
}

inline ModelConfig model_from(const json& m) {
  ModelConfig c;
  c.d = get<std::size_t>(m, "d", "model");
  c.encoder_depth = get<std::size_t>(m, "encoder_depth", "model");
  c.heads = get<std::size_t>(m, "heads", "model");
  c.mlp_ratio = get<std::size_t>(m, "mlp_ratio", "model");
  c.mm_depth = get<std::size_t>(m, "mm_depth", "model");
  c.dec_depth = get<std::size_t>(m, "dec_depth", "model");
  c.dec_width = get<std::size_t>(m, "dec_width", "model");
  c.dec_heads = get<std::size_t>(m, "dec_heads", "model");
  c.patch = get<std::size_t>(m, "patch", "model");
  c.image_h = get<std::size_t>(m, "image_h", "model");
  c.image_w = get<std::size_t>(m, "image_w", "model");
  c.audio_h = get<std::size_t>(m, "audio_frames", "model");
  c.audio_w = get<std::size_t>(m, "audio_bins", "model");
  c.shared_encoder = get<bool>(m, "shared_encoder", "model");
  c.modality_embedding = get<bool>(m, "modality_embedding", "model");
  return c;
}

}  // namespace detail

inline RunConfig from_json(const json& j) {
  RunConfig c;
  c.model = detail::model_from(j.at("model"));
  const auto& l = j.at("loss");
  c.contrastive.tau = detail::get<double>(l, "tau", "loss");
  c.contrastive.symmetric = detail::get<bool>(l, "symmetric", "loss");
  c.scalers.scale_contrastive = detail::get<double>(l, "scale_contrastive", "loss");
  c.scalers.scale_reconstruction = detail::get<double>(l, "scale_reconstruction", "loss");
  c.recon_mode = parse_recon_mode(detail::get<std::string>(l, "recon_mode", "loss"));
  c.ratios.ratios = detail::get<std::vector<double>>(j.at("mask"), "ratios", "mask");
  const auto& d = j.at("data");
  c.data.K = detail::get<std::size_t>(d, "K", "data");
  c.data.n_train = detail::get<std::size_t>(d, "n_train", "data");
  c.data.n_eval = detail::get<std::size_t>(d, "n_eval", "data");
  c.data.noise_sigma = detail::get<double>(d, "noise_sigma", "data");
  c.data.max_classes = detail::get<std::size_t>(d, "max_classes", "data");
  c.data.seed = detail::get<std::uint64_t>(d, "seed", "data");
  c.data.norm_double_std = detail::get<bool>(d, "norm_double_std", "data");
  const auto& t = j.at("train");
  c.train.batch_size = detail::get<std::size_t>(t, "batch_size", "train");
  c.train.epochs = detail::get<std::size_t>(t, "epochs", "train");
  c.train.schedule = detail::schedule_from(t.at("schedule"), "train.schedule");
  c.train.adam.beta1 = detail::get<double>(t, "beta1", "train");
  c.train.adam.beta2 = detail::get<double>(t, "beta2", "train");
  c.train.adam.eps = detail::get<double>(t, "eps", "train");
  c.train.adam.weight_decay = detail::get<double>(t, "weight_decay", "train");
  c.train.clip_norm = detail::get<double>(t, "clip_norm", "train");
  c.train.seed = detail::get<std::uint64_t>(t, "seed", "train");
  const auto& f = t.at("finetune");
  c.finetune.task = parse_task(detail::get<std::string>(f, "task", "train.finetune"));
  c.finetune.max_classes = detail::get<std::size_t>(f, "max_classes", "train.finetune");
  c.finetune.batch_size = detail::get<std::size_t>(f, "batch_size", "train.finetune");
  c.finetune.epochs = detail::get<std::size_t>(f, "epochs", "train.finetune");
  c.finetune.schedule = detail::schedule_from(f.at("schedule"), "train.finetune.schedule");
  c.finetune.p_audio = detail::get<double>(f, "p_audio", "train.finetune");
  c.finetune.p_visual = detail::get<double>(f, "p_visual", "train.finetune");
  c.finetune.p_both = detail::get<double>(f, "p_both", "train.finetune");
  const auto& e = j.at("eval");
  c.eval.batch_size = detail::get<std::size_t>(e, "batch_size", "eval");
  c.eval.recall_k = detail::get<std::vector<std::size_t>>(e, "recall_k", "eval");
  c.eval.bench_ratios = detail::get<std::vector<double>>(e, "bench_ratios", "eval");
  c.eval.bench_steps = detail::get<std::size_t>(e, "bench_steps", "eval");
  c.eval.bench_batch = detail::get<std::size_t>(e, "bench_batch", "eval");
  return c;
}

// Profile defaults overlaid with a user document (possibly partial).
inline RunConfig load_config(Profile profile, const json& user) {
  json base = to_json(profile_defaults(profile));
  if (!user.is_null()) detail::overlay(base, user, "");
  auto c = from_json(base);
  c.validate();
  return c;
}

inline json parse_json_file(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string json_hash(const json& j) { return hex64(fnv1a64(j.dump())); }

inline std::string config_hash(const RunConfig& c) { return json_hash(to_json(c)); }

// Keys (dotted paths) whose values differ between two documents.
inline std::vector<std::string> json_diff(const json& a, const json& b, const std::string& path = "") {
  std::vector<std::string> out;
  if (a.is_object() && b.is_object()) {
    for (auto it = a.begin(); it != a.end(); ++it) {
      const std::string key = path.empty() ? it.key() : path + "." + it.key();
      if (!b.contains(it.key())) {
        out.push_back(key + ": " + it.value().dump() + " vs (missing)");
        continue;
      }
      auto sub = json_diff(it.value(), b.at(it.key()), key);
      out.insert(out.end(), sub.begin(), sub.end());
    }
    for (auto it = b.begin(); it != b.end(); ++it)
      if (!a.contains(it.key())) out.push_back((path.empty() ? it.key() : path + "." + it.key()) + ": (missing) vs " +
                                               it.value().dump());
    return out;
  }
  if (a != b) out.push_back(path + ": " + a.dump() + " vs " + b.dump());
  return out;
}

}  // namespace siamav
