#pragma once

// Pretraining and finetuning loops, the modality sampler, the classifier head
// and checkpoints (AVSM tensors plus a JSON sidecar at <path>.json).

#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "siamav/config.hpp"

namespace siamav {

struct PretrainSettings {
  RatioSet ratios;
  ContrastiveConfig contrastive;
  LossScalers scalers;
  ReconMode recon_mode = ReconMode::full;
  std::size_t batch_size = 48;
  double clip_norm = 1.0;

  static PretrainSettings from(const RunConfig& c) {
    return {c.ratios, c.contrastive, c.scalers, c.recon_mode, c.train.batch_size, c.train.clip_norm};
  }
};

template <Scalar T>
struct PretrainLoss {
  Tensor<T> total;
  double contrastive = std::numeric_limits<double>::quiet_NaN();
  double reconstruction = std::numeric_limits<double>::quiet_NaN();
  PretrainForward<T> forward;
};

// Combined pretraining objective for one batch under a mask plan. The
// decoder runs only when the reconstruction scaler is positive.
template <Scalar T>
PretrainLoss<T> pretrain_loss(const SiameseModel<T>& model, const Tensor<T>& audio, const Tensor<T>& visual,
                              const MaskPlan& plan, const PretrainSettings& s) {
  const bool rec = s.scalers.scale_reconstruction > 0.0;
  PretrainLoss<T> out;
  out.forward = model.forward_pretrain(audio, visual, plan, rec);
  LossParts<T> parts;
  parts.contrastive = contrastive_loss(out.forward.pooled_audio, out.forward.pooled_visual, s.contrastive);
  out.contrastive = static_cast<double>(parts.contrastive->item());
  if (rec) {
    const auto& r = *out.forward.recon;
    const auto& cfg = model.config();
    parts.reconstruction = reconstruction_loss(r.visual, visual, r.audio, audio, plan, s.recon_mode, cfg.visual_grid(),
                                               cfg.audio_grid());
    out.reconstruction = static_cast<double>(parts.reconstruction->item());
  }
  out.total = total_pretrain_loss(parts, s.scalers);
  return out;
}

template <Scalar T>
std::vector<InstanceTokens<T>> freeze_tokens(const std::vector<InstanceTokens<T>>& v) {
  std::vector<InstanceTokens<T>> out;
  out.reserve(v.size());
  for (const auto& t : v) out.push_back({t.tokens.detach_copy(), t.positions});
  return out;
}

// The pretraining objective with the encoder tokens entering fusion held at
// fixed values: the function whose derivative stop_gradient defines. Used as
// the finite-difference reference.
template <Scalar T>
Tensor<T> pretrain_loss_frozen(const SiameseModel<T>& model, const Tensor<T>& audio, const Tensor<T>& visual,
                               const MaskPlan& plan, const PretrainSettings& s,
                               const std::vector<InstanceTokens<T>>& frozen_audio,
                               const std::vector<InstanceTokens<T>>& frozen_visual) {
  auto f = model.forward_pretrain(audio, visual, plan, false);
  LossParts<T> parts;
  parts.contrastive = contrastive_loss(f.pooled_audio, f.pooled_visual, s.contrastive);
  if (s.scalers.scale_reconstruction > 0.0) {
    const auto r = model.decode(model.fuse(frozen_audio, frozen_visual), plan);
    const auto& cfg = model.config();
    parts.reconstruction =
        reconstruction_loss(r.visual, visual, r.audio, audio, plan, s.recon_mode, cfg.visual_grid(), cfg.audio_grid());
  }
  return total_pretrain_loss(parts, s.scalers);
}

struct EpochReport {
  std::string phase;
  std::size_t epoch = 0;
  double lr = 0.0;
  std::size_t steps = 0;
  std::size_t samples = 0;
  double loss = 0.0;
  double contrastive = 0.0;
  double reconstruction = 0.0;
  std::size_t tokens = 0;  // encoder tokens processed (kept audio + visual)
  double wall_seconds = 0.0;
  std::map<std::string, std::size_t> draws;

  json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    json j = {{"phase", phase},     {"epoch", epoch},         {"lr", lr},
              {"steps", steps},     {"samples", samples},     {"loss", num(loss)},
              {"tokens", tokens},   {"wall_seconds", wall_seconds}};
    if (phase == "pretrain") {
      j["contrastive"] = num(contrastive);
      j["reconstruction"] = num(reconstruction);
    }
    if (!draws.empty()) j["draws"] = draws;
    return j;
  }
};

struct CheckpointMeta {
  std::string kind;
  json config;
  std::string config_hash;
  std::size_t epoch = 0;  // next epoch to run
  std::string rng_state;
  std::string sampler_state;
  std::size_t adam_step = 0;
  json history = json::array();
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& p) {
  auto s = p;
  s += ".json";
  return s;
}

template <Scalar T>
void save_checkpoint(const std::filesystem::path& path, const nn::ParamList<T>& params, const Adam<T>* optim,
                     const CheckpointMeta& meta) {
  std::vector<StoredTensor> tensors;
  for (std::size_t i = 0; i < params.size(); ++i) {
    tensors.push_back(to_stored("param/" + params[i].name, params[i].value));
    if (optim) {
      const auto& shape = params[i].value.shape();
      const auto& m = optim->first_moment(i);
      const auto& v = optim->second_moment(i);
      tensors.push_back({"adam.m/" + params[i].name, dtype_of<T>(), shape, std::vector<double>(m.begin(), m.end())});
      tensors.push_back({"adam.v/" + params[i].name, dtype_of<T>(), shape, std::vector<double>(v.begin(), v.end())});
    }
  }
  json side = {{"format", "avsm-checkpoint"},
               {"kind", meta.kind},
               {"dtype", dtype_name(dtype_of<T>())},
               {"config", meta.config},
               {"config_hash", meta.config_hash},
               {"epoch", meta.epoch},
               {"rng_state", meta.rng_state},
               {"sampler_state", meta.sampler_state},
               {"adam_step", optim ? optim->step_count() : 0},
               {"has_optimizer", optim != nullptr},
               {"history", meta.history}};
  write_tensors(path, tensors);
  write_file_atomic(sidecar_path(path), side.dump(2) + "\n");
}

inline CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint " + path.string() + " does not exist");
  const auto side = parse_json_file(sidecar_path(path));
  CheckpointMeta m;
  try {
    m.kind = side.at("kind").get<std::string>();
    m.config = side.at("config");
    m.config_hash = side.at("config_hash").get<std::string>();
    m.epoch = side.at("epoch").get<std::size_t>();
    m.rng_state = side.at("rng_state").get<std::string>();
    m.sampler_state = side.at("sampler_state").get<std::string>();
    m.adam_step = side.at("adam_step").get<std::size_t>();
    m.history = side.at("history");
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what(), 0);
  }
  return m;
}

// Restores parameter values (and optimizer moments when `optim` is given).
// The stored model section must equal `expected_model`; otherwise the load is
// refused with the differing keys listed.
template <Scalar T>
CheckpointMeta load_checkpoint(const std::filesystem::path& path, nn::ParamList<T>& params, Adam<T>* optim,
                               const json& expected_model) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  auto meta = read_checkpoint_meta(path);
  const auto diff = json_diff(meta.config.at("model"), expected_model, "model");
  if (!diff.empty()) {
    std::string msg = "checkpoint " + path.string() + " was written for a different model config:";
    for (const auto& d : diff) msg += "\n  " + d;
    throw ConfigMismatchError(msg);
  }
  const auto stored = read_tensors(path);
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& t : stored) by_name[t.name] = &t;
  auto find = [&](const std::string& name, const Shape& shape) -> const StoredTensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigMismatchError("checkpoint lacks tensor '" + name + "'");
    if (it->second->shape != shape) {
      throw ConfigMismatchError("tensor '" + name + "' has shape " + shape_str(it->second->shape) + ", expected " +
                                shape_str(shape));
    }
    if (it->second->dtype != dtype_of<T>()) throw ConfigMismatchError("tensor '" + name + "' has a different dtype");
    return *it->second;
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& s = find("param/" + params[i].name, params[i].value.shape());
    auto dst = params[i].value.mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(s.values[k]);
    if (optim) {
      const auto& m = find("adam.m/" + params[i].name, params[i].value.shape());
      const auto& v = find("adam.v/" + params[i].name, params[i].value.shape());
      auto& om = optim->first_moment(i);
      auto& ov = optim->second_moment(i);
      for (std::size_t k = 0; k < om.size(); ++k) {
        om[k] = static_cast<T>(m.values[k]);
        ov[k] = static_cast<T>(v.values[k]);
      }
    }
  }
  if (optim) optim->set_step_count(meta.adam_step);
  return meta;
}

// Pretraining driver: owns the optimizer, the data-order/masking stream and
// the epoch counter, all of which a checkpoint captures.
template <Scalar T>
class Pretrainer {
 public:
  Pretrainer(SiameseModel<T>& model, PretrainSettings settings, Schedule schedule, AdamConfig adam, std::uint64_t seed)
      : model_(model),
        settings_(std::move(settings)),
        schedule_(schedule),
        params_(model.parameters()),
        optim_(params_, adam),
        rng_(mix_seed(seed, 0x5052455452ull)) {
    settings_.scalers.validate();
    settings_.ratios.validate();
    schedule_.validate();
  }

  std::size_t epoch() const { return epoch_; }
  const json& history() const { return history_; }
  Rng& rng() { return rng_; }

  // One pass over the dataset in a freshly shuffled order (last partial batch
  // dropped). `last_good` names the checkpoint to report on divergence.
  EpochReport run_epoch(const Dataset<T>& data, const std::string& last_good = "") {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t B = settings_.batch_size;
    if (data.size() < B) throw ConfigError("dataset smaller than one batch");
    const auto& cfg = model_.config();
    const std::size_t ka = cfg.audio_grid().tokens(), kv = cfg.visual_grid().tokens();
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng_.shuffle(order);
    EpochReport r;
    r.phase = "pretrain";
    r.epoch = epoch_;
    r.lr = schedule_.lr(epoch_);
    const std::size_t steps = data.size() / B;
    double sum_loss = 0, sum_c = 0, sum_r = 0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(s * B),
                                    order.begin() + static_cast<std::ptrdiff_t>((s + 1) * B));
      const auto plan = plan_masks(B, ka, kv, settings_.ratios, rng_);
      auto loss = pretrain_loss(model_, data.audio_batch(rows), data.visual_batch(rows), plan, settings_);
      const double value = static_cast<double>(loss.total.item());
      if (!std::isfinite(value)) {
        throw NonFiniteError("pretraining loss diverged at epoch " + std::to_string(epoch_) + " step " +
                             std::to_string(s) + "; last good checkpoint: " + (last_good.empty() ? "none" : last_good));
      }
      zero_grads(params_);
      backward(loss.total);
      clip_grad_norm(params_, settings_.clip_norm);
      optim_.step(params_, r.lr);
      sum_loss += value;
      sum_c += loss.contrastive;
      sum_r += loss.reconstruction;
      r.tokens += loss.forward.kept_audio_tokens + loss.forward.kept_visual_tokens;
    }
    zero_grads(params_);
    r.steps = steps;
    r.samples = steps * B;
    r.loss = sum_loss / static_cast<double>(steps);
    r.contrastive = sum_c / static_cast<double>(steps);
    r.reconstruction = sum_r / static_cast<double>(steps);
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history_.push_back(r.to_json());
    ++epoch_;
    return r;
  }

  void save(const std::filesystem::path& path, const json& run_config) const {
    CheckpointMeta m;
    m.kind = "pretrain";
    m.config = run_config;
    m.config_hash = json_hash(run_config);
    m.epoch = epoch_;
    m.rng_state = rng_.state();
    m.history = history_;
    save_checkpoint(path, params_, &optim_, m);
  }

  void load(const std::filesystem::path& path) {
    auto meta = load_checkpoint(path, params_, &optim_, model_to_json(model_.config()));
    if (meta.kind != "pretrain") throw ConfigMismatchError("checkpoint kind '" + meta.kind + "' cannot resume pretraining");
    epoch_ = meta.epoch;
    rng_.set_state(meta.rng_state);
    history_ = meta.history;
  }

 private:
  SiameseModel<T>& model_;
  PretrainSettings settings_;
  Schedule schedule_;
  nn::ParamList<T> params_;
  Adam<T> optim_;
  Rng rng_;
  std::size_t epoch_ = 0;
  json history_ = json::array();
};

// ---------------------------------------------------------------------------
// Finetuning

enum class InputType { audio, visual, both };

inline const char* input_type_name(InputType t) {
  return t == InputType::audio ? "audio" : t == InputType::visual ? "visual" : "both";
}

struct ModalitySampler {
  double p_audio = 0.25;
  double p_visual = 0.25;
  double p_both = 0.5;
  Rng rng;

  ModalitySampler(double pa, double pv, double pb, std::uint64_t seed) : p_audio(pa), p_visual(pv), p_both(pb), rng(seed) {
    if (pa < 0 || pv < 0 || pb < 0 || std::abs(pa + pv + pb - 1.0) > 1e-12) {
      throw ConfigError("modality sampling probabilities must be nonnegative and sum to 1");
    }
  }

  InputType draw() {
    const double u = rng.uniform();
    if (u < p_audio) return InputType::audio;
    if (u < p_audio + p_visual) return InputType::visual;
    return InputType::both;
  }
};

// 2d -> d (GELU) -> K over [F_a ; F_v].
template <Scalar T>
struct ClassifierHead {
  nn::Linear<T> fc1;
  nn::Linear<T> fc2;

  static ClassifierHead init(std::size_t d, std::size_t K, Rng& rng) {
    return {nn::Linear<T>::init(2 * d, d, rng), nn::Linear<T>::init(d, K, rng)};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(ops::gelu(fc1(x))); }
  void collect(nn::ParamList<T>& out) const {
    fc1.collect("head.fc1", out);
    fc2.collect("head.fc2", out);
  }
};

// Concatenated pooled features with the absent modality's slot zero-filled.
// No tokens are masked.
template <Scalar T>
Tensor<T> head_input(const SiameseModel<T>& model, const Tensor<T>& audio, const Tensor<T>& visual, InputType type) {
  const std::size_t B = audio.dim(0), d = model.config().d;
  auto fa = type == InputType::visual ? Tensor<T>::zeros({B, d}) : model.encode_full(audio, Modality::audio).pooled;
  auto fv = type == InputType::audio ? Tensor<T>::zeros({B, d}) : model.encode_full(visual, Modality::visual).pooled;
  return ops::concat<T>({fa, fv}, 1);
}

inline std::vector<std::size_t> single_label_targets(const std::vector<std::vector<std::uint8_t>>& labels) {
  std::vector<std::size_t> t;
  t.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t pos = 0, count = 0;
    for (std::size_t c = 0; c < labels[i].size(); ++c)
      if (labels[i][c]) {
        pos = c;
        ++count;
      }
    if (count != 1) {
      throw ConfigError("task ce needs exactly one label per instance; instance " + std::to_string(i) + " has " +
                        std::to_string(count));
    }
    t.push_back(pos);
  }
  return t;
}

template <Scalar T>
Tensor<T> task_loss(const Tensor<T>& logits, const std::vector<std::vector<std::uint8_t>>& labels, FinetuneTask task) {
  if (labels.size() != logits.dim(0)) throw ContractError("label count does not match the batch");
  for (const auto& l : labels)
    if (l.size() != logits.dim(1)) throw ConfigError("label arity " + std::to_string(l.size()) + " does not match " +
                                                     std::to_string(logits.dim(1)) + " logits");
  if (task == FinetuneTask::multiclass_ce) return ops::cross_entropy(logits, single_label_targets(labels));
  std::vector<T> flat;
  for (const auto& l : labels)
    for (auto v : l) flat.push_back(static_cast<T>(v));
  return ops::bce_with_logits(logits, flat);
}

// Mean of per-frame probability vectors.
template <Scalar T>
Tensor<T> aggregate_predictions(const std::vector<Tensor<T>>& frames) {
  if (frames.empty()) throw ContractError("cannot aggregate an empty prediction list");
  std::vector<T> acc(frames.front().numel(), T(0));
  for (const auto& f : frames) {
    if (f.numel() != acc.size()) throw DimensionError("prediction vectors differ in length");
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += f[k];
  }
  for (auto& v : acc) v /= static_cast<T>(frames.size());
  return Tensor<T>(frames.front().shape(), std::move(acc));
}

template <Scalar T>
nn::ParamList<T> encoder_parameters(const SiameseModel<T>& model) {
  nn::ParamList<T> out;
  for (auto& p : model.parameters())
    if (p.name.starts_with("embed.") || p.name.starts_with("encoder")) out.push_back(p);
  return out;
}

template <Scalar T>
class Finetuner {
 public:
  Finetuner(SiameseModel<T>& model, const FinetuneConfig& cfg, std::size_t K, AdamConfig adam, double clip_norm,
            std::uint64_t seed)
      : model_(model),
        cfg_(cfg),
        clip_norm_(clip_norm),
        rng_(mix_seed(seed, 0x46494E45ull)),
        sampler_(cfg.p_audio, cfg.p_visual, cfg.p_both, mix_seed(seed, 0x53414D50ull)) {
    cfg_.schedule.validate();
    Rng init(mix_seed(seed, 0x48454144ull));
    head_ = ClassifierHead<T>::init(model.config().d, K, init);
    params_ = encoder_parameters(model);
    const std::size_t n_backbone = params_.size();
    head_.collect(params_);
    optim_ = Adam<T>(params_, adam);
    for (std::size_t i = n_backbone; i < params_.size(); ++i) optim_.set_lr_scale(i, cfg_.schedule.head_lr_multiplier);
  }

  const ClassifierHead<T>& head() const { return head_; }
  const nn::ParamList<T>& parameters() const { return params_; }
  const Adam<T>& optimizer() const { return optim_; }
  std::size_t epoch() const { return epoch_; }
  ModalitySampler& sampler() { return sampler_; }

  // One update on the given rows; returns the loss and the drawn input type.
  std::pair<double, InputType> step(const Dataset<T>& data, const std::vector<std::size_t>& rows, double lr) {
    std::vector<std::vector<std::uint8_t>> labels;
    for (auto r : rows) labels.push_back(data.labels.at(r));
    if (cfg_.task == FinetuneTask::multiclass_ce) single_label_targets(labels);
    const auto type = sampler_.draw();
    auto logits = head_(head_input(model_, data.audio_batch(rows), data.visual_batch(rows), type));
    auto loss = task_loss(logits, labels, cfg_.task);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) throw NonFiniteError("finetuning loss diverged at epoch " + std::to_string(epoch_));
    zero_grads(params_);
    backward(loss);
    clip_grad_norm(params_, clip_norm_);
    optim_.step(params_, lr);
    return {value, type};
  }

  EpochReport run_epoch(const Dataset<T>& data) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t B = cfg_.batch_size;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng_.shuffle(order);
    EpochReport r;
    r.phase = "finetune";
    r.epoch = epoch_;
    r.lr = cfg_.schedule.lr(epoch_);
    const std::size_t steps = data.size() / B;
    double sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(s * B),
                                    order.begin() + static_cast<std::ptrdiff_t>((s + 1) * B));
      const auto [loss, type] = step(data, rows, r.lr);
      sum += loss;
      ++r.draws[input_type_name(type)];
    }
    zero_grads(params_);
    r.steps = steps;
    r.samples = steps * B;
    r.loss = sum / static_cast<double>(steps);
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history_.push_back(r.to_json());
    ++epoch_;
    return r;
  }

  // Logits [N x K] over a dataset for one input type, in dataset order.
  std::vector<double> predict(const Dataset<T>& data, InputType type, std::size_t batch) const {
    std::vector<double> out;
    for (std::size_t s = 0; s < data.size(); s += batch) {
      std::vector<std::size_t> rows;
      for (std::size_t i = s; i < std::min(data.size(), s + batch); ++i) rows.push_back(i);
      auto logits = head_(head_input(model_, data.audio_batch(rows), data.visual_batch(rows), type));
      out.insert(out.end(), logits.data().begin(), logits.data().end());
    }
    return out;
  }

  void save(const std::filesystem::path& path, const json& run_config) const {
    CheckpointMeta m;
    m.kind = "finetune";
    m.config = run_config;
    m.config_hash = json_hash(run_config);
    m.epoch = epoch_;
    m.rng_state = rng_.state();
    m.sampler_state = sampler_.rng.state();
    m.history = history_;
    save_checkpoint(path, params_, &optim_, m);
  }

  // Restores backbone, head, optimizer and streams from a finetune checkpoint.
  void load(const std::filesystem::path& path) {
    auto meta = load_checkpoint(path, params_, &optim_, model_to_json(model_.config()));
    if (meta.kind != "finetune") throw ConfigMismatchError("checkpoint kind '" + meta.kind + "' has no classifier head");
    epoch_ = meta.epoch;
    rng_.set_state(meta.rng_state);
    sampler_.rng.set_state(meta.sampler_state);
    history_ = meta.history;
  }

 private:
  SiameseModel<T>& model_;
  FinetuneConfig cfg_;
  double clip_norm_;
  Rng rng_;
  ModalitySampler sampler_;
  ClassifierHead<T> head_;
  nn::ParamList<T> params_;
  Adam<T> optim_;
  std::size_t epoch_ = 0;
  json history_ = json::array();
};

// Loads model parameters (values only) from any checkpoint kind.
template <Scalar T>
CheckpointMeta load_model_weights(const std::filesystem::path& path, SiameseModel<T>& model) {
  auto params = model.parameters();
  const auto meta = read_checkpoint_meta(path);
  if (meta.kind == "pretrain") return load_checkpoint<T>(path, params, nullptr, model_to_json(model.config()));
  // Finetune checkpoints hold only the backbone subset plus the head.
  auto subset = encoder_parameters(model);
  return load_checkpoint<T>(path, subset, nullptr, model_to_json(model.config()));
}

}  // namespace siamav
