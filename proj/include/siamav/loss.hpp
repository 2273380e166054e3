#pragma once

// Contrastive matching over pooled features, masked reconstruction of the full
// inputs, and their scaled combination.

#include <optional>
#include <string>
#include <vector>

#include "siamav/embed.hpp"
#include "siamav/mask.hpp"

namespace siamav {

struct ContrastiveConfig {
  double tau = 0.05;
  bool symmetric = true;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("contrastive temperature must be positive");
  }
};

enum class ReconMode { full, masked_only };

inline const char* recon_mode_name(ReconMode m) { return m == ReconMode::full ? "full" : "masked_only"; }

inline ReconMode parse_recon_mode(const std::string& s) {
  if (s == "full") return ReconMode::full;
  if (s == "masked_only") return ReconMode::masked_only;
  throw ConfigError("unknown reconstruction mode '" + s + "' (expected full or masked_only)");
}

struct LossScalers {
  double scale_contrastive = 1.0;
  double scale_reconstruction = 1.0;

  void validate() const {
    if (scale_contrastive < 0.0 || scale_reconstruction < 0.0) throw ConfigError("loss scalers must be nonnegative");
    if (scale_contrastive == 0.0 && scale_reconstruction == 0.0) {
      throw ConfigError("at least one pretraining loss scaler must be positive");
    }
  }
};

// S[i][j] = cos(Fa_i, Fv_j).
template <Scalar T>
Tensor<T> cosine_similarity_matrix(const Tensor<T>& fa, const Tensor<T>& fv) {
  if (fa.rank() != 2 || fv.rank() != 2 || fa.dim(1) != fv.dim(1)) {
    throw DimensionError("cosine similarity needs [B x d] inputs of equal width, got " + shape_str(fa.shape()) +
                         " and " + shape_str(fv.shape()));
  }
  return ops::matmul(ops::l2_normalize_rows(fa), ops::transpose(ops::l2_normalize_rows(fv)));
}

// InfoNCE over cosine similarity / tau with the diagonal as positives.
template <Scalar T>
Tensor<T> contrastive_loss(const Tensor<T>& fa, const Tensor<T>& fv, const ContrastiveConfig& cfg = {}) {
  cfg.validate();
  if (fa.rank() != 2 || fa.dim(0) < 2) throw ContractError("contrastive loss needs at least 2 pairs for negatives");
  if (fv.rank() != 2 || fv.dim(0) != fa.dim(0)) {
    throw DimensionError("audio and visual batches differ: " + shape_str(fa.shape()) + " vs " + shape_str(fv.shape()));
  }
  const std::size_t B = fa.dim(0);
  std::vector<std::size_t> diag(B);
  for (std::size_t i = 0; i < B; ++i) diag[i] = i;
  auto logits = ops::scale(cosine_similarity_matrix(fa, fv), static_cast<T>(1.0 / cfg.tau));
  auto a2v = ops::cross_entropy(logits, diag);
  if (!cfg.symmetric) return a2v;
  auto v2a = ops::cross_entropy(ops::transpose(logits), diag);
  return ops::scale(ops::add(a2v, v2a), T(0.5));
}

namespace detail {

// Squared error restricted to masked patches of one modality, as a mean over
// every masked element of the batch. Returns nullopt when nothing is masked.
template <Scalar T>
std::optional<Tensor<T>> masked_patch_mse(const Tensor<T>& pred, const Tensor<T>& target, const PatchGrid& g,
                                          const ModalityPlan& plan) {
  auto pp = patchify(pred, g);
  auto tp = patchify(target, g);
  const std::size_t B = plan.instances.size();
  if (pp.rank() != 3 || pp.dim(0) != B) throw GeometryError("reconstruction batch does not match the mask plan");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < B; ++i)
    for (auto t : plan.instances[i].masked) rows.push_back(i * g.tokens() + t);
  if (rows.empty()) return std::nullopt;
  const Shape flat{B * g.tokens(), g.patch_dim()};
  return ops::mse(ops::gather(ops::reshape(pp, flat), 0, rows), ops::gather(ops::reshape(tp, flat), 0, rows));
}

}  // namespace detail

// Full mode: mean squared error over every element of the spectrogram plus the
// same over the image. Masked-only mode restricts each term to the elements of
// masked patches (a modality with no masked patch contributes 0).
template <Scalar T>
Tensor<T> reconstruction_loss(const Tensor<T>& image_pred, const Tensor<T>& image, const Tensor<T>& audio_pred,
                              const Tensor<T>& audio, const MaskPlan& plan, ReconMode mode, const PatchGrid& visual_grid,
                              const PatchGrid& audio_grid) {
  if (image_pred.shape() != image.shape() || audio_pred.shape() != audio.shape()) {
    throw GeometryError("reconstruction shapes " + shape_str(image_pred.shape()) + "/" + shape_str(audio_pred.shape()) +
                        " differ from targets " + shape_str(image.shape()) + "/" + shape_str(audio.shape()));
  }
  if (mode == ReconMode::full) return ops::add(ops::mse(audio_pred, audio), ops::mse(image_pred, image));
  auto a = detail::masked_patch_mse(audio_pred, audio, audio_grid, plan.audio);
  auto v = detail::masked_patch_mse(image_pred, image, visual_grid, plan.visual);
  if (a && v) return ops::add(*a, *v);
  if (a) return *a;
  if (v) return *v;
  return ops::scale(ops::add(ops::mse(audio_pred, audio), ops::mse(image_pred, image)), T(0));
}

template <Scalar T>
struct LossParts {
  std::optional<Tensor<T>> contrastive;
  std::optional<Tensor<T>> reconstruction;
};

// scale_c * L_c + scale_rec * L_rec; a term with scaler 0 is left out of the graph.
template <Scalar T>
Tensor<T> total_pretrain_loss(const LossParts<T>& parts, const LossScalers& s) {
  std::optional<Tensor<T>> total;
  auto accumulate = [&](const std::optional<Tensor<T>>& term, double scale) {
    if (scale == 0.0) return;
    if (!term) throw ContractError("a loss term with a nonzero scaler was not computed");
    auto t = ops::scale(*term, static_cast<T>(scale));
    total = total ? ops::add(*total, t) : t;
  };
  accumulate(parts.contrastive, s.scale_contrastive);
  accumulate(parts.reconstruction, s.scale_reconstruction);
  if (!total) return Tensor<T>::scalar(T(0));
  return *total;
}

}  // namespace siamav
