#pragma once

// Multi-ratio masking planner. Each batch is split evenly across a discrete
// ratio set, so the number of instances that keep any given token count is
// known in advance and instances with equal counts stack into rectangular
// tensors (one bucket per modality and ratio).

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "siamav/embed.hpp"
#include "siamav/rng.hpp"

namespace siamav {

// Masked-token count for a ratio: round half away from zero.
inline std::size_t masked_count(double ratio, std::size_t tokens) {
  return static_cast<std::size_t>(std::round(ratio * static_cast<double>(tokens)));
}

struct RatioSet {
  std::vector<double> ratios{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};

  // Multi-ratio sets are capped at 0.5; a single ratio is a fixed-ratio run.
  void validate() const {
    if (ratios.empty()) throw ConfigError("ratio set is empty");
    for (std::size_t i = 0; i < ratios.size(); ++i) {
      const double r = ratios[i];
      if (!(r >= 0.0 && r < 1.0)) throw ConfigError("masking ratio " + std::to_string(r) + " outside [0, 1)");
      for (std::size_t j = 0; j < i; ++j)
        if (ratios[j] == r) throw ConfigError("duplicate masking ratio " + std::to_string(r));
    }
    if (multi() && *std::max_element(ratios.begin(), ratios.end()) > 0.5) {
      throw ConfigError("multi-ratio masking allows ratios up to 0.5");
    }
  }
  bool multi() const { return ratios.size() > 1; }
};

inline double expected_kept_fraction(const RatioSet& set) {
  if (set.ratios.empty()) throw ConfigError("ratio set is empty");
  double s = 0.0;
  for (double r : set.ratios) s += r;
  return 1.0 - s / static_cast<double>(set.ratios.size());
}

struct InstanceMask {
  std::size_t ratio_index = 0;
  double ratio = 0.0;
  std::vector<std::size_t> kept;    // ascending
  std::vector<std::size_t> masked;  // ascending
};

struct ModalityPlan {
  std::size_t tokens = 0;
  std::vector<InstanceMask> instances;
  // ratio index -> instances (ascending) masked at that ratio.
  std::map<std::size_t, std::vector<std::size_t>> buckets;
};

struct MaskPlan {
  std::vector<double> ratios;
  ModalityPlan audio;
  ModalityPlan visual;

  std::size_t batch_size() const { return audio.instances.size(); }
  const ModalityPlan& of(Modality m) const { return m == Modality::audio ? audio : visual; }
};

namespace detail {

inline InstanceMask draw_instance_mask(std::size_t tokens, std::size_t ratio_index, double ratio, Rng& rng) {
  InstanceMask m;
  m.ratio_index = ratio_index;
  m.ratio = ratio;
  const std::size_t nm = masked_count(ratio, tokens);
  if (nm >= tokens) throw ConfigError("ratio " + std::to_string(ratio) + " masks every token");
  m.masked = rng.sample_without_replacement(tokens, nm);
  std::sort(m.masked.begin(), m.masked.end());
  std::vector<bool> is_masked(tokens, false);
  for (auto t : m.masked) is_masked[t] = true;
  for (std::size_t t = 0; t < tokens; ++t)
    if (!is_masked[t]) m.kept.push_back(t);
  return m;
}

inline ModalityPlan plan_modality(std::size_t batch, std::size_t tokens, const std::vector<double>& ratios, Rng& rng) {
  ModalityPlan p;
  p.tokens = tokens;
  const std::size_t per = batch / ratios.size();
  std::vector<std::size_t> assignment;
  assignment.reserve(batch);
  for (std::size_t r = 0; r < ratios.size(); ++r) assignment.insert(assignment.end(), per, r);
  rng.shuffle(assignment);
  for (std::size_t i = 0; i < batch; ++i) {
    p.instances.push_back(draw_instance_mask(tokens, assignment[i], ratios[assignment[i]], rng));
    p.buckets[assignment[i]].push_back(i);
  }
  return p;
}

}  // namespace detail

// Even split of the batch across the ratio set, with independent ratio
// assignments for the audio and visual streams.
inline MaskPlan plan_multi_ratio(std::size_t batch_size, std::size_t tokens_audio, std::size_t tokens_visual,
                                 const RatioSet& set, Rng& rng) {
  set.validate();
  if (batch_size == 0 || batch_size % set.ratios.size() != 0) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " is not divisible by the " +
                      std::to_string(set.ratios.size()) + " masking ratios");
  }
  MaskPlan plan;
  plan.ratios = set.ratios;
  plan.audio = detail::plan_modality(batch_size, tokens_audio, set.ratios, rng);
  plan.visual = detail::plan_modality(batch_size, tokens_visual, set.ratios, rng);
  return plan;
}

// Single-modality fixed-ratio plan: one bucket, every instance at `ratio`.
inline ModalityPlan plan_fixed_ratio(std::size_t batch_size, std::size_t tokens, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("fixed masking ratio " + std::to_string(ratio) + " outside [0, 1)");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  return detail::plan_modality(batch_size, tokens, {ratio}, rng);
}

inline MaskPlan plan_fixed_ratio(std::size_t batch_size, std::size_t tokens_audio, std::size_t tokens_visual,
                                 double ratio, Rng& rng) {
  MaskPlan plan;
  plan.ratios = {ratio};
  plan.audio = plan_fixed_ratio(batch_size, tokens_audio, ratio, rng);
  plan.visual = plan_fixed_ratio(batch_size, tokens_visual, ratio, rng);
  return plan;
}

// Dispatches on the set size: one ratio means fixed-ratio masking.
inline MaskPlan plan_masks(std::size_t batch_size, std::size_t tokens_audio, std::size_t tokens_visual,
                           const RatioSet& set, Rng& rng) {
  if (set.multi()) return plan_multi_ratio(batch_size, tokens_audio, tokens_visual, set, rng);
  set.validate();
  return plan_fixed_ratio(batch_size, tokens_audio, tokens_visual, set.ratios.front(), rng);
}

// Plan that keeps every token (finetuning and evaluation).
inline MaskPlan plan_identity(std::size_t batch_size, std::size_t tokens_audio, std::size_t tokens_visual) {
  Rng unused(0);
  return plan_fixed_ratio(batch_size, tokens_audio, tokens_visual, 0.0, unused);
}

// Kept tokens of one instance, in ascending original position.
template <Scalar T>
TokenSet<T> gather_kept(const TokenSet<T>& tokens, std::size_t item, const InstanceMask& mask) {
  if (item >= tokens.items()) throw PlanError("instance " + std::to_string(item) + " not in the token set");
  const auto& pos = tokens.positions[item];
  std::vector<std::size_t> rows;
  rows.reserve(mask.kept.size());
  for (auto k : mask.kept) {
    auto it = std::find(pos.begin(), pos.end(), k);
    if (it == pos.end()) {
      throw PlanError("kept index " + std::to_string(k) + " is not present in the token set");
    }
    rows.push_back(static_cast<std::size_t>(it - pos.begin()));
  }
  auto inst = ops::select0(tokens.tokens, item);
  auto kept = ops::gather(inst, 0, rows);
  return {ops::reshape(kept, {1, rows.size(), tokens.width()}), {mask.kept}, tokens.modality};
}

}  // namespace siamav
