#pragma once

// Patch geometry, patch (un)flattening and the token embedder shared by both
// modalities. Patches are flattened row-major within the patch with the
// channel index fastest: element (py, px, ch) sits at (py * patch + px) * C + ch.

#include <string>
#include <vector>

#include "siamav/nn.hpp"

namespace siamav {

enum class Modality { audio, visual };

inline const char* modality_name(Modality m) { return m == Modality::audio ? "audio" : "visual"; }

struct PatchGrid {
  std::size_t input_h = 0;
  std::size_t input_w = 0;
  std::size_t channels = 1;
  std::size_t patch = 16;

  void validate() const {
    if (patch == 0 || input_h == 0 || input_w == 0 || channels == 0 || input_h % patch != 0 ||
        input_w % patch != 0) {
      throw GeometryError("patch " + std::to_string(patch) + " does not tile a " + std::to_string(input_h) + "x" +
                          std::to_string(input_w) + " input");
    }
  }
  std::size_t rows() const { return input_h / patch; }
  std::size_t cols() const { return input_w / patch; }
  std::size_t tokens() const { return rows() * cols(); }
  std::size_t patch_dim() const { return channels * patch * patch; }
  std::size_t pixels() const { return input_h * input_w * channels; }

  bool operator==(const PatchGrid&) const = default;
};

namespace detail {

// Number of leading (batch) items in x for this grid; nullopt-like 0 flags a mismatch.
inline std::size_t leading_items(const Shape& s, const PatchGrid& g, bool& batched) {
  const bool full = s.size() >= 3 && s[s.size() - 3] == g.input_h && s[s.size() - 2] == g.input_w &&
                    s.back() == g.channels;
  const bool flat = g.channels == 1 && s.size() >= 2 && s[s.size() - 2] == g.input_h && s.back() == g.input_w;
  if (full && s.size() <= 4) {
    batched = s.size() == 4;
    return batched ? s[0] : 1;
  }
  if (flat && s.size() <= 3) {
    batched = s.size() == 3;
    return batched ? s[0] : 1;
  }
  return 0;
}

// Flat source offset (within one item) of patch-space element (token, q).
inline std::vector<std::size_t> patch_index_map(const PatchGrid& g) {
  std::vector<std::size_t> map(g.tokens() * g.patch_dim());
  const std::size_t C = g.channels, p = g.patch;
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < g.cols(); ++c)
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          for (std::size_t ch = 0; ch < C; ++ch) {
            const std::size_t t = r * g.cols() + c;
            const std::size_t q = (py * p + px) * C + ch;
            map[t * g.patch_dim() + q] = ((r * p + py) * g.input_w + (c * p + px)) * C + ch;
          }
  return map;
}

}  // namespace detail

// [H x W x C] (or [H x W] when C = 1, optionally with a leading batch axis)
// -> [tokens x C*patch^2]; token t is patch (t / cols, t % cols).
template <Scalar T>
Tensor<T> patchify(const Tensor<T>& x, const PatchGrid& g) {
  g.validate();
  bool batched = false;
  const std::size_t items = detail::leading_items(x.shape(), g, batched);
  if (items == 0) throw GeometryError("input " + shape_str(x.shape()) + " does not match the patch grid");
  const auto base = detail::patch_index_map(g);
  std::vector<std::size_t> index;
  index.reserve(items * base.size());
  for (std::size_t b = 0; b < items; ++b)
    for (auto i : base) index.push_back(b * g.pixels() + i);
  Shape s = batched ? Shape{items, g.tokens(), g.patch_dim()} : Shape{g.tokens(), g.patch_dim()};
  return ops::take(x, std::move(index), std::move(s));
}

// Exact inverse of patchify. Single-channel grids return [H x W].
template <Scalar T>
Tensor<T> unpatchify(const Tensor<T>& p, const PatchGrid& g) {
  g.validate();
  const auto& s = p.shape();
  if (s.size() < 2 || s.size() > 3 || s[s.size() - 2] != g.tokens() || s.back() != g.patch_dim()) {
    throw GeometryError("patch tensor " + shape_str(s) + " does not match a grid of " + std::to_string(g.tokens()) +
                        " tokens x " + std::to_string(g.patch_dim()));
  }
  const std::size_t items = s.size() == 3 ? s[0] : 1;
  const auto fwd = detail::patch_index_map(g);
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  std::vector<std::size_t> index;
  index.reserve(items * inv.size());
  for (std::size_t b = 0; b < items; ++b)
    for (auto i : inv) index.push_back(b * inv.size() + i);
  Shape out = g.channels == 1 ? Shape{g.input_h, g.input_w} : Shape{g.input_h, g.input_w, g.channels};
  if (s.size() == 3) out.insert(out.begin(), items);
  return ops::take(p, std::move(index), std::move(out));
}

// Single-channel kernel from a 3-channel one: the mean of the R, G and B
// weights at each patch offset. The sum is formed in extended precision so the
// result is the correctly rounded mean, and equal channels return the shared
// kernel exactly.
template <Scalar T>
Tensor<T> derive_audio_projection(const Tensor<T>& image_proj) {
  if (image_proj.rank() != 2 || image_proj.dim(1) % 3 != 0) {
    throw DimensionError("derive_audio_projection expects [d x 3*patch^2], got " + shape_str(image_proj.shape()));
  }
  const std::size_t d = image_proj.dim(0), q = image_proj.dim(1) / 3;
  std::vector<T> out(d * q);
  for (std::size_t o = 0; o < d; ++o)
    for (std::size_t p = 0; p < q; ++p) {
      const T* w = image_proj.data().data() + o * 3 * q + 3 * p;
      const long double s = static_cast<long double>(w[0]) + static_cast<long double>(w[1]) + static_cast<long double>(w[2]);
      out[o * q + p] = static_cast<T>(s / 3.0L);
    }
  return detail::make_result<T>({d, q}, std::move(out), {image_proj}, [d, q](detail::Node<T>& self) {
    auto& pw = *self.parents[0];
    for (std::size_t o = 0; o < d; ++o)
      for (std::size_t p = 0; p < q; ++p) {
        const T g = self.grad[o * q + p] / T(3);
        for (std::size_t ch = 0; ch < 3; ++ch) pw.grad[o * 3 * q + 3 * p + ch] += g;
      }
  });
}

// Embedded tokens of one modality for a group of instances. `positions[i]`
// lists the original patch index of every row of instance i.
template <Scalar T>
struct TokenSet {
  Tensor<T> tokens;  // [items x count x d]
  std::vector<std::vector<std::size_t>> positions;
  Modality modality = Modality::visual;

  std::size_t items() const { return tokens.dim(0); }
  std::size_t count() const { return tokens.dim(1); }
  std::size_t width() const { return tokens.dim(2); }
};

struct EmbedderConfig {
  std::size_t d = 32;
  PatchGrid visual{64, 64, 3, 16};
  PatchGrid audio{128, 64, 1, 16};
  bool modality_embedding = false;
};

template <Scalar T>
struct EmbedderParams {
  Tensor<T> image_proj;  // [d x 3*patch^2]
  Tensor<T> proj_bias;   // [d]
  Tensor<T> pos_visual;  // [n x d]
  Tensor<T> pos_audio;   // [k x d]
  Tensor<T> type_visual;  // [d], only with modality_embedding
  Tensor<T> type_audio;   // [d], only with modality_embedding
  EmbedderConfig cfg;

  static EmbedderParams init(const EmbedderConfig& cfg, Rng& rng) {
    cfg.visual.validate();
    cfg.audio.validate();
    if (cfg.visual.channels != 3 || cfg.audio.channels != 1 || cfg.visual.patch != cfg.audio.patch) {
      throw GeometryError("embedder expects an RGB visual grid and a 1-channel audio grid with one patch size");
    }
    EmbedderParams p;
    p.cfg = cfg;
    p.image_proj = nn::xavier_param<T>(cfg.d, cfg.visual.patch_dim(), rng);
    p.proj_bias = nn::const_param<T>({cfg.d}, T(0));
    p.pos_visual = nn::normal_param<T>({cfg.visual.tokens(), cfg.d}, 0.02, rng);
    p.pos_audio = nn::normal_param<T>({cfg.audio.tokens(), cfg.d}, 0.02, rng);
    if (cfg.modality_embedding) {
      p.type_visual = nn::normal_param<T>({cfg.d}, 0.02, rng);
      p.type_audio = nn::normal_param<T>({cfg.d}, 0.02, rng);
    }
    return p;
  }

  const PatchGrid& grid(Modality m) const { return m == Modality::audio ? cfg.audio : cfg.visual; }
  const Tensor<T>& positions(Modality m) const { return m == Modality::audio ? pos_audio : pos_visual; }

  Tensor<T> projection(Modality m) const {
    return m == Modality::audio ? derive_audio_projection(image_proj) : image_proj;
  }

  void collect(nn::ParamList<T>& out) const {
    out.push_back({"embed.image_proj", image_proj});
    out.push_back({"embed.proj_bias", proj_bias});
    out.push_back({"embed.pos_visual", pos_visual});
    out.push_back({"embed.pos_audio", pos_audio});
    if (cfg.modality_embedding) {
      out.push_back({"embed.type_visual", type_visual});
      out.push_back({"embed.type_audio", type_audio});
    }
  }
};

// Projects a subset of patches per instance. `patches` is [items x tokens x pdim];
// every instance must keep the same number of patches (one mask bucket).
template <Scalar T>
TokenSet<T> embed_patches(const Tensor<T>& patches, const std::vector<std::vector<std::size_t>>& keep,
                          Modality modality, const EmbedderParams<T>& params) {
  const auto& g = params.grid(modality);
  if (patches.rank() != 3 || patches.dim(1) != g.tokens() || patches.dim(2) != g.patch_dim()) {
    throw GeometryError(std::string(modality_name(modality)) + " patches " + shape_str(patches.shape()) +
                        " do not match the grid");
  }
  if (keep.size() != patches.dim(0)) throw PlanError("keep lists do not cover every instance");
  const std::size_t items = keep.size();
  const std::size_t count = keep.front().size();
  if (count == 0) throw PlanError("an instance keeps no tokens");
  std::vector<std::size_t> rows, pos_rows;
  rows.reserve(items * count);
  for (std::size_t b = 0; b < items; ++b) {
    if (keep[b].size() != count) throw PlanError("instances in one bucket keep different token counts");
    for (auto t : keep[b]) {
      if (t >= g.tokens()) throw PlanError("kept index " + std::to_string(t) + " outside the token grid");
      rows.push_back(b * g.tokens() + t);
      pos_rows.push_back(t);
    }
  }
  const std::size_t d = params.cfg.d;
  auto flat = ops::reshape(patches, {items * g.tokens(), g.patch_dim()});
  auto x = ops::linear(ops::gather(flat, 0, rows), params.projection(modality), params.proj_bias);
  x = ops::add(x, ops::gather(params.positions(modality), 0, pos_rows));
  if (params.cfg.modality_embedding) {
    x = ops::add_trailing(x, modality == Modality::audio ? params.type_audio : params.type_visual);
  }
  return {ops::reshape(x, {items, count, d}), keep, modality};
}

// All tokens of one instance: patchify(x) * proj^T + bias + positional row.
template <Scalar T>
TokenSet<T> embed_modality(const Tensor<T>& x, Modality modality, const EmbedderParams<T>& params) {
  const auto& g = params.grid(modality);
  bool batched = false;
  const std::size_t items = detail::leading_items(x.shape(), g, batched);
  if (items == 0) {
    throw GeometryError(std::string(modality_name(modality)) + " input " + shape_str(x.shape()) +
                        " does not match the grid");
  }
  auto patches = ops::reshape(patchify(x, g), {items, g.tokens(), g.patch_dim()});
  std::vector<std::size_t> all(g.tokens());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return embed_patches(patches, std::vector<std::vector<std::size_t>>(items, all), modality, params);
}

}  // namespace siamav
