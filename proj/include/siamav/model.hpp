#pragma once

// Siamese audio-visual transformer: one encoder applied to both modalities,
// a joint multimodal fusion stage over the concatenated unmasked tokens, and
// a reconstruction decoder that predicts the full spectrogram and image.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "siamav/embed.hpp"
#include "siamav/mask.hpp"
#include "siamav/nn.hpp"

namespace siamav {

struct ModelConfig {
  std::size_t d = 32;
  std::size_t encoder_depth = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t mm_depth = 2;
  std::size_t dec_depth = 6;
  std::size_t dec_width = 16;
  std::size_t dec_heads = 4;
  std::size_t patch = 16;
  std::size_t image_h = 64;
  std::size_t image_w = 64;
  std::size_t audio_h = 128;  // frames
  std::size_t audio_w = 64;   // mel bins
  bool shared_encoder = true;
  bool modality_embedding = false;

  PatchGrid visual_grid() const { return {image_h, image_w, 3, patch}; }
  PatchGrid audio_grid() const { return {audio_h, audio_w, 1, patch}; }
  EmbedderConfig embedder() const { return {d, visual_grid(), audio_grid(), modality_embedding}; }
  std::size_t joint_length() const { return audio_grid().tokens() + visual_grid().tokens(); }

  void validate() const {
    visual_grid().validate();
    audio_grid().validate();
    if (d == 0 || dec_width == 0 || mlp_ratio == 0) throw ConfigError("model widths must be positive");
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("model width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
    }
    if (dec_heads == 0 || dec_width % dec_heads != 0) {
      throw ConfigError("decoder width " + std::to_string(dec_width) + " is not divisible by " +
                        std::to_string(dec_heads) + " heads");
    }
  }
};

struct ParameterCount {
  std::size_t embed = 0;
  std::size_t encoder_blocks = 0;  // transformer blocks of every encoder
  std::size_t encoder_norm = 0;
  std::size_t mm = 0;
  std::size_t decoder = 0;
  std::size_t total() const { return embed + encoder_blocks + encoder_norm + mm + decoder; }
};

// Closed-form learnable-scalar count for a configuration.
inline ParameterCount count_parameters(const ModelConfig& cfg) {
  cfg.validate();
  ParameterCount c;
  const std::size_t d = cfg.d, dw = cfg.dec_width, p2 = cfg.patch * cfg.patch;
  const std::size_t n = cfg.visual_grid().tokens(), k = cfg.audio_grid().tokens();
  const std::size_t encoders = cfg.shared_encoder ? 1 : 2;
  c.embed = d * 3 * p2 + d + (n + k) * d + (cfg.modality_embedding ? 2 * d : 0);
  c.encoder_blocks = encoders * cfg.encoder_depth * nn::Block<double>::parameter_count(d, cfg.mlp_ratio);
  c.encoder_norm = encoders * 2 * d;
  c.mm = cfg.mm_depth * nn::Block<double>::parameter_count(d, cfg.mlp_ratio);
  c.decoder = (d * dw + dw) + dw + (n + k) * dw + cfg.dec_depth * nn::Block<double>::parameter_count(dw, cfg.mlp_ratio) +
              2 * dw + (dw * p2 + p2) + (dw * 3 * p2 + 3 * p2);
  return c;
}

template <Scalar T>
struct EncoderOutput {
  TokenSet<T> tokens;  // post-norm tokens, kept positions only
  Tensor<T> pooled;    // [items x d], mean of the output tokens
};

// Per-instance token rows with their original positions.
template <Scalar T>
struct InstanceTokens {
  Tensor<T> tokens;  // [count x width]
  std::vector<std::size_t> positions;
};

// Output of the fusion stage: one sequence per instance, audio rows first.
// Joint positions index the decoder sequence: audio p -> p, visual p -> k + p.
template <Scalar T>
struct FusedTokens {
  std::vector<Tensor<T>> tokens;  // [count_i x d]
  std::vector<std::vector<std::size_t>> positions;
};

template <Scalar T>
struct Reconstruction {
  Tensor<T> audio;           // [B x Ha x Wa]
  Tensor<T> visual;          // [B x Hv x Wv x 3]
  Tensor<T> audio_patches;   // [B x k x patch^2]
  Tensor<T> visual_patches;  // [B x n x 3*patch^2]
};

template <Scalar T>
struct PretrainForward {
  Tensor<T> pooled_audio;   // [B x d]
  Tensor<T> pooled_visual;  // [B x d]
  std::optional<Reconstruction<T>> recon;
  // Encoder outputs per instance (kept tokens), filled when reconstructing.
  std::vector<InstanceTokens<T>> encoded_audio;
  std::vector<InstanceTokens<T>> encoded_visual;
  std::size_t kept_audio_tokens = 0;
  std::size_t kept_visual_tokens = 0;
};

template <Scalar T>
class SiameseModel {
 public:
  struct Encoder {
    std::vector<nn::Block<T>> blocks;
    nn::LayerNorm<T> norm;
  };

  SiameseModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    embed_ = EmbedderParams<T>::init(cfg.embedder(), rng);
    const std::size_t encoders = cfg.shared_encoder ? 1 : 2;
    for (std::size_t e = 0; e < encoders; ++e) {
      Encoder enc;
      for (std::size_t i = 0; i < cfg.encoder_depth; ++i)
        enc.blocks.push_back(nn::Block<T>::init(cfg.d, cfg.heads, cfg.mlp_ratio, rng));
      enc.norm = nn::LayerNorm<T>::init(cfg.d);
      encoders_.push_back(std::move(enc));
    }
    // Fusion blocks start as copies of the last encoder blocks (the visual
    // encoder when encoders are separate); missing depth is freshly drawn.
    const auto& src = encoders_.front().blocks;
    for (std::size_t i = 0; i < cfg.mm_depth; ++i) {
      const std::ptrdiff_t j = static_cast<std::ptrdiff_t>(src.size()) - static_cast<std::ptrdiff_t>(cfg.mm_depth) +
                               static_cast<std::ptrdiff_t>(i);
      mm_.push_back(j >= 0 ? src[static_cast<std::size_t>(j)].clone()
                           : nn::Block<T>::init(cfg.d, cfg.heads, cfg.mlp_ratio, rng));
    }
    dec_in_ = nn::Linear<T>::init(cfg.d, cfg.dec_width, rng);
    mask_token_ = nn::normal_param<T>({cfg.dec_width}, 0.02, rng);
    dec_pos_ = nn::normal_param<T>({cfg.joint_length(), cfg.dec_width}, 0.02, rng);
    for (std::size_t i = 0; i < cfg.dec_depth; ++i)
      dec_blocks_.push_back(nn::Block<T>::init(cfg.dec_width, cfg.dec_heads, cfg.mlp_ratio, rng));
    dec_norm_ = nn::LayerNorm<T>::init(cfg.dec_width);
    head_audio_ = nn::Linear<T>::init(cfg.dec_width, cfg.audio_grid().patch_dim(), rng);
    head_visual_ = nn::Linear<T>::init(cfg.dec_width, cfg.visual_grid().patch_dim(), rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const EmbedderParams<T>& embedder() const { return embed_; }
  const Encoder& encoder(Modality m) const {
    return cfg_.shared_encoder || m == Modality::visual ? encoders_[0] : encoders_[1];
  }
  const Tensor<T>& mask_token() const { return mask_token_; }

  nn::ParamList<T> parameters() const {
    nn::ParamList<T> out;
    embed_.collect(out);
    for (std::size_t e = 0; e < encoders_.size(); ++e) {
      const std::string prefix = cfg_.shared_encoder ? "encoder" : (e == 0 ? "encoder_visual" : "encoder_audio");
      for (std::size_t i = 0; i < encoders_[e].blocks.size(); ++i)
        encoders_[e].blocks[i].collect(prefix + ".blocks." + std::to_string(i), out);
      encoders_[e].norm.collect(prefix + ".norm", out);
    }
    for (std::size_t i = 0; i < mm_.size(); ++i) mm_[i].collect("mm." + std::to_string(i), out);
    dec_in_.collect("decoder.in", out);
    out.push_back({"decoder.mask_token", mask_token_});
    out.push_back({"decoder.pos", dec_pos_});
    for (std::size_t i = 0; i < dec_blocks_.size(); ++i) dec_blocks_[i].collect("decoder.blocks." + std::to_string(i), out);
    dec_norm_.collect("decoder.norm", out);
    head_audio_.collect("decoder.head_audio", out);
    head_visual_.collect("decoder.head_visual", out);
    return out;
  }

  // Encoder stack plus final norm over [items x count x d] tokens; pooled
  // features are the token mean taken after the final norm.
  EncoderOutput<T> encode(const TokenSet<T>& in, Modality m) const {
    if (in.tokens.rank() != 3 || in.width() != cfg_.d) {
      throw ConfigError("encoder expects token width " + std::to_string(cfg_.d) + ", got " +
                        shape_str(in.tokens.shape()));
    }
    const auto& enc = encoder(m);
    auto x = in.tokens;
    for (const auto& b : enc.blocks) x = b(x);
    x = enc.norm(x);
    auto pooled = ops::mean_axis(x, 1);
    return {{x, in.positions, m}, pooled};
  }

  // Embeds and encodes every token (no masking). Inputs carry a batch axis:
  // audio [B x Ha x Wa], visual [B x Hv x Wv x 3].
  EncoderOutput<T> encode_full(const Tensor<T>& input, Modality m) const {
    return encode(embed_modality(input, m, embed_), m);
  }

  // Joint self-attention over [audio kept ; visual kept] per instance. Inputs
  // pass through stop_gradient, so nothing downstream reaches the encoder.
  FusedTokens<T> fuse(const std::vector<InstanceTokens<T>>& audio, const std::vector<InstanceTokens<T>>& visual) const {
    if (audio.size() != visual.size() || audio.empty()) throw ContractError("fuse needs aligned audio and visual instances");
    const std::size_t k = cfg_.audio_grid().tokens();
    const std::size_t B = audio.size();
    FusedTokens<T> out;
    out.tokens.resize(B);
    out.positions.resize(B);
    std::map<std::size_t, std::vector<std::size_t>> by_length;
    std::vector<Tensor<T>> joined(B);
    for (std::size_t i = 0; i < B; ++i) {
      joined[i] = ops::concat<T>({ops::stop_gradient(audio[i].tokens), ops::stop_gradient(visual[i].tokens)}, 0);
      auto& pos = out.positions[i];
      pos = audio[i].positions;
      for (auto p : visual[i].positions) pos.push_back(k + p);
      by_length[joined[i].dim(0)].push_back(i);
    }
    for (const auto& [len, members] : by_length) {
      std::vector<Tensor<T>> group;
      for (auto i : members) group.push_back(joined[i]);
      auto x = ops::stack(group);
      for (const auto& b : mm_) x = b(x);
      for (std::size_t j = 0; j < members.size(); ++j) out.tokens[members[j]] = ops::select0(x, j);
    }
    return out;
  }

  FusedTokens<T> fuse(const EncoderOutput<T>& audio, const EncoderOutput<T>& visual) const {
    return fuse(split_instances(audio), split_instances(visual));
  }

  // Reinserts the learnable mask token at every masked position, runs the
  // decoder over the full joint sequence and maps tokens back to pixels.
  Reconstruction<T> decode(const FusedTokens<T>& fused, const MaskPlan& plan) const {
    const std::size_t B = fused.tokens.size();
    const auto ga = cfg_.audio_grid();
    const auto gv = cfg_.visual_grid();
    const std::size_t k = ga.tokens(), n = gv.tokens(), L = k + n;
    if (plan.batch_size() != B) throw PlanError("mask plan and fused tokens cover different batches");
    std::vector<Tensor<T>> seqs;
    seqs.reserve(B);
    for (std::size_t i = 0; i < B; ++i) {
      std::vector<bool> masked(L, false);
      for (auto p : plan.audio.instances[i].masked) masked[p] = true;
      for (auto p : plan.visual.instances[i].masked) masked[k + p] = true;
      for (auto p : fused.positions[i]) {
        if (p >= L) throw PlanError("fused position " + std::to_string(p) + " outside the joint sequence");
        if (masked[p]) throw PlanError("position " + std::to_string(p) + " is both kept and masked");
      }
      auto x = dec_in_(fused.tokens[i]);
      seqs.push_back(ops::scatter_rows(x, fused.positions[i], mask_token_, L));
    }
    auto x = ops::add_trailing(ops::stack(seqs), dec_pos_);
    for (const auto& b : dec_blocks_) x = b(x);
    x = dec_norm_(x);
    Reconstruction<T> r;
    r.audio_patches = head_audio_(ops::slice(x, 1, 0, k));
    r.visual_patches = head_visual_(ops::slice(x, 1, k, n));
    r.audio = unpatchify(r.audio_patches, ga);
    r.visual = unpatchify(r.visual_patches, gv);
    return r;
  }

  // Masked pretraining forward pass. Each (modality, ratio) bucket is encoded
  // as one rectangular batch.
  PretrainForward<T> forward_pretrain(const Tensor<T>& audio, const Tensor<T>& visual, const MaskPlan& plan,
                                      bool reconstruct) const {
    const std::size_t B = plan.batch_size();
    PretrainForward<T> out;
    std::vector<InstanceTokens<T>> inst_a(reconstruct ? B : 0), inst_v(reconstruct ? B : 0);
    for (Modality m : {Modality::audio, Modality::visual}) {
      const auto& grid = embed_.grid(m);
      const auto& input = m == Modality::audio ? audio : visual;
      auto patches = patchify(input, grid);
      if (patches.rank() != 3 || patches.dim(0) != B) {
        throw GeometryError(std::string(modality_name(m)) + " batch " + shape_str(input.shape()) +
                            " does not match a plan of " + std::to_string(B));
      }
      const auto& mp = plan.of(m);
      std::vector<Tensor<T>> pooled_parts;
      std::vector<std::size_t> order;
      std::size_t kept_total = 0;
      for (const auto& [ratio_index, members] : mp.buckets) {
        std::vector<std::vector<std::size_t>> keep;
        for (auto i : members) keep.push_back(mp.instances[i].kept);
        auto sub = ops::gather(patches, 0, members);
        auto enc = encode(embed_patches(sub, keep, m, embed_), m);
        pooled_parts.push_back(enc.pooled);
        order.insert(order.end(), members.begin(), members.end());
        kept_total += members.size() * keep.front().size();
        if (reconstruct) {
          auto& dst = m == Modality::audio ? inst_a : inst_v;
          for (std::size_t j = 0; j < members.size(); ++j)
            dst[members[j]] = {ops::select0(enc.tokens.tokens, j), keep[j]};
        }
      }
      std::vector<std::size_t> row_of(B);
      for (std::size_t r = 0; r < order.size(); ++r) row_of[order[r]] = r;
      auto pooled = ops::gather(ops::concat(pooled_parts, 0), 0, row_of);
      if (m == Modality::audio) {
        out.pooled_audio = pooled;
        out.kept_audio_tokens = kept_total;
      } else {
        out.pooled_visual = pooled;
        out.kept_visual_tokens = kept_total;
      }
    }
    if (reconstruct) {
      out.recon = decode(fuse(inst_a, inst_v), plan);
      out.encoded_audio = std::move(inst_a);
      out.encoded_visual = std::move(inst_v);
    }
    return out;
  }

  // Mutable access for the optimizer and checkpoint loader (values only).
  nn::ParamList<T> mutable_parameters() { return parameters(); }

 private:
  static std::vector<InstanceTokens<T>> split_instances(const EncoderOutput<T>& e) {
    std::vector<InstanceTokens<T>> out;
    for (std::size_t i = 0; i < e.tokens.items(); ++i)
      out.push_back({ops::select0(e.tokens.tokens, i), e.tokens.positions[i]});
    return out;
  }

  ModelConfig cfg_;
  EmbedderParams<T> embed_;
  std::vector<Encoder> encoders_;
  std::vector<nn::Block<T>> mm_;
  nn::Linear<T> dec_in_;
  Tensor<T> mask_token_;
  Tensor<T> dec_pos_;
  std::vector<nn::Block<T>> dec_blocks_;
  nn::LayerNorm<T> dec_norm_;
  nn::Linear<T> head_audio_;
  nn::Linear<T> head_visual_;
};

}  // namespace siamav
