#pragma once

// Parameter containers and the pre-norm transformer block shared by the
// encoder, the multimodal fusion stage and the decoder.

#include <string>
#include <utility>
#include <vector>

#include "siamav/ops.hpp"
#include "siamav/rng.hpp"

namespace siamav::nn {

template <Scalar T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
};

template <Scalar T>
using ParamList = std::vector<NamedParam<T>>;

template <Scalar T>
Tensor<T> param_from(Shape shape, std::vector<T> values) {
  return Tensor<T>(std::move(shape), std::move(values), true);
}

template <Scalar T>
Tensor<T> normal_param(Shape shape, double stddev, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return param_from<T>(std::move(shape), std::move(v));
}

template <Scalar T>
Tensor<T> xavier_param(std::size_t out, std::size_t in, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<T> v(out * in);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-a, a));
  return param_from<T>({out, in}, std::move(v));
}

template <Scalar T>
Tensor<T> const_param(Shape shape, T value) {
  return param_from<T>(shape, std::vector<T>(shape_numel(shape), value));
}

// Independent copy of a parameter (same values, fresh storage and grad).
template <Scalar T>
Tensor<T> clone_param(const Tensor<T>& p) {
  return param_from<T>(p.shape(), p.values());
}

template <Scalar T>
struct Linear {
  Tensor<T> weight;  // [out x in]
  Tensor<T> bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    return {xavier_param<T>(out, in, rng), const_param<T>({out}, T(0))};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
  Linear clone() const { return {clone_param(weight), clone_param(bias)}; }
};

template <Scalar T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-5);

  static LayerNorm init(std::size_t d) { return {const_param<T>({d}, T(1)), const_param<T>({d}, T(0))}; }
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm(x, gamma, beta, eps); }
  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
  LayerNorm clone() const { return {clone_param(gamma), clone_param(beta), eps}; }
};

template <Scalar T>
struct AttentionWeights {
  Linear<T> q, k, v, out;

  static AttentionWeights init(std::size_t d, Rng& rng) {
    auto q = Linear<T>::init(d, d, rng);
    auto k = Linear<T>::init(d, d, rng);
    auto v = Linear<T>::init(d, d, rng);
    auto o = Linear<T>::init(d, d, rng);
    return {q, k, v, o};
  }
  void collect(const std::string& prefix, ParamList<T>& out_list) const {
    q.collect(prefix + ".q", out_list);
    k.collect(prefix + ".k", out_list);
    v.collect(prefix + ".v", out_list);
    out.collect(prefix + ".out", out_list);
  }
  AttentionWeights clone() const { return {q.clone(), k.clone(), v.clone(), out.clone()}; }
};

// Projects queries/keys/values, runs scaled dot-product attention per head,
// concatenates heads and applies the output projection. No positional term is
// involved, so the op is equivariant to token permutations.
template <Scalar T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionWeights<T>& w, std::size_t heads) {
  const std::size_t d = q.shape().back();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  auto ctx = ops::attention_core(w.q(q), w.k(k), w.v(v), heads);
  return w.out(ctx);
}

template <Scalar T>
struct Block {
  LayerNorm<T> norm1;
  AttentionWeights<T> attn;
  LayerNorm<T> norm2;
  Linear<T> fc1;
  Linear<T> fc2;
  std::size_t heads = 1;

  static Block init(std::size_t d, std::size_t heads, std::size_t mlp_ratio, Rng& rng) {
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
    }
    Block b;
    b.norm1 = LayerNorm<T>::init(d);
    b.attn = AttentionWeights<T>::init(d, rng);
    b.norm2 = LayerNorm<T>::init(d);
    b.fc1 = Linear<T>::init(d, d * mlp_ratio, rng);
    b.fc2 = Linear<T>::init(d * mlp_ratio, d, rng);
    b.heads = heads;
    return b;
  }

  // x + Attn(LN(x)), then + MLP(LN(.)) with a tanh-GELU hidden layer.
  Tensor<T> operator()(const Tensor<T>& x) const {
    auto h = norm1(x);
    auto y = ops::add(x, multi_head_attention(h, h, h, attn, heads));
    return ops::add(y, fc2(ops::gelu(fc1(norm2(y)))));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    norm1.collect(prefix + ".norm1", out);
    attn.collect(prefix + ".attn", out);
    norm2.collect(prefix + ".norm2", out);
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }

  Block clone() const { return {norm1.clone(), attn.clone(), norm2.clone(), fc1.clone(), fc2.clone(), heads}; }

  static std::size_t parameter_count(std::size_t d, std::size_t mlp_ratio) {
    const std::size_t h = d * mlp_ratio;
    return 2 * (2 * d) + 4 * (d * d + d) + (d * h + h) + (h * d + d);
  }
};

}  // namespace siamav::nn
