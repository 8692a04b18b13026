#pragma once

// Fully convolutional 3-d encoder-decoder with attention-enhanced skip
// connections, a main segmentation head, and an auxiliary head used only for
// the training-time uncertainty term. Parameter shapes depend on ModelConfig
// alone, never on input size, which is what makes coarse->fine weight
// transfer total.

#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "zxyseg/nn_attention.hpp"
#include "zxyseg/nn_conv.hpp"
#include "zxyseg/rng.hpp"

namespace zxyseg {

struct ModelConfig {
  int in_channels = 1;
  int n_classes = 3;
  int base_channels = 16;
  int n_levels = 4;
  int heads = 4;
  // skip levels where the attention block replaces plain concatenation;
  // empty vector at construction means "two deepest skips"
  std::vector<int> zxy_levels = {-1};
  int channel_expand = 2;
  int max_tokens = 4096;
  std::string activation = "leaky_relu";  // or "relu"
  std::string norm = "instance";

  int channels_at(int level) const { return base_channels << level; }
  int expanded_at(int level) const { return channel_expand * channels_at(level); }

  std::vector<int> resolved_zxy_levels() const {
    if (zxy_levels.size() == 1 && zxy_levels[0] == -1) {
      std::vector<int> lv;
      for (int l = n_levels - 3; l <= n_levels - 2; ++l)
        if (l >= 0) lv.push_back(l);
      return lv;
    }
    return zxy_levels;
  }

  void validate() const {
    require(n_levels >= 2, "model.config", "n_levels must be >= 2");
    require(in_channels >= 1 && n_classes >= 2 && base_channels >= 1, "model.config",
            "channel counts must be positive");
    require(heads >= 1, "model.config", "heads must be >= 1");
    require(channel_expand >= 1, "model.config", "channel_expand must be >= 1");
    require(max_tokens >= 1, "model.config", "max_tokens must be >= 1");
    require(activation == "leaky_relu" || activation == "relu", "model.config",
            "activation must be leaky_relu or relu");
    require(norm == "instance", "model.config", "norm must be instance");
    for (int l : resolved_zxy_levels()) {
      require(l >= 0 && l <= n_levels - 2, "model.config",
              "zxy level " + std::to_string(l) + " outside the skip range");
      require(expanded_at(l) % heads == 0, "model.config",
              "heads must divide the expanded width at zxy level " + std::to_string(l));
    }
  }
};

// Ordered, named parameter tensors; the shared schema of coarse and fine nets.
template <typename S>
struct NetworkParameters {
  std::vector<std::string> order;
  std::unordered_map<std::string, Tensor<S>> tensors;

  void add(const std::string& name, Tensor<S> t) {
    require(!tensors.count(name), "model.params", "duplicate parameter " + name);
    order.push_back(name);
    tensors.emplace(name, std::move(t));
  }
  bool has(const std::string& name) const { return tensors.count(name) > 0; }
  Tensor<S>& at(const std::string& name) {
    auto it = tensors.find(name);
    require(it != tensors.end(), "model.params", "unknown parameter " + name);
    return it->second;
  }
  const Tensor<S>& at(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), "model.params", "unknown parameter " + name);
    return it->second;
  }
  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& name : order) n += tensors.at(name).size();
    return n;
  }
  template <typename T>
  NetworkParameters<T> cast() const {
    NetworkParameters<T> out;
    for (const auto& name : order) out.add(name, tensors.at(name).template cast<T>());
    return out;
  }
};

struct ParamSpec {
  std::string name;
  Shape shape;
};

inline std::vector<ParamSpec> parameter_schema(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> specs;
  auto conv = [&](const std::string& stem, int co, int ci) {
    specs.push_back({stem + ".w", {co, ci, 3, 3, 3}});
    specs.push_back({stem + ".b", {co}});
  };
  auto norm = [&](const std::string& stem, int c) {
    specs.push_back({stem + ".gamma", {c}});
    specs.push_back({stem + ".beta", {c}});
  };
  auto lin = [&](const std::string& stem, int co, int ci) {
    specs.push_back({stem + ".w", {co, ci}});
    specs.push_back({stem + ".b", {co}});
  };
  auto deconv = [&](const std::string& stem, int co, int ci) {
    specs.push_back({stem + ".w", {co, ci, 2, 2, 2}});
    specs.push_back({stem + ".b", {co}});
  };

  const int L = cfg.n_levels;
  for (int l = 0; l < L; ++l) {
    const int c = cfg.channels_at(l);
    if (l > 0) {
      conv("down" + std::to_string(l - 1), c, cfg.channels_at(l - 1));
      norm("down" + std::to_string(l - 1) + ".norm", c);
    }
    const std::string enc = "enc" + std::to_string(l);
    conv(enc + ".conv1", c, l == 0 ? cfg.in_channels : c);
    norm(enc + ".norm1", c);
    conv(enc + ".conv2", c, c);
    norm(enc + ".norm2", c);
  }

  const auto zxy = cfg.resolved_zxy_levels();
  const std::set<int> zxy_set(zxy.begin(), zxy.end());
  for (int l = L - 2; l >= 0; --l) {
    const int c = cfg.channels_at(l);
    const std::string dec = "dec" + std::to_string(l);
    if (zxy_set.count(l)) {
      const int e = cfg.expanded_at(l);
      const std::string z = "zxy" + std::to_string(l);
      deconv(z + ".z.deconv", c, cfg.channels_at(l + 1));
      lin(z + ".z.expand_shallow", e, c);
      lin(z + ".z.expand_deep", e, c);
      norm(z + ".z.ln_shallow", e);
      norm(z + ".z.ln_deep", e);
      for (const char* stream : {"q", "kv"}) {
        const std::string d = z + ".x.deform_" + stream;
        conv(d + ".offset", 81, e);
        conv(d + ".main", e, e);
      }
      lin(z + ".x.proj_q", e, e);
      lin(z + ".x.proj_k", e, e);
      lin(z + ".x.proj_v", e, e);
      lin(z + ".x.proj_out", e, e);
      norm(z + ".y.ln", e);
      lin(z + ".y.mlp1", 2 * e, e);
      lin(z + ".y.mlp2", e, 2 * e);
      lin(z + ".y.restore", c, e);
      conv(dec + ".conv1", c, c);
    } else {
      deconv(dec + ".up", c, cfg.channels_at(l + 1));
      conv(dec + ".conv1", c, 2 * c);
    }
    norm(dec + ".norm1", c);
    conv(dec + ".conv2", c, c);
    norm(dec + ".norm2", c);
  }

  lin("head_main", cfg.n_classes, cfg.channels_at(0));
  lin("head_aux", cfg.n_classes, cfg.channels_at(0));
  return specs;
}

// every weight and bias from a truncated normal (mean 0, sigma 0.1,
// cut at +/-2 sigma); one stream in schema order keeps it reproducible
template <typename S>
NetworkParameters<S> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  NetworkParameters<S> params;
  Xoshiro256 rng(seed);
  for (const auto& spec : parameter_schema(cfg)) {
    Tensor<S> t = Tensor<S>::zeros(spec.shape);
    for (std::int64_t i = 0; i < t.size(); ++i)
      t.data[i] = static_cast<S>(rng.truncated_gaussian(0.1, 2.0));
    params.add(spec.name, std::move(t));
  }
  return params;
}

namespace ad {

struct BoundParams {
  std::unordered_map<std::string, Var> vars;
  Var at(const std::string& name) const {
    auto it = vars.find(name);
    require(it != vars.end(), "model.params", "unbound parameter " + name);
    return it->second;
  }
};

template <typename S>
BoundParams bind_parameters(Tape<S>& tape, const NetworkParameters<S>& params, bool needs_grad) {
  BoundParams bound;
  for (const auto& name : params.order)
    bound.vars.emplace(name, tape.input(params.tensors.at(name), needs_grad));
  return bound;
}

template <typename S>
Var activation(Tape<S>& tape, Var x, const ModelConfig& cfg) {
  return leaky_relu(tape, x, cfg.activation == "relu" ? S(0) : S(0.01));
}

// learned-offset convolution: an ordinary conv predicts 3 displacement
// channels per kernel tap, then the main weights contract the deformed
// samples
template <typename S>
Var deformable_conv3d(Tape<S>& tape, Var x, Var offset_w, Var offset_b, Var main_w, Var main_b) {
  Var offsets = conv3d(tape, x, offset_w, offset_b, 1);
  Var cols = deform_sample(tape, x, offsets);
  return linear_ch(tape, cols, main_w, main_b);
}

template <typename S>
Var deformable_conv3d(Tape<S>& tape, Var x, const BoundParams& p, const std::string& stem) {
  return deformable_conv3d<S>(tape, x, p.at(stem + ".offset.w"), p.at(stem + ".offset.b"),
                              p.at(stem + ".main.w"), p.at(stem + ".main.b"));
}

template <typename S>
struct ForwardDiagnostics {
  AttentionStats<S> attention;
};

// Deformable reverse cross-attention: queries come from the shallow stream,
// keys/values from the (already upsampled) deep stream, so deeper
// morphological context steers shallow detail. Both streams pass a
// deformable conv before projection.
template <typename S>
Var drct_attention(Tape<S>& tape, Var shallow, Var deep_upsampled, const BoundParams& p,
                   const std::string& stem, int heads, int max_tokens,
                   ForwardDiagnostics<S>* diag = nullptr, Tensor<S>* attn_head0 = nullptr) {
  const Tensor<S>& Sh = tape.val(shallow);
  const Tensor<S>& Dp = tape.val(deep_upsampled);
  require(Sh.shape == Dp.shape, "ops.shape", "drct_attention: stream shapes must agree");
  const std::int64_t tokens = spatial_size(Sh);
  require(tokens <= max_tokens, "model.token_guard",
          "attention over " + std::to_string(tokens) + " voxels exceeds max_tokens=" +
              std::to_string(max_tokens) + "; reconfigure zxy_levels or raise the guard");
  Var sq = deformable_conv3d<S>(tape, shallow, p, stem + ".deform_q");
  Var dk = deformable_conv3d<S>(tape, deep_upsampled, p, stem + ".deform_kv");
  Var q = linear_ch(tape, sq, p.at(stem + ".proj_q.w"), p.at(stem + ".proj_q.b"));
  Var k = linear_ch(tape, dk, p.at(stem + ".proj_k.w"), p.at(stem + ".proj_k.b"));
  Var v = linear_ch(tape, dk, p.at(stem + ".proj_v.w"), p.at(stem + ".proj_v.b"));
  Var att = multihead_attention(tape, q, k, v, heads, diag ? &diag->attention : nullptr,
                                attn_head0);
  return linear_ch(tape, att, p.at(stem + ".proj_out.w"), p.at(stem + ".proj_out.b"));
}

// Z: upsample the deep feature and expand both streams' channels;
// X: deformable reverse cross-attention with a residual onto the shallow
// stream; Y: feed-forward residual, then restore the shallow channel count.
template <typename S>
Var zxyformer_block(Tape<S>& tape, Var shallow, Var deep, const BoundParams& p,
                    const std::string& stem, const ModelConfig& cfg,
                    ForwardDiagnostics<S>* diag = nullptr) {
  const Tensor<S>& Sh = tape.val(shallow);
  const Tensor<S>& Dp = tape.val(deep);
  require(Sh.shape.size() == 4 && Dp.shape.size() == 4, "ops.shape",
          "zxyformer_block expects [C,Z,Y,X] features");
  for (int i = 1; i < 4; ++i)
    require(Dp.shape[i] * 2 == Sh.shape[i], "ops.shape",
            "zxyformer_block: deep grid must be exactly half the shallow grid");

  // Z
  Var d_up = conv_transpose3d(tape, deep, p.at(stem + ".z.deconv.w"), p.at(stem + ".z.deconv.b"));
  Var s1 = linear_ch(tape, shallow, p.at(stem + ".z.expand_shallow.w"),
                     p.at(stem + ".z.expand_shallow.b"));
  s1 = layer_norm_ch(tape, s1, p.at(stem + ".z.ln_shallow.gamma"),
                     p.at(stem + ".z.ln_shallow.beta"));
  Var d1 =
      linear_ch(tape, d_up, p.at(stem + ".z.expand_deep.w"), p.at(stem + ".z.expand_deep.b"));
  d1 = layer_norm_ch(tape, d1, p.at(stem + ".z.ln_deep.gamma"), p.at(stem + ".z.ln_deep.beta"));

  // X
  Var att = drct_attention<S>(tape, s1, d1, p, stem + ".x", cfg.heads, cfg.max_tokens, diag);
  Var x1 = add(tape, s1, att);

  // Y
  Var h = layer_norm_ch(tape, x1, p.at(stem + ".y.ln.gamma"), p.at(stem + ".y.ln.beta"));
  h = linear_ch(tape, h, p.at(stem + ".y.mlp1.w"), p.at(stem + ".y.mlp1.b"));
  h = activation(tape, h, cfg);
  h = linear_ch(tape, h, p.at(stem + ".y.mlp2.w"), p.at(stem + ".y.mlp2.b"));
  Var x2 = add(tape, x1, h);
  return linear_ch(tape, x2, p.at(stem + ".y.restore.w"), p.at(stem + ".y.restore.b"));
}

template <typename S>
struct PredictionPair {
  Var main_logits;
  Var aux_logits;
};

template <typename S>
Var conv_block(Tape<S>& tape, Var x, const BoundParams& p, const std::string& stem,
               const ModelConfig& cfg) {
  Var f = conv3d(tape, x, p.at(stem + ".conv1.w"), p.at(stem + ".conv1.b"), 1);
  f = instance_norm(tape, f, p.at(stem + ".norm1.gamma"), p.at(stem + ".norm1.beta"));
  f = activation(tape, f, cfg);
  f = conv3d(tape, f, p.at(stem + ".conv2.w"), p.at(stem + ".conv2.b"), 1);
  f = instance_norm(tape, f, p.at(stem + ".norm2.gamma"), p.at(stem + ".norm2.beta"));
  return activation(tape, f, cfg);
}

template <typename S>
PredictionPair<S> network_forward(Tape<S>& tape, Var x, const BoundParams& p,
                                  const ModelConfig& cfg,
                                  ForwardDiagnostics<S>* diag = nullptr) {
  const Tensor<S>& X = tape.val(x);
  require(X.shape.size() == 4, "model.input", "network input must be [C,D,H,W]");
  require(X.shape[0] == cfg.in_channels, "model.input", "input channel mismatch");
  const int div = 1 << (cfg.n_levels - 1);
  for (int i = 1; i < 4; ++i)
    require(X.shape[i] % div == 0, "model.input",
            "spatial extent " + std::to_string(X.shape[i]) + " not divisible by " +
                std::to_string(div));

  const auto zxy = cfg.resolved_zxy_levels();
  const std::set<int> zxy_set(zxy.begin(), zxy.end());

  std::vector<Var> skips(static_cast<size_t>(cfg.n_levels));
  Var f = x;
  for (int l = 0; l < cfg.n_levels; ++l) {
    if (l > 0) {
      const std::string down = "down" + std::to_string(l - 1);
      f = conv3d(tape, f, p.at(down + ".w"), p.at(down + ".b"), 2);
      f = instance_norm(tape, f, p.at(down + ".norm.gamma"), p.at(down + ".norm.beta"));
      f = activation(tape, f, cfg);
    }
    f = conv_block(tape, f, p, "enc" + std::to_string(l), cfg);
    skips[static_cast<size_t>(l)] = f;
  }

  Var d = f;  // deepest encoder block doubles as the bottleneck
  for (int l = cfg.n_levels - 2; l >= 0; --l) {
    const std::string dec = "dec" + std::to_string(l);
    Var fused;
    if (zxy_set.count(l)) {
      fused = zxyformer_block(tape, skips[static_cast<size_t>(l)], d,
                              p, "zxy" + std::to_string(l), cfg, diag);
    } else {
      Var up = conv_transpose3d(tape, d, p.at(dec + ".up.w"), p.at(dec + ".up.b"));
      fused = concat_ch(tape, up, skips[static_cast<size_t>(l)]);
    }
    d = conv_block(tape, fused, p, dec, cfg);
  }

  PredictionPair<S> out;
  out.main_logits = linear_ch(tape, d, p.at("head_main.w"), p.at("head_main.b"));
  out.aux_logits = linear_ch(tape, d, p.at("head_aux.w"), p.at("head_aux.b"));
  return out;
}

}  // namespace ad

// per-voxel argmax over the class axis; ties resolve to the lowest class
template <typename S>
std::vector<std::uint8_t> argmax_classes(const Tensor<S>& probs) {
  const std::int64_t c = probs.shape[0];
  const std::int64_t p = probs.size() / c;
  std::vector<std::uint8_t> out(static_cast<size_t>(p));
  for (std::int64_t i = 0; i < p; ++i) {
    int best = 0;
    S best_v = probs.data[i];
    for (std::int64_t cl = 1; cl < c; ++cl) {
      const S v = probs.data[cl * p + i];
      if (v > best_v) {
        best_v = v;
        best = static_cast<int>(cl);
      }
    }
    out[static_cast<size_t>(i)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace zxyseg
