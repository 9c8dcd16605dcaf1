#pragma once

#include <string>
#include <vector>

#include "hikfs/error.hpp"
#include "hikfs/hierarchy.hpp"
#include "hikfs/layers.hpp"
#include "hikfs/memory.hpp"
#include "hikfs/ndgrad.hpp"
#include "hikfs/random.hpp"

namespace hikfs {

enum class Setting { supervised, meta };
enum class EncoderKind { mlp, conv4 };

struct EncoderConfig {
  EncoderKind kind = EncoderKind::mlp;
  std::size_t input_dim = 16;
  std::vector<std::size_t> hidden{64};
  std::size_t feature_dim = 16;
  std::size_t image_side = 28;
  std::vector<std::size_t> channels{8, 8, 8, 8};

  /// Spatial side after the four conv blocks (3x3 same-padding conv keeps
  /// the size, each 2x2 pool floors it by half).
  std::size_t conv_output_side() const {
    std::size_t side = image_side;
    for (std::size_t i = 0; i < channels.size(); ++i) side /= 2;
    return side;
  }

  std::size_t output_dim() const {
    if (kind == EncoderKind::mlp) return feature_dim;
    const std::size_t side = conv_output_side();
    return channels.back() * side * side;
  }

  void validate() const {
    if (kind == EncoderKind::mlp) {
      if (input_dim == 0 || feature_dim == 0) throw ConfigError("encoder: dims must be positive");
      for (std::size_t w : hidden)
        if (w == 0) throw ConfigError("encoder: hidden widths must be positive");
    } else {
      if (channels.size() != 4) throw ConfigError("encoder: conv4 needs exactly four channel counts");
      for (std::size_t c : channels)
        if (c == 0) throw ConfigError("encoder: channel counts must be positive");
      if (conv_output_side() == 0) throw ConfigError("encoder: image too small for four 2x2 pools");
    }
  }
};

struct ConvBlock {
  nd::Tensor weight;  // [out, in, 3, 3]
  nd::Tensor bias;
  nd::Tensor gamma;
  nd::Tensor beta;
};

/// Ablation switches. `mlp` and `knn` toggle the optional heads of the
/// active setting; `attention` replaces g and h with identities.
struct HeadSwitches {
  bool attention = true;
  bool mlp = true;
  bool knn = true;
};

struct HeadActivation {
  bool coarse_mlp = false;
  bool coarse_knn = false;
  bool fine_mlp = false;
  bool fine_knn = false;
};

/// Supervised: coarse = MLP, fine = MLP + KNN. Meta: coarse = MLP + KNN,
/// fine = KNN.
inline HeadActivation active_heads(Setting setting, HeadSwitches sw) {
  if (setting == Setting::supervised) return {true, false, sw.mlp, sw.knn};
  return {sw.mlp, sw.knn, false, true};
}

struct ModelParams {
  Setting setting = Setting::supervised;
  EncoderConfig encoder;
  HeadSwitches switches;
  std::size_t num_fine = 0;
  std::size_t num_coarse = 0;

  std::vector<Linear> mlp_layers;
  std::vector<ConvBlock> conv_blocks;
  Linear coarse_mlp;
  Linear fine_mlp;
  // g and h are shared by the coarse and fine KNN heads.
  AttentionTransform attn_g;
  AttentionTransform attn_h;

  static ModelParams init(Setting setting, const EncoderConfig& encoder, std::size_t num_fine, std::size_t num_coarse,
                          std::uint64_t seed, HeadSwitches switches = {}) {
    encoder.validate();
    if (num_fine == 0 || num_coarse == 0) throw ConfigError("model: class counts must be positive");
    ModelParams p;
    p.setting = setting;
    p.encoder = encoder;
    p.switches = switches;
    p.num_fine = num_fine;
    p.num_coarse = num_coarse;
    Rng rng(seed);
    if (encoder.kind == EncoderKind::mlp) {
      std::size_t in = encoder.input_dim;
      for (std::size_t w : encoder.hidden) {
        p.mlp_layers.push_back(Linear::init(in, w, rng));
        in = w;
      }
      p.mlp_layers.push_back(Linear::init(in, encoder.feature_dim, rng));
    } else {
      std::size_t in = 1;
      for (std::size_t c : encoder.channels) {
        p.conv_blocks.push_back({uniform_init({c, in, 3, 3}, in * 9, rng), nd::Tensor::zeros({c}, true),
                                 nd::Tensor::full({c}, 1.0), nd::Tensor::zeros({c}, true)});
        p.conv_blocks.back().gamma.set_requires_grad(true);
        in = c;
      }
    }
    const std::size_t d = encoder.output_dim();
    p.coarse_mlp = Linear::init(d, num_coarse, rng);
    p.fine_mlp = Linear::init(d, num_fine, rng);
    p.attn_g = AttentionTransform::init(d, rng);
    p.attn_h = AttentionTransform::init(d, rng);
    return p;
  }

  std::size_t feature_dim() const { return encoder.output_dim(); }

  std::vector<nd::NamedTensor> encoder_parameters() const {
    std::vector<nd::NamedTensor> out;
    for (std::size_t i = 0; i < mlp_layers.size(); ++i) mlp_layers[i].append_to(out, "encoder.layer" + std::to_string(i));
    for (std::size_t i = 0; i < conv_blocks.size(); ++i) {
      const auto& b = conv_blocks[i];
      const std::string prefix = "encoder.conv" + std::to_string(i);
      out.push_back({prefix + ".weight", b.weight});
      out.push_back({prefix + ".bias", b.bias});
      out.push_back({prefix + ".gamma", b.gamma});
      out.push_back({prefix + ".beta", b.beta});
    }
    return out;
  }

  std::vector<nd::NamedTensor> coarse_mlp_parameters() const {
    std::vector<nd::NamedTensor> out;
    coarse_mlp.append_to(out, "coarse_mlp");
    return out;
  }

  std::vector<nd::NamedTensor> fine_mlp_parameters() const {
    std::vector<nd::NamedTensor> out;
    fine_mlp.append_to(out, "fine_mlp");
    return out;
  }

  std::vector<nd::NamedTensor> attention_parameters() const {
    std::vector<nd::NamedTensor> out;
    attn_g.append_to(out, "attn_g");
    attn_h.append_to(out, "attn_h");
    return out;
  }

  std::vector<nd::NamedTensor> named_parameters() const {
    auto out = encoder_parameters();
    for (auto group : {coarse_mlp_parameters(), fine_mlp_parameters(), attention_parameters()})
      out.insert(out.end(), group.begin(), group.end());
    return out;
  }

  /// Deep copy: the clone shares no storage with this model.
  ModelParams clone() const {
    ModelParams c = *this;
    auto copy = [](nd::Tensor& t) {
      const bool rg = t.requires_grad();
      t = nd::Tensor(t.shape(), t.values(), rg);
    };
    for (auto& l : c.mlp_layers) {
      copy(l.weight);
      copy(l.bias);
    }
    for (auto& b : c.conv_blocks) {
      copy(b.weight);
      copy(b.bias);
      copy(b.gamma);
      copy(b.beta);
    }
    for (Linear* l : {&c.coarse_mlp, &c.fine_mlp, &c.attn_g.fc1, &c.attn_g.fc2, &c.attn_h.fc1, &c.attn_h.fc2}) {
      copy(l->weight);
      copy(l->bias);
    }
    for (nd::Tensor* t : {&c.attn_g.gamma, &c.attn_g.beta, &c.attn_h.gamma, &c.attn_h.beta}) copy(*t);
    return c;
  }

  /// Copies values from a checkpoint; every parameter must be present with
  /// a matching shape.
  void load_values(std::span<const nd::NamedTensor> tensors) {
    for (auto& [name, t] : named_parameters()) {
      const auto& src = nd::find_tensor(tensors, name);
      if (src.shape() != t.shape()) {
        throw DataError("checkpoint: '" + name + "' has shape " + nd::shape_str(src.shape()) + ", model expects " +
                        nd::shape_str(t.shape()));
      }
      nd::Tensor dst = t;
      std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
    }
  }
};

/// Maps raw inputs to feature vectors: [n, input_dim] for the MLP encoder,
/// [n, side * side] or [n, 1, side, side] for conv4. Output is [n, d].
inline nd::Tensor encode(const ModelParams& params, const nd::Tensor& x) {
  const auto& cfg = params.encoder;
  if (cfg.kind == EncoderKind::mlp) {
    if (x.rank() != 2 || x.dim(1) != cfg.input_dim) {
      throw ShapeError("encode: expected [n, " + std::to_string(cfg.input_dim) + "], got " + nd::shape_str(x.shape()));
    }
    nd::Tensor h = x;
    for (const auto& layer : params.mlp_layers) h = nd::relu(layer.forward(h));
    return h;
  }
  const std::size_t side = cfg.image_side;
  nd::Tensor h;
  if (x.rank() == 2 && x.dim(1) == side * side) {
    h = nd::reshape(x, {x.dim(0), 1, side, side});
  } else if (x.rank() == 4 && x.dim(1) == 1 && x.dim(2) == side && x.dim(3) == side) {
    h = x;
  } else {
    throw ShapeError("encode: expected images of " + std::to_string(side) + "x" + std::to_string(side) + ", got " +
                     nd::shape_str(x.shape()));
  }
  for (const auto& block : params.conv_blocks) {
    h = nd::conv2d(h, block.weight, block.bias, {1, 1});
    h = nd::group_norm(h, default_groups(block.weight.dim(0)), block.gamma, block.beta);
    h = nd::max_pool2d(nd::relu(h), 2, 2);
  }
  return nd::reshape(h, {h.dim(0), h.numel() / h.dim(0)});
}

inline nd::Tensor mlp_logits(const Linear& head, const nd::Tensor& f) {
  if (f.rank() != 2 || f.dim(1) != head.in_features()) {
    throw ShapeError("mlp_logits: features " + nd::shape_str(f.shape()) + " do not match head input " +
                     std::to_string(head.in_features()));
  }
  return head.forward(f);
}

/// Elementwise sum of per-class logits from several classifiers.
inline nd::Tensor combine_logits(const std::vector<nd::Tensor>& parts) {
  if (parts.empty()) throw ShapeError("combine_logits: no logits to combine");
  nd::Tensor total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (parts[i].shape() != total.shape()) {
      throw ShapeError("combine_logits: shape mismatch " + nd::shape_str(total.shape()) + " vs " +
                       nd::shape_str(parts[i].shape()));
    }
    total = nd::add(total, parts[i]);
  }
  return total;
}

struct Logits {
  nd::Tensor fine;    // a
  nd::Tensor coarse;  // b
};

struct KnnMemories {
  const MemoryBank* fine = nullptr;
  const MemoryBank* coarse = nullptr;
};

/// MLP output columns that take part (a task's classes); empty means all.
struct HeadScope {
  std::vector<std::size_t> fine_cols;
  std::vector<std::size_t> coarse_cols;
};

inline Transforms model_transforms(const ModelParams& p) {
  if (!p.switches.attention) return {};
  return {&p.attn_g, &p.attn_h};
}

inline Logits forward_heads(const ModelParams& params, const nd::Tensor& features, const KnnMemories& memory,
                            const HeadScope& scope = {}) {
  const auto heads = active_heads(params.setting, params.switches);
  const auto t = model_transforms(params);
  auto mlp = [&](const Linear& head, const std::vector<std::size_t>& cols) {
    auto logits = mlp_logits(head, features);
    return cols.empty() ? logits : nd::select_cols(logits, cols);
  };
  auto knn = [&](const MemoryBank* bank, const char* which) {
    if (!bank) throw ConfigError(std::string("forward: the ") + which + " KNN head is active but has no memory");
    return knn_logits(features, *bank, t);
  };

  std::vector<nd::Tensor> fine_parts, coarse_parts;
  if (heads.fine_mlp) fine_parts.push_back(mlp(params.fine_mlp, scope.fine_cols));
  if (heads.fine_knn) fine_parts.push_back(knn(memory.fine, "fine"));
  if (heads.coarse_mlp) coarse_parts.push_back(mlp(params.coarse_mlp, scope.coarse_cols));
  if (heads.coarse_knn) coarse_parts.push_back(knn(memory.coarse, "coarse"));
  if (fine_parts.empty()) throw ConfigError("forward: no fine-class head is active");
  if (coarse_parts.empty()) throw ConfigError("forward: no coarse-class head is active");
  return {combine_logits(fine_parts), combine_logits(coarse_parts)};
}

inline Logits forward_full(const ModelParams& params, const nd::Tensor& x, const KnnMemories& memory,
                           const HeadScope& scope = {}) {
  return forward_heads(params, encode(params, x), memory, scope);
}

}  // namespace hikfs
