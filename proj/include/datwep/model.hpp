#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "datwep/ops.hpp"
#include "datwep/rng.hpp"
#include "datwep/text.hpp"

namespace datwep::model {

/// Normalisation after each convolution.
///  Batch:  batch statistics while training, running statistics in evaluation.
///  Affine: learnable per-channel scale and shift only.
enum class NormMode { Batch, Affine };

inline std::string_view norm_mode_name(NormMode m) { return m == NormMode::Batch ? "batch" : "affine"; }

inline NormMode parse_norm_mode(std::string_view s) {
  if (s == "batch") return NormMode::Batch;
  if (s == "affine") return NormMode::Affine;
  throw ValidationError("unknown norm mode '" + std::string(s) + "'");
}

enum class Mode { Train, Eval };

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t base_channels = 8;
  std::size_t n_seg_classes = 6;
  std::size_t n_answer_classes = 9;
  std::size_t vocab_size = 42;
  std::size_t d_emb = 8;
  std::size_t l_max = text::kDefaultMaxLength;
  std::size_t text_hidden = 64;
  std::size_t fusion_hidden = 64;  // 0: text and image features feed the answer layer directly
  NormMode norm = NormMode::Batch;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  void validate() const {
    if (image_size == 0 || image_size % 8 != 0) throw ValidationError("image_size must be a positive multiple of 8");
    if (base_channels == 0 || n_seg_classes == 0 || n_answer_classes == 0 || vocab_size == 0 || d_emb == 0 ||
        l_max == 0 || text_hidden == 0) {
      throw ValidationError("model sizes must be positive");
    }
    if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) throw ValidationError("bn_momentum must be in (0, 1]");
    if (!(bn_eps > 0.0)) throw ValidationError("bn_eps must be > 0");
  }

  std::size_t image_feature_width() const { return base_channels * 7; }  // b + 2b + 4b pooled channels
};

/// Layer sizes of the 200x200, 64-channel network with nine masks.
inline ModelConfig full_size_config(std::size_t n_answer_classes) {
  ModelConfig c;
  c.image_size = 200;
  c.base_channels = 64;
  c.n_seg_classes = 9;
  c.n_answer_classes = n_answer_classes;
  c.fusion_hidden = 0;
  return c;
}

struct NamedTensor {
  std::string name;
  Tensor value;
  std::size_t fan_in = 1;
};

/// Trainable tensors in a fixed order, plus non-trainable normalisation buffers.
struct ModelParams {
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> buffers;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return i;
    throw ValidationError("no parameter named '" + std::string(name) + "'");
  }

  Tensor& buffer(std::string_view name) {
    for (auto& b : buffers)
      if (b.name == name) return b.value;
    throw ValidationError("no buffer named '" + std::string(name) + "'");
  }

  bool all_finite() const {
    for (const auto& p : params)
      for (double v : p.value.data())
        if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const ModelParams& o) const {
    auto same = [](const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
      if (a.size() != b.size()) return false;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].name != b[i].name || !(a[i].value == b[i].value)) return false;
      return true;
    };
    return same(params, o.params) && same(buffers, o.buffers);
  }
};

/// (in, out) channels of the two convolutions in each block.
struct BlockSpec {
  std::size_t in, out;
};

inline std::array<BlockSpec, 7> block_specs(const ModelConfig& c) {
  const std::size_t b = c.base_channels;
  return {{{3, b}, {b, 2 * b}, {2 * b, 4 * b}, {4 * b, 8 * b}, {12 * b, 4 * b}, {6 * b, 4 * b}, {5 * b, 2 * b}}};
}

namespace detail {

inline void add_uniform(ModelParams& mp, Rng& rng, std::string name, Shape shape, std::size_t fan_in, double bound) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  mp.params.push_back({std::move(name), std::move(t), fan_in});
}

inline void add_conv(ModelParams& mp, Rng& rng, const std::string& prefix, std::size_t in, std::size_t out,
                     std::size_t k) {
  const std::size_t fan_in = in * k * k;
  add_uniform(mp, rng, prefix + ".weight", {out, in, k, k}, fan_in, std::sqrt(6.0 / static_cast<double>(fan_in)));
  add_uniform(mp, rng, prefix + ".bias", {out}, fan_in, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

inline void add_linear(ModelParams& mp, Rng& rng, const std::string& prefix, std::size_t in, std::size_t out) {
  add_uniform(mp, rng, prefix + ".weight", {out, in}, in, std::sqrt(6.0 / static_cast<double>(in)));
  add_uniform(mp, rng, prefix + ".bias", {out}, in, 1.0 / std::sqrt(static_cast<double>(in)));
}

inline void add_norm(ModelParams& mp, const std::string& prefix, std::size_t ch, NormMode mode) {
  mp.params.push_back({prefix + ".gamma", Tensor(Shape{ch}, 1.0), 1});
  mp.params.push_back({prefix + ".beta", Tensor(Shape{ch}, 0.0), 1});
  if (mode == NormMode::Batch) {
    mp.buffers.push_back({prefix + ".running_mean", Tensor(Shape{ch}, 0.0), 1});
    mp.buffers.push_back({prefix + ".running_var", Tensor(Shape{ch}, 1.0), 1});
  }
}

}  // namespace detail

/// Fan-in scaled uniform initialisation: weights in +-sqrt(6/fan_in), biases in +-1/sqrt(fan_in),
/// norm scale 1 and shift 0.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams mp;
  const auto specs = block_specs(cfg);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const std::string blk = "block" + std::to_string(i + 1);
    detail::add_conv(mp, rng, blk + ".conv1", specs[i].in, specs[i].out, 3);
    detail::add_norm(mp, blk + ".norm1", specs[i].out, cfg.norm);
    detail::add_conv(mp, rng, blk + ".conv2", specs[i].out, specs[i].out, 3);
    detail::add_norm(mp, blk + ".norm2", specs[i].out, cfg.norm);
  }
  detail::add_conv(mp, rng, "seg_head", 2 * cfg.base_channels, cfg.n_seg_classes, 1);

  detail::add_uniform(mp, rng, "text.embedding", {cfg.vocab_size, cfg.d_emb}, cfg.d_emb,
                      std::sqrt(6.0 / static_cast<double>(cfg.d_emb)));
  detail::add_linear(mp, rng, "text.fc", cfg.l_max * cfg.d_emb, cfg.text_hidden);
  const std::size_t joint = cfg.text_hidden + cfg.image_feature_width();
  if (cfg.fusion_hidden > 0) {
    detail::add_linear(mp, rng, "fusion.fc", joint, cfg.fusion_hidden);
    detail::add_linear(mp, rng, "answer.fc", cfg.fusion_hidden, cfg.n_answer_classes);
  } else {
    detail::add_linear(mp, rng, "answer.fc", joint, cfg.n_answer_classes);
  }
  return mp;
}

/// Parameters placed on a tape as leaves, addressable by name.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ModelParams& mp) : mp_(&mp) {
    vars_.reserve(mp.params.size());
    for (const auto& p : mp.params) vars_.push_back(tape.leaf(p.value));
  }

  Var operator[](std::string_view name) const { return vars_[mp_->index_of(name)]; }
  const std::vector<Var>& vars() const noexcept { return vars_; }

 private:
  const ModelParams* mp_;
  std::vector<Var> vars_;
};

struct SegOutput {
  Var logits;                  // [N, K, H, W]
  std::array<Var, 3> features;  // post-pool outputs of blocks 1-3
};

namespace detail {

inline Var norm_layer(Var x, const BoundParams& bp, ModelParams& mp, const std::string& prefix,
                      const ModelConfig& cfg, Mode mode) {
  Var g = bp[prefix + ".gamma"], b = bp[prefix + ".beta"];
  if (cfg.norm == NormMode::Affine) {
    const std::size_t C = x.shape()[1];
    return ops::channel_affine(x, g, b, Tensor(Shape{C}, 0.0), Tensor(Shape{C}, 1.0), 0.0);
  }
  Tensor& rm = mp.buffer(prefix + ".running_mean");
  Tensor& rv = mp.buffer(prefix + ".running_var");
  if (mode == Mode::Eval) return ops::channel_affine(x, g, b, rm, rv, cfg.bn_eps);
  Tensor bm, bv;
  Var y = ops::batch_norm(x, g, b, cfg.bn_eps, &bm, &bv);
  const double m = cfg.bn_momentum;
  for (std::size_t c = 0; c < rm.size(); ++c) {
    rm[c] = (1.0 - m) * rm[c] + m * bm[c];
    rv[c] = (1.0 - m) * rv[c] + m * bv[c];
  }
  return y;
}

inline Var double_conv(Var x, const BoundParams& bp, ModelParams& mp, const std::string& blk,
                       const ModelConfig& cfg, Mode mode) {
  x = ops::conv2d(x, bp[blk + ".conv1.weight"], bp[blk + ".conv1.bias"]);
  x = ops::relu(norm_layer(x, bp, mp, blk + ".norm1", cfg, mode));
  x = ops::conv2d(x, bp[blk + ".conv2.weight"], bp[blk + ".conv2.bias"]);
  return ops::relu(norm_layer(x, bp, mp, blk + ".norm2", cfg, mode));
}

}  // namespace detail

/// Encoder-decoder segmenter. In Train mode with batch norm, the running statistics in `mp`
/// are updated; `mp` is otherwise only read.
inline SegOutput forward_seg(Var image, const BoundParams& bp, ModelParams& mp, const ModelConfig& cfg,
                             Mode mode = Mode::Train) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size) {
    throw ShapeError("forward_seg expects [N,3," + std::to_string(cfg.image_size) + "," +
                     std::to_string(cfg.image_size) + "], got " + shape_str(s));
  }
  std::array<Var, 3> enc;
  Var x = image;
  for (std::size_t i = 0; i < 3; ++i) {
    x = ops::maxpool2(detail::double_conv(x, bp, mp, "block" + std::to_string(i + 1), cfg, mode));
    enc[i] = x;
  }
  x = detail::double_conv(x, bp, mp, "block4", cfg, mode);
  for (std::size_t i = 0; i < 3; ++i) {
    x = ops::concat_channels({x, enc[2 - i]});
    x = ops::upsample2(x);
    x = detail::double_conv(x, bp, mp, "block" + std::to_string(i + 5), cfg, mode);
  }
  Var logits = ops::conv2d(x, bp["seg_head.weight"], bp["seg_head.bias"]);
  return {logits, enc};
}

/// Text features for a batch of questions: embeddings plus positions, pads zeroed, flattened.
inline Var encode_questions(Tape& tape, std::span<const text::TokenSequence> questions, const BoundParams& bp,
                            const ModelConfig& cfg) {
  const std::size_t Q = questions.size(), L = cfg.l_max, D = cfg.d_emb;
  if (Q == 0) throw ValidationError("encode_questions: no questions");
  std::vector<std::int64_t> ids;
  ids.reserve(Q * L);
  Tensor pe(Shape{Q, L, D}), mask(Shape{Q, L, D});
  const Tensor table = text::PositionalEncoder(D, L).table();
  for (std::size_t q = 0; q < Q; ++q) {
    const auto& seq = questions[q];
    if (seq.ids.size() != L) {
      throw ShapeError("token sequence length " + std::to_string(seq.ids.size()) + " differs from l_max " +
                       std::to_string(L));
    }
    ids.insert(ids.end(), seq.ids.begin(), seq.ids.end());
    const auto m = text::padding_mask(seq);
    std::copy(table.data().begin(), table.data().end(), pe.ptr() + q * L * D);
    for (std::size_t p = 0; p < L; ++p)
      for (std::size_t j = 0; j < D; ++j) mask[(q * L + p) * D + j] = m[p];
  }
  Var emb = ops::embedding_lookup(bp["text.embedding"], ids, Shape{Q, L});
  Var x = ops::elementwise_mul(ops::add(emb, tape.constant(std::move(pe))), tape.constant(std::move(mask)));
  return ops::relu(ops::linear(ops::flatten(x), bp["text.fc.weight"], bp["text.fc.bias"]));
}

/// Answer logits [Q, C]. `image_of[q]` is the row of the encoder features belonging to question q.
inline Var forward_vqa(Tape& tape, std::span<const text::TokenSequence> questions,
                       std::span<const std::size_t> image_of, const std::array<Var, 3>& features,
                       const BoundParams& bp, const ModelConfig& cfg) {
  if (image_of.size() != questions.size()) throw ShapeError("forward_vqa: one image index per question required");
  Var txt = encode_questions(tape, questions, bp, cfg);
  std::vector<Var> parts{txt};
  for (const Var& f : features) parts.push_back(ops::gather_rows(ops::global_avg_pool(f), image_of));
  Var h = ops::concat_channels(parts);
  if (cfg.fusion_hidden > 0) h = ops::relu(ops::linear(h, bp["fusion.fc.weight"], bp["fusion.fc.bias"]));
  return ops::linear(h, bp["answer.fc.weight"], bp["answer.fc.bias"]);
}

}  // namespace datwep::model
