#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "evifed/errors.hpp"
#include "evifed/graph.hpp"
#include "evifed/rng.hpp"
#include "evifed/tensor.hpp"

namespace evifed {

struct BackboneConfig {
  std::size_t hidden_dim = 32;       // m
  std::size_t blocks = 4;
  std::size_t heads = 4;
  std::size_t image_grid = 8;        // image side length; rows act as tokens
  std::size_t question_vocab = 32;
  std::size_t max_question_len = 8;
  std::size_t answer_count = 8;      // J
  std::uint64_t seed = 0;

  void validate() const {
    if (hidden_dim == 0 || blocks == 0 || heads == 0 || image_grid == 0 ||
        question_vocab == 0 || max_question_len == 0) {
      throw config_error("backbone: all dimensions must be positive");
    }
    if (hidden_dim % heads != 0) {
      throw config_error("backbone: hidden_dim " + std::to_string(hidden_dim) +
                         " not divisible by heads " + std::to_string(heads));
    }
    if (answer_count < 2) {
      throw config_error("backbone: answer_count must be >= 2, got " +
                         std::to_string(answer_count));
    }
  }
};

enum class EncoderKind : std::size_t { image = 0, question = 1 };

// Prompt initialization: keys start at key-scale noise so content queries
// attend to them immediately; values start at zero so an untrained prompt
// leaves the forward pass nearly neutral.
inline constexpr double kPromptKeyInitStd = 0.5;
inline constexpr double kPromptValueInitStd = 0.0;

/// Per-encoder, per-block prefix prompts, split into key and value halves of
/// d/2 rows each. prompt_len == 0 is the legal empty prefix.
struct PromptSet {
  struct BlockPrompts {
    Tensor key_prefix;    // (d/2) x m
    Tensor value_prefix;  // (d/2) x m
  };

  std::size_t prompt_len = 0;  // d, even
  std::size_t width = 0;       // m
  std::vector<std::size_t> prompted_blocks;
  std::array<std::vector<BlockPrompts>, 2> encoders;  // [image, question]

  static PromptSet make(std::size_t prompt_len, std::size_t width,
                        std::vector<std::size_t> prompted_blocks,
                        std::size_t total_blocks, Rng& init_rng,
                        bool trainable = true) {
    if (prompt_len % 2 != 0) {
      throw config_error("prompts: prompt_len must be even, got " +
                         std::to_string(prompt_len));
    }
    for (std::size_t b : prompted_blocks) {
      if (b >= total_blocks) {
        throw config_error("prompts: prompted block " + std::to_string(b) +
                           " outside [0," + std::to_string(total_blocks) + ")");
      }
    }
    PromptSet ps;
    ps.prompt_len = prompt_len;
    ps.width = width;
    ps.prompted_blocks = std::move(prompted_blocks);
    const std::size_t half = prompt_len / 2;
    for (auto& enc : ps.encoders) {
      enc.reserve(ps.prompted_blocks.size());
      for (std::size_t b = 0; b < ps.prompted_blocks.size(); ++b) {
        BlockPrompts bp;
        bp.key_prefix = Tensor::randn(half, width, init_rng, kPromptKeyInitStd, trainable);
        bp.value_prefix = Tensor::randn(half, width, init_rng, kPromptValueInitStd, trainable);
        enc.push_back(std::move(bp));
      }
    }
    return ps;
  }

  /// Prompts for `block` of `enc`, or nullptr when the block is unprompted.
  const BlockPrompts* block(EncoderKind enc, std::size_t block) const {
    for (std::size_t i = 0; i < prompted_blocks.size(); ++i) {
      if (prompted_blocks[i] == block) {
        return &encoders[static_cast<std::size_t>(enc)][i];
      }
    }
    return nullptr;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& enc : encoders) {
      for (auto& bp : enc) {
        out.push_back(&bp.key_prefix);
        out.push_back(&bp.value_prefix);
      }
    }
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (const auto& enc : encoders) {
      for (const auto& bp : enc) {
        out.push_back(&bp.key_prefix);
        out.push_back(&bp.value_prefix);
      }
    }
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto* t : parameters()) n += t->size();
    return n;
  }

  PromptSet clone() const { return copy_impl(/*keep_grad_flag=*/true); }

  /// Deep copy with requires_grad stripped; what crosses the wire.
  PromptSet constant_copy() const { return copy_impl(/*keep_grad_flag=*/false); }

  void validate_for(const BackboneConfig& cfg) const {
    if (prompt_len == 0) return;
    if (width != cfg.hidden_dim) {
      throw shape_error("prompts: width " + std::to_string(width) +
                        " vs backbone hidden_dim " + std::to_string(cfg.hidden_dim));
    }
    for (std::size_t b : prompted_blocks) {
      if (b >= cfg.blocks) {
        throw shape_error("prompts: prompted block " + std::to_string(b) +
                          " outside backbone depth " + std::to_string(cfg.blocks));
      }
    }
  }

 private:
  PromptSet copy_impl(bool keep_grad_flag) const {
    PromptSet ps;
    ps.prompt_len = prompt_len;
    ps.width = width;
    ps.prompted_blocks = prompted_blocks;
    for (std::size_t e = 0; e < 2; ++e) {
      for (const auto& bp : encoders[e]) {
        BlockPrompts copy;
        copy.key_prefix = keep_grad_flag ? bp.key_prefix.clone() : bp.key_prefix.constant_copy();
        copy.value_prefix = keep_grad_flag ? bp.value_prefix.clone() : bp.value_prefix.constant_copy();
        ps.encoders[e].push_back(std::move(copy));
      }
    }
    return ps;
  }
};

/// Two affine layers with a tanh hidden and dropout; emits J pre-evidence
/// logits. The evidential stage exponentiates them, so the evidence the head
/// induces is strictly positive.
struct AnswerHead {
  Tensor w1, b1, w2, b2;
  double dropout_rate = 0.2;

  static AnswerHead make(std::size_t in_dim, std::size_t hidden, std::size_t answers,
                         Rng& init_rng, double dropout_rate = 0.2) {
    if (in_dim == 0 || hidden == 0 || answers < 2) {
      throw config_error("answer head: bad dimensions");
    }
    AnswerHead h;
    h.w1 = Tensor::randn(in_dim, hidden, init_rng, 1.0 / std::sqrt(double(in_dim)), true);
    h.b1 = Tensor(1, hidden, 0.0, true);
    h.w2 = Tensor::randn(hidden, answers, init_rng, 1.0 / std::sqrt(double(hidden)), true);
    h.b2 = Tensor(1, answers, 0.0, true);
    h.dropout_rate = dropout_rate;
    return h;
  }

  std::vector<Tensor*> parameters() { return {&w1, &b1, &w2, &b2}; }
  std::vector<const Tensor*> parameters() const { return {&w1, &b1, &w2, &b2}; }

  std::size_t scalar_count() const {
    return w1.size() + b1.size() + w2.size() + b2.size();
  }

  AnswerHead clone() const {
    AnswerHead h;
    h.w1 = w1.clone();
    h.b1 = b1.clone();
    h.w2 = w2.clone();
    h.b2 = b2.clone();
    h.dropout_rate = dropout_rate;
    return h;
  }
};

/// softmax(Q [pK;K]^T / sqrt(width)) [pV;V]. Empty prefixes reduce to vanilla
/// attention on the identical float path, bit for bit.
inline Tensor prefix_attention(Graph& g, const Tensor& q, const Tensor& k,
                               const Tensor& v, const Tensor& key_prefix,
                               const Tensor& value_prefix) {
  if (k.rows() != v.rows()) {
    throw shape_error("prefix_attention: K rows " + k.shape_str() + " vs V rows " +
                      v.shape_str());
  }
  if (key_prefix.rows() != value_prefix.rows()) {
    throw shape_error("prefix_attention: key prefix " + key_prefix.shape_str() +
                      " vs value prefix " + value_prefix.shape_str());
  }
  const std::size_t width = q.cols();
  auto check_width = [&](const Tensor& t, const char* name) {
    if (t.rows() > 0 && t.cols() != width) {
      throw shape_error(std::string("prefix_attention: ") + name + " width " +
                        t.shape_str() + " vs query " + q.shape_str());
    }
  };
  check_width(k, "K");
  check_width(v, "V");
  check_width(key_prefix, "key prefix");
  check_width(value_prefix, "value prefix");

  Tensor keys = g.concat_rows(key_prefix, k);
  Tensor vals = g.concat_rows(value_prefix, v);
  Tensor scores = g.scale(g.matmul(q, g.transpose(keys)), 1.0 / std::sqrt(double(width)));
  return g.matmul(g.softmax_rows(scores), vals);
}

inline Tensor attention(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v) {
  const Tensor empty_k(0, q.cols());
  const Tensor empty_v(0, q.cols());
  return prefix_attention(g, q, k, v, empty_k, empty_v);
}

/// Frozen two-encoder transformer with mean pooling and concat fusion.
/// Parameters are built once from the seed and never receive gradients; the
/// checksum pins that contract.
class Backbone {
 public:
  explicit Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(Rng::mix(cfg_.seed, 0x6261636b626f6eull));  // "backbone"
    const std::size_t m = cfg_.hidden_dim;
    const double wstd = 1.0 / std::sqrt(double(m));
    image_proj_ = Tensor::randn(cfg_.image_grid, m, rng, 1.0 / std::sqrt(double(cfg_.image_grid)));
    image_pos_ = Tensor::randn(cfg_.image_grid, m, rng, 0.3);
    token_embed_ = Tensor::randn(cfg_.question_vocab, m, rng, 1.0);
    question_pos_ = Tensor::randn(cfg_.max_question_len, m, rng, 0.3);
    for (auto& enc : blocks_) {
      enc.resize(cfg_.blocks);
      for (auto& blk : enc) {
        blk.wq = Tensor::randn(m, m, rng, wstd);
        blk.wk = Tensor::randn(m, m, rng, wstd);
        blk.wv = Tensor::randn(m, m, rng, wstd);
        blk.wo = Tensor::randn(m, m, rng, wstd);
        blk.w_mlp1 = Tensor::randn(m, 2 * m, rng, wstd);
        blk.w_mlp2 = Tensor::randn(2 * m, m, rng, 1.0 / std::sqrt(double(2 * m)));
      }
    }
  }

  const BackboneConfig& config() const { return cfg_; }

  /// Fused feature row (1 x 2m) for one instance. `prompts` may be null.
  Tensor features(Graph& g, const Tensor& image, const std::vector<int>& question,
                  const PromptSet* prompts) const {
    if (prompts) prompts->validate_for(cfg_);
    Tensor img_tokens = embed_image(g, image);
    Tensor q_tokens = embed_question(question);
    Tensor img_feat = encode(g, std::move(img_tokens), EncoderKind::image, prompts);
    Tensor q_feat = encode(g, std::move(q_tokens), EncoderKind::question, prompts);
    return g.concat_cols({img_feat, q_feat});
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto feed = [&h](const Tensor& t) {
      for (double v : t.values()) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(v));
        __builtin_memcpy(&bits, &v, sizeof(bits));
        for (int b = 0; b < 8; ++b) {
          h ^= (bits >> (8 * b)) & 0xff;
          h *= 0x100000001b3ull;
        }
      }
    };
    feed(image_proj_);
    feed(image_pos_);
    feed(token_embed_);
    feed(question_pos_);
    for (const auto& enc : blocks_) {
      for (const auto& blk : enc) {
        feed(blk.wq);
        feed(blk.wk);
        feed(blk.wv);
        feed(blk.wo);
        feed(blk.w_mlp1);
        feed(blk.w_mlp2);
      }
    }
    return h;
  }

  std::size_t parameter_count() const {
    std::size_t n = image_proj_.size() + image_pos_.size() + token_embed_.size() +
                    question_pos_.size();
    for (const auto& enc : blocks_) {
      for (const auto& blk : enc) {
        n += blk.wq.size() + blk.wk.size() + blk.wv.size() + blk.wo.size() +
             blk.w_mlp1.size() + blk.w_mlp2.size();
      }
    }
    return n;
  }

 private:
  struct BlockParams {
    Tensor wq, wk, wv, wo, w_mlp1, w_mlp2;
  };

  Tensor embed_image(Graph& g, const Tensor& image) const {
    if (image.rows() != cfg_.image_grid || image.cols() != cfg_.image_grid) {
      throw shape_error("backbone: image " + image.shape_str() + " vs grid " +
                        std::to_string(cfg_.image_grid) + "x" +
                        std::to_string(cfg_.image_grid));
    }
    return g.add(g.matmul(image, image_proj_), image_pos_);
  }

  Tensor embed_question(const std::vector<int>& question) const {
    const std::size_t len = cfg_.max_question_len;
    const std::size_t m = cfg_.hidden_dim;
    Tensor out(len, m);
    for (std::size_t i = 0; i < len; ++i) {
      int tok = i < question.size() ? question[i] : 0;  // pad with token 0
      if (tok < 0 || static_cast<std::size_t>(tok) >= cfg_.question_vocab) {
        throw value_error("backbone: question token " + std::to_string(tok) +
                          " outside vocab " + std::to_string(cfg_.question_vocab));
      }
      for (std::size_t j = 0; j < m; ++j) {
        out.at(i, j) = token_embed_.at(static_cast<std::size_t>(tok), j) +
                       question_pos_.at(i, j);
      }
    }
    return out;
  }

  Tensor encode(Graph& g, Tensor x, EncoderKind enc, const PromptSet* prompts) const {
    const auto& blocks = blocks_[static_cast<std::size_t>(enc)];
    const std::size_t m = cfg_.hidden_dim;
    const std::size_t heads = cfg_.heads;
    const std::size_t dh = m / heads;
    const Tensor empty(0, dh);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const BlockParams& blk = blocks[b];
      const PromptSet::BlockPrompts* bp =
          (prompts && prompts->prompt_len > 0) ? prompts->block(enc, b) : nullptr;
      Tensor xn = g.layer_norm_rows(x);
      Tensor qm = g.matmul(xn, blk.wq);
      Tensor km = g.matmul(xn, blk.wk);
      Tensor vm = g.matmul(xn, blk.wv);
      std::vector<Tensor> head_outs;
      head_outs.reserve(heads);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh, c1 = (h + 1) * dh;
        Tensor qh = g.slice_cols(qm, c0, c1);
        Tensor kh = g.slice_cols(km, c0, c1);
        Tensor vh = g.slice_cols(vm, c0, c1);
        Tensor pk = bp ? g.slice_cols(bp->key_prefix, c0, c1) : empty;
        Tensor pv = bp ? g.slice_cols(bp->value_prefix, c0, c1) : empty;
        head_outs.push_back(prefix_attention(g, qh, kh, vh, pk, pv));
      }
      x = g.add(x, g.matmul(g.concat_cols(head_outs), blk.wo));
      Tensor hn = g.layer_norm_rows(x);
      Tensor mlp = g.matmul(g.tanh_activation(g.matmul(hn, blk.w_mlp1)), blk.w_mlp2);
      x = g.add(x, mlp);
    }
    return g.mean_rows(x);
  }

  BackboneConfig cfg_;
  Tensor image_proj_, image_pos_, token_embed_, question_pos_;
  std::array<std::vector<BlockParams>, 2> blocks_;
};

/// Forward pass for one instance: prompted frozen backbone then the client's
/// answer head. Returns 1 x J logits. Pass a dropout RNG only during
/// non-deterministic training.
inline Tensor client_forward(Graph& g, const Backbone& backbone,
                             const PromptSet& prompts, const AnswerHead& head,
                             const Tensor& image, const std::vector<int>& question,
                             Rng* dropout_rng = nullptr) {
  const std::size_t feat_dim = 2 * backbone.config().hidden_dim;
  if (head.w1.rows() != feat_dim) {
    throw shape_error("client_forward: head expects input " +
                      std::to_string(head.w1.rows()) + ", backbone emits " +
                      std::to_string(feat_dim));
  }
  if (head.w2.cols() != backbone.config().answer_count) {
    throw shape_error("client_forward: head emits " + std::to_string(head.w2.cols()) +
                      " answers, backbone config says " +
                      std::to_string(backbone.config().answer_count));
  }
  Tensor feat = backbone.features(g, image, question, &prompts);
  Tensor hidden = g.tanh_activation(g.add_row_bias(g.matmul(feat, head.w1), head.b1));
  if (dropout_rng && head.dropout_rate > 0.0) {
    hidden = g.dropout(hidden, head.dropout_rate, *dropout_rng);
  }
  return g.add_row_bias(g.matmul(hidden, head.w2), head.b2);
}

}  // namespace evifed
