#include "vqa/model.hpp"

#include <numeric>
#include <utility>
#include <vector>

namespace vqa {

AttentionKind attention_from_string(const std::string& name) {
  if (name == "none") return AttentionKind::none;
  if (name == "top_down") return AttentionKind::top_down;
  if (name == "co_attention") return AttentionKind::co_attention;
  throw ConfigError("unknown attention kind '" + name +
                    "' (expected none, top_down, or co_attention)");
}

std::string to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::none: return "none";
    case AttentionKind::top_down: return "top_down";
    case AttentionKind::co_attention: return "co_attention";
  }
  throw ConfigError("unhandled attention kind");
}

void validate_model_config(const ModelConfig& c) {
  validate_encoder_config(c.encoder);
  if (c.answers < 2) {
    throw ConfigError("answer space needs at least 2 answers, got " +
                      std::to_string(c.answers));
  }
  if (c.fused_dim == 0) throw ConfigError("fused_dim must be positive");
  if (c.visual.dv == 0) throw ConfigError("visual feature dim must be positive");
  if (c.visual.kind == VisualMode::Kind::pooled_vector && c.visual.k != 1) {
    throw ConfigError("pooled_vector visual mode implies k = 1, got k = " +
                      std::to_string(c.visual.k));
  }
  if (c.visual.kind == VisualMode::Kind::regions && c.visual.k == 0) {
    throw ConfigError("regions visual mode needs k >= 1");
  }
  if (c.attention == AttentionKind::top_down) {
    if (c.attention_dim == 0) {
      throw ConfigError("top-down attention needs attention_dim >= 1");
    }
    if (c.glimpses == 0) {
      throw ConfigError("top-down attention needs at least one glimpse");
    }
  }
  if (c.attention == AttentionKind::co_attention) {
    if (c.encoder.kind == EncoderKind::linear_gap) {
      throw ConfigError(
          "co-attention needs word-level recurrent features; the linear_gap "
          "encoder provides none");
    }
    const std::size_t word_dim = encoder_output_dim(c.encoder);
    if (word_dim != c.visual.dv) {
      throw ConfigError("co-attention requires the encoder state width (" +
                        std::to_string(word_dim) +
                        ") to equal the visual feature dim (" +
                        std::to_string(c.visual.dv) + ")");
    }
  }
  if (c.fusion != FusionKind::concat &&
      c.resolved_q_dim() != c.resolved_v_dim()) {
    throw ConfigError("fusion '" + to_string(c.fusion) +
                      "' needs equal projection dims, got q " +
                      std::to_string(c.resolved_q_dim()) + " vs v " +
                      std::to_string(c.resolved_v_dim()));
  }
  if (c.embedding_lr_scale <= 0.0) {
    throw ConfigError("embedding_lr_scale must be positive");
  }
}

VqaModel::VqaModel(const ModelConfig& config, std::size_t vocab_size, Rng& rng)
    : config_(config) {
  validate_model_config(config_);
  EmbeddingTable table =
      make_embedding_table(vocab_size, config_.encoder.embed_dim, rng);
  table.trainable = !config_.frozen_embeddings;
  encoder_.emplace(config_.encoder, std::move(table), rng);
  build(rng);
}

VqaModel::VqaModel(const ModelConfig& config, EmbeddingTable table, Rng& rng)
    : config_(config) {
  validate_model_config(config_);
  if (config_.frozen_embeddings) table.trainable = false;
  encoder_.emplace(config_.encoder, std::move(table), rng);
  build(rng);
}

void VqaModel::build(Rng& rng) {
  const std::size_t dq = encoder_->output_dim();
  const std::size_t dv = config_.visual.dv;

  std::size_t v_in = dv;
  if (config_.attention == AttentionKind::top_down) {
    top_down_ = TopDownParams::init(dq, dv, config_.attention_dim,
                                    config_.glimpses,
                                    config_.attention_activation, rng);
    v_in = dv * config_.glimpses;
  }

  const std::size_t qd = config_.resolved_q_dim();
  const std::size_t vd = config_.resolved_v_dim();
  q_proj_W_ = init_uniform(rng, {dq, qd}, dq);
  q_proj_b_ = Tensor::zeros({1, qd}, true);
  v_proj_W_ = init_uniform(rng, {v_in, vd}, v_in);
  v_proj_b_ = Tensor::zeros({1, vd}, true);

  const std::size_t fused_in =
      config_.fusion == FusionKind::concat ? qd + vd : qd;
  out_W_ = init_uniform(rng, {fused_in, config_.answers}, fused_in);
  out_b_ = Tensor::zeros({1, config_.answers}, true);
}

Tensor VqaModel::attend(Tape& tape, const QuestionEncoding& enc,
                        const Tensor& V) const {
  switch (config_.attention) {
    case AttentionKind::none: {
      // baseline: regions mean-pooled to a single dv vector
      Tensor pooled = mean_rows_canonical(tape, V, V.dim(0));
      return reshape(tape, pooled, {1, V.dim(1)});
    }
    case AttentionKind::top_down:
      return top_down_attention(tape, V, enc.q, *top_down_).v_hat;
    case AttentionKind::co_attention: {
      Tensor words = enc.Q;
      if (enc.n_valid < words.dim(0)) {
        std::vector<std::size_t> idx(enc.n_valid);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        words = rows(tape, words, idx);
      }
      return co_attention(tape, V, words, config_.coattention_l2).v_hat;
    }
  }
  throw ConfigError("unhandled attention kind");
}

AnswerLogits VqaModel::forward(Tape& tape, const TokenSeq& seq,
                               const Tensor& visual_features) const {
  Tensor V = adapt_visual(visual_features, config_.visual);
  QuestionEncoding enc = encoder_->encode(tape, seq);
  Tensor v_in = attend(tape, enc, V);
  Tensor qp = project(tape, enc.q, q_proj_W_, q_proj_b_);
  Tensor vp = project(tape, v_in, v_proj_W_, v_proj_b_);
  Tensor fused = fuse(tape, qp, vp, config_.fusion);
  return classify(tape, fused, out_W_, out_b_);
}

std::size_t VqaModel::predict(const TokenSeq& seq,
                              const Tensor& visual_features) const {
  Tape silent(false);
  return forward(silent, seq, visual_features).predicted;
}

ParameterList VqaModel::parameters() const {
  ParameterList out = encoder_->parameters();
  if (config_.embedding_lr_scale != 1.0) {
    for (auto& p : out) {
      if (p.name == "encoder.embedding") {
        p.lr_scale *= config_.embedding_lr_scale;
      }
    }
  }
  if (top_down_) {
    ParameterList att = top_down_->parameters("attention");
    out.insert(out.end(), att.begin(), att.end());
  }
  out.push_back({q_proj_W_, "project.q.W"});
  out.push_back({q_proj_b_, "project.q.b"});
  out.push_back({v_proj_W_, "project.v.W"});
  out.push_back({v_proj_b_, "project.v.b"});
  out.push_back({out_W_, "classifier.W"});
  out.push_back({out_b_, "classifier.b"});
  return out;
}

const TopDownParams& VqaModel::top_down_params() const {
  if (!top_down_) {
    throw ConfigError("model was not built with top-down attention");
  }
  return *top_down_;
}

}  // namespace vqa
