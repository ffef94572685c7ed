// Full architecture assembly: question encoder, optional attention, per-side
// projections, fusion, and the answer classifier. Every ablation point of the
// study is a ModelConfig value.

#ifndef VQA_MODEL_HPP
#define VQA_MODEL_HPP

#include <cstdint>
#include <optional>
#include <string>

#include "vqa/encoders.hpp"
#include "vqa/error.hpp"
#include "vqa/fusion.hpp"
#include "vqa/param.hpp"
#include "vqa/rng.hpp"
#include "vqa/tensor.hpp"

namespace vqa {

enum class AttentionKind { none, top_down, co_attention };

AttentionKind attention_from_string(const std::string& name);
std::string to_string(AttentionKind kind);

struct ModelConfig {
  QuestionEncoderConfig encoder;
  bool frozen_embeddings = false;
  // Learning-rate scale applied to an ingested (pretrained, trainable)
  // embedding table; 1.0 for tables trained from scratch.
  double embedding_lr_scale = 1.0;

  VisualMode visual;

  AttentionKind attention = AttentionKind::none;
  Activation attention_activation = Activation::relu;
  std::size_t glimpses = 1;        // top-down only
  std::size_t attention_dim = 512;  // top-down projection width
  bool coattention_l2 = true;

  FusionKind fusion = FusionKind::mult;
  std::size_t fused_dim = 1024;  // d; q_dim/v_dim default to it
  std::size_t q_dim = 0;         // 0 = fused_dim
  std::size_t v_dim = 0;

  std::size_t answers = 0;  // |A|; must be set before building

  std::size_t resolved_q_dim() const { return q_dim ? q_dim : fused_dim; }
  std::size_t resolved_v_dim() const { return v_dim ? v_dim : fused_dim; }
};

// Rejects every invalid component combination up front (ConfigError), before
// any parameter is allocated.
void validate_model_config(const ModelConfig& config);

class VqaModel {
 public:
  // Fresh random embedding table over vocab_size tokens.
  VqaModel(const ModelConfig& config, std::size_t vocab_size, Rng& rng);
  // Adopts an externally built table (pretrained vectors, frozen or not).
  VqaModel(const ModelConfig& config, EmbeddingTable table, Rng& rng);

  // visual_features: k x dv region matrix (regions mode) or a dv pooled
  // vector. The question runs through the configured encoder.
  AnswerLogits forward(Tape& tape, const TokenSeq& seq,
                       const Tensor& visual_features) const;

  // Prediction without recording; returns the answer index.
  std::size_t predict(const TokenSeq& seq, const Tensor& visual_features) const;

  ParameterList parameters() const;
  std::size_t parameter_count() const { return count_parameters(parameters()); }

  const ModelConfig& config() const { return config_; }
  const QuestionEncoder& encoder() const { return *encoder_; }
  const TopDownParams& top_down_params() const;

 private:
  void build(Rng& rng);
  Tensor attend(Tape& tape, const QuestionEncoding& enc,
                const Tensor& V) const;

  ModelConfig config_;
  std::optional<QuestionEncoder> encoder_;
  std::optional<TopDownParams> top_down_;
  Tensor q_proj_W_, q_proj_b_;
  Tensor v_proj_W_, v_proj_b_;
  Tensor out_W_, out_b_;
};

}  // namespace vqa

#endif  // VQA_MODEL_HPP
