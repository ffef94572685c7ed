// Cross-modal core: top-down attention, co-attention, the three fusion
// strategies, generic projections, and the answer classifier.

#ifndef VQA_FUSION_HPP
#define VQA_FUSION_HPP

#include <cstdint>
#include <optional>
#include <string>

#include "vqa/error.hpp"
#include "vqa/param.hpp"
#include "vqa/rng.hpp"
#include "vqa/tensor.hpp"

namespace vqa {

// phi(x W + bias) for a 1 x n row vector x; identity activation when phi is
// absent. Shape mismatches surface as DimensionError.
Tensor project(Tape& tape, const Tensor& x, const Tensor& W,
               const Tensor& bias, std::optional<Activation> phi = {});

enum class FusionKind { mult, concat, sum };

FusionKind fusion_from_string(const std::string& name);
std::string to_string(FusionKind kind);

// Element-wise product / sum (equal dims required) or concatenation along the
// feature axis. Inputs are 1 x d row vectors.
Tensor fuse(Tape& tape, const Tensor& a, const Tensor& b, FusionKind kind);

struct TopDownParams {
  Tensor Wq, bq;  // dq x att_dim question reduction
  Tensor W1, b1;  // (dv + att_dim) x att_dim joint projection
  Tensor W2, b2;  // att_dim x h attention logits
  Activation phi = Activation::relu;
  std::size_t glimpses = 1;

  // Weights uniform in +-1/sqrt(fan_in), biases zero. glimpses must be >= 1
  // (1 or 2 in practice).
  static TopDownParams init(std::size_t dq, std::size_t dv,
                            std::size_t att_dim, std::size_t glimpses,
                            Activation phi, Rng& rng);

  // att_dim recovered from the stored shapes.
  std::size_t att_dim() const { return Wq.dim(1); }

  ParameterList parameters(const std::string& prefix) const;
};

struct TopDownResult {
  Tensor v_hat;  // 1 x (dv * h), glimpses concatenated
  Tensor A;      // k x h attention mask; each glimpse column sums to 1
};

// q' = q Wq; C = [V | tiled q']; A = column-softmax over regions of
// phi(C W1) W2; glimpse j of v_hat = sum_i A_ij * V_i. The region
// accumulation is content-ordered, so permuting V's rows leaves v_hat
// bit-identical while A's rows permute along.
TopDownResult top_down_attention(Tape& tape, const Tensor& V, const Tensor& q,
                                 const TopDownParams& params);

struct CoAttentionResult {
  Tensor v_hat;  // 1 x dv
  Tensor S;      // k x 1 region weights (sums to 1)
  std::size_t degenerate_rows = 0;  // zero-norm rows passed through
};

// Parameter-free co-attention: rows of V and Q are L2-normalized (unless
// normalize is false), C = Vn Qn^T Qn, each context row is reduced to a
// scalar score, S = softmax of the scores over regions, v_hat = sum_i S_i *
// Vn_i. With a single region the weight is exactly one, so v_hat is that
// region's normalized row.
CoAttentionResult co_attention(Tape& tape, const Tensor& V, const Tensor& Q,
                               bool normalize = true);

struct AnswerLogits {
  Tensor logits;         // 1 x |A|
  Tensor probabilities;  // softmax of logits; sums to 1 +- 1e-9
  std::size_t predicted = 0;
};

AnswerLogits classify(Tape& tape, const Tensor& fused, const Tensor& W_out,
                      const Tensor& bias);

}  // namespace vqa

#endif  // VQA_FUSION_HPP
