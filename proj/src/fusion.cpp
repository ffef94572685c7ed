#include "vqa/fusion.hpp"

namespace vqa {

Tensor project(Tape& tape, const Tensor& x, const Tensor& W,
               const Tensor& bias, std::optional<Activation> phi) {
  Tensor y = add_rowwise(tape, matmul(tape, x, W), bias);
  if (phi) y = activation(tape, y, *phi);
  return y;
}

FusionKind fusion_from_string(const std::string& name) {
  if (name == "mult") return FusionKind::mult;
  if (name == "concat") return FusionKind::concat;
  if (name == "sum") return FusionKind::sum;
  throw ConfigError("unknown fusion strategy '" + name +
                    "' (expected mult, concat, or sum)");
}

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::mult: return "mult";
    case FusionKind::concat: return "concat";
    case FusionKind::sum: return "sum";
  }
  throw ConfigError("unhandled fusion kind");
}

Tensor fuse(Tape& tape, const Tensor& a, const Tensor& b, FusionKind kind) {
  switch (kind) {
    case FusionKind::mult: return mul(tape, a, b);
    case FusionKind::sum: return add(tape, a, b);
    case FusionKind::concat: return concat(tape, a, b, a.rank() - 1);
  }
  throw ConfigError("unhandled fusion kind");
}

// --- top-down attention -----------------------------------------------------

TopDownParams TopDownParams::init(std::size_t dq, std::size_t dv,
                                  std::size_t att_dim, std::size_t glimpses,
                                  Activation phi, Rng& rng) {
  if (dq == 0 || dv == 0 || att_dim == 0) {
    throw ConfigError("top-down attention dimensions must be positive");
  }
  if (glimpses == 0) {
    throw ConfigError("top-down attention needs at least one glimpse");
  }
  TopDownParams p;
  p.Wq = init_uniform(rng, {dq, att_dim}, dq);
  p.bq = Tensor::zeros({1, att_dim}, true);
  p.W1 = init_uniform(rng, {dv + att_dim, att_dim}, dv + att_dim);
  p.b1 = Tensor::zeros({1, att_dim}, true);
  p.W2 = init_uniform(rng, {att_dim, glimpses}, att_dim);
  p.b2 = Tensor::zeros({1, glimpses}, true);
  p.phi = phi;
  p.glimpses = glimpses;
  return p;
}

ParameterList TopDownParams::parameters(const std::string& prefix) const {
  return {{Wq, prefix + ".Wq"}, {bq, prefix + ".bq"},
          {W1, prefix + ".W1"}, {b1, prefix + ".b1"},
          {W2, prefix + ".W2"}, {b2, prefix + ".b2"}};
}

TopDownResult top_down_attention(Tape& tape, const Tensor& V, const Tensor& q,
                                 const TopDownParams& params) {
  if (V.rank() != 2) {
    throw DimensionError("top_down_attention expects region matrix, got " +
                         shape_str(V.shape()));
  }
  const std::size_t k = V.dim(0);
  if (k == 0) throw ContractError("top_down_attention with zero regions");
  Tensor qr = q;
  if (qr.rank() == 1) qr = reshape(tape, qr, {1, qr.dim(0)});
  if (qr.rank() != 2 || qr.dim(0) != 1) {
    throw DimensionError("top_down_attention expects a single question row, "
                         "got " + shape_str(q.shape()));
  }
  if (qr.dim(1) != params.Wq.dim(0)) {
    throw DimensionError("question dim " + std::to_string(qr.dim(1)) +
                         " does not match Wq rows " +
                         std::to_string(params.Wq.dim(0)));
  }
  if (V.dim(1) + params.att_dim() != params.W1.dim(0)) {
    throw DimensionError("region dim " + std::to_string(V.dim(1)) +
                         " + attention dim " +
                         std::to_string(params.att_dim()) +
                         " does not match W1 rows " +
                         std::to_string(params.W1.dim(0)));
  }

  Tensor q1 = project(tape, qr, params.Wq, params.bq);
  Tensor C = concat(tape, V, tile_rows(tape, q1, k), 1);
  Tensor hidden = activation(
      tape, add_rowwise(tape, matmul(tape, C, params.W1), params.b1),
      params.phi);
  Tensor logits =
      add_rowwise(tape, matmul(tape, hidden, params.W2), params.b2);
  Tensor A = softmax(tape, logits, 0);
  Tensor attended = attend_rows_canonical(tape, A, V);  // h x dv
  TopDownResult out;
  out.v_hat = reshape(tape, attended, {1, A.dim(1) * V.dim(1)});
  out.A = A;
  return out;
}

// --- co-attention -----------------------------------------------------------

CoAttentionResult co_attention(Tape& tape, const Tensor& V, const Tensor& Q,
                               bool normalize) {
  if (V.rank() != 2 || Q.rank() != 2) {
    throw DimensionError("co_attention expects matrices, got " +
                         shape_str(V.shape()) + " and " +
                         shape_str(Q.shape()));
  }
  if (V.dim(1) != Q.dim(1)) {
    throw DimensionError("co_attention feature dims differ: V " +
                         shape_str(V.shape()) + " vs Q " +
                         shape_str(Q.shape()));
  }
  CoAttentionResult out;
  std::size_t degen_v = 0, degen_q = 0;
  Tensor Vn = normalize ? l2_normalize(tape, V, 1, &degen_v) : V;
  Tensor Qn = normalize ? l2_normalize(tape, Q, 1, &degen_q) : Q;
  out.degenerate_rows = degen_v + degen_q;
  // C = (Q^T (Q V^T))^T realized as (Vn Qn^T) Qn, which keeps every output
  // row a function of its own region row.
  Tensor C = matmul(tape, matmul(tape, Vn, transpose(tape, Qn)), Qn);
  Tensor scores = reshape(tape, sum(tape, C, 1), {V.dim(0), 1});
  out.S = softmax(tape, scores, 0);
  out.v_hat = reshape(tape, attend_rows_canonical(tape, out.S, Vn),
                      {1, V.dim(1)});
  return out;
}

// --- classifier -------------------------------------------------------------

AnswerLogits classify(Tape& tape, const Tensor& fused, const Tensor& W_out,
                      const Tensor& bias) {
  AnswerLogits out;
  out.logits = add_rowwise(tape, matmul(tape, fused, W_out), bias);
  out.probabilities = softmax(tape, out.logits, 1);
  out.predicted = argmax(out.logits);
  return out;
}

}  // namespace vqa
