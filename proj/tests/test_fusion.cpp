#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "gradcheck.hpp"
#include "vqa/fusion.hpp"

using namespace vqa;

namespace {

double sigmoid_ref(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void fill_zero(Tensor t) {
  for (auto& v : t.mutable_values()) v = 0.0;
}

}  // namespace

TEST_CASE("project applies xW + b with optional activation") {
  Tape tape(false);
  Tensor x = Tensor::matrix(1, 2, {1.0, 2.0});

  SUBCASE("identity weights pass the input through") {
    Tensor W = Tensor::matrix(2, 2, {1, 0, 0, 1});
    Tensor b = Tensor::matrix(1, 2, {0, 0});
    Tensor y = project(tape, x, W, b);
    CHECK(y(0, 0) == 1.0);
    CHECK(y(0, 1) == 2.0);
  }

  SUBCASE("2 to 1 reduction") {
    Tensor W = Tensor::matrix(2, 1, {1, 1});
    Tensor b = Tensor::matrix(1, 1, {0});
    Tensor y = project(tape, x, W, b);
    REQUIRE(y.shape() == (Shape{1, 1}));
    CHECK(y(0, 0) == doctest::Approx(3.0));
  }

  SUBCASE("activation and bias are applied after the product") {
    Tensor W = Tensor::matrix(2, 1, {1, 1});
    Tensor b = Tensor::matrix(1, 1, {-5.0});
    Tensor y = project(tape, x, W, b, Activation::relu);
    CHECK(y(0, 0) == 0.0);  // relu(3 - 5)
    Tensor z = project(tape, x, W, b, Activation::tanh);
    CHECK(z(0, 0) == doctest::Approx(std::tanh(-2.0)));
  }

  SUBCASE("shape mismatch is a dimension error") {
    Tensor W = Tensor::matrix(3, 1, {1, 1, 1});
    Tensor b = Tensor::matrix(1, 1, {0});
    CHECK_THROWS_AS(project(tape, x, W, b), DimensionError);
  }
}

TEST_CASE("fuse strategies") {
  Tape tape(false);
  Tensor a = Tensor::matrix(1, 2, {1.0, 2.0});
  Tensor b = Tensor::matrix(1, 2, {3.0, 4.0});
  Tensor ones = Tensor::matrix(1, 2, {1.0, 1.0});
  Tensor zeros = Tensor::matrix(1, 2, {0.0, 0.0});

  Tensor m = fuse(tape, a, b, FusionKind::mult);
  CHECK(m(0, 0) == 3.0);
  CHECK(m(0, 1) == 8.0);

  // identities
  Tensor mi = fuse(tape, a, ones, FusionKind::mult);
  Tensor si = fuse(tape, a, zeros, FusionKind::sum);
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(mi(0, j) == a(0, j));
    CHECK(si(0, j) == a(0, j));
  }

  // mult and sum commute, concat does not
  Tensor m2 = fuse(tape, b, a, FusionKind::mult);
  Tensor s1 = fuse(tape, a, b, FusionKind::sum);
  Tensor s2 = fuse(tape, b, a, FusionKind::sum);
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(m(0, j) == m2(0, j));
    CHECK(s1(0, j) == s2(0, j));
  }
  Tensor c1 = fuse(tape, a, b, FusionKind::concat);
  Tensor c2 = fuse(tape, b, a, FusionKind::concat);
  REQUIRE(c1.shape() == (Shape{1, 4}));
  CHECK(c1(0, 0) == 1.0);
  CHECK(c1(0, 2) == 3.0);
  CHECK(c1(0, 0) != c2(0, 0));

  // mult/sum demand equal dims; concat accepts any
  Tensor wide = Tensor::matrix(1, 3, {1, 2, 3});
  CHECK_THROWS_AS(fuse(tape, a, wide, FusionKind::mult), DimensionError);
  CHECK_THROWS_AS(fuse(tape, a, wide, FusionKind::sum), DimensionError);
  CHECK(fuse(tape, a, wide, FusionKind::concat).dim(1) == 5);
}

TEST_CASE("fusion kind names round-trip") {
  for (auto kind : {FusionKind::mult, FusionKind::concat, FusionKind::sum}) {
    CHECK(fusion_from_string(to_string(kind)) == kind);
  }
  CHECK_THROWS_AS(fusion_from_string("hadamard"), ConfigError);
}

TEST_CASE("top-down params init shapes and validation") {
  Rng rng(11);
  TopDownParams p = TopDownParams::init(5, 4, 6, 2, Activation::relu, rng);
  CHECK(p.Wq.shape() == (Shape{5, 6}));
  CHECK(p.W1.shape() == (Shape{10, 6}));
  CHECK(p.W2.shape() == (Shape{6, 2}));
  CHECK(p.b2.shape() == (Shape{1, 2}));
  CHECK(p.att_dim() == 6);
  CHECK(p.glimpses == 2);
  for (const auto& prm : p.parameters("att")) {
    CHECK(prm.tensor.requires_grad());
    CHECK(prm.name.rfind("att.", 0) == 0);
  }
  CHECK(count_parameters(p.parameters("att")) ==
        5 * 6 + 6 + 10 * 6 + 6 + 6 * 2 + 2);
  // biases start at zero, weights within the fan-in bound
  for (double v : p.b1.values()) CHECK(v == 0.0);
  for (double v : p.W1.values()) CHECK(std::fabs(v) <= 1.0 / std::sqrt(10.0));

  CHECK_THROWS_AS(TopDownParams::init(5, 4, 0, 1, Activation::relu, rng),
                  ConfigError);
  CHECK_THROWS_AS(TopDownParams::init(5, 4, 6, 0, Activation::relu, rng),
                  ConfigError);
}

TEST_CASE("top-down attention matches a step-by-step dense oracle") {
  const std::size_t k = 3, dv = 4, dq = 5, att = 6, h = 2;
  for (Activation phi : {Activation::relu, Activation::gated_tanh}) {
    Rng rng(17);
    TopDownParams p = TopDownParams::init(dq, dv, att, h, phi, rng);
    // exercise non-zero biases as well
    for (auto& v : p.b1.mutable_values()) v = rng.uniform(-0.5, 0.5);
    for (auto& v : p.b2.mutable_values()) v = rng.uniform(-0.5, 0.5);
    Tensor V = random_tensor({k, dv}, 21);
    Tensor q = random_tensor({1, dq}, 22);

    Tape tape(false);
    TopDownResult r = top_down_attention(tape, V, q, p);
    REQUIRE(r.A.shape() == (Shape{k, h}));
    REQUIRE(r.v_hat.shape() == (Shape{1, dv * h}));

    // Independent dense recomputation with plain loops.
    std::vector<double> qp(att, 0.0);
    for (std::size_t a = 0; a < att; ++a) {
      for (std::size_t d = 0; d < dq; ++d) qp[a] += q(0, d) * p.Wq(d, a);
      qp[a] += p.bq(0, a);
    }
    std::vector<double> hid(k * att, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t a = 0; a < att; ++a) {
        double z = p.b1(0, a);
        for (std::size_t j = 0; j < dv; ++j) z += V(i, j) * p.W1(j, a);
        for (std::size_t x = 0; x < att; ++x) z += qp[x] * p.W1(dv + x, a);
        hid[i * att + a] = phi == Activation::relu
                               ? (z > 0.0 ? z : 0.0)
                               : sigmoid_ref(z) * std::tanh(z);
      }
    }
    std::vector<double> logits(k * h, 0.0);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t g = 0; g < h; ++g) {
        double z = p.b2(0, g);
        for (std::size_t a = 0; a < att; ++a)
          z += hid[i * att + a] * p.W2(a, g);
        logits[i * h + g] = z;
      }
    std::vector<double> mask(k * h, 0.0);
    for (std::size_t g = 0; g < h; ++g) {
      double mx = logits[g];
      for (std::size_t i = 1; i < k; ++i)
        mx = std::max(mx, logits[i * h + g]);
      double z = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        mask[i * h + g] = std::exp(logits[i * h + g] - mx);
        z += mask[i * h + g];
      }
      for (std::size_t i = 0; i < k; ++i) mask[i * h + g] /= z;
    }
    std::vector<double> vhat(h * dv, 0.0);
    for (std::size_t g = 0; g < h; ++g)
      for (std::size_t j = 0; j < dv; ++j)
        for (std::size_t i = 0; i < k; ++i)
          vhat[g * dv + j] += mask[i * h + g] * V(i, j);

    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t g = 0; g < h; ++g)
        CHECK(r.A(i, g) == doctest::Approx(mask[i * h + g]).epsilon(1e-12));
    for (std::size_t t = 0; t < h * dv; ++t)
      CHECK(r.v_hat(0, t) == doctest::Approx(vhat[t]).epsilon(1e-12));
  }
}

TEST_CASE("top-down zero logit head gives uniform mask and column means") {
  const std::size_t k = 4, dv = 3, h = 2;
  Rng rng(23);
  TopDownParams p = TopDownParams::init(5, dv, 6, h, Activation::relu, rng);
  fill_zero(p.W2);
  fill_zero(p.b2);
  Tensor V = random_tensor({k, dv}, 31);
  Tensor q = random_tensor({1, 5}, 32);

  Tape tape(false);
  TopDownResult r = top_down_attention(tape, V, q, p);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t g = 0; g < h; ++g) CHECK(r.A(i, g) == 1.0 / k);
  for (std::size_t g = 0; g < h; ++g)
    for (std::size_t j = 0; j < dv; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < k; ++i) mean += V(i, j);
      mean /= static_cast<double>(k);
      CHECK(r.v_hat(0, g * dv + j) == doctest::Approx(mean).epsilon(1e-12));
    }
  // identical uniform columns make the two glimpses bit-identical
  for (std::size_t j = 0; j < dv; ++j)
    CHECK(r.v_hat(0, j) == r.v_hat(0, dv + j));
}

TEST_CASE("top-down single region collapses to that region") {
  Rng rng(29);
  const std::size_t dv = 4, h = 2;
  TopDownParams p = TopDownParams::init(3, dv, 5, h, Activation::tanh, rng);
  Tensor V = random_tensor({1, dv}, 41);
  Tensor q = random_tensor({1, 3}, 42);
  Tape tape(false);
  TopDownResult r = top_down_attention(tape, V, q, p);
  for (std::size_t g = 0; g < h; ++g) {
    CHECK(r.A(0, g) == 1.0);
    for (std::size_t j = 0; j < dv; ++j)
      CHECK(r.v_hat(0, g * dv + j) == V(0, j));
  }
}

TEST_CASE("top-down mask is a distribution and v_hat stays in the hull") {
  const std::size_t k = 6, dv = 5, h = 2;
  Rng rng(31);
  TopDownParams p = TopDownParams::init(7, dv, 8, h, Activation::gated_tanh,
                                        rng);
  Tensor V = random_tensor({k, dv}, 51);
  Tensor q = random_tensor({1, 7}, 52);
  Tape tape(false);
  TopDownResult r = top_down_attention(tape, V, q, p);

  for (std::size_t g = 0; g < h; ++g) {
    double colsum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      CHECK(r.A(i, g) > 0.0);
      CHECK(r.A(i, g) < 1.0);
      colsum += r.A(i, g);
    }
    CHECK(std::fabs(colsum - 1.0) <= 1e-9);
    for (std::size_t j = 0; j < dv; ++j) {
      double lo = V(0, j), hi = V(0, j);
      for (std::size_t i = 1; i < k; ++i) {
        lo = std::min(lo, V(i, j));
        hi = std::max(hi, V(i, j));
      }
      CHECK(r.v_hat(0, g * dv + j) >= lo - 1e-12);
      CHECK(r.v_hat(0, g * dv + j) <= hi + 1e-12);
    }
  }
}

TEST_CASE("top-down region permutation equivariance is exact") {
  const std::size_t k = 5, dv = 4, h = 2;
  Rng rng(37);
  TopDownParams p = TopDownParams::init(6, dv, 7, h, Activation::relu, rng);
  Tensor V = random_tensor({k, dv}, 61);
  Tensor q = random_tensor({1, 6}, 62);
  const std::size_t perm[k] = {2, 4, 1, 0, 3};
  Tensor Vp = Tensor::zeros({k, dv});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < dv; ++j) Vp.at(i, j) = V(perm[i], j);

  Tape t1(false), t2(false);
  TopDownResult a = top_down_attention(t1, V, q, p);
  TopDownResult b = top_down_attention(t2, Vp, q, p);
  // A rows permute along with the regions, bit for bit
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t g = 0; g < h; ++g)
      CHECK(b.A(i, g) == a.A(perm[i], g));
  // v_hat is untouched, bit for bit
  for (std::size_t t = 0; t < dv * h; ++t)
    CHECK(b.v_hat(0, t) == a.v_hat(0, t));
}

TEST_CASE("top-down dimension errors") {
  Rng rng(41);
  TopDownParams p = TopDownParams::init(5, 4, 6, 1, Activation::relu, rng);
  Tape tape(false);
  Tensor V = random_tensor({3, 4}, 71);
  CHECK_THROWS_AS(
      top_down_attention(tape, V, random_tensor({1, 7}, 72), p),
      DimensionError);
  CHECK_THROWS_AS(
      top_down_attention(tape, random_tensor({3, 9}, 73),
                         random_tensor({1, 5}, 74), p),
      DimensionError);
  CHECK_THROWS_AS(
      top_down_attention(tape, random_tensor({12}, 75),
                         random_tensor({1, 5}, 76), p),
      DimensionError);
  // rank-1 question vectors are accepted
  TopDownResult r = top_down_attention(tape, V, random_tensor({5}, 77), p);
  CHECK(r.v_hat.dim(1) == 4);
}

TEST_CASE("co-attention matches brute force on a small instance") {
  const std::size_t k = 3, n = 2, dv = 4;
  Tensor V = random_tensor({k, dv}, 81);
  Tensor Q = random_tensor({n, dv}, 82);
  Tape tape(false);
  CoAttentionResult r = co_attention(tape, V, Q);
  REQUIRE(r.S.shape() == (Shape{k, 1}));
  REQUIRE(r.v_hat.shape() == (Shape{1, dv}));
  CHECK(r.degenerate_rows == 0);

  // plain-double recomputation: normalize rows, C = Vn (Qn^T Qn), reduce
  // each context row to a scalar score, softmax over regions, weighted sum
  std::vector<double> vn(k * dv), qn(n * dv);
  for (std::size_t i = 0; i < k; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < dv; ++j) s += V(i, j) * V(i, j);
    s = std::sqrt(s);
    for (std::size_t j = 0; j < dv; ++j) vn[i * dv + j] = V(i, j) / s;
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < dv; ++j) s += Q(i, j) * Q(i, j);
    s = std::sqrt(s);
    for (std::size_t j = 0; j < dv; ++j) qn[i * dv + j] = Q(i, j) / s;
  }
  std::vector<double> m(dv * dv, 0.0);  // Qn^T Qn
  for (std::size_t a = 0; a < dv; ++a)
    for (std::size_t b = 0; b < dv; ++b)
      for (std::size_t i = 0; i < n; ++i)
        m[a * dv + b] += qn[i * dv + a] * qn[i * dv + b];
  std::vector<double> c(k * dv, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t b = 0; b < dv; ++b)
      for (std::size_t a = 0; a < dv; ++a)
        c[i * dv + b] += vn[i * dv + a] * m[a * dv + b];
  std::vector<double> score(k, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < dv; ++j) score[i] += c[i * dv + j];
  double mx = *std::max_element(score.begin(), score.end());
  std::vector<double> a(k);
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    a[i] = std::exp(score[i] - mx);
    z += a[i];
  }
  for (std::size_t i = 0; i < k; ++i) a[i] /= z;
  std::vector<double> vhat(dv, 0.0);
  for (std::size_t t = 0; t < dv; ++t)
    for (std::size_t i = 0; i < k; ++i) vhat[t] += a[i] * vn[i * dv + t];

  for (std::size_t i = 0; i < k; ++i)
    CHECK(r.S(i, 0) == doctest::Approx(a[i]).epsilon(1e-12));
  for (std::size_t t = 0; t < dv; ++t)
    CHECK(r.v_hat(0, t) == doctest::Approx(vhat[t]).epsilon(1e-12));

  // the weights form a distribution over regions
  double colsum = 0.0;
  for (std::size_t i = 0; i < k; ++i) colsum += r.S(i, 0);
  CHECK(std::fabs(colsum - 1.0) <= 1e-9);
}

TEST_CASE("co-attention is exactly invariant to positive scaling of Q") {
  Tensor V = random_tensor({4, 6}, 91);
  Tensor Q = random_tensor({3, 6}, 92);
  Tape tape(false);
  CoAttentionResult base = co_attention(tape, V, Q);

  for (double c : {4.0, 0.25}) {
    Tensor Qs = Tensor::zeros({3, 6});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 6; ++j) Qs.at(i, j) = c * Q(i, j);
    CoAttentionResult scaled = co_attention(tape, V, Qs);
    for (std::size_t t = 0; t < 6; ++t)
      CHECK(scaled.v_hat(0, t) == base.v_hat(0, t));
  }
  // non-power-of-two scales agree to rounding
  Tensor Q3 = Tensor::zeros({3, 6});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j) Q3.at(i, j) = 3.0 * Q(i, j);
  CoAttentionResult near = co_attention(tape, V, Q3);
  for (std::size_t t = 0; t < 6; ++t)
    CHECK(near.v_hat(0, t) ==
          doctest::Approx(base.v_hat(0, t)).epsilon(1e-12));
}

TEST_CASE("co-attention single region and orthogonal question") {
  Tape tape(false);

  SUBCASE("k = 1 returns the normalized region row") {
    Tensor V = Tensor::matrix(1, 3, {3.0, 0.0, 4.0});
    Tensor Q = random_tensor({2, 3}, 101);
    CoAttentionResult r = co_attention(tape, V, Q);
    CHECK(r.S(0, 0) == 1.0);
    CHECK(r.v_hat(0, 0) == doctest::Approx(0.6));
    CHECK(r.v_hat(0, 1) == 0.0);
    CHECK(r.v_hat(0, 2) == doctest::Approx(0.8));
  }

  SUBCASE("question orthogonal to every region gives uniform weights") {
    // V lives in the first two channels, Q in the last two
    Tensor V = Tensor::matrix(3, 4, {1, 2, 0, 0, -3, 1, 0, 0, 0.5, 4, 0, 0});
    Tensor Q = Tensor::matrix(2, 4, {0, 0, 2, 1, 0, 0, -1, 3});
    CoAttentionResult r = co_attention(tape, V, Q);
    for (std::size_t i = 0; i < 3; ++i) CHECK(r.S(i, 0) == 1.0 / 3.0);
    Tensor Vn = l2_normalize(tape, V, 1);
    for (std::size_t t = 0; t < 4; ++t) {
      double mean = (Vn(0, t) + Vn(1, t) + Vn(2, t)) / 3.0;
      CHECK(r.v_hat(0, t) == doctest::Approx(mean).epsilon(1e-12));
    }
  }
}

TEST_CASE("co-attention is exactly invariant to region permutation") {
  const std::size_t k = 5, dv = 4;
  Tensor V = random_tensor({k, dv}, 111);
  Tensor Q = random_tensor({3, dv}, 112);
  const std::size_t perm[k] = {4, 2, 0, 3, 1};
  Tensor Vp = Tensor::zeros({k, dv});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < dv; ++j) Vp.at(i, j) = V(perm[i], j);
  Tape tape(false);
  CoAttentionResult a = co_attention(tape, V, Q);
  CoAttentionResult b = co_attention(tape, Vp, Q);
  for (std::size_t t = 0; t < dv; ++t)
    CHECK(a.v_hat(0, t) == b.v_hat(0, t));
}

TEST_CASE("co-attention flags degenerate rows and honors the l2 switch") {
  Tape tape(false);
  Tensor V = Tensor::matrix(3, 2, {1, 0, 0, 0, 0, 2});  // middle row zero
  Tensor Q = random_tensor({2, 2}, 121);
  CoAttentionResult r = co_attention(tape, V, Q);
  CHECK(r.degenerate_rows == 1);

  CoAttentionResult raw = co_attention(tape, V, Q, false);
  CHECK(raw.degenerate_rows == 0);
  // without normalization the similarity scores change
  bool differs = false;
  for (std::size_t i = 0; i < raw.S.size(); ++i)
    if (raw.S.values()[i] != r.S.values()[i]) differs = true;
  CHECK(differs);
}

TEST_CASE("co-attention dimension errors") {
  Tape tape(false);
  CHECK_THROWS_AS(
      co_attention(tape, random_tensor({3, 4}, 1), random_tensor({2, 5}, 2)),
      DimensionError);
  CHECK_THROWS_AS(
      co_attention(tape, random_tensor({12}, 3), random_tensor({2, 4}, 4)),
      DimensionError);
}

TEST_CASE("classifier logits, probabilities, and prediction") {
  Tape tape(false);

  SUBCASE("zero weights give uniform probabilities") {
    Tensor fused = random_tensor({1, 5}, 131);
    Tensor W = Tensor::zeros({5, 8});
    Tensor b = Tensor::zeros({1, 8});
    AnswerLogits out = classify(tape, fused, W, b);
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(out.probabilities(0, j) == 1.0 / 8.0);
  }

  SUBCASE("probabilities normalize and argmax matches the logits") {
    Tensor fused = random_tensor({1, 6}, 132);
    Tensor W = random_tensor({6, 9}, 133);
    Tensor b = random_tensor({1, 9}, 134);
    AnswerLogits out = classify(tape, fused, W, b);
    double total = 0.0;
    for (std::size_t j = 0; j < 9; ++j) total += out.probabilities(0, j);
    CHECK(std::fabs(total - 1.0) <= 1e-9);
    CHECK(argmax(out.probabilities) == argmax(out.logits));
    CHECK(out.predicted == argmax(out.logits));
  }
}

TEST_CASE("gradients: project and fuse") {
  for (auto phi : {std::optional<Activation>{}, std::optional<Activation>{
                       Activation::gated_tanh}}) {
    check_gradients(
        {random_tensor({1, 3}, 141), random_tensor({3, 4}, 142),
         random_tensor({1, 4}, 143)},
        [phi](Tape& t, std::vector<Tensor>& in) {
          Tensor y = project(t, in[0], in[1], in[2], phi);
          Tensor flat = reshape(t, y, {y.size()});
          return sum(t, mul(t, flat, flat), 0);
        });
  }
  for (auto kind : {FusionKind::mult, FusionKind::concat, FusionKind::sum}) {
    check_gradients({random_tensor({1, 4}, 144), random_tensor({1, 4}, 145)},
                    [kind](Tape& t, std::vector<Tensor>& in) {
                      Tensor y = fuse(t, in[0], in[1], kind);
                      Tensor flat = reshape(t, y, {y.size()});
                      return sum(t, mul(t, flat, flat), 0);
                    });
  }
}

TEST_CASE("gradients: top-down attention end to end") {
  const std::size_t k = 3, dv = 4, dq = 3, att = 4, h = 2;
  Rng rng(47);
  TopDownParams p = TopDownParams::init(dq, dv, att, h, Activation::gated_tanh,
                                        rng);
  Tensor V = random_tensor({k, dv}, 151);
  Tensor q = random_tensor({1, dq}, 152);
  Tensor coef = random_tensor({1, dv * h}, 153);
  check_gradients({V, q, p.Wq, p.bq, p.W1, p.b1, p.W2, p.b2},
                  [&p, coef](Tape& t, std::vector<Tensor>& in) {
                    TopDownResult r = top_down_attention(t, in[0], in[1], p);
                    return sum(t, mul(t, r.v_hat, coef), 1);
                  });
}

TEST_CASE("gradients: co-attention") {
  Tensor coef = random_tensor({1, 4}, 161);
  check_gradients({random_tensor({3, 4}, 162), random_tensor({2, 4}, 163)},
                  [coef](Tape& t, std::vector<Tensor>& in) {
                    CoAttentionResult r = co_attention(t, in[0], in[1]);
                    return sum(t, mul(t, r.v_hat, coef), 1);
                  });
}

TEST_CASE("gradients: classifier through the probabilities") {
  Tensor coef = random_tensor({1, 5}, 171);
  check_gradients(
      {random_tensor({1, 4}, 172), random_tensor({4, 5}, 173),
       random_tensor({1, 5}, 174)},
      [coef](Tape& t, std::vector<Tensor>& in) {
        AnswerLogits out = classify(t, in[0], in[1], in[2]);
        return sum(t, mul(t, out.probabilities, coef), 1);
      });
}
