#include "vqa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace vqa {

namespace {

constexpr double kDegenerateNorm = 1e-12;

void check_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(shape));
  }
}

// outer / n / inner decomposition for slice iteration along one axis.
struct AxisView {
  std::size_t outer, n, inner;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

double sigmoid_fn(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

// --- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) {
      throw DimensionError("tensor extents must be positive, got " +
                           shape_str(shape));
    }
  }
  auto n = std::make_shared<Node>();
  n->values.assign(shape_size(shape), value);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  Tensor t = zeros(shape, requires_grad);
  t.node().values = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  Shape s{values.size()};
  return from(std::move(s), std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values, bool requires_grad) {
  return from({rows, cols}, std::move(values), requires_grad);
}

Tensor::Node& Tensor::node() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }
std::size_t Tensor::size() const { return node().values.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
  check_axis(shape(), axis, "dim");
  return shape()[axis];
}

std::span<const double> Tensor::values() const { return node().values; }
std::span<double> Tensor::mutable_values() { return node().values; }

bool Tensor::requires_grad() const { return node().requires_grad; }
void Tensor::set_requires_grad(bool v) { node().requires_grad = v; }

bool Tensor::has_grad() const { return !node().grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) {
    throw ContractError("gradient requested but backward has not reached "
                        "this tensor");
  }
  return node().grad;
}

std::span<double> Tensor::grad_buffer() {
  auto& g = node().grad;
  if (g.empty()) g.assign(size(), 0.0);
  return g;
}

void Tensor::zero_grad() {
  auto& g = node().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

void Tensor::drop_grad() { node().grad.clear(); }

double Tensor::operator()(std::size_t i) const { return node().values.at(i); }

double Tensor::operator()(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw DimensionError("2-D access on " + shape_str(shape()));
  return node().values.at(i * shape()[1] + j);
}

double& Tensor::at(std::size_t i) { return node().values.at(i); }

double& Tensor::at(std::size_t i, std::size_t j) {
  if (rank() != 2) throw DimensionError("2-D access on " + shape_str(shape()));
  return node().values.at(i * shape()[1] + j);
}

// --- Tape ------------------------------------------------------------------

void Tape::record(std::function<void()> backward_step) {
  if (!recording_) return;
  if (consumed_) {
    throw ContractError("tape already consumed by backward; build a new tape");
  }
  steps_.push_back(std::move(backward_step));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw ContractError("backward called twice on one tape");
  }
  if (loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  consumed_ = true;
  Tensor seed = loss;
  seed.grad_buffer()[0] = 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  steps_.clear();
}

// --- Op plumbing -----------------------------------------------------------

namespace {

// An op output carries requires_grad when any input does; the backward step
// is recorded only in that case. A step whose output never received a
// gradient (dead branch) is a no-op.
Tensor make_output(Tape& tape, Shape shape,
                   std::initializer_list<const Tensor*> inputs) {
  bool rg = false;
  for (const Tensor* t : inputs) rg = rg || t->requires_grad();
  return Tensor::zeros(std::move(shape), rg && tape.recording());
}

bool wants_backward(Tape& tape, const Tensor& out) {
  return tape.recording() && out.requires_grad();
}

}  // namespace

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "gated_tanh") return Activation::gated_tanh;
  throw ConfigError("unknown activation kind: " + name);
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::gated_tanh: return "gated_tanh";
  }
  return "?";
}

// --- matmul / transpose -----------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], n = a.shape()[1], p = b.shape()[1];
  Tensor out = make_output(tape, {m, p}, {&a, &b});
  {
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.mutable_values();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t k = 0; k < n; ++k) {
        const double aik = av[i * n + k];
        if (aik == 0.0) continue;
        const double* brow = &bv[k * p];
        double* orow = &ov[i * p];
        for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
      }
    }
  }
  if (wants_backward(tape, out)) {
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc, m, n, p]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      if (ac.requires_grad()) {
        auto ga = ac.grad_buffer();
        auto bv = bc.values();
        // dA = dY * B^T
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t k = 0; k < n; ++k) {
            double acc = 0.0;
            const double* grow = &go[i * p];
            const double* brow = &bv[k * p];
            for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
            ga[i * n + k] += acc;
          }
        }
      }
      if (bc.requires_grad()) {
        auto gb = bc.grad_buffer();
        auto av = ac.values();
        // dB = A^T * dY
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = &go[i * p];
          for (std::size_t k = 0; k < n; ++k) {
            const double aik = av[i * n + k];
            if (aik == 0.0) continue;
            double* gbrow = &gb[k * p];
            for (std::size_t j = 0; j < p; ++j) gbrow[j] += aik * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(Tape& tape, const Tensor& a) {
  if (a.rank() != 2) {
    throw DimensionError("transpose expects a matrix, got " +
                         shape_str(a.shape()));
  }
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out = make_output(tape, {c, r}, {&a});
  {
    auto av = a.values();
    auto ov = out.mutable_values();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ov[j * r + i] = av[i * c + j];
  }
  if (wants_backward(tape, out)) {
    Tensor ac = a, oc = out;
    tape.record([ac, oc, r, c]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      auto ga = ac.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += go[j * r + i];
    });
  }
  return out;
}

// --- element-wise -----------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes differ, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = make_output(tape, a.shape(), {&a, &b});
  auto av = a.values(), bv = b.values();
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (wants_backward(tape, out)) {
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      if (ac.requires_grad()) {
        auto ga = ac.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (bc.requires_grad()) {
        auto gb = bc.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = make_output(tape, a.shape(), {&a, &b});
  auto av = a.values(), bv = b.values();
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (wants_backward(tape, out)) {
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      if (ac.requires_grad()) {
        auto ga = ac.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (bc.requires_grad()) {
        auto gb = bc.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = make_output(tape, a.shape(), {&a, &b});
  auto av = a.values(), bv = b.values();
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (wants_backward(tape, out)) {
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      auto av = ac.values(), bv = bc.values();
      if (ac.requires_grad()) {
        auto ga = ac.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
      }
      if (bc.requires_grad()) {
        auto gb = bc.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  Tensor out = make_output(tape, a.shape(), {&a});
  auto av = a.values();
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * factor;
  if (wants_backward(tape, out)) {
    Tensor ac = a, oc = out;
    tape.record([ac, oc, factor]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      auto ga = ac.grad_buffer();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * factor;
    });
  }
  return out;
}

Tensor add_rowwise(Tape& tape, const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2) {
    throw DimensionError("add_rowwise expects a matrix, got " +
                         shape_str(x.shape()));
  }
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (bias.size() != c || bias.rank() > 2 ||
      (bias.rank() == 2 && bias.shape()[0] != 1)) {
    throw DimensionError("add_rowwise: bias " + shape_str(bias.shape()) +
                         " does not match row width of " +
                         shape_str(x.shape()));
  }
  Tensor out = make_output(tape, {r, c}, {&x, &bias});
  auto xv = x.values(), bv = bias.values();
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = xv[i * c + j] + bv[j];
  if (wants_backward(tape, out)) {
    Tensor xc = x, bc = bias, oc = out;
    tape.record([xc, bc, oc, r, c]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      if (xc.requires_grad()) {
        auto gx = xc.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (bc.requires_grad()) {
        auto gb = bc.grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gb[j] += go[i * c + j];
      }
    });
  }
  return out;
}

Tensor tile_rows(Tape& tape, const Tensor& v, std::size_t rows) {
  if (v.rank() > 2 || (v.rank() == 2 && v.shape()[0] != 1)) {
    throw DimensionError("tile_rows expects a vector or 1-row matrix, got " +
                         shape_str(v.shape()));
  }
  const std::size_t c = v.size();
  Tensor out = make_output(tape, {rows, c}, {&v});
  auto vv = v.values();
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = vv[j];
  if (wants_backward(tape, out)) {
    Tensor vc = v, oc = out;
    tape.record([vc, oc, rows, c]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      auto gv = vc.grad_buffer();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < c; ++j) gv[j] += go[i * c + j];
    });
  }
  return out;
}

// --- concat -----------------------------------------------------------------

Tensor concat(Tape& tape, const Tensor& a, const Tensor& b, std::size_t axis) {
  if (a.rank() != b.rank()) {
    throw DimensionError("concat: rank mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  check_axis(a.shape(), axis, "concat");
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis && a.shape()[i] != b.shape()[i]) {
      throw DimensionError("concat: shapes " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()) +
                           " differ off the concat axis");
    }
  }
  Shape out_shape = a.shape();
  out_shape[axis] += b.shape()[axis];
  Tensor out = make_output(tape, out_shape, {&a, &b});

  const AxisView va = axis_view(a.shape(), axis);
  const AxisView vb = axis_view(b.shape(), axis);
  const std::size_t n_out = va.n + vb.n;
  auto av = a.values(), bv = b.values();
  auto ov = out.mutable_values();
  for (std::size_t o = 0; o < va.outer; ++o) {
    double* dst = &ov[o * n_out * va.inner];
    const double* sa = &av[o * va.n * va.inner];
    const double* sb = &bv[o * vb.n * vb.inner];
    std::copy(sa, sa + va.n * va.inner, dst);
    std::copy(sb, sb + vb.n * vb.inner, dst + va.n * va.inner);
  }
  if (wants_backward(tape, out)) {
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc, va, vb, n_out]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      if (ac.requires_grad()) {
        auto ga = ac.grad_buffer();
        for (std::size_t o = 0; o < va.outer; ++o) {
          const double* src = &go[o * n_out * va.inner];
          double* dst = &ga[o * va.n * va.inner];
          for (std::size_t i = 0; i < va.n * va.inner; ++i) dst[i] += src[i];
        }
      }
      if (bc.requires_grad()) {
        auto gb = bc.grad_buffer();
        for (std::size_t o = 0; o < vb.outer; ++o) {
          const double* src = &go[o * n_out * va.inner + va.n * va.inner];
          double* dst = &gb[o * vb.n * vb.inner];
          for (std::size_t i = 0; i < vb.n * vb.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

// --- softmax ----------------------------------------------------------------

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  check_axis(x.shape(), axis, "softmax");
  if (!all_finite(x)) {
    throw NumericError("softmax input contains non-finite values");
  }
  const AxisView v = axis_view(x.shape(), axis);
  Tensor out = make_output(tape, x.shape(), {&x});
  auto xv = x.values();
  auto ov = out.mutable_values();
  std::vector<double> exps(v.n);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.n * v.inner + in;
      double mx = xv[base];
      for (std::size_t i = 1; i < v.n; ++i)
        mx = std::max(mx, xv[base + i * v.inner]);
      for (std::size_t i = 0; i < v.n; ++i) {
        const double e = std::exp(xv[base + i * v.inner] - mx);
        ov[base + i * v.inner] = e;
        exps[i] = e;
      }
      // Accumulate the normalizer in ascending value order so the result
      // depends only on the multiset of slice entries, not their layout.
      std::sort(exps.begin(), exps.end());
      double z = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) z += exps[i];
      for (std::size_t i = 0; i < v.n; ++i) ov[base + i * v.inner] /= z;
    }
  }
  if (wants_backward(tape, out)) {
    Tensor xc = x, oc = out;
    tape.record([xc, oc, v]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      auto ov = oc.values();
      auto gx = xc.grad_buffer();
      // dx = y * (dy - sum(dy * y)) per slice
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
          const std::size_t base = o * v.n * v.inner + in;
          double dot = 0.0;
          for (std::size_t i = 0; i < v.n; ++i) {
            const std::size_t k = base + i * v.inner;
            dot += go[k] * ov[k];
          }
          for (std::size_t i = 0; i < v.n; ++i) {
            const std::size_t k = base + i * v.inner;
            gx[k] += ov[k] * (go[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

// --- activations ------------------------------------------------------------

Tensor activation(Tape& tape, const Tensor& x, Activation kind) {
  Tensor out = make_output(tape, x.shape(), {&x});
  auto xv = x.values();
  auto ov = out.mutable_values();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < ov.size(); ++i)
        ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(xv[i]);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = sigmoid_fn(xv[i]);
      break;
    case Activation::gated_tanh:
      // sigma(x) * tanh(x) on the shared input
      for (std::size_t i = 0; i < ov.size(); ++i)
        ov[i] = sigmoid_fn(xv[i]) * std::tanh(xv[i]);
      break;
  }
  if (wants_backward(tape, out)) {
    Tensor xc = x, oc = out;
    tape.record([xc, oc, kind]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      auto ov = oc.values();
      auto xv = xc.values();
      auto gx = xc.grad_buffer();
      switch (kind) {
        case Activation::relu:
          for (std::size_t i = 0; i < go.size(); ++i)
            if (xv[i] > 0.0) gx[i] += go[i];
          break;
        case Activation::tanh:
          for (std::size_t i = 0; i < go.size(); ++i)
            gx[i] += go[i] * (1.0 - ov[i] * ov[i]);
          break;
        case Activation::sigmoid:
          for (std::size_t i = 0; i < go.size(); ++i)
            gx[i] += go[i] * ov[i] * (1.0 - ov[i]);
          break;
        case Activation::gated_tanh:
          for (std::size_t i = 0; i < go.size(); ++i) {
            const double s = sigmoid_fn(xv[i]);
            const double t = std::tanh(xv[i]);
            gx[i] += go[i] * (s * (1.0 - s) * t + s * (1.0 - t * t));
          }
          break;
      }
    });
  }
  return out;
}

// --- l2_normalize -----------------------------------------------------------

Tensor l2_normalize(Tape& tape, const Tensor& x, std::size_t axis,
                    std::size_t* degenerate_count) {
  check_axis(x.shape(), axis, "l2_normalize");
  const AxisView v = axis_view(x.shape(), axis);
  Tensor out = make_output(tape, x.shape(), {&x});
  auto norms = std::make_shared<std::vector<double>>(v.outer * v.inner, 0.0);
  std::size_t degenerate = 0;
  auto xv = x.values();
  auto ov = out.mutable_values();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.n * v.inner + in;
      double sq = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) {
        const double e = xv[base + i * v.inner];
        sq += e * e;
      }
      const double norm = std::sqrt(sq);
      (*norms)[o * v.inner + in] = norm;
      if (norm < kDegenerateNorm) {
        ++degenerate;  // pass through unchanged
        for (std::size_t i = 0; i < v.n; ++i)
          ov[base + i * v.inner] = xv[base + i * v.inner];
      } else {
        for (std::size_t i = 0; i < v.n; ++i)
          ov[base + i * v.inner] = xv[base + i * v.inner] / norm;
      }
    }
  }
  if (degenerate_count) *degenerate_count = degenerate;
  if (wants_backward(tape, out)) {
    Tensor xc = x, oc = out;
    tape.record([xc, oc, v, norms]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      auto ov = oc.values();
      auto gx = xc.grad_buffer();
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
          const std::size_t base = o * v.n * v.inner + in;
          const double norm = (*norms)[o * v.inner + in];
          if (norm < kDegenerateNorm) {
            for (std::size_t i = 0; i < v.n; ++i) {
              const std::size_t k = base + i * v.inner;
              gx[k] += go[k];
            }
            continue;
          }
          // dx = (dy - y * <y, dy>) / norm
          double dot = 0.0;
          for (std::size_t i = 0; i < v.n; ++i) {
            const std::size_t k = base + i * v.inner;
            dot += go[k] * ov[k];
          }
          for (std::size_t i = 0; i < v.n; ++i) {
            const std::size_t k = base + i * v.inner;
            gx[k] += (go[k] - ov[k] * dot) / norm;
          }
        }
      }
    });
  }
  return out;
}

// --- cross entropy ----------------------------------------------------------

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::size_t target) {
  if (logits.rank() != 1) {
    throw DimensionError("cross_entropy expects a logits vector, got " +
                         shape_str(logits.shape()));
  }
  const std::size_t c = logits.size();
  if (target >= c) {
    throw IndexError("cross_entropy target " + std::to_string(target) +
                     " out of range for " + std::to_string(c) + " classes");
  }
  auto lv = logits.values();
  double mx = lv[0];
  for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, lv[i]);
  auto probs = std::make_shared<std::vector<double>>(c, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    const double e = std::exp(lv[i] - mx);
    (*probs)[i] = e;
    z += e;
  }
  for (std::size_t i = 0; i < c; ++i) (*probs)[i] /= z;
  const double loss = std::log(z) - (lv[target] - mx);

  Tensor out = make_output(tape, {1}, {&logits});
  out.mutable_values()[0] = loss;
  if (wants_backward(tape, out)) {
    Tensor lc = logits, oc = out;
    tape.record([lc, oc, probs, target]() mutable {
      if (!oc.has_grad()) return;
      const double g = oc.grad()[0];
      auto gl = lc.grad_buffer();
      for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g * (*probs)[i];
      gl[target] -= g;
    });
  }
  return out;
}

// --- reductions / reshape ---------------------------------------------------

namespace {

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  if (out.empty()) out.push_back(1);  // reducing a vector yields a scalar
  return out;
}

}  // namespace

Tensor sum(Tape& tape, const Tensor& x, std::size_t axis) {
  check_axis(x.shape(), axis, "sum");
  const AxisView v = axis_view(x.shape(), axis);
  Tensor out = make_output(tape, drop_axis(x.shape(), axis), {&x});
  auto xv = x.values();
  auto ov = out.mutable_values();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      double acc = 0.0;
      const std::size_t base = o * v.n * v.inner + in;
      for (std::size_t i = 0; i < v.n; ++i) acc += xv[base + i * v.inner];
      ov[o * v.inner + in] = acc;
    }
  }
  if (wants_backward(tape, out)) {
    Tensor xc = x, oc = out;
    tape.record([xc, oc, v]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      auto gx = xc.grad_buffer();
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t in = 0; in < v.inner; ++in) {
          const double g = go[o * v.inner + in];
          const std::size_t base = o * v.n * v.inner + in;
          for (std::size_t i = 0; i < v.n; ++i) gx[base + i * v.inner] += g;
        }
    });
  }
  return out;
}

Tensor mean(Tape& tape, const Tensor& x, std::size_t axis) {
  check_axis(x.shape(), axis, "mean");
  const double inv = 1.0 / static_cast<double>(x.shape()[axis]);
  return scale(tape, sum(tape, x, axis), inv);
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape from " + shape_str(x.shape()) + " to " +
                         shape_str(shape) + " changes element count");
  }
  Tensor out = make_output(tape, std::move(shape), {&x});
  auto xv = x.values();
  auto ov = out.mutable_values();
  std::copy(xv.begin(), xv.end(), ov.begin());
  if (wants_backward(tape, out)) {
    Tensor xc = x, oc = out;
    tape.record([xc, oc]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      auto gx = xc.grad_buffer();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

Tensor rows(Tape& tape, const Tensor& x, const std::vector<std::size_t>& idx) {
  if (x.rank() != 2) {
    throw DimensionError("rows expects a matrix, got " + shape_str(x.shape()));
  }
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  for (std::size_t i : idx) {
    if (i >= r) {
      throw IndexError("row index " + std::to_string(i) +
                       " out of range for " + shape_str(x.shape()));
    }
  }
  Tensor out = make_output(tape, {idx.size(), c}, {&x});
  auto xv = x.values();
  auto ov = out.mutable_values();
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy(&xv[idx[k] * c], &xv[idx[k] * c] + c, &ov[k * c]);
  if (wants_backward(tape, out)) {
    Tensor xc = x, oc = out;
    auto ids = idx;
    tape.record([xc, oc, ids, c]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      auto gx = xc.grad_buffer();
      for (std::size_t k = 0; k < ids.size(); ++k) {
        double* dst = &gx[ids[k] * c];
        const double* src = &go[k * c];
        for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor mean_rows_canonical(Tape& tape, const Tensor& x, std::size_t n_valid) {
  if (x.rank() != 2) {
    throw DimensionError("mean_rows_canonical expects a matrix, got " +
                         shape_str(x.shape()));
  }
  const std::size_t c = x.shape()[1];
  if (n_valid == 0 || n_valid > x.shape()[0]) {
    throw ContractError("mean_rows_canonical: n_valid " +
                        std::to_string(n_valid) + " outside 1.." +
                        std::to_string(x.shape()[0]));
  }
  auto xv = x.values();
  std::vector<std::size_t> order(n_valid);
  for (std::size_t i = 0; i < n_valid; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(&xv[a * c], &xv[a * c] + c,
                                        &xv[b * c], &xv[b * c] + c);
  });
  Tensor out = make_output(tape, {c}, {&x});
  auto ov = out.mutable_values();
  for (std::size_t k : order)
    for (std::size_t j = 0; j < c; ++j) ov[j] += xv[k * c + j];
  const double inv = 1.0 / static_cast<double>(n_valid);
  for (std::size_t j = 0; j < c; ++j) ov[j] *= inv;
  if (wants_backward(tape, out)) {
    Tensor xc = x, oc = out;
    tape.record([xc, oc, n_valid, c, inv]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      auto gx = xc.grad_buffer();
      for (std::size_t i = 0; i < n_valid; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += go[j] * inv;
    });
  }
  return out;
}

Tensor sum_rows_canonical(Tape& tape, const Tensor& x) {
  if (x.rank() != 2) {
    throw DimensionError("sum_rows_canonical expects a matrix, got " +
                         shape_str(x.shape()));
  }
  const std::size_t r = x.shape()[0];
  const std::size_t c = x.shape()[1];
  auto xv = x.values();
  std::vector<std::size_t> order(r);
  for (std::size_t i = 0; i < r; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(&xv[a * c], &xv[a * c] + c,
                                        &xv[b * c], &xv[b * c] + c);
  });
  Tensor out = make_output(tape, {c}, {&x});
  auto ov = out.mutable_values();
  for (std::size_t k : order)
    for (std::size_t j = 0; j < c; ++j) ov[j] += xv[k * c + j];
  if (wants_backward(tape, out)) {
    Tensor xc = x, oc = out;
    tape.record([xc, oc, r, c]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      auto gx = xc.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += go[j];
    });
  }
  return out;
}

Tensor attend_rows_canonical(Tape& tape, const Tensor& weights,
                             const Tensor& v) {
  if (weights.rank() != 2 || v.rank() != 2) {
    throw DimensionError("attend_rows_canonical expects matrices, got " +
                         shape_str(weights.shape()) + " and " +
                         shape_str(v.shape()));
  }
  if (weights.shape()[0] != v.shape()[0]) {
    throw DimensionError("attend_rows_canonical: row counts differ, " +
                         shape_str(weights.shape()) + " vs " +
                         shape_str(v.shape()));
  }
  const std::size_t k = v.shape()[0];
  const std::size_t h = weights.shape()[1];
  const std::size_t c = v.shape()[1];
  auto wv = weights.values();
  auto vv = v.values();
  // Order the accumulation over rows by joint (v row, weights row) content;
  // rows permuted in both inputs together land in the same slot of the sort,
  // so the sums round identically.
  std::vector<std::size_t> order(k);
  for (std::size_t i = 0; i < k; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (std::lexicographical_compare(&vv[a * c], &vv[a * c] + c, &vv[b * c],
                                     &vv[b * c] + c))
      return true;
    if (std::lexicographical_compare(&vv[b * c], &vv[b * c] + c, &vv[a * c],
                                     &vv[a * c] + c))
      return false;
    return std::lexicographical_compare(&wv[a * h], &wv[a * h] + h,
                                        &wv[b * h], &wv[b * h] + h);
  });
  Tensor out = make_output(tape, {h, c}, {&weights, &v});
  auto ov = out.mutable_values();
  for (std::size_t i : order)
    for (std::size_t g = 0; g < h; ++g) {
      const double w = wv[i * h + g];
      if (w == 0.0) continue;
      for (std::size_t j = 0; j < c; ++j) ov[g * c + j] += w * vv[i * c + j];
    }
  if (wants_backward(tape, out)) {
    Tensor wc = weights, vc = v, oc = out;
    tape.record([wc, vc, oc, k, h, c]() mutable {
      if (!oc.has_grad()) return;
      auto go = oc.grad();
      auto wv = wc.values();
      auto vv = vc.values();
      if (wc.requires_grad()) {
        auto gw = wc.grad_buffer();
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t g = 0; g < h; ++g) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j)
              acc += go[g * c + j] * vv[i * c + j];
            gw[i * h + g] += acc;
          }
      }
      if (vc.requires_grad()) {
        auto gv = vc.grad_buffer();
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t g = 0; g < h; ++g) {
            const double w = wv[i * h + g];
            if (w == 0.0) continue;
            for (std::size_t j = 0; j < c; ++j)
              gv[i * c + j] += w * go[g * c + j];
          }
      }
    });
  }
  return out;
}

// --- helpers ----------------------------------------------------------------

std::size_t argmax(const Tensor& x) {
  auto v = x.values();
  if (v.empty()) throw ContractError("argmax of empty tensor");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

bool all_finite(const Tensor& x) {
  for (double v : x.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace vqa
