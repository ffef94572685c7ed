#ifndef VQA_TENSOR_HPP
#define VQA_TENSOR_HPP

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vqa/error.hpp"

namespace vqa {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

// Dense 64-bit-float tensor, row-major. Tensor is a shared handle: copies
// alias the same storage, which is what lets backward closures and optimizer
// state refer to one parameter buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<const double> values() const;
  std::span<double> mutable_values();

  bool requires_grad() const;
  void set_requires_grad(bool v);

  bool has_grad() const;
  std::span<const double> grad() const;       // throws ContractError if absent
  std::span<double> grad_buffer();            // allocates zeros on first use
  void zero_grad();                           // zeroes if allocated
  void drop_grad();

  // Element access for tests and loaders.
  double operator()(std::size_t i) const;
  double operator()(std::size_t i, std::size_t j) const;
  double& at(std::size_t i);
  double& at(std::size_t i, std::size_t j);

  // Identity of the underlying storage (aliasing check).
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
  };

  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  Node& node() const;

  std::shared_ptr<Node> node_;
};

// Ordered record of executed operations. Replaying it in reverse propagates
// gradients from a scalar loss to every requires_grad leaf exactly once.
// A tape is confined to one logical thread; independent experiments use
// fully isolated tapes.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  bool consumed() const { return consumed_; }
  std::size_t op_count() const { return steps_.size(); }

  void record(std::function<void()> backward_step);

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. The loss must
  // be a scalar; calling backward twice on one tape is a contract error.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> steps_;
  bool recording_;
  bool consumed_ = false;
};

enum class Activation { relu, tanh, sigmoid, gated_tanh };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

// --- Recorded operations -------------------------------------------------
//
// Every op evaluates eagerly, records its backward step on the tape when any
// input requires a gradient, and uses fixed sequential reduction order so a
// given build is bit-deterministic.

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& a);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);  // Hadamard
Tensor scale(Tape& tape, const Tensor& a, double factor);

// (rows x c) plus a length-c vector (or 1 x c matrix) added to every row.
Tensor add_rowwise(Tape& tape, const Tensor& x, const Tensor& bias);

// Length-c vector (or 1 x c matrix) tiled into rows x c.
Tensor tile_rows(Tape& tape, const Tensor& v, std::size_t rows);

Tensor concat(Tape& tape, const Tensor& a, const Tensor& b, std::size_t axis);

// exp-normalized with max subtraction; each slice along `axis` sums to 1.
// The slice normalizer accumulates the exponentials in ascending value order,
// so slices holding the same multiset of entries normalize bit-identically
// regardless of entry order. Non-finite input is a NumericError.
Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis);

Tensor activation(Tape& tape, const Tensor& x, Activation kind);

// Slices along `axis` scaled to unit Euclidean norm. Slices with norm below
// 1e-12 pass through unchanged; their count is reported via
// `degenerate_count` when given.
Tensor l2_normalize(Tape& tape, const Tensor& x, std::size_t axis,
                    std::size_t* degenerate_count = nullptr);

// -log softmax(logits)[target] for a 1-D logits vector.
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::size_t target);

Tensor sum(Tape& tape, const Tensor& x, std::size_t axis);
Tensor mean(Tape& tape, const Tensor& x, std::size_t axis);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);

// Gather of whole rows from a 2-D tensor; backward scatter-adds, so it
// doubles as embedding lookup.
Tensor rows(Tape& tape, const Tensor& x, const std::vector<std::size_t>& idx);

// Mean of the first n_valid rows, accumulated in an order determined by row
// content rather than row position, so permuting rows never changes the
// result even in the last bit.
Tensor mean_rows_canonical(Tape& tape, const Tensor& x, std::size_t n_valid);

// Column-wise sum over every row of a 2-D tensor, accumulated in content
// order like mean_rows_canonical; result has shape {cols}.
Tensor sum_rows_canonical(Tape& tape, const Tensor& x);

// transpose(weights) * v for weights (k x h) and v (k x c), with the sum over
// k ordered by the joint (v row, weights row) content. Permuting the rows of
// both inputs together therefore reproduces the output bit for bit.
Tensor attend_rows_canonical(Tape& tape, const Tensor& weights, const Tensor& v);

// --- Non-recorded helpers ------------------------------------------------

std::size_t argmax(const Tensor& x);
bool all_finite(const Tensor& x);

}  // namespace vqa

#endif  // VQA_TENSOR_HPP
