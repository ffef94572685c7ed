#pragma once

// Finite-difference gradient oracle for the reverse-mode core. Central
// differences with step 1e-6; agreement required to |a - b| <=
// tol * max(1, |a|, |b|) with tol = 1e-5. Callers draw inputs from [-2, 2]
// and keep ReLU inputs away from the kink.

#include <doctest.h>

#include <functional>
#include <vector>

#include "vqa/rng.hpp"
#include "vqa/tensor.hpp"

namespace gradcheck_detail {

inline double eval_loss(
    const std::function<vqa::Tensor(vqa::Tape&, std::vector<vqa::Tensor>&)>& f,
    std::vector<vqa::Tensor>& inputs) {
  vqa::Tape silent(false);
  vqa::Tensor loss = f(silent, inputs);
  REQUIRE(loss.size() == 1);
  return loss(0);
}

}  // namespace gradcheck_detail

// Checks d loss / d inputs[i] for every element of every input against
// central finite differences. `f` must build a scalar loss through recorded
// ops only.
inline void check_gradients(
    std::vector<vqa::Tensor> inputs,
    const std::function<vqa::Tensor(vqa::Tape&, std::vector<vqa::Tensor>&)>& f,
    double step = 1e-6, double tol = 1e-5) {
  for (auto& in : inputs) in.set_requires_grad(true);

  vqa::Tape tape;
  vqa::Tensor loss = f(tape, inputs);
  REQUIRE(loss.size() == 1);
  tape.backward(loss);

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> analytic(inputs[i].grad().begin(),
                                 inputs[i].grad().end());
    auto vals = inputs[i].mutable_values();
    for (std::size_t k = 0; k < vals.size(); ++k) {
      const double keep = vals[k];
      vals[k] = keep + step;
      const double up = gradcheck_detail::eval_loss(f, inputs);
      vals[k] = keep - step;
      const double down = gradcheck_detail::eval_loss(f, inputs);
      vals[k] = keep;
      const double numeric = (up - down) / (2.0 * step);
      const double mag =
          std::max({1.0, std::fabs(analytic[k]), std::fabs(numeric)});
      INFO("input ", i, " element ", k, " analytic ", analytic[k],
           " numeric ", numeric);
      CHECK(std::fabs(analytic[k] - numeric) <= tol * mag);
    }
  }
}

// Random tensor with entries in [-2, 2]; the shared helper keeps gradcheck
// inputs reproducible across runs.
inline vqa::Tensor random_tensor(vqa::Shape shape, std::uint64_t seed) {
  vqa::Rng rng(seed);
  vqa::Tensor t = vqa::Tensor::zeros(shape);
  for (auto& v : t.mutable_values()) v = rng.uniform(-2.0, 2.0);
  return t;
}
