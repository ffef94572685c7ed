#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vqa/rng.hpp"
#include "vqa/tensor.hpp"

namespace vqa {

// One optimizable tensor plus its stepping policy. Frozen tables are never
// turned into Parameters; they simply stay out of the optimizer's reach.
struct Parameter {
  Tensor tensor;
  std::string name;
  // multiplies the scheduled learning rate; fine-tuned ingested encoders run
  // at 0.1 of the base rate
  double lr_scale = 1.0;
  // row whose values and gradients stay pinned (the PAD embedding), or -1
  long frozen_row = -1;
};

using ParameterList = std::vector<Parameter>;

// Total trainable scalar count. Frozen tables are excluded by construction
// because they are never registered as Parameters.
inline std::size_t count_parameters(const ParameterList& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.size();
  return total;
}

// Fresh weight drawn uniformly in +-1/sqrt(fan_in), requires_grad set.
inline Tensor init_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.mutable_values()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace vqa
