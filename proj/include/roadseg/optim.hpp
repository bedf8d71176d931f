#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "roadseg/autograd.hpp"

namespace roadseg::ag {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter moment estimates. Moments are allocated lazily on the first
/// step so they always match the parameter shapes they were built for.
struct AdamState {
  AdamConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  AdamState() = default;
  explicit AdamState(AdamConfig c) : config(c) {}
};

/// One bias-corrected Adam update of every parameter from its accumulated grad.
void adam_step(std::span<Parameter* const> params, AdamState& state);

void zero_grad(std::span<Parameter* const> params);

}  // namespace roadseg::ag
