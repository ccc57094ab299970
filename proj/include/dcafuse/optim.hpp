// Copyright (c) 2026 The dcafuse Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "dcafuse/tensor.hpp"

namespace dcafuse {

struct AdamState {
  std::vector<Tensor> m, v;
  std::size_t step = 0;
};

struct SgdState {
  std::vector<Tensor> velocity;
};

namespace detail {

inline void check_param_grad_lists(std::span<Tensor* const> params, std::span<const Tensor* const> grads) {
  if (params.size() != grads.size()) throw DimensionError("optimizer: parameter and gradient lists differ in length");
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->require_same_shape(*grads[i], "optimizer gradient");
}

inline void ensure_slots(std::vector<Tensor>& slots, std::span<Tensor* const> params) {
  if (slots.empty()) {
    for (const Tensor* p : params) slots.push_back(p->zeros_like());
  }
  if (slots.size() != params.size()) throw DimensionError("optimizer: state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) slots[i].require_same_shape(*params[i], "optimizer state");
}

}  // namespace detail

/// AdamW: decoupled weight decay, bias-corrected first and second moments.
inline void adamw_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state, Real lr,
                       Real weight_decay, Real beta1 = 0.9, Real beta2 = 0.999, Real eps = 1e-8) {
  detail::check_param_grad_lists(params, grads);
  detail::ensure_slots(state.m, params);
  detail::ensure_slots(state.v, params);
  ++state.step;
  const Real bc1 = 1.0 - std::pow(beta1, static_cast<Real>(state.step));
  const Real bc2 = 1.0 - std::pow(beta2, static_cast<Real>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto p = params[t]->data();
    auto g = grads[t]->data();
    auto m = state.m[t].data();
    auto v = state.v[t].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      p[i] -= lr * weight_decay * p[i];
      p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
}

/// Heavy-ball SGD with L2 weight decay folded into the gradient.
inline void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, SgdState& state, Real lr,
                     Real momentum, Real weight_decay) {
  detail::check_param_grad_lists(params, grads);
  detail::ensure_slots(state.velocity, params);
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto p = params[t]->data();
    auto g = grads[t]->data();
    auto vel = state.velocity[t].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      vel[i] = momentum * vel[i] + g[i] + weight_decay * p[i];
      p[i] -= lr * vel[i];
    }
  }
}

}  // namespace dcafuse
