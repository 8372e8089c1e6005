// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Naive per-layer interpreter. Direct unfused loops, f64 accumulation
// regardless of tensor dtype, layout-agnostic through tagged accessors.
// This is the correctness oracle for kernels, passes and providers.

#pragma once

#include <map>
#include <string>

#include "sol/model.hpp"

namespace sol {

// Computes every node output in topological order. `inputs` must cover all
// graph inputs; shapes must be inferred. Pure and reentrant.
TensorMap run_reference(const ModelGraph& g, const TensorMap& inputs);

// Same, returning only the declared graph outputs.
TensorMap reference_forward(const ModelGraph& g, const TensorMap& inputs);

// Single-node evaluation on resolved input tensors (used by the interpreter
// tests and the backward oracle).
Tensor reference_node(const LayerNode& node, const std::vector<const Tensor*>& inputs,
                      const std::vector<const Tensor*>& params);

}  // namespace sol
