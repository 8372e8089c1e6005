// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over the graph IR. The backward graph reuses
// the forward node type (gradient ops are ordinary OpKinds), so partitioning,
// lowering and provider dispatch apply to training unchanged, with
// independently selectable backward implementations for heavy layers.

#pragma once

#include "sol/model.hpp"

namespace sol::autodiff {

struct BackwardGraph {
    // Gradient nodes only; graph_inputs are the saved forward tensors.
    ModelGraph graph;
    // parameter name -> node id producing its gradient
    std::vector<std::pair<std::string, std::string>> param_grads;
    // forward tensor names the backward pass needs kept alive
    std::vector<std::string> saved;
};

// Differentiates a shape-inferred graph ending in CrossEntropyLoss. Softmax
// feeding the loss directly folds into the fused (y - t)/B backward. Throws
// NonDifferentiableGraphError when there is no loss to differentiate.
BackwardGraph build_backward(const ModelGraph& g);

// Forward + backward in one graph: outputs are [loss, param gradients...].
// BatchNorm nodes switch to batch statistics. `grad_node_of` maps parameter
// names to their gradient outputs.
struct TrainingGraph {
    ModelGraph graph;
    std::string loss;
    std::vector<std::pair<std::string, std::string>> param_grads;
};
TrainingGraph build_training_graph(const ModelGraph& g);

// Central-difference verification in f64 over every parameter element
// (intended for models up to ~10k parameters). Returns the max over
// parameters of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8);
// 0.0 for graphs without parameters.
double grad_check(const ModelGraph& g, double eps = 1e-3, uint64_t seed = 17);

struct OptimizerState {
    float lr = 0.01f;
};

// theta <- theta - lr * grad, elementwise in the parameter dtype. Pure.
TensorMap sgd_step(const OptimizerState& state, const TensorMap& params, const TensorMap& grads);

// Momentum update of BatchNorm running statistics from batch activations
// (running <- (1-m)*running + m*batch_stat, unbiased variance). Applies to
// training-mode BatchNorm nodes given the forward activation environment.
void update_bn_running_stats(const ModelGraph& g, TensorMap& params, const TensorMap& env);

}  // namespace sol::autodiff
