// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Graph intermediate representation: layer nodes, the model DAG, validation
// and shape inference. Backward operators share the node type so the whole
// compilation pipeline (partitioning, lowering, dispatch) applies to training
// graphs unchanged.

#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sol/tensor.hpp"

namespace sol {

using TensorMap = std::map<std::string, Tensor>;

enum class OpKind : uint8_t {
    // user-facing ops (accepted in model files)
    Conv2d,
    Linear,
    ReLU,
    MaxPool2d,
    AvgPool2d,
    BatchNorm2d,
    Add,
    Flatten,
    GlobalAvgPool,
    Softmax,
    CrossEntropyLoss,
    Copy,
    // gradient ops (built by autodiff, never parsed from model files)
    ReluBack,
    MaxPool2dBack,
    AvgPool2dBack,
    GlobalAvgPoolBack,
    FlattenBack,
    SoftmaxBack,
    SoftmaxCeBack,
    CeBack,
    BatchNormBackX,
    BatchNormBackGamma,
    BatchNormBackBeta,
    Conv2dBackX,
    Conv2dBackW,
    Conv2dBackB,
    LinearBackX,
    LinearBackW,
    LinearBackB,
    SgdUpdate,
};

const char* op_name(OpKind op);
std::optional<OpKind> op_from_name(const std::string& name, bool user_facing_only = true);
bool op_is_backward(OpKind op);

// One record covers all ops; each op reads the fields it cares about.
struct Attrs {
    int64_t out_channels = 0;  // Conv2d
    int64_t out_features = 0;  // Linear
    int64_t kh = 0, kw = 0;    // Conv2d / pools
    int64_t sh = 1, sw = 1;
    int64_t ph = 0, pw = 0;
    int64_t groups = 1;                                        // Conv2d
    bool has_bias = true;                                      // Conv2d / Linear
    float min_init = -std::numeric_limits<float>::infinity();  // MaxPool2d
    bool count_padding = false;                                // AvgPool2d
    float eps = 1e-5f;                                         // BatchNorm2d
    float momentum = 0.1f;
    bool training = false;  // BatchNorm2d statistics mode
    float lr = 0.0f;        // SgdUpdate

    bool operator==(const Attrs&) const = default;
};

struct LayerNode {
    std::string id;
    OpKind op = OpKind::ReLU;
    Attrs attrs;
    std::vector<std::string> inputs;  // node ids or graph input names
    std::vector<std::string> params;  // names into ModelGraph::params

    // Filled by infer_shapes.
    std::optional<TensorMeta> out_meta;
    // Shape context some backward ops need (e.g. the forward input meta).
    std::optional<TensorMeta> saved_meta;
};

struct GraphInput {
    std::string name;
    TensorMeta meta;  // batch extent may be symbolic (0)
};

struct ModelGraph {
    std::vector<GraphInput> graph_inputs;
    std::vector<LayerNode> nodes;  // topologically ordered
    std::vector<std::string> outputs;
    std::map<std::string, Tensor> params;

    const LayerNode* find_node(const std::string& id) const;
    LayerNode* find_node(const std::string& id);
    const GraphInput* find_input(const std::string& name) const;
    // Meta of any named tensor (graph input or node output); requires shapes.
    const TensorMeta& meta_of(const std::string& name) const;
    // node id -> ids of nodes consuming its output
    std::map<std::string, std::vector<std::string>> consumers() const;

    // Checks referential integrity, acyclicity and op-specific invariants,
    // re-sorting nodes topologically. Throws MalformedModelError.
    void validate_and_sort();

    // Structural fingerprint covering ops/attrs/shapes/edges but not node ids.
    uint64_t structural_hash() const;
};

// Substitutes the symbolic batch extent and annotates every node with its
// output TensorMeta. Pure; returns the annotated copy.
ModelGraph infer_shapes(const ModelGraph& g, int64_t batch);

// Shape rule for a single node given resolved input metas (exposed for the
// backward builder and tests).
TensorMeta infer_node_shape(const LayerNode& node, const std::vector<TensorMeta>& input_metas);

}  // namespace sol
