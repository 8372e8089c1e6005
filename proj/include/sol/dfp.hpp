// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Fusion engine: partitions a device graph into execution units, lowers fused
// groups to single loop nests processed depth-first (each output element's
// full chain computes before the next), interprets them, and renders flavored
// source text.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "sol/kernel_ir.hpp"
#include "sol/model.hpp"
#include "sol/passes.hpp"

namespace sol::dfp {

struct ExecUnit {
    enum class Kind : uint8_t { DfpGroup, DnnNode };
    Kind kind = Kind::DfpGroup;
    std::vector<std::string> node_ids;  // members in topological order
    std::string output;                 // the unit's single output tensor name
    std::vector<std::string> inputs;    // external activations, first-use order
    std::vector<std::string> params;    // parameter names, first-use order
};

// Heavy layers dispatched through kernel providers. Grouped convolutions with
// as many groups as channels reduce to weighted pooling and stay in the
// fusion engine, as do their gradients.
bool is_heavy(const LayerNode& n);
bool is_depthwise_conv(const LayerNode& n, const TensorMeta& input_meta);

// Splits the graph into maximal single-output fused groups plus one unit per
// heavy node, in topological order.
std::vector<ExecUnit> partition(const DeviceGraph& dg);

// Lowers one fused group to a loop nest. `overrides` substitutes planned
// layouts for unit boundary tensors (absent names use graph metas). Throws
// UnsupportedInGroupError if a non-depthwise heavy node is in the group.
KernelIR lower_group(const ModelGraph& g, const ExecUnit& unit, FlavorId flavor,
                     const std::map<std::string, TensorMeta>& overrides = {},
                     const std::string& entry = "kernel");

// f32 evaluation of a kernel; annotations affect scheduling text, not
// semantics, so every flavor of a group computes identical results.
struct BufferRef {
    float* data = nullptr;
    int64_t len = 0;
};
void interpret(const KernelIR& k, const std::vector<BufferRef>& inputs, BufferRef output);

// Convenience wrapper: binds tensors by kernel input names (relayouting to
// binding metas when needed) and returns the output tensor.
Tensor run_kernel(const KernelIR& k, const TensorMap& activations,
                  const std::map<std::string, Tensor>& params);

struct SourceText {
    FlavorId flavor;
    std::string text;
    std::string entry;
};

SourceText emit_source(const KernelIR& k, FlavorId flavor);

}  // namespace sol::dfp
