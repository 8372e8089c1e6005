// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Device-independent graph rewrites and per-device cloning. All rewrites are
// exact-math: pipeline output is oracle-equal to its input.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sol/model.hpp"

namespace sol {

enum class DeviceKind : uint8_t { Host, SimAccel };

const char* device_kind_name(DeviceKind k);

// SIMD lowering style applied to generated kernels.
struct FlavorId {
    enum class Kind : uint8_t { Scalar, ShortVector, LongVector, WarpGroup };
    Kind kind = Kind::Scalar;
    int width = 8;           // ShortVector lanes
    int max_len = 256;       // LongVector vector length
    int block_threads = 128; // WarpGroup block size
    bool simd_groups = false;

    bool operator==(const FlavorId&) const = default;
    std::string str() const;
};

FlavorId flavor_scalar();
FlavorId flavor_shortvec(int width = 8);
FlavorId flavor_longvec(int max_len = 256);
FlavorId flavor_warp(int block_threads = 128, bool simd_groups = false);
FlavorId flavor_from_name(const std::string& name);

// A named matcher+action; actions preserve the computed function.
struct RewriteRule {
    std::string name;
    // Returns true if it mutated the graph (one application).
    std::function<bool(ModelGraph&)> apply;
};

// Removes every ReLU directly adjacent (either side) to a MaxPool2d and
// raises the pool's min_init to 0.
ModelGraph fuse_relu_pool(const ModelGraph& g);

// Swaps element-wise ops with shape-only ops when that moves a ReLU next to
// a MaxPool2d, enabling fuse_relu_pool. No swap without a fusion payoff.
ModelGraph reorder_commuting(const ModelGraph& g);

// reorder_commuting then fuse_relu_pool, repeated to fixpoint.
ModelGraph run_pipeline(const ModelGraph& g);

// Per-device deep clone carrying device kind, flavor and annotation slots
// later modules fill in.
struct DeviceGraph {
    ModelGraph base;
    DeviceKind device_kind = DeviceKind::Host;
    FlavorId flavor;
    // node id -> activation layout chosen by the layout planner
    std::map<std::string, ActLayout> unit_layouts;
};

DeviceGraph clone_for_device(const ModelGraph& g, DeviceKind kind, FlavorId flavor);

}  // namespace sol
