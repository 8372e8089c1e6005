// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0

#include "sol/passes.hpp"

#include <algorithm>

#include "sol/errors.hpp"

namespace sol {

const char* device_kind_name(DeviceKind k) { return k == DeviceKind::Host ? "host" : "sim"; }

std::string FlavorId::str() const {
    switch (kind) {
        case Kind::Scalar: return "scalar";
        case Kind::ShortVector: return "shortvec";
        case Kind::LongVector: return "longvec";
        case Kind::WarpGroup: return "warp";
    }
    return "?";
}

FlavorId flavor_scalar() { return FlavorId{}; }

FlavorId flavor_shortvec(int width) {
    FlavorId f;
    f.kind = FlavorId::Kind::ShortVector;
    f.width = width;
    return f;
}

FlavorId flavor_longvec(int max_len) {
    FlavorId f;
    f.kind = FlavorId::Kind::LongVector;
    f.max_len = max_len;
    return f;
}

FlavorId flavor_warp(int block_threads, bool simd_groups) {
    FlavorId f;
    f.kind = FlavorId::Kind::WarpGroup;
    f.block_threads = block_threads;
    f.simd_groups = simd_groups;
    return f;
}

FlavorId flavor_from_name(const std::string& name) {
    if (name == "scalar") return flavor_scalar();
    if (name == "shortvec") return flavor_shortvec();
    if (name == "longvec") return flavor_longvec();
    if (name == "warp") return flavor_warp();
    throw UnsupportedOpError("unknown flavor '" + name + "'");
}

namespace {

bool is_output(const ModelGraph& g, const std::string& id) {
    return std::find(g.outputs.begin(), g.outputs.end(), id) != g.outputs.end();
}

// Drops `victim` from the graph, rewiring its consumers to `replacement`.
void remove_node(ModelGraph& g, const std::string& victim, const std::string& replacement) {
    for (auto& n : g.nodes)
        for (auto& in : n.inputs)
            if (in == victim) in = replacement;
    for (auto& o : g.outputs)
        if (o == victim) o = replacement;
    std::erase_if(g.nodes, [&](const LayerNode& n) { return n.id == victim; });
}

bool shape_only(OpKind op) { return op == OpKind::Flatten; }
bool elementwise_unary(OpKind op) { return op == OpKind::ReLU; }

// One fusion step; returns true if it fired.
bool fuse_one(ModelGraph& g) {
    auto cons = g.consumers();
    for (const auto& n : g.nodes) {
        if (n.op == OpKind::ReLU) {
            // ReLU followed by MaxPool2d, pool being the only consumer.
            auto it = cons.find(n.id);
            if (it == cons.end() || it->second.size() != 1 || is_output(g, n.id)) continue;
            LayerNode* pool = g.find_node(it->second[0]);
            if (!pool || pool->op != OpKind::MaxPool2d) continue;
            pool->attrs.min_init = std::max(pool->attrs.min_init, 0.0f);
            remove_node(g, n.id, n.inputs[0]);
            return true;
        }
        if (n.op == OpKind::MaxPool2d) {
            // MaxPool2d followed by ReLU; relu must be the pool's only consumer.
            auto it = cons.find(n.id);
            if (it == cons.end() || it->second.size() != 1 || is_output(g, n.id)) continue;
            LayerNode* relu = g.find_node(it->second[0]);
            if (!relu || relu->op != OpKind::ReLU) continue;
            std::string relu_id = relu->id;
            g.find_node(n.id)->attrs.min_init = std::max(n.attrs.min_init, 0.0f);
            remove_node(g, relu_id, n.id);
            return true;
        }
    }
    return false;
}

// One enabling swap; returns true if it fired. Pattern: a MaxPool2d reaches a
// ReLU through a chain of single-consumer shape-only nodes; the ReLU commutes
// with the shape-only node directly before it, shrinking the gap.
bool reorder_one(ModelGraph& g) {
    auto cons = g.consumers();
    auto sole_consumer = [&](const std::string& id) -> LayerNode* {
        auto it = cons.find(id);
        if (it == cons.end() || it->second.size() != 1) return nullptr;
        return g.find_node(it->second[0]);
    };
    for (const auto& n : g.nodes) {
        if (n.op != OpKind::MaxPool2d || is_output(g, n.id)) continue;
        // walk down through shape-only nodes
        std::vector<std::string> chain;
        const LayerNode* cur = &n;
        while (true) {
            LayerNode* next = sole_consumer(cur->id);
            if (!next) break;
            if (elementwise_unary(next->op) && !chain.empty()) {
                // swap the relu with the last shape-only node before it
                LayerNode* shape_node = g.find_node(chain.back());
                LayerNode* relu = g.find_node(next->id);
                std::string upstream = shape_node->inputs[0];
                // relu now reads the pre-reshape tensor; reshape reads relu
                relu->inputs[0] = upstream;
                shape_node->inputs[0] = relu->id;
                // consumers of relu now read the reshape output
                for (auto& m : g.nodes) {
                    if (m.id == shape_node->id) continue;
                    for (auto& in : m.inputs)
                        if (in == relu->id && m.id != shape_node->id) in = shape_node->id;
                }
                for (auto& o : g.outputs)
                    if (o == relu->id) o = shape_node->id;
                // metas move with the swap
                if (relu->out_meta) relu->out_meta = g.meta_of(upstream);
                g.validate_and_sort();
                return true;
            }
            if (!shape_only(next->op) || is_output(g, next->id)) break;
            chain.push_back(next->id);
            cur = next;
        }
    }
    return false;
}

}  // namespace

ModelGraph fuse_relu_pool(const ModelGraph& g) {
    ModelGraph out = g;
    while (fuse_one(out)) {
    }
    out.validate_and_sort();
    return out;
}

ModelGraph reorder_commuting(const ModelGraph& g) {
    ModelGraph out = g;
    while (reorder_one(out)) {
    }
    return out;
}

ModelGraph run_pipeline(const ModelGraph& g) {
    ModelGraph cur = g;
    while (true) {
        size_t nodes_before = cur.nodes.size();
        uint64_t hash_before = cur.structural_hash();
        cur = reorder_commuting(cur);
        cur = fuse_relu_pool(cur);
        if (cur.nodes.size() == nodes_before && cur.structural_hash() == hash_before) break;
    }
    return cur;
}

DeviceGraph clone_for_device(const ModelGraph& g, DeviceKind kind, FlavorId flavor) {
    DeviceGraph dg;
    dg.base = g;  // value copy, deep by construction
    dg.device_kind = kind;
    dg.flavor = flavor;
    return dg;
}

}  // namespace sol
