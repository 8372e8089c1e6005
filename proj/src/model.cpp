// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0

#include "sol/model.hpp"

#include <algorithm>
#include <functional>
#include <set>

#include "sol/errors.hpp"

namespace sol {

namespace {

struct OpInfo {
    OpKind op;
    const char* name;
    bool user_facing;
};

constexpr OpInfo kOps[] = {
    {OpKind::Conv2d, "Conv2d", true},
    {OpKind::Linear, "Linear", true},
    {OpKind::ReLU, "ReLU", true},
    {OpKind::MaxPool2d, "MaxPool2d", true},
    {OpKind::AvgPool2d, "AvgPool2d", true},
    {OpKind::BatchNorm2d, "BatchNorm2d", true},
    {OpKind::Add, "Add", true},
    {OpKind::Flatten, "Flatten", true},
    {OpKind::GlobalAvgPool, "GlobalAvgPool", true},
    {OpKind::Softmax, "Softmax", true},
    {OpKind::CrossEntropyLoss, "CrossEntropyLoss", true},
    {OpKind::Copy, "Copy", true},
    {OpKind::ReluBack, "ReluBack", false},
    {OpKind::MaxPool2dBack, "MaxPool2dBack", false},
    {OpKind::AvgPool2dBack, "AvgPool2dBack", false},
    {OpKind::GlobalAvgPoolBack, "GlobalAvgPoolBack", false},
    {OpKind::FlattenBack, "FlattenBack", false},
    {OpKind::SoftmaxBack, "SoftmaxBack", false},
    {OpKind::SoftmaxCeBack, "SoftmaxCeBack", false},
    {OpKind::CeBack, "CeBack", false},
    {OpKind::BatchNormBackX, "BatchNormBackX", false},
    {OpKind::BatchNormBackGamma, "BatchNormBackGamma", false},
    {OpKind::BatchNormBackBeta, "BatchNormBackBeta", false},
    {OpKind::Conv2dBackX, "Conv2dBackX", false},
    {OpKind::Conv2dBackW, "Conv2dBackW", false},
    {OpKind::Conv2dBackB, "Conv2dBackB", false},
    {OpKind::LinearBackX, "LinearBackX", false},
    {OpKind::LinearBackW, "LinearBackW", false},
    {OpKind::LinearBackB, "LinearBackB", false},
    {OpKind::SgdUpdate, "SgdUpdate", false},
};

}  // namespace

const char* op_name(OpKind op) {
    for (const auto& info : kOps)
        if (info.op == op) return info.name;
    return "?";
}

std::optional<OpKind> op_from_name(const std::string& name, bool user_facing_only) {
    for (const auto& info : kOps)
        if (name == info.name && (!user_facing_only || info.user_facing)) return info.op;
    return std::nullopt;
}

bool op_is_backward(OpKind op) {
    for (const auto& info : kOps)
        if (info.op == op) return !info.user_facing;
    return false;
}

const LayerNode* ModelGraph::find_node(const std::string& id) const {
    for (const auto& n : nodes)
        if (n.id == id) return &n;
    return nullptr;
}

LayerNode* ModelGraph::find_node(const std::string& id) {
    for (auto& n : nodes)
        if (n.id == id) return &n;
    return nullptr;
}

const GraphInput* ModelGraph::find_input(const std::string& name) const {
    for (const auto& in : graph_inputs)
        if (in.name == name) return &in;
    return nullptr;
}

const TensorMeta& ModelGraph::meta_of(const std::string& name) const {
    if (const auto* in = find_input(name)) return in->meta;
    const auto* n = find_node(name);
    if (!n || !n->out_meta) throw MalformedModelError("no meta for tensor '" + name + "'");
    return *n->out_meta;
}

std::map<std::string, std::vector<std::string>> ModelGraph::consumers() const {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& n : nodes)
        for (const auto& in : n.inputs) out[in].push_back(n.id);
    return out;
}

void ModelGraph::validate_and_sort() {
    std::set<std::string> names;
    for (const auto& in : graph_inputs) {
        if (!names.insert(in.name).second)
            throw MalformedModelError("duplicate graph input '" + in.name + "'");
        for (const auto& d : in.meta.dims)
            if (d.extent == 0 && d.tag != kBatchTag)
                throw MalformedModelError("symbolic extent outside batch dim in input '" + in.name + "'");
    }
    for (const auto& n : nodes) {
        if (n.id.empty()) throw MalformedModelError("node with empty id");
        if (!names.insert(n.id).second) throw MalformedModelError("duplicate node id '" + n.id + "'");
    }
    for (const auto& n : nodes) {
        for (const auto& in : n.inputs)
            if (!names.count(in))
                throw MalformedModelError("node '" + n.id + "' references undefined input '" + in + "'");
        for (const auto& p : n.params)
            if (!params.count(p))
                throw WeightsMismatchError("node '" + n.id + "' references missing parameter '" + p + "'");
        if (n.op == OpKind::Conv2d) {
            if (n.attrs.groups <= 0 || n.attrs.kh <= 0 || n.attrs.kw <= 0 ||
                n.attrs.sh <= 0 || n.attrs.sw <= 0 || n.attrs.out_channels <= 0)
                throw MalformedModelError("bad Conv2d attrs on '" + n.id + "'");
            if (n.attrs.out_channels % n.attrs.groups != 0)
                throw MalformedModelError("Conv2d groups must divide out_channels on '" + n.id + "'");
            if (n.attrs.ph >= n.attrs.kh || n.attrs.pw >= n.attrs.kw)
                throw MalformedModelError("Conv2d padding must be smaller than kernel on '" + n.id + "'");
        }
        if ((n.op == OpKind::MaxPool2d || n.op == OpKind::AvgPool2d) &&
            (n.attrs.kh <= 0 || n.attrs.kw <= 0 || n.attrs.ph >= n.attrs.kh || n.attrs.pw >= n.attrs.kw))
            throw MalformedModelError("bad pool attrs on '" + n.id + "'");
        if (n.op == OpKind::Add && n.inputs.size() != 2)
            throw MalformedModelError("Add expects 2 inputs on '" + n.id + "'");
    }
    for (const auto& out : outputs)
        if (!find_node(out)) throw MalformedModelError("undeclared output node '" + out + "'");

    // Kahn topological sort; cycle if not all nodes drain.
    std::map<std::string, int> indeg;
    std::map<std::string, std::vector<std::string>> succ;
    for (const auto& n : nodes) {
        indeg[n.id] += 0;
        for (const auto& in : n.inputs) {
            if (find_node(in)) {
                indeg[n.id]++;
                succ[in].push_back(n.id);
            }
        }
    }
    std::vector<std::string> ready;
    for (const auto& n : nodes)
        if (indeg[n.id] == 0) ready.push_back(n.id);
    std::vector<LayerNode> sorted;
    while (!ready.empty()) {
        std::string id = ready.front();
        ready.erase(ready.begin());
        sorted.push_back(*find_node(id));
        for (const auto& s : succ[id])
            if (--indeg[s] == 0) ready.push_back(s);
    }
    if (sorted.size() != nodes.size()) throw MalformedModelError("cycle in model graph");
    nodes = std::move(sorted);
}

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeMismatchError(msg);
}

int64_t conv_out_extent(int64_t in, int64_t k, int64_t s, int64_t p) {
    return (in + 2 * p - k) / s + 1;
}

// Pixel extents (h, w) looked up by tag, independent of dim order.
std::pair<int64_t, int64_t> hw_of(const TensorMeta& m, const std::string& who) {
    int64_t h = m.extent_of(DimTag{DimPurpose::Pixel, 1});
    int64_t w = m.extent_of(DimTag{DimPurpose::Pixel, 0});
    require(h > 0 && w > 0, who + " expects two pixel dims, got " + m.str());
    return {h, w};
}

TensorMeta with_extents(const TensorMeta& in, int64_t c, int64_t h, int64_t w) {
    TensorMeta out = in;
    out.layout = LayoutId{};
    for (auto& d : out.dims) {
        if (d.tag == DimTag{DimPurpose::Channel, 0}) d.extent = c;
        if (d.tag == DimTag{DimPurpose::Pixel, 1}) d.extent = h;
        if (d.tag == DimTag{DimPurpose::Pixel, 0}) d.extent = w;
    }
    return out;
}

}  // namespace

TensorMeta infer_node_shape(const LayerNode& node, const std::vector<TensorMeta>& ins) {
    const auto& a = node.attrs;
    auto arity = [&](size_t n) {
        require(ins.size() == n, std::string(op_name(node.op)) + " '" + node.id + "' expects " +
                                     std::to_string(n) + " inputs");
    };
    switch (node.op) {
        case OpKind::Conv2d: {
            arity(1);
            const auto& x = ins[0];
            int64_t cin = x.extent_of(DimTag{DimPurpose::Channel, 0});
            require(cin > 0, "Conv2d input has no channel dim: " + x.str());
            require(cin % a.groups == 0, "Conv2d groups must divide in-channels on '" + node.id + "'");
            auto [h, w] = hw_of(x, "Conv2d");
            require(h + 2 * a.ph >= a.kh && w + 2 * a.pw >= a.kw,
                    "Conv2d kernel larger than padded input on '" + node.id + "'");
            return with_extents(x, a.out_channels, conv_out_extent(h, a.kh, a.sh, a.ph),
                                conv_out_extent(w, a.kw, a.sw, a.pw));
        }
        case OpKind::MaxPool2d:
        case OpKind::AvgPool2d: {
            arity(1);
            const auto& x = ins[0];
            auto [h, w] = hw_of(x, op_name(node.op));
            require(h + 2 * a.ph >= a.kh && w + 2 * a.pw >= a.kw,
                    "pool kernel larger than padded input on '" + node.id + "'");
            return with_extents(x, x.extent_of(DimTag{DimPurpose::Channel, 0}),
                                conv_out_extent(h, a.kh, a.sh, a.ph),
                                conv_out_extent(w, a.kw, a.sw, a.pw));
        }
        case OpKind::Linear: {
            arity(1);
            const auto& x = ins[0];
            require(x.rank() == 2 && x.find(DimTag{DimPurpose::Channel, 0}) >= 0 &&
                        x.find(kBatchTag) >= 0,
                    "Linear expects a [batch, channel] tensor, got " + x.str());
            TensorMeta out = meta_nc(x.extent_of(kBatchTag), a.out_features, x.dtype);
            return out;
        }
        case OpKind::ReLU:
        case OpKind::Copy: {
            arity(1);
            TensorMeta out = ins[0];
            out.layout = LayoutId{};
            return out;
        }
        case OpKind::BatchNorm2d: {
            arity(1);
            require(ins[0].find(DimTag{DimPurpose::Channel, 0}) >= 0,
                    "BatchNorm2d input has no channel dim");
            TensorMeta out = ins[0];
            out.layout = LayoutId{};
            return out;
        }
        case OpKind::Add: {
            arity(2);
            auto key = [](const TensorMeta& m) {
                std::vector<Dim> d = m.dims;
                std::sort(d.begin(), d.end(), [](const Dim& a, const Dim& b) { return a.tag < b.tag; });
                return d;
            };
            require(key(ins[0]) == key(ins[1]),
                    "Add operands differ: " + ins[0].str() + " vs " + ins[1].str());
            TensorMeta out = ins[0];
            out.layout = LayoutId{};
            return out;
        }
        case OpKind::Flatten: {
            arity(1);
            const auto& x = ins[0];
            int b = x.find(kBatchTag);
            require(b >= 0, "Flatten expects a batch dim, got " + x.str());
            int64_t rest = 1;
            for (const auto& d : x.dims)
                if (d.tag != kBatchTag) rest *= d.extent;
            return meta_nc(x.dims[b].extent, rest, x.dtype);
        }
        case OpKind::GlobalAvgPool: {
            arity(1);
            const auto& x = ins[0];
            require(!x.pixel_positions().empty(), "GlobalAvgPool expects pixel dims");
            TensorMeta out = x;
            out.layout = LayoutId{};
            std::erase_if(out.dims, [](const Dim& d) { return d.tag.purpose == DimPurpose::Pixel; });
            return out;
        }
        case OpKind::Softmax: {
            arity(1);
            require(!ins[0].channel_positions().empty(), "Softmax expects a channel dim");
            TensorMeta out = ins[0];
            out.layout = LayoutId{};
            return out;
        }
        case OpKind::CrossEntropyLoss: {
            arity(2);
            require(ins[0].element_count() == ins[1].element_count(),
                    "CrossEntropyLoss prediction/label mismatch");
            return meta_scalar(ins[0].dtype);
        }

        // Gradient ops. Convention: see autodiff.cpp for input orders.
        case OpKind::ReluBack:
            arity(2);
            return ins[1];
        case OpKind::MaxPool2dBack:
            arity(2);
            return ins[1];
        case OpKind::AvgPool2dBack:
        case OpKind::GlobalAvgPoolBack:
        case OpKind::FlattenBack:
        case OpKind::Conv2dBackX: {
            arity(1);
            require(node.saved_meta.has_value(), std::string(op_name(node.op)) + " needs saved meta");
            return *node.saved_meta;
        }
        case OpKind::SoftmaxBack:
            arity(2);
            return ins[1];
        case OpKind::SoftmaxCeBack:
        case OpKind::CeBack:
            arity(2);
            return ins[0];
        case OpKind::BatchNormBackX:
            arity(2);
            return ins[1];
        case OpKind::BatchNormBackGamma:
        case OpKind::BatchNormBackBeta: {
            arity(node.op == OpKind::BatchNormBackGamma ? 2 : 1);
            int64_t c = ins[0].extent_of(DimTag{DimPurpose::Channel, 0});
            require(c > 0, "batchnorm gradient needs channel dim");
            return meta_plain({c}, ins[0].dtype);
        }
        case OpKind::Conv2dBackW:
        case OpKind::Conv2dBackB:
        case OpKind::LinearBackW:
        case OpKind::LinearBackB: {
            require(node.saved_meta.has_value(), std::string(op_name(node.op)) + " needs saved meta");
            return *node.saved_meta;
        }
        case OpKind::LinearBackX: {
            arity(1);
            require(node.saved_meta.has_value(), "LinearBackX needs saved meta");
            return *node.saved_meta;
        }
        case OpKind::SgdUpdate:
            arity(2);
            return ins[0];
    }
    throw UnsupportedOpError(std::string("no shape rule for op ") + op_name(node.op));
}

// Parameter shapes vs. resolved input metas (e.g. Linear in-features).
static void check_param_shapes(const ModelGraph& g, const LayerNode& n,
                               const std::vector<TensorMeta>& ins) {
    if (n.params.empty()) return;
    const TensorMeta& w = g.params.at(n.params[0]).meta();
    if (n.op == OpKind::Linear) {
        int64_t cin = ins[0].extent_of(DimTag{DimPurpose::Channel, 0});
        require(w.dims[1].extent == cin,
                "Linear '" + n.id + "' expects " + std::to_string(w.dims[1].extent) +
                    " in-features, got " + std::to_string(cin));
    } else if (n.op == OpKind::Conv2d) {
        int64_t cin = ins[0].extent_of(DimTag{DimPurpose::Channel, 0});
        require(w.dims[1].extent == cin / n.attrs.groups,
                "Conv2d '" + n.id + "' weight expects " + std::to_string(w.dims[1].extent) +
                    " in-channels per group, got " + std::to_string(cin / n.attrs.groups));
    } else if (n.op == OpKind::BatchNorm2d) {
        int64_t c = ins[0].extent_of(DimTag{DimPurpose::Channel, 0});
        require(w.element_count() == c, "BatchNorm2d '" + n.id + "' parameter size mismatch");
    }
}

ModelGraph infer_shapes(const ModelGraph& g, int64_t batch) {
    require(batch > 0, "batch must be positive");
    ModelGraph out = g;
    for (auto& in : out.graph_inputs) {
        for (auto& d : in.meta.dims)
            if (d.extent == 0) d.extent = batch;
        in.meta.validate();
    }
    for (auto& n : out.nodes) {
        std::vector<TensorMeta> ins;
        ins.reserve(n.inputs.size());
        for (const auto& name : n.inputs) ins.push_back(out.meta_of(name));
        check_param_shapes(out, n, ins);
        n.out_meta = infer_node_shape(n, ins);
        n.out_meta->validate();
    }
    return out;
}

uint64_t ModelGraph::structural_hash() const {
    // FNV-1a over a canonical rendering with node ids replaced by positions.
    std::map<std::string, size_t> pos;
    for (size_t i = 0; i < graph_inputs.size(); ++i) pos["in:" + graph_inputs[i].name] = i;
    for (size_t i = 0; i < nodes.size(); ++i) pos[nodes[i].id] = graph_inputs.size() + i;
    auto token = [&](const std::string& name) {
        auto it = pos.find(name);
        if (it != pos.end()) return std::to_string(it->second);
        return std::string("#") + std::to_string(pos.at("in:" + name));
    };
    std::string repr;
    for (const auto& in : graph_inputs) repr += "I" + in.meta.str() + ";";
    for (const auto& n : nodes) {
        repr += op_name(n.op);
        const auto& a = n.attrs;
        for (int64_t v : {a.out_channels, a.out_features, a.kh, a.kw, a.sh, a.sw, a.ph, a.pw,
                          a.groups, static_cast<int64_t>(a.has_bias),
                          static_cast<int64_t>(a.count_padding), static_cast<int64_t>(a.training)})
            repr += "," + std::to_string(v);
        repr += "," + std::to_string(a.min_init) + "," + std::to_string(a.eps);
        for (const auto& in : n.inputs) repr += "<" + token(in);
        repr += ";";
    }
    for (const auto& o : outputs) repr += ">" + token(o);
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : repr) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace sol
