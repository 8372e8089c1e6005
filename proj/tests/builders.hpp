// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared test helpers: programmatic graph construction with seeded parameter
// init, temp directories, random tensors.

#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "sol/model.hpp"

namespace sol::test {

inline std::filesystem::path temp_dir(const std::string& tag) {
    static std::mt19937_64 rng{std::random_device{}()};
    auto p = std::filesystem::temp_directory_path() /
             ("solmini_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(p);
    return p;
}

inline Tensor random_tensor(const TensorMeta& meta, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    Tensor t(meta);
    t.fill_uniform(rng, lo, hi);
    return t;
}

// Builds valid graphs in memory; parameters get Xavier-ish seeded init.
struct GraphBuilder {
    ModelGraph g;
    std::mt19937_64 rng;
    Dtype dtype = Dtype::F32;

    explicit GraphBuilder(uint64_t seed = 1, Dtype dt = Dtype::F32) : rng(seed), dtype(dt) {}

    std::string input(const std::string& name, TensorMeta meta) {
        meta.dtype = dtype;
        g.graph_inputs.push_back({name, std::move(meta)});
        return name;
    }

    Tensor init(std::vector<int64_t> extents, double scale) {
        Tensor t(meta_plain(std::move(extents), dtype));
        std::uniform_real_distribution<double> dist(-scale, scale);
        for (int64_t i = 0; i < t.element_count(); ++i) t.set_mem(i, dist(rng));
        return t;
    }

    std::string node(const std::string& id, OpKind op, std::vector<std::string> inputs,
                     Attrs attrs = {}, std::vector<std::string> params = {}) {
        LayerNode n;
        n.id = id;
        n.op = op;
        n.attrs = attrs;
        n.inputs = std::move(inputs);
        n.params = std::move(params);
        g.nodes.push_back(std::move(n));
        return id;
    }

    std::string conv(const std::string& id, const std::string& in, int64_t in_c, int64_t out_c,
                     int64_t k, int64_t s = 1, int64_t p = 0, int64_t groups = 1, bool bias = true) {
        Attrs a;
        a.out_channels = out_c;
        a.kh = a.kw = k;
        a.sh = a.sw = s;
        a.ph = a.pw = p;
        a.groups = groups;
        a.has_bias = bias;
        double scale = 1.0 / std::sqrt(static_cast<double>(in_c / groups * k * k));
        g.params.emplace(id + ".W", init({out_c, in_c / groups, k, k}, scale));
        std::vector<std::string> params{id + ".W"};
        if (bias) {
            g.params.emplace(id + ".b", init({out_c}, scale));
            params.push_back(id + ".b");
        }
        return node(id, OpKind::Conv2d, {in}, a, params);
    }

    std::string linear(const std::string& id, const std::string& in, int64_t in_f, int64_t out_f,
                       bool bias = true) {
        Attrs a;
        a.out_features = out_f;
        a.has_bias = bias;
        double scale = 1.0 / std::sqrt(static_cast<double>(in_f));
        g.params.emplace(id + ".W", init({out_f, in_f}, scale));
        std::vector<std::string> params{id + ".W"};
        if (bias) {
            g.params.emplace(id + ".b", init({out_f}, scale));
            params.push_back(id + ".b");
        }
        return node(id, OpKind::Linear, {in}, a, params);
    }

    std::string relu(const std::string& id, const std::string& in) {
        return node(id, OpKind::ReLU, {in});
    }

    std::string maxpool(const std::string& id, const std::string& in, int64_t k, int64_t s = 0,
                        int64_t p = 0) {
        Attrs a;
        a.kh = a.kw = k;
        a.sh = a.sw = s ? s : k;
        a.ph = a.pw = p;
        return node(id, OpKind::MaxPool2d, {in}, a);
    }

    std::string avgpool(const std::string& id, const std::string& in, int64_t k, int64_t s = 0,
                        int64_t p = 0, bool count_padding = false) {
        Attrs a;
        a.kh = a.kw = k;
        a.sh = a.sw = s ? s : k;
        a.ph = a.pw = p;
        a.count_padding = count_padding;
        return node(id, OpKind::AvgPool2d, {in}, a);
    }

    std::string batchnorm(const std::string& id, const std::string& in, int64_t c,
                          bool training = false) {
        Attrs a;
        a.training = training;
        Tensor gamma(meta_plain({c}, dtype)), beta(meta_plain({c}, dtype));
        Tensor mean(meta_plain({c}, dtype)), var(meta_plain({c}, dtype));
        std::uniform_real_distribution<double> dist(0.5, 1.5);
        for (int64_t i = 0; i < c; ++i) {
            gamma.set_mem(i, dist(rng));
            beta.set_mem(i, dist(rng) - 1.0);
            mean.set_mem(i, dist(rng) - 1.0);
            var.set_mem(i, dist(rng));
        }
        g.params.emplace(id + ".gamma", std::move(gamma));
        g.params.emplace(id + ".beta", std::move(beta));
        g.params.emplace(id + ".running_mean", std::move(mean));
        g.params.emplace(id + ".running_var", std::move(var));
        return node(id, OpKind::BatchNorm2d, {in}, a,
                    {id + ".gamma", id + ".beta", id + ".running_mean", id + ".running_var"});
    }

    std::string flatten(const std::string& id, const std::string& in) {
        return node(id, OpKind::Flatten, {in});
    }
    std::string softmax(const std::string& id, const std::string& in) {
        return node(id, OpKind::Softmax, {in});
    }
    std::string add(const std::string& id, const std::string& a, const std::string& b) {
        return node(id, OpKind::Add, {a, b});
    }
    std::string gap(const std::string& id, const std::string& in) {
        return node(id, OpKind::GlobalAvgPool, {in});
    }
    std::string ce(const std::string& id, const std::string& pred, const std::string& labels) {
        return node(id, OpKind::CrossEntropyLoss, {pred, labels});
    }

    ModelGraph done(std::vector<std::string> outputs) {
        g.outputs = std::move(outputs);
        g.validate_and_sort();
        return g;
    }
};

}  // namespace sol::test
