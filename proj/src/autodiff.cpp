// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0

#include "sol/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "sol/errors.hpp"
#include "sol/reference.hpp"

namespace sol::autodiff {

namespace {

struct Builder {
    const ModelGraph& fwd;
    ModelGraph bw;
    // forward tensor -> gradient contribution node/tensor names
    std::map<std::string, std::vector<std::string>> contributions;
    std::set<std::string> saved;

    explicit Builder(const ModelGraph& g) : fwd(g) {}

    const TensorMeta& meta_of(const std::string& name) const { return fwd.meta_of(name); }

    // Forward tensors enter the backward graph as inputs on first use.
    std::string use_fwd(const std::string& name) {
        if (!saved.count(name)) {
            saved.insert(name);
            bw.graph_inputs.push_back({name, meta_of(name)});
        }
        return name;
    }

    std::string emit(std::string id, OpKind op, std::vector<std::string> inputs, Attrs attrs,
                     std::vector<std::string> params = {},
                     std::optional<TensorMeta> saved_meta = std::nullopt) {
        LayerNode n;
        n.id = std::move(id);
        n.op = op;
        n.attrs = attrs;
        n.inputs = std::move(inputs);
        n.params = std::move(params);
        n.saved_meta = std::move(saved_meta);
        bw.nodes.push_back(std::move(n));
        return bw.nodes.back().id;
    }

    void contribute(const std::string& fwd_tensor, const std::string& grad_name) {
        // only track gradients for tensors that exist in the forward graph
        if (fwd.find_node(fwd_tensor) || fwd.find_input(fwd_tensor))
            contributions[fwd_tensor].push_back(grad_name);
    }

    // Collapses multiple contributions into a single tensor via Add chains.
    std::string grad_of(const std::string& fwd_tensor) {
        auto it = contributions.find(fwd_tensor);
        if (it == contributions.end() || it->second.empty()) return {};
        auto& list = it->second;
        while (list.size() > 1) {
            std::string a = list[0], b = list[1];
            std::string id = "d_" + fwd_tensor + "_acc" + std::to_string(list.size());
            emit(id, OpKind::Add, {a, b}, {});
            list.erase(list.begin(), list.begin() + 2);
            list.insert(list.begin(), id);
        }
        return list[0];
    }
};

}  // namespace

BackwardGraph build_backward(const ModelGraph& g) {
    if (g.outputs.size() != 1) throw NonDifferentiableGraphError("expected a single loss output");
    const LayerNode* loss = g.find_node(g.outputs[0]);
    if (!loss || loss->op != OpKind::CrossEntropyLoss)
        throw NonDifferentiableGraphError("graph does not end in CrossEntropyLoss");
    for (const auto& n : g.nodes)
        if (!n.out_meta) throw ShapeMismatchError("build_backward requires inferred shapes");

    Builder b(g);
    b.bw.params = g.params;  // weights referenced by input/weight gradients

    auto cons = g.consumers();

    // seed: loss gradient is 1; the CE (optionally fused with softmax)
    // backward consumes predictions and labels directly
    const std::string& pred = loss->inputs[0];
    const std::string& labels = loss->inputs[1];
    const LayerNode* pred_node = g.find_node(pred);
    std::set<std::string> skip{loss->id};
    if (pred_node && pred_node->op == OpKind::Softmax && cons.at(pred).size() == 1 &&
        std::find(g.outputs.begin(), g.outputs.end(), pred) == g.outputs.end()) {
        // fused softmax+cross-entropy: d(logits) = (y - t) / B
        Attrs a;
        std::string id = b.emit("d_" + pred_node->inputs[0], OpKind::SoftmaxCeBack,
                                {b.use_fwd(pred), b.use_fwd(labels)}, a);
        b.contribute(pred_node->inputs[0], id);
        skip.insert(pred_node->id);
    } else {
        Attrs a;
        std::string id =
            b.emit("d_" + pred, OpKind::CeBack, {b.use_fwd(pred), b.use_fwd(labels)}, a);
        b.contribute(pred, id);
    }

    BackwardGraph out;

    for (auto it = g.nodes.rbegin(); it != g.nodes.rend(); ++it) {
        const LayerNode& n = *it;
        if (skip.count(n.id)) continue;
        std::string delta = b.grad_of(n.id);
        if (delta.empty()) continue;  // nothing downstream needs this node's gradient
        const std::string& x = n.inputs.empty() ? std::string{} : n.inputs[0];
        const Attrs& a = n.attrs;

        switch (n.op) {
            case OpKind::ReLU:
                b.contribute(x, b.emit("d_" + x + "_via_" + n.id, OpKind::ReluBack,
                                       {delta, b.use_fwd(x)}, a));
                break;
            case OpKind::Copy:
                b.contribute(x, delta);
                break;
            case OpKind::Add:
                b.contribute(n.inputs[0], delta);
                b.contribute(n.inputs[1], delta);
                break;
            case OpKind::MaxPool2d:
                b.contribute(x, b.emit("d_" + x + "_via_" + n.id, OpKind::MaxPool2dBack,
                                       {delta, b.use_fwd(x)}, a));
                break;
            case OpKind::AvgPool2d:
                b.contribute(x, b.emit("d_" + x + "_via_" + n.id, OpKind::AvgPool2dBack, {delta},
                                       a, {}, b.meta_of(x)));
                break;
            case OpKind::GlobalAvgPool:
                b.contribute(x, b.emit("d_" + x + "_via_" + n.id, OpKind::GlobalAvgPoolBack,
                                       {delta}, a, {}, b.meta_of(x)));
                break;
            case OpKind::Flatten:
                b.contribute(x, b.emit("d_" + x + "_via_" + n.id, OpKind::FlattenBack, {delta}, a,
                                       {}, b.meta_of(x)));
                break;
            case OpKind::Softmax:
                b.contribute(x, b.emit("d_" + x + "_via_" + n.id, OpKind::SoftmaxBack,
                                       {delta, b.use_fwd(n.id)}, a));
                break;
            case OpKind::BatchNorm2d: {
                std::vector<std::string> x_params{n.params[0]};
                std::vector<std::string> gamma_params;
                if (!a.training) {
                    x_params = {n.params[0], n.params[2], n.params[3]};
                    gamma_params = {n.params[2], n.params[3]};
                }
                b.contribute(x, b.emit("d_" + x + "_via_" + n.id, OpKind::BatchNormBackX,
                                       {delta, b.use_fwd(x)}, a, x_params));
                out.param_grads.emplace_back(
                    n.params[0], b.emit("g_" + n.params[0], OpKind::BatchNormBackGamma,
                                        {delta, b.use_fwd(x)}, a, gamma_params));
                out.param_grads.emplace_back(
                    n.params[1],
                    b.emit("g_" + n.params[1], OpKind::BatchNormBackBeta, {delta}, a));
                break;
            }
            case OpKind::Conv2d: {
                if (g.find_node(x))  // graph-input gradients are not needed
                    b.contribute(x, b.emit("d_" + x + "_via_" + n.id, OpKind::Conv2dBackX, {delta},
                                           a, {n.params[0]}, b.meta_of(x)));
                out.param_grads.emplace_back(
                    n.params[0], b.emit("g_" + n.params[0], OpKind::Conv2dBackW,
                                        {delta, b.use_fwd(x)}, a, {},
                                        g.params.at(n.params[0]).meta()));
                if (a.has_bias)
                    out.param_grads.emplace_back(
                        n.params[1], b.emit("g_" + n.params[1], OpKind::Conv2dBackB, {delta}, a,
                                            {}, g.params.at(n.params[1]).meta()));
                break;
            }
            case OpKind::Linear: {
                if (g.find_node(x))
                    b.contribute(x, b.emit("d_" + x + "_via_" + n.id, OpKind::LinearBackX, {delta},
                                           a, {n.params[0]}, b.meta_of(x)));
                out.param_grads.emplace_back(
                    n.params[0], b.emit("g_" + n.params[0], OpKind::LinearBackW,
                                        {delta, b.use_fwd(x)}, a, {},
                                        g.params.at(n.params[0]).meta()));
                if (a.has_bias)
                    out.param_grads.emplace_back(
                        n.params[1], b.emit("g_" + n.params[1], OpKind::LinearBackB, {delta}, a,
                                            {}, g.params.at(n.params[1]).meta()));
                break;
            }
            default:
                throw NonDifferentiableGraphError(std::string("no gradient rule for ") +
                                                  op_name(n.op));
        }
    }

    // prune nodes that do not feed any parameter gradient
    std::set<std::string> needed;
    std::vector<std::string> stack;
    for (const auto& [param, node] : out.param_grads) stack.push_back(node);
    while (!stack.empty()) {
        std::string id = stack.back();
        stack.pop_back();
        if (!needed.insert(id).second) continue;
        if (const LayerNode* n = b.bw.find_node(id))
            for (const auto& in : n->inputs)
                if (b.bw.find_node(in)) stack.push_back(in);
    }
    std::erase_if(b.bw.nodes, [&](const LayerNode& n) { return !needed.count(n.id); });

    std::sort(out.param_grads.begin(), out.param_grads.end());
    b.bw.outputs.clear();
    for (const auto& [param, node] : out.param_grads) b.bw.outputs.push_back(node);
    b.bw.validate_and_sort();

    // annotate shapes: inputs carry forward metas; nodes have concrete rules
    int64_t batch = 1;
    for (const auto& gi : g.graph_inputs)
        if (int p = gi.meta.find(kBatchTag); p >= 0) batch = gi.meta.dims[p].extent;
    out.graph = infer_shapes(b.bw, batch);
    out.saved.assign(b.saved.begin(), b.saved.end());
    return out;
}

TrainingGraph build_training_graph(const ModelGraph& g) {
    ModelGraph fwd = g;
    for (auto& n : fwd.nodes)
        if (n.op == OpKind::BatchNorm2d) n.attrs.training = true;
    // shapes must reflect the training-mode attrs
    BackwardGraph bw = build_backward(fwd);

    TrainingGraph out;
    out.graph = fwd;
    out.loss = fwd.outputs[0];
    for (const auto& n : bw.graph.nodes) out.graph.nodes.push_back(n);
    out.graph.outputs.clear();
    out.graph.outputs.push_back(out.loss);
    for (const auto& [param, node] : bw.param_grads) {
        out.graph.outputs.push_back(node);
        out.param_grads.emplace_back(param, node);
    }
    out.graph.validate_and_sort();
    return out;
}

double grad_check(const ModelGraph& g, double eps, uint64_t seed) {
    // everything in f64: params, inputs, evaluation
    ModelGraph f64g = g;
    int64_t total_params = 0;
    for (auto& [name, t] : f64g.params) {
        t = t.to_dtype(Dtype::F64);
        total_params += t.element_count();
    }
    if (total_params == 0) return 0.0;
    if (total_params > 10000)
        throw ShapeMismatchError("grad_check expects at most 10k parameters");
    for (auto& gi : f64g.graph_inputs) gi.meta.dtype = Dtype::F64;
    for (auto& n : f64g.nodes)
        if (n.out_meta) {
            n.out_meta->dtype = Dtype::F64;
            if (n.saved_meta) n.saved_meta->dtype = Dtype::F64;
        }

    std::mt19937_64 rng(seed);
    const LayerNode* loss_node = f64g.find_node(f64g.outputs[0]);
    const std::string labels_name =
        loss_node && loss_node->op == OpKind::CrossEntropyLoss ? loss_node->inputs[1] : "";
    TensorMap inputs;
    for (const auto& gi : f64g.graph_inputs) {
        Tensor t(gi.meta);
        if (gi.name == labels_name) {
            // one-hot labels
            int bp = gi.meta.find(kBatchTag);
            int cp = gi.meta.find(DimTag{DimPurpose::Channel, 0});
            int64_t n = bp >= 0 ? gi.meta.dims[bp].extent : 1;
            int64_t c = cp >= 0 ? gi.meta.dims[cp].extent : 1;
            std::vector<int64_t> coords(gi.meta.dims.size(), 0);
            for (int64_t i = 0; i < n; ++i) {
                if (bp >= 0) coords[static_cast<size_t>(bp)] = i;
                if (cp >= 0) coords[static_cast<size_t>(cp)] = static_cast<int64_t>(rng() % c);
                t.set(coords, 1.0);
            }
        } else {
            t.fill_uniform(rng, -1.0, 1.0);
        }
        inputs.emplace(gi.name, std::move(t));
    }

    BackwardGraph bw = build_backward(f64g);
    for (auto& n : bw.graph.nodes)
        if (n.out_meta) n.out_meta->dtype = Dtype::F64;
    for (auto& gi : bw.graph.graph_inputs) gi.meta.dtype = Dtype::F64;

    TensorMap env = run_reference(f64g, inputs);
    TensorMap bw_in;
    for (const auto& name : bw.saved) bw_in.emplace(name, env.at(name));
    TensorMap grads_env = run_reference(bw.graph, bw_in);

    auto loss_at = [&](const TensorMap& params) {
        ModelGraph trial = f64g;
        trial.params = params;
        auto out = reference_forward(trial, inputs);
        return out.at(f64g.outputs[0]).get_mem(0);
    };

    double worst = 0.0;
    for (const auto& [pname, gnode] : bw.param_grads) {
        const Tensor& analytic = grads_env.at(gnode);
        for (int64_t i = 0; i < analytic.element_count(); ++i) {
            TensorMap perturbed = f64g.params;
            Tensor& t = perturbed.at(pname);
            double orig = t.get_mem(i);
            t.set_mem(i, orig + eps);
            double up = loss_at(perturbed);
            t.set_mem(i, orig - eps);
            double down = loss_at(perturbed);
            double numeric = (up - down) / (2 * eps);
            double a = analytic.get_mem(i);
            worst = std::max(worst,
                             std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8}));
        }
    }
    return worst;
}

TensorMap sgd_step(const OptimizerState& state, const TensorMap& params, const TensorMap& grads) {
    TensorMap out;
    for (const auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) {
            out.emplace(name, p);  // non-trainable (e.g. running stats)
            continue;
        }
        const Tensor& g = git->second;
        if (g.element_count() != p.element_count())
            throw ShapeMismatchError("sgd_step: gradient shape mismatch for " + name);
        Tensor next = p;
        if (p.meta().dtype == Dtype::F32) {
            float lr = state.lr;
            for (int64_t i = 0; i < p.element_count(); ++i)
                next.f32()[i] = p.f32()[i] - lr * static_cast<float>(g.get_mem(i));
        } else {
            for (int64_t i = 0; i < p.element_count(); ++i)
                next.f64()[i] = p.f64()[i] - static_cast<double>(state.lr) * g.get_mem(i);
        }
        out.emplace(name, std::move(next));
    }
    return out;
}

void update_bn_running_stats(const ModelGraph& g, TensorMap& params, const TensorMap& env) {
    for (const auto& n : g.nodes) {
        if (n.op != OpKind::BatchNorm2d || !n.attrs.training) continue;
        const Tensor& x = env.at(n.inputs[0]);
        const TensorMeta& m = x.meta();
        int cpos = m.find(DimTag{DimPurpose::Channel, 0});
        int64_t C = m.dims[cpos].extent;
        int64_t count = x.element_count() / C;
        std::vector<double> mean(C, 0.0), var(C, 0.0);
        for (int64_t i = 0; i < x.element_count(); ++i) {
            auto coords = m.unravel(i);
            mean[coords[cpos]] += x.get(coords);
        }
        for (int64_t c = 0; c < C; ++c) mean[c] /= static_cast<double>(count);
        for (int64_t i = 0; i < x.element_count(); ++i) {
            auto coords = m.unravel(i);
            double d = x.get(coords) - mean[coords[cpos]];
            var[coords[cpos]] += d * d;
        }
        double unbias = count > 1 ? static_cast<double>(count) / (count - 1) : 1.0;
        Tensor& rmean = params.at(n.params[2]);
        Tensor& rvar = params.at(n.params[3]);
        const double mom = n.attrs.momentum;
        for (int64_t c = 0; c < C; ++c) {
            rmean.set_mem(c, (1 - mom) * rmean.get_mem(c) + mom * mean[c]);
            rvar.set_mem(c, (1 - mom) * rvar.get_mem(c) + mom * (var[c] / count) * unbias);
        }
    }
}

}  // namespace sol::autodiff
