// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0

#include "sol/dnn.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

#include <json.hpp>

#include "sol/errors.hpp"

namespace sol::dnn {

using nlohmann::json;

namespace {
constexpr DimTag kChan{DimPurpose::Channel, 0};
}

const char* orientation_name(WeightOrientation o) {
    return o == WeightOrientation::OutIn ? "out_in" : "in_out";
}

std::string ImplChoice::str() const {
    return provider + "/" + algorithm + "/" + act_layout_name(layout) + "/" +
           orientation_name(orientation);
}

WeightOrientation orientation_of(const TensorMeta& w) {
    // canonical weights list the higher None index first ([out, in])
    if (w.rank() == 2 && w.dims[0].tag.index < w.dims[1].tag.index)
        return WeightOrientation::InOut;
    return WeightOrientation::OutIn;
}

Tensor orient_weight(const Tensor& w, WeightOrientation o) {
    if (orientation_of(w.meta()) == o) return w;
    TensorMeta m = w.meta();
    std::swap(m.dims[0], m.dims[1]);
    return w.relayout(m);
}

void ProviderRegistry::register_provider(std::shared_ptr<KernelProvider> p) {
    for (const auto& q : providers_)
        if (q->name() == p->name())
            throw DuplicateProviderError("provider '" + p->name() + "' already registered");
    providers_.push_back(std::move(p));
}

const KernelProvider& ProviderRegistry::at(const std::string& name) const {
    for (const auto& p : providers_)
        if (p->name() == name) return *p;
    throw NoProviderError("no provider named '" + name + "'");
}

bool ProviderRegistry::has(const std::string& name) const {
    for (const auto& p : providers_)
        if (p->name() == name) return true;
    return false;
}

std::vector<const KernelProvider*> ProviderRegistry::list() const {
    std::vector<const KernelProvider*> out;
    for (const auto& p : providers_) out.push_back(p.get());
    return out;
}

std::vector<ImplChoice> candidates(const ProviderRegistry& reg, const ModelGraph& g,
                                   const LayerNode& node, DeviceKind dev, FlavorId flavor) {
    if (!dfp::is_heavy(node))
        throw NoProviderError(std::string("candidates: '") + op_name(node.op) +
                              "' is not a provider-dispatched op");
    if (node.op == OpKind::Conv2d && dfp::is_depthwise_conv(node, g.meta_of(node.inputs[0])))
        throw NoProviderError("depthwise convolution is handled by the fusion engine");

    const TensorMeta& in_meta = g.meta_of(node.inputs[0]);
    std::vector<ImplChoice> out;
    for (const auto* p : reg.list()) {
        if (!p->supports(node.op)) continue;
        for (const auto& alg : p->algorithms(node.op))
            for (auto layout : p->activation_layouts(node.op, in_meta))
                for (auto orient : p->orientations(node.op, dev, flavor)) {
                    ImplChoice c;
                    c.provider = p->name();
                    c.algorithm = alg;
                    c.layout = layout;
                    c.orientation = orient;
                    out.push_back(c);
                }
    }
    if (out.empty())
        throw NoProviderError("no provider serves " + std::string(op_name(node.op)) + " '" +
                              node.id + "'");
    return out;
}

ImplChoice heuristic_choice(const ProviderRegistry& reg, const std::vector<ImplChoice>& cands,
                            const LayerNode& node) {
    const ImplChoice* best = &cands.at(0);
    double best_cost = reg.at(best->provider).relative_cost(node.op, best->algorithm);
    for (const auto& c : cands) {
        double cost = reg.at(c.provider).relative_cost(node.op, c.algorithm);
        if (cost < best_cost) {
            best = &c;
            best_cost = cost;
        }
    }
    return *best;
}

// ---------------------------------------------------------------------------
// Tune cache
// ---------------------------------------------------------------------------

std::string TuneCache::key(const LayerNode& node, const std::vector<TensorMeta>& input_metas,
                           DeviceKind dev, FlavorId flavor) {
    const Attrs& a = node.attrs;
    std::string k = op_name(node.op);
    for (int64_t v : {a.out_channels, a.out_features, a.kh, a.kw, a.sh, a.sw, a.ph, a.pw, a.groups,
                      static_cast<int64_t>(a.has_bias)})
        k += "," + std::to_string(v);
    for (const auto& m : input_metas) k += "|" + m.str();
    k += "|";
    k += device_kind_name(dev);
    k += "|" + flavor.str();
    return k;
}

std::optional<TuneEntry> TuneCache::find(const std::string& key) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void TuneCache::put(const std::string& key, TuneEntry entry) {
    std::lock_guard lock(mu_);
    entries_[key] = std::move(entry);
}

size_t TuneCache::size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
}

void TuneCache::load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) return;
    json j;
    try {
        f >> j;
    } catch (const json::exception&) {
        return;  // unreadable cache is equivalent to an empty one
    }
    if (j.value("version", 0) != 1) return;
    std::lock_guard lock(mu_);
    entries_.clear();
    for (const auto& [key, e] : j.at("entries").items()) {
        TuneEntry entry;
        entry.choice.provider = e.at("provider").get<std::string>();
        entry.choice.algorithm = e.at("algorithm").get<std::string>();
        entry.choice.layout = act_layout_from_name(e.at("layout").get<std::string>());
        entry.choice.orientation = e.at("orientation").get<std::string>() == "in_out"
                                       ? WeightOrientation::InOut
                                       : WeightOrientation::OutIn;
        entry.micros = e.at("micros").get<double>();
        entries_[key] = entry;
    }
}

void TuneCache::save(const std::filesystem::path& path) const {
    json j;
    j["version"] = 1;
    j["entries"] = json::object();
    {
        std::lock_guard lock(mu_);
        for (const auto& [key, e] : entries_) {
            json ej;
            ej["provider"] = e.choice.provider;
            ej["algorithm"] = e.choice.algorithm;
            ej["layout"] = act_layout_name(e.choice.layout);
            ej["orientation"] = orientation_name(e.choice.orientation);
            ej["micros"] = e.micros;
            j["entries"][key] = ej;
        }
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write tune cache " + path.string());
    f << j.dump(1);
}

// ---------------------------------------------------------------------------
// Auto-tuning
// ---------------------------------------------------------------------------

namespace {

// Measurements are serialized so concurrent tuning never cross-pollutes.
std::mutex g_measure_mu;

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

TuneOutcome autotune(const ProviderRegistry& reg, const ModelGraph& g, const LayerNode& node,
                     const std::vector<ImplChoice>& cands, int budget_runs, TuneCache& cache,
                     DeviceKind dev, FlavorId flavor, TimerFn timer) {
    if (cands.empty()) throw NoProviderError("autotune: empty candidate list");
    std::vector<TensorMeta> in_metas;
    for (const auto& in : node.inputs) in_metas.push_back(g.meta_of(in));
    const std::string key = TuneCache::key(node, in_metas, dev, flavor);

    if (auto hit = cache.find(key); hit && reg.has(hit->choice.provider)) {
        TuneOutcome out;
        out.choice = hit->choice;
        out.micros = hit->micros;
        out.cache_hit = true;
        return out;
    }
    if (cands.size() == 1) {
        TuneOutcome out;
        out.choice = cands[0];
        cache.put(key, {out.choice, 0.0});
        return out;
    }

    // synthetic inputs/params of the node's shapes, seeded by the key
    std::mt19937_64 rng(fnv1a(key));
    std::vector<Tensor> base_inputs;
    for (const auto& m : in_metas) {
        TensorMeta f32m = m;
        f32m.dtype = Dtype::F32;
        Tensor t(f32m);
        t.fill_uniform(rng, -1.0, 1.0);
        base_inputs.push_back(std::move(t));
    }
    std::vector<Tensor> base_params;
    for (const auto& p : node.params) {
        Tensor t(g.params.at(p).meta());
        t.fill_uniform(rng, -0.5, 0.5);
        base_params.push_back(t.meta().dtype == Dtype::F32 ? std::move(t) : t.to_dtype(Dtype::F32));
    }

    TuneOutcome out;
    double best = 0.0;
    std::lock_guard measure_lock(g_measure_mu);
    for (const auto& cand : cands) {
        std::vector<Tensor> staged_in;
        for (const auto& t : base_inputs) staged_in.push_back(t.relayout(materialize(t.meta(), cand.layout)));
        std::vector<Tensor> staged_par;
        for (size_t i = 0; i < base_params.size(); ++i) {
            if (i == 0 && base_params[i].meta().rank() == 2)
                staged_par.push_back(orient_weight(base_params[i], cand.orientation));
            else
                staged_par.push_back(base_params[i]);
        }
        auto run_once = [&]() -> double {
            if (timer) return timer(cand);
            std::vector<const Tensor*> ins, pars;
            for (const auto& t : staged_in) ins.push_back(&t);
            for (const auto& t : staged_par) pars.push_back(&t);
            auto t0 = std::chrono::steady_clock::now();
            reg.at(cand.provider).execute(cand, node, ins, pars);
            auto t1 = std::chrono::steady_clock::now();
            return std::chrono::duration<double, std::micro>(t1 - t0).count();
        };
        for (int i = 0; i < 3; ++i) run_once();  // warmup
        std::vector<double> times;
        for (int i = 0; i < budget_runs; ++i) times.push_back(run_once());
        out.measured_runs += budget_runs;
        std::nth_element(times.begin(), times.begin() + times.size() / 2, times.end());
        double median = times[times.size() / 2];
        if (out.choice.provider.empty() || median < best) {
            best = median;
            out.choice = cand;
            out.micros = median;
        }
    }
    cache.put(key, {out.choice, out.micros});
    return out;
}

Tensor execute_choice(const ProviderRegistry& reg, const ImplChoice& choice, const LayerNode& node,
                      const std::vector<const Tensor*>& inputs,
                      const std::vector<const Tensor*>& params) {
    const KernelProvider& p = reg.at(choice.provider);
    // materialize the weight orientation if the caller passed canonical storage
    if (!params.empty() && params[0]->meta().rank() == 2 &&
        orientation_of(params[0]->meta()) != choice.orientation) {
        Tensor w = orient_weight(*params[0], choice.orientation);
        std::vector<const Tensor*> fixed = params;
        fixed[0] = &w;
        return p.execute(choice, node, inputs, fixed);
    }
    return p.execute(choice, node, inputs, params);
}

// ---------------------------------------------------------------------------
// Layout planning
// ---------------------------------------------------------------------------

TensorMeta materialize(const TensorMeta& meta, ActLayout l) {
    if (!act_layout_applicable(meta, l)) l = ActLayout::ChannelsFirst;
    return apply_act_layout(meta, l);
}

namespace {

ActLayout infer_act_layout(const TensorMeta& m) {
    if (m.layout.kind == LayoutId::Kind::BlockedChannel) return ActLayout::Blocked8;
    int c = m.find(kChan);
    if (c < 0) return ActLayout::ChannelsFirst;
    auto pix = m.pixel_positions();
    if (!pix.empty() && c > pix.back()) return ActLayout::ChannelsLast;
    return ActLayout::ChannelsFirst;
}

bool blocked_safe_op(OpKind op) {
    switch (op) {
        case OpKind::Softmax:
        case OpKind::CrossEntropyLoss:
        case OpKind::SoftmaxBack:
        case OpKind::SoftmaxCeBack:
        case OpKind::CeBack:
            return false;
        default:
            return true;
    }
}

}  // namespace

std::vector<ActLayout> unit_layout_options(const ModelGraph& g, const dfp::ExecUnit& unit) {
    std::vector<ActLayout> out{ActLayout::ChannelsFirst, ActLayout::ChannelsLast};
    bool blocked_ok = true;
    for (const auto& id : unit.node_ids)
        if (!blocked_safe_op(g.find_node(id)->op)) blocked_ok = false;
    auto divisible = [&](const std::string& name) {
        const TensorMeta& m = g.meta_of(name);
        int c = m.find(kChan);
        return c < 0 || m.dims[c].extent % 8 == 0;
    };
    if (blocked_ok) {
        bool any_channel = false;
        for (const auto& name : unit.inputs) {
            if (!divisible(name)) blocked_ok = false;
            if (g.meta_of(name).find(kChan) >= 0) any_channel = true;
        }
        if (!divisible(unit.output)) blocked_ok = false;
        if (g.meta_of(unit.output).find(kChan) >= 0) any_channel = true;
        if (blocked_ok && any_channel) out.push_back(ActLayout::Blocked8);
    }
    return out;
}

LayoutPlan plan_layouts(const ModelGraph& g, const std::vector<dfp::ExecUnit>& units,
                        const std::map<std::string, ImplChoice>& choices) {
    struct UnitState {
        std::vector<ActLayout> options;  // singleton when fixed
        int decided = -1;
    };
    std::map<std::string, int> unit_of;  // output name -> unit index
    for (size_t i = 0; i < units.size(); ++i) unit_of[units[i].output] = static_cast<int>(i);

    std::vector<UnitState> st(units.size());
    for (size_t i = 0; i < units.size(); ++i) {
        if (units[i].kind == dfp::ExecUnit::Kind::DnnNode) {
            auto it = choices.find(units[i].output);
            st[i].options = {it != choices.end() ? it->second.layout : ActLayout::ChannelsFirst};
        } else {
            st[i].options = unit_layout_options(g, units[i]);
        }
    }

    struct Edge {
        int producer;  // -1: graph input
        int consumer;  // -2: graph output
        std::string tensor;
        TensorMeta meta;
        int64_t bytes;
        ActLayout fixed_producer = ActLayout::ChannelsFirst;  // for graph inputs
        ActLayout fixed_consumer = ActLayout::ChannelsFirst;  // for graph outputs
    };
    std::vector<Edge> edges;
    for (size_t i = 0; i < units.size(); ++i) {
        for (const auto& in : units[i].inputs) {
            Edge e;
            e.consumer = static_cast<int>(i);
            e.tensor = in;
            e.meta = g.meta_of(in);
            e.bytes = e.meta.bytes();
            auto it = unit_of.find(in);
            if (it != unit_of.end()) {
                e.producer = it->second;
            } else {
                e.producer = -1;
                e.fixed_producer = infer_act_layout(e.meta);
            }
            edges.push_back(std::move(e));
        }
    }
    // Graph outputs put no constraint on the plan; user-visible tensors are
    // canonicalized when they are materialized on the host.

    auto mismatch = [&](const Edge& e, ActLayout lp, ActLayout lc) -> int64_t {
        return materialize(e.meta, lp) == materialize(e.meta, lc) ? 0 : e.bytes;
    };

    // Chain shape: unit i consumes only unit i-1's output (plus graph inputs)
    // and feeds only unit i+1.
    bool chain = true;
    for (const auto& e : edges) {
        if (e.producer >= 0 && e.consumer >= 0 && e.consumer != e.producer + 1) chain = false;
    }
    std::vector<int> unit_consumers(units.size(), 0);
    for (const auto& e : edges)
        if (e.producer >= 0 && e.consumer >= 0) unit_consumers[static_cast<size_t>(e.producer)]++;
    for (int c : unit_consumers)
        if (c > 1) chain = false;

    if (chain && !units.empty()) {
        // exact DP over per-unit layout states
        const double INF = 1e30;
        std::vector<std::vector<double>> dp(units.size());
        std::vector<std::vector<int>> back(units.size());
        auto fixed_cost = [&](size_t i, ActLayout l) {
            double c = 0;
            for (const auto& e : edges) {
                if (e.consumer == static_cast<int>(i) && e.producer == -1)
                    c += static_cast<double>(mismatch(e, e.fixed_producer, l));
                if (e.producer == static_cast<int>(i) && e.consumer == -2)
                    c += static_cast<double>(mismatch(e, l, e.fixed_consumer));
            }
            return c;
        };
        for (size_t i = 0; i < units.size(); ++i) {
            dp[i].assign(st[i].options.size(), INF);
            back[i].assign(st[i].options.size(), -1);
            for (size_t s = 0; s < st[i].options.size(); ++s) {
                double base = fixed_cost(i, st[i].options[s]);
                if (i == 0) {
                    dp[i][s] = base;
                    continue;
                }
                const Edge* link = nullptr;
                for (const auto& e : edges)
                    if (e.producer == static_cast<int>(i) - 1 && e.consumer == static_cast<int>(i))
                        link = &e;
                for (size_t t = 0; t < st[i - 1].options.size(); ++t) {
                    double c = dp[i - 1][t] + base +
                               (link ? static_cast<double>(
                                           mismatch(*link, st[i - 1].options[t], st[i].options[s]))
                                     : 0.0);
                    if (c < dp[i][s]) {
                        dp[i][s] = c;
                        back[i][s] = static_cast<int>(t);
                    }
                }
            }
        }
        size_t last = units.size() - 1;
        int s = static_cast<int>(
            std::min_element(dp[last].begin(), dp[last].end()) - dp[last].begin());
        for (size_t i = units.size(); i-- > 0;) {
            st[i].decided = s;
            s = back[i][static_cast<size_t>(s)];
        }
    } else {
        // greedy: topological scan, majority vote over decided neighbors,
        // producer edges win ties
        for (size_t i = 0; i < units.size(); ++i) {
            if (st[i].options.size() == 1) {
                st[i].decided = 0;
                continue;
            }
            int64_t best_score = -1, best_prod = -1;
            int pick = 0;
            for (size_t s = 0; s < st[i].options.size(); ++s) {
                ActLayout l = st[i].options[s];
                int64_t score = 0, prod_score = 0;
                for (const auto& e : edges) {
                    if (e.consumer == static_cast<int>(i)) {
                        ActLayout lp;
                        if (e.producer == -1) lp = e.fixed_producer;
                        else if (st[static_cast<size_t>(e.producer)].decided >= 0)
                            lp = st[static_cast<size_t>(e.producer)]
                                     .options[static_cast<size_t>(
                                         st[static_cast<size_t>(e.producer)].decided)];
                        else continue;
                        if (mismatch(e, lp, l) == 0) {
                            score += e.bytes;
                            prod_score += e.bytes;
                        }
                    }
                    if (e.producer == static_cast<int>(i) && e.consumer == -2)
                        if (mismatch(e, l, e.fixed_consumer) == 0) score += e.bytes;
                }
                if (score > best_score || (score == best_score && prod_score > best_prod)) {
                    best_score = score;
                    best_prod = prod_score;
                    pick = static_cast<int>(s);
                }
            }
            st[i].decided = pick;
        }
    }

    LayoutPlan plan;
    auto layout_of = [&](int unit) {
        return st[static_cast<size_t>(unit)]
            .options[static_cast<size_t>(st[static_cast<size_t>(unit)].decided)];
    };
    for (size_t i = 0; i < units.size(); ++i) plan.unit_layout[units[i].output] = layout_of(static_cast<int>(i));
    for (const auto& e : edges) {
        ActLayout lp = e.producer == -1 ? e.fixed_producer : layout_of(e.producer);
        ActLayout lc = e.consumer == -2 ? e.fixed_consumer : layout_of(e.consumer);
        int64_t cost = mismatch(e, lp, lc);
        if (cost > 0) {
            LayoutPlan::Reorder r;
            r.tensor = e.tensor;
            r.consumer = e.consumer == -2 ? "" : units[static_cast<size_t>(e.consumer)].output;
            r.from = materialize(e.meta, lp);
            r.to = materialize(e.meta, lc);
            r.bytes = e.bytes;
            plan.reorders.push_back(std::move(r));
            plan.total_cost += cost;
        }
    }
    return plan;
}

}  // namespace sol::dnn
