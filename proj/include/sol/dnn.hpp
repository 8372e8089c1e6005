// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Heavy-layer dispatch: pluggable kernel providers for Conv2d/Linear (and
// their gradients), a short auto-tuner over provider x algorithm x layout x
// weight orientation, a persistent tuning cache, and whole-graph memory
// layout planning that minimizes reorder bytes.

#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "sol/dfp.hpp"
#include "sol/model.hpp"
#include "sol/passes.hpp"

namespace sol::dnn {

enum class WeightOrientation : uint8_t { OutIn, InOut };

const char* orientation_name(WeightOrientation o);

struct ImplChoice {
    std::string provider;
    std::string algorithm;
    ActLayout layout = ActLayout::ChannelsFirst;
    WeightOrientation orientation = WeightOrientation::OutIn;

    bool operator==(const ImplChoice&) const = default;
    std::string str() const;
};

// Weight tensors keep their dim tags; orientation is a dim-order relayout
// ([out,in] vs [in,out] storage), so gradients stay canonical.
Tensor orient_weight(const Tensor& w, WeightOrientation o);
WeightOrientation orientation_of(const TensorMeta& w);

class KernelProvider {
public:
    virtual ~KernelProvider() = default;
    virtual std::string name() const = 0;
    virtual bool supports(OpKind op) const = 0;
    virtual std::vector<std::string> algorithms(OpKind op) const = 0;
    // Activation layouts this provider can consume for `node`, applicability
    // filtered (e.g. blocked channels need extent % 8 == 0).
    virtual std::vector<ActLayout> activation_layouts(OpKind op, const TensorMeta& in_meta) const = 0;
    // Preference-ordered weight orientations; device dependent.
    virtual std::vector<WeightOrientation> orientations(OpKind op, DeviceKind dev,
                                                        FlavorId flavor) const = 0;
    // Rough relative cost per (op, algorithm); heuristic mode picks the min.
    virtual double relative_cost(OpKind op, const std::string& algorithm) const { return 1.0; }

    // Inputs/params arrive in the choice's materialized layouts; the result
    // carries the choice's output layout.
    virtual Tensor execute(const ImplChoice& choice, const LayerNode& node,
                           const std::vector<const Tensor*>& inputs,
                           const std::vector<const Tensor*>& params) const = 0;
};

class ProviderRegistry {
public:
    void register_provider(std::shared_ptr<KernelProvider> p);
    const KernelProvider& at(const std::string& name) const;
    std::vector<const KernelProvider*> list() const;
    bool has(const std::string& name) const;

    // direct + im2col + blocked_gemm
    static ProviderRegistry with_builtins();

private:
    std::vector<std::shared_ptr<KernelProvider>> providers_;
};

// Cross product of applicable providers/algorithms/layouts/orientations in
// registration order. Throws NoProviderError when empty (depthwise convs are
// deliberately unserved; the fusion engine owns them).
std::vector<ImplChoice> candidates(const ProviderRegistry& reg, const ModelGraph& g,
                                   const LayerNode& node, DeviceKind dev, FlavorId flavor);

// Heuristic (no-tuning) pick: minimal relative_cost, ties to candidate order.
ImplChoice heuristic_choice(const ProviderRegistry& reg, const std::vector<ImplChoice>& cands,
                            const LayerNode& node);

struct TuneEntry {
    ImplChoice choice;
    double micros = 0.0;
};

// Keyed by layer hyperparameters (never node ids); concurrent readers,
// exclusive writers; persists as versioned JSON.
class TuneCache {
public:
    static std::string key(const LayerNode& node, const std::vector<TensorMeta>& input_metas,
                           DeviceKind dev, FlavorId flavor);

    std::optional<TuneEntry> find(const std::string& key) const;
    void put(const std::string& key, TuneEntry entry);
    size_t size() const;

    void load(const std::filesystem::path& path);   // missing file -> empty cache
    void save(const std::filesystem::path& path) const;

private:
    mutable std::mutex mu_;
    std::map<std::string, TuneEntry> entries_;
};

struct TuneOutcome {
    ImplChoice choice;
    double micros = 0.0;
    int measured_runs = 0;  // 0 on cache hit or single candidate
    bool cache_hit = false;
};

// Measures micros for one run of a candidate; injectable for deterministic
// tests. The default executes the candidate on seeded synthetic input.
using TimerFn = std::function<double(const ImplChoice&)>;

// Runs each candidate `budget_runs` times (plus warmup) and keeps the median;
// the winner is memoized in the cache under the hyperparameter key.
TuneOutcome autotune(const ProviderRegistry& reg, const ModelGraph& g, const LayerNode& node,
                     const std::vector<ImplChoice>& cands, int budget_runs, TuneCache& cache,
                     DeviceKind dev, FlavorId flavor, TimerFn timer = nullptr);

// Executes a heavy node under a choice. Weights not yet matching the chosen
// orientation are materialized on the fly; planned execution paths pass
// pre-oriented tensors instead.
Tensor execute_choice(const ProviderRegistry& reg, const ImplChoice& choice, const LayerNode& node,
                      const std::vector<const Tensor*>& inputs,
                      const std::vector<const Tensor*>& params);

// ---------------------------------------------------------------------------
// Layout planning
// ---------------------------------------------------------------------------

// Every unit operates in one activation layout; mismatched edges insert a
// reorder costing the tensor's bytes. Heavy units are pinned to their tuned
// choice; fused units are free. Chains solve exactly by DP; general DAGs use
// a producer-biased majority vote.
struct LayoutPlan {
    std::map<std::string, ActLayout> unit_layout;  // keyed by unit output name
    struct Reorder {
        std::string tensor;    // edge tensor name
        std::string consumer;  // consuming unit output name ("" = graph output)
        TensorMeta from, to;
        int64_t bytes = 0;
    };
    std::vector<Reorder> reorders;
    int64_t total_cost = 0;
};

// Materializes `meta` in layout `l`, falling back to channels-first when the
// layout does not apply (no channel dim / extent not divisible).
TensorMeta materialize(const TensorMeta& meta, ActLayout l);

// Layouts a fused unit may operate in (blocked only for channel-preserving
// member sets with divisible extents).
std::vector<ActLayout> unit_layout_options(const ModelGraph& g, const dfp::ExecUnit& unit);

LayoutPlan plan_layouts(const ModelGraph& g, const std::vector<dfp::ExecUnit>& units,
                        const std::map<std::string, ImplChoice>& choices);

}  // namespace sol::dnn
