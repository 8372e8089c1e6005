// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// The user-facing middleware surface: compile a model into per-device
// execution plans, select a device, run inference or training in transparent
// or native offloading mode with parameter-context caching, and export a
// self-contained deployment bundle.

#pragma once

#include <memory>
#include <mutex>

#include "sol/autodiff.hpp"
#include "sol/dfp.hpp"
#include "sol/dnn.hpp"
#include "sol/model_io.hpp"
#include "sol/runtime.hpp"

namespace sol::fe {

struct DeviceSelection {
    DeviceKind kind = DeviceKind::Host;
    int index = 0;
};

struct OptimizeOptions {
    int64_t batch = 1;
    FlavorId flavor = flavor_scalar();
    bool autotune = true;
    int tune_budget = 5;  // measured runs per candidate (3 warmups besides)
    bool train = false;   // also compile forward+backward for training
    std::filesystem::path tune_cache_path;  // empty: in-memory only

    uint64_t fingerprint() const;
};

enum class TrainMode : uint8_t { Transparent, Native };

// One executable step of a device plan.
struct Step {
    enum class Kind : uint8_t { Dfp, Heavy, Reorder };
    Kind kind = Kind::Dfp;
    std::string output;                // buffer it writes
    std::vector<std::string> inputs;   // activation buffers, kernel order
    std::vector<std::string> params;   // parameter buffers, kernel order
    std::shared_ptr<const KernelIR> kernel;  // Dfp / Reorder
    LayerNode node;                    // Heavy
    dnn::ImplChoice choice;            // Heavy
};

struct DevicePlan {
    DeviceKind kind = DeviceKind::Host;
    FlavorId flavor;
    ModelGraph graph;  // compiled graph this plan executes
    std::vector<Step> steps;
    std::map<std::string, TensorMeta> buffers;     // every buffer's meta (f32)
    std::map<std::string, std::string> exec_param_of;  // param name -> exec buffer name
    dnn::LayoutPlan layout_plan;
    int dfp_units = 0, dnn_units = 0;
};

struct CompileSummary {
    int units = 0, dfp_units = 0, dnn_units = 0;
    int kernels = 0, reorders = 0;
    int tuner_runs = 0, tune_cache_hits = 0;
    double compile_ms = 0.0;
    bool cached = false;
};

// Process-wide middleware state: configured devices, the active selection,
// providers, tuning cache and the compiled-plan cache.
class Engine {
public:
    static Engine& instance();

    void configure(rt::DeviceConfig sim_cfg, int sim_count = 1);
    void set_device(DeviceSelection sel);  // throws UnknownDeviceError
    DeviceSelection device() const;

    rt::CommandQueue& sim_queue(int index);
    const rt::DeviceConfig& sim_config() const { return sim_cfg_; }
    dnn::ProviderRegistry& providers() { return providers_; }
    dnn::TuneCache& tune_cache() { return tune_cache_; }

    // drops queues, compiled-model cache and the device selection (tests)
    void reset();

    std::shared_ptr<class OptimizedModel> cached_model(uint64_t key);
    void cache_model(uint64_t key, std::shared_ptr<class OptimizedModel> m);

private:
    Engine();
    mutable std::mutex mu_;
    rt::DeviceConfig sim_cfg_;
    int sim_count_ = 1;
    DeviceSelection selection_;
    std::vector<std::unique_ptr<rt::CommandQueue>> queues_;
    dnn::ProviderRegistry providers_ = dnn::ProviderRegistry::with_builtins();
    dnn::TuneCache tune_cache_;
    std::map<uint64_t, std::shared_ptr<class OptimizedModel>> model_cache_;
};

class OptimizedModel {
public:
    // Use optimize(); public for make_shared.
    OptimizedModel(ModelGraph base, OptimizeOptions options);

    const CompileSummary& summary() const { return summary_; }
    const ModelGraph& graph() const { return base_; }
    const DevicePlan& plan(DeviceKind kind, bool training = false) const;
    uint64_t param_version() const { return param_version_; }

    // Replaces the host master parameters; all device contexts invalidate.
    void load_state(const std::map<std::string, Tensor>& weights);

    // Inference on the engine's selected device; inputs and outputs live on
    // the host, outputs come back in canonical layout.
    TensorMap predict(const TensorMap& inputs);

    // One SGD step; returns the loss. Transparent keeps the optimizer on the
    // host (gradients round-trip); Native updates parameters on the device.
    float train_step(const TensorMap& batch, float lr, TrainMode mode);

    // Pulls device-resident parameters back to the host master copy (after
    // native training); no-op when the host copy is current.
    void sync_host_params();
    const TensorMap& host_params();

    // Writes manifest + weights + kernel sources; returns the manifest path.
    std::filesystem::path export_bundle(const std::filesystem::path& dir, bool force = false);

private:
    friend std::shared_ptr<OptimizedModel> optimize(const std::filesystem::path&,
                                                    const std::filesystem::path&,
                                                    const OptimizeOptions&);
    struct ParamContext {
        uint64_t built_version = 0;
        std::map<std::string, rt::VirtualPtr> ptrs;  // exec buffer name -> device ptr
        bool valid(uint64_t version) const { return built_version == version; }
    };

    void build_plans();
    DevicePlan build_plan(const ModelGraph& g, DeviceKind kind) ;
    void ensure_context(DevicePlan& plan, ParamContext& ctx);
    TensorMap run_host(const DevicePlan& plan, const TensorMap& inputs,
                       const std::vector<std::string>& wanted);
    TensorMap run_device(DevicePlan& plan, ParamContext& ctx, const TensorMap& inputs,
                         const std::vector<std::string>& wanted, bool keep_grads,
                         TensorMap* grads_out, std::optional<float> native_lr);

    ModelGraph base_;
    OptimizeOptions options_;
    autodiff::TrainingGraph train_;
    bool has_train_ = false;
    std::map<DeviceKind, DevicePlan> fwd_plans_;
    std::map<DeviceKind, DevicePlan> train_plans_;
    TensorMap master_params_;
    uint64_t param_version_ = 1;
    bool device_authoritative_ = false;
    ParamContext fwd_ctx_, train_ctx_;
    std::map<uint64_t, std::shared_ptr<const KernelIR>> sgd_kernels_;  // keyed by lr bits + size
    CompileSummary summary_;
    std::mutex mu_;
};

// Compile pipeline: load -> infer_shapes -> rewrite pipeline -> per-device
// clone -> partition -> tune -> plan layouts -> lower. Results are cached on
// (structure, input sizes, options); a repeated call returns the cached plan.
std::shared_ptr<OptimizedModel> optimize(const std::filesystem::path& model_path,
                                         const std::filesystem::path& weights_path,
                                         const OptimizeOptions& options);
// Same, for an already-loaded graph (tests, tools).
std::shared_ptr<OptimizedModel> optimize_graph(ModelGraph g, const OptimizeOptions& options);

void set_device(DeviceSelection sel);

// Replays an exported bundle on the host; bit-identical to the plan it was
// exported from.
TensorMap run_bundle(const std::filesystem::path& bundle_dir, const TensorMap& inputs);

}  // namespace sol::fe
