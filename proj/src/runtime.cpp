// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0

#include "sol/runtime.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "sol/dfp.hpp"
#include "sol/errors.hpp"

namespace sol::rt {

using nlohmann::json;

VirtualPtr VirtualPtr::operator+(uint64_t delta) const {
    uint64_t off = static_cast<uint64_t>(offset()) + delta;
    if (off > 0xffffffffull)
        throw ArithmeticOverflowError("virtual pointer offset overflow: " + std::to_string(off));
    return from_parts(ref(), static_cast<uint32_t>(off));
}

void DeviceConfig::validate() const {
    if (launch_latency_us <= 0 || copy_bandwidth_bytes_per_us <= 0 || packed_overhead_us <= 0 ||
        pack_threshold_bytes == 0 || work_cost_per_element_us < 0)
        throw std::invalid_argument("device config fields must be positive");
}

std::string DeviceConfig::to_json() const {
    json j;
    j["kind"] = device_kind_name(kind);
    j["launch_latency_us"] = launch_latency_us;
    j["copy_bandwidth_bytes_per_us"] = copy_bandwidth_bytes_per_us;
    j["packed_overhead_us"] = packed_overhead_us;
    j["pack_threshold_bytes"] = pack_threshold_bytes;
    j["work_cost_per_element_us"] = work_cost_per_element_us;
    j["coalescing"] = coalescing;
    return j.dump(2);
}

DeviceConfig DeviceConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw IoError(std::string("device config parse error: ") + e.what());
    }
    DeviceConfig c;
    if (j.value("kind", "sim") == std::string("host")) c.kind = DeviceKind::Host;
    c.launch_latency_us = j.value("launch_latency_us", c.launch_latency_us);
    c.copy_bandwidth_bytes_per_us = j.value("copy_bandwidth_bytes_per_us", c.copy_bandwidth_bytes_per_us);
    c.packed_overhead_us = j.value("packed_overhead_us", c.packed_overhead_us);
    c.pack_threshold_bytes = j.value("pack_threshold_bytes", c.pack_threshold_bytes);
    c.work_cost_per_element_us = j.value("work_cost_per_element_us", c.work_cost_per_element_us);
    c.coalescing = j.value("coalescing", c.coalescing);
    c.validate();
    return c;
}

DeviceConfig DeviceConfig::from_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open device config " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_json(ss.str());
}

std::string TransferStats::to_json() const {
    json j;
    j["h2d_bytes"] = h2d_bytes;
    j["d2h_bytes"] = d2h_bytes;
    j["h2d_ops"] = h2d_ops;
    j["d2h_ops"] = d2h_ops;
    j["packed_transfers"] = packed_transfers;
    j["launches"] = launches;
    j["sim_time_us"] = sim_time_us;
    return j.dump(2);
}

// ---------------------------------------------------------------------------

namespace {

struct ResolutionError {
    QueueError kind;
    std::string message;
};

}  // namespace

struct CommandQueue::Command {
    enum class Kind : uint8_t { Malloc, Free, CopyH2D, CopyD2H, Launch, LaunchHeavy, Barrier };
    Kind kind = Kind::Barrier;
    uint32_t ref = 0;       // Malloc/Free
    uint64_t bytes = 0;     // Malloc / copies
    VirtualPtr dst, src;    // copies
    std::vector<uint8_t> host_snapshot;  // CopyH2D payload
    void* host_dst = nullptr;            // CopyD2H target
    std::shared_ptr<const KernelIR> kernel;
    std::vector<VirtualPtr> args;
    std::vector<std::pair<VirtualPtr, uint64_t>> heavy_args;
    int64_t work_elements = 0;
    std::function<void(const std::vector<float*>&)> heavy_fn;
    std::string tag;
};

CommandQueue::CommandQueue(DeviceConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (cfg_.kind == DeviceKind::SimAccel) worker_ = std::thread([this] { worker_main(); });
}

CommandQueue::~CommandQueue() {
    if (worker_.joinable()) {
        {
            std::lock_guard lock(mu_);
            stop_ = true;
        }
        cv_worker_.notify_all();
        worker_.join();
    }
}

// Storage maps are touched only by the single executor (the worker thread, or
// the caller's thread for the eager host device), so resolution runs unlocked.
std::pair<float*, int64_t> CommandQueue::resolve(VirtualPtr p, uint64_t bytes) {
    auto it = allocs_.find(p.ref());
    if (it == allocs_.end()) {
        if (freed_.count(p.ref()))
            throw ResolutionError{QueueError::UseAfterFree,
                                  "use after free of ref " + std::to_string(p.ref())};
        throw ResolutionError{QueueError::UnknownRef, "unknown ref " + std::to_string(p.ref())};
    }
    if (static_cast<uint64_t>(p.offset()) + bytes > it->second.size())
        throw ResolutionError{QueueError::OutOfBounds,
                              "access beyond allocation " + std::to_string(p.ref())};
    return {reinterpret_cast<float*>(it->second.data() + p.offset()),
            static_cast<int64_t>((it->second.size() - p.offset()) / sizeof(float))};
}

// Applies the cost model to the open run of adjacent copies. Caller holds mu_.
void CommandQueue::close_copy_run() {
    if (run_copies_ == 0) return;
    if (cfg_.coalescing && run_bytes_ >= cfg_.pack_threshold_bytes) {
        stats_.sim_time_us += cfg_.packed_overhead_us +
                              static_cast<double>(run_bytes_) / cfg_.copy_bandwidth_bytes_per_us;
        stats_.packed_transfers += 1;
    } else {
        stats_.sim_time_us += static_cast<double>(run_copies_) * cfg_.launch_latency_us;
    }
    run_copies_ = 0;
    run_bytes_ = 0;
}

void CommandQueue::execute(Command& cmd) {
    using K = Command::Kind;
    {
        std::lock_guard lock(mu_);
        if (!deferred_error_.ok()) return;  // skip everything after the first error
    }
    const bool sim = cfg_.kind == DeviceKind::SimAccel;
    try {
        switch (cmd.kind) {
            case K::Malloc:
                allocs_[cmd.ref].resize(cmd.bytes);
                freed_.erase(cmd.ref);
                break;
            case K::Free: {
                if (!allocs_.count(cmd.ref))
                    throw ResolutionError{QueueError::UnknownRef,
                                          "free of unknown ref " + std::to_string(cmd.ref)};
                allocs_.erase(cmd.ref);
                freed_.insert(cmd.ref);
                break;
            }
            case K::CopyH2D: {
                if (cmd.bytes == 0) break;
                auto [ptr, len] = resolve(cmd.dst, cmd.bytes);
                std::memcpy(ptr, cmd.host_snapshot.data(), cmd.bytes);
                if (sim) {
                    std::lock_guard lock(mu_);
                    stats_.h2d_bytes += cmd.bytes;
                    stats_.h2d_ops += 1;
                    run_copies_ += 1;
                    run_bytes_ += cmd.bytes;
                }
                break;
            }
            case K::CopyD2H: {
                if (cmd.bytes == 0) break;
                auto [ptr, len] = resolve(cmd.src, cmd.bytes);
                std::memcpy(cmd.host_dst, ptr, cmd.bytes);
                if (sim) {
                    std::lock_guard lock(mu_);
                    stats_.d2h_bytes += cmd.bytes;
                    stats_.d2h_ops += 1;
                    run_copies_ += 1;
                    run_bytes_ += cmd.bytes;
                }
                break;
            }
            case K::Launch: {
                {
                    std::lock_guard lock(mu_);
                    close_copy_run();
                }
                const KernelIR& k = *cmd.kernel;
                std::vector<dfp::BufferRef> ins;
                for (size_t i = 0; i < k.inputs.size(); ++i) {
                    auto [ptr, len] = resolve(
                        cmd.args[i], static_cast<uint64_t>(k.inputs[i].meta.element_count()) * 4);
                    ins.push_back({ptr, len});
                }
                auto [optr, olen] = resolve(
                    cmd.args.back(), static_cast<uint64_t>(k.output.meta.element_count()) * 4);
                dfp::interpret(k, ins, {optr, olen});
                if (sim) {
                    std::lock_guard lock(mu_);
                    stats_.launches += 1;
                    stats_.sim_time_us += cfg_.launch_latency_us +
                                          static_cast<double>(k.output.meta.element_count()) *
                                              cfg_.work_cost_per_element_us;
                }
                break;
            }
            case K::LaunchHeavy: {
                {
                    std::lock_guard lock(mu_);
                    close_copy_run();
                }
                std::vector<float*> ptrs;
                for (const auto& [vp, bytes] : cmd.heavy_args)
                    ptrs.push_back(resolve(vp, bytes).first);
                cmd.heavy_fn(ptrs);
                if (sim) {
                    std::lock_guard lock(mu_);
                    stats_.launches += 1;
                    stats_.sim_time_us +=
                        cfg_.launch_latency_us +
                        static_cast<double>(cmd.work_elements) * cfg_.work_cost_per_element_us;
                }
                break;
            }
            case K::Barrier: {
                std::lock_guard lock(mu_);
                close_copy_run();
                break;
            }
        }
    } catch (const ResolutionError& err) {
        std::lock_guard lock(mu_);
        if (deferred_error_.ok()) deferred_error_ = {err.kind, err.message};
    }
}

void CommandQueue::worker_main() {
    std::unique_lock lock(mu_);
    while (true) {
        cv_worker_.wait(lock, [this] { return stop_ || !pending_.empty(); });
        if (pending_.empty() && stop_) return;
        if (pending_.empty()) continue;
        Command cmd = std::move(pending_.front());
        pending_.pop_front();
        in_flight_ = true;
        lock.unlock();
        execute(cmd);
        lock.lock();
        in_flight_ = false;
        if (pending_.empty()) cv_producer_.notify_all();
    }
}

void CommandQueue::enqueue(Command cmd) {
    if (cfg_.kind == DeviceKind::Host) {
        execute(cmd);  // eager, zero cost, caller's context
        return;
    }
    {
        std::lock_guard lock(mu_);
        pending_.push_back(std::move(cmd));
    }
    cv_worker_.notify_one();
}

VirtualPtr CommandQueue::malloc_async(uint64_t bytes) {
    if (bytes == 0 || bytes > 0xffffffffull)
        throw std::invalid_argument("malloc_async: bytes must be in (0, 2^32)");
    uint32_t ref;
    {
        std::lock_guard lock(mu_);
        if (next_ref_ > 0xffffffffull) throw OutOfRefsError("virtual pointer refs exhausted");
        ref = static_cast<uint32_t>(next_ref_++);
    }
    Command cmd;
    cmd.kind = Command::Kind::Malloc;
    cmd.ref = ref;
    cmd.bytes = bytes;
    enqueue(std::move(cmd));
    return VirtualPtr::from_parts(ref, 0);
}

void CommandQueue::free_async(VirtualPtr p) {
    if (p.offset() != 0)
        throw std::invalid_argument("free_async frees whole allocations (offset must be 0)");
    Command cmd;
    cmd.kind = Command::Kind::Free;
    cmd.ref = p.ref();
    enqueue(std::move(cmd));
}

void CommandQueue::memcpy_h2d(VirtualPtr dst, const void* src, uint64_t bytes) {
    Command cmd;
    cmd.kind = Command::Kind::CopyH2D;
    cmd.dst = dst;
    cmd.bytes = bytes;
    cmd.host_snapshot.assign(static_cast<const uint8_t*>(src),
                             static_cast<const uint8_t*>(src) + bytes);
    enqueue(std::move(cmd));
}

void CommandQueue::memcpy_d2h(void* dst, VirtualPtr src, uint64_t bytes) {
    Command cmd;
    cmd.kind = Command::Kind::CopyD2H;
    cmd.src = src;
    cmd.host_dst = dst;
    cmd.bytes = bytes;
    enqueue(std::move(cmd));
}

void CommandQueue::launch(std::shared_ptr<const KernelIR> kernel, std::vector<VirtualPtr> args) {
    if (!kernel) throw std::invalid_argument("launch: null kernel");
    if (args.size() != kernel->inputs.size() + 1)
        throw std::invalid_argument("launch: kernel '" + kernel->name + "' expects " +
                                    std::to_string(kernel->inputs.size() + 1) + " args, got " +
                                    std::to_string(args.size()));
    Command cmd;
    cmd.kind = Command::Kind::Launch;
    cmd.kernel = std::move(kernel);
    cmd.args = std::move(args);
    enqueue(std::move(cmd));
}

void CommandQueue::launch_heavy(std::string tag, std::vector<std::pair<VirtualPtr, uint64_t>> args,
                                int64_t work_elements,
                                std::function<void(const std::vector<float*>&)> fn) {
    Command cmd;
    cmd.kind = Command::Kind::LaunchHeavy;
    cmd.tag = std::move(tag);
    cmd.heavy_args = std::move(args);
    cmd.work_elements = work_elements;
    cmd.heavy_fn = std::move(fn);
    enqueue(std::move(cmd));
}

void CommandQueue::barrier() {
    Command cmd;
    cmd.kind = Command::Kind::Barrier;
    enqueue(std::move(cmd));
}

SyncResult CommandQueue::synchronize() {
    std::unique_lock lock(mu_);
    cv_producer_.wait(lock, [this] { return pending_.empty() && !in_flight_; });
    close_copy_run();  // flush the trailing copy run
    return deferred_error_;
}

TransferStats CommandQueue::stats() const {
    std::lock_guard lock(mu_);
    return stats_;
}

}  // namespace sol::rt
