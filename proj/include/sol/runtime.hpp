// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Device abstraction: a zero-copy host device and a simulated accelerator
// behind an asynchronous command queue. Memory lives behind 64-bit virtual
// pointers (32-bit allocation reference | 32-bit byte offset) so malloc/free
// never synchronize. Adjacent memcopies coalesce into packed transfers under
// a deterministic latency/bandwidth cost model with a simulated clock.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <thread>

#include "sol/kernel_ir.hpp"
#include "sol/passes.hpp"

namespace sol::rt {

class VirtualPtr {
public:
    VirtualPtr() = default;

    static VirtualPtr from_parts(uint32_t ref, uint32_t offset) {
        VirtualPtr p;
        p.bits_ = (static_cast<uint64_t>(ref) << 32) | offset;
        return p;
    }
    static VirtualPtr from_value(uint64_t bits) {
        VirtualPtr p;
        p.bits_ = bits;
        return p;
    }

    uint32_t ref() const { return static_cast<uint32_t>(bits_ >> 32); }
    uint32_t offset() const { return static_cast<uint32_t>(bits_ & 0xffffffffull); }
    uint64_t value() const { return bits_; }
    bool is_null() const { return ref() == 0; }

    // Offset arithmetic; never carries into the ref bits.
    VirtualPtr operator+(uint64_t delta) const;

    bool operator==(const VirtualPtr&) const = default;

private:
    uint64_t bits_ = 0;  // ref 0 is reserved as null
};

struct DeviceConfig {
    DeviceKind kind = DeviceKind::SimAccel;
    double launch_latency_us = 5.0;
    double copy_bandwidth_bytes_per_us = 8000.0;
    double packed_overhead_us = 20.0;
    uint64_t pack_threshold_bytes = 65536;
    double work_cost_per_element_us = 0.0;
    bool coalescing = true;

    void validate() const;
    std::string to_json() const;
    static DeviceConfig from_json(const std::string& text);
    static DeviceConfig from_file(const std::filesystem::path& path);
};

struct TransferStats {
    uint64_t h2d_bytes = 0;
    uint64_t d2h_bytes = 0;
    uint64_t h2d_ops = 0;
    uint64_t d2h_ops = 0;
    uint64_t packed_transfers = 0;
    uint64_t launches = 0;
    double sim_time_us = 0.0;

    std::string to_json() const;
};

enum class QueueError : uint8_t { None, UseAfterFree, UnknownRef, OutOfBounds };

struct SyncResult {
    QueueError error = QueueError::None;
    std::string message;
    bool ok() const { return error == QueueError::None; }
};

// FIFO command queue with one background worker. Enqueue calls never block on
// device work; resolution errors surface at synchronize (first error wins,
// later commands are skipped). Host-kind queues execute eagerly at zero cost.
class CommandQueue {
public:
    explicit CommandQueue(DeviceConfig cfg);
    ~CommandQueue();
    CommandQueue(const CommandQueue&) = delete;
    CommandQueue& operator=(const CommandQueue&) = delete;

    const DeviceConfig& config() const { return cfg_; }

    VirtualPtr malloc_async(uint64_t bytes);
    void free_async(VirtualPtr p);
    // H2D snapshots the host range at enqueue time; D2H writes at execution.
    void memcpy_h2d(VirtualPtr dst, const void* src, uint64_t bytes);
    void memcpy_d2h(void* dst, VirtualPtr src, uint64_t bytes);
    // args bind kernel inputs in order, then the output.
    void launch(std::shared_ptr<const KernelIR> kernel, std::vector<VirtualPtr> args);
    // Provider-dispatched work: `fn` receives resolved buffers for `args`.
    void launch_heavy(std::string tag, std::vector<std::pair<VirtualPtr, uint64_t>> args,
                      int64_t work_elements, std::function<void(const std::vector<float*>&)> fn);
    void barrier();

    SyncResult synchronize();
    TransferStats stats() const;

private:
    struct Command;
    void enqueue(Command cmd);
    void execute(Command& cmd);
    void close_copy_run();
    void worker_main();
    std::pair<float*, int64_t> resolve(VirtualPtr p, uint64_t bytes);  // throws resolution errors

    DeviceConfig cfg_;
    mutable std::mutex mu_;
    std::condition_variable cv_producer_, cv_worker_;
    std::deque<Command> pending_;
    bool stop_ = false;
    bool in_flight_ = false;
    std::thread worker_;

    // device memory: ref -> storage
    std::map<uint32_t, std::vector<uint8_t>> allocs_;
    std::set<uint32_t> freed_;
    uint64_t next_ref_ = 1;

    TransferStats stats_;
    SyncResult deferred_error_;
    // open copy-run accounting
    uint64_t run_copies_ = 0;
    uint64_t run_bytes_ = 0;
};

}  // namespace sol::rt
