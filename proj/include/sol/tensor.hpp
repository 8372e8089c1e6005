// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tagged tensor shapes, memory layouts and the host-side tensor payload.
// Dimensions carry a purpose (None / Channel / Pixel) plus an index, so layers
// can locate e.g. "all channel dims" regardless of how the dims are ordered.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace sol {

enum class DimPurpose : uint8_t { None, Channel, Pixel };

struct DimTag {
    DimPurpose purpose = DimPurpose::None;
    int index = 0;

    bool operator==(const DimTag&) const = default;
    bool operator<(const DimTag& o) const {
        if (purpose != o.purpose) return purpose < o.purpose;
        return index < o.index;
    }
    // "N0", "C0", "P1", ...
    std::string str() const;
};

// Batch is the None-purpose index-0 dim by convention.
inline constexpr DimTag kBatchTag{DimPurpose::None, 0};

struct Dim {
    DimTag tag;
    int64_t extent = 0;  // 0 marks the symbolic batch extent before inference

    bool operator==(const Dim&) const = default;
};

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

inline size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }

// Memory layout of a tensor. RowMajorTagged follows the dim order as listed in
// TensorMeta::dims. BlockedChannel keeps that order but splits C0 into
// C0/block outer x block innermost.
struct LayoutId {
    enum class Kind : uint8_t { RowMajorTagged, BlockedChannel };
    Kind kind = Kind::RowMajorTagged;
    uint32_t block = 0;

    bool operator==(const LayoutId&) const = default;
    std::string str() const;
};

struct TensorMeta {
    std::vector<Dim> dims;
    Dtype dtype = Dtype::F32;
    LayoutId layout;

    bool operator==(const TensorMeta&) const = default;

    int64_t rank() const { return static_cast<int64_t>(dims.size()); }
    int64_t element_count() const;
    int64_t bytes() const { return element_count() * static_cast<int64_t>(dtype_size(dtype)); }
    bool has_symbolic_batch() const;

    // Position of a tagged dim, -1 if absent.
    int find(DimTag tag) const;
    int64_t extent_of(DimTag tag, int64_t fallback = -1) const;
    std::vector<int> pixel_positions() const;
    std::vector<int> channel_positions() const;

    // Memory offset (in elements) of logical coordinates given in dims order.
    int64_t offset(const std::vector<int64_t>& coords) const;
    // Decompose a dense logical index (row-major over dims order) into coords.
    std::vector<int64_t> unravel(int64_t logical) const;

    // Checks dim-tag uniqueness, index contiguity per purpose and layout
    // divisibility; throws ShapeMismatchError on violation.
    void validate() const;

    std::string str() const;
};

// Convenience builders; spatial metas list dims as [N0, C0, P1, P0] (channels
// first) or [N0, P1, P0, C0] (channels last).
TensorMeta make_meta(std::vector<Dim> dims, Dtype dtype = Dtype::F32);
TensorMeta meta_nchw(int64_t n, int64_t c, int64_t h, int64_t w, Dtype dtype = Dtype::F32);
TensorMeta meta_nc(int64_t n, int64_t c, Dtype dtype = Dtype::F32);
TensorMeta meta_scalar(Dtype dtype = Dtype::F32);
// 1-D..4-D untagged (None-purpose) metas for parameters.
TensorMeta meta_plain(std::vector<int64_t> extents, Dtype dtype = Dtype::F32);

// The activation-layout states the planner and kernel providers reason about.
// ChannelsFirst/ChannelsLast are dim orderings under RowMajorTagged;
// Blocked8 is channels-first with a BlockedChannel(8) layout.
enum class ActLayout : uint8_t { ChannelsFirst, ChannelsLast, Blocked8 };

const char* act_layout_name(ActLayout l);
ActLayout act_layout_from_name(const std::string& name);
// Rewrites meta to the given activation layout (reorders dims / sets layout).
// Metas without pixel or channel dims come back unchanged except for Blocked8,
// which requires a channel dim divisible by 8.
TensorMeta apply_act_layout(const TensorMeta& m, ActLayout l);
bool act_layout_applicable(const TensorMeta& m, ActLayout l);

// Host tensor: meta + payload stored in memory order per meta.layout.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(TensorMeta meta);

    const TensorMeta& meta() const { return meta_; }
    TensorMeta& meta() { return meta_; }
    int64_t element_count() const { return meta_.element_count(); }

    float* f32() { return f32_.data(); }
    const float* f32() const { return f32_.data(); }
    double* f64() { return f64_.data(); }
    const double* f64() const { return f64_.data(); }
    const void* raw() const;
    void* raw();

    // Logical accessors (coords in dims order); dtype-dispatching.
    double get(const std::vector<int64_t>& coords) const;
    void set(const std::vector<int64_t>& coords, double v);
    double get_mem(int64_t mem_index) const;
    void set_mem(int64_t mem_index, double v);

    void fill(double v);
    void fill_uniform(std::mt19937_64& rng, double lo, double hi);

    // Copy into a new layout/dim-order; logical content preserved. The target
    // meta must carry the same (tag, extent) set.
    Tensor relayout(const TensorMeta& target) const;
    Tensor to_dtype(Dtype d) const;

    bool same_logical(const Tensor& other, double tol, double* max_rel = nullptr) const;

private:
    TensorMeta meta_;
    std::vector<float> f32_;
    std::vector<double> f64_;
};

// Max over elements of |a-b| / max(|a|, |b|, 1e-8); tensors must be logically
// congruent (same tag/extent set, any layout).
double max_rel_err(const Tensor& a, const Tensor& b);

// Kernel-oracle comparison: like max_rel_err but elements below 1% of the
// tensor scale are measured against that floor instead, since f32
// accumulation-order noise is absolute, not relative, at zero crossings.
double oracle_err(const Tensor& a, const Tensor& b);

}  // namespace sol
