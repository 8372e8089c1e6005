// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0

#include "sol/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <set>

#include "sol/errors.hpp"

namespace sol {

std::string DimTag::str() const {
    const char* p = purpose == DimPurpose::None ? "N" : purpose == DimPurpose::Channel ? "C" : "P";
    return p + std::to_string(index);
}

std::string LayoutId::str() const {
    if (kind == Kind::RowMajorTagged) return "rowmajor";
    return "blocked" + std::to_string(block);
}

int64_t TensorMeta::element_count() const {
    int64_t n = 1;
    for (const auto& d : dims) n *= d.extent;
    return n;
}

bool TensorMeta::has_symbolic_batch() const {
    for (const auto& d : dims)
        if (d.extent == 0) return true;
    return false;
}

int TensorMeta::find(DimTag tag) const {
    for (size_t i = 0; i < dims.size(); ++i)
        if (dims[i].tag == tag) return static_cast<int>(i);
    return -1;
}

int64_t TensorMeta::extent_of(DimTag tag, int64_t fallback) const {
    int i = find(tag);
    return i < 0 ? fallback : dims[i].extent;
}

std::vector<int> TensorMeta::pixel_positions() const {
    std::vector<int> out;
    for (size_t i = 0; i < dims.size(); ++i)
        if (dims[i].tag.purpose == DimPurpose::Pixel) out.push_back(static_cast<int>(i));
    return out;
}

std::vector<int> TensorMeta::channel_positions() const {
    std::vector<int> out;
    for (size_t i = 0; i < dims.size(); ++i)
        if (dims[i].tag.purpose == DimPurpose::Channel) out.push_back(static_cast<int>(i));
    return out;
}

int64_t TensorMeta::offset(const std::vector<int64_t>& coords) const {
    if (layout.kind == LayoutId::Kind::RowMajorTagged) {
        int64_t off = 0;
        for (size_t i = 0; i < dims.size(); ++i) {
            off = off * dims[i].extent + coords[i];
        }
        return off;
    }
    // BlockedChannel: C0 coordinate c maps to outer c/b at the C0 slot and
    // inner c%b in an implicit innermost dim.
    const int c_pos = find(DimTag{DimPurpose::Channel, 0});
    const int64_t b = layout.block;
    int64_t off = 0;
    for (size_t i = 0; i < dims.size(); ++i) {
        int64_t extent = dims[i].extent;
        int64_t coord = coords[i];
        if (static_cast<int>(i) == c_pos) {
            extent = dims[i].extent / b;
            coord = coords[i] / b;
        }
        off = off * extent + coord;
    }
    off = off * b + (c_pos >= 0 ? coords[c_pos] % b : 0);
    return off;
}

std::vector<int64_t> TensorMeta::unravel(int64_t logical) const {
    std::vector<int64_t> coords(dims.size(), 0);
    for (size_t i = dims.size(); i-- > 0;) {
        coords[i] = logical % dims[i].extent;
        logical /= dims[i].extent;
    }
    return coords;
}

void TensorMeta::validate() const {
    std::set<std::pair<int, int>> seen;
    std::map<int, std::vector<int>> by_purpose;
    for (const auto& d : dims) {
        if (d.extent < 0) throw ShapeMismatchError("negative extent in " + str());
        auto key = std::make_pair(static_cast<int>(d.tag.purpose), d.tag.index);
        if (!seen.insert(key).second)
            throw ShapeMismatchError("duplicate dim tag " + d.tag.str() + " in " + str());
        by_purpose[key.first].push_back(d.tag.index);
    }
    for (auto& [purpose, idxs] : by_purpose) {
        std::sort(idxs.begin(), idxs.end());
        for (size_t i = 0; i < idxs.size(); ++i)
            if (idxs[i] != static_cast<int>(i))
                throw ShapeMismatchError("non-contiguous dim indices in " + str());
    }
    if (layout.kind == LayoutId::Kind::BlockedChannel) {
        if (layout.block == 0) throw ShapeMismatchError("zero block in layout");
        int c = find(DimTag{DimPurpose::Channel, 0});
        if (c < 0 || dims[c].extent % layout.block != 0)
            throw ShapeMismatchError("blocked layout requires channel extent divisible by block: " + str());
    }
}

std::string TensorMeta::str() const {
    std::string s = "[";
    for (size_t i = 0; i < dims.size(); ++i) {
        if (i) s += ",";
        s += dims[i].tag.str() + ":" + (dims[i].extent == 0 ? "B" : std::to_string(dims[i].extent));
    }
    s += "]";
    s += dtype == Dtype::F32 ? "f32" : "f64";
    if (layout.kind != LayoutId::Kind::RowMajorTagged) s += "/" + layout.str();
    return s;
}

TensorMeta make_meta(std::vector<Dim> dims, Dtype dtype) {
    TensorMeta m;
    m.dims = std::move(dims);
    m.dtype = dtype;
    return m;
}

TensorMeta meta_nchw(int64_t n, int64_t c, int64_t h, int64_t w, Dtype dtype) {
    return make_meta({{kBatchTag, n},
                      {{DimPurpose::Channel, 0}, c},
                      {{DimPurpose::Pixel, 1}, h},
                      {{DimPurpose::Pixel, 0}, w}},
                     dtype);
}

TensorMeta meta_nc(int64_t n, int64_t c, Dtype dtype) {
    return make_meta({{kBatchTag, n}, {{DimPurpose::Channel, 0}, c}}, dtype);
}

TensorMeta meta_scalar(Dtype dtype) { return make_meta({}, dtype); }

TensorMeta meta_plain(std::vector<int64_t> extents, Dtype dtype) {
    std::vector<Dim> dims;
    int n = static_cast<int>(extents.size());
    for (int i = 0; i < n; ++i)
        dims.push_back({{DimPurpose::None, n - 1 - i}, extents[i]});
    return make_meta(std::move(dims), dtype);
}

const char* act_layout_name(ActLayout l) {
    switch (l) {
        case ActLayout::ChannelsFirst: return "nchw";
        case ActLayout::ChannelsLast: return "nhwc";
        case ActLayout::Blocked8: return "nchw8c";
    }
    return "?";
}

ActLayout act_layout_from_name(const std::string& name) {
    if (name == "nchw") return ActLayout::ChannelsFirst;
    if (name == "nhwc") return ActLayout::ChannelsLast;
    if (name == "nchw8c") return ActLayout::Blocked8;
    throw ShapeMismatchError("unknown layout name: " + name);
}

static std::vector<Dim> ordered_dims(const TensorMeta& m, bool channels_last) {
    std::vector<Dim> none, chan, pix;
    for (const auto& d : m.dims) {
        if (d.tag.purpose == DimPurpose::None) none.push_back(d);
        else if (d.tag.purpose == DimPurpose::Channel) chan.push_back(d);
        else pix.push_back(d);
    }
    auto desc = [](const Dim& a, const Dim& b) { return b.tag.index < a.tag.index; };
    std::sort(none.begin(), none.end(), desc);
    std::sort(chan.begin(), chan.end(), desc);
    std::sort(pix.begin(), pix.end(), desc);
    std::vector<Dim> out = none;
    if (channels_last) {
        out.insert(out.end(), pix.begin(), pix.end());
        out.insert(out.end(), chan.begin(), chan.end());
    } else {
        out.insert(out.end(), chan.begin(), chan.end());
        out.insert(out.end(), pix.begin(), pix.end());
    }
    return out;
}

bool act_layout_applicable(const TensorMeta& m, ActLayout l) {
    if (l != ActLayout::Blocked8) return true;
    int c = m.find(DimTag{DimPurpose::Channel, 0});
    return c >= 0 && m.dims[c].extent % 8 == 0;
}

TensorMeta apply_act_layout(const TensorMeta& m, ActLayout l) {
    TensorMeta out = m;
    out.layout = LayoutId{};
    out.dims = ordered_dims(m, l == ActLayout::ChannelsLast);
    if (l == ActLayout::Blocked8) {
        if (!act_layout_applicable(m, l))
            throw ShapeMismatchError("blocked layout not applicable to " + m.str());
        out.layout = LayoutId{LayoutId::Kind::BlockedChannel, 8};
    }
    return out;
}

Tensor::Tensor(TensorMeta meta) : meta_(std::move(meta)) {
    const auto n = static_cast<size_t>(meta_.element_count());
    if (meta_.dtype == Dtype::F32) f32_.assign(n, 0.0f);
    else f64_.assign(n, 0.0);
}

const void* Tensor::raw() const {
    return meta_.dtype == Dtype::F32 ? static_cast<const void*>(f32_.data())
                                     : static_cast<const void*>(f64_.data());
}

void* Tensor::raw() {
    return meta_.dtype == Dtype::F32 ? static_cast<void*>(f32_.data())
                                     : static_cast<void*>(f64_.data());
}

double Tensor::get(const std::vector<int64_t>& coords) const { return get_mem(meta_.offset(coords)); }
void Tensor::set(const std::vector<int64_t>& coords, double v) { set_mem(meta_.offset(coords), v); }

double Tensor::get_mem(int64_t i) const {
    return meta_.dtype == Dtype::F32 ? static_cast<double>(f32_[static_cast<size_t>(i)])
                                     : f64_[static_cast<size_t>(i)];
}

void Tensor::set_mem(int64_t i, double v) {
    if (meta_.dtype == Dtype::F32) f32_[static_cast<size_t>(i)] = static_cast<float>(v);
    else f64_[static_cast<size_t>(i)] = v;
}

void Tensor::fill(double v) {
    for (int64_t i = 0; i < element_count(); ++i) set_mem(i, v);
}

void Tensor::fill_uniform(std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (int64_t i = 0; i < element_count(); ++i) set_mem(i, dist(rng));
}

// Logical congruence: same multiset of (tag, extent); coords map by tag.
static std::vector<int> tag_map(const TensorMeta& from, const TensorMeta& to) {
    std::vector<int> map(from.dims.size(), -1);
    for (size_t i = 0; i < from.dims.size(); ++i) {
        int j = to.find(from.dims[i].tag);
        if (j < 0 || to.dims[j].extent != from.dims[i].extent)
            throw ShapeMismatchError("layout change across incongruent metas: " + from.str() +
                                     " vs " + to.str());
        map[i] = j;
    }
    return map;
}

Tensor Tensor::relayout(const TensorMeta& target) const {
    Tensor out(target);
    if (meta_.dims.empty()) {
        out.set_mem(0, get_mem(0));
        return out;
    }
    const auto map = tag_map(meta_, target);
    const int64_t n = element_count();
    std::vector<int64_t> tcoords(target.dims.size(), 0);
    for (int64_t i = 0; i < n; ++i) {
        auto coords = meta_.unravel(i);
        for (size_t d = 0; d < coords.size(); ++d) tcoords[static_cast<size_t>(map[d])] = coords[d];
        out.set(tcoords, get(coords));
    }
    return out;
}

Tensor Tensor::to_dtype(Dtype d) const {
    if (d == meta_.dtype) return *this;
    TensorMeta m = meta_;
    m.dtype = d;
    Tensor out(m);
    for (int64_t i = 0; i < element_count(); ++i) out.set_mem(i, get_mem(i));
    return out;
}

bool Tensor::same_logical(const Tensor& other, double tol, double* out_err) const {
    double err = max_rel_err(*this, other);
    if (out_err) *out_err = err;
    return err <= tol;
}

static double compare_impl(const Tensor& a, const Tensor& b, double floor) {
    if (a.element_count() != b.element_count())
        throw ShapeMismatchError("element count mismatch in comparison");
    double worst = 0.0;
    if (a.meta().dims.empty()) {
        double x = a.get_mem(0), y = b.get_mem(0);
        return std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor});
    }
    const auto map = tag_map(a.meta(), b.meta());
    std::vector<int64_t> bcoords(b.meta().dims.size(), 0);
    for (int64_t i = 0; i < a.element_count(); ++i) {
        auto coords = a.meta().unravel(i);
        for (size_t d = 0; d < coords.size(); ++d) bcoords[static_cast<size_t>(map[d])] = coords[d];
        double x = a.get(coords), y = b.get(bcoords);
        double rel = std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor});
        worst = std::max(worst, rel);
    }
    return worst;
}

double max_rel_err(const Tensor& a, const Tensor& b) { return compare_impl(a, b, 1e-8); }

double oracle_err(const Tensor& a, const Tensor& b) {
    double scale = 0.0;
    for (int64_t i = 0; i < a.element_count(); ++i) scale = std::max(scale, std::abs(a.get_mem(i)));
    for (int64_t i = 0; i < b.element_count(); ++i) scale = std::max(scale, std::abs(b.get_mem(i)));
    return compare_impl(a, b, std::max(0.01 * scale, 1e-8));
}

}  // namespace sol
