// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Built-in kernel providers. These are honest, measurably different
// implementations (naive loops, im2col+gemm, tiled gemm) standing in for
// vendor libraries, all accumulating in f32.

#include <cstring>

#include "sol/dnn.hpp"
#include "sol/errors.hpp"

namespace sol::dnn {

namespace {

constexpr DimTag kChan{DimPurpose::Channel, 0};
constexpr DimTag kP1{DimPurpose::Pixel, 1};
constexpr DimTag kP0{DimPurpose::Pixel, 0};

// Activation accessor over (n, c, h, w); handles any row-major dim order and
// channels-first blocked layouts.
struct View4 {
    float* p = nullptr;
    int64_t N = 1, C = 1, H = 1, W = 1;
    int64_t sn = 0, sc = 0, sh = 0, sw = 0;
    int64_t block = 0;

    explicit View4(const Tensor& t) : View4(const_cast<Tensor&>(t)) {}
    explicit View4(Tensor& t) {
        const TensorMeta& m = t.meta();
        p = t.f32();
        N = m.extent_of(kBatchTag, 1);
        C = m.extent_of(kChan, 1);
        H = m.extent_of(kP1, 1);
        W = m.extent_of(kP0, 1);
        if (m.layout.kind == LayoutId::Kind::BlockedChannel) {
            block = m.layout.block;
            return;
        }
        // row-major strides by position, mapped onto tags
        int64_t stride = 1;
        std::vector<int64_t> strides(m.dims.size());
        for (size_t i = m.dims.size(); i-- > 0;) {
            strides[i] = stride;
            stride *= m.dims[i].extent;
        }
        for (size_t i = 0; i < m.dims.size(); ++i) {
            if (m.dims[i].tag == kBatchTag) sn = strides[i];
            else if (m.dims[i].tag == kChan) sc = strides[i];
            else if (m.dims[i].tag == kP1) sh = strides[i];
            else if (m.dims[i].tag == kP0) sw = strides[i];
        }
    }

    int64_t off(int64_t n, int64_t c, int64_t h, int64_t w) const {
        if (block)
            return (((n * (C / block) + c / block) * H + h) * W + w) * block + c % block;
        return n * sn + c * sc + h * sh + w * sw;
    }
    float at(int64_t n, int64_t c, int64_t h, int64_t w) const { return p[off(n, c, h, w)]; }
    void set(int64_t n, int64_t c, int64_t h, int64_t w, float v) { p[off(n, c, h, w)] = v; }
    void add(int64_t n, int64_t c, int64_t h, int64_t w, float v) { p[off(n, c, h, w)] += v; }
};

// Weight accessor honoring the stored orientation.
struct WView {
    const float* p;
    int64_t out, in;
    bool out_major;

    explicit WView(const Tensor& w) : p(w.f32()) {
        out_major = orientation_of(w.meta()) == WeightOrientation::OutIn;
        out = out_major ? w.meta().dims[0].extent : w.meta().dims[1].extent;
        in = out_major ? w.meta().dims[1].extent : w.meta().dims[0].extent;
    }
    float at(int64_t o, int64_t i) const { return out_major ? p[o * in + i] : p[i * out + o]; }
};

struct ConvShape {
    int64_t N, Cin, Hin, Win, Cout, Hout, Wout, icg, ocg;
};

ConvShape conv_shape(const LayerNode& node, const TensorMeta& in_meta, const TensorMeta& out_meta) {
    ConvShape s;
    s.N = in_meta.extent_of(kBatchTag, 1);
    s.Cin = in_meta.extent_of(kChan);
    s.Hin = in_meta.extent_of(kP1);
    s.Win = in_meta.extent_of(kP0);
    s.Cout = out_meta.extent_of(kChan);
    s.Hout = out_meta.extent_of(kP1);
    s.Wout = out_meta.extent_of(kP0);
    s.icg = s.Cin / node.attrs.groups;
    s.ocg = s.Cout / node.attrs.groups;
    return s;
}

Tensor make_out(const TensorMeta& canonical, ActLayout layout) {
    TensorMeta m = materialize(canonical, layout);
    m.dtype = Dtype::F32;
    return Tensor(m);
}

void conv_direct(const LayerNode& node, const Tensor& x, const Tensor* w, const Tensor* b,
                 Tensor& y) {
    const Attrs& a = node.attrs;
    ConvShape s = conv_shape(node, x.meta(), y.meta());
    View4 xv(x), yv(y);
    const float* wp = w->f32();
    const float* bp = b ? b->f32() : nullptr;
    for (int64_t n = 0; n < s.N; ++n)
        for (int64_t oc = 0; oc < s.Cout; ++oc) {
            const int64_t g = oc / s.ocg;
            for (int64_t oh = 0; oh < s.Hout; ++oh)
                for (int64_t ow = 0; ow < s.Wout; ++ow) {
                    float acc = bp ? bp[oc] : 0.0f;
                    for (int64_t ic = 0; ic < s.icg; ++ic)
                        for (int64_t kh = 0; kh < a.kh; ++kh) {
                            int64_t ih = oh * a.sh - a.ph + kh;
                            if (ih < 0 || ih >= s.Hin) continue;
                            for (int64_t kw = 0; kw < a.kw; ++kw) {
                                int64_t iw = ow * a.sw - a.pw + kw;
                                if (iw < 0 || iw >= s.Win) continue;
                                acc += xv.at(n, g * s.icg + ic, ih, iw) *
                                       wp[((oc * s.icg + ic) * a.kh + kh) * a.kw + kw];
                            }
                        }
                    yv.set(n, oc, oh, ow, acc);
                }
        }
}

// column matrix per group: rows (n, oh, ow), cols (ic, kh, kw)
std::vector<float> build_col(const LayerNode& node, const Tensor& x, const ConvShape& s,
                             int64_t group) {
    const Attrs& a = node.attrs;
    View4 xv(x);
    const int64_t rows = s.N * s.Hout * s.Wout;
    const int64_t cols = s.icg * a.kh * a.kw;
    std::vector<float> col(static_cast<size_t>(rows * cols), 0.0f);
    int64_t r = 0;
    for (int64_t n = 0; n < s.N; ++n)
        for (int64_t oh = 0; oh < s.Hout; ++oh)
            for (int64_t ow = 0; ow < s.Wout; ++ow, ++r) {
                int64_t q = 0;
                for (int64_t ic = 0; ic < s.icg; ++ic)
                    for (int64_t kh = 0; kh < a.kh; ++kh)
                        for (int64_t kw = 0; kw < a.kw; ++kw, ++q) {
                            int64_t ih = oh * a.sh - a.ph + kh;
                            int64_t iw = ow * a.sw - a.pw + kw;
                            if (ih < 0 || ih >= s.Hin || iw < 0 || iw >= s.Win) continue;
                            col[static_cast<size_t>(r * cols + q)] =
                                xv.at(n, group * s.icg + ic, ih, iw);
                        }
            }
    return col;
}

void conv_im2col(const LayerNode& node, const Tensor& x, const Tensor* w, const Tensor* b,
                 Tensor& y) {
    const Attrs& a = node.attrs;
    ConvShape s = conv_shape(node, x.meta(), y.meta());
    View4 yv(y);
    const float* wp = w->f32();
    const float* bp = b ? b->f32() : nullptr;
    const int64_t cols = s.icg * a.kh * a.kw;
    for (int64_t g = 0; g < a.groups; ++g) {
        std::vector<float> col = build_col(node, x, s, g);
        for (int64_t ocl = 0; ocl < s.ocg; ++ocl) {
            const int64_t oc = g * s.ocg + ocl;
            const float* wrow = wp + oc * cols;
            int64_t r = 0;
            for (int64_t n = 0; n < s.N; ++n)
                for (int64_t oh = 0; oh < s.Hout; ++oh)
                    for (int64_t ow = 0; ow < s.Wout; ++ow, ++r) {
                        float acc = bp ? bp[oc] : 0.0f;
                        const float* crow = col.data() + r * cols;
                        for (int64_t q = 0; q < cols; ++q) acc += wrow[q] * crow[q];
                        yv.set(n, oc, oh, ow, acc);
                    }
        }
    }
}

void conv_back_x_direct(const LayerNode& node, const Tensor& delta, const Tensor* w, Tensor& dx) {
    const Attrs& a = node.attrs;
    ConvShape s = conv_shape(node, dx.meta(), delta.meta());
    View4 dv(delta), xv(dx);
    const float* wp = w->f32();
    for (int64_t n = 0; n < s.N; ++n)
        for (int64_t ic = 0; ic < s.Cin; ++ic) {
            const int64_t g = ic / s.icg;
            for (int64_t ih = 0; ih < s.Hin; ++ih)
                for (int64_t iw = 0; iw < s.Win; ++iw) {
                    float acc = 0.0f;
                    for (int64_t ocl = 0; ocl < s.ocg; ++ocl)
                        for (int64_t kh = 0; kh < a.kh; ++kh) {
                            int64_t num_h = ih + a.ph - kh;
                            if (num_h % a.sh) continue;
                            int64_t oh = num_h / a.sh;
                            if (oh < 0 || oh >= s.Hout) continue;
                            for (int64_t kw = 0; kw < a.kw; ++kw) {
                                int64_t num_w = iw + a.pw - kw;
                                if (num_w % a.sw) continue;
                                int64_t ow = num_w / a.sw;
                                if (ow < 0 || ow >= s.Wout) continue;
                                int64_t oc = g * s.ocg + ocl;
                                acc += dv.at(n, oc, oh, ow) *
                                       wp[((oc * s.icg + (ic - g * s.icg)) * a.kh + kh) * a.kw + kw];
                            }
                        }
                    xv.set(n, ic, ih, iw, acc);
                }
        }
}

void conv_back_w_direct(const LayerNode& node, const Tensor& delta, const Tensor& x, Tensor& dw) {
    const Attrs& a = node.attrs;
    ConvShape s = conv_shape(node, x.meta(), delta.meta());
    View4 dv(delta), xv(x);
    float* wp = dw.f32();
    for (int64_t oc = 0; oc < s.Cout; ++oc) {
        const int64_t g = oc / s.ocg;
        for (int64_t ic = 0; ic < s.icg; ++ic)
            for (int64_t kh = 0; kh < a.kh; ++kh)
                for (int64_t kw = 0; kw < a.kw; ++kw) {
                    float acc = 0.0f;
                    for (int64_t n = 0; n < s.N; ++n)
                        for (int64_t oh = 0; oh < s.Hout; ++oh) {
                            int64_t ih = oh * a.sh - a.ph + kh;
                            if (ih < 0 || ih >= s.Hin) continue;
                            for (int64_t ow = 0; ow < s.Wout; ++ow) {
                                int64_t iw = ow * a.sw - a.pw + kw;
                                if (iw < 0 || iw >= s.Win) continue;
                                acc += dv.at(n, oc, oh, ow) * xv.at(n, g * s.icg + ic, ih, iw);
                            }
                        }
                    wp[((oc * s.icg + ic) * a.kh + kh) * a.kw + kw] = acc;
                }
    }
}

void conv_back_x_im2col(const LayerNode& node, const Tensor& delta, const Tensor* w, Tensor& dx) {
    // dcol = W^T * delta, scattered back (col2im)
    const Attrs& a = node.attrs;
    ConvShape s = conv_shape(node, dx.meta(), delta.meta());
    View4 dv(delta), xv(dx);
    const float* wp = w->f32();
    const int64_t cols = s.icg * a.kh * a.kw;
    for (int64_t i = 0; i < dx.element_count(); ++i) dx.f32()[i] = 0.0f;
    for (int64_t g = 0; g < a.groups; ++g) {
        for (int64_t n = 0; n < s.N; ++n)
            for (int64_t oh = 0; oh < s.Hout; ++oh)
                for (int64_t ow = 0; ow < s.Wout; ++ow) {
                    for (int64_t q = 0; q < cols; ++q) {
                        int64_t ic = q / (a.kh * a.kw);
                        int64_t kh = (q / a.kw) % a.kh;
                        int64_t kw = q % a.kw;
                        int64_t ih = oh * a.sh - a.ph + kh;
                        int64_t iw = ow * a.sw - a.pw + kw;
                        if (ih < 0 || ih >= s.Hin || iw < 0 || iw >= s.Win) continue;
                        float acc = 0.0f;
                        for (int64_t ocl = 0; ocl < s.ocg; ++ocl) {
                            int64_t oc = g * s.ocg + ocl;
                            acc += wp[oc * cols + q] * dv.at(n, oc, oh, ow);
                        }
                        xv.add(n, g * s.icg + ic, ih, iw, acc);
                    }
                }
    }
}

void conv_back_w_im2col(const LayerNode& node, const Tensor& delta, const Tensor& x, Tensor& dw) {
    const Attrs& a = node.attrs;
    ConvShape s = conv_shape(node, x.meta(), delta.meta());
    View4 dv(delta);
    float* wp = dw.f32();
    const int64_t cols = s.icg * a.kh * a.kw;
    for (int64_t g = 0; g < a.groups; ++g) {
        std::vector<float> col = build_col(node, x, s, g);
        for (int64_t ocl = 0; ocl < s.ocg; ++ocl) {
            const int64_t oc = g * s.ocg + ocl;
            for (int64_t q = 0; q < cols; ++q) {
                float acc = 0.0f;
                int64_t r = 0;
                for (int64_t n = 0; n < s.N; ++n)
                    for (int64_t oh = 0; oh < s.Hout; ++oh)
                        for (int64_t ow = 0; ow < s.Wout; ++ow, ++r)
                            acc += dv.at(n, oc, oh, ow) * col[static_cast<size_t>(r * cols + q)];
                wp[oc * cols + q] = acc;
            }
        }
    }
}

struct LinShape {
    int64_t N, I, O;
};

LinShape lin_shape(const Tensor& x, const Tensor& y) {
    return {x.meta().extent_of(kBatchTag, 1), x.meta().extent_of(kChan),
            y.meta().extent_of(kChan)};
}

void linear_naive(const Tensor& x, const WView& w, const float* b, Tensor& y, LinShape s) {
    View4 xv(x), yv(y);
    for (int64_t n = 0; n < s.N; ++n)
        for (int64_t o = 0; o < s.O; ++o) {
            float acc = b ? b[o] : 0.0f;
            for (int64_t i = 0; i < s.I; ++i) acc += xv.at(n, i, 0, 0) * w.at(o, i);
            yv.set(n, o, 0, 0, acc);
        }
}

void linear_blocked(const Tensor& x, const WView& w, const float* b, Tensor& y, LinShape s) {
    constexpr int64_t T = 32;
    View4 xv(x), yv(y);
    for (int64_t n = 0; n < s.N; ++n)
        for (int64_t o = 0; o < s.O; ++o) yv.set(n, o, 0, 0, b ? b[o] : 0.0f);
    for (int64_t n = 0; n < s.N; ++n)
        for (int64_t ot = 0; ot < s.O; ot += T)
            for (int64_t it = 0; it < s.I; it += T) {
                int64_t oe = std::min(ot + T, s.O), ie = std::min(it + T, s.I);
                for (int64_t o = ot; o < oe; ++o) {
                    float acc = 0.0f;
                    for (int64_t i = it; i < ie; ++i) acc += xv.at(n, i, 0, 0) * w.at(o, i);
                    yv.set(n, o, 0, 0, yv.at(n, o, 0, 0) + acc);
                }
            }
}

void linear_back_x(const Tensor& delta, const WView& w, Tensor& dx, bool blocked) {
    LinShape s{dx.meta().extent_of(kBatchTag, 1), dx.meta().extent_of(kChan),
               delta.meta().extent_of(kChan)};
    View4 dv(delta), xv(dx);
    constexpr int64_t T = 32;
    if (!blocked) {
        for (int64_t n = 0; n < s.N; ++n)
            for (int64_t i = 0; i < s.I; ++i) {
                float acc = 0.0f;
                for (int64_t o = 0; o < s.O; ++o) acc += dv.at(n, o, 0, 0) * w.at(o, i);
                xv.set(n, i, 0, 0, acc);
            }
        return;
    }
    for (int64_t n = 0; n < s.N; ++n)
        for (int64_t i = 0; i < s.I; ++i) xv.set(n, i, 0, 0, 0.0f);
    for (int64_t n = 0; n < s.N; ++n)
        for (int64_t it = 0; it < s.I; it += T)
            for (int64_t ot = 0; ot < s.O; ot += T) {
                int64_t ie = std::min(it + T, s.I), oe = std::min(ot + T, s.O);
                for (int64_t i = it; i < ie; ++i) {
                    float acc = 0.0f;
                    for (int64_t o = ot; o < oe; ++o) acc += dv.at(n, o, 0, 0) * w.at(o, i);
                    xv.set(n, i, 0, 0, xv.at(n, i, 0, 0) + acc);
                }
            }
}

void linear_back_w(const Tensor& delta, const Tensor& x, Tensor& dw) {
    int64_t N = x.meta().extent_of(kBatchTag, 1);
    int64_t I = x.meta().extent_of(kChan);
    int64_t O = delta.meta().extent_of(kChan);
    View4 dv(delta), xv(x);
    float* wp = dw.f32();  // canonical [O, I]
    for (int64_t o = 0; o < O; ++o)
        for (int64_t i = 0; i < I; ++i) {
            float acc = 0.0f;
            for (int64_t n = 0; n < N; ++n) acc += dv.at(n, o, 0, 0) * xv.at(n, i, 0, 0);
            wp[o * I + i] = acc;
        }
}

// ---------------------------------------------------------------------------

class DirectProvider : public KernelProvider {
public:
    std::string name() const override { return "direct"; }
    bool supports(OpKind op) const override {
        switch (op) {
            case OpKind::Conv2d:
            case OpKind::Conv2dBackX:
            case OpKind::Conv2dBackW:
            case OpKind::Linear:
            case OpKind::LinearBackX:
            case OpKind::LinearBackW:
                return true;
            default:
                return false;
        }
    }
    std::vector<std::string> algorithms(OpKind op) const override {
        switch (op) {
            case OpKind::Conv2d:
            case OpKind::Conv2dBackX:
            case OpKind::Conv2dBackW:
                return {"direct"};
            default:
                return {"naive_gemm"};
        }
    }
    std::vector<ActLayout> activation_layouts(OpKind op, const TensorMeta& in_meta) const override {
        if (op == OpKind::Linear || op == OpKind::LinearBackX || op == OpKind::LinearBackW)
            return {ActLayout::ChannelsFirst};
        return {ActLayout::ChannelsFirst, ActLayout::ChannelsLast};
    }
    std::vector<WeightOrientation> orientations(OpKind op, DeviceKind dev,
                                                FlavorId flavor) const override {
        if (op == OpKind::Conv2d || op == OpKind::Conv2dBackX || op == OpKind::Conv2dBackW)
            return {WeightOrientation::OutIn};
        // transposed weights win on long-vector devices
        if (dev == DeviceKind::SimAccel && flavor.kind == FlavorId::Kind::LongVector)
            return {WeightOrientation::InOut, WeightOrientation::OutIn};
        return {WeightOrientation::OutIn, WeightOrientation::InOut};
    }
    double relative_cost(OpKind op, const std::string&) const override { return 1.0; }

    Tensor execute(const ImplChoice& c, const LayerNode& node,
                   const std::vector<const Tensor*>& ins,
                   const std::vector<const Tensor*>& params) const override {
        switch (node.op) {
            case OpKind::Conv2d: {
                Tensor y = make_out(*node.out_meta, c.layout);
                conv_direct(node, *ins[0], params[0], node.attrs.has_bias ? params[1] : nullptr, y);
                return y;
            }
            case OpKind::Conv2dBackX: {
                Tensor dx = make_out(*node.saved_meta, c.layout);
                conv_back_x_direct(node, *ins[0], params[0], dx);
                return dx;
            }
            case OpKind::Conv2dBackW: {
                Tensor dw(*node.out_meta);
                conv_back_w_direct(node, *ins[0], *ins[1], dw);
                return dw;
            }
            case OpKind::Linear: {
                Tensor y = make_out(*node.out_meta, c.layout);
                WView w(*params[0]);
                linear_naive(*ins[0], w, node.attrs.has_bias ? params[1]->f32() : nullptr, y,
                             lin_shape(*ins[0], y));
                return y;
            }
            case OpKind::LinearBackX: {
                Tensor dx = make_out(*node.saved_meta, c.layout);
                WView w(*params[0]);
                linear_back_x(*ins[0], w, dx, false);
                return dx;
            }
            case OpKind::LinearBackW: {
                Tensor dw(*node.out_meta);
                linear_back_w(*ins[0], *ins[1], dw);
                return dw;
            }
            default:
                throw NoProviderError("direct: unsupported op");
        }
    }
};

class Im2colProvider : public KernelProvider {
public:
    std::string name() const override { return "im2col"; }
    bool supports(OpKind op) const override {
        return op == OpKind::Conv2d || op == OpKind::Conv2dBackX || op == OpKind::Conv2dBackW;
    }
    std::vector<std::string> algorithms(OpKind) const override { return {"im2col_gemm"}; }
    std::vector<ActLayout> activation_layouts(OpKind, const TensorMeta& in_meta) const override {
        std::vector<ActLayout> out{ActLayout::ChannelsFirst};
        if (act_layout_applicable(in_meta, ActLayout::Blocked8)) out.push_back(ActLayout::Blocked8);
        return out;
    }
    std::vector<WeightOrientation> orientations(OpKind, DeviceKind, FlavorId) const override {
        return {WeightOrientation::OutIn};
    }
    double relative_cost(OpKind, const std::string&) const override { return 0.8; }

    Tensor execute(const ImplChoice& c, const LayerNode& node,
                   const std::vector<const Tensor*>& ins,
                   const std::vector<const Tensor*>& params) const override {
        switch (node.op) {
            case OpKind::Conv2d: {
                Tensor y = make_out(*node.out_meta, c.layout);
                conv_im2col(node, *ins[0], params[0], node.attrs.has_bias ? params[1] : nullptr, y);
                return y;
            }
            case OpKind::Conv2dBackX: {
                Tensor dx = make_out(*node.saved_meta, c.layout);
                conv_back_x_im2col(node, *ins[0], params[0], dx);
                return dx;
            }
            case OpKind::Conv2dBackW: {
                Tensor dw(*node.out_meta);
                conv_back_w_im2col(node, *ins[0], *ins[1], dw);
                return dw;
            }
            default:
                throw NoProviderError("im2col: unsupported op");
        }
    }
};

class BlockedGemmProvider : public KernelProvider {
public:
    std::string name() const override { return "blocked"; }
    bool supports(OpKind op) const override {
        return op == OpKind::Linear || op == OpKind::LinearBackX || op == OpKind::LinearBackW;
    }
    std::vector<std::string> algorithms(OpKind) const override { return {"blocked_gemm"}; }
    std::vector<ActLayout> activation_layouts(OpKind, const TensorMeta&) const override {
        return {ActLayout::ChannelsFirst};
    }
    std::vector<WeightOrientation> orientations(OpKind, DeviceKind dev,
                                                FlavorId flavor) const override {
        if (dev == DeviceKind::SimAccel && flavor.kind == FlavorId::Kind::LongVector)
            return {WeightOrientation::InOut, WeightOrientation::OutIn};
        return {WeightOrientation::OutIn, WeightOrientation::InOut};
    }
    double relative_cost(OpKind, const std::string&) const override { return 0.9; }

    Tensor execute(const ImplChoice& c, const LayerNode& node,
                   const std::vector<const Tensor*>& ins,
                   const std::vector<const Tensor*>& params) const override {
        switch (node.op) {
            case OpKind::Linear: {
                Tensor y = make_out(*node.out_meta, c.layout);
                WView w(*params[0]);
                linear_blocked(*ins[0], w, node.attrs.has_bias ? params[1]->f32() : nullptr, y,
                               lin_shape(*ins[0], y));
                return y;
            }
            case OpKind::LinearBackX: {
                Tensor dx = make_out(*node.saved_meta, c.layout);
                WView w(*params[0]);
                linear_back_x(*ins[0], w, dx, true);
                return dx;
            }
            case OpKind::LinearBackW: {
                Tensor dw(*node.out_meta);
                linear_back_w(*ins[0], *ins[1], dw);
                return dw;
            }
            default:
                throw NoProviderError("blocked: unsupported op");
        }
    }
};

}  // namespace

ProviderRegistry ProviderRegistry::with_builtins() {
    ProviderRegistry reg;
    reg.register_provider(std::make_shared<DirectProvider>());
    reg.register_provider(std::make_shared<Im2colProvider>());
    reg.register_provider(std::make_shared<BlockedGemmProvider>());
    return reg;
}

}  // namespace sol::dnn
