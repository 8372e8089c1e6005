// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0

#include "sol/reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sol/errors.hpp"

namespace sol {

namespace {

// Accessor over the (N0, C0, P1, P0) tag space; missing dims are ignored.
class Ax {
public:
    explicit Ax(const Tensor& t) : t_(&t), coords_(t.meta().dims.size(), 0) {
        pn_ = t.meta().find(kBatchTag);
        pc_ = t.meta().find(DimTag{DimPurpose::Channel, 0});
        ph_ = t.meta().find(DimTag{DimPurpose::Pixel, 1});
        pw_ = t.meta().find(DimTag{DimPurpose::Pixel, 0});
    }

    double at(int64_t n, int64_t c, int64_t h, int64_t w) const {
        place(n, c, h, w);
        return t_->get(coords_);
    }
    void put(int64_t n, int64_t c, int64_t h, int64_t w, double v) {
        place(n, c, h, w);
        const_cast<Tensor*>(t_)->set(coords_, v);
    }

    int64_t n() const { return pn_ < 0 ? 1 : t_->meta().dims[pn_].extent; }
    int64_t c() const { return pc_ < 0 ? 1 : t_->meta().dims[pc_].extent; }
    int64_t h() const { return ph_ < 0 ? 1 : t_->meta().dims[ph_].extent; }
    int64_t w() const { return pw_ < 0 ? 1 : t_->meta().dims[pw_].extent; }

private:
    void place(int64_t n, int64_t c, int64_t h, int64_t w) const {
        if (pn_ >= 0) coords_[pn_] = n;
        if (pc_ >= 0) coords_[pc_] = c;
        if (ph_ >= 0) coords_[ph_] = h;
        if (pw_ >= 0) coords_[pw_] = w;
    }

    const Tensor* t_;
    mutable std::vector<int64_t> coords_;
    int pn_, pc_, ph_, pw_;
};

// Plain (None-tagged, row-major) parameter accessor.
class Px {
public:
    explicit Px(const Tensor& t) : t_(&t) {}
    double at(std::initializer_list<int64_t> coords) const {
        return t_->get(std::vector<int64_t>(coords));
    }
    void put(std::initializer_list<int64_t> coords, double v) {
        const_cast<Tensor*>(t_)->set(std::vector<int64_t>(coords), v);
    }

private:
    const Tensor* t_;
};

// Elementwise map with tag-matched coordinates; out meta may reorder dims.
template <typename F>
Tensor elementwise(const TensorMeta& out_meta, const Tensor& in, F f) {
    Tensor out(out_meta);
    if (out_meta.dims.empty()) {
        out.set_mem(0, f(in.get_mem(0)));
        return out;
    }
    std::vector<int> map(out_meta.dims.size());
    for (size_t i = 0; i < out_meta.dims.size(); ++i) {
        int j = in.meta().find(out_meta.dims[i].tag);
        if (j < 0) throw ShapeMismatchError("elementwise tag mismatch");
        map[i] = j;
    }
    std::vector<int64_t> icoords(in.meta().dims.size(), 0);
    for (int64_t idx = 0; idx < out.element_count(); ++idx) {
        auto ocoords = out_meta.unravel(idx);
        for (size_t i = 0; i < ocoords.size(); ++i) icoords[map[i]] = ocoords[i];
        out.set(ocoords, f(in.get(icoords)));
    }
    return out;
}

struct BnStats {
    std::vector<double> mean, var;  // per channel, biased variance
};

BnStats batch_stats(const Ax& x) {
    BnStats s;
    s.mean.assign(x.c(), 0.0);
    s.var.assign(x.c(), 0.0);
    const double m = static_cast<double>(x.n() * x.h() * x.w());
    for (int64_t c = 0; c < x.c(); ++c) {
        double sum = 0.0;
        for (int64_t n = 0; n < x.n(); ++n)
            for (int64_t h = 0; h < x.h(); ++h)
                for (int64_t w = 0; w < x.w(); ++w) sum += x.at(n, c, h, w);
        s.mean[c] = sum / m;
        double acc = 0.0;
        for (int64_t n = 0; n < x.n(); ++n)
            for (int64_t h = 0; h < x.h(); ++h)
                for (int64_t w = 0; w < x.w(); ++w) {
                    double d = x.at(n, c, h, w) - s.mean[c];
                    acc += d * d;
                }
        s.var[c] = acc / m;
    }
    return s;
}

// Flatten index mapping: row-major over the input's non-batch dims as listed.
int64_t flat_index(const TensorMeta& in, const std::vector<int64_t>& coords, int batch_pos) {
    int64_t j = 0;
    for (size_t i = 0; i < in.dims.size(); ++i) {
        if (static_cast<int>(i) == batch_pos) continue;
        j = j * in.dims[i].extent + coords[i];
    }
    return j;
}

}  // namespace

Tensor reference_node(const LayerNode& node, const std::vector<const Tensor*>& ins,
                      const std::vector<const Tensor*>& params) {
    if (!node.out_meta) throw ShapeMismatchError("reference_node requires inferred shapes");
    const TensorMeta& om = *node.out_meta;
    const Attrs& a = node.attrs;
    Tensor out(om);

    switch (node.op) {
        case OpKind::Conv2d: {
            Ax x(*ins[0]), y(out);
            Px w(*params[0]);
            const int64_t icg = x.c() / a.groups;
            const int64_t ocg = a.out_channels / a.groups;
            for (int64_t n = 0; n < y.n(); ++n)
                for (int64_t oc = 0; oc < y.c(); ++oc) {
                    const int64_t g = oc / ocg;
                    for (int64_t oh = 0; oh < y.h(); ++oh)
                        for (int64_t ow = 0; ow < y.w(); ++ow) {
                            double acc = a.has_bias ? params[1]->get_mem(oc) : 0.0;
                            for (int64_t ic = 0; ic < icg; ++ic)
                                for (int64_t kh = 0; kh < a.kh; ++kh)
                                    for (int64_t kw = 0; kw < a.kw; ++kw) {
                                        int64_t ih = oh * a.sh - a.ph + kh;
                                        int64_t iw = ow * a.sw - a.pw + kw;
                                        if (ih < 0 || ih >= x.h() || iw < 0 || iw >= x.w()) continue;
                                        acc += x.at(n, g * icg + ic, ih, iw) * w.at({oc, ic, kh, kw});
                                    }
                            y.put(n, oc, oh, ow, acc);
                        }
                }
            return out;
        }
        case OpKind::Linear: {
            Ax x(*ins[0]), y(out);
            Px w(*params[0]);
            const int64_t in_f = ins[0]->meta().extent_of(DimTag{DimPurpose::Channel, 0});
            for (int64_t n = 0; n < y.n(); ++n)
                for (int64_t o = 0; o < a.out_features; ++o) {
                    double acc = a.has_bias ? params[1]->get_mem(o) : 0.0;
                    for (int64_t i = 0; i < in_f; ++i) acc += x.at(n, i, 0, 0) * w.at({o, i});
                    y.put(n, o, 0, 0, acc);
                }
            return out;
        }
        case OpKind::ReLU:
            return elementwise(om, *ins[0], [](double v) { return v > 0.0 ? v : 0.0; });
        case OpKind::Copy:
            return elementwise(om, *ins[0], [](double v) { return v; });
        case OpKind::MaxPool2d: {
            Ax x(*ins[0]), y(out);
            for (int64_t n = 0; n < y.n(); ++n)
                for (int64_t c = 0; c < y.c(); ++c)
                    for (int64_t oh = 0; oh < y.h(); ++oh)
                        for (int64_t ow = 0; ow < y.w(); ++ow) {
                            double acc = a.min_init;
                            for (int64_t kh = 0; kh < a.kh; ++kh)
                                for (int64_t kw = 0; kw < a.kw; ++kw) {
                                    int64_t ih = oh * a.sh - a.ph + kh;
                                    int64_t iw = ow * a.sw - a.pw + kw;
                                    if (ih < 0 || ih >= x.h() || iw < 0 || iw >= x.w()) continue;
                                    acc = std::max(acc, x.at(n, c, ih, iw));
                                }
                            y.put(n, c, oh, ow, acc);
                        }
            return out;
        }
        case OpKind::AvgPool2d: {
            Ax x(*ins[0]), y(out);
            for (int64_t n = 0; n < y.n(); ++n)
                for (int64_t c = 0; c < y.c(); ++c)
                    for (int64_t oh = 0; oh < y.h(); ++oh)
                        for (int64_t ow = 0; ow < y.w(); ++ow) {
                            double acc = 0.0;
                            int64_t cnt = 0;
                            for (int64_t kh = 0; kh < a.kh; ++kh)
                                for (int64_t kw = 0; kw < a.kw; ++kw) {
                                    int64_t ih = oh * a.sh - a.ph + kh;
                                    int64_t iw = ow * a.sw - a.pw + kw;
                                    if (ih < 0 || ih >= x.h() || iw < 0 || iw >= x.w()) continue;
                                    acc += x.at(n, c, ih, iw);
                                    cnt++;
                                }
                            y.put(n, c, oh, ow, acc / (a.count_padding ? a.kh * a.kw : cnt));
                        }
            return out;
        }
        case OpKind::BatchNorm2d: {
            Ax x(*ins[0]), y(out);
            Px gamma(*params[0]), beta(*params[1]), rmean(*params[2]), rvar(*params[3]);
            BnStats s;
            if (a.training) {
                s = batch_stats(x);
            } else {
                for (int64_t c = 0; c < x.c(); ++c) {
                    s.mean.push_back(rmean.at({c}));
                    s.var.push_back(rvar.at({c}));
                }
            }
            for (int64_t c = 0; c < x.c(); ++c) {
                double rstd = 1.0 / std::sqrt(s.var[c] + a.eps);
                for (int64_t n = 0; n < x.n(); ++n)
                    for (int64_t h = 0; h < x.h(); ++h)
                        for (int64_t w = 0; w < x.w(); ++w)
                            y.put(n, c, h, w,
                                  gamma.at({c}) * (x.at(n, c, h, w) - s.mean[c]) * rstd + beta.at({c}));
            }
            return out;
        }
        case OpKind::Add: {
            Tensor lhs = elementwise(om, *ins[0], [](double v) { return v; });
            Tensor rhs = elementwise(om, *ins[1], [](double v) { return v; });
            for (int64_t i = 0; i < out.element_count(); ++i)
                out.set_mem(i, lhs.get_mem(i) + rhs.get_mem(i));
            return out;
        }
        case OpKind::Flatten: {
            const TensorMeta& im = ins[0]->meta();
            int bp = im.find(kBatchTag);
            Ax y(out);
            for (int64_t idx = 0; idx < ins[0]->element_count(); ++idx) {
                auto coords = im.unravel(idx);
                y.put(coords[bp], flat_index(im, coords, bp), 0, 0, ins[0]->get(coords));
            }
            return out;
        }
        case OpKind::GlobalAvgPool: {
            Ax x(*ins[0]), y(out);
            const double m = static_cast<double>(x.h() * x.w());
            for (int64_t n = 0; n < x.n(); ++n)
                for (int64_t c = 0; c < x.c(); ++c) {
                    double acc = 0.0;
                    for (int64_t h = 0; h < x.h(); ++h)
                        for (int64_t w = 0; w < x.w(); ++w) acc += x.at(n, c, h, w);
                    y.put(n, c, 0, 0, acc / m);
                }
            return out;
        }
        case OpKind::Softmax: {
            Ax x(*ins[0]), y(out);
            for (int64_t n = 0; n < x.n(); ++n)
                for (int64_t h = 0; h < x.h(); ++h)
                    for (int64_t w = 0; w < x.w(); ++w) {
                        double mx = -std::numeric_limits<double>::infinity();
                        for (int64_t c = 0; c < x.c(); ++c) mx = std::max(mx, x.at(n, c, h, w));
                        double sum = 0.0;
                        for (int64_t c = 0; c < x.c(); ++c) sum += std::exp(x.at(n, c, h, w) - mx);
                        for (int64_t c = 0; c < x.c(); ++c)
                            y.put(n, c, h, w, std::exp(x.at(n, c, h, w) - mx) / sum);
                    }
            return out;
        }
        case OpKind::CrossEntropyLoss: {
            Ax p(*ins[0]), t(*ins[1]);
            const double b = static_cast<double>(p.n());
            double acc = 0.0;
            for (int64_t n = 0; n < p.n(); ++n)
                for (int64_t c = 0; c < p.c(); ++c)
                    for (int64_t h = 0; h < p.h(); ++h)
                        for (int64_t w = 0; w < p.w(); ++w)
                            acc -= t.at(n, c, h, w) * std::log(p.at(n, c, h, w));
            out.set_mem(0, acc / b);
            return out;
        }

        case OpKind::ReluBack: {
            Tensor mask = elementwise(om, *ins[1], [](double v) { return v > 0.0 ? 1.0 : 0.0; });
            Tensor d = elementwise(om, *ins[0], [](double v) { return v; });
            for (int64_t i = 0; i < out.element_count(); ++i)
                out.set_mem(i, d.get_mem(i) * mask.get_mem(i));
            return out;
        }
        case OpKind::MaxPool2dBack: {
            Ax delta(*ins[0]), x(*ins[1]), dx(out);
            out.fill(0.0);
            for (int64_t n = 0; n < delta.n(); ++n)
                for (int64_t c = 0; c < delta.c(); ++c)
                    for (int64_t oh = 0; oh < delta.h(); ++oh)
                        for (int64_t ow = 0; ow < delta.w(); ++ow) {
                            double best = -std::numeric_limits<double>::infinity();
                            int64_t bh = -1, bw = -1;
                            for (int64_t kh = 0; kh < a.kh; ++kh)
                                for (int64_t kw = 0; kw < a.kw; ++kw) {
                                    int64_t ih = oh * a.sh - a.ph + kh;
                                    int64_t iw = ow * a.sw - a.pw + kw;
                                    if (ih < 0 || ih >= x.h() || iw < 0 || iw >= x.w()) continue;
                                    double v = x.at(n, c, ih, iw);
                                    if (v > best) {
                                        best = v;
                                        bh = ih;
                                        bw = iw;
                                    }
                                }
                            // A window clamped entirely at min_init routes nothing.
                            if (bh >= 0 && best > a.min_init)
                                dx.put(n, c, bh, bw,
                                       dx.at(n, c, bh, bw) + delta.at(n, c, oh, ow));
                        }
            return out;
        }
        case OpKind::AvgPool2dBack: {
            Ax delta(*ins[0]), dx(out);
            out.fill(0.0);
            for (int64_t n = 0; n < delta.n(); ++n)
                for (int64_t c = 0; c < delta.c(); ++c)
                    for (int64_t oh = 0; oh < delta.h(); ++oh)
                        for (int64_t ow = 0; ow < delta.w(); ++ow) {
                            int64_t cnt = 0;
                            if (!a.count_padding) {
                                for (int64_t kh = 0; kh < a.kh; ++kh)
                                    for (int64_t kw = 0; kw < a.kw; ++kw) {
                                        int64_t ih = oh * a.sh - a.ph + kh;
                                        int64_t iw = ow * a.sw - a.pw + kw;
                                        if (ih >= 0 && ih < dx.h() && iw >= 0 && iw < dx.w()) cnt++;
                                    }
                            } else {
                                cnt = a.kh * a.kw;
                            }
                            double share = delta.at(n, c, oh, ow) / static_cast<double>(cnt);
                            for (int64_t kh = 0; kh < a.kh; ++kh)
                                for (int64_t kw = 0; kw < a.kw; ++kw) {
                                    int64_t ih = oh * a.sh - a.ph + kh;
                                    int64_t iw = ow * a.sw - a.pw + kw;
                                    if (ih < 0 || ih >= dx.h() || iw < 0 || iw >= dx.w()) continue;
                                    dx.put(n, c, ih, iw, dx.at(n, c, ih, iw) + share);
                                }
                        }
            return out;
        }
        case OpKind::GlobalAvgPoolBack: {
            Ax delta(*ins[0]), dx(out);
            const double m = static_cast<double>(dx.h() * dx.w());
            for (int64_t n = 0; n < dx.n(); ++n)
                for (int64_t c = 0; c < dx.c(); ++c)
                    for (int64_t h = 0; h < dx.h(); ++h)
                        for (int64_t w = 0; w < dx.w(); ++w)
                            dx.put(n, c, h, w, delta.at(n, c, 0, 0) / m);
            return out;
        }
        case OpKind::FlattenBack: {
            const TensorMeta& dm = om;  // saved forward input meta
            int bp = dm.find(kBatchTag);
            Ax delta(*ins[0]);
            for (int64_t idx = 0; idx < out.element_count(); ++idx) {
                auto coords = dm.unravel(idx);
                out.set(coords, delta.at(coords[bp], flat_index(dm, coords, bp), 0, 0));
            }
            return out;
        }
        case OpKind::SoftmaxBack: {
            Ax delta(*ins[0]), y(*ins[1]), dx(out);
            for (int64_t n = 0; n < y.n(); ++n)
                for (int64_t h = 0; h < y.h(); ++h)
                    for (int64_t w = 0; w < y.w(); ++w) {
                        double dot = 0.0;
                        for (int64_t c = 0; c < y.c(); ++c)
                            dot += delta.at(n, c, h, w) * y.at(n, c, h, w);
                        for (int64_t c = 0; c < y.c(); ++c)
                            dx.put(n, c, h, w, y.at(n, c, h, w) * (delta.at(n, c, h, w) - dot));
                    }
            return out;
        }
        case OpKind::SoftmaxCeBack: {
            Ax p(*ins[0]), t(*ins[1]), dx(out);
            const double b = static_cast<double>(p.n());
            for (int64_t n = 0; n < p.n(); ++n)
                for (int64_t c = 0; c < p.c(); ++c)
                    for (int64_t h = 0; h < p.h(); ++h)
                        for (int64_t w = 0; w < p.w(); ++w)
                            dx.put(n, c, h, w, (p.at(n, c, h, w) - t.at(n, c, h, w)) / b);
            return out;
        }
        case OpKind::CeBack: {
            Ax p(*ins[0]), t(*ins[1]), dp(out);
            const double b = static_cast<double>(p.n());
            for (int64_t n = 0; n < p.n(); ++n)
                for (int64_t c = 0; c < p.c(); ++c)
                    for (int64_t h = 0; h < p.h(); ++h)
                        for (int64_t w = 0; w < p.w(); ++w)
                            dp.put(n, c, h, w, -t.at(n, c, h, w) / (p.at(n, c, h, w) * b));
            return out;
        }
        case OpKind::BatchNormBackX: {
            Ax delta(*ins[0]), x(*ins[1]), dx(out);
            Px gamma(*params[0]);
            if (!a.training) {
                Px rvar(*params[2]);
                for (int64_t c = 0; c < x.c(); ++c) {
                    double rstd = 1.0 / std::sqrt(rvar.at({c}) + a.eps);
                    for (int64_t n = 0; n < x.n(); ++n)
                        for (int64_t h = 0; h < x.h(); ++h)
                            for (int64_t w = 0; w < x.w(); ++w)
                                dx.put(n, c, h, w, gamma.at({c}) * rstd * delta.at(n, c, h, w));
                }
                return out;
            }
            BnStats s = batch_stats(x);
            const double m = static_cast<double>(x.n() * x.h() * x.w());
            for (int64_t c = 0; c < x.c(); ++c) {
                double rstd = 1.0 / std::sqrt(s.var[c] + a.eps);
                double dsum = 0.0, dxhat = 0.0;
                for (int64_t n = 0; n < x.n(); ++n)
                    for (int64_t h = 0; h < x.h(); ++h)
                        for (int64_t w = 0; w < x.w(); ++w) {
                            double xhat = (x.at(n, c, h, w) - s.mean[c]) * rstd;
                            dsum += delta.at(n, c, h, w);
                            dxhat += delta.at(n, c, h, w) * xhat;
                        }
                for (int64_t n = 0; n < x.n(); ++n)
                    for (int64_t h = 0; h < x.h(); ++h)
                        for (int64_t w = 0; w < x.w(); ++w) {
                            double xhat = (x.at(n, c, h, w) - s.mean[c]) * rstd;
                            dx.put(n, c, h, w,
                                   gamma.at({c}) * rstd *
                                       (delta.at(n, c, h, w) - dsum / m - xhat * dxhat / m));
                        }
            }
            return out;
        }
        case OpKind::BatchNormBackGamma: {
            Ax delta(*ins[0]), x(*ins[1]);
            BnStats s;
            if (a.training) {
                s = batch_stats(x);
            } else {
                Px rmean(*params[0]), rvar(*params[1]);
                for (int64_t c = 0; c < x.c(); ++c) {
                    s.mean.push_back(rmean.at({c}));
                    s.var.push_back(rvar.at({c}));
                }
            }
            for (int64_t c = 0; c < x.c(); ++c) {
                double rstd = 1.0 / std::sqrt(s.var[c] + a.eps);
                double acc = 0.0;
                for (int64_t n = 0; n < x.n(); ++n)
                    for (int64_t h = 0; h < x.h(); ++h)
                        for (int64_t w = 0; w < x.w(); ++w)
                            acc += delta.at(n, c, h, w) * (x.at(n, c, h, w) - s.mean[c]) * rstd;
                out.set_mem(c, acc);
            }
            return out;
        }
        case OpKind::BatchNormBackBeta: {
            Ax delta(*ins[0]);
            for (int64_t c = 0; c < delta.c(); ++c) {
                double acc = 0.0;
                for (int64_t n = 0; n < delta.n(); ++n)
                    for (int64_t h = 0; h < delta.h(); ++h)
                        for (int64_t w = 0; w < delta.w(); ++w) acc += delta.at(n, c, h, w);
                out.set_mem(c, acc);
            }
            return out;
        }
        case OpKind::Conv2dBackX: {
            Ax delta(*ins[0]), dx(out);
            Px w(*params[0]);
            const int64_t icg = dx.c() / a.groups;
            const int64_t ocg = a.out_channels / a.groups;
            for (int64_t n = 0; n < dx.n(); ++n)
                for (int64_t ic = 0; ic < dx.c(); ++ic) {
                    const int64_t g = ic / icg;
                    for (int64_t ih = 0; ih < dx.h(); ++ih)
                        for (int64_t iw = 0; iw < dx.w(); ++iw) {
                            double acc = 0.0;
                            for (int64_t ocl = 0; ocl < ocg; ++ocl)
                                for (int64_t kh = 0; kh < a.kh; ++kh)
                                    for (int64_t kw = 0; kw < a.kw; ++kw) {
                                        int64_t num_h = ih + a.ph - kh;
                                        int64_t num_w = iw + a.pw - kw;
                                        if (num_h % a.sh || num_w % a.sw) continue;
                                        int64_t oh = num_h / a.sh, ow = num_w / a.sw;
                                        if (oh < 0 || oh >= delta.h() || ow < 0 || ow >= delta.w())
                                            continue;
                                        acc += delta.at(n, g * ocg + ocl, oh, ow) *
                                               w.at({g * ocg + ocl, ic - g * icg, kh, kw});
                                    }
                            dx.put(n, ic, ih, iw, acc);
                        }
                }
            return out;
        }
        case OpKind::Conv2dBackW: {
            Ax delta(*ins[0]), x(*ins[1]);
            Px dw(out);
            const int64_t icg = x.c() / a.groups;
            const int64_t ocg = a.out_channels / a.groups;
            for (int64_t oc = 0; oc < a.out_channels; ++oc) {
                const int64_t g = oc / ocg;
                for (int64_t ic = 0; ic < icg; ++ic)
                    for (int64_t kh = 0; kh < a.kh; ++kh)
                        for (int64_t kw = 0; kw < a.kw; ++kw) {
                            double acc = 0.0;
                            for (int64_t n = 0; n < delta.n(); ++n)
                                for (int64_t oh = 0; oh < delta.h(); ++oh)
                                    for (int64_t ow = 0; ow < delta.w(); ++ow) {
                                        int64_t ih = oh * a.sh - a.ph + kh;
                                        int64_t iw = ow * a.sw - a.pw + kw;
                                        if (ih < 0 || ih >= x.h() || iw < 0 || iw >= x.w()) continue;
                                        acc += delta.at(n, oc, oh, ow) * x.at(n, g * icg + ic, ih, iw);
                                    }
                            dw.put({oc, ic, kh, kw}, acc);
                        }
            }
            return out;
        }
        case OpKind::Conv2dBackB: {
            Ax delta(*ins[0]);
            for (int64_t oc = 0; oc < delta.c(); ++oc) {
                double acc = 0.0;
                for (int64_t n = 0; n < delta.n(); ++n)
                    for (int64_t oh = 0; oh < delta.h(); ++oh)
                        for (int64_t ow = 0; ow < delta.w(); ++ow) acc += delta.at(n, oc, oh, ow);
                out.set_mem(oc, acc);
            }
            return out;
        }
        case OpKind::LinearBackX: {
            Ax delta(*ins[0]), dx(out);
            Px w(*params[0]);
            const int64_t in_f = om.extent_of(DimTag{DimPurpose::Channel, 0});
            for (int64_t n = 0; n < dx.n(); ++n)
                for (int64_t i = 0; i < in_f; ++i) {
                    double acc = 0.0;
                    for (int64_t o = 0; o < delta.c(); ++o)
                        acc += delta.at(n, o, 0, 0) * w.at({o, i});
                    dx.put(n, i, 0, 0, acc);
                }
            return out;
        }
        case OpKind::LinearBackW: {
            Ax delta(*ins[0]), x(*ins[1]);
            Px dw(out);
            const int64_t in_f = ins[1]->meta().extent_of(DimTag{DimPurpose::Channel, 0});
            for (int64_t o = 0; o < delta.c(); ++o)
                for (int64_t i = 0; i < in_f; ++i) {
                    double acc = 0.0;
                    for (int64_t n = 0; n < delta.n(); ++n)
                        acc += delta.at(n, o, 0, 0) * x.at(n, i, 0, 0);
                    dw.put({o, i}, acc);
                }
            return out;
        }
        case OpKind::LinearBackB: {
            Ax delta(*ins[0]);
            for (int64_t o = 0; o < delta.c(); ++o) {
                double acc = 0.0;
                for (int64_t n = 0; n < delta.n(); ++n) acc += delta.at(n, o, 0, 0);
                out.set_mem(o, acc);
            }
            return out;
        }
        case OpKind::SgdUpdate: {
            for (int64_t i = 0; i < out.element_count(); ++i)
                out.set_mem(i, ins[0]->get_mem(i) - static_cast<double>(a.lr) * ins[1]->get_mem(i));
            return out;
        }
    }
    throw UnsupportedOpError(std::string("reference: unsupported op ") + op_name(node.op));
}

TensorMap run_reference(const ModelGraph& g, const TensorMap& inputs) {
    TensorMap env;
    for (const auto& gi : g.graph_inputs) {
        auto it = inputs.find(gi.name);
        if (it == inputs.end()) throw ShapeMismatchError("missing graph input '" + gi.name + "'");
        if (it->second.element_count() != gi.meta.element_count())
            throw ShapeMismatchError("input '" + gi.name + "' size mismatch");
        env.emplace(gi.name, it->second);
    }
    for (const auto& n : g.nodes) {
        std::vector<const Tensor*> ins, params;
        for (const auto& name : n.inputs) ins.push_back(&env.at(name));
        for (const auto& p : n.params) params.push_back(&g.params.at(p));
        env.emplace(n.id, reference_node(n, ins, params));
    }
    return env;
}

TensorMap reference_forward(const ModelGraph& g, const TensorMap& inputs) {
    TensorMap env = run_reference(g, inputs);
    TensorMap out;
    for (const auto& o : g.outputs) out.emplace(o, std::move(env.at(o)));
    return out;
}

}  // namespace sol
