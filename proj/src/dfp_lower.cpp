// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Graph partitioning and group lowering. A fused group becomes one loop nest
// over the unit's output; producer chains are inlined as expressions, so each
// output element's full chain computes before the next element.

#include <algorithm>
#include <limits>
#include <set>

#include "sol/dfp.hpp"
#include "sol/errors.hpp"

namespace sol::dfp {

namespace {

constexpr DimTag kChan{DimPurpose::Channel, 0};
constexpr DimTag kP1{DimPurpose::Pixel, 1};
constexpr DimTag kP0{DimPurpose::Pixel, 0};

bool group_breaker(OpKind op) { return op == OpKind::Flatten; }

}  // namespace

bool is_depthwise_conv(const LayerNode& n, const TensorMeta& input_meta) {
    if (n.op != OpKind::Conv2d) return false;
    int64_t cin = input_meta.extent_of(kChan);
    return n.attrs.groups > 1 && n.attrs.groups == n.attrs.out_channels && n.attrs.groups == cin;
}

static bool heavy_in_graph(const ModelGraph& g, const LayerNode& n) {
    switch (n.op) {
        case OpKind::Linear:
        case OpKind::LinearBackX:
        case OpKind::LinearBackW:
            return true;
        case OpKind::Conv2d:
            return !is_depthwise_conv(n, g.meta_of(n.inputs[0]));
        case OpKind::Conv2dBackX: {
            // depthwise iff groups == out_channels == input channels
            int64_t cin = n.saved_meta ? n.saved_meta->extent_of(kChan) : -1;
            return !(n.attrs.groups > 1 && n.attrs.groups == n.attrs.out_channels &&
                     n.attrs.groups == cin);
        }
        case OpKind::Conv2dBackW: {
            int64_t icg = n.saved_meta && n.saved_meta->rank() == 4 ? n.saved_meta->dims[1].extent : -1;
            return !(n.attrs.groups > 1 && n.attrs.groups == n.attrs.out_channels && icg == 1);
        }
        default:
            return false;
    }
}

bool is_heavy(const LayerNode& n) {
    switch (n.op) {
        case OpKind::Linear:
        case OpKind::LinearBackX:
        case OpKind::LinearBackW:
        case OpKind::Conv2d:
        case OpKind::Conv2dBackX:
        case OpKind::Conv2dBackW:
            return true;
        default:
            return false;
    }
}

std::vector<ExecUnit> partition(const DeviceGraph& dg) {
    const ModelGraph& g = dg.base;
    auto cons = g.consumers();
    std::set<std::string> outputs(g.outputs.begin(), g.outputs.end());

    struct Group {
        std::vector<std::string> members;
        bool has_breaker = false;
    };
    std::vector<Group> groups;
    std::map<std::string, int> group_of;   // dfp node -> group index
    std::vector<int> heavy_at;             // node index of heavy units, by creation
    std::vector<std::pair<size_t, int>> order;  // (last node pos, unit handle); handle: >=0 group, <0 heavy

    std::map<std::string, size_t> pos;
    for (size_t i = 0; i < g.nodes.size(); ++i) pos[g.nodes[i].id] = i;

    // A join is legal when afterwards only the joining node is externally
    // visible: every older member's consumers stay inside the group and no
    // older member is a graph output. That keeps groups single-output and the
    // unit DAG acyclic.
    auto join_ok = [&](const Group& grp, const LayerNode& n) {
        if (grp.has_breaker || group_breaker(n.op)) return false;
        std::set<std::string> inside(grp.members.begin(), grp.members.end());
        inside.insert(n.id);
        for (const auto& m : grp.members) {
            if (outputs.count(m)) return false;
            auto it = cons.find(m);
            if (it == cons.end()) return false;  // dead member should not happen
            for (const auto& c : it->second)
                if (!inside.count(c)) return false;
        }
        return true;
    };

    for (size_t i = 0; i < g.nodes.size(); ++i) {
        const LayerNode& n = g.nodes[i];
        if (heavy_in_graph(g, n)) {
            order.emplace_back(i, -static_cast<int>(i) - 1);
            continue;
        }
        int joined = -1;
        for (const auto& in : n.inputs) {
            auto it = group_of.find(in);
            if (it == group_of.end()) continue;
            if (join_ok(groups[it->second], n)) {
                joined = it->second;
                break;
            }
        }
        if (joined < 0) {
            groups.push_back({{n.id}, group_breaker(n.op)});
            joined = static_cast<int>(groups.size()) - 1;
            order.emplace_back(i, joined);
        } else {
            groups[joined].members.push_back(n.id);
            for (auto& [p, h] : order)
                if (h == joined) p = i;  // unit order follows the last member
        }
        group_of[n.id] = joined;
    }

    std::stable_sort(order.begin(), order.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });

    std::vector<ExecUnit> units;
    for (const auto& [p, handle] : order) {
        ExecUnit u;
        if (handle < 0) {
            const LayerNode& n = g.nodes[static_cast<size_t>(-handle - 1)];
            u.kind = ExecUnit::Kind::DnnNode;
            u.node_ids = {n.id};
            u.output = n.id;
            u.inputs = n.inputs;
            u.params = n.params;
        } else {
            const Group& grp = groups[static_cast<size_t>(handle)];
            u.kind = ExecUnit::Kind::DfpGroup;
            u.node_ids = grp.members;
            u.output = grp.members.back();
            std::set<std::string> inside(grp.members.begin(), grp.members.end());
            for (const auto& id : grp.members) {
                const LayerNode* n = g.find_node(id);
                for (const auto& in : n->inputs)
                    if (!inside.count(in) &&
                        std::find(u.inputs.begin(), u.inputs.end(), in) == u.inputs.end())
                        u.inputs.push_back(in);
                for (const auto& pn : n->params)
                    if (std::find(u.params.begin(), u.params.end(), pn) == u.params.end())
                        u.params.push_back(pn);
            }
        }
        units.push_back(std::move(u));
    }
    return units;
}

// ---------------------------------------------------------------------------
// Lowering
// ---------------------------------------------------------------------------

namespace {

using Coords = std::map<DimTag, AffineExpr>;

AffineExpr of_var(int var) {
    AffineExpr a;
    a.add_term(var, 1);
    return a;
}

struct Lower {
    const ModelGraph& g;
    const ExecUnit& unit;
    FlavorId flavor;
    const std::map<std::string, TensorMeta>& overrides;
    KernelIR k;
    std::map<std::string, const LayerNode*> member;
    std::map<std::string, int> slot;
    std::map<int, int64_t> var_extent;
    int kvar = 0;
    // blocked-channel split state
    int64_t cblock = 0;
    int cvar_outer = -1, cvar_inner = -1;

    Lower(const ModelGraph& graph, const ExecUnit& u, FlavorId f,
          const std::map<std::string, TensorMeta>& ov)
        : g(graph), unit(u), flavor(f), overrides(ov) {
        for (const auto& id : u.node_ids) member[id] = g.find_node(id);
    }

    TensorMeta boundary_meta(const std::string& name) const {
        auto it = overrides.find(name);
        if (it != overrides.end()) return it->second;
        if (g.params.count(name)) return g.params.at(name).meta();
        return g.meta_of(name);
    }
    // Semantic meta: canonical graph shape, ignoring planned layouts.
    const TensorMeta& sem_meta(const std::string& name) const {
        if (g.params.count(name)) return g.params.at(name).meta();
        return g.meta_of(name);
    }

    int new_var(const std::string& name, int64_t extent) {
        k.vars.push_back(name);
        int v = static_cast<int>(k.vars.size()) - 1;
        var_extent[v] = extent;
        return v;
    }
    int add(Expr e) {
        k.arena.push_back(std::move(e));
        return static_cast<int>(k.arena.size()) - 1;
    }
    int konst(double v) {
        Expr e;
        e.kind = Expr::Kind::Const;
        e.cval = v;
        return add(e);
    }
    int unary(UnaryFn f, int a) {
        Expr e;
        e.kind = Expr::Kind::Unary;
        e.ufn = f;
        e.a = a;
        return add(e);
    }
    int binary(BinFn f, int a, int b) {
        Expr e;
        e.kind = Expr::Kind::Binary;
        e.bfn = f;
        e.a = a;
        e.b = b;
        return add(e);
    }
    int cond(int p, int then_e, int else_e) {
        Expr e;
        e.kind = Expr::Kind::Cond;
        e.a = p;
        e.b = then_e;
        e.c = else_e;
        return add(e);
    }
    int affine_val(AffineExpr a) {
        Expr e;
        e.kind = Expr::Kind::AffineVal;
        e.index = std::move(a);
        return add(e);
    }
    Loop rloop(int64_t extent) {
        int v = new_var("K" + std::to_string(++kvar), extent);
        return Loop{v, extent, LoopAnn::Reduction};
    }

    // [min, max] of an affine over the registered var ranges.
    std::pair<int64_t, int64_t> range_of(const AffineExpr& a) const {
        int64_t lo = a.constant, hi = a.constant;
        for (const auto& [v, c] : a.terms) {
            int64_t ext = var_extent.at(v);
            if (c >= 0) hi += c * (ext - 1);
            else lo += c * (ext - 1);
        }
        return {lo, hi};
    }

    // Adds a bounds guard for coordinate `a` in [0, extent) when it can escape.
    void guard_if_needed(std::vector<Guard>& guards, const AffineExpr& a, int64_t extent) const {
        auto [lo, hi] = range_of(a);
        if (lo >= 0 && hi < extent) return;
        Guard gd;
        gd.expr = a;
        gd.expr.constant = 0;
        gd.lo = -a.constant;
        gd.hi = extent - a.constant;
        guards.push_back(gd);
    }

    // Memory offset of `coords` in a boundary tensor. Collapse substitution is
    // handled by the caller (output index only).
    AffineExpr flat_index(const TensorMeta& m, const Coords& coords) const {
        AffineExpr off;
        const bool blocked = m.layout.kind == LayoutId::Kind::BlockedChannel;
        const int64_t b = blocked ? m.layout.block : 0;
        for (const auto& d : m.dims) {
            auto it = coords.find(d.tag);
            if (it == coords.end())
                throw UnsupportedInGroupError("missing coordinate for " + d.tag.str() + " in " + m.str());
            int64_t ext = d.extent;
            AffineExpr c = it->second;
            if (blocked && d.tag == kChan) {
                // Requires the registered (outer*b + inner) split.
                if (cblock != b)
                    throw UnsupportedInGroupError("blocked tensor without channel split: " + m.str());
                ext = d.extent / b;
                c = of_var(cvar_outer);
            }
            AffineExpr folded;
            folded.add(off, ext);
            folded.add(c, 1);
            off = folded;
        }
        if (blocked) {
            AffineExpr folded;
            folded.add(off, b);
            folded.add(of_var(cvar_inner), 1);
            off = folded;
        }
        return off;
    }

    int load(const std::string& name, const Coords& coords) {
        Expr e;
        e.kind = Expr::Kind::LoadInput;
        e.input_slot = slot.at(name);
        e.index = flat_index(boundary_meta(name), coords);
        return add(e);
    }

    // Plain row-major parameter load with coordinates per dim position.
    int load_plain(const std::string& name, const std::vector<AffineExpr>& dim_coords) {
        const TensorMeta& m = boundary_meta(name);
        AffineExpr off;
        for (size_t i = 0; i < m.dims.size(); ++i) {
            AffineExpr folded;
            folded.add(off, m.dims[i].extent);
            folded.add(dim_coords[i], 1);
            off = folded;
        }
        Expr e;
        e.kind = Expr::Kind::LoadInput;
        e.input_slot = slot.at(name);
        e.index = off;
        return add(e);
    }

    int value_of(const std::string& name, const Coords& coords);
    int value_param_grad(const LayerNode& n, const Coords& coords);

    // Pool/conv window coordinate: out*stride - pad + k.
    AffineExpr window_coord(const AffineExpr& out, int64_t stride, int64_t pad, int kvar_id) const {
        AffineExpr a;
        a.add(out, stride);
        a.add_term(kvar_id, 1);
        a.constant -= pad;
        return a;
    }
};

// Per-channel batch statistics expressions (training-mode batchnorm).
struct BnExprs {
    int mean, rstd;
};

BnExprs bn_batch_stats(Lower& L, const std::string& xname, const Coords& coords, float eps) {
    const TensorMeta& xm = L.sem_meta(xname);
    auto reduce_mean = [&](auto body_fn) {
        Expr r;
        r.kind = Expr::Kind::Reduce;
        r.rop = ReduceOp::Sum;
        r.init = 0.0;
        Coords c2 = coords;
        int64_t m = 1;
        for (const auto& d : xm.dims) {
            if (d.tag.purpose == DimPurpose::Channel) continue;
            Loop l = L.rloop(d.extent);
            r.rloops.push_back(l);
            c2[d.tag] = of_var(l.var);
            m *= d.extent;
        }
        r.body = body_fn(c2);
        int sum = L.add(r);
        return L.binary(BinFn::Div, sum, L.konst(static_cast<double>(m)));
    };
    int mean = reduce_mean([&](const Coords& c2) { return L.value_of(xname, c2); });
    int var = reduce_mean([&](const Coords& c2) {
        int d = L.binary(BinFn::Sub, L.value_of(xname, c2), mean);
        return L.binary(BinFn::Mul, d, d);
    });
    int rstd = L.binary(BinFn::Div, L.konst(1.0),
                        L.unary(UnaryFn::Sqrt, L.binary(BinFn::Add, var, L.konst(eps))));
    return {mean, rstd};
}

int Lower::value_of(const std::string& name, const Coords& coords) {
    auto mit = member.find(name);
    if (mit == member.end()) return load(name, coords);
    const LayerNode& n = *mit->second;
    const Attrs& a = n.attrs;

    switch (n.op) {
        case OpKind::ReLU:
            return unary(UnaryFn::Relu, value_of(n.inputs[0], coords));
        case OpKind::Copy:
            return value_of(n.inputs[0], coords);
        case OpKind::Add:
            return binary(BinFn::Add, value_of(n.inputs[0], coords), value_of(n.inputs[1], coords));

        case OpKind::MaxPool2d:
        case OpKind::AvgPool2d: {
            const TensorMeta& im = sem_meta(n.inputs[0]);
            Expr r;
            r.kind = Expr::Kind::Reduce;
            r.rop = n.op == OpKind::MaxPool2d ? ReduceOp::Max : ReduceOp::Sum;
            r.init = n.op == OpKind::MaxPool2d ? static_cast<double>(a.min_init) : 0.0;
            Loop k1 = rloop(a.kh), k2 = rloop(a.kw);
            r.rloops = {k1, k2};
            Coords c2 = coords;
            c2[kP1] = window_coord(coords.at(kP1), a.sh, a.ph, k1.var);
            c2[kP0] = window_coord(coords.at(kP0), a.sw, a.pw, k2.var);
            guard_if_needed(r.guards, c2[kP1], im.extent_of(kP1));
            guard_if_needed(r.guards, c2[kP0], im.extent_of(kP0));
            r.body = value_of(n.inputs[0], c2);
            int red = add(r);
            if (n.op == OpKind::MaxPool2d) return red;
            int divisor;
            if (a.count_padding) {
                divisor = konst(static_cast<double>(a.kh * a.kw));
            } else {
                Expr cnt;
                cnt.kind = Expr::Kind::ReduceCount;
                cnt.rloops = r.rloops;
                cnt.guards = r.guards;
                divisor = add(cnt);
            }
            return binary(BinFn::Div, red, divisor);
        }

        case OpKind::GlobalAvgPool: {
            const TensorMeta& im = sem_meta(n.inputs[0]);
            Expr r;
            r.kind = Expr::Kind::Reduce;
            r.rop = ReduceOp::Sum;
            Coords c2 = coords;
            int64_t m = 1;
            for (const auto& d : im.dims)
                if (d.tag.purpose == DimPurpose::Pixel) {
                    Loop l = rloop(d.extent);
                    r.rloops.push_back(l);
                    c2[d.tag] = of_var(l.var);
                    m *= d.extent;
                }
            r.body = value_of(n.inputs[0], c2);
            return binary(BinFn::Div, add(r), konst(static_cast<double>(m)));
        }

        case OpKind::BatchNorm2d: {
            AffineExpr c = coords.at(kChan);
            int gamma = load_plain(n.params[0], {c});
            int beta = load_plain(n.params[1], {c});
            int x = value_of(n.inputs[0], coords);
            int mean, rstd;
            if (a.training) {
                BnExprs s = bn_batch_stats(*this, n.inputs[0], coords, a.eps);
                mean = s.mean;
                rstd = s.rstd;
            } else {
                mean = load_plain(n.params[2], {c});
                int var = load_plain(n.params[3], {c});
                rstd = binary(BinFn::Div, konst(1.0),
                              unary(UnaryFn::Sqrt, binary(BinFn::Add, var, konst(a.eps))));
            }
            int xhat = binary(BinFn::Mul, binary(BinFn::Sub, x, mean), rstd);
            return binary(BinFn::Add, binary(BinFn::Mul, gamma, xhat), beta);
        }

        case OpKind::Softmax: {
            const TensorMeta& im = sem_meta(n.inputs[0]);
            int64_t C = im.extent_of(kChan);
            Expr mx;
            mx.kind = Expr::Kind::Reduce;
            mx.rop = ReduceOp::Max;
            mx.init = -std::numeric_limits<double>::infinity();
            Loop lc = rloop(C);
            mx.rloops = {lc};
            Coords cm = coords;
            cm[kChan] = of_var(lc.var);
            mx.body = value_of(n.inputs[0], cm);
            int m = add(mx);

            int num = unary(UnaryFn::Exp, binary(BinFn::Sub, value_of(n.inputs[0], coords), m));
            Expr den;
            den.kind = Expr::Kind::Reduce;
            den.rop = ReduceOp::Sum;
            Loop ld = rloop(C);
            den.rloops = {ld};
            Coords cd = coords;
            cd[kChan] = of_var(ld.var);
            den.body = unary(UnaryFn::Exp, binary(BinFn::Sub, value_of(n.inputs[0], cd), m));
            return binary(BinFn::Div, num, add(den));
        }

        case OpKind::CrossEntropyLoss: {
            const TensorMeta& im = sem_meta(n.inputs[0]);
            Expr r;
            r.kind = Expr::Kind::Reduce;
            r.rop = ReduceOp::Sum;
            Coords c2;
            for (const auto& d : im.dims) {
                Loop l = rloop(d.extent);
                r.rloops.push_back(l);
                c2[d.tag] = of_var(l.var);
            }
            int p = value_of(n.inputs[0], c2);
            int t = value_of(n.inputs[1], c2);
            r.body = binary(BinFn::Mul, t, unary(UnaryFn::Log, p));
            int64_t batch = im.extent_of(kBatchTag, 1);
            return binary(BinFn::Div, unary(UnaryFn::Neg, add(r)),
                          konst(static_cast<double>(batch)));
        }

        case OpKind::Conv2d: {  // depthwise (weighted pooling)
            const TensorMeta& im = sem_meta(n.inputs[0]);
            if (!is_depthwise_conv(n, im))
                throw UnsupportedInGroupError("non-depthwise Conv2d in fused group: " + n.id);
            Expr r;
            r.kind = Expr::Kind::Reduce;
            r.rop = ReduceOp::Sum;
            Loop k1 = rloop(a.kh), k2 = rloop(a.kw);
            r.rloops = {k1, k2};
            Coords c2 = coords;
            c2[kP1] = window_coord(coords.at(kP1), a.sh, a.ph, k1.var);
            c2[kP0] = window_coord(coords.at(kP0), a.sw, a.pw, k2.var);
            guard_if_needed(r.guards, c2[kP1], im.extent_of(kP1));
            guard_if_needed(r.guards, c2[kP0], im.extent_of(kP0));
            AffineExpr zero;
            int w = load_plain(n.params[0],
                               {coords.at(kChan), zero, of_var(k1.var), of_var(k2.var)});
            r.body = binary(BinFn::Mul, value_of(n.inputs[0], c2), w);
            int acc = add(r);
            if (a.has_bias) acc = binary(BinFn::Add, acc, load_plain(n.params[1], {coords.at(kChan)}));
            return acc;
        }

        case OpKind::ReluBack:
            return binary(BinFn::Mul, value_of(n.inputs[0], coords),
                          unary(UnaryFn::Step, value_of(n.inputs[1], coords)));

        case OpKind::MaxPool2dBack: {
            // output coords live in the forward-input space
            const TensorMeta& dm = sem_meta(n.inputs[0]);  // delta (pooled) meta
            const TensorMeta& xm = sem_meta(n.inputs[1]);
            int64_t OH = dm.extent_of(kP1), OW = dm.extent_of(kP0);
            Expr r;
            r.kind = Expr::Kind::Reduce;
            r.rop = ReduceOp::Sum;
            Loop lo = rloop(OH), lw = rloop(OW);
            r.rloops = {lo, lw};
            // window containment: 0 <= ih + ph - oh*sh < kh (same for w)
            AffineExpr off_h = coords.at(kP1);
            off_h.constant += a.ph;
            off_h.add(of_var(lo.var), -a.sh);
            AffineExpr off_w = coords.at(kP0);
            off_w.constant += a.pw;
            off_w.add(of_var(lw.var), -a.sw);
            guard_if_needed(r.guards, off_h, a.kh);
            guard_if_needed(r.guards, off_w, a.kw);

            // window max and the scan-first position achieving it
            Coords cw = coords;
            Expr mx;
            mx.kind = Expr::Kind::Reduce;
            mx.rop = ReduceOp::Max;
            mx.init = -std::numeric_limits<double>::infinity();
            Loop j1 = rloop(a.kh), j2 = rloop(a.kw);
            mx.rloops = {j1, j2};
            Coords cm = coords;
            cm[kP1] = window_coord(of_var(lo.var), a.sh, a.ph, j1.var);
            cm[kP0] = window_coord(of_var(lw.var), a.sw, a.pw, j2.var);
            guard_if_needed(mx.guards, cm[kP1], xm.extent_of(kP1));
            guard_if_needed(mx.guards, cm[kP0], xm.extent_of(kP0));
            mx.body = value_of(n.inputs[1], cm);
            int m = add(mx);

            Expr fp;
            fp.kind = Expr::Kind::Reduce;
            fp.rop = ReduceOp::Min;
            fp.init = static_cast<double>(a.kh * a.kw);
            Loop q1 = rloop(a.kh), q2 = rloop(a.kw);
            fp.rloops = {q1, q2};
            Coords cq = coords;
            cq[kP1] = window_coord(of_var(lo.var), a.sh, a.ph, q1.var);
            cq[kP0] = window_coord(of_var(lw.var), a.sw, a.pw, q2.var);
            guard_if_needed(fp.guards, cq[kP1], xm.extent_of(kP1));
            guard_if_needed(fp.guards, cq[kP0], xm.extent_of(kP0));
            fp.pred = binary(BinFn::Eq, value_of(n.inputs[1], cq), m);
            AffineExpr posq;
            posq.add(of_var(q1.var), a.kw);
            posq.add_term(q2.var, 1);
            fp.body = affine_val(posq);
            int firstpos = add(fp);

            AffineExpr mypos;
            mypos.add(off_h, a.kw);
            mypos.add(off_w, 1);
            int selected = binary(BinFn::Mul, binary(BinFn::Eq, firstpos, affine_val(mypos)),
                                  binary(BinFn::Gt, m, konst(static_cast<double>(a.min_init))));
            Coords cd = coords;
            cd[kP1] = of_var(lo.var);
            cd[kP0] = of_var(lw.var);
            r.body = binary(BinFn::Mul, selected, value_of(n.inputs[0], cd));
            return add(r);
        }

        case OpKind::AvgPool2dBack: {
            const TensorMeta& dm = sem_meta(n.inputs[0]);
            const TensorMeta& xm = *n.saved_meta;
            int64_t OH = dm.extent_of(kP1), OW = dm.extent_of(kP0);
            Expr r;
            r.kind = Expr::Kind::Reduce;
            r.rop = ReduceOp::Sum;
            Loop lo = rloop(OH), lw = rloop(OW);
            r.rloops = {lo, lw};
            AffineExpr off_h = coords.at(kP1);
            off_h.constant += a.ph;
            off_h.add(of_var(lo.var), -a.sh);
            AffineExpr off_w = coords.at(kP0);
            off_w.constant += a.pw;
            off_w.add(of_var(lw.var), -a.sw);
            guard_if_needed(r.guards, off_h, a.kh);
            guard_if_needed(r.guards, off_w, a.kw);

            int divisor;
            if (a.count_padding) {
                divisor = konst(static_cast<double>(a.kh * a.kw));
            } else {
                Expr cnt;
                cnt.kind = Expr::Kind::ReduceCount;
                Loop j1 = rloop(a.kh), j2 = rloop(a.kw);
                cnt.rloops = {j1, j2};
                AffineExpr ih = window_coord(of_var(lo.var), a.sh, a.ph, j1.var);
                AffineExpr iw = window_coord(of_var(lw.var), a.sw, a.pw, j2.var);
                guard_if_needed(cnt.guards, ih, xm.extent_of(kP1));
                guard_if_needed(cnt.guards, iw, xm.extent_of(kP0));
                divisor = add(cnt);
            }
            Coords cd = coords;
            cd[kP1] = of_var(lo.var);
            cd[kP0] = of_var(lw.var);
            r.body = binary(BinFn::Div, value_of(n.inputs[0], cd), divisor);
            return add(r);
        }

        case OpKind::GlobalAvgPoolBack: {
            const TensorMeta& xm = *n.saved_meta;
            int64_t m = 1;
            for (const auto& d : xm.dims)
                if (d.tag.purpose == DimPurpose::Pixel) m *= d.extent;
            Coords cd = coords;
            std::erase_if(cd, [](const auto& kv) { return kv.first.purpose == DimPurpose::Pixel; });
            return binary(BinFn::Div, value_of(n.inputs[0], cd), konst(static_cast<double>(m)));
        }

        case OpKind::FlattenBack: {
            const TensorMeta& xm = *n.saved_meta;  // canonical forward-input meta
            AffineExpr j;
            for (const auto& d : xm.dims) {
                if (d.tag == kBatchTag) continue;
                AffineExpr folded;
                folded.add(j, d.extent);
                folded.add(coords.at(d.tag), 1);
                j = folded;
            }
            Coords cd;
            cd[kBatchTag] = coords.at(kBatchTag);
            cd[kChan] = j;
            return value_of(n.inputs[0], cd);
        }

        case OpKind::SoftmaxBack: {
            const TensorMeta& ym = sem_meta(n.inputs[1]);
            int64_t C = ym.extent_of(kChan);
            Expr dot;
            dot.kind = Expr::Kind::Reduce;
            dot.rop = ReduceOp::Sum;
            Loop lc = rloop(C);
            dot.rloops = {lc};
            Coords c2 = coords;
            c2[kChan] = of_var(lc.var);
            dot.body = binary(BinFn::Mul, value_of(n.inputs[0], c2), value_of(n.inputs[1], c2));
            int d = add(dot);
            return binary(BinFn::Mul, value_of(n.inputs[1], coords),
                          binary(BinFn::Sub, value_of(n.inputs[0], coords), d));
        }

        case OpKind::SoftmaxCeBack: {
            int64_t batch = sem_meta(n.inputs[0]).extent_of(kBatchTag, 1);
            return binary(BinFn::Div,
                          binary(BinFn::Sub, value_of(n.inputs[0], coords),
                                 value_of(n.inputs[1], coords)),
                          konst(static_cast<double>(batch)));
        }

        case OpKind::CeBack: {
            int64_t batch = sem_meta(n.inputs[0]).extent_of(kBatchTag, 1);
            return unary(UnaryFn::Neg,
                         binary(BinFn::Div, value_of(n.inputs[1], coords),
                                binary(BinFn::Mul, value_of(n.inputs[0], coords),
                                       konst(static_cast<double>(batch)))));
        }

        case OpKind::BatchNormBackX: {
            AffineExpr c = coords.at(kChan);
            int gamma = load_plain(n.params[0], {c});
            if (!a.training) {
                int var = load_plain(n.params[2], {c});
                int rstd = binary(BinFn::Div, konst(1.0),
                                  unary(UnaryFn::Sqrt, binary(BinFn::Add, var, konst(a.eps))));
                return binary(BinFn::Mul, binary(BinFn::Mul, gamma, rstd),
                              value_of(n.inputs[0], coords));
            }
            const TensorMeta& xm = sem_meta(n.inputs[1]);
            BnExprs s = bn_batch_stats(*this, n.inputs[1], coords, a.eps);
            int64_t m = 1;
            for (const auto& d : xm.dims)
                if (d.tag.purpose != DimPurpose::Channel) m *= d.extent;

            auto reduce_nonchan = [&](auto body_fn) {
                Expr r;
                r.kind = Expr::Kind::Reduce;
                r.rop = ReduceOp::Sum;
                Coords c2 = coords;
                for (const auto& d : xm.dims) {
                    if (d.tag.purpose == DimPurpose::Channel) continue;
                    Loop l = rloop(d.extent);
                    r.rloops.push_back(l);
                    c2[d.tag] = of_var(l.var);
                }
                r.body = body_fn(c2);
                return add(r);
            };
            int dsum = reduce_nonchan([&](const Coords& c2) { return value_of(n.inputs[0], c2); });
            int dxhat = reduce_nonchan([&](const Coords& c2) {
                int xh = binary(BinFn::Mul,
                                binary(BinFn::Sub, value_of(n.inputs[1], c2), s.mean), s.rstd);
                return binary(BinFn::Mul, value_of(n.inputs[0], c2), xh);
            });
            int xhat = binary(BinFn::Mul,
                              binary(BinFn::Sub, value_of(n.inputs[1], coords), s.mean), s.rstd);
            int mm = konst(static_cast<double>(m));
            int inner = binary(BinFn::Sub,
                               binary(BinFn::Sub, value_of(n.inputs[0], coords),
                                      binary(BinFn::Div, dsum, mm)),
                               binary(BinFn::Mul, xhat, binary(BinFn::Div, dxhat, mm)));
            return binary(BinFn::Mul, binary(BinFn::Mul, gamma, s.rstd), inner);
        }

        case OpKind::Conv2dBackX: {  // depthwise only
            const TensorMeta& dm = sem_meta(n.inputs[0]);
            int64_t OH = dm.extent_of(kP1), OW = dm.extent_of(kP0);
            Expr r;
            r.kind = Expr::Kind::Reduce;
            r.rop = ReduceOp::Sum;
            Loop lo = rloop(OH), lw = rloop(OW);
            r.rloops = {lo, lw};
            AffineExpr off_h = coords.at(kP1);
            off_h.constant += a.ph;
            off_h.add(of_var(lo.var), -a.sh);
            AffineExpr off_w = coords.at(kP0);
            off_w.constant += a.pw;
            off_w.add(of_var(lw.var), -a.sw);
            guard_if_needed(r.guards, off_h, a.kh);
            guard_if_needed(r.guards, off_w, a.kw);
            Coords cd = coords;
            cd[kP1] = of_var(lo.var);
            cd[kP0] = of_var(lw.var);
            AffineExpr zero;
            int w = load_plain(n.params[0], {coords.at(kChan), zero, off_h, off_w});
            r.body = binary(BinFn::Mul, value_of(n.inputs[0], cd), w);
            return add(r);
        }

        case OpKind::SgdUpdate:
            return binary(BinFn::Sub, value_of(n.inputs[0], coords),
                          binary(BinFn::Mul, konst(static_cast<double>(a.lr)),
                                 value_of(n.inputs[1], coords)));

        case OpKind::BatchNormBackGamma:
        case OpKind::BatchNormBackBeta:
        case OpKind::Conv2dBackB:
        case OpKind::LinearBackB:
        case OpKind::Conv2dBackW:
            return value_param_grad(n, coords);

        default:
            throw UnsupportedInGroupError(std::string("cannot fuse op ") + op_name(n.op) +
                                          " ('" + n.id + "')");
    }
}

// Gradient ops whose output has parameter shape (plain None-tagged dims).
// The output loop coordinates arrive keyed by those plain tags.
int Lower::value_param_grad(const LayerNode& n, const Coords& coords) {
    const Attrs& a = n.attrs;
    const TensorMeta& om = *n.out_meta;
    auto out_coord = [&](size_t dim_pos) { return coords.at(om.dims[dim_pos].tag); };

    switch (n.op) {
        case OpKind::BatchNormBackBeta: {
            const TensorMeta& dm = sem_meta(n.inputs[0]);
            Expr r;
            r.kind = Expr::Kind::Reduce;
            r.rop = ReduceOp::Sum;
            Coords c2;
            c2[kChan] = out_coord(0);
            for (const auto& d : dm.dims) {
                if (d.tag.purpose == DimPurpose::Channel) continue;
                Loop l = rloop(d.extent);
                r.rloops.push_back(l);
                c2[d.tag] = of_var(l.var);
            }
            r.body = value_of(n.inputs[0], c2);
            return add(r);
        }
        case OpKind::BatchNormBackGamma: {
            const TensorMeta& xm = sem_meta(n.inputs[1]);
            int mean, rstd;
            Coords chan_coords;
            chan_coords[kChan] = out_coord(0);
            if (a.training) {
                BnExprs s = bn_batch_stats(*this, n.inputs[1], chan_coords, a.eps);
                mean = s.mean;
                rstd = s.rstd;
            } else {
                mean = load_plain(n.params[0], {out_coord(0)});
                int var = load_plain(n.params[1], {out_coord(0)});
                rstd = binary(BinFn::Div, konst(1.0),
                              unary(UnaryFn::Sqrt, binary(BinFn::Add, var, konst(a.eps))));
            }
            Expr r;
            r.kind = Expr::Kind::Reduce;
            r.rop = ReduceOp::Sum;
            Coords c2;
            c2[kChan] = out_coord(0);
            for (const auto& d : xm.dims) {
                if (d.tag.purpose == DimPurpose::Channel) continue;
                Loop l = rloop(d.extent);
                r.rloops.push_back(l);
                c2[d.tag] = of_var(l.var);
            }
            int xhat = binary(BinFn::Mul, binary(BinFn::Sub, value_of(n.inputs[1], c2), mean), rstd);
            r.body = binary(BinFn::Mul, value_of(n.inputs[0], c2), xhat);
            return add(r);
        }
        case OpKind::Conv2dBackB:
        case OpKind::LinearBackB: {
            const TensorMeta& dm = sem_meta(n.inputs[0]);
            Expr r;
            r.kind = Expr::Kind::Reduce;
            r.rop = ReduceOp::Sum;
            Coords c2;
            c2[kChan] = out_coord(0);
            for (const auto& d : dm.dims) {
                if (d.tag.purpose == DimPurpose::Channel) continue;
                Loop l = rloop(d.extent);
                r.rloops.push_back(l);
                c2[d.tag] = of_var(l.var);
            }
            r.body = value_of(n.inputs[0], c2);
            return add(r);
        }
        case OpKind::Conv2dBackW: {  // depthwise: dW[c, 0, kh, kw]
            const TensorMeta& dm = sem_meta(n.inputs[0]);
            const TensorMeta& xm = sem_meta(n.inputs[1]);
            Expr r;
            r.kind = Expr::Kind::Reduce;
            r.rop = ReduceOp::Sum;
            Loop ln = rloop(dm.extent_of(kBatchTag, 1));
            Loop lo = rloop(dm.extent_of(kP1));
            Loop lw = rloop(dm.extent_of(kP0));
            r.rloops = {ln, lo, lw};
            AffineExpr ih;  // ih = oh*sh - ph + kh
            ih.add(of_var(lo.var), a.sh);
            ih.add(out_coord(2), 1);
            ih.constant -= a.ph;
            AffineExpr iw;
            iw.add(of_var(lw.var), a.sw);
            iw.add(out_coord(3), 1);
            iw.constant -= a.pw;
            guard_if_needed(r.guards, ih, xm.extent_of(kP1));
            guard_if_needed(r.guards, iw, xm.extent_of(kP0));
            Coords cd;
            cd[kBatchTag] = of_var(ln.var);
            cd[kChan] = out_coord(0);
            cd[kP1] = of_var(lo.var);
            cd[kP0] = of_var(lw.var);
            Coords cx;
            cx[kBatchTag] = of_var(ln.var);
            cx[kChan] = out_coord(0);
            cx[kP1] = ih;
            cx[kP0] = iw;
            r.body = binary(BinFn::Mul, value_of(n.inputs[0], cd), value_of(n.inputs[1], cx));
            return add(r);
        }
        default:
            throw UnsupportedInGroupError(std::string("cannot fuse op ") + op_name(n.op));
    }
}

// Output loop under construction, before flavor scheduling.
struct OutLoop {
    DimTag tag;
    int64_t extent = 0;
    int var = -1;
    bool pixel = false;
    LoopAnn ann = LoopAnn::Serial;
};

std::string out_var_name(DimTag tag) {
    if (tag.purpose == DimPurpose::Channel) return "O" + tag.str() + "x";
    return "O" + tag.str();
}

}  // namespace

KernelIR lower_group(const ModelGraph& g, const ExecUnit& unit, FlavorId flavor,
                     const std::map<std::string, TensorMeta>& overrides,
                     const std::string& entry) {
    if (unit.kind != ExecUnit::Kind::DfpGroup)
        throw UnsupportedInGroupError("lower_group expects a fused group");
    Lower L(g, unit, flavor, overrides);
    L.k.name = entry;

    int s = 0;
    for (const auto& name : unit.inputs) {
        L.slot[name] = s++;
        L.k.inputs.push_back({name, L.boundary_meta(name), false});
    }
    for (const auto& name : unit.params) {
        L.slot[name] = s++;
        L.k.inputs.push_back({name, L.boundary_meta(name), true});
    }
    const LayerNode* out_node = g.find_node(unit.output);
    TensorMeta out_m = L.boundary_meta(unit.output);
    L.k.output = {unit.output, out_m, false};

    // All blocked boundary tensors must share one block size; the channel
    // output loop splits accordingly.
    for (const auto& b : L.k.inputs) {
        if (b.meta.layout.kind == LayoutId::Kind::BlockedChannel) {
            if (L.cblock && L.cblock != b.meta.layout.block)
                throw UnsupportedInGroupError("mixed channel blocks in one group");
            L.cblock = b.meta.layout.block;
        }
    }
    if (out_m.layout.kind == LayoutId::Kind::BlockedChannel) {
        if (L.cblock && L.cblock != out_m.layout.block)
            throw UnsupportedInGroupError("mixed channel blocks in one group");
        L.cblock = out_m.layout.block;
    }

    // Flatten kernels iterate the input space; everything else the output's.
    const bool is_flatten = out_node->op == OpKind::Flatten;
    TensorMeta loop_m = is_flatten ? L.boundary_meta(out_node->inputs[0]) : out_m;

    std::vector<OutLoop> loops;
    Coords coords;
    for (const auto& d : loop_m.dims) {
        OutLoop ol;
        ol.tag = d.tag;
        ol.extent = d.extent;
        ol.pixel = d.tag.purpose == DimPurpose::Pixel;
        if (L.cblock && d.tag == kChan) {
            if (d.extent % L.cblock != 0)
                throw UnsupportedInGroupError("channel extent not divisible by block");
            ol.extent = d.extent / L.cblock;
            ol.var = L.new_var(out_var_name(d.tag), ol.extent);
            L.cvar_outer = ol.var;
            loops.push_back(ol);
            continue;
        }
        ol.var = L.new_var(out_var_name(d.tag), d.extent);
        coords[d.tag] = of_var(ol.var);
        loops.push_back(ol);
    }
    if (L.cblock) {
        OutLoop inner;
        inner.tag = kChan;
        inner.extent = L.cblock;
        inner.var = L.new_var("OC0b", L.cblock);
        inner.pixel = false;
        L.cvar_inner = inner.var;
        loops.push_back(inner);
        AffineExpr c;
        c.add_term(L.cvar_outer, L.cblock);
        c.add_term(L.cvar_inner, 1);
        coords[kChan] = c;
    }

    // Flavor scheduling. Pixel dims are contiguous in every supported layout;
    // LongVector and WarpGroup collapse them into one loop.
    auto first_pixel = [&]() {
        for (size_t i = 0; i < loops.size(); ++i)
            if (loops[i].pixel) return static_cast<int>(i);
        return -1;
    };
    int npixel = 0;
    for (const auto& l : loops)
        if (l.pixel) npixel++;

    const bool collapse =
        (flavor.kind == FlavorId::Kind::LongVector || flavor.kind == FlavorId::Kind::WarpGroup) &&
        npixel >= 2;
    int64_t collapsed_extent = 1;
    if (collapse) {
        int fp = first_pixel();
        for (int i = fp; i < fp + npixel; ++i) collapsed_extent *= loops[i].extent;
        int cvar = L.new_var("OP0x", collapsed_extent);
        // derive the original pixel vars: successive div/mod
        int src = cvar;
        int64_t rest = collapsed_extent;
        for (int i = fp; i < fp + npixel; ++i) {
            rest /= loops[i].extent;
            DerivedVar dv;
            dv.src = src;
            dv.divisor = rest;
            if (i + 1 < fp + npixel) {
                dv.var = L.new_var(out_var_name(loops[i].tag), loops[i].extent);
                dv.is_mod = false;
                L.k.derived.push_back(dv);
                coords[loops[i].tag] = of_var(dv.var);
                // remainder feeds the next dim
                if (i + 2 < fp + npixel) {
                    DerivedVar rem;
                    rem.src = src;
                    rem.divisor = rest;
                    rem.is_mod = true;
                    rem.var = L.new_var("OPr" + std::to_string(i - fp), rest);
                    L.k.derived.push_back(rem);
                    src = rem.var;
                }
            } else {
                dv.var = L.new_var(out_var_name(loops[i].tag), loops[i].extent);
                dv.is_mod = true;
                dv.divisor = loops[i].extent;
                L.k.derived.push_back(dv);
                coords[loops[i].tag] = of_var(dv.var);
            }
        }
        OutLoop cl;
        cl.tag = loops[fp].tag;
        cl.extent = collapsed_extent;
        cl.var = cvar;
        cl.pixel = true;
        loops.erase(loops.begin() + fp, loops.begin() + fp + npixel);
        loops.insert(loops.begin() + fp, cl);
    }

    // annotations
    int vec_target = -1;
    if (!loops.empty()) {
        for (size_t i = 0; i < loops.size(); ++i)
            if (loops[i].pixel) vec_target = static_cast<int>(i);
        if (vec_target < 0) vec_target = static_cast<int>(loops.size()) - 1;
    }
    switch (flavor.kind) {
        case FlavorId::Kind::Scalar:
            break;
        case FlavorId::Kind::ShortVector: {
            if (vec_target >= 0) loops[vec_target].ann = LoopAnn::Vector;
            for (int i = 0; i < vec_target; ++i)
                if (!loops[i].pixel) {
                    loops[i].ann = LoopAnn::ParallelTask;
                    break;
                }
            break;
        }
        case FlavorId::Kind::LongVector: {
            if (vec_target >= 0) loops[vec_target].ann = LoopAnn::VectorIvdep;
            for (int i = 0; i < vec_target; ++i)
                if (!loops[i].pixel) loops[i].ann = LoopAnn::ParallelTask;
            break;
        }
        case FlavorId::Kind::WarpGroup: {
            if (vec_target >= 0) loops[vec_target].ann = LoopAnn::ThreadStride;
            for (int i = 0; i < vec_target; ++i)
                if (!loops[i].pixel) {
                    loops[i].ann = LoopAnn::Block;
                    break;
                }
            break;
        }
    }
    for (const auto& ol : loops) L.k.out_loops.push_back({ol.var, ol.extent, ol.ann, ol.pixel});

    // output index: fold output dims, substituting the collapsed pixel run
    {
        const TensorMeta& m = out_m;
        const bool blocked = m.layout.kind == LayoutId::Kind::BlockedChannel;
        AffineExpr off;
        if (is_flatten) {
            // flatten semantics follow the canonical (graph) input dim order
            const TensorMeta& canon = g.meta_of(out_node->inputs[0]);
            AffineExpr j;
            for (const auto& d : canon.dims) {
                if (d.tag == kBatchTag) continue;
                AffineExpr folded;
                folded.add(j, d.extent);
                folded.add(coords.at(d.tag), 1);
                j = folded;
            }
            Coords oc;
            oc[kBatchTag] = coords.at(kBatchTag);
            oc[kChan] = j;
            off = L.flat_index(m, oc);
        } else if (collapse && !blocked) {
            bool pixel_done = false;
            for (const auto& d : m.dims) {
                if (d.tag.purpose == DimPurpose::Pixel) {
                    if (pixel_done) continue;
                    AffineExpr folded;
                    folded.add(off, collapsed_extent);
                    for (const auto& l : loops)
                        if (l.pixel) folded.add_term(l.var, 1);
                    off = folded;
                    pixel_done = true;
                } else {
                    AffineExpr folded;
                    folded.add(off, d.extent);
                    folded.add(coords.at(d.tag), 1);
                    off = folded;
                }
            }
        } else {
            off = L.flat_index(m, coords);
        }
        L.k.out_index = off;
    }

    L.k.body = is_flatten ? L.load(out_node->inputs[0], coords) : L.value_of(unit.output, coords);
    return L.k;
}

}  // namespace sol::dfp
