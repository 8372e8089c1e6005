// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Kernel IR evaluation in f32. Loop annotations are scheduling metadata only;
// every flavor of a group interprets to the same values.

#include <cmath>
#include <limits>

#include "sol/dfp.hpp"
#include "sol/errors.hpp"

namespace sol::dfp {

namespace {

struct Interp {
    const KernelIR& k;
    const std::vector<BufferRef>& in;
    BufferRef out;
    std::vector<int64_t> env;

    Interp(const KernelIR& kernel, const std::vector<BufferRef>& inputs, BufferRef output)
        : k(kernel), in(inputs), out(output), env(kernel.vars.size(), 0) {}

    int64_t eval_affine(const AffineExpr& a) const {
        int64_t v = a.constant;
        for (const auto& [var, coeff] : a.terms) v += coeff * env[static_cast<size_t>(var)];
        return v;
    }

    bool guards_pass(const std::vector<Guard>& guards) const {
        for (const auto& g : guards) {
            int64_t v = eval_affine(g.expr);
            if (v < g.lo || v >= g.hi) return false;
        }
        return true;
    }

    float eval(int idx) {
        const Expr& e = k.arena[static_cast<size_t>(idx)];
        switch (e.kind) {
            case Expr::Kind::Const:
                return static_cast<float>(e.cval);
            case Expr::Kind::LoadInput: {
                int64_t off = eval_affine(e.index);
                const BufferRef& b = in[static_cast<size_t>(e.input_slot)];
                return b.data[off];
            }
            case Expr::Kind::AffineVal:
                return static_cast<float>(eval_affine(e.index));
            case Expr::Kind::Unary: {
                float a = eval(e.a);
                switch (e.ufn) {
                    case UnaryFn::Relu: return a > 0.0f ? a : 0.0f;
                    case UnaryFn::Step: return a > 0.0f ? 1.0f : 0.0f;
                    case UnaryFn::Exp: return std::exp(a);
                    case UnaryFn::Log: return std::log(a);
                    case UnaryFn::Neg: return -a;
                    case UnaryFn::Sqrt: return std::sqrt(a);
                }
                return 0.0f;
            }
            case Expr::Kind::Binary: {
                float a = eval(e.a);
                float b = eval(e.b);
                switch (e.bfn) {
                    case BinFn::Add: return a + b;
                    case BinFn::Sub: return a - b;
                    case BinFn::Mul: return a * b;
                    case BinFn::Div: return a / b;
                    case BinFn::Max: return a > b ? a : b;
                    case BinFn::Min: return a < b ? a : b;
                    case BinFn::Eq: return a == b ? 1.0f : 0.0f;
                    case BinFn::Gt: return a > b ? 1.0f : 0.0f;
                }
                return 0.0f;
            }
            case Expr::Kind::Cond:
                return eval(e.a) != 0.0f ? eval(e.b) : eval(e.c);
            case Expr::Kind::Reduce: {
                float acc = static_cast<float>(e.init);
                reduce_loop(e, 0, acc);
                return acc;
            }
            case Expr::Kind::ReduceCount: {
                int64_t count = 0;
                count_loop(e, 0, count);
                return static_cast<float>(count);
            }
        }
        return 0.0f;
    }

    void reduce_loop(const Expr& e, size_t depth, float& acc) {
        if (depth == e.rloops.size()) {
            if (!guards_pass(e.guards)) return;
            if (e.pred >= 0 && eval(e.pred) == 0.0f) return;
            float v = eval(e.body);
            switch (e.rop) {
                case ReduceOp::Sum: acc += v; break;
                case ReduceOp::Max: acc = v > acc ? v : acc; break;
                case ReduceOp::Min: acc = v < acc ? v : acc; break;
            }
            return;
        }
        const Loop& l = e.rloops[depth];
        for (int64_t i = 0; i < l.extent; ++i) {
            env[static_cast<size_t>(l.var)] = i;
            reduce_loop(e, depth + 1, acc);
        }
    }

    void count_loop(const Expr& e, size_t depth, int64_t& count) {
        if (depth == e.rloops.size()) {
            if (!guards_pass(e.guards)) return;
            if (e.pred >= 0 && eval(e.pred) == 0.0f) return;
            count++;
            return;
        }
        const Loop& l = e.rloops[depth];
        for (int64_t i = 0; i < l.extent; ++i) {
            env[static_cast<size_t>(l.var)] = i;
            count_loop(e, depth + 1, count);
        }
    }

    void body_at() {
        for (const auto& d : k.derived) {
            int64_t s = env[static_cast<size_t>(d.src)];
            env[static_cast<size_t>(d.var)] = d.is_mod ? s % d.divisor : s / d.divisor;
        }
        int64_t off = eval_affine(k.out_index);
        out.data[off] = eval(k.body);
    }

    void out_loop(size_t depth) {
        if (depth == k.out_loops.size()) {
            body_at();
            return;
        }
        const Loop& l = k.out_loops[depth];
        for (int64_t i = 0; i < l.extent; ++i) {
            env[static_cast<size_t>(l.var)] = i;
            out_loop(depth + 1);
        }
    }
};

}  // namespace

void interpret(const KernelIR& k, const std::vector<BufferRef>& inputs, BufferRef output) {
    if (inputs.size() != k.inputs.size())
        throw ShapeMismatchError("kernel '" + k.name + "' expects " +
                                 std::to_string(k.inputs.size()) + " inputs, got " +
                                 std::to_string(inputs.size()));
    for (size_t i = 0; i < inputs.size(); ++i)
        if (inputs[i].len < k.inputs[i].meta.element_count())
            throw ShapeMismatchError("kernel input '" + k.inputs[i].name + "' too small");
    if (output.len < k.output.meta.element_count())
        throw ShapeMismatchError("kernel output buffer too small");
    Interp interp(k, inputs, output);
    interp.out_loop(0);
}

Tensor run_kernel(const KernelIR& k, const TensorMap& activations,
                  const std::map<std::string, Tensor>& params) {
    std::vector<Tensor> staged;
    staged.reserve(k.inputs.size());
    for (const auto& b : k.inputs) {
        const Tensor* src = nullptr;
        if (b.is_param) {
            auto it = params.find(b.name);
            if (it == params.end()) throw ShapeMismatchError("missing kernel param " + b.name);
            src = &it->second;
        } else {
            auto it = activations.find(b.name);
            if (it == activations.end()) throw ShapeMismatchError("missing kernel input " + b.name);
            src = &it->second;
        }
        Tensor t = src->meta().dtype == Dtype::F32 ? *src : src->to_dtype(Dtype::F32);
        if (!(t.meta() == b.meta)) {
            TensorMeta want = b.meta;
            want.dtype = Dtype::F32;
            t = t.relayout(want);
        }
        staged.push_back(std::move(t));
    }
    std::vector<BufferRef> refs;
    refs.reserve(staged.size());
    for (auto& t : staged) refs.push_back({t.f32(), t.element_count()});

    TensorMeta out_meta = k.output.meta;
    out_meta.dtype = Dtype::F32;
    Tensor out(out_meta);
    interpret(k, refs, {out.f32(), out.element_count()});
    return out;
}

}  // namespace sol::dfp
