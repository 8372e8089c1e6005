// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Source rendering of kernel IR, one syntax per flavor: plain C++ loops,
// ISPC (uniform/foreach/taskIndex), CUDA (blockIdx/threadIdx striding) and
// NCC-style C++ (omp parallel for + ivdep pragma). Generic intrinsics go
// through a per-flavor name map, emitted as #defines only when used.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "sol/dfp.hpp"
#include "sol/errors.hpp"

namespace sol::dfp {

namespace {

struct Rendered {
    std::string text;
    bool atomic = false;
};

struct Emit {
    const KernelIR& k;
    FlavorId flavor;
    std::string prefix;
    std::set<std::string> used_fns;
    bool need_math = false;
    int sreg = 0, creg = 0;
    std::vector<std::map<int, std::string>> memo;  // per-scope reduce registers

    explicit Emit(const KernelIR& kernel, FlavorId f) : k(kernel), flavor(f) {
        switch (f.kind) {
            case FlavorId::Kind::Scalar: prefix = "sol_cpp_"; break;
            case FlavorId::Kind::ShortVector: prefix = "sol_ispc_"; break;
            case FlavorId::Kind::WarpGroup: prefix = "sol_cuda_"; break;
            case FlavorId::Kind::LongVector: prefix = "sol_ncc_"; break;
        }
    }

    const std::string& var(int v) const { return k.vars[static_cast<size_t>(v)]; }

    std::string buf(int slot) const { return "L" + std::to_string(slot); }
    std::string out_buf() const { return "L" + std::to_string(k.inputs.size()); }

    std::string loop_int() const {
        return flavor.kind == FlavorId::Kind::ShortVector ? "uniform int" : "int";
    }

    std::string fconst(double v) {
        if (std::isinf(v)) {
            need_math = true;
            return v > 0 ? "INFINITY" : "-INFINITY";
        }
        if (v == std::floor(v) && std::abs(v) < 1e15) {
            char b[32];
            std::snprintf(b, sizeof b, "%lld", static_cast<long long>(v));
            return b;
        }
        char b[64];
        std::snprintf(b, sizeof b, "%.9g", v);
        std::string s = b;
        if (s.find('.') == std::string::npos && s.find('e') == std::string::npos) s += ".0";
        return s + "f";
    }

    std::string affine(const AffineExpr& a) const {
        if (a.terms.empty()) return std::to_string(a.constant);
        // group terms by coefficient, largest magnitude first, insertion-stable
        std::vector<std::pair<int64_t, std::vector<int>>> groups;
        for (const auto& [v, c] : a.terms) {
            auto it = std::find_if(groups.begin(), groups.end(),
                                   [&](const auto& g) { return g.first == c; });
            if (it == groups.end()) groups.push_back({c, {v}});
            else it->second.push_back(v);
        }
        std::stable_sort(groups.begin(), groups.end(), [](const auto& x, const auto& y) {
            return std::abs(x.first) > std::abs(y.first);
        });
        std::string out;
        for (const auto& [coeff, vars] : groups) {
            std::string inner;
            for (size_t i = 0; i < vars.size(); ++i) {
                if (i) inner += " + ";
                inner += var(vars[i]);
            }
            if (vars.size() > 1) inner = "(" + inner + ")";
            std::string term = inner;
            int64_t mag = std::abs(coeff);
            if (mag != 1) term += " * " + std::to_string(mag);
            if (out.empty()) out = (coeff < 0 ? "-" : "") + term;
            else out += (coeff < 0 ? " - " : " + ") + term;
        }
        if (a.constant > 0) out += " + " + std::to_string(a.constant);
        else if (a.constant < 0) out += " - " + std::to_string(-a.constant);
        return out;
    }

    std::string guard_cond(const Expr& e, std::vector<std::string>& stmts, int indent) {
        std::string cond;
        for (const auto& g : e.guards) {
            std::string x = affine(g.expr);
            if (!cond.empty()) cond += " && ";
            cond += x + " >= " + std::to_string(g.lo) + " && " + x + " < " + std::to_string(g.hi);
        }
        if (e.pred >= 0) {
            Rendered p = expr(e.pred, stmts, indent);
            if (!cond.empty()) cond += " && ";
            cond += (p.atomic ? p.text : "(" + p.text + ")") + " != 0.0f";
        }
        return cond;
    }

    std::string wrap(const Rendered& r) const { return r.atomic ? r.text : "(" + r.text + ")"; }

    void line(std::vector<std::string>& stmts, int indent, const std::string& text) {
        stmts.push_back(std::string(static_cast<size_t>(indent), '\t') + text);
    }

    std::string intrinsic(const std::string& name) {
        used_fns.insert(name);
        return prefix + name;
    }

    Rendered expr(int idx, std::vector<std::string>& stmts, int indent) {
        const Expr& e = k.arena[static_cast<size_t>(idx)];
        switch (e.kind) {
            case Expr::Kind::Const:
                return {fconst(e.cval), true};
            case Expr::Kind::LoadInput:
                return {buf(e.input_slot) + "[" + affine(e.index) + "]", true};
            case Expr::Kind::AffineVal:
                return {affine(e.index), false};
            case Expr::Kind::Unary: {
                Rendered a = expr(e.a, stmts, indent);
                if (e.ufn == UnaryFn::Neg) return {"-" + wrap(a), true};
                const char* n = unary_fn_name(e.ufn);
                if (e.ufn == UnaryFn::Exp || e.ufn == UnaryFn::Log || e.ufn == UnaryFn::Sqrt)
                    need_math = true;
                return {intrinsic(n) + "(" + a.text + ")", true};
            }
            case Expr::Kind::Binary: {
                if (e.bfn == BinFn::Div) {
                    // sum/count pair over one window renders as a single nest
                    const Expr& ea = k.arena[static_cast<size_t>(e.a)];
                    const Expr& eb = k.arena[static_cast<size_t>(e.b)];
                    if (ea.kind == Expr::Kind::Reduce && eb.kind == Expr::Kind::ReduceCount &&
                        ea.rloops == eb.rloops && ea.guards == eb.guards && ea.pred == eb.pred &&
                        ea.rop == ReduceOp::Sum)
                        return fused_mean(e.a, stmts, indent);
                }
                Rendered a = expr(e.a, stmts, indent);
                Rendered b = expr(e.b, stmts, indent);
                switch (e.bfn) {
                    case BinFn::Add: return {wrap(a) + " + " + wrap(b), false};
                    case BinFn::Sub: return {wrap(a) + " - " + wrap(b), false};
                    case BinFn::Mul: return {wrap(a) + " * " + wrap(b), false};
                    case BinFn::Div: return {wrap(a) + " / " + wrap(b), false};
                    case BinFn::Max: return {intrinsic("max") + "(" + a.text + ", " + b.text + ")", true};
                    case BinFn::Min: return {intrinsic("min") + "(" + a.text + ", " + b.text + ")", true};
                    case BinFn::Eq:
                        return {"(" + wrap(a) + " == " + wrap(b) + " ? 1.0f : 0.0f)", true};
                    case BinFn::Gt:
                        return {"(" + wrap(a) + " > " + wrap(b) + " ? 1.0f : 0.0f)", true};
                }
                return {"0", true};
            }
            case Expr::Kind::Cond: {
                Rendered p = expr(e.a, stmts, indent);
                Rendered x = expr(e.b, stmts, indent);
                Rendered y = expr(e.c, stmts, indent);
                return {"(" + wrap(p) + " != 0.0f ? " + wrap(x) + " : " + wrap(y) + ")", true};
            }
            case Expr::Kind::Reduce:
                return {reduce_stmt(idx, stmts, indent, false), true};
            case Expr::Kind::ReduceCount:
                return {reduce_stmt(idx, stmts, indent, true), true};
        }
        return {"0", true};
    }

    std::string new_sreg() {
        std::string r = out_buf() + "_s" + (sreg ? std::to_string(sreg) : "");
        sreg++;
        return r;
    }
    std::string new_creg() {
        std::string r = out_buf() + "_c" + (creg ? std::to_string(creg) : "");
        creg++;
        return r;
    }

    void open_rloops(const Expr& e, std::vector<std::string>& stmts, int indent) {
        for (size_t i = 0; i < e.rloops.size(); ++i) {
            const Loop& l = e.rloops[i];
            std::string head = "for(" + loop_int() + " " + var(l.var) + " = 0; " + var(l.var) +
                               " < " + std::to_string(l.extent) + "; " + var(l.var) + "++)";
            if (i + 1 == e.rloops.size()) head += " {";
            line(stmts, indent, head);
        }
    }

    std::string reduce_stmt(int idx, std::vector<std::string>& stmts, int indent, bool count) {
        for (auto it = memo.rbegin(); it != memo.rend(); ++it) {
            auto f = it->find(idx);
            if (f != it->end()) return f->second;
        }
        const Expr& e = k.arena[static_cast<size_t>(idx)];
        std::string reg = count ? new_creg() : new_sreg();
        if (count) line(stmts, indent, "int " + reg + " = 0;");
        else {
            std::string ty = flavor.kind == FlavorId::Kind::ShortVector ? "float" : "float";
            line(stmts, indent, ty + " " + reg + " = " + fconst(e.init) + ";");
        }
        open_rloops(e, stmts, indent);
        int inner = indent + 1;
        std::vector<std::string> body_stmts;
        memo.push_back({});
        std::string cond = guard_cond(e, body_stmts, inner);
        int acc_indent = inner;
        std::vector<std::string> guarded;
        if (!cond.empty()) acc_indent = inner + 1;
        std::string acc_text;
        if (count) {
            acc_text = reg + "++;";
        } else {
            Rendered b = expr(e.body, guarded, acc_indent);
            switch (e.rop) {
                case ReduceOp::Sum: acc_text = reg + " += " + b.text + ";"; break;
                case ReduceOp::Max: acc_text = reg + " = " + intrinsic("max") + "(" + reg + ", " + b.text + ");"; break;
                case ReduceOp::Min: acc_text = reg + " = " + intrinsic("min") + "(" + reg + ", " + b.text + ");"; break;
            }
        }
        memo.pop_back();
        for (const auto& s : body_stmts) stmts.push_back(s);
        if (!cond.empty()) {
            line(stmts, inner, "if(" + cond + ") {");
            for (const auto& s : guarded) stmts.push_back(s);
            line(stmts, acc_indent, acc_text);
            line(stmts, inner, "}");
        } else {
            for (const auto& s : guarded) stmts.push_back(s);
            line(stmts, inner, acc_text);
        }
        line(stmts, indent, "}");
        memo.back()[idx] = reg;
        return reg;
    }

    // One nest accumulating both the windowed sum and the in-bounds count.
    Rendered fused_mean(int sum_idx, std::vector<std::string>& stmts, int indent) {
        const Expr& e = k.arena[static_cast<size_t>(sum_idx)];
        std::string s = new_sreg();
        std::string c = new_creg();
        line(stmts, indent, "float " + s + " = " + fconst(e.init) + ";");
        line(stmts, indent, "int " + c + " = 0;");
        open_rloops(e, stmts, indent);
        int inner = indent + 1;
        std::vector<std::string> body_stmts;
        memo.push_back({});
        std::string cond = guard_cond(e, body_stmts, inner);
        int acc_indent = cond.empty() ? inner : inner + 1;
        std::vector<std::string> guarded;
        Rendered b = expr(e.body, guarded, acc_indent);
        memo.pop_back();
        for (const auto& st : body_stmts) stmts.push_back(st);
        if (!cond.empty()) line(stmts, inner, "if(" + cond + ") {");
        for (const auto& st : guarded) stmts.push_back(st);
        line(stmts, acc_indent, s + " += " + b.text + ";");
        line(stmts, acc_indent, c + "++;");
        if (!cond.empty()) line(stmts, inner, "}");
        line(stmts, indent, "}");
        return {s + " / " + c, false};
    }

    std::string derived_line() const {
        if (k.derived.empty()) return {};
        std::string s = "int ";
        for (size_t i = 0; i < k.derived.size(); ++i) {
            const auto& d = k.derived[i];
            if (i) s += ", ";
            s += var(d.var) + " = " + var(d.src) + (d.is_mod ? " % " : " / ") +
                 std::to_string(d.divisor);
        }
        return s + ";";
    }
};

std::string signature(const Emit& em, const KernelIR& k, FlavorId f) {
    std::string args;
    for (size_t i = 0; i < k.inputs.size(); ++i) {
        if (i) args += ", ";
        if (f.kind == FlavorId::Kind::ShortVector)
            args += "const uniform float* uniform L" + std::to_string(i);
        else
            args += "const float* L" + std::to_string(i);
    }
    if (!k.inputs.empty()) args += ", ";
    if (f.kind == FlavorId::Kind::ShortVector)
        args += "uniform float* uniform " + em.out_buf();
    else
        args += "float* " + em.out_buf();
    switch (f.kind) {
        case FlavorId::Kind::Scalar:
            return "extern \"C\" void " + k.name + "(" + args + ") {";
        case FlavorId::Kind::ShortVector:
            return "task void " + k.name + "(" + args + ") {";
        case FlavorId::Kind::WarpGroup:
            return "__global__ void " + k.name + "(" + args + ") {";
        case FlavorId::Kind::LongVector:
            return "void " + k.name + "(" + args + ") {";
    }
    return {};
}

std::string preamble(const Emit& em, FlavorId f) {
    std::string p;
    const bool cppish = f.kind == FlavorId::Kind::Scalar || f.kind == FlavorId::Kind::LongVector;
    if (em.need_math && cppish) p += "#include <math.h>\n";
    auto define = [&](const std::string& name, const std::string& body) {
        if (!em.used_fns.count(name)) return;
        p += "#define " + em.prefix + name + body + "\n";
    };
    switch (f.kind) {
        case FlavorId::Kind::Scalar:
        case FlavorId::Kind::LongVector:
            define("relu", "(A) ((A) > 0.0f ? (A) : 0.0f)");
            define("step", "(A) ((A) > 0.0f ? 1.0f : 0.0f)");
            define("exp", "(A) expf(A)");
            define("log", "(A) logf(A)");
            define("sqrt", "(A) sqrtf(A)");
            define("max", "(A, B) ((A) > (B) ? (A) : (B))");
            define("min", "(A, B) ((A) < (B) ? (A) : (B))");
            break;
        case FlavorId::Kind::ShortVector:
            define("relu", "(A) ((A) > 0.0f ? (A) : 0.0f)");
            define("step", "(A) ((A) > 0.0f ? 1.0f : 0.0f)");
            define("exp", "(A) exp(A)");
            define("log", "(A) log(A)");
            define("sqrt", "(A) sqrt(A)");
            define("max", "(A, B) max(A, B)");
            define("min", "(A, B) min(A, B)");
            break;
        case FlavorId::Kind::WarpGroup:
            define("relu", "(A) ((A) > 0.0f ? (A) : 0.0f)");
            define("step", "(A) ((A) > 0.0f ? 1.0f : 0.0f)");
            define("exp", "(A) expf(A)");
            define("log", "(A) logf(A)");
            define("sqrt", "(A) sqrtf(A)");
            define("max", "(A, B) fmaxf(A, B)");
            define("min", "(A, B) fminf(A, B)");
            break;
    }
    if (!p.empty()) p += "\n";
    return p;
}

}  // namespace

SourceText emit_source(const KernelIR& k, FlavorId flavor) {
    Emit em(k, flavor);
    em.memo.push_back({});

    std::vector<std::string> lines;
    int indent = 1;
    std::vector<std::string> closers;

    auto plain_for = [&](const Loop& l, bool brace) {
        std::string head = "for(" + em.loop_int() + " " + em.var(l.var) + " = 0; " +
                           em.var(l.var) + " < " + std::to_string(l.extent) + "; " +
                           em.var(l.var) + "++)";
        if (brace) head += " {";
        return head;
    };

    switch (flavor.kind) {
        case FlavorId::Kind::Scalar: {
            // stacked loops, one brace on the last
            for (size_t i = 0; i < k.out_loops.size(); ++i)
                em.line(lines, 1, plain_for(k.out_loops[i], i + 1 == k.out_loops.size()));
            if (!k.out_loops.empty()) {
                indent = 2;
                closers.push_back("\t}");
            }
            break;
        }
        case FlavorId::Kind::ShortVector: {
            size_t i = 0;
            while (i < k.out_loops.size()) {
                const Loop& l = k.out_loops[i];
                if (l.ann == LoopAnn::ParallelTask) {
                    em.line(lines, indent, "uniform int " + em.var(l.var) + " = taskIndex;");
                    i++;
                    continue;
                }
                if (l.pixel || l.ann == LoopAnn::Vector) {
                    std::string head = "foreach(";
                    bool first = true;
                    while (i < k.out_loops.size() &&
                           (k.out_loops[i].pixel || k.out_loops[i].ann == LoopAnn::Vector)) {
                        if (!first) head += ", ";
                        head += em.var(k.out_loops[i].var) + " = 0 ... " +
                                std::to_string(k.out_loops[i].extent);
                        first = false;
                        i++;
                    }
                    head += ") {";
                    em.line(lines, indent, head);
                    closers.push_back(std::string(static_cast<size_t>(indent), '\t') + "}");
                    indent++;
                    continue;
                }
                em.line(lines, indent, plain_for(l, true));
                closers.push_back(std::string(static_cast<size_t>(indent), '\t') + "}");
                indent++;
                i++;
            }
            break;
        }
        case FlavorId::Kind::WarpGroup: {
            for (const Loop& l : k.out_loops) {
                if (l.ann == LoopAnn::Block) {
                    if (flavor.simd_groups)
                        em.line(lines, indent,
                                "int " + em.var(l.var) +
                                    " = blockIdx.x * (blockDim.x / 32) + threadIdx.x / 32;");
                    else
                        em.line(lines, indent, "int " + em.var(l.var) + " = blockIdx.x;");
                    continue;
                }
                if (l.ann == LoopAnn::ThreadStride) {
                    std::string start = flavor.simd_groups ? "threadIdx.x % 32" : "threadIdx.x";
                    std::string stride = flavor.simd_groups ? "32" : "blockDim.x";
                    em.line(lines, indent,
                            "for(int " + em.var(l.var) + " = " + start + "; " + em.var(l.var) +
                                " < " + std::to_string(l.extent) + "; " + em.var(l.var) + " += " +
                                stride + ") {");
                    closers.push_back(std::string(static_cast<size_t>(indent), '\t') + "}");
                    indent++;
                    continue;
                }
                em.line(lines, indent, plain_for(l, true));
                closers.push_back(std::string(static_cast<size_t>(indent), '\t') + "}");
                indent++;
            }
            break;
        }
        case FlavorId::Kind::LongVector: {
            int pt = 0;
            for (const Loop& l : k.out_loops)
                if (l.ann == LoopAnn::ParallelTask) pt++;
            bool pragma_done = false;
            for (const Loop& l : k.out_loops) {
                if (l.ann == LoopAnn::ParallelTask && !pragma_done) {
                    std::string pragma = "#pragma omp parallel for";
                    if (pt >= 2) pragma += " collapse(" + std::to_string(pt) + ")";
                    em.line(lines, indent, pragma);
                    pragma_done = true;
                }
                if (l.ann == LoopAnn::VectorIvdep) em.line(lines, indent, "#pragma _NEC ivdep");
                em.line(lines, indent, plain_for(l, true));
                closers.push_back(std::string(static_cast<size_t>(indent), '\t') + "}");
                indent++;
            }
            break;
        }
    }

    std::string derived = em.derived_line();
    if (!derived.empty()) em.line(lines, indent, derived);

    std::vector<std::string> body;
    Rendered r = em.expr(k.body, body, indent);
    for (const auto& s : body) lines.push_back(s);
    em.line(lines, indent, em.out_buf() + "[" + em.affine(k.out_index) + "] = " + r.text + ";");

    std::string text = preamble(em, flavor);
    text += signature(em, k, flavor) + "\n";
    for (const auto& l : lines) text += l + "\n";
    for (auto it = closers.rbegin(); it != closers.rend(); ++it) text += *it + "\n";
    text += "}\n";

    SourceText st;
    st.flavor = flavor;
    st.text = text;
    st.entry = k.name;
    return st;
}

}  // namespace sol::dfp
