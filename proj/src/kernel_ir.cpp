// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0

#include "sol/kernel_ir.hpp"

#include <json.hpp>

#include "sol/errors.hpp"

namespace sol {

using nlohmann::json;

void AffineExpr::add_term(int var, int64_t coeff) {
    if (coeff == 0) return;
    for (auto& [v, c] : terms) {
        if (v == var) {
            c += coeff;
            return;
        }
    }
    terms.emplace_back(var, coeff);
}

void AffineExpr::add(const AffineExpr& other, int64_t scale) {
    constant += other.constant * scale;
    for (const auto& [v, c] : other.terms) add_term(v, c * scale);
}

const char* unary_fn_name(UnaryFn f) {
    switch (f) {
        case UnaryFn::Relu: return "relu";
        case UnaryFn::Step: return "step";
        case UnaryFn::Exp: return "exp";
        case UnaryFn::Log: return "log";
        case UnaryFn::Neg: return "neg";
        case UnaryFn::Sqrt: return "sqrt";
    }
    return "?";
}

const char* bin_fn_name(BinFn f) {
    switch (f) {
        case BinFn::Add: return "add";
        case BinFn::Sub: return "sub";
        case BinFn::Mul: return "mul";
        case BinFn::Div: return "div";
        case BinFn::Max: return "max";
        case BinFn::Min: return "min";
        case BinFn::Eq: return "eq";
        case BinFn::Gt: return "gt";
    }
    return "?";
}

int KernelIR::loop_count() const {
    int n = static_cast<int>(out_loops.size());
    for (const auto& e : arena)
        if (e.kind == Expr::Kind::Reduce || e.kind == Expr::Kind::ReduceCount)
            n += static_cast<int>(e.rloops.size());
    return n;
}

namespace {

json affine_to_json(const AffineExpr& a) {
    json j;
    j["c"] = a.constant;
    j["t"] = json::array();
    for (const auto& [v, coeff] : a.terms) j["t"].push_back({v, coeff});
    return j;
}

AffineExpr affine_from_json(const json& j) {
    AffineExpr a;
    a.constant = j.at("c").get<int64_t>();
    for (const auto& t : j.at("t")) a.add_term(t[0].get<int>(), t[1].get<int64_t>());
    return a;
}

json loop_to_json(const Loop& l) {
    return json{l.var, l.extent, static_cast<int>(l.ann), l.pixel};
}

Loop loop_from_json(const json& j) {
    Loop l;
    l.var = j[0].get<int>();
    l.extent = j[1].get<int64_t>();
    l.ann = static_cast<LoopAnn>(j[2].get<int>());
    l.pixel = j[3].get<bool>();
    return l;
}

json meta_to_json(const TensorMeta& m) {
    json j;
    j["dims"] = json::array();
    for (const auto& d : m.dims)
        j["dims"].push_back({static_cast<int>(d.tag.purpose), d.tag.index, d.extent});
    j["dtype"] = static_cast<int>(m.dtype);
    j["layout"] = {static_cast<int>(m.layout.kind), m.layout.block};
    return j;
}

TensorMeta meta_from_json(const json& j) {
    TensorMeta m;
    for (const auto& d : j.at("dims")) {
        Dim dim;
        dim.tag.purpose = static_cast<DimPurpose>(d[0].get<int>());
        dim.tag.index = d[1].get<int>();
        dim.extent = d[2].get<int64_t>();
        m.dims.push_back(dim);
    }
    m.dtype = static_cast<Dtype>(j.at("dtype").get<int>());
    m.layout.kind = static_cast<LayoutId::Kind>(j.at("layout")[0].get<int>());
    m.layout.block = j.at("layout")[1].get<uint32_t>();
    return m;
}

json binding_to_json(const TensorBinding& b) {
    json j;
    j["name"] = b.name;
    j["meta"] = meta_to_json(b.meta);
    j["param"] = b.is_param;
    return j;
}

TensorBinding binding_from_json(const json& j) {
    TensorBinding b;
    b.name = j.at("name").get<std::string>();
    b.meta = meta_from_json(j.at("meta"));
    b.is_param = j.at("param").get<bool>();
    return b;
}

}  // namespace

std::string KernelIR::to_json() const {
    json j;
    j["version"] = 1;
    j["name"] = name;
    j["vars"] = vars;
    j["out_loops"] = json::array();
    for (const auto& l : out_loops) j["out_loops"].push_back(loop_to_json(l));
    j["derived"] = json::array();
    for (const auto& d : derived) j["derived"].push_back({d.var, d.src, d.divisor, d.is_mod});
    j["inputs"] = json::array();
    for (const auto& b : inputs) j["inputs"].push_back(binding_to_json(b));
    j["output"] = binding_to_json(output);
    j["out_index"] = affine_to_json(out_index);
    j["body"] = body;
    j["arena"] = json::array();
    for (const auto& e : arena) {
        json ej;
        ej["k"] = static_cast<int>(e.kind);
        switch (e.kind) {
            case Expr::Kind::Const:
                ej["v"] = e.cval;
                break;
            case Expr::Kind::LoadInput:
                ej["slot"] = e.input_slot;
                ej["idx"] = affine_to_json(e.index);
                break;
            case Expr::Kind::AffineVal:
                ej["idx"] = affine_to_json(e.index);
                break;
            case Expr::Kind::Unary:
                ej["fn"] = static_cast<int>(e.ufn);
                ej["a"] = e.a;
                break;
            case Expr::Kind::Binary:
                ej["fn"] = static_cast<int>(e.bfn);
                ej["a"] = e.a;
                ej["b"] = e.b;
                break;
            case Expr::Kind::Cond:
                ej["a"] = e.a;
                ej["b"] = e.b;
                ej["c"] = e.c;
                break;
            case Expr::Kind::Reduce:
            case Expr::Kind::ReduceCount: {
                ej["op"] = static_cast<int>(e.rop);
                ej["init"] = e.init;
                ej["loops"] = json::array();
                for (const auto& l : e.rloops) ej["loops"].push_back(loop_to_json(l));
                ej["guards"] = json::array();
                for (const auto& g : e.guards)
                    ej["guards"].push_back({affine_to_json(g.expr), g.lo, g.hi});
                ej["pred"] = e.pred;
                ej["body"] = e.body;
                break;
            }
        }
        j["arena"].push_back(ej);
    }
    return j.dump();
}

KernelIR KernelIR::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw IoError(std::string("kernel IR parse error: ") + e.what());
    }
    KernelIR k;
    k.name = j.at("name").get<std::string>();
    k.vars = j.at("vars").get<std::vector<std::string>>();
    for (const auto& l : j.at("out_loops")) k.out_loops.push_back(loop_from_json(l));
    for (const auto& d : j.at("derived")) {
        DerivedVar dv;
        dv.var = d[0].get<int>();
        dv.src = d[1].get<int>();
        dv.divisor = d[2].get<int64_t>();
        dv.is_mod = d[3].get<bool>();
        k.derived.push_back(dv);
    }
    for (const auto& b : j.at("inputs")) k.inputs.push_back(binding_from_json(b));
    k.output = binding_from_json(j.at("output"));
    k.out_index = affine_from_json(j.at("out_index"));
    k.body = j.at("body").get<int>();
    for (const auto& ej : j.at("arena")) {
        Expr e;
        e.kind = static_cast<Expr::Kind>(ej.at("k").get<int>());
        switch (e.kind) {
            case Expr::Kind::Const:
                e.cval = ej.at("v").get<double>();
                break;
            case Expr::Kind::LoadInput:
                e.input_slot = ej.at("slot").get<int>();
                e.index = affine_from_json(ej.at("idx"));
                break;
            case Expr::Kind::AffineVal:
                e.index = affine_from_json(ej.at("idx"));
                break;
            case Expr::Kind::Unary:
                e.ufn = static_cast<UnaryFn>(ej.at("fn").get<int>());
                e.a = ej.at("a").get<int>();
                break;
            case Expr::Kind::Binary:
                e.bfn = static_cast<BinFn>(ej.at("fn").get<int>());
                e.a = ej.at("a").get<int>();
                e.b = ej.at("b").get<int>();
                break;
            case Expr::Kind::Cond:
                e.a = ej.at("a").get<int>();
                e.b = ej.at("b").get<int>();
                e.c = ej.at("c").get<int>();
                break;
            case Expr::Kind::Reduce:
            case Expr::Kind::ReduceCount: {
                e.rop = static_cast<ReduceOp>(ej.at("op").get<int>());
                e.init = ej.at("init").get<double>();
                for (const auto& l : ej.at("loops")) e.rloops.push_back(loop_from_json(l));
                for (const auto& g : ej.at("guards")) {
                    Guard guard;
                    guard.expr = affine_from_json(g[0]);
                    guard.lo = g[1].get<int64_t>();
                    guard.hi = g[2].get<int64_t>();
                    e.guards.push_back(guard);
                }
                e.pred = ej.at("pred").get<int>();
                e.body = ej.at("body").get<int>();
                break;
            }
        }
        k.arena.push_back(e);
    }
    return k;
}

}  // namespace sol
