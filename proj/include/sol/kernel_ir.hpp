// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// Loop-nest kernel IR produced by the fusion engine. One kernel computes one
// output tensor: a nest of annotated output loops around a scalar expression
// tree that may contain guarded reductions. The IR is both interpretable and
// emittable as flavored source text, and serializes to JSON for deployment
// bundles.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sol/tensor.hpp"

namespace sol {

enum class LoopAnn : uint8_t {
    Serial,
    ParallelTask,
    Vector,
    VectorIvdep,
    Block,
    ThreadStride,
    Reduction,
};

struct Loop {
    int var = -1;  // index into KernelIR::vars
    int64_t extent = 0;
    LoopAnn ann = LoopAnn::Serial;
    bool pixel = false;  // spans a Pixel-tagged dim (drives foreach grouping)

    bool operator==(const Loop&) const = default;
};

// var = src / divisor  or  src % divisor; computed inside the loop nest.
struct DerivedVar {
    int var = -1;
    int src = -1;
    int64_t divisor = 1;
    bool is_mod = false;

    bool operator==(const DerivedVar&) const = default;
};

// Affine form: constant + sum(coeff * var).
struct AffineExpr {
    int64_t constant = 0;
    std::vector<std::pair<int, int64_t>> terms;  // (var, coeff) in insertion order

    void add_term(int var, int64_t coeff);
    void add(const AffineExpr& other, int64_t scale = 1);
    bool operator==(const AffineExpr&) const = default;
};

// lo <= expr < hi; the expr carries no constant (folded into the bounds).
struct Guard {
    AffineExpr expr;
    int64_t lo = 0;
    int64_t hi = 0;

    bool operator==(const Guard&) const = default;
};

enum class UnaryFn : uint8_t { Relu, Step, Exp, Log, Neg, Sqrt };
enum class BinFn : uint8_t { Add, Sub, Mul, Div, Max, Min, Eq, Gt };
enum class ReduceOp : uint8_t { Sum, Max, Min };

const char* unary_fn_name(UnaryFn f);
const char* bin_fn_name(BinFn f);

// Arena-allocated expression node; children are arena indices.
struct Expr {
    enum class Kind : uint8_t { Const, LoadInput, AffineVal, Unary, Binary, Cond, Reduce, ReduceCount };
    Kind kind = Kind::Const;

    double cval = 0.0;   // Const
    int input_slot = -1; // LoadInput
    AffineExpr index;    // LoadInput / AffineVal

    UnaryFn ufn = UnaryFn::Relu;
    BinFn bfn = BinFn::Add;
    int a = -1, b = -1, c = -1;  // Unary(a) / Binary(a,b) / Cond(a ? b : c)

    // Reduce / ReduceCount
    ReduceOp rop = ReduceOp::Sum;
    double init = 0.0;
    std::vector<Loop> rloops;
    std::vector<Guard> guards;
    int pred = -1;  // optional value predicate (nonzero = iterate)
    int body = -1;

    bool operator==(const Expr&) const = default;
};

struct TensorBinding {
    std::string name;
    TensorMeta meta;
    bool is_param = false;

    bool operator==(const TensorBinding&) const = default;
};

struct KernelIR {
    std::string name;  // entry symbol
    std::vector<std::string> vars;
    std::vector<Loop> out_loops;       // nest order, outermost first
    std::vector<DerivedVar> derived;   // evaluated inside the innermost out loop
    std::vector<TensorBinding> inputs;
    TensorBinding output;
    AffineExpr out_index;
    std::vector<Expr> arena;
    int body = -1;

    // Total loop count (output + reduction loops), the fusion quality proxy.
    int loop_count() const;
    int64_t output_elements() const { return output.meta.element_count(); }

    std::string to_json() const;
    static KernelIR from_json(const std::string& text);

    bool operator==(const KernelIR&) const = default;
};

}  // namespace sol
