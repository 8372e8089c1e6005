// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "builders.hpp"
#include "sol/passes.hpp"
#include "sol/reference.hpp"

using namespace sol;

namespace {

ModelGraph conv_relu_pool(bool relu_first) {
    test::GraphBuilder b(21);
    b.input("x", meta_nchw(0, 4, 8, 8));
    auto c = b.conv("c", "x", 4, 8, 3, 1, 1);
    if (relu_first) {
        auto r = b.relu("r", c);
        auto p = b.maxpool("p", r, 2);
        return infer_shapes(b.done({p}), 2);
    }
    auto p = b.maxpool("p", c, 2);
    auto r = b.relu("r", p);
    return infer_shapes(b.done({r}), 2);
}

double oracle_diff(const ModelGraph& before, const ModelGraph& after, uint64_t seed) {
    auto x = test::random_tensor(before.graph_inputs[0].meta, seed);
    TensorMap in{{"x", x}};
    auto o1 = reference_forward(before, in);
    auto o2 = reference_forward(after, in);
    REQUIRE(o1.size() == o2.size());
    double worst = 0.0;
    auto it2 = o2.begin();
    for (auto it1 = o1.begin(); it1 != o1.end(); ++it1, ++it2)
        worst = std::max(worst, max_rel_err(it1->second, it2->second));
    return worst;
}

}  // namespace

TEST_CASE("fuse_relu_pool: relu before pool") {
    auto g = conv_relu_pool(true);
    auto fused = fuse_relu_pool(g);
    CHECK(fused.nodes.size() == 2);
    const auto* pool = fused.find_node("p");
    REQUIRE(pool != nullptr);
    CHECK(pool->attrs.min_init == 0.0f);
    CHECK(pool->inputs[0] == "c");
    CHECK(oracle_diff(g, fused, 1) == 0.0);
}

TEST_CASE("fuse_relu_pool: relu after pool") {
    auto g = conv_relu_pool(false);
    auto fused = fuse_relu_pool(g);
    CHECK(fused.nodes.size() == 2);
    const auto* pool = fused.find_node("p");
    REQUIRE(pool != nullptr);
    CHECK(pool->attrs.min_init == 0.0f);
    CHECK(fused.outputs[0] == "p");
    CHECK(oracle_diff(g, fused, 2) == 0.0);
}

TEST_CASE("fuse_relu_pool: avgpool does not absorb relu") {
    test::GraphBuilder b(22);
    b.input("x", meta_nchw(0, 4, 8, 8));
    auto c = b.conv("c", "x", 4, 8, 3, 1, 1);
    auto r = b.relu("r", c);
    auto p = b.avgpool("p", r, 2);
    auto g = infer_shapes(b.done({p}), 2);
    auto fused = fuse_relu_pool(g);
    CHECK(fused.nodes.size() == 3);
}

TEST_CASE("fuse_relu_pool: relu with a second consumer survives") {
    test::GraphBuilder b(23);
    b.input("x", meta_nchw(0, 4, 8, 8));
    auto r = b.relu("r", "x");
    auto p = b.maxpool("p", r, 2);
    auto q = b.avgpool("q", r, 2);  // second consumer of the relu
    auto g = infer_shapes(b.done({p, q}), 2);
    auto fused = fuse_relu_pool(g);
    CHECK(fused.nodes.size() == 3);
}

TEST_CASE("reorder_commuting: pool-flatten-relu collapses after pipeline") {
    test::GraphBuilder b(24);
    b.input("x", meta_nchw(0, 4, 8, 8));
    auto p = b.maxpool("p", "x", 2);
    auto f = b.flatten("f", p);
    auto r = b.relu("r", f);
    auto g = infer_shapes(b.done({r}), 2);

    auto reordered = reorder_commuting(g);
    CHECK(reordered.nodes.size() == 3);  // reorder alone keeps all nodes
    const auto* relu = reordered.find_node("r");
    REQUIRE(relu != nullptr);
    CHECK(relu->inputs[0] == "p");
    CHECK(oracle_diff(g, reordered, 3) == 0.0);

    auto done = run_pipeline(g);
    CHECK(done.nodes.size() == 2);
    const auto* pool = done.find_node("p");
    REQUIRE(pool != nullptr);
    CHECK(pool->attrs.min_init == 0.0f);
    CHECK(done.outputs[0] == "f");
    CHECK(oracle_diff(g, done, 4) == 0.0);
}

TEST_CASE("reorder_commuting: no swap without fusion payoff") {
    test::GraphBuilder b(25);
    b.input("x", meta_nchw(0, 4, 8, 8));
    auto r = b.relu("r", "x");
    auto f = b.flatten("f", r);
    auto l = b.linear("l", f, 4 * 8 * 8, 5);
    auto g = infer_shapes(b.done({l}), 2);
    auto out = reorder_commuting(g);
    CHECK(out.structural_hash() == g.structural_hash());
}

TEST_CASE("run_pipeline: conv-linear chain unchanged") {
    test::GraphBuilder b(26);
    b.input("x", meta_nchw(0, 4, 8, 8));
    auto c = b.conv("c", "x", 4, 8, 3);
    auto f = b.flatten("f", c);
    auto l = b.linear("l", f, 8 * 6 * 6, 5);
    auto g = infer_shapes(b.done({l}), 2);
    auto out = run_pipeline(g);
    CHECK(out.structural_hash() == g.structural_hash());
    CHECK(out.nodes.size() == 3);
}

TEST_CASE("run_pipeline: fixpoint and idempotence") {
    auto g = conv_relu_pool(true);
    auto once = run_pipeline(g);
    auto twice = run_pipeline(once);
    CHECK(once.structural_hash() == twice.structural_hash());
    CHECK(once.nodes.size() == twice.nodes.size());
}

TEST_CASE("run_pipeline: two fusable relus remove exactly two nodes") {
    test::GraphBuilder b(27);
    b.input("x", meta_nchw(0, 4, 16, 16));
    auto c1 = b.conv("c1", "x", 4, 8, 3, 1, 1);
    auto r1 = b.relu("r1", c1);
    auto p1 = b.maxpool("p1", r1, 2);
    auto c2 = b.conv("c2", p1, 8, 8, 3, 1, 1);
    auto r2 = b.relu("r2", c2);
    auto p2 = b.maxpool("p2", r2, 2);
    auto g = infer_shapes(b.done({p2}), 1);
    auto out = run_pipeline(g);
    CHECK(out.nodes.size() == g.nodes.size() - 2);
    CHECK(oracle_diff(g, out, 5) == 0.0);
}

TEST_CASE("run_pipeline: empty graph") {
    ModelGraph g;
    g.graph_inputs.push_back({"x", meta_nc(1, 4)});
    g.validate_and_sort();
    auto out = run_pipeline(g);
    CHECK(out.nodes.empty());
}

TEST_CASE("pipeline determinism under node renaming") {
    auto g = conv_relu_pool(true);
    auto renamed = g;
    for (auto& n : renamed.nodes) n.id = "zz_" + n.id;
    for (auto& n : renamed.nodes)
        for (auto& in : n.inputs)
            if (in != "x") in = "zz_" + in;
    for (auto& o : renamed.outputs) o = "zz_" + o;
    std::map<std::string, Tensor> renamed_params;
    for (auto& [k, v] : renamed.params) renamed_params.emplace(k, v);  // param names unchanged
    auto o1 = run_pipeline(g);
    auto o2 = run_pipeline(renamed);
    CHECK(o1.structural_hash() == o2.structural_hash());
}

TEST_CASE("pipeline monotonicity on random graphs") {
    for (uint64_t seed = 0; seed < 30; ++seed) {
        std::mt19937_64 rng(seed);
        test::GraphBuilder b(seed + 100);
        b.input("x", meta_nchw(0, 4, 12, 12));
        std::string cur = "x";
        int64_t c = 4, hw = 12;
        int id = 0;
        std::uniform_int_distribution<int> pick(0, 3);
        for (int step = 0; step < 5; ++step) {
            switch (pick(rng)) {
                case 0: cur = b.relu("n" + std::to_string(id++), cur); break;
                case 1:
                    if (hw >= 4) {
                        cur = b.maxpool("n" + std::to_string(id++), cur, 2);
                        hw /= 2;
                    }
                    break;
                case 2:
                    if (hw >= 3) {
                        cur = b.conv("n" + std::to_string(id++), cur, c, c, 3, 1, 1);
                    }
                    break;
                case 3:
                    if (hw >= 4) {
                        cur = b.avgpool("n" + std::to_string(id++), cur, 2);
                        hw /= 2;
                    }
                    break;
            }
        }
        auto g = infer_shapes(b.done({cur}), 2);
        auto out = run_pipeline(g);
        CHECK(out.nodes.size() <= g.nodes.size());
        CHECK(oracle_diff(g, out, seed) == 0.0);
    }
}

TEST_CASE("clone_for_device: deep copy independence") {
    auto g = conv_relu_pool(true);
    auto dg = clone_for_device(g, DeviceKind::SimAccel, flavor_longvec());
    CHECK(dg.device_kind == DeviceKind::SimAccel);
    CHECK(dg.flavor.kind == FlavorId::Kind::LongVector);
    CHECK(dg.unit_layouts.empty());

    size_t before = g.nodes.size();
    dg.base.nodes.pop_back();
    CHECK(g.nodes.size() == before);

    auto dg2 = clone_for_device(g, DeviceKind::Host, flavor_scalar());
    dg2.unit_layouts["c"] = ActLayout::ChannelsLast;
    auto dg3 = clone_for_device(g, DeviceKind::Host, flavor_shortvec());
    CHECK(dg3.unit_layouts.empty());  // annotations diverge independently
}
