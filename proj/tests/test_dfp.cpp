// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>

#include "builders.hpp"
#include "sol/dfp.hpp"
#include "sol/errors.hpp"
#include "sol/passes.hpp"
#include "sol/reference.hpp"

using namespace sol;
using dfp::ExecUnit;

namespace {

std::vector<FlavorId> all_flavors() {
    return {flavor_scalar(), flavor_shortvec(), flavor_longvec(), flavor_warp()};
}

// Lowers the single DfpGroup containing `node` and runs it against inputs.
Tensor run_group(const ModelGraph& g, const std::string& out_node, FlavorId flavor,
                 const TensorMap& inputs) {
    auto dg = clone_for_device(g, DeviceKind::Host, flavor);
    auto units = dfp::partition(dg);
    TensorMap env = run_reference(g, inputs);  // provides unit inputs when chains precede
    for (const auto& u : units) {
        if (u.kind != ExecUnit::Kind::DfpGroup || u.output != out_node) continue;
        auto k = dfp::lower_group(g, u, flavor);
        return dfp::run_kernel(k, env, g.params);
    }
    FAIL("no DfpGroup produced the requested node");
    return Tensor{};
}

double group_vs_reference(const ModelGraph& g, const std::string& out_node, FlavorId flavor,
                          const TensorMap& inputs) {
    Tensor got = run_group(g, out_node, flavor, inputs);
    auto env = run_reference(g, inputs);
    return oracle_err(got, env.at(out_node));
}

// The Listing-style average pooling: C=512, 128x128 pixels, k=3, pad=1,
// stride 1, constant divisor.
ModelGraph listing_avgpool(int64_t c = 512, int64_t hw = 128) {
    test::GraphBuilder b(31);
    b.input("x", make_meta({{{DimPurpose::Channel, 0}, c},
                            {{DimPurpose::Pixel, 1}, hw},
                            {{DimPurpose::Pixel, 0}, hw}}));
    b.avgpool("p", "x", 3, 1, 1, /*count_padding=*/true);
    return infer_shapes(b.done({"p"}), 1);
}

KernelIR lower_listing(FlavorId f, int64_t c = 512, int64_t hw = 128) {
    auto g = listing_avgpool(c, hw);
    auto units = dfp::partition(clone_for_device(g, DeviceKind::Host, f));
    REQUIRE(units.size() == 1);
    return dfp::lower_group(g, units[0], f);
}

}  // namespace

TEST_CASE("partition: conv/relu/pool/flatten/linear") {
    test::GraphBuilder b(30);
    b.input("x", meta_nchw(0, 4, 8, 8));
    auto c = b.conv("c", "x", 4, 8, 3, 1, 1);
    auto r = b.relu("r", c);
    auto p = b.maxpool("p", r, 2);
    auto f = b.flatten("f", p);
    auto l = b.linear("l", f, 8 * 4 * 4, 5);
    auto g = infer_shapes(b.done({l}), 1);

    auto units = dfp::partition(clone_for_device(g, DeviceKind::Host, flavor_scalar()));
    REQUIRE(units.size() == 4);
    CHECK(units[0].kind == ExecUnit::Kind::DnnNode);
    CHECK(units[0].output == "c");
    CHECK(units[1].kind == ExecUnit::Kind::DfpGroup);
    CHECK(units[1].node_ids == std::vector<std::string>{"r", "p"});
    CHECK(units[2].kind == ExecUnit::Kind::DfpGroup);
    CHECK(units[2].node_ids == std::vector<std::string>{"f"});
    CHECK(units[3].kind == ExecUnit::Kind::DnnNode);
    CHECK(units[3].output == "l");

    // unit inputs are the external producers
    CHECK(units[1].inputs == std::vector<std::string>{"c"});
}

TEST_CASE("partition: depthwise conv joins the fusion engine") {
    test::GraphBuilder b(32);
    b.input("x", meta_nchw(0, 8, 6, 6));
    auto d = b.conv("dw", "x", 8, 8, 3, 1, 1, /*groups=*/8);
    auto r = b.relu("r", d);
    auto g = infer_shapes(b.done({r}), 1);
    auto units = dfp::partition(clone_for_device(g, DeviceKind::Host, flavor_scalar()));
    REQUIRE(units.size() == 1);
    CHECK(units[0].kind == ExecUnit::Kind::DfpGroup);
    CHECK(units[0].node_ids == std::vector<std::string>{"dw", "r"});
    CHECK(units[0].params == std::vector<std::string>{"dw.W", "dw.b"});
}

TEST_CASE("partition: empty graph") {
    ModelGraph g;
    g.graph_inputs.push_back({"x", meta_nc(1, 4)});
    auto units = dfp::partition(clone_for_device(g, DeviceKind::Host, flavor_scalar()));
    CHECK(units.empty());
}

TEST_CASE("partition: every node lands in exactly one unit") {
    test::GraphBuilder b(33);
    b.input("x", meta_nchw(0, 4, 8, 8));
    auto c1 = b.conv("c1", "x", 4, 8, 3, 1, 1);
    auto bn = b.batchnorm("bn", c1, 8);
    auto r = b.relu("r", bn);
    auto p = b.avgpool("p", r, 2);
    auto c2 = b.conv("c2", p, 8, 8, 1);
    auto s = b.add("s", c2, c2);
    auto g = infer_shapes(b.done({s}), 2);
    auto units = dfp::partition(clone_for_device(g, DeviceKind::Host, flavor_scalar()));
    std::set<std::string> seen;
    for (const auto& u : units)
        for (const auto& id : u.node_ids) CHECK(seen.insert(id).second);
    CHECK(seen.size() == g.nodes.size());
}

TEST_CASE("lower_group: listing avgpool has 3 output + 2 reduction loops") {
    auto k = lower_listing(flavor_scalar());
    CHECK(k.out_loops.size() == 3);
    CHECK(k.loop_count() == 5);
    CHECK(k.vars[k.out_loops[0].var] == "OC0x");
    CHECK(k.vars[k.out_loops[1].var] == "OP1");
    CHECK(k.vars[k.out_loops[2].var] == "OP0");
}

TEST_CASE("lower_group: longvec collapses pixels into one vector loop") {
    auto k = lower_listing(flavor_longvec());
    REQUIRE(k.out_loops.size() == 2);
    CHECK(k.out_loops[0].ann == LoopAnn::ParallelTask);
    CHECK(k.out_loops[1].ann == LoopAnn::VectorIvdep);
    CHECK(k.out_loops[1].extent == 128 * 128);
    CHECK(k.vars[k.out_loops[1].var] == "OP0x");
    REQUIRE(k.derived.size() == 2);
}

TEST_CASE("lower_group: rejects heavy nodes") {
    test::GraphBuilder b(34);
    b.input("x", meta_nc(0, 4));
    b.linear("l", "x", 4, 2);
    auto g = infer_shapes(b.done({"l"}), 1);
    ExecUnit u;
    u.kind = ExecUnit::Kind::DfpGroup;
    u.node_ids = {"l"};
    u.output = "l";
    u.inputs = {"x"};
    u.params = {"l.W", "l.b"};
    CHECK_THROWS_AS(dfp::lower_group(g, u, flavor_scalar()), UnsupportedInGroupError);
}

TEST_CASE("interpret: fused relu+maxpool on [-5,3|2,-1] gives 3") {
    test::GraphBuilder b(35);
    b.input("x", meta_nchw(0, 1, 2, 2));
    auto r = b.relu("r", "x");
    Attrs pa;
    pa.kh = pa.kw = 2;
    pa.sh = pa.sw = 2;
    b.node("p", OpKind::MaxPool2d, {r}, pa);
    auto g = infer_shapes(b.done({"p"}), 1);

    Tensor x(meta_nchw(1, 1, 2, 2));
    x.set_mem(0, -5);
    x.set_mem(1, 3);
    x.set_mem(2, 2);
    x.set_mem(3, -1);

    // brute-force oracle: max over relu'd values
    double expect = 0.0;
    for (int i = 0; i < 4; ++i) expect = std::max(expect, std::max(0.0, x.get_mem(i)));
    CHECK(expect == 3.0);

    for (auto f : all_flavors()) {
        Tensor out = run_group(g, "p", f, {{"x", x}});
        CHECK(out.get_mem(0) == doctest::Approx(3.0));
    }

    // the pipeline-fused form (min_init = 0, relu removed) agrees
    auto fused = run_pipeline(g);
    REQUIRE(fused.nodes.size() == 1);
    Tensor out = run_group(fused, "p", flavor_scalar(), {{"x", x}});
    CHECK(out.get_mem(0) == doctest::Approx(3.0));
}

TEST_CASE("interpret: avgpool of ones is 1") {
    auto g = listing_avgpool(2, 4);
    Tensor x(g.graph_inputs[0].meta);
    x.fill(1.0);
    // pad=1 with constant divisor 9 shrinks border averages
    Tensor out = run_group(g, "p", flavor_scalar(), {{"x", x}});
    CHECK(out.get({0, 1, 1}) == doctest::Approx(1.0));
    auto env = run_reference(g, {{"x", x}});
    CHECK(max_rel_err(out, env.at("p")) < 1e-6);
}

TEST_CASE("interpret: flavor pairs agree bit-identically") {
    test::GraphBuilder b(36);
    b.input("x", meta_nchw(0, 4, 6, 6));
    auto bn = b.batchnorm("bn", "x", 4);
    auto r = b.relu("r", bn);
    auto p = b.maxpool("p", r, 2, 2, 1);
    auto g = infer_shapes(b.done({"p"}), 2);
    auto x = test::random_tensor(meta_nchw(2, 4, 6, 6), 77);

    Tensor base = run_group(g, "p", flavor_scalar(), {{"x", x}});
    for (auto f : all_flavors()) {
        Tensor got = run_group(g, "p", f, {{"x", x}});
        for (int64_t i = 0; i < base.element_count(); ++i)
            CHECK(got.get_mem(i) == base.get_mem(i));
    }
}

TEST_CASE("oracle equality on fused groups") {
    std::mt19937_64 seeds(5);
    SUBCASE("softmax") {
        test::GraphBuilder b(37);
        b.input("x", meta_nc(0, 10));
        b.softmax("s", "x");
        auto g = infer_shapes(b.done({"s"}), 3);
        auto x = test::random_tensor(meta_nc(3, 10), seeds());
        for (auto f : all_flavors()) CHECK(group_vs_reference(g, "s", f, {{"x", x}}) < 1e-5);
    }
    SUBCASE("global avg pool + softmax chain") {
        test::GraphBuilder b(38);
        b.input("x", meta_nchw(0, 6, 5, 5));
        auto gp = b.gap("g", "x");
        b.softmax("s", gp);
        auto g = infer_shapes(b.done({"s"}), 2);
        auto x = test::random_tensor(meta_nchw(2, 6, 5, 5), seeds());
        CHECK(group_vs_reference(g, "s", flavor_scalar(), {{"x", x}}) < 1e-5);
    }
    SUBCASE("depthwise conv as weighted pooling") {
        test::GraphBuilder b(39);
        b.input("x", meta_nchw(0, 8, 6, 6));
        b.conv("dw", "x", 8, 8, 3, 2, 1, 8);
        auto g = infer_shapes(b.done({"dw"}), 2);
        auto x = test::random_tensor(meta_nchw(2, 8, 6, 6), seeds());
        for (auto f : all_flavors()) CHECK(group_vs_reference(g, "dw", f, {{"x", x}}) < 1e-5);
    }
    SUBCASE("cross entropy tail") {
        test::GraphBuilder b(40);
        b.input("x", meta_nc(0, 5));
        b.input("y", meta_nc(0, 5));
        auto s = b.softmax("s", "x");
        b.ce("loss", s, "y");
        auto g = infer_shapes(b.done({"loss"}), 4);
        auto x = test::random_tensor(meta_nc(4, 5), seeds());
        Tensor y(meta_nc(4, 5));
        for (int n = 0; n < 4; ++n) y.set({n, static_cast<int64_t>(n % 5)}, 1.0);
        CHECK(group_vs_reference(g, "loss", flavor_scalar(), {{"x", x}, {"y", y}}) < 1e-5);
    }
    SUBCASE("flatten") {
        test::GraphBuilder b(41);
        b.input("x", meta_nchw(0, 3, 4, 4));
        b.flatten("f", "x");
        auto g = infer_shapes(b.done({"f"}), 2);
        auto x = test::random_tensor(meta_nchw(2, 3, 4, 4), seeds());
        for (auto f : all_flavors()) CHECK(group_vs_reference(g, "f", f, {{"x", x}}) == 0.0);
    }
}

TEST_CASE("loop minimality: elementwise chain keeps one op's loop count") {
    test::GraphBuilder b(42);
    b.input("x", meta_nchw(0, 4, 6, 6));
    auto r1 = b.relu("r1", "x");
    auto r2 = b.node("r2", OpKind::Copy, {r1});
    auto r3 = b.relu("r3", r2);
    auto g = infer_shapes(b.done({r3}), 2);
    auto units = dfp::partition(clone_for_device(g, DeviceKind::Host, flavor_scalar()));
    REQUIRE(units.size() == 1);
    auto k = dfp::lower_group(g, units[0], flavor_scalar());
    CHECK(k.loop_count() == 4);  // rank of the tensor, nothing more
}

TEST_CASE("lowering works in nhwc and blocked layouts") {
    test::GraphBuilder b(43);
    b.input("x", meta_nchw(0, 8, 6, 6));
    auto r = b.relu("r", "x");
    auto p = b.maxpool("p", r, 2);
    auto g = infer_shapes(b.done({"p"}), 2);
    auto x = test::random_tensor(meta_nchw(2, 8, 6, 6), 11);
    auto env = run_reference(g, {{"x", x}});
    auto units = dfp::partition(clone_for_device(g, DeviceKind::Host, flavor_scalar()));
    REQUIRE(units.size() == 1);

    for (auto layout : {ActLayout::ChannelsLast, ActLayout::Blocked8}) {
        std::map<std::string, TensorMeta> overrides;
        overrides["x"] = apply_act_layout(g.meta_of("x"), layout);
        overrides["p"] = apply_act_layout(g.meta_of("p"), layout);
        for (auto f : all_flavors()) {
            auto k = dfp::lower_group(g, units[0], f, overrides);
            Tensor out = dfp::run_kernel(k, {{"x", x}}, g.params);
            CHECK(max_rel_err(out, env.at("p")) < 1e-6);
        }
    }
}

TEST_CASE("copy kernels reorder layouts") {
    test::GraphBuilder b(44);
    b.input("x", meta_nchw(0, 8, 4, 4));
    b.node("cp", OpKind::Copy, {"x"});
    auto g = infer_shapes(b.done({"cp"}), 2);
    auto x = test::random_tensor(meta_nchw(2, 8, 4, 4), 13);
    auto units = dfp::partition(clone_for_device(g, DeviceKind::Host, flavor_scalar()));

    std::map<std::string, TensorMeta> overrides;
    overrides["x"] = apply_act_layout(g.meta_of("x"), ActLayout::Blocked8);
    overrides["cp"] = apply_act_layout(g.meta_of("cp"), ActLayout::ChannelsLast);
    auto k = dfp::lower_group(g, units[0], flavor_scalar(), overrides);
    Tensor out = dfp::run_kernel(k, {{"x", x}}, {});
    CHECK(out.meta().dims == overrides["cp"].dims);
    CHECK(max_rel_err(out, x) == 0.0);
}

TEST_CASE("emission is deterministic") {
    auto k = lower_listing(flavor_warp());
    auto s1 = dfp::emit_source(k, flavor_warp());
    auto s2 = dfp::emit_source(k, flavor_warp());
    CHECK(s1.text == s2.text);
}

TEST_CASE("emitted source carries the listing structure") {
    SUBCASE("scalar index arithmetic and divisor") {
        auto k = lower_listing(flavor_scalar());
        auto s = dfp::emit_source(k, flavor_scalar());
        CHECK(s.text.find("OC0x * 16384 + (OP1 + K1) * 128") != std::string::npos);
        CHECK(s.text.find(" / 9") != std::string::npos);
        CHECK(s.text.find("for(int OC0x = 0; OC0x < 512; OC0x++)") != std::string::npos);
        CHECK(s.text.find("float L1_s = 0;") != std::string::npos);
    }
    SUBCASE("warp group binds blockIdx and strides threadIdx over 16384") {
        auto k = lower_listing(flavor_warp());
        auto s = dfp::emit_source(k, flavor_warp());
        CHECK(s.text.find("int OC0x = blockIdx.x;") != std::string::npos);
        CHECK(s.text.find("for(int OP0x = threadIdx.x; OP0x < 16384; OP0x += blockDim.x)") !=
              std::string::npos);
        CHECK(s.text.find("L1[OC0x * 16384 + OP0x]") != std::string::npos);
    }
    SUBCASE("ispc uses taskIndex and foreach") {
        auto k = lower_listing(flavor_shortvec());
        auto s = dfp::emit_source(k, flavor_shortvec());
        CHECK(s.text.find("uniform int OC0x = taskIndex;") != std::string::npos);
        CHECK(s.text.find("foreach(OP1 = 0 ... 128, OP0 = 0 ... 128)") != std::string::npos);
        CHECK(s.text.find("task void kernel") != std::string::npos);
    }
    SUBCASE("ncc emits omp + ivdep pragmas") {
        auto k = lower_listing(flavor_longvec());
        auto s = dfp::emit_source(k, flavor_longvec());
        CHECK(s.text.find("#pragma omp parallel for") != std::string::npos);
        CHECK(s.text.find("#pragma _NEC ivdep") != std::string::npos);
        CHECK(s.text.find("for(int OP0x = 0; OP0x < 16384; OP0x++)") != std::string::npos);
    }
    SUBCASE("simd groups vectorize within the warp") {
        auto k = lower_listing(flavor_warp(128, true));
        auto s = dfp::emit_source(k, flavor_warp(128, true));
        CHECK(s.text.find("threadIdx.x % 32") != std::string::npos);
        CHECK(s.text.find("+= 32") != std::string::npos);
    }
}

TEST_CASE("golden files match emitted listing kernels") {
    namespace fs = std::filesystem;
    fs::path dir = fs::path(SOL_TEST_DATA_DIR) / "golden";
    const bool bless = std::getenv("SOL_BLESS_GOLDENS") != nullptr;
    if (bless) fs::create_directories(dir);
    for (auto f : all_flavors()) {
        auto k = lower_listing(f);
        auto s = dfp::emit_source(k, f);
        fs::path file = dir / ("avgpool_" + f.str() + ".src");
        if (bless) {
            std::ofstream out(file, std::ios::binary);
            out << s.text;
        }
        std::ifstream in(file, std::ios::binary);
        REQUIRE_MESSAGE(in.good(), "missing golden " << file.string());
        std::string want((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        CHECK_MESSAGE(s.text == want, "golden mismatch for " << f.str());
    }
}

TEST_CASE("kernel IR serializes losslessly") {
    auto k = lower_listing(flavor_longvec(), 8, 4);
    auto text = k.to_json();
    auto back = KernelIR::from_json(text);
    CHECK(back == k);
    CHECK(back.to_json() == text);
}
