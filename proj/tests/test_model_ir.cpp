// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "builders.hpp"
#include "sol/errors.hpp"
#include "sol/model_io.hpp"
#include "sol/reference.hpp"

using namespace sol;

namespace {

const char* kLinearModelJson = R"({
  "inputs": [{"name": "x", "dims": [
    {"tag": "N", "index": 0, "extent": "B"},
    {"tag": "C", "index": 0, "extent": 4}]}],
  "nodes": [{"id": "fc", "op": "Linear",
             "attrs": {"out_features": 2},
             "inputs": ["x"], "params": ["fc.W", "fc.b"]}],
  "outputs": ["fc"]
})";

std::filesystem::path write_text(const std::filesystem::path& dir, const std::string& name,
                                 const std::string& text) {
    auto p = dir / name;
    std::ofstream f(p);
    f << text;
    return p;
}

std::map<std::string, Tensor> linear_weights() {
    std::map<std::string, Tensor> w;
    Tensor W(meta_plain({2, 4}));
    for (int i = 0; i < 8; ++i) W.set_mem(i, 0.1 * (i + 1));
    Tensor b(meta_plain({2}));
    b.set_mem(0, 0.5);
    b.set_mem(1, -0.5);
    w.emplace("fc.W", std::move(W));
    w.emplace("fc.b", std::move(b));
    return w;
}

}  // namespace

TEST_CASE("dim tags render and order") {
    CHECK(DimTag{DimPurpose::None, 0}.str() == "N0");
    CHECK(DimTag{DimPurpose::Channel, 0}.str() == "C0");
    CHECK(DimTag{DimPurpose::Pixel, 1}.str() == "P1");
}

TEST_CASE("tensor meta invariants") {
    auto m = meta_nchw(1, 8, 4, 4);
    CHECK(m.element_count() == 128);
    m.validate();

    // duplicate tag
    auto dup = m;
    dup.dims[2].tag = DimTag{DimPurpose::Pixel, 0};
    CHECK_THROWS_AS(dup.validate(), ShapeMismatchError);

    // non-contiguous pixel indices
    auto gap = meta_nchw(1, 8, 4, 4);
    gap.dims[2].tag = DimTag{DimPurpose::Pixel, 2};
    CHECK_THROWS_AS(gap.validate(), ShapeMismatchError);

    // blocked layout divisibility
    auto blocked = meta_nchw(1, 8, 4, 4);
    blocked.layout = LayoutId{LayoutId::Kind::BlockedChannel, 8};
    blocked.validate();
    blocked.dims[1].extent = 12;
    CHECK_THROWS_AS(blocked.validate(), ShapeMismatchError);
}

TEST_CASE("blocked layout offsets round-trip logical content") {
    auto canonical = meta_nchw(2, 8, 3, 3);
    Tensor t(canonical);
    std::mt19937_64 rng(7);
    t.fill_uniform(rng, -1, 1);

    auto blocked = canonical;
    blocked.layout = LayoutId{LayoutId::Kind::BlockedChannel, 4};
    Tensor b = t.relayout(blocked);
    CHECK(max_rel_err(t, b) == 0.0);
    Tensor back = b.relayout(canonical);
    for (int64_t i = 0; i < t.element_count(); ++i) CHECK(t.get_mem(i) == back.get_mem(i));
}

TEST_CASE("nchw to nhwc relayout preserves logical values") {
    Tensor t(meta_nchw(1, 2, 2, 2));
    for (int i = 0; i < 8; ++i) t.set_mem(i, i);
    Tensor u = t.relayout(apply_act_layout(t.meta(), ActLayout::ChannelsLast));
    // NHWC memory order: (h,w,c) fastest c
    CHECK(u.get_mem(0) == doctest::Approx(0));   // c0 h0 w0
    CHECK(u.get_mem(1) == doctest::Approx(4));   // c1 h0 w0
    CHECK(u.get_mem(2) == doctest::Approx(1));   // c0 h0 w1
    CHECK(max_rel_err(t, u) == 0.0);
}

TEST_CASE("load_model: minimal linear model") {
    auto dir = test::temp_dir("load");
    auto model = write_text(dir, "m.json", kLinearModelJson);
    auto weights = dir / "w.solw";
    save_weights(linear_weights(), weights);

    ModelGraph g = load_model(model, weights);
    CHECK(g.nodes.size() == 1);
    CHECK(g.nodes[0].op == OpKind::Linear);
    CHECK(g.params.at("fc.W").meta().dims[0].extent == 2);
    CHECK(g.params.at("fc.W").meta().dims[1].extent == 4);
    CHECK(g.params.at("fc.b").meta().element_count() == 2);
}

TEST_CASE("load_model error paths") {
    auto dir = test::temp_dir("load_err");
    auto weights = dir / "w.solw";
    save_weights(linear_weights(), weights);

    SUBCASE("dangling input id") {
        auto bad = write_text(dir, "bad.json", R"({
          "inputs": [{"name":"x","dims":[{"tag":"N","index":0,"extent":"B"},{"tag":"C","index":0,"extent":4}]}],
          "nodes": [{"id":"fc","op":"Linear","attrs":{"out_features":2},"inputs":["nope"],"params":["fc.W","fc.b"]}],
          "outputs": ["fc"]})");
        CHECK_THROWS_AS(load_model(bad, weights), MalformedModelError);
    }
    SUBCASE("cycle") {
        auto bad = write_text(dir, "cycle.json", R"({
          "inputs": [{"name":"x","dims":[{"tag":"N","index":0,"extent":"B"},{"tag":"C","index":0,"extent":4}]}],
          "nodes": [{"id":"a","op":"ReLU","inputs":["b"]},
                    {"id":"b","op":"ReLU","inputs":["a"]}],
          "outputs": ["b"]})");
        CHECK_THROWS_AS(load_model(bad, weights), MalformedModelError);
    }
    SUBCASE("unsupported op") {
        auto bad = write_text(dir, "op.json", R"({
          "inputs": [{"name":"x","dims":[{"tag":"N","index":0,"extent":"B"},{"tag":"C","index":0,"extent":4}]}],
          "nodes": [{"id":"a","op":"LSTM","inputs":["x"]}],
          "outputs": ["a"]})");
        CHECK_THROWS_AS(load_model(bad, weights), UnsupportedOpError);
    }
    SUBCASE("backward op names are not user-facing") {
        auto bad = write_text(dir, "bw.json", R"({
          "inputs": [{"name":"x","dims":[{"tag":"N","index":0,"extent":"B"},{"tag":"C","index":0,"extent":4}]}],
          "nodes": [{"id":"a","op":"ReluBack","inputs":["x","x"]}],
          "outputs": ["a"]})");
        CHECK_THROWS_AS(load_model(bad, weights), UnsupportedOpError);
    }
    SUBCASE("missing parameter") {
        auto bad = write_text(dir, "gone.json", R"({
          "inputs": [{"name":"x","dims":[{"tag":"N","index":0,"extent":"B"},{"tag":"C","index":0,"extent":4}]}],
          "nodes": [{"id":"fc","op":"Linear","attrs":{"out_features":2},"inputs":["x"],"params":["zz.W"]}],
          "outputs": ["fc"]})");
        CHECK_THROWS_AS(load_model(bad, weights), WeightsMismatchError);
    }
    SUBCASE("mis-sized parameter") {
        auto model = write_text(dir, "m.json", kLinearModelJson);
        auto w = linear_weights();
        w.erase("fc.W");
        w.emplace("fc.W", Tensor(meta_plain({3, 4})));
        auto badw = dir / "bad.solw";
        save_weights(w, badw);
        CHECK_THROWS_AS(load_model(model, badw), WeightsMismatchError);
    }
}

TEST_CASE("mlp with 8192 features parses as a 5-node chain") {
    std::string json = R"({
      "inputs": [{"name":"x","dims":[{"tag":"N","index":0,"extent":"B"},{"tag":"C","index":0,"extent":8192}]}],
      "nodes": [
        {"id":"l1","op":"Linear","attrs":{"out_features":8192},"inputs":["x"],"params":["l1.W","l1.b"]},
        {"id":"r1","op":"ReLU","inputs":["l1"]},
        {"id":"l2","op":"Linear","attrs":{"out_features":8192},"inputs":["r1"],"params":["l2.W","l2.b"]},
        {"id":"r2","op":"ReLU","inputs":["l2"]},
        {"id":"l3","op":"Linear","attrs":{"out_features":8192},"inputs":["r2"],"params":["l3.W","l3.b"]}],
      "outputs": ["l3"]})";
    ModelGraph g = parse_model_json(json);
    CHECK(g.nodes.size() == 5);
    CHECK(g.nodes.front().id == "l1");
    CHECK(g.nodes.back().id == "l3");
    CHECK(g.graph_inputs[0].meta.extent_of(DimTag{DimPurpose::Channel, 0}) == 8192);
}

TEST_CASE("infer_shapes: conv on [B,3,224,224]") {
    test::GraphBuilder b(5);
    b.input("x", meta_nchw(0, 3, 224, 224));
    b.conv("c1", "x", 3, 64, 7, 2, 3);
    auto g = b.done({"c1"});
    auto annotated = infer_shapes(g, 1);
    const auto& m = *annotated.nodes[0].out_meta;
    CHECK(m.extent_of(kBatchTag) == 1);
    CHECK(m.extent_of(DimTag{DimPurpose::Channel, 0}) == 64);
    CHECK(m.extent_of(DimTag{DimPurpose::Pixel, 1}) == 112);
    CHECK(m.extent_of(DimTag{DimPurpose::Pixel, 0}) == 112);
}

TEST_CASE("infer_shapes: relu preserves shape; idempotent; rename-independent") {
    test::GraphBuilder b(6);
    b.input("x", meta_nchw(0, 64, 112, 112));
    b.relu("r", "x");
    auto g = b.done({"r"});
    auto a1 = infer_shapes(g, 1);
    CHECK(*a1.nodes[0].out_meta == meta_nchw(1, 64, 112, 112));

    auto a2 = infer_shapes(a1, 1);
    CHECK(*a2.nodes[0].out_meta == *a1.nodes[0].out_meta);

    auto renamed = g;
    renamed.nodes[0].id = "zz";
    renamed.outputs = {"zz"};
    auto a3 = infer_shapes(renamed, 1);
    CHECK(*a3.nodes[0].out_meta == *a1.nodes[0].out_meta);
}

TEST_CASE("infer_shapes: linear fed wrong channel count") {
    test::GraphBuilder b(7);
    b.input("x", meta_nc(0, 12));
    b.linear("fc", "x", 10, 3);  // weights sized for 10 in-features
    auto g = b.done({"fc"});
    CHECK_THROWS_AS(infer_shapes(g, 1), ShapeMismatchError);
}

TEST_CASE("infer_shapes: add operand mismatch") {
    test::GraphBuilder b(8);
    b.input("x", meta_nchw(0, 4, 8, 8));
    b.input("y", meta_nchw(0, 4, 8, 4));
    b.add("s", "x", "y");
    auto g = b.done({"s"});
    CHECK_THROWS_AS(infer_shapes(g, 2), ShapeMismatchError);
}

TEST_CASE("reference_forward: avgpool examples") {
    SUBCASE("all ones -> 1.0") {
        test::GraphBuilder b(9);
        b.input("x", meta_nchw(0, 1, 3, 3));
        b.avgpool("p", "x", 3, 1);
        auto g = infer_shapes(b.done({"p"}), 1);
        Tensor x(meta_nchw(1, 1, 3, 3));
        x.fill(1.0);
        auto out = reference_forward(g, {{"x", x}});
        CHECK(out.at("p").get_mem(0) == doctest::Approx(1.0));
    }
    SUBCASE("values 0..8 -> 4.0") {
        test::GraphBuilder b(10);
        b.input("x", meta_nchw(0, 1, 3, 3));
        b.avgpool("p", "x", 3);
        auto g = infer_shapes(b.done({"p"}), 1);
        Tensor x(meta_nchw(1, 1, 3, 3));
        for (int i = 0; i < 9; ++i) x.set_mem(i, i);
        auto out = reference_forward(g, {{"x", x}});
        CHECK(out.at("p").get_mem(0) == doctest::Approx(4.0));
    }
}

TEST_CASE("reference_forward: relu definition") {
    test::GraphBuilder b(11);
    b.input("x", meta_nc(0, 3));
    b.relu("r", "x");
    auto g = infer_shapes(b.done({"r"}), 1);
    Tensor x(meta_nc(1, 3));
    x.set_mem(0, -1);
    x.set_mem(1, 0);
    x.set_mem(2, 2);
    auto out = reference_forward(g, {{"x", x}});
    CHECK(out.at("r").get_mem(0) == 0.0);
    CHECK(out.at("r").get_mem(1) == 0.0);
    CHECK(out.at("r").get_mem(2) == 2.0);
}

TEST_CASE("reference_forward is pure (bit-identical reruns)") {
    test::GraphBuilder b(12);
    b.input("x", meta_nchw(0, 4, 6, 6));
    auto c = b.conv("c", "x", 4, 8, 3, 1, 1);
    auto r = b.relu("r", c);
    auto p = b.maxpool("p", r, 2);
    auto g = infer_shapes(b.done({p}), 2);
    auto x = test::random_tensor(meta_nchw(2, 4, 6, 6), 42);
    auto o1 = reference_forward(g, {{"x", x}});
    auto o2 = reference_forward(g, {{"x", x}});
    const auto& t1 = o1.at("p");
    const auto& t2 = o2.at("p");
    for (int64_t i = 0; i < t1.element_count(); ++i) CHECK(t1.get_mem(i) == t2.get_mem(i));
}

TEST_CASE("tag-driven ops: nchw and nhwc inputs give permutation-equal outputs") {
    // batchnorm + maxpool + avgpool chain evaluated in both dim orders
    auto build = [&](const TensorMeta& input_meta) {
        test::GraphBuilder b(13);  // same seed -> identical params
        b.input("x", input_meta);
        auto bn = b.batchnorm("bn", "x", 4);
        auto mp = b.maxpool("mp", bn, 2);
        auto ap = b.avgpool("ap", mp, 2, 1, 0);
        return infer_shapes(b.done({ap}), 2);
    };
    TensorMeta nchw = meta_nchw(0, 4, 6, 6);
    TensorMeta nhwc = apply_act_layout(meta_nchw(0, 4, 6, 6), ActLayout::ChannelsLast);
    nhwc.dims[0].extent = 0;

    auto g1 = build(nchw);
    auto g2 = build(nhwc);
    auto x = test::random_tensor(meta_nchw(2, 4, 6, 6), 99);
    Tensor x_nhwc = x.relayout(apply_act_layout(x.meta(), ActLayout::ChannelsLast));

    auto o1 = reference_forward(g1, {{"x", x}});
    auto o2 = reference_forward(g2, {{"x", x_nhwc}});
    CHECK(max_rel_err(o1.at("ap"), o2.at("ap")) < 1e-12);
}

TEST_CASE("weights file round-trips byte-identically") {
    test::GraphBuilder b(14);
    b.input("x", meta_nc(0, 4));
    b.linear("fc", "x", 4, 2);
    auto g = b.done({"fc"});

    auto dir = test::temp_dir("roundtrip");
    auto wpath = dir / "w.solw";
    save_weights(g.params, wpath);
    std::string bytes1 = weights_to_bytes(g.params);

    auto loaded = load_weights(wpath);
    std::string bytes2 = weights_to_bytes(loaded);
    CHECK(bytes1 == bytes2);

    // header spot checks: magic + version + count
    CHECK(bytes1.substr(0, 4) == "SOLW");
    CHECK(static_cast<uint8_t>(bytes1[4]) == 1);
    CHECK(static_cast<uint8_t>(bytes1[8]) == 2);
}

TEST_CASE("weights file rejects corruption") {
    auto w = linear_weights();
    std::string bytes = weights_to_bytes(w);
    SUBCASE("bad magic") {
        bytes[0] = 'X';
        CHECK_THROWS_AS(weights_from_bytes(bytes), WeightsMismatchError);
    }
    SUBCASE("truncated payload") {
        bytes.resize(bytes.size() - 3);
        CHECK_THROWS_AS(weights_from_bytes(bytes), WeightsMismatchError);
    }
    SUBCASE("trailing garbage") {
        bytes += "zz";
        CHECK_THROWS_AS(weights_from_bytes(bytes), WeightsMismatchError);
    }
}

TEST_CASE("model json round-trip preserves structure") {
    ModelGraph g = parse_model_json(kLinearModelJson);
    auto text = model_to_json(g);
    ModelGraph g2 = parse_model_json(text);
    CHECK(g2.nodes.size() == g.nodes.size());
    CHECK(g2.graph_inputs[0].meta.dims[0].extent == 0);
    CHECK(g2.nodes[0].attrs.out_features == 2);
}
