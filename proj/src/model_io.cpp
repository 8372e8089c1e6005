// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0

#include "sol/model_io.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "sol/errors.hpp"

namespace sol {

using nlohmann::json;

namespace {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to " + path.string());
}

DimTag parse_tag(const json& j) {
    std::string t = j.at("tag").get<std::string>();
    DimTag tag;
    tag.index = j.at("index").get<int>();
    if (t == "N") tag.purpose = DimPurpose::None;
    else if (t == "C") tag.purpose = DimPurpose::Channel;
    else if (t == "P") tag.purpose = DimPurpose::Pixel;
    else throw MalformedModelError("unknown dim tag '" + t + "'");
    return tag;
}

json tag_to_json(const Dim& d) {
    json j;
    j["tag"] = d.tag.purpose == DimPurpose::None ? "N" : d.tag.purpose == DimPurpose::Channel ? "C" : "P";
    j["index"] = d.tag.index;
    if (d.extent == 0) j["extent"] = "B";
    else j["extent"] = d.extent;
    return j;
}

std::pair<int64_t, int64_t> parse_pair(const json& j, const std::string& key) {
    const auto& v = j.at(key);
    if (v.is_number_integer()) return {v.get<int64_t>(), v.get<int64_t>()};
    if (v.is_array() && v.size() == 2) return {v[0].get<int64_t>(), v[1].get<int64_t>()};
    throw MalformedModelError("attr '" + key + "' must be an int or [h, w] pair");
}

Attrs parse_attrs(OpKind op, const json& j) {
    Attrs a;
    switch (op) {
        case OpKind::Conv2d: {
            a.out_channels = j.at("out_channels").get<int64_t>();
            std::tie(a.kh, a.kw) = parse_pair(j, "kernel");
            if (j.contains("stride")) std::tie(a.sh, a.sw) = parse_pair(j, "stride");
            if (j.contains("padding")) std::tie(a.ph, a.pw) = parse_pair(j, "padding");
            a.groups = j.value("groups", int64_t{1});
            a.has_bias = j.value("bias", true);
            break;
        }
        case OpKind::Linear: {
            a.out_features = j.at("out_features").get<int64_t>();
            a.has_bias = j.value("bias", true);
            break;
        }
        case OpKind::MaxPool2d:
        case OpKind::AvgPool2d: {
            std::tie(a.kh, a.kw) = parse_pair(j, "kernel");
            std::tie(a.sh, a.sw) = std::make_pair(a.kh, a.kw);
            if (j.contains("stride")) std::tie(a.sh, a.sw) = parse_pair(j, "stride");
            if (j.contains("padding")) std::tie(a.ph, a.pw) = parse_pair(j, "padding");
            if (op == OpKind::MaxPool2d) a.min_init = j.value("min_init", a.min_init);
            else a.count_padding = j.value("count_padding", false);
            break;
        }
        case OpKind::BatchNorm2d: {
            a.eps = j.value("eps", 1e-5f);
            a.momentum = j.value("momentum", 0.1f);
            break;
        }
        default:
            break;
    }
    return a;
}

// Base user-facing op whose attr fields an op shares (gradient ops carry the
// forward op's attrs).
OpKind attr_base_op(OpKind op) {
    switch (op) {
        case OpKind::Conv2dBackX:
        case OpKind::Conv2dBackW:
        case OpKind::Conv2dBackB:
            return OpKind::Conv2d;
        case OpKind::LinearBackX:
        case OpKind::LinearBackW:
        case OpKind::LinearBackB:
            return OpKind::Linear;
        case OpKind::MaxPool2dBack:
            return OpKind::MaxPool2d;
        case OpKind::AvgPool2dBack:
            return OpKind::AvgPool2d;
        case OpKind::BatchNormBackX:
        case OpKind::BatchNormBackGamma:
        case OpKind::BatchNormBackBeta:
            return OpKind::BatchNorm2d;
        default:
            return op;
    }
}

json attrs_to_json(const LayerNode& node) {
    LayerNode n = node;
    n.op = attr_base_op(node.op);
    json j = json::object();
    const Attrs& a = n.attrs;
    if (a.training) j["training"] = true;
    if (a.lr != 0.0f) j["lr"] = a.lr;
    switch (n.op) {
        case OpKind::Conv2d:
            j["out_channels"] = a.out_channels;
            j["kernel"] = {a.kh, a.kw};
            j["stride"] = {a.sh, a.sw};
            j["padding"] = {a.ph, a.pw};
            j["groups"] = a.groups;
            j["bias"] = a.has_bias;
            break;
        case OpKind::Linear:
            j["out_features"] = a.out_features;
            j["bias"] = a.has_bias;
            break;
        case OpKind::MaxPool2d:
            j["kernel"] = {a.kh, a.kw};
            j["stride"] = {a.sh, a.sw};
            j["padding"] = {a.ph, a.pw};
            if (a.min_init == a.min_init && !std::isinf(a.min_init)) j["min_init"] = a.min_init;
            break;
        case OpKind::AvgPool2d:
            j["kernel"] = {a.kh, a.kw};
            j["stride"] = {a.sh, a.sw};
            j["padding"] = {a.ph, a.pw};
            j["count_padding"] = a.count_padding;
            break;
        case OpKind::BatchNorm2d:
            j["eps"] = a.eps;
            j["momentum"] = a.momentum;
            break;
        default:
            break;
    }
    return j;
}

// Parameter shapes are checked against node attrs as far as they can be
// without shape inference; channel consistency is caught by infer_shapes.
void validate_params(const ModelGraph& g) {
    for (const auto& n : g.nodes) {
        auto param = [&](size_t i) -> const Tensor& { return g.params.at(n.params.at(i)); };
        auto fail = [&](const std::string& msg) {
            throw WeightsMismatchError("node '" + n.id + "': " + msg);
        };
        switch (n.op) {
            case OpKind::Conv2d: {
                size_t expect = n.attrs.has_bias ? 2 : 1;
                if (n.params.size() != expect) fail("Conv2d expects W" + std::string(n.attrs.has_bias ? "+b" : ""));
                const auto& w = param(0).meta();
                if (w.rank() != 4 || w.dims[0].extent != n.attrs.out_channels ||
                    w.dims[2].extent != n.attrs.kh || w.dims[3].extent != n.attrs.kw)
                    fail("conv weight shape mismatch: " + w.str());
                if (n.attrs.has_bias && param(1).meta().element_count() != n.attrs.out_channels)
                    fail("conv bias size mismatch");
                break;
            }
            case OpKind::Linear: {
                size_t expect = n.attrs.has_bias ? 2 : 1;
                if (n.params.size() != expect) fail("Linear expects W" + std::string(n.attrs.has_bias ? "+b" : ""));
                const auto& w = param(0).meta();
                if (w.rank() != 2 || w.dims[0].extent != n.attrs.out_features)
                    fail("linear weight shape mismatch: " + w.str());
                if (n.attrs.has_bias && param(1).meta().element_count() != n.attrs.out_features)
                    fail("linear bias size mismatch");
                break;
            }
            case OpKind::BatchNorm2d: {
                if (n.params.size() != 4) fail("BatchNorm2d expects gamma,beta,mean,var");
                int64_t c = param(0).meta().element_count();
                for (size_t i = 1; i < 4; ++i)
                    if (param(i).meta().element_count() != c) fail("batchnorm parameter sizes differ");
                break;
            }
            default:
                if (!n.params.empty()) fail("op takes no parameters");
                break;
        }
    }
}

}  // namespace

ModelGraph parse_model_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw MalformedModelError(std::string("model JSON parse error: ") + e.what());
    }
    ModelGraph g;
    try {
        for (const auto& in : j.at("inputs")) {
            GraphInput gi;
            gi.name = in.at("name").get<std::string>();
            for (const auto& d : in.at("dims")) {
                Dim dim;
                dim.tag = parse_tag(d);
                const auto& e = d.at("extent");
                if (e.is_string()) {
                    if (e.get<std::string>() != "B")
                        throw MalformedModelError("only 'B' is a valid symbolic extent");
                    dim.extent = 0;
                } else {
                    dim.extent = e.get<int64_t>();
                    if (dim.extent <= 0) throw MalformedModelError("extents must be positive");
                }
                gi.meta.dims.push_back(dim);
            }
            if (in.contains("dtype"))
                gi.meta.dtype = in.at("dtype").get<std::string>() == "f64" ? Dtype::F64 : Dtype::F32;
            g.graph_inputs.push_back(std::move(gi));
        }
        for (const auto& nj : j.at("nodes")) {
            LayerNode n;
            n.id = nj.at("id").get<std::string>();
            std::string opname = nj.at("op").get<std::string>();
            auto op = op_from_name(opname);
            if (!op) throw UnsupportedOpError("unsupported op '" + opname + "'");
            n.op = *op;
            n.attrs = parse_attrs(n.op, nj.value("attrs", json::object()));
            n.inputs = nj.value("inputs", std::vector<std::string>{});
            n.params = nj.value("params", std::vector<std::string>{});
            g.nodes.push_back(std::move(n));
        }
        g.outputs = j.at("outputs").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw MalformedModelError(std::string("bad model JSON structure: ") + e.what());
    }
    return g;
}

std::string model_to_json(const ModelGraph& g) {
    json j;
    j["inputs"] = json::array();
    for (const auto& in : g.graph_inputs) {
        json ij;
        ij["name"] = in.name;
        ij["dims"] = json::array();
        for (const auto& d : in.meta.dims) ij["dims"].push_back(tag_to_json(d));
        if (in.meta.dtype == Dtype::F64) ij["dtype"] = "f64";
        j["inputs"].push_back(ij);
    }
    j["nodes"] = json::array();
    for (const auto& n : g.nodes) {
        json nj;
        nj["id"] = n.id;
        nj["op"] = op_name(n.op);
        nj["attrs"] = attrs_to_json(n);
        nj["inputs"] = n.inputs;
        nj["params"] = n.params;
        j["nodes"].push_back(nj);
    }
    j["outputs"] = g.outputs;
    return j.dump(2);
}

ModelGraph load_model(const std::filesystem::path& model_path,
                      const std::filesystem::path& weights_path) {
    ModelGraph g = parse_model_json(read_file(model_path));
    g.params = load_weights(weights_path);
    g.validate_and_sort();
    validate_params(g);
    return g;
}

namespace {

void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Cursor {
    const std::string& bytes;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > bytes.size()) throw WeightsMismatchError("truncated weights file");
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(bytes[pos++]);
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint8_t>(bytes[pos]) | (static_cast<uint8_t>(bytes[pos + 1]) << 8);
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(bytes[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::string str(size_t n) {
        need(n);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
};

constexpr char kMagic[4] = {0x53, 0x4f, 0x4c, 0x57};  // "SOLW"

}  // namespace

std::string weights_to_bytes(const std::map<std::string, Tensor>& tensors) {
    std::string out(kMagic, 4);
    put_u32(out, 1);
    put_u32(out, static_cast<uint32_t>(tensors.size()));
    // std::map iteration gives the canonical (name-sorted) order.
    for (const auto& [name, t] : tensors) {
        put_u16(out, static_cast<uint16_t>(name.size()));
        out += name;
        out.push_back(t.meta().dtype == Dtype::F32 ? 0 : 1);
        out.push_back(static_cast<char>(t.meta().rank()));
        for (const auto& d : t.meta().dims) put_u32(out, static_cast<uint32_t>(d.extent));
        size_t nbytes = static_cast<size_t>(t.meta().bytes());
        size_t at = out.size();
        out.resize(at + nbytes);
        std::memcpy(out.data() + at, t.raw(), nbytes);
    }
    return out;
}

std::map<std::string, Tensor> weights_from_bytes(const std::string& bytes) {
    Cursor c{bytes};
    if (c.str(4) != std::string(kMagic, 4)) throw WeightsMismatchError("bad weights magic");
    uint32_t version = c.u32();
    if (version != 1) throw WeightsMismatchError("unsupported weights version " + std::to_string(version));
    uint32_t count = c.u32();
    std::map<std::string, Tensor> out;
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = c.str(c.u16());
        Dtype dtype = c.u8() == 0 ? Dtype::F32 : Dtype::F64;
        uint8_t ndims = c.u8();
        std::vector<int64_t> extents;
        for (uint8_t d = 0; d < ndims; ++d) extents.push_back(c.u32());
        Tensor t(meta_plain(extents, dtype));
        size_t nbytes = static_cast<size_t>(t.meta().bytes());
        c.need(nbytes);
        std::memcpy(t.raw(), bytes.data() + c.pos, nbytes);
        c.pos += nbytes;
        if (!out.emplace(name, std::move(t)).second)
            throw WeightsMismatchError("duplicate tensor '" + name + "' in weights file");
    }
    if (c.pos != bytes.size()) throw WeightsMismatchError("trailing bytes in weights file");
    return out;
}

std::map<std::string, Tensor> load_weights(const std::filesystem::path& path) {
    return weights_from_bytes(read_file(path));
}

void save_weights(const std::map<std::string, Tensor>& tensors, const std::filesystem::path& path) {
    write_file(path, weights_to_bytes(tensors));
}

void save_tensor(const Tensor& t, const std::string& name, const std::filesystem::path& path) {
    std::map<std::string, Tensor> m;
    m.emplace(name, t);
    save_weights(m, path);
}

Tensor load_tensor(const std::filesystem::path& path, std::string* name) {
    auto m = load_weights(path);
    if (m.size() != 1) throw WeightsMismatchError("expected a single tensor in " + path.string());
    if (name) *name = m.begin()->first;
    return std::move(m.begin()->second);
}

std::string meta_to_json_string(const TensorMeta& m) {
    json j;
    j["dims"] = json::array();
    for (const auto& d : m.dims)
        j["dims"].push_back({static_cast<int>(d.tag.purpose), d.tag.index, d.extent});
    j["dtype"] = static_cast<int>(m.dtype);
    j["layout"] = {static_cast<int>(m.layout.kind), m.layout.block};
    return j.dump();
}

TensorMeta meta_from_json_string(const std::string& text) {
    json j = json::parse(text);
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

std::string attrs_to_json_string(const LayerNode& n) { return attrs_to_json(n).dump(); }

Attrs attrs_from_json_string(OpKind op, const std::string& text) {
    json j = json::parse(text);
    Attrs a = parse_attrs(attr_base_op(op), j);
    // fields outside the user-facing schema
    a.min_init = j.value("min_init", a.min_init);
    a.training = j.value("training", a.training);
    a.lr = j.value("lr", a.lr);
    return a;
}

}  // namespace sol
