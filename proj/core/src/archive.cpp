#include "headscope/archive.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <vector>

#include <json.hpp>

#include "headscope/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "archive i/o assumes a little-endian host");

namespace headscope {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'H', 'S', 'C', 'O', 'P', 'E', '0', '1'};
constexpr size_t kAlign = 64;

size_t align_up(size_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

// Deterministic enumeration of every tensor in a model, name first. Norm
// vectors travel as 1 x d tensors.
struct Entry {
    std::string name;
    const float* data;
    int rows, cols;
};

std::vector<Entry> enumerate(const Model& m) {
    std::vector<Entry> out;
    out.push_back({"E", m.w.e.data.data(), m.w.e.rows, m.w.e.cols});
    out.push_back({"P", m.w.p.data.data(), m.w.p.rows, m.w.p.cols});
    for (int l = 0; l < m.spec.layers; ++l) {
        const LayerWeights& lw = m.w.layers[size_t(l)];
        const std::string pre = "layer" + std::to_string(l) + ".";
        for (int h = 0; h < m.spec.heads; ++h) {
            const std::string hp = pre + "h" + std::to_string(h) + ".";
            out.push_back({hp + "wq", lw.w_q[size_t(h)].data.data(), lw.w_q[size_t(h)].rows,
                           lw.w_q[size_t(h)].cols});
            out.push_back({hp + "wk", lw.w_k[size_t(h)].data.data(), lw.w_k[size_t(h)].rows,
                           lw.w_k[size_t(h)].cols});
            out.push_back({hp + "wv", lw.w_v[size_t(h)].data.data(), lw.w_v[size_t(h)].rows,
                           lw.w_v[size_t(h)].cols});
        }
        out.push_back({pre + "wo", lw.w_o.data.data(), lw.w_o.rows, lw.w_o.cols});
        out.push_back({pre + "ffn.w1", lw.w1.data.data(), lw.w1.rows, lw.w1.cols});
        out.push_back({pre + "ffn.w2", lw.w2.data.data(), lw.w2.rows, lw.w2.cols});
        if (m.spec.use_layer_norm) {
            out.push_back({pre + "ln1.g", lw.ln1_gain.data(), 1, int(lw.ln1_gain.size())});
            out.push_back({pre + "ln1.b", lw.ln1_bias.data(), 1, int(lw.ln1_bias.size())});
            out.push_back({pre + "ln2.g", lw.ln2_gain.data(), 1, int(lw.ln2_gain.size())});
            out.push_back({pre + "ln2.b", lw.ln2_bias.data(), 1, int(lw.ln2_bias.size())});
        }
    }
    return out;
}

json coord_to_json(const HeadCoord& c) { return json::array({c.layer, c.head}); }

HeadCoord coord_from_json(const json& j, const char* field) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer())
        throw DataError(std::string("planted block: '") + field + "' is not a [layer, head] pair");
    return HeadCoord{j[0].get<int>(), j[1].get<int>()};
}

json planted_to_json(const PlantedInfo& p) {
    json j;
    j["memory_head"] = coord_to_json(p.memory_head);
    j["context_head"] = coord_to_json(p.context_head);
    j["routing_head"] = coord_to_json(p.routing_head);
    j["relation_scan_head"] = coord_to_json(p.relation_scan_head);
    j["attribute_scan_head"] = coord_to_json(p.attribute_scan_head);
    j["lambda"] = p.lambda_mix;
    j["relation"] = p.relation;
    j["dual_preference"] = p.dual_preference;
    j["rotated"] = p.rotated;
    return j;
}

PlantedInfo planted_from_json(const json& j) {
    PlantedInfo p;
    for (const char* f : {"memory_head", "context_head", "routing_head", "relation_scan_head",
                          "attribute_scan_head", "lambda", "relation"})
        if (!j.contains(f)) throw DataError(std::string("planted block: missing field '") + f + "'");
    p.memory_head = coord_from_json(j.at("memory_head"), "memory_head");
    p.context_head = coord_from_json(j.at("context_head"), "context_head");
    p.routing_head = coord_from_json(j.at("routing_head"), "routing_head");
    p.relation_scan_head = coord_from_json(j.at("relation_scan_head"), "relation_scan_head");
    p.attribute_scan_head = coord_from_json(j.at("attribute_scan_head"), "attribute_scan_head");
    p.lambda_mix = j.at("lambda").get<double>();
    p.relation = j.at("relation").get<std::string>();
    p.dual_preference = j.value("dual_preference", true);
    p.rotated = j.value("rotated", false);
    return p;
}

template <typename T>
T pick(const json& j, const char* field) {
    if (!j.contains(field)) throw DataError(std::string("archive spec: missing field '") + field + "'");
    try {
        return j.at(field).get<T>();
    } catch (const json::exception&) {
        throw DataError(std::string("archive spec: field '") + field + "' has the wrong type");
    }
}

} // namespace

void save_model(const std::string& path, const Model& model, const PlantedInfo* planted) {
    model.validate();
    const std::vector<Entry> entries = enumerate(model);

    json header;
    header["spec"] = {
        {"layers", model.spec.layers},       {"heads", model.spec.heads},
        {"d_model", model.spec.d_model},     {"d_ff", model.spec.d_ff},
        {"vocab", model.spec.vocab},         {"n_max", model.spec.n_max},
        {"use_layer_norm", model.spec.use_layer_norm},
        {"activation", activation_name(model.spec.activation)},
    };
    json tensors = json::array();
    size_t offset = 0; // relative to the data section
    for (const Entry& e : entries) {
        tensors.push_back({{"name", e.name}, {"rows", e.rows}, {"cols", e.cols}, {"offset", offset}});
        offset = align_up(offset + size_t(e.rows) * size_t(e.cols) * sizeof(float));
    }
    header["tensors"] = std::move(tensors);
    if (planted) header["planted"] = planted_to_json(*planted);

    const std::string hdr = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out.write(kMagic, sizeof(kMagic));
    const uint64_t hlen = hdr.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hdr.data(), std::streamsize(hdr.size()));

    size_t pos = sizeof(kMagic) + sizeof(hlen) + hdr.size();
    const size_t data_start = align_up(pos);
    const std::string zeros(kAlign, '\0');
    out.write(zeros.data(), std::streamsize(data_start - pos));

    size_t cursor = 0;
    for (const Entry& e : entries) {
        const size_t bytes = size_t(e.rows) * size_t(e.cols) * sizeof(float);
        out.write(reinterpret_cast<const char*>(e.data), std::streamsize(bytes));
        const size_t next = align_up(cursor + bytes);
        out.write(zeros.data(), std::streamsize(next - (cursor + bytes)));
        cursor = next;
    }
    out.flush();
    if (!out) throw DataError("failed while writing '" + path + "'");
}

LoadedModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < sizeof(kMagic) + sizeof(uint64_t) ||
        std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        throw DataError("'" + path + "' is not a model archive");
    uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + sizeof(kMagic), sizeof(hlen));
    const size_t hdr_off = sizeof(kMagic) + sizeof(uint64_t);
    if (hdr_off + hlen > bytes.size()) throw DataError("'" + path + "': truncated header");

    json header;
    try {
        header = json::parse(bytes.data() + hdr_off, bytes.data() + hdr_off + hlen);
    } catch (const json::exception& e) {
        throw DataError("'" + path + "': malformed header: " + std::string(e.what()));
    }
    if (!header.contains("spec") || !header.contains("tensors"))
        throw DataError("'" + path + "': header lacks spec or tensor table");

    const json& js = header.at("spec");
    ModelSpec spec;
    spec.layers = pick<int>(js, "layers");
    spec.heads = pick<int>(js, "heads");
    spec.d_model = pick<int>(js, "d_model");
    spec.d_ff = pick<int>(js, "d_ff");
    spec.vocab = pick<int>(js, "vocab");
    spec.n_max = pick<int>(js, "n_max");
    spec.use_layer_norm = pick<bool>(js, "use_layer_norm");
    spec.activation = activation_from_name(pick<std::string>(js, "activation"));
    spec.validate();

    struct Meta {
        int rows = 0, cols = 0;
        size_t offset = 0;
    };
    std::map<std::string, Meta> table;
    for (const json& t : header.at("tensors")) {
        const std::string name = pick<std::string>(t, "name");
        if (table.count(name)) throw DataError("'" + path + "': duplicate tensor '" + name + "'");
        table[name] = Meta{pick<int>(t, "rows"), pick<int>(t, "cols"), pick<size_t>(t, "offset")};
    }

    const size_t data_start = align_up(hdr_off + hlen);
    Model model = zero_model(spec);

    auto read_into = [&](const std::string& name, float* dst, int rows, int cols) {
        auto it = table.find(name);
        if (it == table.end()) throw DataError("'" + path + "': missing tensor '" + name + "'");
        const Meta& meta = it->second;
        if (meta.rows != rows || meta.cols != cols)
            throw DimensionError("'" + path + "': tensor '" + name + "' has shape " +
                                 std::to_string(meta.rows) + "x" + std::to_string(meta.cols) +
                                 ", spec requires " + std::to_string(rows) + "x" +
                                 std::to_string(cols));
        const size_t count = size_t(rows) * size_t(cols);
        const size_t begin = data_start + meta.offset;
        if (begin + count * sizeof(float) > bytes.size())
            throw DataError("'" + path + "': tensor '" + name + "' is truncated");
        std::memcpy(dst, bytes.data() + begin, count * sizeof(float));
        for (size_t i = 0; i < count; ++i)
            if (!std::isfinite(dst[i]))
                throw DataError("'" + path + "': tensor '" + name + "' holds a non-finite value");
        table.erase(it);
    };

    read_into("E", model.w.e.data.data(), spec.vocab, spec.d_model);
    read_into("P", model.w.p.data.data(), spec.n_max, spec.d_model);
    const int k = spec.head_dim();
    for (int l = 0; l < spec.layers; ++l) {
        LayerWeights& lw = model.w.layers[size_t(l)];
        const std::string pre = "layer" + std::to_string(l) + ".";
        for (int h = 0; h < spec.heads; ++h) {
            const std::string hp = pre + "h" + std::to_string(h) + ".";
            read_into(hp + "wq", lw.w_q[size_t(h)].data.data(), spec.d_model, k);
            read_into(hp + "wk", lw.w_k[size_t(h)].data.data(), spec.d_model, k);
            read_into(hp + "wv", lw.w_v[size_t(h)].data.data(), spec.d_model, k);
        }
        read_into(pre + "wo", lw.w_o.data.data(), spec.d_model, spec.d_model);
        read_into(pre + "ffn.w1", lw.w1.data.data(), spec.d_model, spec.d_ff);
        read_into(pre + "ffn.w2", lw.w2.data.data(), spec.d_ff, spec.d_model);
        if (spec.use_layer_norm) {
            read_into(pre + "ln1.g", lw.ln1_gain.data(), 1, spec.d_model);
            read_into(pre + "ln1.b", lw.ln1_bias.data(), 1, spec.d_model);
            read_into(pre + "ln2.g", lw.ln2_gain.data(), 1, spec.d_model);
            read_into(pre + "ln2.b", lw.ln2_bias.data(), 1, spec.d_model);
        }
    }
    if (!table.empty())
        throw DataError("'" + path + "': unexpected tensor '" + table.begin()->first + "'");

    LoadedModel out{std::move(model), std::nullopt};
    if (header.contains("planted")) out.planted = planted_from_json(header.at("planted"));
    out.model.validate();
    return out;
}

} // namespace headscope
