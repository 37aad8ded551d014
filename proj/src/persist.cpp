// SPDX-License-Identifier: Apache-2.0
#include "loraforge/persist.hpp"

#include "loraforge/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace loraforge {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string to_string(CheckpointKind k) {
    switch (k) {
        case CheckpointKind::model: return "model";
        case CheckpointKind::adapter_set: return "adapter_set";
        case CheckpointKind::hub: return "hub";
        case CheckpointKind::concat: return "concat";
        case CheckpointKind::map: return "map";
    }
    return "?";
}

CheckpointKind checkpoint_kind_from_string(const std::string& s) {
    for (auto k : {CheckpointKind::model, CheckpointKind::adapter_set, CheckpointKind::hub, CheckpointKind::concat,
                   CheckpointKind::map})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown checkpoint kind '" + s + "'");
}

ojson to_json(const ModelConfig& c) {
    ojson j;
    j["vocab_size"] = c.vocab_size;
    j["d_model"] = c.d_model;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["d_ff"] = c.d_ff;
    j["max_seq"] = c.max_seq;
    j["site_policy"] = to_string(c.site_policy);
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.d_model = j.value("d_model", c.d_model);
        c.n_layers = j.value("n_layers", c.n_layers);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.d_ff = j.value("d_ff", c.d_ff);
        c.max_seq = j.value("max_seq", c.max_seq);
        c.site_policy = site_policy_from_string(j.value("site_policy", std::string("qv")));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string Manifest::dump() const {
    ojson j;
    j["format_version"] = format_version;
    j["kind"] = to_string(kind);
    j["config"] = config;
    ojson ts = ojson::array();
    for (const auto& t : tensors) {
        ojson e;
        e["name"] = t.name;
        e["shape"] = {t.rows, t.cols};
        e["dtype"] = t.dtype;
        e["byte_offset"] = t.byte_offset;
        e["byte_len"] = t.byte_len;
        e["trainable"] = t.trainable;
        ts.push_back(std::move(e));
    }
    j["tensors"] = std::move(ts);
    ojson prov = ojson::object();
    for (const auto& [stage, seed] : seed_provenance) prov[stage] = seed;
    j["seed_provenance"] = std::move(prov);
    return j.dump(2) + "\n";
}

namespace {

void write_atomic(const fs::path& target, const std::string& bytes) {
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + target.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void append_f32(std::string& out, float v) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>(bits & 0xffu));
        bits >>= 8;
    }
}

float read_f32(const char* p) {
    std::uint32_t bits = 0;
    for (int i = 3; i >= 0; --i) bits = (bits << 8) | static_cast<unsigned char>(p[i]);
    return std::bit_cast<float>(bits);
}

fs::path write_checkpoint(const fs::path& dir, CheckpointKind kind, ojson config, const ConstParamRefs<float>& params,
                          const SaveOptions& opts) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    Manifest man;
    man.kind = kind;
    man.config = std::move(config);
    man.seed_provenance = opts.seed_provenance;
    std::string blob;
    std::set<std::string> names;
    for (const auto* p : params) {
        if (!names.insert(p->name).second) throw ContractError("save: duplicate tensor name " + p->name);
        TensorEntry e;
        e.name = p->name;
        e.rows = p->value.rows();
        e.cols = p->value.cols();
        e.byte_offset = static_cast<std::int64_t>(blob.size());
        e.byte_len = e.rows * e.cols * 4;
        e.trainable = p->trainable;
        // Matrix is row-major, so data() is already in storage order.
        for (Eigen::Index i = 0; i < p->value.size(); ++i) append_f32(blob, p->value.data()[i]);
        man.tensors.push_back(std::move(e));
    }
    write_atomic(dir / kWeightsFile, blob);
    const fs::path manifest_path = dir / kManifestFile;
    write_atomic(manifest_path, man.dump());
    return manifest_path;
}

ojson site_list(const std::vector<std::string>& ids, const std::vector<std::pair<Eigen::Index, Eigen::Index>>& dims) {
    ojson out = ojson::array();
    for (std::size_t i = 0; i < ids.size(); ++i)
        out.push_back(ojson{{"id", ids[i]}, {"in_dim", dims[i].first}, {"out_dim", dims[i].second}});
    return out;
}

template <typename Sites, typename InOf, typename OutOf>
ojson site_list_of(const Sites& sites, InOf in_of, OutOf out_of) {
    std::vector<std::string> ids;
    std::vector<std::pair<Eigen::Index, Eigen::Index>> dims;
    for (const auto& s : sites) {
        ids.push_back(s.site);
        dims.emplace_back(in_of(s), out_of(s));
    }
    return site_list(ids, dims);
}

ojson adapter_config(const ComposedAdapter<float>& adapter, const SaveOptions& opts) {
    ojson c;
    std::visit(
        [&](const auto& a) {
            using T = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<T, AdapterSet<float>>) {
                c["method"] = "lora";
                c["tasks"] = {a.task_name};
                c["n"] = 1;
                c["rank"] = a.rank;
                c["alpha"] = a.alpha;
                c["sites"] = site_list_of(
                    a.pairs, [](const auto& p) { return p.A.value.rows(); },
                    [](const auto& p) { return p.B.value.cols(); });
            } else if constexpr (std::is_same_v<T, HubAdapter<float>>) {
                std::vector<std::string> tasks;
                for (const auto& s : a.constituents) tasks.push_back(s.task_name);
                c["method"] = "hub";
                c["tasks"] = tasks;
                c["n"] = a.n();
                c["rank"] = a.rank;
                c["alpha"] = a.alpha;
                c["hub_mode"] = to_string(a.mode);
                c["sites"] = a.constituents.empty()
                                 ? ojson::array()
                                 : site_list_of(
                                       a.constituents.front().pairs, [](const auto& p) { return p.A.value.rows(); },
                                       [](const auto& p) { return p.B.value.cols(); });
            } else {
                c["method"] = std::is_same_v<T, ConcatAdapter<float>> ? "concat" : "map";
                c["tasks"] = a.tasks;
                c["n"] = a.tasks.size();
                c["rank"] = a.rank;
                c["alpha"] = a.alpha;
                if constexpr (std::is_same_v<T, MapAdapter<float>>) {
                    c["m"] = a.m;
                    c["init_mode"] = to_string(a.init);
                }
                c["sites"] = site_list_of(
                    a.sites, [](const auto& s) { return s.A_cat.value.rows(); },
                    [](const auto& s) { return s.B_cat.value.cols(); });
            }
        },
        adapter);
    if (opts.model_config) {
        c["site_policy"] = to_string(opts.model_config->site_policy);
        c["model"] = to_json(*opts.model_config);
    }
    return c;
}

CheckpointKind kind_of(const ComposedAdapter<float>& adapter) {
    switch (adapter.index()) {
        case 0: return CheckpointKind::adapter_set;
        case 1: return CheckpointKind::hub;
        case 2: return CheckpointKind::concat;
        default: return CheckpointKind::map;
    }
}

// Copies stored tensors into `params` (which must list the same names in
// the same order) and restores the trainable flags.
void fill(const Manifest& man, const std::string& blob, const ParamRefs<float>& params, const fs::path& dir) {
    if (man.tensors.size() != params.size())
        throw ShapeError(dir.string() + ": manifest lists " + std::to_string(man.tensors.size()) +
                         " tensors, config implies " + std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = man.tensors[i];
        auto* p = params[i];
        if (e.name != p->name)
            throw ShapeError(dir.string() + ": tensor " + std::to_string(i) + " is '" + e.name + "', expected '" +
                             p->name + "'");
        if (e.rows != p->value.rows() || e.cols != p->value.cols())
            throw ShapeError(dir.string() + ": tensor '" + e.name + "' has shape [" + std::to_string(e.rows) + ", " +
                             std::to_string(e.cols) + "], expected [" + std::to_string(p->value.rows()) + ", " +
                             std::to_string(p->value.cols()) + "]");
        const char* src = blob.data() + e.byte_offset;
        for (Eigen::Index k = 0; k < p->value.size(); ++k) p->value.data()[k] = read_f32(src + 4 * k);
        p->trainable = e.trainable;
        p->zero_grad();
    }
}

std::vector<InjectionSite> sites_from(const nlohmann::json& c) {
    std::vector<InjectionSite> sites;
    for (const auto& s : c.at("sites"))
        sites.push_back(parse_site(s.at("id").get<std::string>(), s.at("in_dim").get<int>(), s.at("out_dim").get<int>()));
    return sites;
}

}  // namespace

fs::path save(const Model<float>& model, const fs::path& dir, const SaveOptions& opts) {
    return write_checkpoint(dir, CheckpointKind::model, to_json(model.config), model.parameters(), opts);
}

fs::path save(const ComposedAdapter<float>& adapter, const fs::path& dir, const SaveOptions& opts) {
    return write_checkpoint(dir, kind_of(adapter), adapter_config(adapter, opts), parameters(adapter), opts);
}

Manifest read_manifest(const fs::path& dir) {
    const fs::path mpath = dir / kManifestFile;
    const fs::path wpath = dir / kWeightsFile;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(mpath));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(mpath.string() + ": malformed manifest: " + e.what());
    }
    Manifest man;
    try {
        man.format_version = j.at("format_version").get<int>();
        if (man.format_version != kFormatVersion)
            throw VersionError(mpath.string() + ": format_version " + std::to_string(man.format_version) +
                               ", this build reads " + std::to_string(kFormatVersion));
        man.kind = checkpoint_kind_from_string(j.at("kind").get<std::string>());
        man.config = j.at("config");
        for (const auto& t : j.at("tensors")) {
            TensorEntry e;
            e.name = t.at("name").get<std::string>();
            const auto shape = t.at("shape").get<std::vector<std::int64_t>>();
            if (shape.size() != 2) throw ShapeError(mpath.string() + ": tensor '" + e.name + "' is not rank 2");
            e.rows = shape[0];
            e.cols = shape[1];
            e.dtype = t.at("dtype").get<std::string>();
            e.byte_offset = t.at("byte_offset").get<std::int64_t>();
            e.byte_len = t.at("byte_len").get<std::int64_t>();
            e.trainable = t.value("trainable", false);
            man.tensors.push_back(std::move(e));
        }
        if (j.contains("seed_provenance"))
            for (const auto& [stage, seed] : j.at("seed_provenance").items())
                man.seed_provenance.emplace_back(stage, seed.get<std::uint64_t>());
    } catch (const nlohmann::json::exception& e) {
        throw IoError(mpath.string() + ": malformed manifest: " + e.what());
    }

    std::set<std::string> names;
    for (const auto& e : man.tensors) {
        if (!names.insert(e.name).second) throw ShapeError(mpath.string() + ": duplicate tensor '" + e.name + "'");
        if (e.dtype != "f32") throw ShapeError(mpath.string() + ": tensor '" + e.name + "' has dtype " + e.dtype);
        if (e.rows < 0 || e.cols < 0 || e.byte_len != e.rows * e.cols * 4)
            throw ShapeError(mpath.string() + ": tensor '" + e.name + "' byte_len " + std::to_string(e.byte_len) +
                             " does not match shape [" + std::to_string(e.rows) + ", " + std::to_string(e.cols) +
                             "]");
    }
    std::error_code ec;
    const auto file_size = static_cast<std::int64_t>(fs::file_size(wpath, ec));
    if (ec) throw IoError("cannot stat " + wpath.string() + ": " + ec.message());
    std::int64_t cursor = 0;
    for (const auto& e : man.tensors) {
        if (e.byte_offset != cursor)
            throw TilingError(wpath.string() + ": tensor '" + e.name + "' starts at byte " +
                              std::to_string(e.byte_offset) + ", expected " + std::to_string(cursor) +
                              (e.byte_offset < cursor ? " (overlap)" : " (gap)"));
        if (e.byte_offset + e.byte_len > file_size)
            throw TilingError(wpath.string() + ": tensor '" + e.name + "' ends at byte " +
                              std::to_string(e.byte_offset + e.byte_len) + " past the end of the data (" +
                              std::to_string(file_size) + " bytes)");
        cursor += e.byte_len;
    }
    if (cursor != file_size)
        throw TilingError(wpath.string() + ": " + std::to_string(file_size - cursor) +
                          " trailing bytes after the last tensor");
    return man;
}

Model<float> load_model(const fs::path& dir) {
    const Manifest man = read_manifest(dir);
    if (man.kind != CheckpointKind::model)
        throw ConfigError(dir.string() + ": checkpoint kind is " + to_string(man.kind) + ", expected model");
    Model<float> model = build_model<float>(model_config_from_json(man.config), 0);
    fill(man, read_file(dir / kWeightsFile), model.parameters(), dir);
    return model;
}

ComposedAdapter<float> load_adapter(const fs::path& dir) {
    const Manifest man = read_manifest(dir);
    if (man.kind == CheckpointKind::model)
        throw ConfigError(dir.string() + ": checkpoint holds a model, expected an adapter");
    ComposedAdapter<float> adapter;
    try {
        const auto& c = man.config;
        const auto sites = sites_from(c);
        const int rank = c.at("rank").get<int>();
        const double alpha = c.at("alpha").get<double>();
        std::vector<AdapterSet<float>> sets;
        for (const auto& t : c.at("tasks")) sets.push_back(init_lora<float>(sites, rank, alpha, 0, t.get<std::string>()));
        if (sets.empty()) throw ConfigError(dir.string() + ": adapter lists no tasks");
        switch (man.kind) {
            case CheckpointKind::adapter_set: adapter = std::move(sets.front()); break;
            case CheckpointKind::hub:
                adapter = compose_hub(sets, 0.0, hub_mode_from_string(c.at("hub_mode").get<std::string>()));
                break;
            case CheckpointKind::concat: adapter = compose_concat(sets); break;
            case CheckpointKind::map:
                adapter = compose_map(sets, c.at("m").get<int>(), map_init_from_string(c.at("init_mode").get<std::string>()));
                break;
            case CheckpointKind::model: break;
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError((dir / kManifestFile).string() + ": malformed adapter config: " + e.what());
    }
    fill(man, read_file(dir / kWeightsFile), parameters(adapter), dir);
    return adapter;
}

AdapterSet<float> load_adapter_set(const fs::path& dir) {
    auto adapter = load_adapter(dir);
    if (!std::holds_alternative<AdapterSet<float>>(adapter))
        throw ConfigError(dir.string() + ": checkpoint is not a single adapter set");
    return std::get<AdapterSet<float>>(std::move(adapter));
}

fs::path stage_dir(const fs::path& root, const std::string& run_id, const std::string& stage) {
    return root / "runs" / run_id / stage;
}

}  // namespace loraforge
