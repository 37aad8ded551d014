// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "loraforge/adapters.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace loraforge {

// A checkpoint directory holds manifest.json and weights.bin. The weights
// are raw little-endian f32, row-major, concatenated in manifest order.
inline constexpr int kFormatVersion = 1;
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kWeightsFile = "weights.bin";

enum class CheckpointKind { model, adapter_set, hub, concat, map };

std::string to_string(CheckpointKind k);
CheckpointKind checkpoint_kind_from_string(const std::string& s);

struct TensorEntry {
    std::string name;
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::string dtype = "f32";
    std::int64_t byte_offset = 0;
    std::int64_t byte_len = 0;
    bool trainable = false;
};

// Pipeline stage -> seed, in insertion order.
using SeedProvenance = std::vector<std::pair<std::string, std::uint64_t>>;

struct Manifest {
    int format_version = kFormatVersion;
    CheckpointKind kind = CheckpointKind::model;
    nlohmann::ordered_json config;
    std::vector<TensorEntry> tensors;
    SeedProvenance seed_provenance;

    std::string dump() const;
};

struct SaveOptions {
    // Embedded under config.model for adapter checkpoints.
    std::optional<ModelConfig> model_config;
    SeedProvenance seed_provenance;
};

nlohmann::ordered_json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Both return the manifest path. Files are written to temporaries and
// renamed into place, weights first. Throws IoError with the path.
std::filesystem::path save(const Model<float>& model, const std::filesystem::path& dir, const SaveOptions& opts = {});
std::filesystem::path save(const ComposedAdapter<float>& adapter, const std::filesystem::path& dir,
                           const SaveOptions& opts = {});

// Parses and validates manifest.json against weights.bin: VersionError for
// an unknown format_version, ShapeError for byte lengths that disagree with
// the shape or dtype, TilingError for gaps, overlaps or a data file of the
// wrong length (naming the first offending tensor). IoError for unreadable
// or malformed files.
Manifest read_manifest(const std::filesystem::path& dir);

// Also ShapeError when a stored tensor does not match the object rebuilt
// from the manifest config, and ConfigError when the kind is wrong.
Model<float> load_model(const std::filesystem::path& dir);
ComposedAdapter<float> load_adapter(const std::filesystem::path& dir);
// Convenience for the single-task case.
AdapterSet<float> load_adapter_set(const std::filesystem::path& dir);

// runs/{run_id}/{stage}
std::filesystem::path stage_dir(const std::filesystem::path& root, const std::string& run_id, const std::string& stage);

}  // namespace loraforge
