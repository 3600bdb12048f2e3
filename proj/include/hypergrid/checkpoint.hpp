#pragma once

// Single-file tensor archive. Layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "HGCKPT01"
//   offset 8   u64       manifest length M in bytes
//   offset 16  M bytes   UTF-8 JSON manifest
//   offset 16+M          payload: float64 little-endian values
//
// Manifest:
//   {"format": "hypergrid-checkpoint", "version": 1, "metadata": {...},
//    "tensors": [{"name": str, "shape": [int...], "offset": int, "count": int}, ...]}
//
// `offset` is a byte offset from the start of the payload. See docs/checkpoint_format.md.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hypergrid/hypergrid.hpp"
#include "hypergrid/tensor.hpp"

namespace hgrid {

class TransformerModel;

inline constexpr char kCheckpointMagic[] = "HGCKPT01";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointEntry {
	std::string name;
	Shape shape;
	std::vector<double> values;
};

struct Checkpoint {
	nlohmann::json metadata = nlohmann::json::object();
	std::vector<CheckpointEntry> tensors;
};

void write_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors,
                      const nlohmann::json& metadata = nlohmann::json::object());

/// Throws FormatError on a bad magic, manifest or payload range.
Checkpoint read_checkpoint(const std::filesystem::path& path);

void save_model(const TransformerModel& model, const std::filesystem::path& path,
                const nlohmann::json& metadata = nlohmann::json::object());

/// Copies values into the model's parameters. Throws FormatError naming the
/// tensor on a missing, surplus or mis-shaped entry; the model is untouched on error.
void load_model(TransformerModel& model, const Checkpoint& checkpoint);

}  // namespace hgrid
