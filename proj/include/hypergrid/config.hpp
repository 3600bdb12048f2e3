#pragma once

// One config schema shared by every subcommand. Keys are dotted paths; a
// config file is a JSON object whose nesting spells the same paths
// ({"gate": {"variant": "LG"}} sets gate.variant). Unknown keys are errors.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hypergrid/harness.hpp"
#include "hypergrid/tasks.hpp"
#include "hypergrid/transformer.hpp"

namespace hgrid {

struct ConfigKey {
	std::string key;
	nlohmann::json default_value;
	std::string help;
};

/// Every recognized key with its default, in documentation order.
std::span<const ConfigKey> config_schema();

struct TrainSettings {
	std::size_t steps = 5000;
	std::size_t batch_size = 8;
	std::size_t eval_every = 500;
	AdamConfig optim;
};

struct GradcheckSettings {
	std::size_t budget = 32;
	std::size_t batch = 2;
};

struct SweepSettings {
	std::vector<Variant> variants{Variant::L2, Variant::LG, Variant::GL};
	std::vector<std::size_t> d_r{1, 2, 4, 8};
	std::vector<std::size_t> d_c{2, 4, 8, 16};
	std::size_t seeds = 1;
	std::size_t steps = 200;
};

struct RunConfig {
	std::uint64_t seed = 0;
	std::string out_dir = "runs";
	ModelConfig model;
	TaskOptions tasks;
	TrainSettings train;
	GradcheckSettings gradcheck;
	SweepSettings sweep;

	/// Flat key -> value map covering every schema key.
	nlohmann::json to_flat() const;
	/// Nested form, suitable for writing next to run artifacts and reading back.
	nlohmann::json to_json() const;
};

/// Defaults with file values and then overrides applied, validated.
/// Throws ConfigError naming the key for unknown keys, bad types or invalid values,
/// and naming the path when the file is missing or unparsable.
RunConfig load_config(const std::filesystem::path* file, std::span<const std::string> overrides);

/// Applies a nested or flat JSON object on top of `config`.
RunConfig apply_json(const RunConfig& config, const nlohmann::json& object);
/// Applies "key=value" strings. Values parse according to the key's type.
RunConfig apply_overrides(const RunConfig& config, std::span<const std::string> overrides);

/// Builds and validates a config from a complete flat map.
RunConfig from_flat(const nlohmann::json& flat);

/// "gate.variant" spelling of a gate config: none, L, L2, LG, GL, outgate.
std::string gate_variant_key(const GateConfig& gate);

/// Schema listing for --help.
std::string describe_schema();

}  // namespace hgrid
