#pragma once

// Grid-size lattice study: train one model per (variant, d_r, d_c, seed) cell,
// keep each cell's best dev macro-average, and aggregate max/mean/min along
// each axis over the other axis.
//
// State directory layout:
//   plan.json                  fingerprint of the plan; a mismatch is an error
//   cells/<cell id>/metrics.jsonl
//   cells/<cell id>/done.json  written last (tmp + rename); its presence marks the cell complete

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hypergrid/harness.hpp"
#include "hypergrid/tasks.hpp"
#include "hypergrid/transformer.hpp"

namespace hgrid {

struct SweepPlan {
	std::vector<Variant> variants{Variant::L2, Variant::LG, Variant::GL};
	std::vector<std::size_t> d_r{1, 2, 4, 8};
	std::vector<std::size_t> d_c{2, 4, 8, 16};
	std::size_t seeds = 1;
	ModelConfig base;  // gate fields other than variant/d_r/d_c are kept
	TaskOptions tasks;
	AdamConfig optim;
	std::size_t steps = 200;
	std::size_t batch_size = 8;
	std::size_t eval_every = 0;  // 0 = evaluate only at the last step
	std::uint64_t base_seed = 0;

	nlohmann::json to_json() const;
};

struct SweepCell {
	std::size_t index = 0;  // position in the full lattice
	Variant variant = Variant::LG;
	std::size_t d_r = 1;
	std::size_t d_c = 1;
	std::size_t seed_index = 0;
	std::uint64_t seed = 0;  // base_seed + index

	/// e.g. "LG_r4_c8_s0"
	std::string id() const;
};

/// Lattice order: variant, then d_r, then d_c, then seed.
std::vector<SweepCell> enumerate_cells(const SweepPlan& plan);

struct CellResult {
	SweepCell cell;
	double best_macro_avg = 0.0;
	std::size_t best_step = 0;
	std::size_t params_added = 0;
};

struct AxisAggregate {
	std::size_t value = 0;
	double max = 0.0;
	double mean = 0.0;
	double min = 0.0;

	bool operator==(const AxisAggregate&) const = default;
};

struct VariantAggregates {
	std::vector<AxisAggregate> by_d_r;  // over d_c (and seeds) at each d_r
	std::vector<AxisAggregate> by_d_c;  // over d_r (and seeds) at each d_c
};

struct SkippedCell {
	SweepCell cell;
	std::string reason;
};

struct SweepResult {
	std::vector<Variant> variants;
	std::vector<CellResult> cells;  // completed cells in lattice order
	std::vector<SkippedCell> skipped;
	std::map<Variant, VariantAggregates> aggregates;
	bool complete = false;
};

/// Mean over seeds per (variant, d_r, d_c), then max/mean/min along each axis.
/// Means sum in ascending order of the other axis value.
std::map<Variant, VariantAggregates> aggregate_cells(const std::vector<CellResult>& cells,
                                                      const std::vector<Variant>& variants);

struct SweepOptions {
	/// Worker threads; 0 reads HYPERGRID_THREADS (default 1).
	std::size_t threads = 0;
	/// Stop scheduling new cells once this many have been trained in this call.
	std::size_t stop_after = static_cast<std::size_t>(-1);
	std::function<void(const CellResult&)> on_cell;
};

/// Bounded worker count from HYPERGRID_THREADS, at least 1.
std::size_t env_thread_count();

/// Runs (or resumes) the plan inside state_dir. Invalid cells are skipped and reported.
SweepResult run_sweep(const SweepPlan& plan, const std::filesystem::path& state_dir, SweepOptions options = {});

/// Writes <variant>_d_r.csv and <variant>_d_c.csv with columns value,max,mean,min.
std::vector<std::filesystem::path> emit_plotdata(const SweepResult& result, const std::filesystem::path& dir);
std::vector<AxisAggregate> parse_plotdata(const std::filesystem::path& file);

std::string format_sweep_report(const SweepResult& result);

}  // namespace hgrid
