#pragma once

// Multi-task co-training over a proportionate task mixture, with periodic
// exact-match evaluation on every task's dev set and best-checkpoint selection
// by the dev macro-average.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hypergrid/tasks.hpp"
#include "hypergrid/transformer.hpp"

namespace hgrid {

struct AdamConfig {
	double lr = 1e-3;
	double beta1 = 0.9;
	double beta2 = 0.999;
	double eps = 1e-8;
};

class Adam {
public:
	Adam(std::vector<NamedTensor> params, AdamConfig config);
	/// Applies one update from the parameters' accumulated gradients.
	void step();
	std::size_t steps_taken() const { return t_; }

private:
	std::vector<NamedTensor> params_;
	AdamConfig config_;
	std::vector<std::vector<double>> m_, v_;
	std::size_t t_ = 0;
};

struct RunMetrics {
	std::size_t step = 0;
	std::vector<std::pair<std::string, double>> task_scores;
	double macro_avg = 0.0;
	double train_loss = 0.0;  // mean batch loss since the previous eval
	double wall_clock_s = 0.0;
	std::size_t params_total = 0;
	std::size_t params_added = 0;

	/// Metrics-file record. Wall-clock is left out so identical runs produce identical files.
	nlohmann::json to_json() const;
};

/// Unweighted mean.
double macro_average(std::span<const double> scores);

/// Index of the first maximum. Throws on empty input.
std::size_t select_best(std::span<const double> macro_avgs);

struct TrainOptions {
	AdamConfig optim;
	std::size_t steps = 5000;
	std::size_t batch_size = 8;
	std::size_t eval_every = 500;  // the final step is always evaluated
	std::uint64_t seed = 0;
	/// Where metrics.jsonl and best.ckpt go; nothing is written when empty.
	std::optional<std::filesystem::path> out_dir;
	bool save_checkpoint = true;
	/// Repeat one sampled batch every step (memorization smoke test).
	bool overfit_single_batch = false;
	/// Called after every optimizer step with (step, batch loss).
	std::function<void(std::size_t, double)> on_step;
	/// Called after every evaluation.
	std::function<void(const RunMetrics&)> on_eval;
};

struct TrainResult {
	std::vector<RunMetrics> history;
	std::size_t best_index = 0;
	std::vector<double> losses;
	std::optional<std::filesystem::path> best_checkpoint;

	const RunMetrics& best() const { return history.at(best_index); }
};

/// Teacher-forced cross-entropy training. Throws ConfigError when steps == 0
/// and NumericError (naming the step and parameter block) on a non-finite loss.
TrainResult train(TransformerModel& model, const TaskMixture& mixture, const TrainOptions& options);

/// Mean teacher-forced loss over a batch; records a tape unless grad mode is off.
Tensor batch_loss(const TransformerModel& model, std::span<const Example> batch);

using DecodeFn = std::function<std::vector<Token>(std::span<const Token> input)>;

/// Fraction of dev examples whose decoded sequence equals the target exactly.
double evaluate(const DecodeFn& decode, const TaskSpec& task);
/// Greedy decoding with the model.
double evaluate(const TransformerModel& model, const TaskSpec& task);

RunMetrics evaluate_all(const TransformerModel& model, const TaskMixture& mixture, std::size_t step);

/// Human-readable per-task breakdown of a run.
std::string format_report(const TrainResult& result, const std::string& label);

}  // namespace hgrid
