#include "hypergrid/harness.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "hypergrid/checkpoint.hpp"
#include "hypergrid/errors.hpp"

namespace hgrid {

namespace {

std::string first_non_finite_block(const TransformerModel& model) {
	for (const auto& p : model.parameters()) {
		for (double v : p.tensor.values())
			if (!std::isfinite(v)) return p.name + " (values)";
		for (double g : p.tensor.grad())
			if (!std::isfinite(g)) return p.name + " (gradient)";
	}
	return "none found (activations overflowed)";
}

}  // namespace

Adam::Adam(std::vector<NamedTensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
	for (const auto& p : params_) {
		m_.emplace_back(p.tensor.numel(), 0.0);
		v_.emplace_back(p.tensor.numel(), 0.0);
	}
}

void Adam::step() {
	++t_;
	const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
	const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
	for (std::size_t k = 0; k < params_.size(); ++k) {
		auto& p = params_[k].tensor;
		const auto g = p.grad();
		if (g.empty()) continue;
		auto w = p.mutable_values();
		auto& m = m_[k];
		auto& v = v_[k];
		for (std::size_t i = 0; i < w.size(); ++i) {
			m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
			v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
			w[i] -= config_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
		}
	}
}

nlohmann::json RunMetrics::to_json() const {
	nlohmann::json scores = nlohmann::json::object();
	for (const auto& [name, score] : task_scores) scores[name] = score;
	return {{"step", step},           {"scores", scores},         {"macro_avg", macro_avg},
	        {"train_loss", train_loss}, {"params_total", params_total}, {"params_added", params_added}};
}

double macro_average(std::span<const double> scores) {
	if (scores.empty()) return 0.0;
	double total = 0.0;
	for (double s : scores) total += s;
	return total / static_cast<double>(scores.size());
}

std::size_t select_best(std::span<const double> macro_avgs) {
	if (macro_avgs.empty()) throw ConfigError("select_best: no evaluations recorded");
	std::size_t best = 0;
	for (std::size_t i = 1; i < macro_avgs.size(); ++i)
		if (macro_avgs[i] > macro_avgs[best]) best = i;
	return best;
}

Tensor batch_loss(const TransformerModel& model, std::span<const Example> batch) {
	const Vocabulary vocab{model.config().vocab_size};
	Tensor total;
	for (const auto& ex : batch) {
		const Tensor l = sequence_loss(model, ex.input, ex.target, vocab.bos(), vocab.eos());
		total = total.defined() ? add(total, l) : l;
	}
	return scale(total, 1.0 / static_cast<double>(batch.size()));
}

double evaluate(const DecodeFn& decode, const TaskSpec& task) {
	if (task.dev.empty()) throw ConfigError("evaluate: task " + task.name + " has an empty dev set");
	std::size_t correct = 0;
	for (const auto& ex : task.dev) {
		if (decode(ex.input) == ex.target) ++correct;
	}
	return static_cast<double>(correct) / static_cast<double>(task.dev.size());
}

double evaluate(const TransformerModel& model, const TaskSpec& task) {
	const Vocabulary vocab{model.config().vocab_size};
	std::size_t longest = 0;
	for (const auto& ex : task.dev) longest = std::max(longest, ex.target.size());
	const std::size_t max_steps = longest + 2;
	return evaluate(
	    [&](std::span<const Token> input) { return greedy_decode(model, input, vocab.bos(), vocab.eos(), max_steps); },
	    task);
}

RunMetrics evaluate_all(const TransformerModel& model, const TaskMixture& mixture, std::size_t step) {
	RunMetrics m;
	m.step = step;
	std::vector<double> scores;
	for (const auto& task : mixture.tasks()) {
		const double acc = evaluate(model, task);
		m.task_scores.emplace_back(task.name, acc);
		scores.push_back(acc);
	}
	m.macro_avg = macro_average(scores);
	m.params_total = model.parameter_count();
	m.params_added = model.added_parameter_count();
	return m;
}

TrainResult train(TransformerModel& model, const TaskMixture& mixture, const TrainOptions& options) {
	if (options.steps == 0) throw ConfigError("train: steps must be >= 1");
	if (options.batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
	if (options.eval_every == 0) throw ConfigError("train: eval_every must be >= 1");

	const auto start = std::chrono::steady_clock::now();
	std::mt19937_64 rng(options.seed);
	Adam optimizer(model.parameters(), options.optim);
	TrainResult result;

	std::ofstream metrics_file;
	if (options.out_dir) {
		std::filesystem::create_directories(*options.out_dir);
		metrics_file.open(*options.out_dir / "metrics.jsonl", std::ios::trunc);
		if (!metrics_file) throw FormatError("cannot write " + (*options.out_dir / "metrics.jsonl").string());
	}

	std::vector<Example> fixed_batch;
	if (options.overfit_single_batch) fixed_batch = sample_batch(mixture, options.batch_size, rng);

	double loss_acc = 0.0;
	std::size_t loss_count = 0;
	std::vector<double> macro_history;
	for (std::size_t step = 1; step <= options.steps; ++step) {
		const std::vector<Example> batch =
		    options.overfit_single_batch ? fixed_batch : sample_batch(mixture, options.batch_size, rng);
		model.zero_grad();
		double batch_total = 0.0;
		const double inv = 1.0 / static_cast<double>(batch.size());
		for (const auto& ex : batch) {
			const Vocabulary vocab{model.config().vocab_size};
			const Tensor loss = sequence_loss(model, ex.input, ex.target, vocab.bos(), vocab.eos());
			if (!std::isfinite(loss.item())) {
				throw NumericError("non-finite loss at step " + std::to_string(step) +
				                   "; offending parameter block: " + first_non_finite_block(model));
			}
			batch_total += loss.item();
			backward(scale(loss, inv));
		}
		const double batch_mean = batch_total * inv;
		optimizer.step();
		result.losses.push_back(batch_mean);
		loss_acc += batch_mean;
		++loss_count;
		if (options.on_step) options.on_step(step, batch_mean);

		if (step % options.eval_every == 0 || step == options.steps) {
			RunMetrics m = evaluate_all(model, mixture, step);
			m.train_loss = loss_acc / static_cast<double>(loss_count);
			m.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
			loss_acc = 0.0;
			loss_count = 0;
			macro_history.push_back(m.macro_avg);
			result.history.push_back(m);
			const std::size_t best = select_best(macro_history);
			const bool improved = best == macro_history.size() - 1;
			result.best_index = best;
			if (metrics_file) {
				metrics_file << m.to_json().dump() << '\n';
				metrics_file.flush();
			}
			if (improved && options.out_dir && options.save_checkpoint) {
				const auto path = *options.out_dir / "best.ckpt";
				save_model(model, path,
				           {{"step", m.step}, {"macro_avg", m.macro_avg}, {"gate", model.config().gate.label()}});
				result.best_checkpoint = path;
			}
			if (options.on_eval) options.on_eval(m);
		}
	}
	return result;
}

std::string format_report(const TrainResult& result, const std::string& label) {
	std::ostringstream os;
	os << std::fixed << std::setprecision(4);
	os << "run: " << label << '\n';
	if (result.history.empty()) {
		os << "no evaluations recorded\n";
		return os.str();
	}
	const auto& best = result.best();
	os << "best step: " << best.step << "  macro_avg: " << best.macro_avg << '\n';
	os << "params total: " << best.params_total << "  added by gate: " << best.params_added << '\n';
	os << "\nper-task dev accuracy at best checkpoint\n";
	for (const auto& [name, score] : best.task_scores) os << "  " << std::left << std::setw(10) << name << score << '\n';
	os << "\nhistory\n  step      macro_avg  train_loss\n";
	for (const auto& m : result.history) {
		os << "  " << std::left << std::setw(10) << m.step << std::setw(11) << m.macro_avg << m.train_loss << '\n';
	}
	return os.str();
}

}  // namespace hgrid
