#include "hypergrid/tasks.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <set>

#include "hypergrid/errors.hpp"

namespace hgrid {

namespace {

constexpr std::array kKinds{TaskKind::Copy, TaskKind::Reverse, TaskKind::SortAscending, TaskKind::Parity,
                            TaskKind::ModularSum};

std::uint64_t stream_seed(std::uint64_t seed, std::size_t task, std::size_t split) {
	std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
	                  static_cast<std::uint32_t>(task), static_cast<std::uint32_t>(split)};
	std::array<std::uint32_t, 2> out{};
	seq.generate(out.begin(), out.end());
	return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace

std::string_view task_kind_name(TaskKind kind) {
	switch (kind) {
		case TaskKind::Copy: return "copy";
		case TaskKind::Reverse: return "reverse";
		case TaskKind::SortAscending: return "sort";
		case TaskKind::Parity: return "parity";
		case TaskKind::ModularSum: return "modsum";
	}
	return "?";
}

void TaskOptions::validate() const {
	if (train_sizes.size() != kKinds.size()) {
		throw ConfigError("tasks.sizes needs " + std::to_string(kKinds.size()) + " entries (copy, reverse, sort, "
		                  "parity, modsum)");
	}
	for (auto s : train_sizes)
		if (s == 0) throw ConfigError("tasks.sizes entries must be positive");
	if (dev_size == 0) throw ConfigError("tasks.dev_size must be positive");
	if (min_len == 0 || min_len > max_len) throw ConfigError("tasks.min_len must be in [1, tasks.max_len]");
	if (alphabet < 2) throw ConfigError("tasks.alphabet must be >= 2");
	if (modulus < 2) throw ConfigError("tasks.modulus must be >= 2");
	const Vocabulary vocab{vocab_size};
	if (vocab_size < 4 + kKinds.size() + 2) throw ConfigError("model.vocab_size too small for the task vocabulary");
	const std::size_t free_ids = vocab.first_reserved(kKinds.size());
	if (alphabet > free_ids || modulus > free_ids) {
		throw ConfigError("tasks.alphabet/tasks.modulus exceed the " + std::to_string(free_ids) +
		                  " content ids available in model.vocab_size=" + std::to_string(vocab_size));
	}
}

std::vector<Token> TaskSpec::solve(std::span<const Token> content, const Vocabulary& vocab,
                                   std::size_t modulus) const {
	std::vector<Token> out(content.begin(), content.end());
	switch (kind) {
		case TaskKind::Copy: break;
		case TaskKind::Reverse: std::reverse(out.begin(), out.end()); break;
		case TaskKind::SortAscending: std::sort(out.begin(), out.end()); break;
		case TaskKind::Parity: {
			const std::size_t total = std::accumulate(content.begin(), content.end(), std::size_t{0});
			out = {total % 2 == 0 ? vocab.even() : vocab.odd()};
			break;
		}
		case TaskKind::ModularSum: {
			const std::size_t total = std::accumulate(content.begin(), content.end(), std::size_t{0});
			out = {total % modulus};
			break;
		}
	}
	return out;
}

Example TaskSpec::generate(std::mt19937_64& rng, const TaskOptions& options) const {
	std::uniform_int_distribution<std::size_t> len_dist(options.min_len, options.max_len);
	std::uniform_int_distribution<Token> sym(0, options.alphabet - 1);
	const std::size_t len = len_dist(rng);
	Example ex;
	ex.task = index;
	ex.input.reserve(len + 1);
	ex.input.push_back(prefix);
	for (std::size_t i = 0; i < len; ++i) ex.input.push_back(sym(rng));
	ex.target = solve(std::span(ex.input).subspan(1), Vocabulary{options.vocab_size}, options.modulus);
	return ex;
}

std::vector<TaskSpec> builtin_tasks(std::uint64_t seed, const TaskOptions& options) {
	options.validate();
	const Vocabulary vocab{options.vocab_size};
	std::vector<TaskSpec> tasks;
	for (std::size_t i = 0; i < kKinds.size(); ++i) {
		TaskSpec t;
		t.kind = kKinds[i];
		t.name = std::string(task_kind_name(t.kind));
		t.index = i;
		t.prefix = vocab.prefix(i);
		t.train_size = options.train_sizes[i];
		t.dev_size = options.dev_size;

		std::mt19937_64 train_rng(stream_seed(seed, i, 0));
		std::set<std::vector<Token>> seen;
		t.train.reserve(t.train_size);
		for (std::size_t k = 0; k < t.train_size; ++k) {
			t.train.push_back(t.generate(train_rng, options));
			seen.insert(t.train.back().input);
		}
		std::mt19937_64 dev_rng(stream_seed(seed, i, 1));
		std::size_t attempts = 0;
		while (t.dev.size() < t.dev_size) {
			if (++attempts > 100 * t.dev_size + 1000) {
				throw ConfigError("task " + t.name + ": input space too small for disjoint train/dev sets");
			}
			Example ex = t.generate(dev_rng, options);
			if (seen.insert(ex.input).second) t.dev.push_back(std::move(ex));
		}
		tasks.push_back(std::move(t));
	}
	return tasks;
}

TaskMixture::TaskMixture(std::vector<TaskSpec> tasks) : tasks_(std::move(tasks)) {
	if (tasks_.empty()) throw ConfigError("task mixture is empty");
	std::set<Token> prefixes;
	double total = 0.0;
	for (const auto& t : tasks_) {
		if (t.train.empty()) throw ConfigError("task " + t.name + " has no training examples");
		if (!prefixes.insert(t.prefix).second) throw ConfigError("duplicate task prefix token in mixture");
		total += static_cast<double>(t.train_size);
	}
	double running = 0.0;
	for (const auto& t : tasks_) {
		weights_.push_back(static_cast<double>(t.train_size) / total);
		running += weights_.back();
		cumulative_.push_back(running);
	}
	cumulative_.back() = 1.0;
}

std::size_t sample_task(const TaskMixture& mixture, std::mt19937_64& rng) {
	std::uniform_real_distribution<double> u(0.0, 1.0);
	const double r = u(rng);
	const auto it = std::upper_bound(mixture.cumulative_.begin(), mixture.cumulative_.end(), r);
	return std::min<std::size_t>(static_cast<std::size_t>(it - mixture.cumulative_.begin()), mixture.size() - 1);
}

std::vector<Example> sample_batch(const TaskMixture& mixture, std::size_t batch_size, std::mt19937_64& rng) {
	if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
	std::vector<Example> batch;
	batch.reserve(batch_size);
	for (std::size_t b = 0; b < batch_size; ++b) {
		const auto& task = mixture.tasks()[sample_task(mixture, rng)];
		std::uniform_int_distribution<std::size_t> pick(0, task.train.size() - 1);
		batch.push_back(task.train[pick(rng)]);
	}
	return batch;
}

}  // namespace hgrid
