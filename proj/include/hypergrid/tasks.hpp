#pragma once

// Synthetic text-to-text tasks over a shared vocabulary, and proportionate
// mixture sampling across them.
//
// Vocabulary layout for a vocab of size V: content symbols occupy the low ids
// 0..alphabet-1; the top ids are reserved:
//   V-1 start (bos), V-2 end (eos), V-3 EVEN, V-4 ODD, V-5-i prefix of task i.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hypergrid/transformer.hpp"

namespace hgrid {

struct Vocabulary {
	std::size_t size = 64;

	Token bos() const { return size - 1; }
	Token eos() const { return size - 2; }
	Token even() const { return size - 3; }
	Token odd() const { return size - 4; }
	Token prefix(std::size_t task_index) const { return size - 5 - task_index; }
	/// Ids below this are free for content symbols.
	std::size_t first_reserved(std::size_t num_tasks) const { return size - 4 - num_tasks; }
};

enum class TaskKind { Copy, Reverse, SortAscending, Parity, ModularSum };

std::string_view task_kind_name(TaskKind kind);

struct Example {
	std::vector<Token> input;   // [prefix, content...]
	std::vector<Token> target;  // target sequence without eos
	std::size_t task = 0;       // index into the mixture

	bool operator==(const Example&) const = default;
};

struct TaskOptions {
	std::vector<std::size_t> train_sizes{8000, 4000, 2000, 1000, 500};
	std::size_t dev_size = 100;
	std::size_t alphabet = 16;  // content symbols 0..alphabet-1
	std::size_t min_len = 2;
	std::size_t max_len = 6;
	std::size_t modulus = 10;   // modular-sum answers are symbols 0..modulus-1
	std::size_t vocab_size = 64;

	void validate() const;
};

struct TaskSpec {
	std::string name;
	TaskKind kind = TaskKind::Copy;
	std::size_t index = 0;
	Token prefix = 0;
	std::size_t train_size = 0;
	std::size_t dev_size = 0;
	std::string metric = "exact_match";
	std::vector<Example> train;
	std::vector<Example> dev;

	/// Target for a content sequence (input without its prefix).
	std::vector<Token> solve(std::span<const Token> content, const Vocabulary& vocab, std::size_t modulus) const;
	/// Draws one example; deterministic in the rng state.
	Example generate(std::mt19937_64& rng, const TaskOptions& options) const;
};

/// copy, reverse, sort, parity, modsum with the configured (skewed) train sizes.
/// Train and dev sets come from separate seed streams and share no inputs.
std::vector<TaskSpec> builtin_tasks(std::uint64_t seed, const TaskOptions& options = {});

class TaskMixture {
public:
	explicit TaskMixture(std::vector<TaskSpec> tasks);

	const std::vector<TaskSpec>& tasks() const { return tasks_; }
	/// weight_i = train_size_i / sum of train sizes
	const std::vector<double>& weights() const { return weights_; }
	std::size_t size() const { return tasks_.size(); }

private:
	std::vector<TaskSpec> tasks_;
	std::vector<double> weights_;
	std::vector<double> cumulative_;
	friend std::vector<Example> sample_batch(const TaskMixture&, std::size_t, std::mt19937_64&);
	friend std::size_t sample_task(const TaskMixture&, std::mt19937_64&);
};

/// Task index drawn with probability equal to its mixture weight.
std::size_t sample_task(const TaskMixture& mixture, std::mt19937_64& rng);

/// batch_size i.i.d. draws: task by weight, then a uniform training example of that task.
std::vector<Example> sample_batch(const TaskMixture& mixture, std::size_t batch_size, std::mt19937_64& rng);

}  // namespace hgrid
