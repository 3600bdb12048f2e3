#include "hypergrid/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "hypergrid/errors.hpp"

namespace hgrid {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

json model_json(const ModelConfig& m) {
	return {{"vocab_size", m.vocab_size}, {"d_m", m.d_m},
	        {"d_f", m.d_f},               {"heads", m.heads},
	        {"layers_enc", m.layers_enc}, {"layers_dec", m.layers_dec},
	        {"max_len", m.max_len},       {"gate_n", m.gate.n},
	        {"gate_encoder", m.gate.encoder}, {"gate_decoder", m.gate.decoder}};
}

void write_atomic(const fs::path& path, const std::string& text) {
	const auto tmp = fs::path(path).concat(".tmp");
	{
		std::ofstream out(tmp, std::ios::trunc);
		if (!out) throw FormatError("cannot write " + tmp.string());
		out << text;
		if (!out) throw FormatError("short write to " + tmp.string());
	}
	fs::rename(tmp, path);
}

std::optional<CellResult> load_done(const fs::path& file, const SweepCell& cell) {
	std::ifstream in(file);
	if (!in) return std::nullopt;
	try {
		const json j = json::parse(in);
		if (j.at("id").get<std::string>() != cell.id() || j.at("seed").get<std::uint64_t>() != cell.seed) {
			return std::nullopt;
		}
		CellResult r;
		r.cell = cell;
		r.best_macro_avg = j.at("best_macro_avg").get<double>();
		r.best_step = j.at("best_step").get<std::size_t>();
		r.params_added = j.at("params_added").get<std::size_t>();
		return r;
	} catch (const json::exception&) {
		return std::nullopt;
	}
}

AxisAggregate summarize(std::size_t value, const std::vector<double>& scores) {
	AxisAggregate a;
	a.value = value;
	a.max = *std::max_element(scores.begin(), scores.end());
	a.min = *std::min_element(scores.begin(), scores.end());
	double total = 0.0;
	for (double s : scores) total += s;
	a.mean = total / static_cast<double>(scores.size());
	return a;
}

std::string format_double(double v) {
	char buf[64];
	std::snprintf(buf, sizeof buf, "%.17g", v);
	return buf;
}

}  // namespace

json SweepPlan::to_json() const {
	json vs = json::array();
	for (auto v : variants) vs.push_back(std::string(variant_name(v)));
	return {{"variants", vs},
	        {"d_r", d_r},
	        {"d_c", d_c},
	        {"seeds", seeds},
	        {"model", model_json(base)},
	        {"tasks",
	         {{"sizes", tasks.train_sizes},
	          {"dev_size", tasks.dev_size},
	          {"alphabet", tasks.alphabet},
	          {"min_len", tasks.min_len},
	          {"max_len", tasks.max_len},
	          {"modulus", tasks.modulus}}},
	        {"optim", {{"lr", optim.lr}, {"beta1", optim.beta1}, {"beta2", optim.beta2}, {"eps", optim.eps}}},
	        {"steps", steps},
	        {"batch_size", batch_size},
	        {"eval_every", eval_every},
	        {"base_seed", base_seed}};
}

std::string SweepCell::id() const {
	return std::string(variant_name(variant)) + "_r" + std::to_string(d_r) + "_c" + std::to_string(d_c) + "_s" +
	       std::to_string(seed_index);
}

std::vector<SweepCell> enumerate_cells(const SweepPlan& plan) {
	std::vector<SweepCell> cells;
	for (auto v : plan.variants)
		for (auto r : plan.d_r)
			for (auto c : plan.d_c)
				for (std::size_t s = 0; s < plan.seeds; ++s) {
					SweepCell cell;
					cell.index = cells.size();
					cell.variant = v;
					cell.d_r = r;
					cell.d_c = c;
					cell.seed_index = s;
					cell.seed = plan.base_seed + cell.index;
					cells.push_back(cell);
				}
	return cells;
}

std::map<Variant, VariantAggregates> aggregate_cells(const std::vector<CellResult>& cells,
                                                      const std::vector<Variant>& variants) {
	std::map<Variant, VariantAggregates> out;
	for (auto v : variants) {
		// (d_r, d_c) -> seed scores in seed order
		std::map<std::pair<std::size_t, std::size_t>, std::map<std::size_t, double>> by_pair;
		for (const auto& c : cells)
			if (c.cell.variant == v) by_pair[{c.cell.d_r, c.cell.d_c}][c.cell.seed_index] = c.best_macro_avg;

		std::map<std::pair<std::size_t, std::size_t>, double> score;
		std::set<std::size_t> rs, cs;
		for (const auto& [key, seeds] : by_pair) {
			std::vector<double> vals;
			for (const auto& [s, x] : seeds) vals.push_back(x);
			score[key] = summarize(0, vals).mean;
			rs.insert(key.first);
			cs.insert(key.second);
		}
		VariantAggregates agg;
		for (auto r : rs) {
			std::vector<double> vals;
			for (auto c : cs)
				if (auto it = score.find({r, c}); it != score.end()) vals.push_back(it->second);
			agg.by_d_r.push_back(summarize(r, vals));
		}
		for (auto c : cs) {
			std::vector<double> vals;
			for (auto r : rs)
				if (auto it = score.find({r, c}); it != score.end()) vals.push_back(it->second);
			agg.by_d_c.push_back(summarize(c, vals));
		}
		out[v] = std::move(agg);
	}
	return out;
}

std::size_t env_thread_count() {
	const char* env = std::getenv("HYPERGRID_THREADS");
	if (!env || !*env) return 1;
	char* end = nullptr;
	const long n = std::strtol(env, &end, 10);
	if (*end != '\0' || n < 1) throw ConfigError(std::string("HYPERGRID_THREADS must be a positive integer, got '") +
	                                             env + "'");
	const long hw = static_cast<long>(std::max(1u, std::thread::hardware_concurrency()));
	return static_cast<std::size_t>(std::min(n, 4 * hw));
}

SweepResult run_sweep(const SweepPlan& plan, const fs::path& state_dir, SweepOptions options) {
	if (plan.steps == 0) throw ConfigError("sweep.steps must be >= 1");
	if (plan.seeds == 0) throw ConfigError("sweep.seeds must be >= 1");
	for (auto v : plan.variants)
		if (v == Variant::L) throw ConfigError("sweep.variants: L has no (d_r, d_c) grid");

	fs::create_directories(state_dir / "cells");
	const std::string fingerprint = plan.to_json().dump(2);
	const auto plan_file = state_dir / "plan.json";
	if (fs::exists(plan_file)) {
		std::ifstream in(plan_file);
		std::stringstream ss;
		ss << in.rdbuf();
		if (ss.str() != fingerprint) {
			throw ConfigError("sweep state " + state_dir.string() + " was created by a different plan");
		}
	} else {
		write_atomic(plan_file, fingerprint);
	}

	SweepResult result;
	result.variants = plan.variants;
	const auto cells = enumerate_cells(plan);
	std::vector<std::optional<CellResult>> slots(cells.size());
	std::vector<const SweepCell*> pending;
	for (std::size_t i = 0; i < cells.size(); ++i) {
		const auto& cell = cells[i];
		ModelConfig mc = plan.base;
		mc.gate.kind = GateKind::HyperGrid;
		mc.gate.variant = cell.variant;
		mc.gate.d_r = cell.d_r;
		mc.gate.d_c = cell.d_c;
		try {
			mc.validate();
		} catch (const ConfigError& e) {
			result.skipped.push_back({cell, e.what()});
			continue;
		}
		if (auto done = load_done(state_dir / "cells" / cell.id() / "done.json", cell)) {
			slots[i] = *done;
		} else {
			pending.push_back(&cell);
		}
	}

	TaskOptions task_opts = plan.tasks;
	task_opts.vocab_size = plan.base.vocab_size;
	const TaskMixture mixture(builtin_tasks(plan.base_seed, task_opts));

	std::atomic<std::size_t> next{0}, trained{0};
	std::mutex mu;
	std::exception_ptr failure;
	auto worker = [&] {
		for (;;) {
			{
				std::lock_guard lock(mu);
				if (failure) return;
			}
			if (trained.load() >= options.stop_after) return;
			const std::size_t k = next.fetch_add(1);
			if (k >= pending.size()) return;
			const SweepCell& cell = *pending[k];
			try {
				ModelConfig mc = plan.base;
				mc.gate.kind = GateKind::HyperGrid;
				mc.gate.variant = cell.variant;
				mc.gate.d_r = cell.d_r;
				mc.gate.d_c = cell.d_c;
				TransformerModel model(mc, cell.seed);
				const auto dir = state_dir / "cells" / cell.id();
				fs::create_directories(dir);
				TrainOptions to;
				to.optim = plan.optim;
				to.steps = plan.steps;
				to.batch_size = plan.batch_size;
				to.eval_every = plan.eval_every ? plan.eval_every : plan.steps;
				to.seed = cell.seed;
				to.out_dir = dir;
				to.save_checkpoint = false;
				const TrainResult tr = train(model, mixture, to);
				CellResult r;
				r.cell = cell;
				r.best_macro_avg = tr.best().macro_avg;
				r.best_step = tr.best().step;
				r.params_added = model.added_parameter_count();
				const json done = {{"id", cell.id()},
				                   {"variant", std::string(variant_name(cell.variant))},
				                   {"d_r", cell.d_r},
				                   {"d_c", cell.d_c},
				                   {"seed_index", cell.seed_index},
				                   {"seed", cell.seed},
				                   {"best_macro_avg", r.best_macro_avg},
				                   {"best_step", r.best_step},
				                   {"params_added", r.params_added}};
				write_atomic(dir / "done.json", done.dump(2) + "\n");
				slots[cell.index] = r;
				trained.fetch_add(1);
				if (options.on_cell) {
					std::lock_guard lock(mu);
					options.on_cell(r);
				}
			} catch (...) {
				std::lock_guard lock(mu);
				if (!failure) failure = std::current_exception();
				return;
			}
		}
	};

	const std::size_t threads = std::max<std::size_t>(
	    1, std::min(options.threads ? options.threads : env_thread_count(), std::max<std::size_t>(1, pending.size())));
	if (threads == 1) {
		worker();
	} else {
		std::vector<std::thread> pool;
		for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
		for (auto& t : pool) t.join();
	}
	if (failure) std::rethrow_exception(failure);

	std::size_t expected = 0;
	for (const auto& s : slots) {
		if (s) result.cells.push_back(*s);
	}
	expected = cells.size() - result.skipped.size();
	result.complete = result.cells.size() == expected;
	result.aggregates = aggregate_cells(result.cells, result.variants);
	return result;
}

std::vector<fs::path> emit_plotdata(const SweepResult& result, const fs::path& dir) {
	std::error_code ec;
	fs::create_directories(dir, ec);
	std::vector<fs::path> written;
	for (auto v : result.variants) {
		const auto it = result.aggregates.find(v);
		const VariantAggregates empty;
		const VariantAggregates& agg = it == result.aggregates.end() ? empty : it->second;
		for (const auto& [axis, rows] : {std::pair{"d_r", &agg.by_d_r}, std::pair{"d_c", &agg.by_d_c}}) {
			const auto path = dir / (std::string(variant_name(v)) + "_" + axis + ".csv");
			std::ofstream out(path, std::ios::trunc);
			if (!out) throw FormatError("cannot write plot data " + path.string());
			out << "value,max,mean,min\n";
			for (const auto& a : *rows) {
				out << a.value << ',' << format_double(a.max) << ',' << format_double(a.mean) << ','
				    << format_double(a.min) << '\n';
			}
			if (!out) throw FormatError("short write to " + path.string());
			written.push_back(path);
		}
	}
	return written;
}

std::vector<AxisAggregate> parse_plotdata(const fs::path& file) {
	std::ifstream in(file);
	if (!in) throw FormatError("cannot read plot data " + file.string());
	std::string line;
	if (!std::getline(in, line) || line != "value,max,mean,min") {
		throw FormatError(file.string() + ": expected header value,max,mean,min");
	}
	std::vector<AxisAggregate> rows;
	while (std::getline(in, line)) {
		if (line.empty()) continue;
		AxisAggregate a;
		char c1 = 0, c2 = 0, c3 = 0;
		std::istringstream ls(line);
		unsigned long long value = 0;
		std::string rest;
		if (!(ls >> value >> c1) || c1 != ',') throw FormatError(file.string() + ": malformed row '" + line + "'");
		a.value = value;
		std::getline(ls, rest);
		double x[3];
		if (std::sscanf(rest.c_str(), "%lf%c%lf%c%lf", &x[0], &c2, &x[1], &c3, &x[2]) != 5 || c2 != ',' || c3 != ',') {
			throw FormatError(file.string() + ": malformed row '" + line + "'");
		}
		a.max = x[0];
		a.mean = x[1];
		a.min = x[2];
		rows.push_back(a);
	}
	return rows;
}

std::string format_sweep_report(const SweepResult& result) {
	std::ostringstream os;
	os << std::fixed << std::setprecision(4);
	os << "sweep: " << result.cells.size() << " cells completed" << (result.complete ? "" : " (incomplete)")
	   << ", " << result.skipped.size() << " skipped\n";
	for (const auto& s : result.skipped) os << "  skipped " << s.cell.id() << ": " << s.reason << '\n';
	for (auto v : result.variants) {
		const auto it = result.aggregates.find(v);
		if (it == result.aggregates.end()) continue;
		const auto& agg = it->second;
		os << "\nvariant " << variant_name(v) << '\n';
		for (const auto& [axis, rows] : {std::pair{"d_r", &agg.by_d_r}, std::pair{"d_c", &agg.by_d_c}}) {
			os << "  " << axis << "     max     mean    min\n";
			for (const auto& a : *rows) {
				os << "  " << std::left << std::setw(6) << a.value << std::right << std::setw(8) << a.max
				   << std::setw(8) << a.mean << std::setw(8) << a.min << '\n';
			}
		}
		if (!agg.by_d_c.empty()) {
			const auto best = std::max_element(agg.by_d_c.begin(), agg.by_d_c.end(),
			                                   [](const AxisAggregate& a, const AxisAggregate& b) { return a.mean < b.mean; });
			os << "  note: best mean at d_c=" << best->value << " (smallest tested d_c=" << agg.by_d_c.front().value
			   << "). The published grid study reports that a small fan-out works well; this is not asserted.\n";
		}
	}
	return os.str();
}

}  // namespace hgrid
