#include "hypergrid/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>

#include "hypergrid/checkpoint.hpp"
#include "hypergrid/errors.hpp"
#include "hypergrid/gradcheck.hpp"
#include "hypergrid/harness.hpp"
#include "hypergrid/sweep.hpp"

namespace hgrid {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class Verbosity { Quiet, Normal, Verbose };

struct Common {
	std::string config_path;
	std::vector<std::string> overrides;
	std::string out;
	std::optional<std::uint64_t> seed;
	bool quiet = false;
	bool verbose = false;

	Verbosity verbosity() const { return quiet ? Verbosity::Quiet : verbose ? Verbosity::Verbose : Verbosity::Normal; }
};

RunConfig resolve(const Common& c, const fs::path* fallback_config = nullptr) {
	fs::path file;
	const fs::path* file_ptr = nullptr;
	if (!c.config_path.empty()) {
		file = c.config_path;
		if (!fs::exists(file)) throw ConfigError("config file not found: " + file.string());
		file_ptr = &file;
	} else if (fallback_config && fs::exists(*fallback_config)) {
		file_ptr = fallback_config;
	}
	std::vector<std::string> overrides = c.overrides;
	if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
	if (!c.out.empty()) overrides.push_back("out_dir=" + c.out);
	return load_config(file_ptr, overrides);
}

std::string timestamp() {
	const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
	std::tm tm{};
	gmtime_r(&now, &tm);
	char buf[32];
	std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
	return buf;
}

fs::path make_run_dir(const RunConfig& config, const std::string& tag) {
	const fs::path base = fs::path(config.out_dir) / (timestamp() + "-" + tag + "-s" + std::to_string(config.seed));
	fs::path dir = base;
	for (int k = 2; fs::exists(dir); ++k) dir = fs::path(base).concat("-" + std::to_string(k));
	fs::create_directories(dir);
	return dir;
}

void write_text(const fs::path& path, const std::string& text) {
	std::ofstream out(path, std::ios::trunc);
	if (!out) throw FormatError("cannot write " + path.string());
	out << text;
}

TaskMixture make_mixture(const RunConfig& config) { return TaskMixture(builtin_tasks(config.seed, config.tasks)); }

int cmd_train(const Common& common, std::ostream& out) {
	const RunConfig config = resolve(common);
	const auto verbosity = common.verbosity();
	const TaskMixture mixture = make_mixture(config);
	TransformerModel model(config.model, config.seed);
	const fs::path dir = make_run_dir(config, config.model.gate.label());
	write_text(dir / "config.json", config.to_json().dump(2) + "\n");

	TrainOptions opts;
	opts.optim = config.train.optim;
	opts.steps = config.train.steps;
	opts.batch_size = config.train.batch_size;
	opts.eval_every = config.train.eval_every;
	opts.seed = config.seed;
	opts.out_dir = dir;
	if (verbosity != Verbosity::Quiet) {
		opts.on_eval = [&](const RunMetrics& m) {
			out << "step " << m.step << "  macro_avg " << std::fixed << std::setprecision(4) << m.macro_avg
			    << "  train_loss " << m.train_loss << std::defaultfloat << '\n';
		};
	}
	if (verbosity == Verbosity::Verbose) {
		opts.on_step = [&](std::size_t step, double loss) {
			if (step % 50 == 0) out << "  step " << step << " loss " << loss << '\n';
		};
	}
	const TrainResult result = train(model, mixture, opts);
	const auto& best = result.best();

	json scores = json::object();
	for (const auto& [name, s] : best.task_scores) scores[name] = s;
	const json summary = {{"gate", config.model.gate.label()},
	                      {"dims",
	                       {{"d_m", config.model.d_m},
	                        {"d_f", config.model.d_f},
	                        {"d_r", config.model.gate.d_r},
	                        {"d_c", config.model.gate.d_c},
	                        {"n", config.model.gate.n}}},
	                      {"params_total", model.parameter_count()},
	                      {"params_added", model.added_parameter_count()},
	                      {"params_added_per_layer", config.model.added_per_layer()},
	                      {"gated_layers", config.model.gated_layer_count()},
	                      {"best_step", best.step},
	                      {"best_macro_avg", best.macro_avg},
	                      {"best_scores", scores},
	                      {"final_macro_avg", result.history.back().macro_avg},
	                      {"selection", "single checkpoint with the best dev macro-average over all tasks"}};
	write_text(dir / "summary.json", summary.dump(2) + "\n");
	const std::string report = format_report(result, config.model.gate.label()) +
	                           "\nnote: one checkpoint is selected by the dev macro-average over all tasks and every "
	                           "per-task score above comes from it.\n";
	write_text(dir / "report.txt", report);
	if (verbosity != Verbosity::Quiet) out << report;
	out << "run directory: " << dir.string() << '\n';
	return kExitOk;
}

int cmd_eval(const Common& common, const std::string& checkpoint, std::ostream& out) {
	const fs::path ck_path(checkpoint);
	const fs::path sibling = ck_path.parent_path() / "config.json";
	const RunConfig config = resolve(common, &sibling);
	if (!fs::exists(ck_path)) throw ConfigError("checkpoint not found: " + ck_path.string());
	TransformerModel model(config.model, config.seed);
	load_model(model, read_checkpoint(ck_path));
	const TaskMixture mixture = make_mixture(config);
	const RunMetrics m = evaluate_all(model, mixture, 0);
	out << std::fixed << std::setprecision(4);
	for (const auto& [name, s] : m.task_scores) out << std::left << std::setw(10) << name << s << '\n';
	out << std::left << std::setw(10) << "macro_avg" << m.macro_avg << '\n';
	return kExitOk;
}

int cmd_gradcheck(const Common& common, std::ostream& out) {
	const RunConfig config = resolve(common);
	const TaskMixture mixture = make_mixture(config);
	TransformerModel model(config.model, config.seed);
	std::mt19937_64 rng(config.seed);
	const auto batch = sample_batch(mixture, config.gradcheck.batch, rng);
	const auto reports = check_model(model, batch, config.gradcheck.budget, config.seed);
	const std::string table = format_reports(reports);
	const bool ok = all_pass(reports);

	const fs::path dir = make_run_dir(config, "gradcheck-" + config.model.gate.label());
	write_text(dir / "config.json", config.to_json().dump(2) + "\n");
	write_text(dir / "gradcheck.txt", table);
	json rows = json::array();
	for (const auto& r : reports) {
		rows.push_back({{"block", r.block},
		                {"size", r.size},
		                {"checked", r.checked},
		                {"max_rel", r.max_rel},
		                {"max_abs", r.max_abs},
		                {"pass", r.pass},
		                {"vacuous", r.vacuous},
		                {"kinks", r.kinks}});
	}
	write_text(dir / "gradcheck.json", rows.dump(2) + "\n");

	if (common.verbosity() != Verbosity::Quiet || !ok) out << table;
	out << (ok ? "gradcheck: all blocks pass" : "gradcheck: FAILED") << " (" << reports.size() << " blocks)\n";
	return ok ? kExitOk : kExitRuntime;
}

int cmd_sweep(const Common& common, const std::string& state, std::size_t max_cells, std::ostream& out) {
	const RunConfig config = resolve(common);
	SweepPlan plan;
	plan.variants = config.sweep.variants;
	plan.d_r = config.sweep.d_r;
	plan.d_c = config.sweep.d_c;
	plan.seeds = config.sweep.seeds;
	plan.base = config.model;
	plan.tasks = config.tasks;
	plan.optim = config.train.optim;
	plan.steps = config.sweep.steps;
	plan.batch_size = config.train.batch_size;
	plan.base_seed = config.seed;

	const fs::path state_dir = state.empty() ? fs::path(config.out_dir) / "sweep" : fs::path(state);
	SweepOptions opts;
	if (max_cells > 0) opts.stop_after = max_cells;
	if (common.verbosity() != Verbosity::Quiet) {
		opts.on_cell = [&](const CellResult& r) {
			out << "cell " << r.cell.id() << "  best macro_avg " << std::fixed << std::setprecision(4)
			    << r.best_macro_avg << std::defaultfloat << '\n';
		};
	}
	const SweepResult result = run_sweep(plan, state_dir, opts);
	fs::create_directories(state_dir);
	write_text(state_dir / "config.json", config.to_json().dump(2) + "\n");
	const auto files = emit_plotdata(result, state_dir / "plotdata");
	const std::string report = format_sweep_report(result);
	write_text(state_dir / "report.txt", report);
	if (common.verbosity() != Verbosity::Quiet) out << report;
	for (const auto& f : files) out << "wrote " << f.string() << '\n';
	if (!result.complete) out << "sweep incomplete; rerun the same command to resume\n";
	return kExitOk;
}

}  // namespace

std::string param_audit(const RunConfig& config) {
	struct Row {
		std::string label;
		GateConfig gate;
	};
	const GateConfig& g = config.model.gate;
	std::vector<Row> rows = {{"none", GateConfig::none()}};
	for (auto v : {Variant::L, Variant::L2, Variant::LG, Variant::GL}) {
		GateConfig gc = g;
		gc.kind = GateKind::HyperGrid;
		gc.variant = v;
		rows.push_back({std::string(variant_name(v)), gc});
	}
	GateConfig og = g;
	og.kind = GateKind::OutGate;
	rows.push_back({og.label(), og});

	std::ostringstream os;
	os << "parameter audit: d_m=" << config.model.d_m << " d_f=" << config.model.d_f << " d_r=" << g.d_r
	   << " d_c=" << g.d_c << " n=" << (g.n ? std::to_string(g.n) : std::string("full")) << "  layers "
	   << config.model.layers_enc << "+" << config.model.layers_dec << '\n';
	os << "gated matrix: FFN-2, fan-in d_f=" << config.model.d_f << ", fan-out d_m=" << config.model.d_m
	   << ", conditioning width d_m=" << config.model.d_m << "\n\n";
	os << std::left << std::setw(14) << "variant" << std::setw(11) << "per-layer" << std::setw(8) << "layers"
	   << std::setw(10) << "added" << std::setw(11) << "base" << std::setw(11) << "ratio" << std::setw(18)
	   << "formula(d_m,d_f)" << std::setw(16) << "formula(gated)"
	   << "check\n";
	std::vector<std::string> notes;
	for (const auto& row : rows) {
		ModelConfig mc = config.model;
		mc.gate = row.gate;
		try {
			mc.validate();
		} catch (const ConfigError& e) {
			os << std::left << std::setw(14) << row.label << "invalid at these dims: " << e.what() << '\n';
			continue;
		}
		const TransformerModel model(mc, config.seed);
		const std::size_t layers = mc.gated_layer_count();
		const std::size_t added = model.added_parameter_count();
		const std::size_t per_layer = layers ? added / layers : 0;
		const std::size_t base = model.base_parameter_count();
		std::string formula_paper = "-", formula_gated = "-", check = "ok";
		if (per_layer != mc.added_per_layer() || per_layer * layers != added) check = "ALLOCATION MISMATCH";
		if (row.gate.kind == GateKind::HyperGrid) {
			const auto paper_dims = ProjectionDims::make(mc.d_m, mc.d_f, row.gate.d_r, row.gate.d_c,
			                                             mc.gate_dims().width_n());
			const std::size_t pub = published_cost(row.gate.variant, paper_dims);
			const std::size_t pub_gated = published_cost(row.gate.variant, mc.gate_dims());
			formula_paper = std::to_string(pub);
			formula_gated = std::to_string(pub_gated);
			if (pub != per_layer) {
				check = check == "ok" ? "differs from formula" : check;
				notes.push_back(row.label + ": allocated " + std::to_string(per_layer) +
				                " per layer; the printed formula with d_m=" + std::to_string(mc.d_m) +
				                ", d_f=" + std::to_string(mc.d_f) + " gives " + std::to_string(pub) +
				                ". The formula sizes L_c by d_f, but L_c maps the d_m-wide conditioning vector to d_c values.");
			}
		}
		os << std::left << std::setw(14) << row.label << std::setw(11) << per_layer << std::setw(8) << layers
		   << std::setw(10) << added << std::setw(11) << base << std::setw(11) << std::setprecision(4)
		   << std::scientific << (base ? static_cast<double>(added) / static_cast<double>(base) : 0.0)
		   << std::defaultfloat << std::setw(18) << formula_paper << std::setw(16) << formula_gated << check
		   << '\n';
	}
	if (!notes.empty()) {
		os << "\nflagged:\n";
		for (const auto& n : notes) os << "  " << n << '\n';
	}
	return os.str();
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
	CLI::App app{"HyperGrid gated transformer: train, evaluate, sweep, gradient-check and audit"};
	app.name("hypergrid");
	app.fallthrough();
	app.require_subcommand(1);
	app.footer(describe_schema());

	Common common;
	std::uint64_t seed = 0;
	app.add_option("--config", common.config_path, "JSON config file");
	app.add_option("--override", common.overrides, "key=value, repeatable, applied after the file")
	    ->allow_extra_args(false);
	app.add_option("--out", common.out, "output directory (overrides out_dir)");
	auto* seed_opt = app.add_option("--seed", seed, "seed (overrides seed)");
	auto* quiet = app.add_flag("--quiet", common.quiet, "only print results and errors");
	app.add_flag("--verbose", common.verbose, "print training progress")->excludes(quiet);

	auto* train_cmd = app.add_subcommand("train", "co-train on the task mixture");
	auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on every dev set");
	std::string checkpoint;
	eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
	auto* sweep_cmd = app.add_subcommand("sweep", "run or resume the (variant, d_r, d_c) lattice");
	std::string state;
	std::size_t max_cells = 0;
	sweep_cmd->add_option("--state", state, "sweep state directory (default <out_dir>/sweep)");
	sweep_cmd->add_option("--max-cells", max_cells, "stop after training this many cells");
	auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every parameter block");
	auto* audit_cmd = app.add_subcommand("param-audit", "added parameter counts for every gate variant");

	std::vector<std::string> reversed(args.rbegin(), args.rend());
	try {
		app.parse(reversed);
	} catch (const CLI::CallForHelp& e) {
		return app.exit(e, out, err) == 0 ? kExitOk : kExitValidation;
	} catch (const CLI::CallForAllHelp& e) {
		return app.exit(e, out, err) == 0 ? kExitOk : kExitValidation;
	} catch (const CLI::ParseError& e) {
		app.exit(e, out, err);
		return kExitValidation;
	}
	if (seed_opt->count() > 0) common.seed = seed;

	try {
		if (train_cmd->parsed()) return cmd_train(common, out);
		if (eval_cmd->parsed()) return cmd_eval(common, checkpoint, out);
		if (sweep_cmd->parsed()) return cmd_sweep(common, state, max_cells, out);
		if (grad_cmd->parsed()) return cmd_gradcheck(common, out);
		if (audit_cmd->parsed()) {
			out << param_audit(resolve(common));
			return kExitOk;
		}
	} catch (const std::invalid_argument& e) {  // ConfigError, ShapeError
		err << "error: " << e.what() << '\n';
		return kExitValidation;
	} catch (const std::exception& e) {
		err << "error: " << e.what() << '\n';
		return kExitRuntime;
	}
	return kExitValidation;
}

}  // namespace hgrid
