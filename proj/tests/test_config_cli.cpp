#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>
#include <sys/wait.h>

#include "hypergrid/cli.hpp"
#include "hypergrid/config.hpp"
#include "hypergrid/errors.hpp"
#include "hypergrid/sweep.hpp"
#include "oracles.hpp"

using namespace hgrid;
namespace fs = std::filesystem;

namespace {

struct Outcome {
	int code;
	std::string out, err;
};

Outcome cli(std::vector<std::string> args) {
	std::ostringstream out, err;
	const int code = run_cli(args, out, err);
	return {code, out.str(), err.str()};
}

std::string read_file(const fs::path& p) {
	std::ifstream in(p, std::ios::binary);
	return {std::istreambuf_iterator<char>(in), {}};
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::trunc) << text; }

std::vector<std::string> tiny_overrides() {
	return {"model.vocab_size=32", "model.d_m=8",         "model.d_f=16",       "model.layers_enc=1",
	        "model.layers_dec=1",  "model.max_len=10",    "gate.d_r=2",         "gate.d_c=4",
	        "tasks.sizes=40,20,10,10,10", "tasks.dev_size=6", "tasks.alphabet=8", "tasks.modulus=8",
	        "train.steps=4",       "train.eval_every=2",  "train.batch_size=2", "gradcheck.budget=4",
	        "gradcheck.batch=1",   "sweep.variants=LG",   "sweep.d_r=1,2",      "sweep.d_c=2,4",
	        "sweep.steps=2"};
}

std::vector<std::string> with_tiny(std::vector<std::string> args) {
	for (const auto& o : tiny_overrides()) {
		args.push_back("--override");
		args.push_back(o);
	}
	return args;
}

std::vector<fs::path> run_dirs(const fs::path& root) {
	std::vector<fs::path> dirs;
	if (!fs::exists(root)) return dirs;
	for (const auto& e : fs::directory_iterator(root))
		if (e.is_directory()) dirs.push_back(e.path());
	std::sort(dirs.begin(), dirs.end());
	return dirs;
}

int exit_status(const std::string& command) {
	const int raw = std::system(command.c_str());
	return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

}  // namespace

TEST_CASE("defaults") {
	const auto c = load_config(nullptr, {});
	CHECK(c.seed == 0);
	CHECK(c.model.d_m == 64);
	CHECK(c.model.d_f == 256);
	CHECK(c.model.gate.kind == GateKind::HyperGrid);
	CHECK(c.model.gate.variant == Variant::LG);
	CHECK(c.model.gate.d_r == 4);
	CHECK(c.model.gate.d_c == 8);
	CHECK(c.tasks.train_sizes == std::vector<std::size_t>{8000, 4000, 2000, 1000, 500});
	CHECK(c.train.steps == 5000);
	CHECK(c.train.optim.lr == 1e-3);
	CHECK(c.sweep.d_r == std::vector<std::size_t>{1, 2, 4, 8});
	CHECK(c.to_flat().size() == config_schema().size());
}

TEST_CASE("file values then overrides, last one wins") {
	const auto dir = oracle::scratch_dir("cfg-precedence");
	write_file(dir / "c.json", R"({"seed": 5, "gate": {"variant": "GL", "d_r": 2}, "train": {"steps": 10}})");
	const fs::path file = dir / "c.json";
	const std::vector<std::string> overrides{"train.steps=20", "gate.d_c=4", "train.steps=30"};
	const auto c = load_config(&file, overrides);
	CHECK(c.seed == 5);
	CHECK(c.model.gate.variant == Variant::GL);
	CHECK(c.model.gate.d_r == 2);
	CHECK(c.model.gate.d_c == 4);
	CHECK(c.train.steps == 30);

	// the nested dump reads back to the same config
	write_file(dir / "round.json", c.to_json().dump());
	const fs::path round = dir / "round.json";
	CHECK(load_config(&round, {}).to_flat() == c.to_flat());
	fs::remove_all(dir);
}

TEST_CASE("unknown keys, bad types and invalid values name the key") {
	const std::vector<std::string> unknown{"model.width=3"};
	CHECK_THROWS_WITH_AS(load_config(nullptr, unknown), doctest::Contains("unknown config key 'model.width'"),
	                     ConfigError);
	const std::vector<std::string> bad_int{"train.steps=ten"};
	CHECK_THROWS_WITH_AS(load_config(nullptr, bad_int), doctest::Contains("train.steps: expected"), ConfigError);
	const std::vector<std::string> bad_bool{"gate.encoder=maybe"};
	CHECK_THROWS_WITH_AS(load_config(nullptr, bad_bool), doctest::Contains("gate.encoder"), ConfigError);
	const std::vector<std::string> bad_div{"gate.d_r=3"};
	CHECK_THROWS_WITH_AS(load_config(nullptr, bad_div), doctest::Contains("gate.d_r=3"), ConfigError);
	const std::vector<std::string> bad_len{"tasks.max_len=40"};
	CHECK_THROWS_WITH_AS(load_config(nullptr, bad_len), doctest::Contains("tasks.max_len"), ConfigError);
	const std::vector<std::string> no_eq{"seed"};
	CHECK_THROWS_AS(load_config(nullptr, no_eq), ConfigError);
	const std::vector<std::string> bad_variant{"gate.variant=XY"};
	CHECK_THROWS_WITH_AS(load_config(nullptr, bad_variant), doctest::Contains("gate.variant"), ConfigError);

	CHECK_THROWS_WITH_AS(apply_json(RunConfig{}, nlohmann::json::parse(R"({"train": {"lr": "fast"}})")),
	                     doctest::Contains("train.lr: expected a number"), ConfigError);
	CHECK_THROWS_WITH_AS(apply_json(RunConfig{}, nlohmann::json::parse(R"({"tasks": {"sizes": [1, -2]}})")),
	                     doctest::Contains("tasks.sizes"), ConfigError);

	const auto dir = oracle::scratch_dir("cfg-bad");
	write_file(dir / "broken.json", "{\"seed\": ");
	const fs::path broken = dir / "broken.json";
	CHECK_THROWS_WITH_AS(load_config(&broken, {}), doctest::Contains("broken.json"), ConfigError);
	fs::remove_all(dir);
}

TEST_CASE("help lists every schema key with its default") {
	const auto r = cli({"--help"});
	CHECK(r.code == kExitOk);
	for (const auto& k : config_schema()) {
		CAPTURE(k.key);
		CHECK(r.out.find(k.key) != std::string::npos);
		CHECK(r.out.find(k.default_value.dump()) != std::string::npos);
	}
	for (const char* sub : {"train", "eval", "sweep", "gradcheck", "param-audit"}) CHECK(r.out.find(sub) != std::string::npos);
}

TEST_CASE("validation failures exit 1 with a message") {
	auto r = cli({"--override", "gate.d_r=3", "param-audit"});
	CHECK(r.code == kExitValidation);
	CHECK(r.err.find("gate.d_r=3") != std::string::npos);

	r = cli({"--config", "/nonexistent/run.json", "train"});
	CHECK(r.code == kExitValidation);
	CHECK(r.err.find("config file not found: /nonexistent/run.json") != std::string::npos);

	r = cli({"frobnicate"});
	CHECK(r.code == kExitValidation);
	r = cli({});
	CHECK(r.code == kExitValidation);
	r = cli({"eval"});
	CHECK(r.code == kExitValidation);
}

TEST_CASE("param-audit reports allocated counts and flags the printed formula") {
	auto r = cli({"param-audit"});
	REQUIRE(r.code == kExitOk);
	auto row = [&](const std::string& label) {
		const auto at = r.out.find("\n" + label + " ");
		REQUIRE(at != std::string::npos);
		return r.out.substr(at + 1, r.out.find('\n', at + 1) - at - 1);
	};
	std::istringstream lg(row("LG"));
	std::string label;
	std::size_t per_layer = 0, layers = 0, added = 0, base = 0;
	lg >> label >> per_layer >> layers >> added >> base;
	CHECK(per_layer == 264);
	CHECK(layers == 4);
	CHECK(added == 1056);
	CHECK(base == 242432);
	std::istringstream none(row("none"));
	none >> label >> per_layer >> layers >> added;
	CHECK(added == 0);
	CHECK(row("L2").find("differs from formula") != std::string::npos);
	CHECK(row("GL").find("differs from formula") != std::string::npos);
	CHECK(row("LG").find("ok") != std::string::npos);
	CHECK(r.out.find("flagged:") != std::string::npos);
	CHECK(r.out.find("ALLOCATION MISMATCH") == std::string::npos);

	// the added fraction shrinks as the model widens
	double last = 1.0;
	for (std::size_t dm : {8, 64, 512}) {
		auto c = load_config(nullptr, {});
		c.model.d_m = dm;
		c.model.d_f = 4 * dm;
		const std::string audit = param_audit(c);
		CAPTURE(audit);
		const auto at = audit.find("\nLG ");
		REQUIRE(at != std::string::npos);
		std::istringstream s(audit.substr(at + 1));
		double ratio = 0;
		s >> label >> per_layer >> layers >> added >> base >> ratio;
		CHECK(ratio < last);
		last = ratio;
	}
}

TEST_CASE("train, eval and gradcheck artifacts") {
	const auto root = oracle::scratch_dir("cli-train");
	auto r = cli(with_tiny({"--quiet", "--out", root.string(), "--seed", "3", "train"}));
	INFO(r.err);
	REQUIRE(r.code == kExitOk);
	auto dirs = run_dirs(root);
	REQUIRE(dirs.size() == 1);
	const auto run = dirs[0];
	CHECK(run.filename().string().find("-LG") != std::string::npos);
	CHECK(run.filename().string().ends_with("-s3"));
	for (const char* f : {"config.json", "metrics.jsonl", "best.ckpt", "summary.json", "report.txt"})
		CHECK(fs::exists(run / f));
	const auto summary = nlohmann::json::parse(read_file(run / "summary.json"));
	CHECK(summary.at("gate") == "LG");
	CHECK(summary.at("best_scores").size() == 5);
	CHECK(nlohmann::json::parse(read_file(run / "config.json")).at("seed") == 3);

	// eval picks up the sibling config
	r = cli({"eval", "--checkpoint", (run / "best.ckpt").string()});
	CHECK(r.code == kExitOk);
	CHECK(r.out.find("macro_avg") != std::string::npos);

	// a checkpoint from a different architecture
	r = cli(with_tiny({"--override", "gate.variant=GL", "eval", "--checkpoint", (run / "best.ckpt").string()}));
	CHECK(r.code == kExitRuntime);
	CHECK(r.err.find("hypergrid.0.") != std::string::npos);

	write_file(root / "junk.ckpt", "not a checkpoint");
	r = cli(with_tiny({"eval", "--checkpoint", (root / "junk.ckpt").string()}));
	CHECK(r.code == kExitRuntime);

	r = cli(with_tiny({"--out", (root / "gc").string(), "gradcheck"}));
	CHECK(r.code == kExitOk);
	CHECK(r.out.find("all blocks pass") != std::string::npos);
	dirs = run_dirs(root / "gc");
	REQUIRE(dirs.size() == 1);
	CHECK(dirs[0].filename().string().find("gradcheck-LG") != std::string::npos);
	CHECK(fs::exists(dirs[0] / "gradcheck.txt"));
	CHECK(nlohmann::json::parse(read_file(dirs[0] / "gradcheck.json")).is_array());
	fs::remove_all(root);
}

TEST_CASE("cli sweep stops after a cell budget and resumes") {
	const auto root = oracle::scratch_dir("cli-sweep");
	const auto state = (root / "state").string();
	auto r = cli(with_tiny({"--quiet", "sweep", "--state", state, "--max-cells", "2"}));
	INFO(r.err);
	REQUIRE(r.code == kExitOk);
	CHECK(r.out.find("incomplete") != std::string::npos);
	r = cli(with_tiny({"sweep", "--state", state}));
	REQUIRE(r.code == kExitOk);
	CHECK(r.out.find("incomplete") == std::string::npos);
	std::size_t trained = 0;
	for (std::size_t at = r.out.find("cell "); at != std::string::npos; at = r.out.find("cell ", at + 1))
		if (at == 0 || r.out[at - 1] == '\n') ++trained;
	CHECK(trained == 2);
	CHECK(fs::exists(root / "state" / "plotdata" / "LG_d_r.csv"));
	CHECK(fs::exists(root / "state" / "report.txt"));
	CHECK(parse_plotdata(root / "state" / "plotdata" / "LG_d_c.csv").size() == 2);

	auto changed = with_tiny({"sweep", "--state", state});
	changed.insert(changed.end(), {"--override", "sweep.steps=3"});
	r = cli(changed);
	CHECK(r.code == kExitValidation);
	CHECK(r.err.find("different plan") != std::string::npos);
	fs::remove_all(root);
}

TEST_CASE("the installed binary returns the documented exit codes") {
	const std::string bin = HYPERGRID_CLI_PATH;
	CHECK(exit_status(bin + " --help > /dev/null") == 0);
	CHECK(exit_status(bin + " --override gate.d_r=3 param-audit 2> /dev/null") == 1);
	CHECK(exit_status(bin + " --config /nonexistent.json train 2> /dev/null") == 1);
	const auto dir = oracle::scratch_dir("cli-exit");
	write_file(dir / "junk.ckpt", "HGCKPT01 nothing else");
	CHECK(exit_status(bin + " eval --checkpoint " + (dir / "junk.ckpt").string() + " 2> /dev/null") == 2);
	fs::remove_all(dir);
}
