#include "hypergrid/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "hypergrid/errors.hpp"

namespace hgrid {

namespace {

using json = nlohmann::json;

const std::vector<ConfigKey>& schema() {
	static const std::vector<ConfigKey> keys = {
	    {"seed", 0, "base seed for parameters, data and sampling"},
	    {"out_dir", "runs", "parent directory for run artifacts"},
	    {"model.vocab_size", 64, "shared vocabulary size"},
	    {"model.d_m", 64, "model width"},
	    {"model.d_f", 256, "FFN inner width"},
	    {"model.heads", 2, "attention heads (must divide d_m)"},
	    {"model.layers_enc", 2, "encoder layers"},
	    {"model.layers_dec", 2, "decoder layers"},
	    {"model.max_len", 32, "longest input or decoder sequence"},
	    {"gate.variant", "LG", "none | L | L2 | LG | GL | outgate"},
	    {"gate.d_r", 4, "grid rows over the gated matrix fan-in (divides d_f)"},
	    {"gate.d_c", 8, "grid cols over the gated matrix fan-out (divides d_m)"},
	    {"gate.n", 0, "gate width for L and outgate; 0 = full width"},
	    {"gate.encoder", true, "gate encoder FFNs"},
	    {"gate.decoder", true, "gate decoder FFNs"},
	    {"tasks.sizes", json::array({8000, 4000, 2000, 1000, 500}), "train sizes: copy, reverse, sort, parity, modsum"},
	    {"tasks.dev_size", 100, "dev examples per task"},
	    {"tasks.alphabet", 16, "content symbols"},
	    {"tasks.min_len", 2, "shortest content sequence"},
	    {"tasks.max_len", 6, "longest content sequence"},
	    {"tasks.modulus", 10, "modulus of the modular-sum task"},
	    {"train.steps", 5000, "optimizer steps"},
	    {"train.batch_size", 8, "examples per step"},
	    {"train.eval_every", 500, "steps between dev evaluations"},
	    {"train.lr", 1e-3, "Adam learning rate (constant)"},
	    {"train.beta1", 0.9, "Adam beta1"},
	    {"train.beta2", 0.999, "Adam beta2"},
	    {"train.eps", 1e-8, "Adam epsilon"},
	    {"gradcheck.budget", 32, "coordinates probed per parameter block"},
	    {"gradcheck.batch", 2, "examples in the gradcheck loss"},
	    {"sweep.variants", json::array({"L2", "LG", "GL"}), "variants in the lattice (subset of L2, LG, GL)"},
	    {"sweep.d_r", json::array({1, 2, 4, 8}), "d_r axis values"},
	    {"sweep.d_c", json::array({2, 4, 8, 16}), "d_c axis values"},
	    {"sweep.seeds", 1, "seeds per cell"},
	    {"sweep.steps", 200, "train steps per cell"},
	};
	return keys;
}

const ConfigKey& find_key(const std::string& key) {
	for (const auto& k : schema())
		if (k.key == key) return k;
	throw ConfigError("unknown config key '" + key + "'");
}

bool is_unsigned(const json& v) { return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0); }

// Checks `value` against the default's type and returns it normalized.
json typed(const ConfigKey& spec, const json& value) {
	const json& d = spec.default_value;
	auto fail = [&](const std::string& expected) {
		return ConfigError(spec.key + ": expected " + expected + ", got " + value.dump());
	};
	if (d.is_boolean()) {
		if (!value.is_boolean()) throw fail("true or false");
		return value;
	}
	if (d.is_number_integer()) {
		if (!is_unsigned(value)) throw fail("a non-negative integer");
		return value.get<std::uint64_t>();
	}
	if (d.is_number_float()) {
		if (!value.is_number()) throw fail("a number");
		return value.get<double>();
	}
	if (d.is_string()) {
		if (!value.is_string()) throw fail("a string");
		return value;
	}
	if (!value.is_array()) throw fail("a list");
	const bool strings = d.front().is_string();
	json out = json::array();
	for (const auto& e : value) {
		if (strings) {
			if (!e.is_string()) throw fail("a list of strings");
			out.push_back(e);
		} else {
			if (!is_unsigned(e)) throw fail("a list of non-negative integers");
			out.push_back(e.get<std::uint64_t>());
		}
	}
	return out;
}

void flatten(const json& object, const std::string& prefix, json& flat) {
	if (!object.is_object()) throw ConfigError("config must be a JSON object");
	for (const auto& [name, value] : object.items()) {
		const std::string key = prefix.empty() ? name : prefix + "." + name;
		if (value.is_object()) {
			flatten(value, key, flat);
			continue;
		}
		flat[key] = typed(find_key(key), value);
	}
}

json parse_scalar(const ConfigKey& spec, const std::string& text) {
	const json& d = spec.default_value;
	auto fail = [&](const std::string& expected) {
		return ConfigError(spec.key + ": expected " + expected + ", got '" + text + "'");
	};
	if (d.is_boolean()) {
		if (text == "true" || text == "1") return true;
		if (text == "false" || text == "0") return false;
		throw fail("true or false");
	}
	if (d.is_number_integer() || (d.is_array() && d.front().is_number())) {
		std::uint64_t v = 0;
		const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
		if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty()) throw fail("a non-negative integer");
		return v;
	}
	if (d.is_number_float()) {
		char* end = nullptr;
		const double v = std::strtod(text.c_str(), &end);
		if (text.empty() || end != text.c_str() + text.size()) throw fail("a number");
		return v;
	}
	return text;
}

json parse_override_value(const ConfigKey& spec, const std::string& text) {
	if (!spec.default_value.is_array()) return parse_scalar(spec, text);
	if (!text.empty() && text.front() == '[') {
		try {
			return typed(spec, json::parse(text));
		} catch (const json::exception&) {
			throw ConfigError(spec.key + ": malformed list '" + text + "'");
		}
	}
	json out = json::array();
	std::stringstream ss(text);
	std::string item;
	while (std::getline(ss, item, ',')) out.push_back(parse_scalar(spec, item));
	return out;
}

json defaults_flat() {
	json flat = json::object();
	for (const auto& k : schema()) flat[k.key] = k.default_value;
	return flat;
}

GateConfig parse_gate(const json& flat) {
	GateConfig g;
	g.d_r = flat.at("gate.d_r").get<std::size_t>();
	g.d_c = flat.at("gate.d_c").get<std::size_t>();
	g.n = flat.at("gate.n").get<std::size_t>();
	g.encoder = flat.at("gate.encoder").get<bool>();
	g.decoder = flat.at("gate.decoder").get<bool>();
	const auto text = flat.at("gate.variant").get<std::string>();
	std::string lower = text;
	std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
	if (lower == "none") {
		g.kind = GateKind::None;
	} else if (lower == "outgate") {
		g.kind = GateKind::OutGate;
	} else if (auto v = parse_variant(text)) {
		g.kind = GateKind::HyperGrid;
		g.variant = *v;
	} else {
		throw ConfigError("gate.variant: unknown value '" + text + "' (expected none, L, L2, LG, GL, outgate)");
	}
	return g;
}

}  // namespace

std::span<const ConfigKey> config_schema() { return schema(); }

std::string gate_variant_key(const GateConfig& gate) {
	switch (gate.kind) {
		case GateKind::None: return "none";
		case GateKind::OutGate: return "outgate";
		case GateKind::HyperGrid: return std::string(variant_name(gate.variant));
	}
	return "none";
}

json RunConfig::to_flat() const {
	json f = json::object();
	f["seed"] = seed;
	f["out_dir"] = out_dir;
	f["model.vocab_size"] = model.vocab_size;
	f["model.d_m"] = model.d_m;
	f["model.d_f"] = model.d_f;
	f["model.heads"] = model.heads;
	f["model.layers_enc"] = model.layers_enc;
	f["model.layers_dec"] = model.layers_dec;
	f["model.max_len"] = model.max_len;
	f["gate.variant"] = gate_variant_key(model.gate);
	f["gate.d_r"] = model.gate.d_r;
	f["gate.d_c"] = model.gate.d_c;
	f["gate.n"] = model.gate.n;
	f["gate.encoder"] = model.gate.encoder;
	f["gate.decoder"] = model.gate.decoder;
	f["tasks.sizes"] = tasks.train_sizes;
	f["tasks.dev_size"] = tasks.dev_size;
	f["tasks.alphabet"] = tasks.alphabet;
	f["tasks.min_len"] = tasks.min_len;
	f["tasks.max_len"] = tasks.max_len;
	f["tasks.modulus"] = tasks.modulus;
	f["train.steps"] = train.steps;
	f["train.batch_size"] = train.batch_size;
	f["train.eval_every"] = train.eval_every;
	f["train.lr"] = train.optim.lr;
	f["train.beta1"] = train.optim.beta1;
	f["train.beta2"] = train.optim.beta2;
	f["train.eps"] = train.optim.eps;
	f["gradcheck.budget"] = gradcheck.budget;
	f["gradcheck.batch"] = gradcheck.batch;
	json variants = json::array();
	for (auto v : sweep.variants) variants.push_back(std::string(variant_name(v)));
	f["sweep.variants"] = variants;
	f["sweep.d_r"] = sweep.d_r;
	f["sweep.d_c"] = sweep.d_c;
	f["sweep.seeds"] = sweep.seeds;
	f["sweep.steps"] = sweep.steps;
	return f;
}

json RunConfig::to_json() const {
	json nested = json::object();
	const json flat = to_flat();
	for (const auto& [key, value] : flat.items()) {
		std::string pointer = "/" + key;
		std::replace(pointer.begin(), pointer.end(), '.', '/');
		nested[json::json_pointer(pointer)] = value;
	}
	return nested;
}

RunConfig from_flat(const json& flat) {
	for (const auto& [key, value] : flat.items()) typed(find_key(key), value);
	json full = defaults_flat();
	for (const auto& [key, value] : flat.items()) full[key] = value;

	RunConfig c;
	auto u = [&](const char* key) { return full.at(key).get<std::size_t>(); };
	auto d = [&](const char* key) { return full.at(key).get<double>(); };
	c.seed = full.at("seed").get<std::uint64_t>();
	c.out_dir = full.at("out_dir").get<std::string>();
	if (c.out_dir.empty()) throw ConfigError("out_dir must not be empty");

	c.model.vocab_size = u("model.vocab_size");
	c.model.d_m = u("model.d_m");
	c.model.d_f = u("model.d_f");
	c.model.heads = u("model.heads");
	c.model.layers_enc = u("model.layers_enc");
	c.model.layers_dec = u("model.layers_dec");
	c.model.max_len = u("model.max_len");
	c.model.gate = parse_gate(full);
	c.model.validate();

	c.tasks.train_sizes = full.at("tasks.sizes").get<std::vector<std::size_t>>();
	c.tasks.dev_size = u("tasks.dev_size");
	c.tasks.alphabet = u("tasks.alphabet");
	c.tasks.min_len = u("tasks.min_len");
	c.tasks.max_len = u("tasks.max_len");
	c.tasks.modulus = u("tasks.modulus");
	c.tasks.vocab_size = c.model.vocab_size;
	c.tasks.validate();
	if (c.tasks.max_len + 1 > c.model.max_len) {
		throw ConfigError("tasks.max_len=" + std::to_string(c.tasks.max_len) +
		                  " needs model.max_len >= " + std::to_string(c.tasks.max_len + 1));
	}

	c.train.steps = u("train.steps");
	c.train.batch_size = u("train.batch_size");
	c.train.eval_every = u("train.eval_every");
	c.train.optim = {d("train.lr"), d("train.beta1"), d("train.beta2"), d("train.eps")};
	if (c.train.steps == 0) throw ConfigError("train.steps must be >= 1");
	if (c.train.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
	if (c.train.eval_every == 0) throw ConfigError("train.eval_every must be >= 1");
	if (!(c.train.optim.lr > 0.0)) throw ConfigError("train.lr must be > 0");
	if (!(c.train.optim.beta1 >= 0.0 && c.train.optim.beta1 < 1.0)) throw ConfigError("train.beta1 must be in [0, 1)");
	if (!(c.train.optim.beta2 >= 0.0 && c.train.optim.beta2 < 1.0)) throw ConfigError("train.beta2 must be in [0, 1)");
	if (!(c.train.optim.eps > 0.0)) throw ConfigError("train.eps must be > 0");

	c.gradcheck.budget = u("gradcheck.budget");
	c.gradcheck.batch = u("gradcheck.batch");
	if (c.gradcheck.budget == 0) throw ConfigError("gradcheck.budget must be >= 1");
	if (c.gradcheck.batch == 0) throw ConfigError("gradcheck.batch must be >= 1");

	c.sweep.variants.clear();
	for (const auto& v : full.at("sweep.variants")) {
		const auto parsed = parse_variant(v.get<std::string>());
		if (!parsed || *parsed == Variant::L) {
			throw ConfigError("sweep.variants: '" + v.get<std::string>() + "' is not one of L2, LG, GL");
		}
		c.sweep.variants.push_back(*parsed);
	}
	c.sweep.d_r = full.at("sweep.d_r").get<std::vector<std::size_t>>();
	c.sweep.d_c = full.at("sweep.d_c").get<std::vector<std::size_t>>();
	c.sweep.seeds = u("sweep.seeds");
	c.sweep.steps = u("sweep.steps");
	if (c.sweep.variants.empty()) throw ConfigError("sweep.variants must not be empty");
	if (c.sweep.d_r.empty() || c.sweep.d_c.empty()) throw ConfigError("sweep.d_r and sweep.d_c must not be empty");
	if (c.sweep.seeds == 0) throw ConfigError("sweep.seeds must be >= 1");
	if (c.sweep.steps == 0) throw ConfigError("sweep.steps must be >= 1");
	return c;
}

RunConfig apply_json(const RunConfig& config, const json& object) {
	json flat = config.to_flat();
	json incoming = json::object();
	flatten(object, "", incoming);
	for (const auto& [key, value] : incoming.items()) flat[key] = value;
	return from_flat(flat);
}

RunConfig apply_overrides(const RunConfig& config, std::span<const std::string> overrides) {
	json flat = config.to_flat();
	for (const auto& o : overrides) {
		const auto eq = o.find('=');
		if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
		const std::string key = o.substr(0, eq);
		flat[key] = parse_override_value(find_key(key), o.substr(eq + 1));
	}
	return from_flat(flat);
}

RunConfig load_config(const std::filesystem::path* file, std::span<const std::string> overrides) {
	RunConfig config = from_flat(defaults_flat());
	if (file) {
		std::ifstream in(*file);
		if (!in) throw ConfigError("cannot read config file " + file->string());
		json parsed;
		try {
			parsed = json::parse(in);
		} catch (const json::exception& e) {
			throw ConfigError("config file " + file->string() + " is not valid JSON: " + e.what());
		}
		config = apply_json(config, parsed);
	}
	return apply_overrides(config, overrides);
}

std::string describe_schema() {
	std::ostringstream os;
	os << "Config keys (file: nested JSON object; override: --override key=value):\n";
	for (const auto& k : schema()) {
		os << "  " << std::left << std::setw(20) << k.key << " default " << std::setw(26) << k.default_value.dump()
		   << k.help << '\n';
	}
	return os.str();
}

}  // namespace hgrid
