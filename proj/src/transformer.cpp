#include "hypergrid/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hypergrid/errors.hpp"

namespace hgrid {

namespace {

// Gate parameters come from their own stream so the base weights of a gated
// model are identical to those of the ungated model built from the same seed.
constexpr std::uint64_t kGateStreamSalt = 0x9e3779b97f4a7c15ULL;

Tensor normal_param(Shape shape, double stddev, std::mt19937_64& rng) {
	std::size_t n = 1;
	for (auto d : shape) n *= d;
	std::normal_distribution<double> dist(0.0, stddev);
	std::vector<double> values(n);
	for (auto& v : values) v = dist(rng);
	return Tensor::from_values(std::move(shape), std::move(values), true);
}

double inv_sqrt(std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

void copy_values(const Tensor& from, Tensor& to) {
	auto src = from.values();
	auto dst = to.mutable_values();
	std::copy(src.begin(), src.end(), dst.begin());
}

std::vector<std::size_t> positions(std::size_t n) {
	std::vector<std::size_t> p(n);
	std::iota(p.begin(), p.end(), std::size_t{0});
	return p;
}

Tensor embed(const TransformerModel& model, std::span<const Token> tokens) {
	const auto& cfg = model.config();
	if (tokens.empty()) throw ShapeError("sequence is empty");
	if (tokens.size() > cfg.max_len) {
		throw ShapeError("sequence length " + std::to_string(tokens.size()) + " exceeds max_len " +
		                 std::to_string(cfg.max_len));
	}
	for (Token t : tokens) {
		if (t >= cfg.vocab_size) {
			throw ShapeError("unknown token id " + std::to_string(t) + " (vocab_size " + std::to_string(cfg.vocab_size) +
			                 ")");
		}
	}
	const auto pos = positions(tokens.size());
	return add(embedding(model.token_embedding(), tokens), embedding(model.position_embedding(), pos));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) { return layer_norm_rows(x, gain, bias); }

Tensor run_layer(const TransformerLayer& layer, const Tensor& X, const Tensor* enc_out, std::size_t heads, bool causal,
                 GateTrace* trace) {
	const Tensor cond = pool_prefix(X);
	const Tensor normed = layer_norm(X, layer.ln_self_gain, layer.ln_self_bias);
	Tensor h = add(X, attention(layer.self_attn, normed, normed, heads, causal));
	if (layer.cross_attn) {
		const Tensor q = layer_norm(h, layer.ln_cross_gain, layer.ln_cross_bias);
		h = add(h, attention(*layer.cross_attn, q, *enc_out, heads, false));
	}
	Tensor gate;
	Tensor out = ffn_block(layer.ffn, h, cond, &gate);
	if (trace) trace->gates.push_back(gate);
	return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

GateConfig GateConfig::hypergrid(Variant v, std::size_t d_r, std::size_t d_c, std::size_t n) {
	GateConfig g;
	g.kind = GateKind::HyperGrid;
	g.variant = v;
	g.d_r = d_r;
	g.d_c = d_c;
	g.n = n;
	return g;
}

GateConfig GateConfig::outgate(std::size_t n) {
	GateConfig g;
	g.kind = GateKind::OutGate;
	g.n = n;
	return g;
}

std::string GateConfig::label() const {
	switch (kind) {
		case GateKind::None: return "none";
		case GateKind::HyperGrid: return std::string(variant_name(variant));
		case GateKind::OutGate: return "outgate-" + (n == 0 ? std::string("full") : std::to_string(n));
	}
	return "?";
}

void ModelConfig::validate() const {
	auto positive = [](std::size_t v, const char* name) {
		if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
	};
	positive(vocab_size, "vocab_size");
	positive(d_m, "d_m");
	positive(d_f, "d_f");
	positive(heads, "heads");
	positive(layers_enc, "layers_enc");
	positive(max_len, "max_len");
	if (d_m % heads != 0) {
		throw ConfigError("model.heads=" + std::to_string(heads) + " must divide model.d_m=" + std::to_string(d_m));
	}
	if (d_f < d_m) throw ConfigError("model.d_f must be >= model.d_m");
	switch (gate.kind) {
		case GateKind::None: break;
		case GateKind::HyperGrid: {
			const auto dims = gate_dims();
			if (gate.variant == Variant::L) {
				if (dims.width_n() > d_m || d_m % dims.width_n() != 0) {
					throw ConfigError("gate.n=" + std::to_string(gate.n) + " must divide the gated fan-out d_m=" +
					                  std::to_string(d_m));
				}
			} else {
				if (gate.d_r == 0 || gate.d_r > d_f || d_f % gate.d_r != 0) {
					throw ConfigError("gate.d_r=" + std::to_string(gate.d_r) + " must divide the gated fan-in d_f=" +
					                  std::to_string(d_f));
				}
				if (gate.d_c == 0 || gate.d_c > d_m || d_m % gate.d_c != 0) {
					throw ConfigError("gate.d_c=" + std::to_string(gate.d_c) + " must divide the gated fan-out d_m=" +
					                  std::to_string(d_m));
				}
			}
			break;
		}
		case GateKind::OutGate:
			if (gate.n != 0 && (gate.n > d_f || d_f % gate.n != 0)) {
				throw ConfigError("gate.n=" + std::to_string(gate.n) + " must divide the ReLU layer width d_f=" +
				                  std::to_string(d_f));
			}
			break;
	}
}

ProjectionDims ModelConfig::gate_dims() const {
	ProjectionDims dims;
	dims.fan_in = d_f;
	dims.fan_out = d_m;
	dims.grid_rows = gate.d_r;
	dims.grid_cols = gate.d_c;
	dims.gate_width = gate.n;
	dims.cond_width = d_m;
	return dims;
}

std::size_t ModelConfig::gated_layer_count() const {
	if (gate.kind == GateKind::None) return 0;
	return (gate.encoder ? layers_enc : 0) + (gate.decoder ? layers_dec : 0);
}

std::size_t ModelConfig::added_per_layer() const {
	switch (gate.kind) {
		case GateKind::None: return 0;
		case GateKind::HyperGrid: return param_cost(gate.variant, gate_dims());
		case GateKind::OutGate: return outgate_param_cost(OutGateMode{gate.n}, d_m, d_f);
	}
	return 0;
}

// ---------------------------------------------------------------------------
// Model

TransformerModel::TransformerModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
	config_.validate();
	std::mt19937_64 rng(seed);
	std::mt19937_64 gate_rng(seed ^ kGateStreamSalt);
	const std::size_t dm = config_.d_m, df = config_.d_f;

	tok_embed_ = normal_param({config_.vocab_size, dm}, 0.5, rng);
	pos_embed_ = normal_param({config_.max_len, dm}, 0.5, rng);
	params_.push_back({"embed.tokens", tok_embed_});
	params_.push_back({"embed.positions", pos_embed_});

	const std::size_t total_layers = config_.layers_enc + config_.layers_dec;
	for (std::size_t i = 0; i < total_layers; ++i) {
		const bool decoder = i >= config_.layers_enc;
		TransformerLayer L;
		L.ln_self_gain = Tensor::full({dm}, 1.0, true);
		L.ln_self_bias = Tensor::zeros({dm}, true);
		auto make_attention = [&] {
			Attention a;
			a.wq = normal_param({dm, dm}, inv_sqrt(dm), rng);
			a.wk = normal_param({dm, dm}, inv_sqrt(dm), rng);
			a.wv = normal_param({dm, dm}, inv_sqrt(dm), rng);
			a.wo = normal_param({dm, dm}, inv_sqrt(dm), rng);
			return a;
		};
		L.self_attn = make_attention();
		if (decoder) {
			L.ln_cross_gain = Tensor::full({dm}, 1.0, true);
			L.ln_cross_bias = Tensor::zeros({dm}, true);
			L.cross_attn = make_attention();
		}
		auto& ffn = L.ffn;
		ffn.ln_gain = Tensor::full({dm}, 1.0, true);
		ffn.ln_bias = Tensor::zeros({dm}, true);
		ffn.w1 = normal_param({dm, df}, inv_sqrt(dm), rng);
		ffn.b1 = Tensor::zeros({df}, true);
		ffn.w2 = normal_param({df, dm}, inv_sqrt(df), rng);
		ffn.b2 = Tensor::zeros({dm}, true);

		const bool gated = (decoder ? config_.gate.decoder : config_.gate.encoder);
		if (gated && config_.gate.kind == GateKind::HyperGrid) {
			ffn.hyper.emplace(config_.gate.variant, config_.gate_dims(), gate_rng);
			copy_values(ffn.w2, ffn.hyper->weight());
			ffn.w2 = ffn.hyper->weight();
			ffn.b2 = ffn.hyper->bias();
			added_ += ffn.hyper->hyper_parameter_count();
		} else if (gated && config_.gate.kind == GateKind::OutGate) {
			ffn.outgate.emplace(OutGateMode{config_.gate.n}, dm, df, gate_rng);
			copy_values(ffn.w1, ffn.outgate->weight());
			ffn.w1 = ffn.outgate->weight();
			ffn.b1 = ffn.outgate->bias();
			added_ += ffn.outgate->added_parameter_count();
		}
		layers_.push_back(std::move(L));
		register_layer(i);
	}

	enc_ln_gain_ = Tensor::full({dm}, 1.0, true);
	enc_ln_bias_ = Tensor::zeros({dm}, true);
	dec_ln_gain_ = Tensor::full({dm}, 1.0, true);
	dec_ln_bias_ = Tensor::zeros({dm}, true);
	out_proj_ = normal_param({dm, config_.vocab_size}, inv_sqrt(dm), rng);
	params_.push_back({"final.encoder.ln.gain", enc_ln_gain_});
	params_.push_back({"final.encoder.ln.bias", enc_ln_bias_});
	params_.push_back({"final.decoder.ln.gain", dec_ln_gain_});
	params_.push_back({"final.decoder.ln.bias", dec_ln_bias_});
	params_.push_back({"output.projection", out_proj_});
}

void TransformerModel::register_layer(std::size_t i) {
	const auto& L = layers_[i];
	const std::string p = "layer." + std::to_string(i) + ".";
	params_.push_back({p + "self.ln.gain", L.ln_self_gain});
	params_.push_back({p + "self.ln.bias", L.ln_self_bias});
	params_.push_back({p + "self.wq", L.self_attn.wq});
	params_.push_back({p + "self.wk", L.self_attn.wk});
	params_.push_back({p + "self.wv", L.self_attn.wv});
	params_.push_back({p + "self.wo", L.self_attn.wo});
	if (L.cross_attn) {
		params_.push_back({p + "cross.ln.gain", L.ln_cross_gain});
		params_.push_back({p + "cross.ln.bias", L.ln_cross_bias});
		params_.push_back({p + "cross.wq", L.cross_attn->wq});
		params_.push_back({p + "cross.wk", L.cross_attn->wk});
		params_.push_back({p + "cross.wv", L.cross_attn->wv});
		params_.push_back({p + "cross.wo", L.cross_attn->wo});
	}
	params_.push_back({p + "ffn.ln.gain", L.ffn.ln_gain});
	params_.push_back({p + "ffn.ln.bias", L.ffn.ln_bias});
	params_.push_back({p + "ffn.w1", L.ffn.w1});
	params_.push_back({p + "ffn.b1", L.ffn.b1});
	params_.push_back({p + "ffn.w2", L.ffn.w2});
	params_.push_back({p + "ffn.b2", L.ffn.b2});
	if (L.ffn.hyper) {
		for (auto& hp : L.ffn.hyper->hyper_parameters()) {
			params_.push_back({"hypergrid." + std::to_string(i) + "." + hp.name, hp.tensor});
		}
	}
	if (L.ffn.outgate) params_.push_back({"outgate." + std::to_string(i) + ".U", L.ffn.outgate->gate_map()});
}

std::size_t TransformerModel::parameter_count() const {
	std::size_t n = 0;
	for (const auto& p : params_) n += p.tensor.numel();
	return n;
}

std::size_t TransformerModel::added_parameter_count() const { return added_; }

void TransformerModel::zero_grad() {
	for (auto p : params_) p.tensor.zero_grad();
}

// ---------------------------------------------------------------------------
// Forward

Tensor attention(const Attention& attn, const Tensor& queries, const Tensor& keys_values, std::size_t heads,
                 bool causal) {
	const std::size_t dm = queries.dim(1);
	const std::size_t dk = dm / heads;
	const Tensor Q = matmul(queries, attn.wq);
	const Tensor K = matmul(keys_values, attn.wk);
	const Tensor V = matmul(keys_values, attn.wv);
	const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
	std::vector<Tensor> outputs;
	outputs.reserve(heads);
	for (std::size_t h = 0; h < heads; ++h) {
		const Tensor qh = slice_cols(Q, h * dk, dk);
		const Tensor kh = slice_cols(K, h * dk, dk);
		const Tensor vh = slice_cols(V, h * dk, dk);
		const Tensor probs = softmax_rows(scale(matmul(qh, transpose(kh)), inv), causal);
		outputs.push_back(matmul(probs, vh));
	}
	const Tensor merged = heads == 1 ? outputs[0] : concat_cols(outputs);
	return matmul(merged, attn.wo);
}

Tensor ffn_block(const FeedForward& ffn, const Tensor& X, const Tensor& cond, Tensor* gate_out) {
	const std::size_t len = X.dim(0);
	const Tensor Z = layer_norm(X, ffn.ln_gain, ffn.ln_bias);
	Tensor hidden;
	if (ffn.outgate) {
		hidden = forward(*ffn.outgate, Z, cond);
		if (gate_out) *gate_out = outgate_gate(*ffn.outgate, cond);
	} else {
		hidden = relu(add(matmul(Z, ffn.w1), broadcast_rows(ffn.b1, len)));
	}
	Tensor projected;
	if (ffn.hyper) {
		projected = forward(*ffn.hyper, hidden, cond);
		if (gate_out) *gate_out = compute_gate(*ffn.hyper, cond).grid;
	} else {
		projected = add(matmul(hidden, ffn.w2), broadcast_rows(ffn.b2, len));
	}
	return add(X, projected);
}

Tensor ffn_block(const FeedForward& ffn, const Tensor& X) { return ffn_block(ffn, X, pool_prefix(X)); }

Tensor encode(const TransformerModel& model, std::span<const Token> tokens, GateTrace* trace) {
	const auto& cfg = model.config();
	Tensor X = embed(model, tokens);
	for (std::size_t i = 0; i < cfg.layers_enc; ++i) X = run_layer(model.layer(i), X, nullptr, cfg.heads, false, trace);
	return layer_norm(X, model.enc_final_gain(), model.enc_final_bias());
}

Tensor decode_logits(const TransformerModel& model, const Tensor& enc_out, std::span<const Token> prefix_ids,
                     GateTrace* trace) {
	const auto& cfg = model.config();
	if (prefix_ids.empty()) throw ShapeError("decode: prefix must contain at least the start token");
	if (enc_out.rank() != 2 || enc_out.dim(1) != cfg.d_m) {
		throw ShapeError("decode: encoder output " + shape_str(enc_out.shape()) + " does not match d_m");
	}
	Tensor Y = embed(model, prefix_ids);
	for (std::size_t i = cfg.layers_enc; i < model.layer_count(); ++i) {
		Y = run_layer(model.layer(i), Y, &enc_out, cfg.heads, true, trace);
	}
	return matmul(layer_norm(Y, model.dec_final_gain(), model.dec_final_bias()), model.output_projection());
}

Tensor decode_step(const TransformerModel& model, const Tensor& enc_out, std::span<const Token> prefix_ids) {
	const Tensor logits = decode_logits(model, enc_out, prefix_ids);
	return select_row(logits, logits.dim(0) - 1);
}

Tensor sequence_loss(const TransformerModel& model, std::span<const Token> input, std::span<const Token> target,
                     Token bos, Token eos) {
	std::vector<Token> dec_in;
	dec_in.reserve(target.size() + 1);
	dec_in.push_back(bos);
	dec_in.insert(dec_in.end(), target.begin(), target.end());
	std::vector<Token> dec_out(target.begin(), target.end());
	dec_out.push_back(eos);
	const Tensor enc = encode(model, input);
	return cross_entropy(decode_logits(model, enc, dec_in), dec_out);
}

std::vector<Token> greedy_decode(const TransformerModel& model, std::span<const Token> input, Token bos, Token eos,
                                 std::size_t max_steps) {
	NoGradGuard no_grad;
	const Tensor enc = encode(model, input);
	std::vector<Token> prefix{bos};
	const std::size_t limit = std::min(max_steps, model.config().max_len - 1);
	while (prefix.size() <= limit) {
		const Tensor logits = decode_step(model, enc, prefix);
		const auto v = logits.values();
		const Token next = static_cast<Token>(std::max_element(v.begin(), v.end()) - v.begin());
		if (next == eos) break;
		prefix.push_back(next);
	}
	return {prefix.begin() + 1, prefix.end()};
}

}  // namespace hgrid
