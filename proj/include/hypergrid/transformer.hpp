#pragma once

// Pre-layer-norm encoder-decoder transformer with learned positions. The
// second FFN projection (after the ReLU, d_f -> d_m) can be replaced by a
// HyperGrid layer, or the ReLU layer itself by an OutGate layer. Every gated
// layer has its own hypernetwork parameters and is conditioned on the first
// row of that transformer layer's input.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hypergrid/hypergrid.hpp"
#include "hypergrid/outgate.hpp"
#include "hypergrid/tensor.hpp"

namespace hgrid {

using Token = std::size_t;

enum class GateKind { None, HyperGrid, OutGate };

struct GateConfig {
	GateKind kind = GateKind::None;
	Variant variant = Variant::LG;
	std::size_t d_r = 4;
	std::size_t d_c = 8;
	std::size_t n = 0;  // gate width for L / OutGate blocked; 0 = full width
	bool encoder = true;
	bool decoder = true;

	/// "none", "L", "L2", "LG", "GL", "outgate-full", "outgate-16", ...
	std::string label() const;
	static GateConfig none() { return {}; }
	static GateConfig hypergrid(Variant v, std::size_t d_r, std::size_t d_c, std::size_t n = 0);
	static GateConfig outgate(std::size_t n = 0);
};

struct ModelConfig {
	std::size_t vocab_size = 64;
	std::size_t d_m = 64;
	std::size_t d_f = 256;
	std::size_t heads = 2;
	std::size_t layers_enc = 2;
	std::size_t layers_dec = 2;
	std::size_t max_len = 32;
	GateConfig gate;

	/// Throws ConfigError with the offending field.
	void validate() const;
	/// Geometry of the gated FFN-2 matrix (fan-in d_f, fan-out d_m), conditioned on d_m-wide input.
	ProjectionDims gate_dims() const;
	std::size_t gated_layer_count() const;
	/// Hypernetwork / OutGate parameters per gated layer.
	std::size_t added_per_layer() const;
};

struct Attention {
	Tensor wq, wk, wv, wo;  // d_m x d_m each, no biases
};

struct FeedForward {
	Tensor ln_gain, ln_bias;
	Tensor w1, b1;  // FFN-1 (d_m x d_f); aliases outgate->weight()/bias() when output-gated
	Tensor w2, b2;  // FFN-2 (d_f x d_m); aliases hyper->weight()/bias() when HyperGrid-gated
	std::optional<HyperGridLayer> hyper;
	std::optional<OutGateLayer> outgate;
};

struct TransformerLayer {
	Tensor ln_self_gain, ln_self_bias;
	Attention self_attn;
	Tensor ln_cross_gain, ln_cross_bias;  // decoder only
	std::optional<Attention> cross_attn;
	FeedForward ffn;
};

/// Gate values captured during a forward pass, one entry per transformer layer
/// (undefined tensor for ungated layers). HyperGrid layers record the
/// grid_rows x grid_cols grid; OutGate layers the gate vector.
struct GateTrace {
	std::vector<Tensor> gates;
};

class TransformerModel {
public:
	TransformerModel(ModelConfig config, std::uint64_t seed);

	const ModelConfig& config() const { return config_; }

	/// Every trainable tensor in a stable order, with checkpoint names.
	const std::vector<NamedTensor>& parameters() const { return params_; }
	std::size_t parameter_count() const;
	/// Parameters contributed by gate layers only.
	std::size_t added_parameter_count() const;
	std::size_t base_parameter_count() const { return parameter_count() - added_parameter_count(); }

	/// Encoder layers are 0..layers_enc-1, decoder layers follow.
	std::size_t layer_count() const { return layers_.size(); }
	TransformerLayer& layer(std::size_t index) { return layers_.at(index); }
	const TransformerLayer& layer(std::size_t index) const { return layers_.at(index); }
	bool is_decoder_layer(std::size_t index) const { return index >= config_.layers_enc; }

	const Tensor& token_embedding() const { return tok_embed_; }
	const Tensor& position_embedding() const { return pos_embed_; }
	const Tensor& enc_final_gain() const { return enc_ln_gain_; }
	const Tensor& enc_final_bias() const { return enc_ln_bias_; }
	const Tensor& dec_final_gain() const { return dec_ln_gain_; }
	const Tensor& dec_final_bias() const { return dec_ln_bias_; }
	Tensor& output_projection() { return out_proj_; }
	const Tensor& output_projection() const { return out_proj_; }

	void zero_grad();

private:
	void register_layer(std::size_t index);

	ModelConfig config_;
	Tensor tok_embed_, pos_embed_;
	Tensor enc_ln_gain_, enc_ln_bias_, dec_ln_gain_, dec_ln_bias_;
	Tensor out_proj_;
	std::vector<TransformerLayer> layers_;
	std::vector<NamedTensor> params_;
	std::size_t added_ = 0;
};

Tensor attention(const Attention& attn, const Tensor& queries, const Tensor& keys_values, std::size_t heads,
                 bool causal);

/// Pre-LN FFN with block residual: X + FFN2(FFN1(LN(X))). Gates read `cond`.
Tensor ffn_block(const FeedForward& ffn, const Tensor& X, const Tensor& cond, Tensor* gate_out = nullptr);
/// Conditioned on pool_prefix(X).
Tensor ffn_block(const FeedForward& ffn, const Tensor& X);

/// Contextual encoder states, l x d_m. Token 0 is the task prefix.
Tensor encode(const TransformerModel& model, std::span<const Token> tokens, GateTrace* trace = nullptr);
/// Teacher-forced logits for every decoder position, l x vocab_size (causal).
Tensor decode_logits(const TransformerModel& model, const Tensor& enc_out, std::span<const Token> prefix_ids,
                     GateTrace* trace = nullptr);
/// Next-token logits after `prefix_ids` (starts with the start token), length vocab_size.
Tensor decode_step(const TransformerModel& model, const Tensor& enc_out, std::span<const Token> prefix_ids);

/// Mean cross-entropy of target+[eos] given decoder input [bos]+target.
Tensor sequence_loss(const TransformerModel& model, std::span<const Token> input, std::span<const Token> target,
                     Token bos, Token eos);

/// Greedy argmax decoding (ties go to the lowest id). Stops at eos or after max_steps tokens.
std::vector<Token> greedy_decode(const TransformerModel& model, std::span<const Token> input, Token bos, Token eos,
                                 std::size_t max_steps);

}  // namespace hgrid
