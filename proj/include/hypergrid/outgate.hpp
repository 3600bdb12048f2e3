#pragma once

// Output-gating baseline: the sigmoid gate multiplies the ReLU outputs of a
// projection instead of its weights, and no residual is added.
//
//   Y = relu(X.W + b) (.) expand(sigmoid(x.U))
//
// Full mode gates every output column; Blocked(n) produces n gate values and
// repeats each across d_f/n consecutive columns.

#include <cstddef>
#include <random>
#include <string>

#include "hypergrid/hypergrid.hpp"
#include "hypergrid/tensor.hpp"

namespace hgrid {

struct OutGateMode {
	std::size_t width = 0;  // 0 = Full

	static OutGateMode full() { return {}; }
	static OutGateMode blocked(std::size_t n) { return {n}; }
	bool is_full() const { return width == 0; }
	std::string label() const;
};

class OutGateLayer {
public:
	/// `cond_width` 0 means the conditioning vector is the pooled input (width d_m).
	OutGateLayer(OutGateMode mode, std::size_t d_m, std::size_t d_f, std::mt19937_64& rng,
	             std::size_t cond_width = 0, double gate_std = 0.01);

	OutGateMode mode() const { return mode_; }
	std::size_t d_m() const { return d_m_; }
	std::size_t d_f() const { return d_f_; }
	std::size_t gate_width() const { return mode_.is_full() ? d_f_ : mode_.width; }
	std::size_t conditioning() const { return cond_width_; }

	Tensor& weight() { return weight_; }
	const Tensor& weight() const { return weight_; }
	Tensor& bias() { return bias_; }
	const Tensor& bias() const { return bias_; }
	Tensor& gate_map() { return gate_map_; }
	const Tensor& gate_map() const { return gate_map_; }

	/// Parameters added on top of W and b: conditioning width * gate width.
	std::size_t added_parameter_count() const { return gate_map_.numel(); }

private:
	OutGateMode mode_;
	std::size_t d_m_;
	std::size_t d_f_;
	std::size_t cond_width_;
	Tensor weight_;
	Tensor bias_;
	Tensor gate_map_;
};

std::size_t outgate_param_cost(OutGateMode mode, std::size_t cond_width, std::size_t d_f);

/// Gate values sigmoid(x.U), length gate_width().
Tensor outgate_gate(const OutGateLayer& layer, const Tensor& cond);

Tensor forward(const OutGateLayer& layer, const Tensor& X);
Tensor forward(const OutGateLayer& layer, const Tensor& X, const Tensor& cond);

}  // namespace hgrid
