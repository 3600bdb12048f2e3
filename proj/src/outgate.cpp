#include "hypergrid/outgate.hpp"

#include <cmath>

#include "hypergrid/errors.hpp"

namespace hgrid {

std::string OutGateMode::label() const { return is_full() ? "Full" : std::to_string(width); }

std::size_t outgate_param_cost(OutGateMode mode, std::size_t cond_width, std::size_t d_f) {
	return cond_width * (mode.is_full() ? d_f : mode.width);
}

OutGateLayer::OutGateLayer(OutGateMode mode, std::size_t d_m, std::size_t d_f, std::mt19937_64& rng,
                           std::size_t cond_width, double gate_std)
    : mode_(mode), d_m_(d_m), d_f_(d_f), cond_width_(cond_width ? cond_width : d_m) {
	if (d_m == 0 || d_f == 0) throw ConfigError("outgate dims must be positive");
	if (!mode.is_full() && (mode.width > d_f || d_f % mode.width != 0)) {
		throw ConfigError("outgate width n=" + std::to_string(mode.width) + " must divide d_f=" + std::to_string(d_f));
	}
	const std::size_t n = gate_width();
	std::normal_distribution<double> host(0.0, 1.0 / std::sqrt(static_cast<double>(d_m)));
	std::vector<double> w(d_m * d_f);
	for (auto& v : w) v = host(rng);
	weight_ = Tensor::from_values({d_m, d_f}, std::move(w), true);
	bias_ = Tensor::zeros({d_f}, true);
	std::normal_distribution<double> hyper(0.0, gate_std);
	std::vector<double> u(cond_width_ * n);
	for (auto& v : u) v = hyper(rng);
	gate_map_ = Tensor::from_values({cond_width_, n}, std::move(u), true);
}

Tensor outgate_gate(const OutGateLayer& layer, const Tensor& cond) {
	if (cond.rank() != 1 || cond.numel() != layer.conditioning()) {
		throw ShapeError("outgate: conditioning vector " + shape_str(cond.shape()) + " does not match width " +
		                 std::to_string(layer.conditioning()));
	}
	const std::size_t n = layer.gate_width();
	return sigmoid(reshape(matmul(reshape(cond, {1, cond.numel()}), layer.gate_map()), {n}));
}

Tensor forward(const OutGateLayer& layer, const Tensor& X) { return forward(layer, X, pool_prefix(X)); }

Tensor forward(const OutGateLayer& layer, const Tensor& X, const Tensor& cond) {
	if (X.rank() != 2 || X.dim(1) != layer.d_m()) {
		throw ShapeError("outgate forward: input " + shape_str(X.shape()) + " does not match d_m " +
		                 std::to_string(layer.d_m()));
	}
	const std::size_t len = X.dim(0);
	const std::size_t n = layer.gate_width();
	const Tensor act = relu(add(matmul(X, layer.weight()), broadcast_rows(layer.bias(), len)));
	const Tensor gate = block_expand(reshape(outgate_gate(layer, cond), {1, n}), len, layer.d_f() / n);
	return mul(act, gate);
}

}  // namespace hgrid
