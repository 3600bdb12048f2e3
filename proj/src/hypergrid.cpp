#include "hypergrid/hypergrid.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "hypergrid/errors.hpp"

namespace hgrid {

namespace {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
	std::size_t n = 1;
	for (auto d : shape) n *= d;
	std::normal_distribution<double> dist(0.0, stddev);
	std::vector<double> values(n);
	for (auto& v : values) v = dist(rng);
	return Tensor::from_values(std::move(shape), std::move(values), true);
}

void check_axis(std::size_t parts, std::size_t total, const char* part_name, const char* total_name) {
	if (parts == 0 || parts > total || total % parts != 0) {
		throw ConfigError(std::string(part_name) + "=" + std::to_string(parts) + " must divide " + total_name + "=" +
		                  std::to_string(total));
	}
}

// x[k] . M[k x w] -> [w]
Tensor project(const Tensor& x, const Tensor& map) {
	const auto k = x.numel();
	return reshape(matmul(reshape(x, {1, k}), map), {map.dim(1)});
}

}  // namespace

std::string_view variant_name(Variant v) {
	switch (v) {
		case Variant::L: return "L";
		case Variant::L2: return "L2";
		case Variant::LG: return "LG";
		case Variant::GL: return "GL";
	}
	return "?";
}

std::optional<Variant> parse_variant(std::string_view text) {
	std::string up(text);
	std::transform(up.begin(), up.end(), up.begin(), [](unsigned char c) { return std::toupper(c); });
	if (up == "L") return Variant::L;
	if (up == "L2") return Variant::L2;
	if (up == "LG") return Variant::LG;
	if (up == "GL") return Variant::GL;
	return std::nullopt;
}

ProjectionDims ProjectionDims::make(std::size_t d_m, std::size_t d_f, std::size_t d_r, std::size_t d_c,
                                    std::size_t n) {
	ProjectionDims d;
	d.fan_in = d_m;
	d.fan_out = d_f;
	d.grid_rows = d_r;
	d.grid_cols = d_c;
	d.gate_width = n;
	return d;
}

void ProjectionDims::validate(Variant variant) const {
	if (fan_in == 0 || fan_out == 0) throw ConfigError("projection dims must be positive");
	if (variant == Variant::L) {
		check_axis(width_n(), fan_out, "gate width n", "fan-out d_f");
		return;
	}
	check_axis(grid_rows, fan_in, "d_r", "fan-in d_m");
	check_axis(grid_cols, fan_out, "d_c", "fan-out d_f");
}

std::pair<std::size_t, std::size_t> grid_shape(Variant variant, const ProjectionDims& dims) {
	if (variant == Variant::L) return {1, dims.width_n()};
	return {dims.grid_rows, dims.grid_cols};
}

std::size_t param_cost(Variant variant, const ProjectionDims& dims) {
	const std::size_t k = dims.conditioning();
	switch (variant) {
		case Variant::L: return k * dims.width_n();
		case Variant::L2: return k * dims.grid_rows + k * dims.grid_cols;
		case Variant::LG: return k * dims.grid_rows + dims.grid_cols;
		case Variant::GL: return dims.grid_rows + k * dims.grid_cols;
	}
	return 0;
}

std::size_t published_cost(Variant variant, const ProjectionDims& dims) {
	const std::size_t dm = dims.fan_in, df = dims.fan_out, dr = dims.grid_rows, dc = dims.grid_cols;
	switch (variant) {
		case Variant::L: return dm * dims.width_n();
		case Variant::L2: return dm * dr + df * dc;
		case Variant::LG: return dm * dr + dc;
		case Variant::GL: return dr + df * dc;
	}
	return 0;
}

Tensor pool_prefix(const Tensor& X) {
	if (X.rank() != 2) throw ShapeError("pool_prefix: expected a sequence matrix, got " + shape_str(X.shape()));
	if (X.dim(0) == 0) throw ShapeError("pool_prefix: empty sequence");
	return select_row(X, 0);
}

// ---------------------------------------------------------------------------

HyperGridLayer::HyperGridLayer(Variant variant, ProjectionDims dims, std::mt19937_64& rng, Init init)
    : variant_(variant), dims_(dims) {
	dims_.validate(variant_);
	const double host_std = init.host_std > 0.0 ? init.host_std : 1.0 / std::sqrt(static_cast<double>(dims_.fan_in));
	weight_ = normal_tensor({dims_.fan_in, dims_.fan_out}, host_std, rng);
	bias_ = Tensor::zeros({dims_.fan_out}, true);
	const std::size_t k = dims_.conditioning();
	switch (variant_) {
		case Variant::L:
			col_map_ = normal_tensor({k, dims_.width_n()}, init.hyper_std, rng);
			break;
		case Variant::L2:
			row_map_ = normal_tensor({k, dims_.grid_rows}, init.hyper_std, rng);
			col_map_ = normal_tensor({k, dims_.grid_cols}, init.hyper_std, rng);
			break;
		case Variant::LG:
			row_map_ = normal_tensor({k, dims_.grid_rows}, init.hyper_std, rng);
			col_embed_ = Tensor::zeros({dims_.grid_cols}, true);
			break;
		case Variant::GL:
			row_embed_ = Tensor::zeros({dims_.grid_rows}, true);
			col_map_ = normal_tensor({k, dims_.grid_cols}, init.hyper_std, rng);
			break;
	}
}

std::vector<NamedTensor> HyperGridLayer::hyper_parameters() const {
	std::vector<NamedTensor> out;
	if (row_map_) out.push_back({"L_r", *row_map_});
	if (col_map_) out.push_back({"L_c", *col_map_});
	if (row_embed_) out.push_back({"G_r", *row_embed_});
	if (col_embed_) out.push_back({"G_c", *col_embed_});
	return out;
}

std::size_t HyperGridLayer::hyper_parameter_count() const {
	std::size_t n = 0;
	for (const auto& p : hyper_parameters()) n += p.tensor.numel();
	return n;
}

void HyperGridLayer::zero_hyper_parameters() {
	for (auto& p : hyper_parameters()) {
		auto values = p.tensor.mutable_values();
		std::fill(values.begin(), values.end(), 0.0);
	}
}

GateGrid compute_gate(const HyperGridLayer& layer, const Tensor& cond) {
	const auto& dims = layer.dims();
	if (cond.rank() != 1 || cond.numel() != dims.conditioning()) {
		throw ShapeError("compute_gate: conditioning vector " + shape_str(cond.shape()) + " does not match width " +
		                 std::to_string(dims.conditioning()));
	}
	const auto [rows, cols] = grid_shape(layer.variant(), dims);
	GateGrid gate;
	gate.row_rep = dims.fan_in / rows;
	gate.col_rep = dims.fan_out / cols;
	if (layer.forced_gate()) {
		gate.grid = Tensor::full({rows, cols}, *layer.forced_gate());
		return gate;
	}
	Tensor logits;
	switch (layer.variant()) {
		case Variant::L:
			logits = reshape(project(cond, *layer.col_map()), {1, cols});
			break;
		case Variant::L2:
			logits = outer(project(cond, *layer.row_map()), project(cond, *layer.col_map()));
			break;
		case Variant::LG:
			logits = outer(project(cond, *layer.row_map()), *layer.col_embedding());
			break;
		case Variant::GL:
			logits = outer(*layer.row_embedding(), project(cond, *layer.col_map()));
			break;
	}
	gate.grid = sigmoid(logits);
	return gate;
}

Tensor forward(const HyperGridLayer& layer, const Tensor& X) { return forward(layer, X, pool_prefix(X)); }

Tensor forward(const HyperGridLayer& layer, const Tensor& X, const Tensor& cond) {
	if (X.rank() != 2 || X.dim(1) != layer.dims().fan_in) {
		throw ShapeError("hypergrid forward: input " + shape_str(X.shape()) + " does not match fan-in " +
		                 std::to_string(layer.dims().fan_in));
	}
	const GateGrid gate = compute_gate(layer, cond);
	const Tensor projected = gated_matmul(X, layer.weight(), gate.grid, 1.0);
	return add(projected, broadcast_rows(layer.bias(), X.dim(0)));
}

Tensor forward_dense(const HyperGridLayer& layer, const Tensor& X, const Tensor& cond) {
	const GateGrid gate = compute_gate(layer, cond);
	const Tensor gated_weight = mul(gate.expanded(), layer.weight());
	const Tensor hyper = matmul(X, gated_weight);
	const Tensor plain = matmul(X, layer.weight());
	return add(add(hyper, plain), broadcast_rows(layer.bias(), X.dim(0)));
}

}  // namespace hgrid
