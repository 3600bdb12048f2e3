#pragma once

// Grid-wise hypernetwork gating of a projection W (fan_in x fan_out).
//
// A conditioning vector x (the first-token pooling of a sequence) drives two
// factor vectors whose outer product, squashed by a sigmoid, forms a
// grid_rows x grid_cols gate. The gate is block-expanded over W so each
// (fan_in/grid_rows) x (fan_out/grid_cols) region of W shares one gate value:
//
//   L2: grid = sigmoid(outer(x.L_r, x.L_c))
//   LG: grid = sigmoid(outer(x.L_r, G_c))
//   GL: grid = sigmoid(outer(G_r, x.L_c))
//   L : grid = sigmoid(x.L_c) as a 1 x n row (fan-out gating, each value repeated fan_out/n times)
//
// forward() adds the ungated projection back:  y = X.W_gated + X.W + b.

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "hypergrid/tensor.hpp"

namespace hgrid {

enum class Variant { L, L2, LG, GL };

std::string_view variant_name(Variant v);
/// Accepts "L", "L2", "LG", "GL" (case-insensitive).
std::optional<Variant> parse_variant(std::string_view text);

struct ProjectionDims {
	std::size_t fan_in = 0;      // d_m: rows of W
	std::size_t fan_out = 0;     // d_f: cols of W
	std::size_t grid_rows = 1;   // d_r
	std::size_t grid_cols = 1;   // d_c
	std::size_t gate_width = 0;  // n for variant L; 0 means fan_out
	std::size_t cond_width = 0;  // width of the conditioning vector; 0 means fan_in

	/// Standalone geometry where the hypernetwork reads the projection's own input.
	static ProjectionDims make(std::size_t d_m, std::size_t d_f, std::size_t d_r, std::size_t d_c,
	                           std::size_t n = 0);

	std::size_t conditioning() const { return cond_width ? cond_width : fan_in; }
	std::size_t width_n() const { return gate_width ? gate_width : fan_out; }

	/// Throws ConfigError naming the violated divisibility constraint for `variant`.
	void validate(Variant variant) const;
};

/// Rows and cols of the gate grid for a variant (1 x n for L).
std::pair<std::size_t, std::size_t> grid_shape(Variant variant, const ProjectionDims& dims);

/// Hypernetwork parameters added on top of W and b. Equals the allocated count:
/// LG k*d_r + d_c, GL d_r + k*d_c, L2 k*d_r + k*d_c, L k*n, with k the conditioning width.
std::size_t param_cost(Variant variant, const ProjectionDims& dims);

/// The closed-form costs as printed in the source formulas (d_m = fan_in, d_f = fan_out):
/// LG d_m*d_r + d_c, GL d_r + d_f*d_c, L2 d_m*d_r + d_f*d_c, L d_m*n.
std::size_t published_cost(Variant variant, const ProjectionDims& dims);

struct NamedTensor {
	std::string name;
	Tensor tensor;
};

struct GateGrid {
	Tensor grid;  // rows x cols, entries in (0, 1)
	std::size_t row_rep = 1;
	std::size_t col_rep = 1;

	/// psi(grid): fan_in x fan_out, materialized on demand.
	Tensor expanded() const { return block_expand(grid, row_rep, col_rep); }
};

/// First-token pooling: row 0 of X.
Tensor pool_prefix(const Tensor& X);

class HyperGridLayer {
public:
	struct Init {
		double host_std = 0.0;   // 0 means 1/sqrt(fan_in)
		double hyper_std = 0.01;
	};

	HyperGridLayer(Variant variant, ProjectionDims dims, std::mt19937_64& rng, Init init);
	HyperGridLayer(Variant variant, ProjectionDims dims, std::mt19937_64& rng)
	    : HyperGridLayer(variant, dims, rng, Init{}) {}

	Variant variant() const { return variant_; }
	const ProjectionDims& dims() const { return dims_; }

	Tensor& weight() { return weight_; }
	const Tensor& weight() const { return weight_; }
	Tensor& bias() { return bias_; }
	const Tensor& bias() const { return bias_; }

	/// cond_width x d_r (L2, LG)
	const std::optional<Tensor>& row_map() const { return row_map_; }
	/// cond_width x d_c (L2, GL) or cond_width x n (L)
	const std::optional<Tensor>& col_map() const { return col_map_; }
	const std::optional<Tensor>& row_embedding() const { return row_embed_; }
	const std::optional<Tensor>& col_embedding() const { return col_embed_; }

	/// Present hypernetwork parameters, named L_r / L_c / G_r / G_c.
	std::vector<NamedTensor> hyper_parameters() const;
	std::size_t hyper_parameter_count() const;

	/// Zeroes every hypernetwork parameter (gate becomes 0.5 everywhere).
	void zero_hyper_parameters();

	/// Test hook: when set, compute_gate returns this constant instead of the sigmoid grid.
	void force_gate(std::optional<double> value) { forced_gate_ = value; }
	std::optional<double> forced_gate() const { return forced_gate_; }

private:
	Variant variant_;
	ProjectionDims dims_;
	Tensor weight_;
	Tensor bias_;
	std::optional<Tensor> row_map_;
	std::optional<Tensor> col_map_;
	std::optional<Tensor> row_embed_;
	std::optional<Tensor> col_embed_;
	std::optional<double> forced_gate_;
};

/// Gate from a conditioning vector of length dims().conditioning().
GateGrid compute_gate(const HyperGridLayer& layer, const Tensor& cond);

/// X[l x fan_in] -> [l x fan_out], conditioned on pool_prefix(X).
Tensor forward(const HyperGridLayer& layer, const Tensor& X);
/// Same, with an explicit conditioning vector. One gate per sequence, shared by every position.
Tensor forward(const HyperGridLayer& layer, const Tensor& X, const Tensor& cond);
/// Reference path: materializes psi(gate) (.) W and applies it with plain ops.
Tensor forward_dense(const HyperGridLayer& layer, const Tensor& X, const Tensor& cond);

}  // namespace hgrid
