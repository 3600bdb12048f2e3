#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "hypergrid/errors.hpp"
#include "hypergrid/hypergrid.hpp"
#include "oracles.hpp"

using namespace hgrid;

namespace {

const Variant kVariants[] = {Variant::L, Variant::L2, Variant::LG, Variant::GL};

std::vector<std::size_t> divisors(std::size_t n) {
	std::vector<std::size_t> out;
	for (std::size_t d = 1; d <= n; ++d)
		if (n % d == 0) out.push_back(d);
	return out;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double std = 1.0) {
	std::size_t n = 1;
	for (auto d : shape) n *= d;
	return Tensor::from_values(std::move(shape), oracle::random_values(n, rng, std));
}

std::vector<NamedTensor> all_params(const HyperGridLayer& layer) {
	auto p = layer.hyper_parameters();
	p.push_back({"W", layer.weight()});
	p.push_back({"b", layer.bias()});
	return p;
}

}  // namespace

TEST_CASE("pool_prefix returns row 0 and routes gradient only there") {
	auto X = Tensor::from_values({3, 2}, {1, 2, 3, 4, 5, 6}, true);
	const auto r = pool_prefix(X);
	CHECK(oracle::to_vec(r) == std::vector<double>{1, 2});
	backward(sum(r));
	CHECK(oracle::to_vec(Tensor::from_values({6}, {X.grad().begin(), X.grad().end()})) ==
	      std::vector<double>{1, 1, 0, 0, 0, 0});
	CHECK(oracle::to_vec(pool_prefix(Tensor::from_values({1, 2}, {7, 8}))) == std::vector<double>{7, 8});
	CHECK_THROWS_AS(pool_prefix(Tensor::zeros({0, 2})), ShapeError);
}

TEST_CASE("variant names round trip") {
	for (auto v : kVariants) CHECK(parse_variant(variant_name(v)) == v);
	CHECK(parse_variant("lg") == Variant::LG);
	CHECK_FALSE(parse_variant("LL").has_value());
}

TEST_CASE("dims validation names the violated constraint") {
	CHECK_NOTHROW(ProjectionDims::make(8, 32, 8, 32).validate(Variant::L2));
	auto expect_msg = [](const ProjectionDims& d, Variant v, const std::string& needle) {
		try {
			d.validate(v);
			FAIL("expected ConfigError");
		} catch (const ConfigError& e) {
			CHECK(std::string(e.what()).find(needle) != std::string::npos);
		}
	};
	expect_msg(ProjectionDims::make(8, 32, 3, 8), Variant::LG, "d_r=3");
	expect_msg(ProjectionDims::make(8, 32, 16, 8), Variant::L2, "d_r=16");
	expect_msg(ProjectionDims::make(8, 32, 4, 5), Variant::GL, "d_c=5");
	expect_msg(ProjectionDims::make(8, 32, 4, 8, 6), Variant::L, "n=6");
	std::mt19937_64 rng(0);
	CHECK_THROWS_AS(HyperGridLayer(Variant::LG, ProjectionDims::make(8, 32, 3, 8), rng), ConfigError);
}

TEST_CASE("each variant allocates exactly its own hypernetwork parameters") {
	std::mt19937_64 rng(1);
	const auto dims = ProjectionDims::make(8, 32, 4, 8, 16);
	auto names = [&](Variant v) {
		std::vector<std::string> out;
		for (const auto& p : HyperGridLayer(v, dims, rng).hyper_parameters()) out.push_back(p.name);
		return out;
	};
	CHECK(names(Variant::L) == std::vector<std::string>{"L_c"});
	CHECK(names(Variant::L2) == std::vector<std::string>{"L_r", "L_c"});
	CHECK(names(Variant::LG) == std::vector<std::string>{"L_r", "G_c"});
	CHECK(names(Variant::GL) == std::vector<std::string>{"L_c", "G_r"});

	const HyperGridLayer l(Variant::L, dims, rng);
	CHECK(l.col_map()->shape() == Shape{8, 16});
}

TEST_CASE("param_cost examples") {
	const auto dims = ProjectionDims::make(8, 32, 4, 8);
	CHECK(param_cost(Variant::LG, dims) == 40);
	CHECK(param_cost(Variant::L2, dims) == 96);
	// L_c reads a d_m-wide vector, so GL allocates d_r + d_m*d_c; the printed formula uses d_f.
	CHECK(param_cost(Variant::GL, dims) == 68);
	CHECK(published_cost(Variant::GL, dims) == 260);
	CHECK(published_cost(Variant::LG, dims) == 40);
	CHECK(published_cost(Variant::L2, dims) == 8 * 4 + 32 * 8);
	CHECK(param_cost(Variant::L, ProjectionDims::make(8, 32, 1, 1, 16)) == 8 * 16);
	CHECK(param_cost(Variant::L, ProjectionDims::make(8, 32, 1, 1)) == 8 * 32);
}

TEST_CASE("allocated count equals param_cost over a lattice of dims") {
	std::mt19937_64 rng(2);
	for (std::size_t dm : {4, 6, 8})
		for (std::size_t df : {4, 8, 12})
			for (auto dr : divisors(dm))
				for (auto dc : divisors(df))
					for (auto v : kVariants) {
						const auto dims = ProjectionDims::make(dm, df, dr, dc, v == Variant::L ? dc : 0);
						const HyperGridLayer layer(v, dims, rng);
						CHECK(layer.hyper_parameter_count() == param_cost(v, dims));
					}
}

TEST_CASE("initialization: maps small, global factors zero, bias zero") {
	std::mt19937_64 rng(3);
	const auto dims = ProjectionDims::make(64, 256, 8, 16);
	const HyperGridLayer lg(Variant::LG, dims, rng);
	for (double v : lg.col_embedding()->values()) CHECK(v == 0.0);
	for (double v : lg.bias().values()) CHECK(v == 0.0);
	double ss = 0.0;
	for (double v : lg.row_map()->values()) ss += v * v;
	const double sd = std::sqrt(ss / static_cast<double>(lg.row_map()->numel()));
	CHECK(sd > 0.007);
	CHECK(sd < 0.013);
	const HyperGridLayer gl(Variant::GL, dims, rng);
	for (double v : gl.row_embedding()->values()) CHECK(v == 0.0);
	CHECK(lg.weight().requires_grad());
	CHECK(lg.row_map()->requires_grad());
}

TEST_CASE("zero hypernetwork parameters give gate 0.5 and output 1.5 XW + b") {
	std::mt19937_64 rng(4);
	for (auto v : kVariants) {
		CAPTURE(variant_name(v));
		HyperGridLayer layer(v, ProjectionDims::make(8, 12, 4, 6, v == Variant::L ? 6 : 0), rng);
		oracle::randomize(std::vector<NamedTensor>{{"b", layer.bias()}}, rng);
		layer.zero_hyper_parameters();
		const auto X = random_tensor({5, 8}, rng);
		const auto gate = compute_gate(layer, pool_prefix(X));
		const auto expanded = gate.expanded();
		for (double g : expanded.values()) CHECK(g == 0.5);
		const auto Y = oracle::to_mat(forward(layer, X));
		const auto XW = oracle::matmul(oracle::to_mat(X), oracle::to_mat(layer.weight()));
		double worst = 0.0;
		for (std::size_t i = 0; i < 5; ++i)
			for (std::size_t j = 0; j < 12; ++j)
				worst = std::max(worst, std::abs(Y[i][j] - (1.5 * XW[i][j] + layer.bias().at(j))));
		CHECK(worst <= 1e-12);
	}
}

TEST_CASE("LG hand examples") {
	std::mt19937_64 rng(5);
	HyperGridLayer layer(Variant::LG, ProjectionDims::make(2, 4, 1, 2), rng);
	auto lr = Tensor(*layer.row_map()).mutable_values();
	std::fill(lr.begin(), lr.end(), 0.0);
	auto gc = Tensor(*layer.col_embedding()).mutable_values();
	gc[0] = 0.0;
	gc[1] = 1.0;
	const auto g = compute_gate(layer, Tensor::from_values({2}, {0.3, -0.7})).grid;
	CHECK(oracle::to_mat(g) == oracle::Mat{{0.5, 0.5}});

	// L_r.x = ln 3, G_c = [0, ln 3]
	lr[0] = std::log(3.0);
	gc[1] = std::log(3.0);
	const auto g2 = compute_gate(layer, Tensor::from_values({2}, {1.0, 0.0})).grid;
	CHECK(g2.at(0, 0) == 0.5);
	CHECK(g2.at(0, 1) == doctest::Approx(oracle::sigmoid(std::log(3.0) * std::log(3.0))).epsilon(1e-15));
}

TEST_CASE("compute_gate rejects a conditioning vector of the wrong width") {
	std::mt19937_64 rng(6);
	const HyperGridLayer layer(Variant::L2, ProjectionDims::make(4, 6, 2, 3), rng);
	CHECK_THROWS_AS(compute_gate(layer, Tensor::zeros({5})), ShapeError);
	CHECK_THROWS_AS(forward(layer, Tensor::zeros({2, 5})), ShapeError);
}

TEST_CASE("L2 4x6 with (2,3) matches the naive entry loop") {
	std::mt19937_64 rng(7);
	HyperGridLayer layer(Variant::L2, ProjectionDims::make(4, 6, 2, 3), rng);
	oracle::randomize(all_params(layer), rng);
	const auto X = random_tensor({3, 4}, rng);
	const auto cond = oracle::to_vec(pool_prefix(X));
	CHECK(oracle::max_abs_diff(oracle::to_mat(forward(layer, X)), oracle::hypergrid_forward(layer, oracle::to_mat(X), cond)) <=
	      1e-12);
}

TEST_CASE("forward equals the naive oracle for every variant and all dims up to 8") {
	std::mt19937_64 rng(8);
	std::size_t cases = 0;
	for (std::size_t dm = 1; dm <= 8; ++dm)
		for (std::size_t df = 1; df <= 8; ++df)
			for (auto v : kVariants) {
				const auto rows = divisors(dm), cols = divisors(df);
				const std::size_t dr = rows[rng() % rows.size()], dc = cols[rng() % cols.size()];
				HyperGridLayer layer(v, ProjectionDims::make(dm, df, dr, dc, v == Variant::L ? dc : 0), rng);
				oracle::randomize(all_params(layer), rng);
				const std::size_t len = 1 + rng() % 4;
				const auto X = random_tensor({len, dm}, rng);
				const auto cond = oracle::to_vec(pool_prefix(X));
				const auto expect = oracle::hypergrid_forward(layer, oracle::to_mat(X), cond);
				CAPTURE(dm);
				CAPTURE(df);
				CAPTURE(variant_name(v));
				CHECK(oracle::max_abs_diff(oracle::to_mat(forward(layer, X)), expect) <= 1e-12);
				CHECK(oracle::max_abs_diff(oracle::to_mat(forward_dense(layer, X, pool_prefix(X))), expect) <= 1e-12);
				++cases;
			}
	CHECK(cases == 256);
}

TEST_CASE("finest grid gates each weight entry separately") {
	std::mt19937_64 rng(9);
	HyperGridLayer layer(Variant::L2, ProjectionDims::make(4, 5, 4, 5), rng);
	oracle::randomize(all_params(layer), rng);
	const auto X = random_tensor({2, 4}, rng);
	const auto gate = compute_gate(layer, pool_prefix(X));
	CHECK(gate.row_rep == 1);
	CHECK(gate.col_rep == 1);
	CHECK(oracle::max_abs_diff(oracle::to_mat(forward(layer, X)),
	                           oracle::hypergrid_forward(layer, oracle::to_mat(X), oracle::to_vec(pool_prefix(X)))) <= 1e-12);
}

TEST_CASE("gate entries stay inside (0, 1)") {
	std::mt19937_64 rng(10);
	for (int trial = 0; trial < 200; ++trial) {
		const auto v = kVariants[trial % 4];
		HyperGridLayer layer(v, ProjectionDims::make(8, 16, 4, 8, v == Variant::L ? 8 : 0), rng);
		// moderate scale: at |logit| > ~37 the double sigmoid rounds to exactly 1
		oracle::randomize(layer.hyper_parameters(), rng, 0.5);
		const auto x = random_tensor({8}, rng);
		const auto grid = compute_gate(layer, x).grid;
		for (double g : grid.values()) {
			CHECK(g > 0.0);
			CHECK(g < 1.0);
			CHECK(1.0 + g > 1.0);
			CHECK(1.0 + g < 2.0);
		}
	}
}

TEST_CASE("expanded gate is constant within every block") {
	std::mt19937_64 rng(11);
	for (auto v : kVariants) {
		for (std::size_t dr : {1, 2, 4, 8})
			for (std::size_t dc : {2, 4, 8, 16}) {
				HyperGridLayer layer(v, ProjectionDims::make(8, 16, dr, dc, v == Variant::L ? dc : 0), rng);
				oracle::randomize(layer.hyper_parameters(), rng);
				const auto gate = compute_gate(layer, random_tensor({8}, rng));
				const auto E = oracle::to_mat(gate.expanded());
				const auto grid = oracle::to_mat(gate.grid);
				CHECK(E == oracle::expand(grid, gate.row_rep, gate.col_rep));
				for (std::size_t i = 0; i < E.size(); ++i)
					for (std::size_t j = 0; j < E[0].size(); ++j) {
						const std::size_t bi = i - i % gate.row_rep, bj = j - j % gate.col_rep;
						CHECK(E[i][j] == E[bi][bj]);
					}
			}
	}
}

TEST_CASE("global factors do not depend on the input") {
	std::mt19937_64 rng(12);
	const auto dims = ProjectionDims::make(8, 16, 4, 8);
	auto logit = [](double g) { return std::log(g / (1.0 - g)); };

	HyperGridLayer gl(Variant::GL, dims, rng);
	oracle::randomize(gl.hyper_parameters(), rng, 0.3);
	HyperGridLayer lg(Variant::LG, dims, rng);
	oracle::randomize(lg.hyper_parameters(), rng, 0.3);

	const auto x1 = random_tensor({8}, rng), x2 = random_tensor({8}, rng);
	// GL: logit[i][j] = G_r[i] * (L_c x)[j], so the column ratio of any two rows is G_r[a]/G_r[b] for every input.
	for (const auto& x : {x1, x2}) {
		const auto g = compute_gate(gl, x).grid;
		const auto& Gr = *gl.row_embedding();
		for (std::size_t j = 0; j < 8; ++j)
			CHECK(logit(g.at(1, j)) * Gr.at(0) == doctest::Approx(logit(g.at(0, j)) * Gr.at(1)).epsilon(1e-9));
	}
	for (const auto& x : {x1, x2}) {
		const auto g = compute_gate(lg, x).grid;
		const auto& Gc = *lg.col_embedding();
		for (std::size_t i = 0; i < 4; ++i)
			CHECK(logit(g.at(i, 1)) * Gc.at(0) == doctest::Approx(logit(g.at(i, 0)) * Gc.at(1)).epsilon(1e-9));
	}
	// with the global factor zeroed the grid is 0.5 whatever the input
	gl.zero_hyper_parameters();
	oracle::randomize(std::vector<NamedTensor>{{"L_c", *gl.col_map()}}, rng);
	CHECK(oracle::to_mat(compute_gate(gl, x1).grid) == oracle::to_mat(compute_gate(gl, x2).grid));
}

TEST_CASE("the gate reads only the first position") {
	std::mt19937_64 rng(13);
	for (auto v : kVariants) {
		HyperGridLayer layer(v, ProjectionDims::make(8, 16, 4, 8, v == Variant::L ? 8 : 0), rng);
		oracle::randomize(layer.hyper_parameters(), rng);
		auto X = random_tensor({6, 8}, rng);
		const auto before = oracle::to_vec(compute_gate(layer, pool_prefix(X)).grid);
		auto vals = X.mutable_values();
		for (std::size_t i = 8; i < vals.size(); ++i) vals[i] += 1.0 + static_cast<double>(i);
		CHECK(oracle::to_vec(compute_gate(layer, pool_prefix(X)).grid) == before);
		vals[0] += 1.0;
		CHECK(oracle::to_vec(compute_gate(layer, pool_prefix(X)).grid) != before);
	}
}

TEST_CASE("all positions share one gate") {
	std::mt19937_64 rng(14);
	HyperGridLayer layer(Variant::L2, ProjectionDims::make(4, 6, 2, 3), rng);
	oracle::randomize(all_params(layer), rng);
	const auto cond = random_tensor({4}, rng);
	const auto X = random_tensor({3, 4}, rng);
	const auto Y = forward(layer, X, cond);
	for (std::size_t i = 0; i < 3; ++i) {
		const auto row = Tensor::from_values({1, 4}, {X.values().begin() + i * 4, X.values().begin() + i * 4 + 4});
		const auto yi = forward(layer, row, cond);
		for (std::size_t j = 0; j < 6; ++j) CHECK(yi.at(0, j) == doctest::Approx(Y.at(i, j)).epsilon(1e-14));
	}
}

TEST_CASE("gradients through forward match finite differences") {
	std::mt19937_64 rng(15);
	for (auto v : kVariants) {
		CAPTURE(variant_name(v));
		HyperGridLayer layer(v, ProjectionDims::make(4, 6, 2, 3, v == Variant::L ? 3 : 0), rng);
		oracle::randomize(all_params(layer), rng, 0.7);
		auto X = Tensor::from_values({3, 4}, oracle::random_values(12, rng), true);
		const auto R = random_tensor({3, 6}, rng);
		auto params = all_params(layer);
		params.push_back({"X", X});
		for (auto& p : params) p.tensor.zero_grad();
		backward(sum(mul(forward(layer, X), R)));
		auto loss = [&] {
			const auto Y = oracle::hypergrid_forward(layer, oracle::to_mat(X), oracle::to_vec(pool_prefix(X)));
			double s = 0.0;
			for (std::size_t i = 0; i < 3; ++i)
				for (std::size_t j = 0; j < 6; ++j) s += Y[i][j] * R.at(i, j);
			return s;
		};
		for (auto& p : params) {
			CAPTURE(p.name);
			REQUIRE(p.tensor.has_grad());
			auto vals = p.tensor.mutable_values();
			for (std::size_t i = 0; i < vals.size(); ++i) {
				const double x0 = vals[i];
				vals[i] = x0 + 1e-5;
				const double up = loss();
				vals[i] = x0 - 1e-5;
				const double down = loss();
				vals[i] = x0;
				CHECK(oracle::close(p.tensor.grad()[i], (up - down) / 2e-5));
			}
		}
	}
}

TEST_CASE("forced gate replaces the sigmoid grid") {
	std::mt19937_64 rng(16);
	HyperGridLayer layer(Variant::LG, ProjectionDims::make(4, 8, 2, 4), rng);
	const auto X = random_tensor({2, 4}, rng);
	layer.force_gate(0.0);
	const auto Y = oracle::to_mat(forward(layer, X));
	const auto XW = oracle::matmul(oracle::to_mat(X), oracle::to_mat(layer.weight()));
	CHECK(oracle::max_abs_diff(Y, XW) <= 1e-12);
	layer.force_gate(std::nullopt);
	CHECK_FALSE(layer.forced_gate().has_value());
}
