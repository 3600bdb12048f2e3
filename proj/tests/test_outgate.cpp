#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "hypergrid/errors.hpp"
#include "hypergrid/outgate.hpp"
#include "oracles.hpp"

using namespace hgrid;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double std = 1.0) {
	std::size_t n = 1;
	for (auto d : shape) n *= d;
	return Tensor::from_values(std::move(shape), oracle::random_values(n, rng, std));
}

void randomize_all(OutGateLayer& layer, std::mt19937_64& rng) {
	oracle::randomize(std::vector<NamedTensor>{{"W", layer.weight()}, {"b", layer.bias()}, {"U", layer.gate_map()}}, rng);
}

}  // namespace

TEST_CASE("U = 0 halves the relu output exactly") {
	std::mt19937_64 rng(1);
	for (auto mode : {OutGateMode::full(), OutGateMode::blocked(4)}) {
		OutGateLayer layer(mode, 6, 8, rng);
		randomize_all(layer, rng);
		auto u = layer.gate_map().mutable_values();
		std::fill(u.begin(), u.end(), 0.0);
		const auto X = random_tensor({3, 6}, rng);
		const auto Y = oracle::to_mat(forward(layer, X));
		const auto XW = oracle::matmul(oracle::to_mat(X), oracle::to_mat(layer.weight()));
		double worst = 0.0;
		for (std::size_t i = 0; i < 3; ++i)
			for (std::size_t j = 0; j < 8; ++j)
				worst = std::max(worst, std::abs(Y[i][j] - 0.5 * std::max(XW[i][j] + layer.bias().at(j), 0.0)));
		CHECK(worst <= 1e-12);
	}
}

TEST_CASE("non-positive pre-activations give zero output whatever the gate") {
	std::mt19937_64 rng(2);
	OutGateLayer layer(OutGateMode::full(), 4, 6, rng);
	randomize_all(layer, rng);
	auto b = layer.bias().mutable_values();
	std::fill(b.begin(), b.end(), -1e6);
	const auto Y = forward(layer, random_tensor({3, 4}, rng));
	for (double v : Y.values()) CHECK(v == 0.0);
}

TEST_CASE("Blocked(2) with d_f = 4 scales column pairs") {
	std::mt19937_64 rng(3);
	OutGateLayer layer(OutGateMode::blocked(2), 3, 4, rng);
	randomize_all(layer, rng);
	const auto X = random_tensor({2, 3}, rng);
	const auto cond = oracle::to_vec(pool_prefix(X));
	const auto g = outgate_gate(layer, pool_prefix(X));
	REQUIRE(g.numel() == 2);
	const auto Y = forward(layer, X);
	const auto XW = oracle::matmul(oracle::to_mat(X), oracle::to_mat(layer.weight()));
	for (std::size_t i = 0; i < 2; ++i)
		for (std::size_t j = 0; j < 4; ++j)
			CHECK(Y.at(i, j) == doctest::Approx(std::max(XW[i][j] + layer.bias().at(j), 0.0) * g.at(j / 2)).epsilon(1e-13));
	CHECK(oracle::max_abs_diff(oracle::to_mat(Y), oracle::outgate_forward(layer, oracle::to_mat(X), cond)) <= 1e-12);
}

TEST_CASE("matches the naive oracle across widths") {
	std::mt19937_64 rng(4);
	for (std::size_t df : {4, 8, 12})
		for (std::size_t n = 1; n <= df; ++n) {
			if (df % n) continue;
			OutGateLayer layer(n == df ? OutGateMode::full() : OutGateMode::blocked(n), 5, df, rng);
			randomize_all(layer, rng);
			const auto X = random_tensor({4, 5}, rng);
			CHECK(oracle::max_abs_diff(oracle::to_mat(forward(layer, X)),
			                           oracle::outgate_forward(layer, oracle::to_mat(X), oracle::to_vec(pool_prefix(X)))) <=
			      1e-12);
		}
}

TEST_CASE("outputs are never negative") {
	std::mt19937_64 rng(5);
	OutGateLayer layer(OutGateMode::blocked(4), 8, 16, rng);
	for (int trial = 0; trial < 50; ++trial) {
		randomize_all(layer, rng);
		const auto Y = forward(layer, random_tensor({5, 8}, rng));
		for (double v : Y.values()) CHECK(v >= 0.0);
	}
}

TEST_CASE("gate depends only on the first position") {
	std::mt19937_64 rng(6);
	OutGateLayer layer(OutGateMode::full(), 4, 8, rng);
	randomize_all(layer, rng);
	auto X = random_tensor({5, 4}, rng);
	const auto before = oracle::to_vec(outgate_gate(layer, pool_prefix(X)));
	auto vals = X.mutable_values();
	for (std::size_t i = 4; i < vals.size(); ++i) vals[i] = -vals[i] + 3.0;
	CHECK(oracle::to_vec(outgate_gate(layer, pool_prefix(X))) == before);
}

TEST_CASE("width validation and parameter cost") {
	std::mt19937_64 rng(7);
	CHECK_THROWS_AS(OutGateLayer(OutGateMode::blocked(3), 4, 8, rng), ConfigError);
	CHECK_THROWS_AS(OutGateLayer(OutGateMode::blocked(16), 4, 8, rng), ConfigError);
	const OutGateLayer full(OutGateMode::full(), 64, 256, rng);
	CHECK(full.added_parameter_count() == 64 * 256);
	CHECK(outgate_param_cost(OutGateMode::full(), 64, 256) == 64 * 256);
	CHECK(outgate_param_cost(OutGateMode::blocked(16), 64, 256) == 64 * 16);
	const OutGateLayer blocked(OutGateMode::blocked(16), 64, 256, rng);
	CHECK(blocked.gate_map().shape() == Shape{64, 16});
	CHECK(OutGateMode::full().label() == "Full");
	CHECK(OutGateMode::blocked(32).label() == "32");
	CHECK_THROWS_AS(forward(full, Tensor::zeros({2, 8})), ShapeError);
}

TEST_CASE("gate map starts small") {
	std::mt19937_64 rng(8);
	const OutGateLayer layer(OutGateMode::full(), 64, 256, rng);
	double ss = 0.0;
	for (double v : layer.gate_map().values()) ss += v * v;
	const double sd = std::sqrt(ss / static_cast<double>(layer.gate_map().numel()));
	CHECK(sd == doctest::Approx(0.01).epsilon(0.05));
	for (double v : layer.bias().values()) CHECK(v == 0.0);
}

TEST_CASE("gradients match finite differences") {
	std::mt19937_64 rng(9);
	OutGateLayer layer(OutGateMode::blocked(2), 3, 4, rng);
	randomize_all(layer, rng);
	const auto X = random_tensor({3, 3}, rng);
	const auto R = random_tensor({3, 4}, rng);
	std::vector<NamedTensor> params{{"W", layer.weight()}, {"b", layer.bias()}, {"U", layer.gate_map()}};
	backward(sum(mul(forward(layer, X), R)));
	auto loss = [&] {
		const auto Y = oracle::outgate_forward(layer, oracle::to_mat(X), oracle::to_vec(pool_prefix(X)));
		double s = 0.0;
		for (std::size_t i = 0; i < 3; ++i)
			for (std::size_t j = 0; j < 4; ++j) s += Y[i][j] * R.at(i, j);
		return s;
	};
	for (auto& p : params) {
		CAPTURE(p.name);
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
