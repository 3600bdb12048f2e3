#pragma once

// Finite-difference gradient checking. Probes run with grad mode off and only
// read loss values, so the estimate is independent of the backward rules.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hypergrid/hypergrid.hpp"
#include "hypergrid/tasks.hpp"
#include "hypergrid/transformer.hpp"

namespace hgrid {

struct Tolerance {
	double rel = 1e-4;
	double abs = 1e-8;
};

struct CoordinateError {
	std::size_t index = 0;
	double analytic = 0.0;
	double numeric = 0.0;
	double abs_err = 0.0;
	double rel_err = 0.0;
};

struct CheckReport {
	std::string block;
	std::size_t size = 0;     // coordinates in the block
	std::size_t checked = 0;  // coordinates probed
	double max_rel = 0.0;
	double max_abs = 0.0;
	bool pass = true;
	bool vacuous = false;  // empty block, nothing to check
	std::size_t kinks = 0;  // probes that crossed a ReLU kink, replaced by other coordinates
	std::vector<CoordinateError> worst;  // failing coordinates first, worst first
};

/// (f(x+h) - f(x-h)) / 2h. Throws NumericError if either probe is non-finite.
double central_diff(const std::function<double(double)>& f, double x, double step = 1e-5);

/// Derivative of loss_fn with respect to one coordinate of `param`, perturbing it in place
/// and restoring it afterwards. loss_fn runs under NoGradGuard.
double central_diff(const std::function<double()>& loss_fn, Tensor& param, std::size_t coordinate,
                    double step = 1e-5);

/// Both tests must fail for a coordinate to fail.
bool within_tolerance(double analytic, double numeric, const Tolerance& tol);

/// Checks every block against the autodiff gradient of build_loss(). Coordinates are
/// sampled (seeded) per block: half from coordinates with a nonzero analytic
/// gradient, the rest uniformly; blocks no larger than the budget are checked exhaustively.
/// A coordinate whose +-step probes change any ReLU branch relative to the unperturbed point
/// has no valid central difference; it is counted in `kinks` and the next candidate is probed.
std::vector<CheckReport> check_blocks(std::span<const NamedTensor> blocks, const std::function<Tensor()>& build_loss,
                                      std::size_t coordinate_budget, std::uint64_t seed, Tolerance tol = {},
                                      double step = 1e-5);

/// check_blocks over every model parameter with the mean teacher-forced loss on `batch`.
std::vector<CheckReport> check_model(TransformerModel& model, std::span<const Example> batch,
                                     std::size_t coordinate_budget = 32, std::uint64_t seed = 0, Tolerance tol = {});

bool all_pass(std::span<const CheckReport> reports);

/// One row per block; failing blocks list their worst coordinates.
std::string format_reports(std::span<const CheckReport> reports);

}  // namespace hgrid
