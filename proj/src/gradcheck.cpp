#include "hypergrid/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "hypergrid/errors.hpp"
#include "hypergrid/harness.hpp"

namespace hgrid {

namespace {

constexpr std::size_t kWorstKept = 5;

// Probe order: up to budget/2 coordinates with nonzero analytic gradient, then the rest at random.
// The first `budget` entries are the sample; later ones replace coordinates that land on a kink.
std::vector<std::size_t> sample_coordinates(std::span<const double> grad, std::size_t budget, std::mt19937_64& rng) {
	const std::size_t n = grad.size();
	std::vector<std::size_t> all(n);
	std::iota(all.begin(), all.end(), std::size_t{0});
	if (n <= budget) return all;

	std::vector<std::size_t> active;
	for (std::size_t i = 0; i < n; ++i)
		if (grad[i] != 0.0) active.push_back(i);
	std::shuffle(active.begin(), active.end(), rng);
	std::vector<std::size_t> picked(active.begin(), active.begin() + std::min(active.size(), budget / 2));

	std::vector<char> taken(n, 0);
	for (auto i : picked) taken[i] = 1;
	std::shuffle(all.begin(), all.end(), rng);
	std::vector<std::size_t> spare;
	for (auto i : all) {
		if (taken[i]) continue;
		if (picked.size() < budget) picked.push_back(i);
		else spare.push_back(i);
	}
	std::sort(picked.begin(), picked.end());
	picked.insert(picked.end(), spare.begin(), spare.end());
	return picked;
}

std::uint64_t relu_pattern(const std::function<double()>& loss_value) {
	ReluPatternProbe probe;
	loss_value();
	return probe.digest();
}

}  // namespace

double central_diff(const std::function<double(double)>& f, double x, double step) {
	const double up = f(x + step);
	const double down = f(x - step);
	if (!std::isfinite(up) || !std::isfinite(down)) {
		throw NumericError("central_diff: non-finite loss at a probe point");
	}
	return (up - down) / (2.0 * step);
}

double central_diff(const std::function<double()>& loss_fn, Tensor& param, std::size_t coordinate, double step) {
	if (coordinate >= param.numel()) throw ShapeError("central_diff: coordinate out of range");
	NoGradGuard no_grad;
	auto values = param.mutable_values();
	const double original = values[coordinate];
	struct Restore {
		std::span<double> v;
		std::size_t i;
		double x;
		~Restore() { v[i] = x; }
	} restore{values, coordinate, original};
	return central_diff(
	    [&](double x) {
		    values[coordinate] = x;
		    return loss_fn();
	    },
	    original, step);
}

bool within_tolerance(double analytic, double numeric, const Tolerance& tol) {
	const double abs_err = std::abs(analytic - numeric);
	if (abs_err <= tol.abs) return true;
	const double denom = std::max(std::abs(analytic), std::abs(numeric));
	return denom > 0.0 && abs_err / denom <= tol.rel;
}

std::vector<CheckReport> check_blocks(std::span<const NamedTensor> blocks, const std::function<Tensor()>& build_loss,
                                      std::size_t coordinate_budget, std::uint64_t seed, Tolerance tol, double step) {
	if (coordinate_budget == 0) throw ConfigError("gradcheck.budget must be >= 1");

	for (const auto& b : blocks) {
		Tensor t = b.tensor;
		t.zero_grad();
	}
	backward(build_loss());
	std::vector<std::vector<double>> analytic;
	for (const auto& b : blocks) {
		const auto g = b.tensor.grad();
		std::vector<double> copy(b.tensor.numel(), 0.0);
		std::copy(g.begin(), g.end(), copy.begin());
		analytic.push_back(std::move(copy));
	}

	const std::function<double()> loss_value = [&] { return build_loss().item(); };
	std::uint64_t base_pattern = 0;
	{
		NoGradGuard no_grad;
		base_pattern = relu_pattern(loss_value);
	}
	// a probe whose ReLU branches differ from the base point straddles a kink
	bool crossed = false;
	const std::function<double()> probed_loss = [&] {
		ReluPatternProbe probe;
		const double v = build_loss().item();
		crossed |= probe.digest() != base_pattern;
		return v;
	};
	std::mt19937_64 rng(seed);
	std::vector<CheckReport> reports;
	for (std::size_t k = 0; k < blocks.size(); ++k) {
		CheckReport r;
		r.block = blocks[k].name;
		r.size = blocks[k].tensor.numel();
		if (r.size == 0) {
			r.vacuous = true;
			reports.push_back(r);
			continue;
		}
		Tensor param = blocks[k].tensor;
		std::vector<CoordinateError> errors;
		for (auto i : sample_coordinates(analytic[k], coordinate_budget, rng)) {
			if (r.checked == coordinate_budget) break;
			crossed = false;
			const double numeric = central_diff(probed_loss, param, i, step);
			if (crossed) {
				++r.kinks;
				continue;
			}
			CoordinateError e;
			e.index = i;
			e.analytic = analytic[k][i];
			e.numeric = numeric;
			e.abs_err = std::abs(e.analytic - e.numeric);
			const double denom = std::max(std::abs(e.analytic), std::abs(e.numeric));
			e.rel_err = denom > 0.0 ? e.abs_err / denom : 0.0;
			r.max_abs = std::max(r.max_abs, e.abs_err);
			r.max_rel = std::max(r.max_rel, e.rel_err);
			if (!within_tolerance(e.analytic, e.numeric, tol)) r.pass = false;
			errors.push_back(e);
			++r.checked;
		}
		if (r.checked == 0) r.pass = false;  // every candidate sat on a kink: nothing verified
		std::sort(errors.begin(), errors.end(), [&](const CoordinateError& a, const CoordinateError& b) {
			const bool fa = !within_tolerance(a.analytic, a.numeric, tol);
			const bool fb = !within_tolerance(b.analytic, b.numeric, tol);
			if (fa != fb) return fa;
			return a.abs_err > b.abs_err;
		});
		errors.resize(std::min(errors.size(), kWorstKept));
		r.worst = std::move(errors);
		reports.push_back(std::move(r));
	}
	return reports;
}

std::vector<CheckReport> check_model(TransformerModel& model, std::span<const Example> batch,
                                     std::size_t coordinate_budget, std::uint64_t seed, Tolerance tol) {
	if (batch.empty()) throw ConfigError("gradcheck: empty batch");
	return check_blocks(
	    model.parameters(), [&] { return batch_loss(model, batch); }, coordinate_budget, seed, tol);
}

bool all_pass(std::span<const CheckReport> reports) {
	return std::all_of(reports.begin(), reports.end(), [](const CheckReport& r) { return r.pass; });
}

std::string format_reports(std::span<const CheckReport> reports) {
	std::ostringstream os;
	os << std::left << std::setw(34) << "block" << std::setw(8) << "size" << std::setw(8) << "checked"
	   << std::setw(13) << "max_rel" << std::setw(13) << "max_abs"
	   << "status\n";
	for (const auto& r : reports) {
		os << std::left << std::setw(34) << r.block << std::setw(8) << r.size << std::setw(8) << r.checked
		   << std::scientific << std::setprecision(3) << std::setw(13) << r.max_rel << std::setw(13) << r.max_abs
		   << std::defaultfloat << (r.vacuous ? "pass (vacuous)" : r.pass ? "pass" : "FAIL");
		if (r.kinks) os << " (" << r.kinks << " kink probes replaced)";
		os << '\n';
		if (!r.pass) {
			for (const auto& e : r.worst) {
				os << "    [" << e.index << "] analytic " << std::setprecision(10) << e.analytic << "  numeric "
				   << e.numeric << "  abs " << e.abs_err << "  rel " << e.rel_err << '\n';
			}
		}
	}
	return os.str();
}

}  // namespace hgrid
