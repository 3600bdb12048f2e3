#pragma once

// Dense row-major float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to a graph node. Leaves created with
// requires_grad=true are parameters; every op applied while grad mode is on
// records its inputs and a backward rule. backward() walks the recorded DAG in
// reverse topological order, visiting each node once.
//
// There is no implicit broadcasting. Binary elementwise ops require equal
// shapes; use block_expand / broadcast_rows to materialize a broadcast.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hgrid {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

enum class OpKind {
	Leaf,
	MatMul,
	Add,
	Sub,
	Mul,
	Scale,
	Sigmoid,
	Relu,
	Outer,
	BlockExpand,
	BlockSum,
	Transpose,
	Reshape,
	SelectRow,
	SliceCols,
	ConcatCols,
	SoftmaxRows,
	LayerNorm,
	Embedding,
	CrossEntropy,
	Sum,
	GatedMatMul,
};

std::string_view op_name(OpKind kind);

/// Every op kind that has a backward rule.
std::span<const OpKind> differentiable_ops();

namespace detail {
struct Node;
}

class Tensor {
public:
	Tensor() = default;

	static Tensor zeros(Shape shape, bool requires_grad = false);
	static Tensor full(Shape shape, double value, bool requires_grad = false);
	static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
	static Tensor scalar(double value, bool requires_grad = false);

	bool defined() const { return node_ != nullptr; }
	const Shape& shape() const;
	std::size_t rank() const { return shape().size(); }
	std::size_t numel() const;
	std::size_t dim(std::size_t axis) const;

	std::span<const double> values() const;
	/// In-place access for optimizers and finite-difference probes. Mutating a
	/// tensor that already feeds a recorded graph invalidates that graph.
	std::span<double> mutable_values();
	double item() const;
	double at(std::size_t i) const;
	double at(std::size_t row, std::size_t col) const;

	bool requires_grad() const;
	bool has_grad() const;
	/// Empty span when no gradient has been accumulated.
	std::span<const double> grad() const;
	std::span<double> mutable_grad();
	void zero_grad();

	/// Value copy with no history.
	Tensor detach() const;
	OpKind op() const;
	bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
	explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
	std::shared_ptr<detail::Node> node_;
	friend struct TensorAccess;
};

// Grad mode and debug hooks. All state is thread-local, so independent runs on
// separate threads do not interfere.

bool grad_enabled();

class NoGradGuard {
public:
	NoGradGuard();
	~NoGradGuard();
	NoGradGuard(const NoGradGuard&) = delete;
	NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
	bool previous_;
};

/// While alive, every relu on this thread folds the sign pattern of its input into digest().
/// Two forward passes with equal digests took the same branch at every ReLU.
class ReluPatternProbe {
public:
	ReluPatternProbe();
	~ReluPatternProbe();
	ReluPatternProbe(const ReluPatternProbe&) = delete;
	ReluPatternProbe& operator=(const ReluPatternProbe&) = delete;

	std::uint64_t digest() const { return digest_; }
	void fold(std::span<const double> input);

private:
	std::uint64_t digest_ = 14695981039346656037ull;
	ReluPatternProbe* previous_;
};

/// Number of nodes recorded on this thread's tape (nodes carrying a backward rule).
std::uint64_t tape_nodes_recorded();

/// When on, every op result is scanned and a NumericError names the op that produced NaN/Inf.
void set_finite_check(bool enabled);
bool finite_check_enabled();

namespace testing {
/// Negates the upstream gradient handed to the backward rule of `kind`
/// (a single sign error). std::nullopt clears it.
void inject_backward_fault(std::optional<OpKind> kind);
/// Tape nodes of one kind recorded on this thread so far.
std::uint64_t tape_nodes_recorded(OpKind kind);

class ScopedBackwardFault {
public:
	explicit ScopedBackwardFault(OpKind kind) { inject_backward_fault(kind); }
	~ScopedBackwardFault() { inject_backward_fault(std::nullopt); }
	ScopedBackwardFault(const ScopedBackwardFault&) = delete;
	ScopedBackwardFault& operator=(const ScopedBackwardFault&) = delete;
};
}  // namespace testing

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// u[p] (x) v[q] -> [p x q]
Tensor outer(const Tensor& u, const Tensor& v);

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);

enum class Elementwise { Mul, Add, Sigmoid, Relu };
/// Dispatching form; binary kinds need `b`, unary kinds ignore it.
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor* b = nullptr);

// Structural.
/// Each g[i][j] fills the contiguous block rows [i*row_rep, (i+1)*row_rep),
/// cols [j*col_rep, (j+1)*col_rep). Equivalent to g (x) ones(row_rep x col_rep).
Tensor block_expand(const Tensor& g, std::size_t row_rep, std::size_t col_rep);
/// Adjoint of block_expand: sums every row_rep x col_rep block.
Tensor block_sum(const Tensor& x, std::size_t row_rep, std::size_t col_rep);
/// v[n] -> [rows x n], each row a copy of v.
Tensor broadcast_rows(const Tensor& v, std::size_t rows);
Tensor reshape(const Tensor& a, Shape shape);
/// Row `row` of a matrix as a rank-1 tensor.
Tensor select_row(const Tensor& a, std::size_t row);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t width);
Tensor concat_cols(std::span<const Tensor> parts);

// Reductions and NN primitives.
Tensor sum(const Tensor& a);
/// Row-wise softmax. With `causal`, entry (i, j) for j > i is masked out.
Tensor softmax_rows(const Tensor& a, bool causal);
/// Row-wise layer normalization with per-column gain and bias.
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);
/// Rows of `table` selected by `ids`.
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);
/// Mean over rows of -log softmax(logits[t])[targets[t]].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

/// x[l x din] . ((residual + psi(grid)) (.) w[din x dout]) where psi expands
/// grid[p x q] to din x dout blocks. The expanded gate is never stored; each
/// weight is scaled by its block's gate on the fly.
Tensor gated_matmul(const Tensor& x, const Tensor& w, const Tensor& grid, double residual);

/// Populates gradients of every requires_grad tensor reachable from `loss`.
/// Leaf gradients accumulate across calls until zero_grad().
void backward(const Tensor& loss);

}  // namespace hgrid
