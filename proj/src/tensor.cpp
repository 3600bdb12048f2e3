#include "hypergrid/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "hypergrid/errors.hpp"

namespace hgrid {

namespace detail {

struct Node {
	Shape shape;
	std::vector<double> value;
	std::vector<double> grad;
	bool requires_grad = false;
	OpKind kind = OpKind::Leaf;
	std::vector<std::shared_ptr<Node>> inputs;
	// Reads this node's grad and accumulates into inputs that require grad.
	std::function<void(Node&)> backward_fn;
};

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct TensorAccess {
	static const NodePtr& node(const Tensor& t) { return t.node_; }
	static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }
};

namespace {

thread_local bool t_grad_enabled = true;
thread_local bool t_finite_check = false;
thread_local std::uint64_t t_tape_nodes = 0;
thread_local std::optional<OpKind> t_fault;
thread_local ReluPatternProbe* t_relu_probe = nullptr;
thread_local std::array<std::uint64_t, static_cast<std::size_t>(OpKind::GatedMatMul) + 1> t_op_counts{};

std::size_t shape_numel(const Shape& shape) {
	std::size_t n = 1;
	for (auto d : shape) n *= d;
	return n;
}

const NodePtr& node_of(const Tensor& t, std::string_view op) {
	const auto& n = TensorAccess::node(t);
	if (!n) throw ShapeError(std::string(op) + ": undefined tensor");
	return n;
}

void require_rank(const Tensor& t, std::size_t rank, std::string_view op) {
	if (node_of(t, op)->shape.size() != rank) {
		throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
		                 shape_str(t.shape()));
	}
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
	if (node_of(a, op)->shape != node_of(b, op)->shape) {
		throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
		                 shape_str(b.shape()) + " (no implicit broadcasting)");
	}
}

std::vector<double>& grad_of(Node& n) {
	if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
	return n.grad;
}

Tensor make_result(OpKind kind, Shape shape, std::vector<double> value, std::vector<NodePtr> inputs,
                   std::function<void(Node&)> backward_fn) {
	auto node = std::make_shared<Node>();
	node->shape = std::move(shape);
	node->value = std::move(value);
	node->kind = kind;
	if (t_finite_check) {
		for (double v : node->value) {
			if (!std::isfinite(v)) {
				throw NumericError(std::string("non-finite value produced by op ") + std::string(op_name(kind)));
			}
		}
	}
	bool needs = false;
	if (t_grad_enabled) {
		for (const auto& in : inputs) needs = needs || in->requires_grad;
	}
	if (needs) {
		node->requires_grad = true;
		node->inputs = std::move(inputs);
		node->backward_fn = std::move(backward_fn);
		++t_tape_nodes;
		++t_op_counts[static_cast<std::size_t>(kind)];
	}
	return TensorAccess::wrap(std::move(node));
}

// C[m x n] += A[m x k] . B[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
	for (std::size_t i = 0; i < m; ++i) {
		double* crow = c + i * n;
		const double* arow = a + i * k;
		for (std::size_t p = 0; p < k; ++p) {
			const double av = arow[p];
			const double* brow = b + p * n;
			for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
		}
	}
}

// C[m x k] += D[m x n] . B[k x n]^T. B is transposed once so the inner loop
// runs over contiguous memory; each C entry still sums over j in order.
void gemm_nt(const double* d, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
	std::vector<double> bt(n * k);
	for (std::size_t p = 0; p < k; ++p)
		for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
	gemm_nn(d, bt.data(), c, m, n, k);
}

// C[k x n] += A[m x k]^T . D[m x n]
void gemm_tn(const double* a, const double* d, double* c, std::size_t m, std::size_t k, std::size_t n) {
	for (std::size_t i = 0; i < m; ++i) {
		const double* arow = a + i * k;
		const double* drow = d + i * n;
		for (std::size_t p = 0; p < k; ++p) {
			const double av = arow[p];
			double* crow = c + p * n;
			for (std::size_t j = 0; j < n; ++j) crow[j] += av * drow[j];
		}
	}
}

double stable_sigmoid(double x) {
	if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
	const double e = std::exp(x);
	return e / (1.0 + e);
}

}  // namespace

std::string shape_str(const Shape& shape) {
	std::ostringstream os;
	os << '[';
	for (std::size_t i = 0; i < shape.size(); ++i) {
		if (i) os << 'x';
		os << shape[i];
	}
	os << ']';
	return os.str();
}

std::string_view op_name(OpKind kind) {
	switch (kind) {
		case OpKind::Leaf: return "leaf";
		case OpKind::MatMul: return "matmul";
		case OpKind::Add: return "add";
		case OpKind::Sub: return "sub";
		case OpKind::Mul: return "mul";
		case OpKind::Scale: return "scale";
		case OpKind::Sigmoid: return "sigmoid";
		case OpKind::Relu: return "relu";
		case OpKind::Outer: return "outer";
		case OpKind::BlockExpand: return "block_expand";
		case OpKind::BlockSum: return "block_sum";
		case OpKind::Transpose: return "transpose";
		case OpKind::Reshape: return "reshape";
		case OpKind::SelectRow: return "select_row";
		case OpKind::SliceCols: return "slice_cols";
		case OpKind::ConcatCols: return "concat_cols";
		case OpKind::SoftmaxRows: return "softmax_rows";
		case OpKind::LayerNorm: return "layer_norm";
		case OpKind::Embedding: return "embedding";
		case OpKind::CrossEntropy: return "cross_entropy";
		case OpKind::Sum: return "sum";
		case OpKind::GatedMatMul: return "gated_matmul";
	}
	return "unknown";
}

std::span<const OpKind> differentiable_ops() {
	static constexpr std::array kOps{
	    OpKind::MatMul,      OpKind::Add,        OpKind::Sub,         OpKind::Mul,         OpKind::Scale,
	    OpKind::Sigmoid,     OpKind::Relu,       OpKind::Outer,       OpKind::BlockExpand, OpKind::BlockSum,
	    OpKind::Transpose,   OpKind::Reshape,    OpKind::SelectRow,   OpKind::SliceCols,   OpKind::ConcatCols,
	    OpKind::SoftmaxRows, OpKind::LayerNorm,  OpKind::Embedding,   OpKind::CrossEntropy, OpKind::Sum,
	    OpKind::GatedMatMul,
	};
	return kOps;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
	const auto n = shape_numel(shape);
	return from_values(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
	if (shape_numel(shape) != values.size()) {
		throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
		                 " values, got " + std::to_string(values.size()));
	}
	auto node = std::make_shared<Node>();
	node->shape = std::move(shape);
	node->value = std::move(values);
	node->requires_grad = requires_grad;
	return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_values({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_of(*this, "shape")->shape; }
std::size_t Tensor::numel() const { return node_of(*this, "numel")->value.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
	const auto& s = shape();
	if (axis >= s.size()) throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
	return s[axis];
}

std::span<const double> Tensor::values() const { return node_of(*this, "values")->value; }
std::span<double> Tensor::mutable_values() { return node_of(*this, "mutable_values")->value; }

double Tensor::item() const {
	const auto& n = node_of(*this, "item");
	if (n->value.size() != 1) throw ShapeError("item: tensor " + shape_str(n->shape) + " is not a scalar");
	return n->value[0];
}

double Tensor::at(std::size_t i) const {
	const auto& n = node_of(*this, "at");
	if (i >= n->value.size()) throw ShapeError("at: index out of range");
	return n->value[i];
}

double Tensor::at(std::size_t row, std::size_t col) const {
	require_rank(*this, 2, "at");
	const auto& n = TensorAccess::node(*this);
	if (row >= n->shape[0] || col >= n->shape[1]) throw ShapeError("at: index out of range");
	return n->value[row * n->shape[1] + col];
}

bool Tensor::requires_grad() const { return node_of(*this, "requires_grad")->requires_grad; }
bool Tensor::has_grad() const { return !node_of(*this, "has_grad")->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_of(*this, "grad")->grad; }
std::span<double> Tensor::mutable_grad() { return grad_of(*node_of(*this, "mutable_grad")); }

void Tensor::zero_grad() {
	auto& g = node_of(*this, "zero_grad")->grad;
	std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::detach() const {
	const auto& n = node_of(*this, "detach");
	return from_values(n->shape, n->value, false);
}

OpKind Tensor::op() const { return node_of(*this, "op")->kind; }

// ---------------------------------------------------------------------------
// Modes

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

ReluPatternProbe::ReluPatternProbe() : previous_(t_relu_probe) { t_relu_probe = this; }
ReluPatternProbe::~ReluPatternProbe() { t_relu_probe = previous_; }

void ReluPatternProbe::fold(std::span<const double> input) {
	for (double x : input) digest_ = (digest_ ^ (x > 0.0 ? 2u : 1u)) * 1099511628211ull;
	digest_ = (digest_ ^ input.size()) * 1099511628211ull;
}

std::uint64_t tape_nodes_recorded() { return t_tape_nodes; }

void set_finite_check(bool enabled) { t_finite_check = enabled; }
bool finite_check_enabled() { return t_finite_check; }

namespace testing {
void inject_backward_fault(std::optional<OpKind> kind) { t_fault = kind; }
std::uint64_t tape_nodes_recorded(OpKind kind) { return t_op_counts[static_cast<std::size_t>(kind)]; }
}  // namespace testing

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
	require_rank(a, 2, "matmul");
	require_rank(b, 2, "matmul");
	const auto& na = TensorAccess::node(a);
	const auto& nb = TensorAccess::node(b);
	const std::size_t m = na->shape[0], k = na->shape[1], n = nb->shape[1];
	if (nb->shape[0] != k) {
		throw ShapeError("matmul: inner dimensions differ: " + shape_str(na->shape) + " vs " + shape_str(nb->shape));
	}
	std::vector<double> out(m * n, 0.0);
	gemm_nn(na->value.data(), nb->value.data(), out.data(), m, k, n);
	return make_result(OpKind::MatMul, {m, n}, std::move(out), {na, nb}, [m, k, n](Node& self) {
		auto& A = *self.inputs[0];
		auto& B = *self.inputs[1];
		if (A.requires_grad) gemm_nt(self.grad.data(), B.value.data(), grad_of(A).data(), m, n, k);
		if (B.requires_grad) gemm_tn(A.value.data(), self.grad.data(), grad_of(B).data(), m, k, n);
	});
}

Tensor transpose(const Tensor& a) {
	require_rank(a, 2, "transpose");
	const auto& na = TensorAccess::node(a);
	const std::size_t r = na->shape[0], c = na->shape[1];
	std::vector<double> out(r * c);
	for (std::size_t i = 0; i < r; ++i)
		for (std::size_t j = 0; j < c; ++j) out[j * r + i] = na->value[i * c + j];
	return make_result(OpKind::Transpose, {c, r}, std::move(out), {na}, [r, c](Node& self) {
		auto& g = grad_of(*self.inputs[0]);
		for (std::size_t i = 0; i < r; ++i)
			for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
	});
}

Tensor outer(const Tensor& u, const Tensor& v) {
	if (node_of(u, "outer")->shape.size() != 1 || node_of(v, "outer")->shape.size() != 1) {
		throw ShapeError("outer: both inputs must be rank-1, got " + shape_str(u.shape()) + " and " +
		                 shape_str(v.shape()));
	}
	const auto& nu = TensorAccess::node(u);
	const auto& nv = TensorAccess::node(v);
	const std::size_t p = nu->value.size(), q = nv->value.size();
	std::vector<double> out(p * q);
	for (std::size_t i = 0; i < p; ++i)
		for (std::size_t j = 0; j < q; ++j) out[i * q + j] = nu->value[i] * nv->value[j];
	return make_result(OpKind::Outer, {p, q}, std::move(out), {nu, nv}, [p, q](Node& self) {
		auto& U = *self.inputs[0];
		auto& V = *self.inputs[1];
		if (U.requires_grad) {
			auto& gu = grad_of(U);
			for (std::size_t i = 0; i < p; ++i) {
				double acc = 0.0;
				for (std::size_t j = 0; j < q; ++j) acc += self.grad[i * q + j] * V.value[j];
				gu[i] += acc;
			}
		}
		if (V.requires_grad) {
			auto& gv = grad_of(V);
			for (std::size_t i = 0; i < p; ++i)
				for (std::size_t j = 0; j < q; ++j) gv[j] += self.grad[i * q + j] * U.value[i];
		}
	});
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
	require_same_shape(a, b, "add");
	const auto& na = TensorAccess::node(a);
	const auto& nb = TensorAccess::node(b);
	std::vector<double> out(na->value.size());
	for (std::size_t i = 0; i < out.size(); ++i) out[i] = na->value[i] + nb->value[i];
	return make_result(OpKind::Add, na->shape, std::move(out), {na, nb}, [](Node& self) {
		for (auto& in : self.inputs) {
			if (!in->requires_grad) continue;
			auto& g = grad_of(*in);
			for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
		}
	});
}

Tensor sub(const Tensor& a, const Tensor& b) {
	require_same_shape(a, b, "sub");
	const auto& na = TensorAccess::node(a);
	const auto& nb = TensorAccess::node(b);
	std::vector<double> out(na->value.size());
	for (std::size_t i = 0; i < out.size(); ++i) out[i] = na->value[i] - nb->value[i];
	return make_result(OpKind::Sub, na->shape, std::move(out), {na, nb}, [](Node& self) {
		if (self.inputs[0]->requires_grad) {
			auto& g = grad_of(*self.inputs[0]);
			for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
		}
		if (self.inputs[1]->requires_grad) {
			auto& g = grad_of(*self.inputs[1]);
			for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
		}
	});
}

Tensor mul(const Tensor& a, const Tensor& b) {
	require_same_shape(a, b, "mul");
	const auto& na = TensorAccess::node(a);
	const auto& nb = TensorAccess::node(b);
	std::vector<double> out(na->value.size());
	for (std::size_t i = 0; i < out.size(); ++i) out[i] = na->value[i] * nb->value[i];
	return make_result(OpKind::Mul, na->shape, std::move(out), {na, nb}, [](Node& self) {
		auto& A = *self.inputs[0];
		auto& B = *self.inputs[1];
		if (A.requires_grad) {
			auto& g = grad_of(A);
			for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B.value[i];
		}
		if (B.requires_grad) {
			auto& g = grad_of(B);
			for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A.value[i];
		}
	});
}

Tensor scale(const Tensor& a, double factor) {
	const auto& na = node_of(a, "scale");
	std::vector<double> out(na->value.size());
	for (std::size_t i = 0; i < out.size(); ++i) out[i] = na->value[i] * factor;
	return make_result(OpKind::Scale, na->shape, std::move(out), {na}, [factor](Node& self) {
		auto& g = grad_of(*self.inputs[0]);
		for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
	});
}

Tensor sigmoid(const Tensor& a) {
	const auto& na = node_of(a, "sigmoid");
	std::vector<double> out(na->value.size());
	for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(na->value[i]);
	return make_result(OpKind::Sigmoid, na->shape, std::move(out), {na}, [](Node& self) {
		auto& g = grad_of(*self.inputs[0]);
		for (std::size_t i = 0; i < g.size(); ++i) {
			const double s = self.value[i];
			g[i] += self.grad[i] * s * (1.0 - s);
		}
	});
}

Tensor relu(const Tensor& a) {
	const auto& na = node_of(a, "relu");
	if (t_relu_probe) t_relu_probe->fold(na->value);
	std::vector<double> out(na->value.size());
	for (std::size_t i = 0; i < out.size(); ++i) out[i] = na->value[i] > 0.0 ? na->value[i] : 0.0;
	return make_result(OpKind::Relu, na->shape, std::move(out), {na}, [](Node& self) {
		auto& in = *self.inputs[0];
		auto& g = grad_of(in);
		for (std::size_t i = 0; i < g.size(); ++i)
			if (in.value[i] > 0.0) g[i] += self.grad[i];
	});
}

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor* b) {
	const bool binary = kind == Elementwise::Mul || kind == Elementwise::Add;
	if (binary && b == nullptr) throw ShapeError("elementwise: binary op needs a second operand");
	switch (kind) {
		case Elementwise::Mul: return mul(a, *b);
		case Elementwise::Add: return add(a, *b);
		case Elementwise::Sigmoid: return sigmoid(a);
		case Elementwise::Relu: return relu(a);
	}
	throw ShapeError("elementwise: unknown op");
}

// ---------------------------------------------------------------------------
// Structural

Tensor block_expand(const Tensor& g, std::size_t row_rep, std::size_t col_rep) {
	require_rank(g, 2, "block_expand");
	if (row_rep == 0 || col_rep == 0) throw ShapeError("block_expand: repeat counts must be >= 1");
	const auto& ng = TensorAccess::node(g);
	const std::size_t p = ng->shape[0], q = ng->shape[1];
	const std::size_t rows = p * row_rep, cols = q * col_rep;
	std::vector<double> out(rows * cols);
	for (std::size_t r = 0; r < rows; ++r) {
		const double* src = ng->value.data() + (r / row_rep) * q;
		double* dst = out.data() + r * cols;
		for (std::size_t c = 0; c < cols; ++c) dst[c] = src[c / col_rep];
	}
	return make_result(OpKind::BlockExpand, {rows, cols}, std::move(out), {ng},
	                   [q, rows, cols, row_rep, col_rep](Node& self) {
		                   auto& gg = grad_of(*self.inputs[0]);
		                   for (std::size_t r = 0; r < rows; ++r) {
			                   double* dst = gg.data() + (r / row_rep) * q;
			                   const double* src = self.grad.data() + r * cols;
			                   for (std::size_t c = 0; c < cols; ++c) dst[c / col_rep] += src[c];
		                   }
	                   });
}

Tensor block_sum(const Tensor& x, std::size_t row_rep, std::size_t col_rep) {
	require_rank(x, 2, "block_sum");
	if (row_rep == 0 || col_rep == 0) throw ShapeError("block_sum: block sizes must be >= 1");
	const auto& nx = TensorAccess::node(x);
	const std::size_t rows = nx->shape[0], cols = nx->shape[1];
	if (rows % row_rep != 0 || cols % col_rep != 0) {
		throw ShapeError("block_sum: " + shape_str(nx->shape) + " is not divisible into " +
		                 std::to_string(row_rep) + "x" + std::to_string(col_rep) + " blocks");
	}
	const std::size_t p = rows / row_rep, q = cols / col_rep;
	std::vector<double> out(p * q, 0.0);
	for (std::size_t r = 0; r < rows; ++r)
		for (std::size_t c = 0; c < cols; ++c) out[(r / row_rep) * q + c / col_rep] += nx->value[r * cols + c];
	return make_result(OpKind::BlockSum, {p, q}, std::move(out), {nx}, [q, rows, cols, row_rep, col_rep](Node& self) {
		auto& gx = grad_of(*self.inputs[0]);
		for (std::size_t r = 0; r < rows; ++r)
			for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += self.grad[(r / row_rep) * q + c / col_rep];
	});
}

Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
	require_rank(v, 1, "broadcast_rows");
	return block_expand(reshape(v, {1, v.numel()}), rows, 1);
}

Tensor reshape(const Tensor& a, Shape shape) {
	const auto& na = node_of(a, "reshape");
	if (shape_numel(shape) != na->value.size()) {
		throw ShapeError("reshape: cannot view " + shape_str(na->shape) + " as " + shape_str(shape));
	}
	return make_result(OpKind::Reshape, std::move(shape), na->value, {na}, [](Node& self) {
		auto& g = grad_of(*self.inputs[0]);
		for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
	});
}

Tensor select_row(const Tensor& a, std::size_t row) {
	require_rank(a, 2, "select_row");
	const auto& na = TensorAccess::node(a);
	const std::size_t cols = na->shape[1];
	if (row >= na->shape[0]) {
		throw ShapeError("select_row: row " + std::to_string(row) + " out of range for " + shape_str(na->shape));
	}
	std::vector<double> out(na->value.begin() + row * cols, na->value.begin() + (row + 1) * cols);
	return make_result(OpKind::SelectRow, {cols}, std::move(out), {na}, [row, cols](Node& self) {
		auto& g = grad_of(*self.inputs[0]);
		for (std::size_t j = 0; j < cols; ++j) g[row * cols + j] += self.grad[j];
	});
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t width) {
	require_rank(a, 2, "slice_cols");
	const auto& na = TensorAccess::node(a);
	const std::size_t rows = na->shape[0], cols = na->shape[1];
	if (start + width > cols) throw ShapeError("slice_cols: range exceeds " + shape_str(na->shape));
	std::vector<double> out(rows * width);
	for (std::size_t i = 0; i < rows; ++i)
		for (std::size_t j = 0; j < width; ++j) out[i * width + j] = na->value[i * cols + start + j];
	return make_result(OpKind::SliceCols, {rows, width}, std::move(out), {na}, [rows, cols, start, width](Node& self) {
		auto& g = grad_of(*self.inputs[0]);
		for (std::size_t i = 0; i < rows; ++i)
			for (std::size_t j = 0; j < width; ++j) g[i * cols + start + j] += self.grad[i * width + j];
	});
}

Tensor concat_cols(std::span<const Tensor> parts) {
	if (parts.empty()) throw ShapeError("concat_cols: no inputs");
	std::vector<NodePtr> inputs;
	std::vector<std::size_t> widths;
	const std::size_t rows = node_of(parts[0], "concat_cols")->shape.at(0);
	std::size_t total = 0;
	for (const auto& p : parts) {
		require_rank(p, 2, "concat_cols");
		if (p.dim(0) != rows) throw ShapeError("concat_cols: row counts differ");
		inputs.push_back(TensorAccess::node(p));
		widths.push_back(p.dim(1));
		total += p.dim(1);
	}
	std::vector<double> out(rows * total);
	std::size_t offset = 0;
	for (std::size_t k = 0; k < inputs.size(); ++k) {
		for (std::size_t i = 0; i < rows; ++i)
			for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + offset + j] = inputs[k]->value[i * widths[k] + j];
		offset += widths[k];
	}
	return make_result(OpKind::ConcatCols, {rows, total}, std::move(out), std::move(inputs),
	                   [rows, total, widths](Node& self) {
		                   std::size_t off = 0;
		                   for (std::size_t k = 0; k < self.inputs.size(); ++k) {
			                   if (self.inputs[k]->requires_grad) {
				                   auto& g = grad_of(*self.inputs[k]);
				                   for (std::size_t i = 0; i < rows; ++i)
					                   for (std::size_t j = 0; j < widths[k]; ++j)
						                   g[i * widths[k] + j] += self.grad[i * total + off + j];
			                   }
			                   off += widths[k];
		                   }
	                   });
}

// ---------------------------------------------------------------------------
// Reductions and NN primitives

Tensor sum(const Tensor& a) {
	const auto& na = node_of(a, "sum");
	double acc = 0.0;
	for (double v : na->value) acc += v;
	return make_result(OpKind::Sum, {}, {acc}, {na}, [](Node& self) {
		auto& g = grad_of(*self.inputs[0]);
		for (auto& v : g) v += self.grad[0];
	});
}

Tensor softmax_rows(const Tensor& a, bool causal) {
	require_rank(a, 2, "softmax_rows");
	const auto& na = TensorAccess::node(a);
	const std::size_t rows = na->shape[0], cols = na->shape[1];
	std::vector<double> out(rows * cols, 0.0);
	for (std::size_t i = 0; i < rows; ++i) {
		const std::size_t limit = causal ? std::min(cols, i + 1) : cols;
		const double* x = na->value.data() + i * cols;
		double* y = out.data() + i * cols;
		double mx = x[0];
		for (std::size_t j = 1; j < limit; ++j) mx = std::max(mx, x[j]);
		double z = 0.0;
		for (std::size_t j = 0; j < limit; ++j) {
			y[j] = std::exp(x[j] - mx);
			z += y[j];
		}
		for (std::size_t j = 0; j < limit; ++j) y[j] /= z;
	}
	return make_result(OpKind::SoftmaxRows, {rows, cols}, std::move(out), {na}, [rows, cols](Node& self) {
		auto& g = grad_of(*self.inputs[0]);
		for (std::size_t i = 0; i < rows; ++i) {
			const double* y = self.value.data() + i * cols;
			const double* dy = self.grad.data() + i * cols;
			double dot = 0.0;
			for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
			for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += y[j] * (dy[j] - dot);
		}
	});
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
	require_rank(x, 2, "layer_norm");
	require_rank(gain, 1, "layer_norm");
	require_rank(bias, 1, "layer_norm");
	const auto& nx = TensorAccess::node(x);
	const auto& ng = TensorAccess::node(gain);
	const auto& nb = TensorAccess::node(bias);
	const std::size_t rows = nx->shape[0], cols = nx->shape[1];
	if (ng->value.size() != cols || nb->value.size() != cols) {
		throw ShapeError("layer_norm: gain/bias " + shape_str(ng->shape) + "/" + shape_str(nb->shape) +
		                 " do not match rows of width " + std::to_string(cols));
	}
	std::vector<double> out(rows * cols);
	auto normed = std::make_shared<std::vector<double>>(rows * cols);
	auto rstd = std::make_shared<std::vector<double>>(rows);
	for (std::size_t i = 0; i < rows; ++i) {
		const double* xr = nx->value.data() + i * cols;
		double mean = 0.0;
		for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
		mean /= static_cast<double>(cols);
		double var = 0.0;
		for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
		var /= static_cast<double>(cols);
		const double rs = 1.0 / std::sqrt(var + eps);
		(*rstd)[i] = rs;
		for (std::size_t j = 0; j < cols; ++j) {
			const double h = (xr[j] - mean) * rs;
			(*normed)[i * cols + j] = h;
			out[i * cols + j] = h * ng->value[j] + nb->value[j];
		}
	}
	return make_result(OpKind::LayerNorm, {rows, cols}, std::move(out), {nx, ng, nb},
	                   [rows, cols, normed, rstd](Node& self) {
		                   auto& X = *self.inputs[0];
		                   auto& G = *self.inputs[1];
		                   auto& B = *self.inputs[2];
		                   const double n = static_cast<double>(cols);
		                   if (G.requires_grad) {
			                   auto& gg = grad_of(G);
			                   for (std::size_t i = 0; i < rows; ++i)
				                   for (std::size_t j = 0; j < cols; ++j)
					                   gg[j] += self.grad[i * cols + j] * (*normed)[i * cols + j];
		                   }
		                   if (B.requires_grad) {
			                   auto& gb = grad_of(B);
			                   for (std::size_t i = 0; i < rows; ++i)
				                   for (std::size_t j = 0; j < cols; ++j) gb[j] += self.grad[i * cols + j];
		                   }
		                   if (X.requires_grad) {
			                   auto& gx = grad_of(X);
			                   for (std::size_t i = 0; i < rows; ++i) {
				                   double s1 = 0.0, s2 = 0.0;
				                   for (std::size_t j = 0; j < cols; ++j) {
					                   const double dh = self.grad[i * cols + j] * G.value[j];
					                   s1 += dh;
					                   s2 += dh * (*normed)[i * cols + j];
				                   }
				                   for (std::size_t j = 0; j < cols; ++j) {
					                   const double dh = self.grad[i * cols + j] * G.value[j];
					                   gx[i * cols + j] +=
					                       (*rstd)[i] / n * (n * dh - s1 - (*normed)[i * cols + j] * s2);
				                   }
			                   }
		                   }
	                   });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
	require_rank(table, 2, "embedding");
	const auto& nt = TensorAccess::node(table);
	const std::size_t vocab = nt->shape[0], width = nt->shape[1];
	std::vector<double> out(ids.size() * width);
	for (std::size_t t = 0; t < ids.size(); ++t) {
		if (ids[t] >= vocab) {
			throw ShapeError("embedding: unknown token id " + std::to_string(ids[t]) + " (table has " +
			                 std::to_string(vocab) + " rows)");
		}
		std::copy_n(nt->value.begin() + ids[t] * width, width, out.begin() + t * width);
	}
	std::vector<std::size_t> saved(ids.begin(), ids.end());
	return make_result(OpKind::Embedding, {ids.size(), width}, std::move(out), {nt},
	                   [saved = std::move(saved), width](Node& self) {
		                   auto& g = grad_of(*self.inputs[0]);
		                   for (std::size_t t = 0; t < saved.size(); ++t)
			                   for (std::size_t j = 0; j < width; ++j) g[saved[t] * width + j] += self.grad[t * width + j];
	                   });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
	require_rank(logits, 2, "cross_entropy");
	const auto& nl = TensorAccess::node(logits);
	const std::size_t rows = nl->shape[0], cols = nl->shape[1];
	if (targets.size() != rows) {
		throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
		                 shape_str(nl->shape));
	}
	if (rows == 0) throw ShapeError("cross_entropy: empty target sequence");
	auto probs = std::make_shared<std::vector<double>>(rows * cols);
	double total = 0.0;
	for (std::size_t i = 0; i < rows; ++i) {
		if (targets[i] >= cols) throw ShapeError("cross_entropy: target id out of range");
		const double* x = nl->value.data() + i * cols;
		double mx = x[0];
		for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
		double z = 0.0;
		for (std::size_t j = 0; j < cols; ++j) z += std::exp(x[j] - mx);
		const double lse = mx + std::log(z);
		for (std::size_t j = 0; j < cols; ++j) (*probs)[i * cols + j] = std::exp(x[j] - lse);
		total += lse - x[targets[i]];
	}
	std::vector<std::size_t> saved(targets.begin(), targets.end());
	return make_result(OpKind::CrossEntropy, {}, {total / static_cast<double>(rows)}, {nl},
	                   [probs, saved = std::move(saved), rows, cols](Node& self) {
		                   auto& g = grad_of(*self.inputs[0]);
		                   const double up = self.grad[0] / static_cast<double>(rows);
		                   for (std::size_t i = 0; i < rows; ++i) {
			                   for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += up * (*probs)[i * cols + j];
			                   g[i * cols + saved[i]] -= up;
		                   }
	                   });
}

Tensor gated_matmul(const Tensor& x, const Tensor& w, const Tensor& grid, double residual) {
	require_rank(x, 2, "gated_matmul");
	require_rank(w, 2, "gated_matmul");
	require_rank(grid, 2, "gated_matmul");
	const auto& nx = TensorAccess::node(x);
	const auto& nw = TensorAccess::node(w);
	const auto& ng = TensorAccess::node(grid);
	const std::size_t len = nx->shape[0], din = nx->shape[1], dout = nw->shape[1];
	const std::size_t p = ng->shape[0], q = ng->shape[1];
	if (nw->shape[0] != din) {
		throw ShapeError("gated_matmul: inner dimensions differ: " + shape_str(nx->shape) + " vs " +
		                 shape_str(nw->shape));
	}
	if (p == 0 || q == 0 || din % p != 0 || dout % q != 0) {
		throw ShapeError("gated_matmul: grid " + shape_str(ng->shape) + " does not tile weight " +
		                 shape_str(nw->shape));
	}
	const std::size_t rr = din / p, cr = dout / q;
	// Scaled weight (residual + gate) * W, computed entry by entry.
	auto scaled = std::make_shared<std::vector<double>>(din * dout);
	for (std::size_t i = 0; i < din; ++i) {
		const double* gate_row = ng->value.data() + (i / rr) * q;
		const double* wrow = nw->value.data() + i * dout;
		double* srow = scaled->data() + i * dout;
		for (std::size_t b = 0; b < q; ++b) {
			const double m = residual + gate_row[b];
			for (std::size_t j = b * cr; j < (b + 1) * cr; ++j) srow[j] = m * wrow[j];
		}
	}
	std::vector<double> out(len * dout, 0.0);
	gemm_nn(nx->value.data(), scaled->data(), out.data(), len, din, dout);
	return make_result(OpKind::GatedMatMul, {len, dout}, std::move(out), {nx, nw, ng},
	                   [scaled, len, din, dout, q, rr, cr, residual](Node& self) {
		                   auto& X = *self.inputs[0];
		                   auto& W = *self.inputs[1];
		                   auto& Gd = *self.inputs[2];
		                   if (X.requires_grad) gemm_nt(self.grad.data(), scaled->data(), grad_of(X).data(), len, dout, din);
		                   if (!W.requires_grad && !Gd.requires_grad) return;
		                   std::vector<double> xtdy(din * dout, 0.0);
		                   gemm_tn(X.value.data(), self.grad.data(), xtdy.data(), len, din, dout);
		                   double* gw = W.requires_grad ? grad_of(W).data() : nullptr;
		                   double* gg = Gd.requires_grad ? grad_of(Gd).data() : nullptr;
		                   for (std::size_t i = 0; i < din; ++i) {
			                   const std::size_t gi = (i / rr) * q;
			                   const double* drow = xtdy.data() + i * dout;
			                   const double* wrow = W.value.data() + i * dout;
			                   for (std::size_t b = 0; b < q; ++b) {
				                   const std::size_t lo = b * cr, hi = (b + 1) * cr;
				                   if (gw) {
					                   const double m = residual + Gd.value[gi + b];
					                   for (std::size_t j = lo; j < hi; ++j) gw[i * dout + j] += drow[j] * m;
				                   }
				                   if (gg) {
					                   double acc = 0.0;
					                   for (std::size_t j = lo; j < hi; ++j) acc += drow[j] * wrow[j];
					                   gg[gi + b] += acc;
				                   }
			                   }
		                   }
	                   });
}

// ---------------------------------------------------------------------------
// Backward

void backward(const Tensor& loss) {
	const auto& root = node_of(loss, "backward");
	if (root->value.size() != 1) {
		throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(root->shape));
	}
	if (!root->requires_grad) return;

	// Iterative post-order DFS gives a topological order; each node is visited once.
	std::vector<Node*> order;
	std::unordered_set<Node*> seen;
	std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
	seen.insert(root.get());
	while (!stack.empty()) {
		auto& [node, next] = stack.back();
		if (next < node->inputs.size()) {
			Node* child = node->inputs[next++].get();
			if (child->requires_grad && !child->inputs.empty() && seen.insert(child).second) {
				stack.emplace_back(child, 0);
			}
		} else {
			order.push_back(node);
			stack.pop_back();
		}
	}

	for (Node* n : order) n->grad.assign(n->value.size(), 0.0);
	root->grad[0] = 1.0;

	for (auto it = order.rbegin(); it != order.rend(); ++it) {
		Node* n = *it;
		if (!n->backward_fn) continue;
		if (t_fault && *t_fault == n->kind) {
			for (auto& g : n->grad) g = -g;
			n->backward_fn(*n);
			for (auto& g : n->grad) g = -g;
		} else {
			n->backward_fn(*n);
		}
	}
}

}  // namespace hgrid
