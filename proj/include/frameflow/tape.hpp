#pragma once

// Reverse-mode automatic differentiation on an eagerly evaluated tape.
//
// Every operation appends a node (topological by construction) and computes its
// value immediately into a flat arena. Two backward sweeps are provided:
//
//   * backward_accumulate — numeric adjoint sweep into a parallel arena; cheap,
//     used by the optimizer once per sample.
//   * grad_graph — emits the adjoint computation as *new tape nodes*, so the
//     result is differentiable again. Inner derivatives (vector-Jacobian
//     products, rows of a Jacobian) built this way can sit inside a loss and
//     still receive correct second-order gradients from the outer sweep.
//
// Tapes are single-threaded values; run one per worker and reset between
// samples (reset_to_mark keeps parameter leaves alive across a batch).

#include <cstring>
#include <span>
#include <vector>

#include "common.hpp"
#include "jacobi.hpp"
#include "tensor.hpp"

namespace frameflow {

enum class Op : uint8_t {
    Leaf, Const,
    Add, Sub, Mul, Div, Neg,
    AddC, MulC, MaxC,          // tensor op scalar-constant (c0)
    Scale,                     // scalar-var * tensor-var
    Bcast,                     // scalar-var broadcast to rows x cols
    MatVec, MatTVec, MatMul,   // MatMul transpose flags in `flags` bits 0/1
    Outer, Transpose,
    Dot, Sum,
    Tanh, Sigmoid, Softplus, Exp, Relu, Step, Sqrt, Square,
    Concat2,
    Slice, SliceEmbed,         // contiguous range of the flattened storage
    Col, ColEmbed,             // strided column extract / scatter for matrices
    SymEigVals, SymEigVecs,    // symmetric eigendecomposition (values / vectors)
};

class Tape;

struct Var {
    Tape* tape = nullptr;
    int32_t id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    inline int rows() const;
    inline int cols() const;
    inline int size() const;
    inline const double* vals() const;
    inline double scalar() const;
    inline Tensor value() const;
};

class Tape {
    struct Node {
        int64_t val = 0;   // offset into values_/adjoints_
        int64_t aux = -1;  // offset into aux_ (eigendecomposition scratch)
        double c0 = 0.0;
        int32_t a = -1, b = -1;
        int32_t rows = 0, cols = 0;
        int32_t i0 = 0;
        Op op = Op::Leaf;
        uint8_t flags = 0;
        bool grad = false; // whether gradient flows through this node
    };

public:
    explicit Tape(size_t node_capacity = 8192, size_t value_capacity = 1 << 18) {
        nodes_.reserve(node_capacity);
        values_.reserve(value_capacity);
        adjoints_.reserve(value_capacity);
    }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- introspection ------------------------------------------------------

    size_t node_count() const { return nodes_.size(); }
    int rows(Var v) const { return nodes_[v.id].rows; }
    int cols(Var v) const { return nodes_[v.id].cols; }
    int size(Var v) const { return nodes_[v.id].rows * nodes_[v.id].cols; }
    const double* vals(Var v) const { return values_.data() + nodes_[v.id].val; }
    double* vals_mut(Var v) { return values_.data() + nodes_[v.id].val; }

    double scalar(Var v) const {
        require(size(v) == 1, "scalar() on a non-scalar node");
        return vals(v)[0];
    }

    Tensor value(Var v) const { return Tensor::from(rows(v), cols(v), vals(v)); }

    void check_finite(Var v, const char* what) const { require_all_finite(vals(v), size(v), what); }

    // ---- leaves and constants ----------------------------------------------

    Var leaf(const Tensor& t) { return make_input(t.rows(), t.cols(), t.data(), /*grad=*/true); }
    Var leaf(int rows, int cols, const double* src) { return make_input(rows, cols, src, true); }
    Var constant(const Tensor& t) { return make_input(t.rows(), t.cols(), t.data(), false); }
    Var constant_scalar(double v) { return make_input(1, 1, &v, false); }

    // Overwrite a leaf's payload in place (parameter refresh between steps).
    void set_values(Var v, const double* src) {
        std::memcpy(vals_mut(v), src, sizeof(double) * static_cast<size_t>(size(v)));
    }

    // ---- mark/reset ----------------------------------------------------------

    struct Mark {
        size_t nodes, values, aux;
    };

    Mark mark() const { return {nodes_.size(), values_.size(), aux_.size()}; }

    void reset_to_mark(const Mark& m) {
        nodes_.resize(m.nodes);
        values_.resize(m.values);
        if (adjoints_.size() > m.values) adjoints_.resize(m.values);
        aux_.resize(m.aux);
    }

    void clear() { reset_to_mark({0, 0, 0}); }

    // ---- elementwise arithmetic ----------------------------------------------

    Var add(Var a, Var b) {
        same_shape(a, b, "add");
        Var y = alloc_like(Op::Add, a, b, nodes_[a.id].rows, nodes_[a.id].cols);
        binary_loop(y, a, b, [](double x, double z) { return x + z; });
        return y;
    }

    Var sub(Var a, Var b) {
        same_shape(a, b, "sub");
        Var y = alloc_like(Op::Sub, a, b, nodes_[a.id].rows, nodes_[a.id].cols);
        binary_loop(y, a, b, [](double x, double z) { return x - z; });
        return y;
    }

    Var mul(Var a, Var b) {
        same_shape(a, b, "mul");
        Var y = alloc_like(Op::Mul, a, b, nodes_[a.id].rows, nodes_[a.id].cols);
        binary_loop(y, a, b, [](double x, double z) { return x * z; });
        return y;
    }

    Var div(Var a, Var b) {
        same_shape(a, b, "div");
        Var y = alloc_like(Op::Div, a, b, nodes_[a.id].rows, nodes_[a.id].cols);
        binary_loop(y, a, b, [](double x, double z) { return x / z; });
        return y;
    }

    Var neg(Var a) {
        Var y = alloc_like(Op::Neg, a, noinput(), nodes_[a.id].rows, nodes_[a.id].cols);
        unary_loop(y, a, [](double x) { return -x; });
        return y;
    }

    Var add_c(Var a, double c) {
        Var y = alloc_like(Op::AddC, a, noinput(), nodes_[a.id].rows, nodes_[a.id].cols, c);
        unary_loop(y, a, [c](double x) { return x + c; });
        return y;
    }

    Var mul_c(Var a, double c) {
        Var y = alloc_like(Op::MulC, a, noinput(), nodes_[a.id].rows, nodes_[a.id].cols, c);
        unary_loop(y, a, [c](double x) { return x * c; });
        return y;
    }

    Var max_c(Var a, double c) {
        Var y = alloc_like(Op::MaxC, a, noinput(), nodes_[a.id].rows, nodes_[a.id].cols, c);
        unary_loop(y, a, [c](double x) { return x > c ? x : c; });
        return y;
    }

    Var scale(Var s, Var x) {
        require(size(s) == 1, "scale: first argument must be scalar");
        Var y = alloc_like(Op::Scale, s, x, nodes_[x.id].rows, nodes_[x.id].cols);
        double sv = scalar(s);
        const double* xv = vals(x);
        double* yv = vals_mut(y);
        for (int i = 0; i < size(x); ++i) yv[i] = sv * xv[i];
        return y;
    }

    Var bcast(Var s, int rows, int cols) {
        require(size(s) == 1, "bcast: argument must be scalar");
        Var y = alloc_like(Op::Bcast, s, noinput(), rows, cols);
        double sv = scalar(s);
        double* yv = vals_mut(y);
        for (int i = 0; i < rows * cols; ++i) yv[i] = sv;
        return y;
    }

    // ---- linear algebra -------------------------------------------------------

    Var matvec(Var w, Var x) {
        require(cols(x) == 1 && cols(w) == rows(x), "matvec: shape mismatch");
        Var y = alloc_like(Op::MatVec, w, x, rows(w), 1);
        const double* wv = vals(w);
        const double* xv = vals(x);
        double* yv = vals_mut(y);
        int r = rows(w), c = cols(w);
        for (int i = 0; i < r; ++i) {
            double s = 0.0;
            const double* wr = wv + static_cast<size_t>(i) * c;
            for (int j = 0; j < c; ++j) s += wr[j] * xv[j];
            yv[i] = s;
        }
        return y;
    }

    Var mat_t_vec(Var w, Var u) {
        require(cols(u) == 1 && rows(w) == rows(u), "mat_t_vec: shape mismatch");
        Var y = alloc_like(Op::MatTVec, w, u, cols(w), 1);
        const double* wv = vals(w);
        const double* uv = vals(u);
        double* yv = vals_mut(y);
        int r = rows(w), c = cols(w);
        for (int j = 0; j < c; ++j) yv[j] = 0.0;
        for (int i = 0; i < r; ++i) {
            const double* wr = wv + static_cast<size_t>(i) * c;
            for (int j = 0; j < c; ++j) yv[j] += wr[j] * uv[i];
        }
        return y;
    }

    Var matmul(Var a, Var b, bool ta = false, bool tb = false) {
        int ar = ta ? cols(a) : rows(a), ac = ta ? rows(a) : cols(a);
        int br = tb ? cols(b) : rows(b), bc = tb ? rows(b) : cols(b);
        require(ac == br, "matmul: inner dimension mismatch");
        Var y = alloc_like(Op::MatMul, a, b, ar, bc);
        nodes_[y.id].flags = static_cast<uint8_t>((ta ? 1 : 0) | (tb ? 2 : 0));
        matmul_values(y);
        return y;
    }

    Var outer(Var u, Var v) {
        require(cols(u) == 1 && cols(v) == 1, "outer: expects vectors");
        Var y = alloc_like(Op::Outer, u, v, rows(u), rows(v));
        const double* uv = vals(u);
        const double* vv = vals(v);
        double* yv = vals_mut(y);
        for (int i = 0; i < rows(u); ++i)
            for (int j = 0; j < rows(v); ++j) yv[static_cast<size_t>(i) * rows(v) + j] = uv[i] * vv[j];
        return y;
    }

    Var transpose(Var a) {
        Var y = alloc_like(Op::Transpose, a, noinput(), cols(a), rows(a));
        const double* av = vals(a);
        double* yv = vals_mut(y);
        int r = rows(a), c = cols(a);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) yv[static_cast<size_t>(j) * r + i] = av[static_cast<size_t>(i) * c + j];
        return y;
    }

    // Flattened inner product; on matrices this is the Frobenius pairing.
    Var dot(Var a, Var b) {
        require(size(a) == size(b), "dot: size mismatch");
        Var y = alloc_like(Op::Dot, a, b, 1, 1);
        const double* av = vals(a);
        const double* bv = vals(b);
        double s = 0.0;
        for (int i = 0; i < size(a); ++i) s += av[i] * bv[i];
        vals_mut(y)[0] = s;
        return y;
    }

    Var sum(Var a) {
        Var y = alloc_like(Op::Sum, a, noinput(), 1, 1);
        const double* av = vals(a);
        double s = 0.0;
        for (int i = 0; i < size(a); ++i) s += av[i];
        vals_mut(y)[0] = s;
        return y;
    }

    // ---- nonlinearities --------------------------------------------------------

    Var tanh_(Var a) {
        Var y = alloc_like(Op::Tanh, a, noinput(), nodes_[a.id].rows, nodes_[a.id].cols);
        unary_loop(y, a, [](double x) { return std::tanh(x); });
        return y;
    }

    Var sigmoid(Var a) {
        Var y = alloc_like(Op::Sigmoid, a, noinput(), nodes_[a.id].rows, nodes_[a.id].cols);
        unary_loop(y, a, [](double x) { return stable_sigmoid(x); });
        return y;
    }

    Var softplus(Var a) {
        Var y = alloc_like(Op::Softplus, a, noinput(), nodes_[a.id].rows, nodes_[a.id].cols);
        unary_loop(y, a, [](double x) { return stable_softplus(x); });
        return y;
    }

    Var exp_(Var a) {
        Var y = alloc_like(Op::Exp, a, noinput(), nodes_[a.id].rows, nodes_[a.id].cols);
        unary_loop(y, a, [](double x) { return std::exp(x); });
        return y;
    }

    Var relu(Var a) {
        Var y = alloc_like(Op::Relu, a, noinput(), nodes_[a.id].rows, nodes_[a.id].cols);
        unary_loop(y, a, [](double x) { return x > 0.0 ? x : 0.0; });
        return y;
    }

    // Heaviside step (derivative of relu); its own derivative is taken as zero.
    Var step(Var a) {
        Var y = alloc_like(Op::Step, a, noinput(), nodes_[a.id].rows, nodes_[a.id].cols);
        unary_loop(y, a, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
        return y;
    }

    Var sqrt_(Var a) {
        Var y = alloc_like(Op::Sqrt, a, noinput(), nodes_[a.id].rows, nodes_[a.id].cols);
        unary_loop(y, a, [](double x) { return std::sqrt(x); });
        return y;
    }

    Var square(Var a) {
        Var y = alloc_like(Op::Square, a, noinput(), nodes_[a.id].rows, nodes_[a.id].cols);
        unary_loop(y, a, [](double x) { return x * x; });
        return y;
    }

    // ---- structural ops ---------------------------------------------------------

    Var concat2(Var a, Var b) {
        require(cols(a) == 1 && cols(b) == 1, "concat2: expects vectors");
        Var y = alloc_like(Op::Concat2, a, b, rows(a) + rows(b), 1);
        std::memcpy(vals_mut(y), vals(a), sizeof(double) * static_cast<size_t>(size(a)));
        std::memcpy(vals_mut(y) + size(a), vals(b), sizeof(double) * static_cast<size_t>(size(b)));
        return y;
    }

    // Contiguous range [offset, offset+len) of the flattened storage.
    Var slice(Var a, int offset, int len) {
        require(offset >= 0 && len >= 1 && offset + len <= size(a), "slice: range out of bounds");
        Var y = alloc_like(Op::Slice, a, noinput(), len, 1);
        nodes_[y.id].i0 = offset;
        std::memcpy(vals_mut(y), vals(a) + offset, sizeof(double) * static_cast<size_t>(len));
        return y;
    }

    // Scatter a vector back into a zero tensor of `total` flattened length.
    Var slice_embed(Var v, int offset, int total_rows, int total_cols) {
        int total = total_rows * total_cols;
        require(cols(v) == 1 && offset >= 0 && offset + rows(v) <= total, "slice_embed: range out of bounds");
        Var y = alloc_like(Op::SliceEmbed, v, noinput(), total_rows, total_cols);
        nodes_[y.id].i0 = offset;
        double* yv = vals_mut(y);
        std::memset(yv, 0, sizeof(double) * static_cast<size_t>(total));
        std::memcpy(yv + offset, vals(v), sizeof(double) * static_cast<size_t>(rows(v)));
        return y;
    }

    Var col(Var m, int j) {
        require(j >= 0 && j < cols(m), "col: index out of bounds");
        Var y = alloc_like(Op::Col, m, noinput(), rows(m), 1);
        nodes_[y.id].i0 = j;
        const double* mv = vals(m);
        double* yv = vals_mut(y);
        int c = cols(m);
        for (int i = 0; i < rows(m); ++i) yv[i] = mv[static_cast<size_t>(i) * c + j];
        return y;
    }

    Var col_embed(Var v, int j, int total_cols) {
        require(cols(v) == 1 && j >= 0 && j < total_cols, "col_embed: index out of bounds");
        Var y = alloc_like(Op::ColEmbed, v, noinput(), rows(v), total_cols);
        nodes_[y.id].i0 = j;
        double* yv = vals_mut(y);
        std::memset(yv, 0, sizeof(double) * static_cast<size_t>(size(y)));
        const double* vv = vals(v);
        for (int i = 0; i < rows(v); ++i) yv[static_cast<size_t>(i) * total_cols + j] = vv[i];
        return y;
    }

    // ---- symmetric eigendecomposition -------------------------------------------
    //
    // Both ops run the Jacobi solver on (A+Aᵀ)/2 and stash the full (λ, V) pair in
    // the aux arena for their backward rules. Eigenvalues come out ascending.

    Var sym_eig_vals(Var a) {
        require(rows(a) == cols(a), "sym_eig_vals: square matrix required");
        int n = rows(a);
        Var y = alloc_like(Op::SymEigVals, a, noinput(), n, 1);
        eig_forward(y, a);
        return y;
    }

    Var sym_eig_vecs(Var a) {
        require(rows(a) == cols(a), "sym_eig_vecs: square matrix required");
        int n = rows(a);
        Var y = alloc_like(Op::SymEigVecs, a, noinput(), n, n);
        eig_forward(y, a);
        return y;
    }

    // ---- replay -------------------------------------------------------------------
    //
    // Re-evaluates every recorded node from its inputs. Leaves/constants keep their
    // stored payload. Used to validate that the tape is a faithful program trace.

    void replay() {
        for (size_t k = 0; k < nodes_.size(); ++k) recompute(static_cast<int32_t>(k));
    }

    // ---- numeric backward (adjoint arena) -------------------------------------------

    void zero_adjoints_from(size_t value_offset) {
        if (adjoints_.size() < values_.size()) adjoints_.resize(values_.size(), 0.0);
        if (value_offset < adjoints_.size())
            std::memset(adjoints_.data() + value_offset, 0, sizeof(double) * (adjoints_.size() - value_offset));
    }

    void zero_all_adjoints() { zero_adjoints_from(0); }

    size_t value_offset(Var v) const { return static_cast<size_t>(nodes_[v.id].val); }

    // Accumulates d(y)/d(node) into the adjoint arena for every ancestor of y.
    // Caller is responsible for zeroing the relevant adjoint ranges beforehand.
    void backward_accumulate(Var y, double seed = 1.0) {
        require(size(y) == 1, "backward_accumulate: output must be scalar");
        if (adjoints_.size() < values_.size()) adjoints_.resize(values_.size(), 0.0);
        adjoints_[nodes_[y.id].val] += seed;
        for (int32_t k = y.id; k >= 0; --k) backward_node(k);
    }

    // Convenience: zero everything, then sweep.
    void backward(Var y, double seed = 1.0) {
        zero_all_adjoints();
        backward_accumulate(y, seed);
    }

    const double* adjoint_vals(Var v) const { return adjoints_.data() + nodes_[v.id].val; }

    Tensor adjoint(Var v) const { return Tensor::from(rows(v), cols(v), adjoint_vals(v)); }

    // ---- graph-building backward ----------------------------------------------------
    //
    // Emits the reverse sweep for the sub-graph between min(wrt) and y as fresh tape
    // nodes and returns the adjoints of `wrt` as Vars. `seed` is the adjoint of y
    // (defaults to 1 for scalar y). The returned expressions are differentiable.

    std::vector<Var> grad_graph(Var y, std::span<const Var> wrt, Var seed = {}) {
        require(!wrt.empty(), "grad_graph: empty wrt list");
        if (!seed.valid()) {
            require(size(y) == 1, "grad_graph: non-scalar output needs an explicit seed");
            seed = constant_scalar(1.0);
        }
        require(size(seed) == size(y), "grad_graph: seed shape must match output");

        int32_t lo = y.id;
        for (const Var& w : wrt) {
            require(w.tape == this, "grad_graph: wrt from another tape");
            lo = std::min(lo, w.id);
        }

        std::vector<int32_t> adj(static_cast<size_t>(y.id - lo + 1), -1);
        auto slot = [&](int32_t id) -> int32_t& { return adj[static_cast<size_t>(id - lo)]; };
        slot(y.id) = seed.id;

        for (int32_t k = y.id; k >= lo; --k) {
            int32_t g = slot(k);
            if (g < 0) continue;
            emit_adjoint(k, Var{this, g}, lo, adj);
        }

        std::vector<Var> out;
        out.reserve(wrt.size());
        for (const Var& w : wrt) {
            int32_t g = slot(w.id);
            if (g >= 0)
                out.push_back(Var{this, g});
            else
                out.push_back(constant(Tensor::zeros(rows(w), cols(w))));
        }
        return out;
    }

private:
    std::vector<Node> nodes_;
    std::vector<double> values_;
    std::vector<double> adjoints_;
    std::vector<double> aux_;

    static Var noinput() { return Var{nullptr, -1}; }

    static double stable_sigmoid(double x) {
        if (x >= 0.0) {
            double e = std::exp(-x);
            return 1.0 / (1.0 + e);
        }
        double e = std::exp(x);
        return e / (1.0 + e);
    }

    static double stable_softplus(double x) {
        if (x > 30.0) return x;
        if (x < -30.0) return std::exp(x);
        return std::log1p(std::exp(x));
    }

    Var make_input(int rows, int cols, const double* src, bool grad) {
        Node n;
        n.op = grad ? Op::Leaf : Op::Const;
        n.rows = rows;
        n.cols = cols;
        n.val = static_cast<int64_t>(values_.size());
        n.grad = grad;
        values_.resize(values_.size() + static_cast<size_t>(rows) * cols);
        if (src) std::memcpy(values_.data() + n.val, src, sizeof(double) * static_cast<size_t>(rows) * cols);
        nodes_.push_back(n);
        return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
    }

    Var alloc_like(Op op, Var a, Var b, int rows, int cols, double c0 = 0.0) {
        Node n;
        n.op = op;
        n.a = a.valid() ? a.id : -1;
        n.b = b.valid() ? b.id : -1;
        n.rows = rows;
        n.cols = cols;
        n.c0 = c0;
        n.val = static_cast<int64_t>(values_.size());
        n.grad = (n.a >= 0 && nodes_[n.a].grad) || (n.b >= 0 && nodes_[n.b].grad);
        values_.resize(values_.size() + static_cast<size_t>(rows) * cols);
        nodes_.push_back(n);
        return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
    }

    void same_shape(Var a, Var b, const char* op) {
        require(rows(a) == rows(b) && cols(a) == cols(b), std::string(op) + ": shape mismatch");
    }

    template <class F>
    void unary_loop(Var y, Var a, F f) {
        const double* av = vals(a);
        double* yv = vals_mut(y);
        for (int i = 0; i < size(a); ++i) yv[i] = f(av[i]);
    }

    template <class F>
    void binary_loop(Var y, Var a, Var b, F f) {
        const double* av = vals(a);
        const double* bv = vals(b);
        double* yv = vals_mut(y);
        for (int i = 0; i < size(a); ++i) yv[i] = f(av[i], bv[i]);
    }

    void matmul_values(Var y) {
        const Node& n = nodes_[y.id];
        bool ta = n.flags & 1, tb = n.flags & 2;
        Var a{this, n.a}, b{this, n.b};
        const double* av = vals(a);
        const double* bv = vals(b);
        double* yv = vals_mut(y);
        int p = n.rows, r = n.cols;
        int q = ta ? rows(a) : cols(a);
        int a_cols = cols(a), b_cols = cols(b);
        for (int i = 0; i < p; ++i) {
            for (int j = 0; j < r; ++j) {
                double s = 0.0;
                for (int k = 0; k < q; ++k) {
                    double ax = ta ? av[static_cast<size_t>(k) * a_cols + i] : av[static_cast<size_t>(i) * a_cols + k];
                    double bx = tb ? bv[static_cast<size_t>(j) * b_cols + k] : bv[static_cast<size_t>(k) * b_cols + j];
                    s += ax * bx;
                }
                yv[static_cast<size_t>(i) * r + j] = s;
            }
        }
    }

    // Shared forward for both eigendecomposition ops: factor (A+Aᵀ)/2, store
    // eigenvalues then eigenvectors contiguously in aux.
    void eig_forward(Var y, Var a) {
        int n = rows(a);
        Node& node = nodes_[y.id];
        node.aux = static_cast<int64_t>(aux_.size());
        aux_.resize(aux_.size() + static_cast<size_t>(n) + static_cast<size_t>(n) * n);
        double* lam = aux_.data() + node.aux;
        double* vec = lam + n;

        std::vector<double> work(static_cast<size_t>(n) * n);
        const double* av = vals(a);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                work[static_cast<size_t>(i) * n + j] =
                    0.5 * (av[static_cast<size_t>(i) * n + j] + av[static_cast<size_t>(j) * n + i]);
        sym_eigen_jacobi(n, work.data(), lam, vec);

        double* yv = vals_mut(y);
        if (node.op == Op::SymEigVals)
            std::memcpy(yv, lam, sizeof(double) * static_cast<size_t>(n));
        else
            std::memcpy(yv, vec, sizeof(double) * static_cast<size_t>(n) * n);
    }

    void recompute(int32_t k) {
        Node& n = nodes_[k];
        Var y{this, k};
        Var a{this, n.a}, b{this, n.b};
        switch (n.op) {
            case Op::Leaf:
            case Op::Const: break;
            case Op::Add: binary_loop(y, a, b, [](double x, double z) { return x + z; }); break;
            case Op::Sub: binary_loop(y, a, b, [](double x, double z) { return x - z; }); break;
            case Op::Mul: binary_loop(y, a, b, [](double x, double z) { return x * z; }); break;
            case Op::Div: binary_loop(y, a, b, [](double x, double z) { return x / z; }); break;
            case Op::Neg: unary_loop(y, a, [](double x) { return -x; }); break;
            case Op::AddC: { double c = n.c0; unary_loop(y, a, [c](double x) { return x + c; }); break; }
            case Op::MulC: { double c = n.c0; unary_loop(y, a, [c](double x) { return x * c; }); break; }
            case Op::MaxC: { double c = n.c0; unary_loop(y, a, [c](double x) { return x > c ? x : c; }); break; }
            case Op::Scale: {
                double sv = scalar(a);
                const double* xv = vals(b);
                double* yv = vals_mut(y);
                for (int i = 0; i < size(b); ++i) yv[i] = sv * xv[i];
                break;
            }
            case Op::Bcast: {
                double sv = scalar(a);
                double* yv = vals_mut(y);
                for (int i = 0; i < size(y); ++i) yv[i] = sv;
                break;
            }
            case Op::MatVec: {
                const double* wv = vals(a);
                const double* xv = vals(b);
                double* yv = vals_mut(y);
                int r = rows(a), c = cols(a);
                for (int i = 0; i < r; ++i) {
                    double s = 0.0;
                    for (int j = 0; j < c; ++j) s += wv[static_cast<size_t>(i) * c + j] * xv[j];
                    yv[i] = s;
                }
                break;
            }
            case Op::MatTVec: {
                const double* wv = vals(a);
                const double* uv = vals(b);
                double* yv = vals_mut(y);
                int r = rows(a), c = cols(a);
                for (int j = 0; j < c; ++j) yv[j] = 0.0;
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) yv[j] += wv[static_cast<size_t>(i) * c + j] * uv[i];
                break;
            }
            case Op::MatMul: matmul_values(y); break;
            case Op::Outer: {
                const double* uv = vals(a);
                const double* vv = vals(b);
                double* yv = vals_mut(y);
                for (int i = 0; i < rows(a); ++i)
                    for (int j = 0; j < rows(b); ++j) yv[static_cast<size_t>(i) * rows(b) + j] = uv[i] * vv[j];
                break;
            }
            case Op::Transpose: {
                const double* av = vals(a);
                double* yv = vals_mut(y);
                int r = rows(a), c = cols(a);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) yv[static_cast<size_t>(j) * r + i] = av[static_cast<size_t>(i) * c + j];
                break;
            }
            case Op::Dot: {
                const double* av = vals(a);
                const double* bv = vals(b);
                double s = 0.0;
                for (int i = 0; i < size(a); ++i) s += av[i] * bv[i];
                vals_mut(y)[0] = s;
                break;
            }
            case Op::Sum: {
                const double* av = vals(a);
                double s = 0.0;
                for (int i = 0; i < size(a); ++i) s += av[i];
                vals_mut(y)[0] = s;
                break;
            }
            case Op::Tanh: unary_loop(y, a, [](double x) { return std::tanh(x); }); break;
            case Op::Sigmoid: unary_loop(y, a, [](double x) { return stable_sigmoid(x); }); break;
            case Op::Softplus: unary_loop(y, a, [](double x) { return stable_softplus(x); }); break;
            case Op::Exp: unary_loop(y, a, [](double x) { return std::exp(x); }); break;
            case Op::Relu: unary_loop(y, a, [](double x) { return x > 0.0 ? x : 0.0; }); break;
            case Op::Step: unary_loop(y, a, [](double x) { return x > 0.0 ? 1.0 : 0.0; }); break;
            case Op::Sqrt: unary_loop(y, a, [](double x) { return std::sqrt(x); }); break;
            case Op::Square: unary_loop(y, a, [](double x) { return x * x; }); break;
            case Op::Concat2: {
                std::memcpy(vals_mut(y), vals(a), sizeof(double) * static_cast<size_t>(size(a)));
                std::memcpy(vals_mut(y) + size(a), vals(b), sizeof(double) * static_cast<size_t>(size(b)));
                break;
            }
            case Op::Slice: std::memcpy(vals_mut(y), vals(a) + n.i0, sizeof(double) * static_cast<size_t>(size(y))); break;
            case Op::SliceEmbed: {
                double* yv = vals_mut(y);
                std::memset(yv, 0, sizeof(double) * static_cast<size_t>(size(y)));
                std::memcpy(yv + n.i0, vals(a), sizeof(double) * static_cast<size_t>(size(a)));
                break;
            }
            case Op::Col: {
                const double* mv = vals(a);
                double* yv = vals_mut(y);
                int c = cols(a);
                for (int i = 0; i < rows(a); ++i) yv[i] = mv[static_cast<size_t>(i) * c + n.i0];
                break;
            }
            case Op::ColEmbed: {
                double* yv = vals_mut(y);
                std::memset(yv, 0, sizeof(double) * static_cast<size_t>(size(y)));
                const double* vv = vals(a);
                for (int i = 0; i < rows(a); ++i) yv[static_cast<size_t>(i) * n.cols + n.i0] = vv[i];
                break;
            }
            case Op::SymEigVals:
            case Op::SymEigVecs: eig_forward(y, a); break;
        }
    }

    // ---- numeric adjoint rules ----------------------------------------------------

    void backward_node(int32_t k) {
        const Node& n = nodes_[k];
        if (!n.grad && n.op != Op::Leaf) return;
        const double* g = adjoints_.data() + n.val;
        int len = n.rows * n.cols;

        auto adj_of = [&](int32_t id) -> double* { return adjoints_.data() + nodes_[id].val; };
        auto grad_flows = [&](int32_t id) { return id >= 0 && nodes_[id].grad; };

        switch (n.op) {
            case Op::Leaf:
            case Op::Const:
            case Op::Step: break;
            case Op::Add: {
                if (grad_flows(n.a)) { double* aa = adj_of(n.a); for (int i = 0; i < len; ++i) aa[i] += g[i]; }
                if (grad_flows(n.b)) { double* bb = adj_of(n.b); for (int i = 0; i < len; ++i) bb[i] += g[i]; }
                break;
            }
            case Op::Sub: {
                if (grad_flows(n.a)) { double* aa = adj_of(n.a); for (int i = 0; i < len; ++i) aa[i] += g[i]; }
                if (grad_flows(n.b)) { double* bb = adj_of(n.b); for (int i = 0; i < len; ++i) bb[i] -= g[i]; }
                break;
            }
            case Op::Mul: {
                const double* av = values_.data() + nodes_[n.a].val;
                const double* bv = values_.data() + nodes_[n.b].val;
                if (grad_flows(n.a)) { double* aa = adj_of(n.a); for (int i = 0; i < len; ++i) aa[i] += g[i] * bv[i]; }
                if (grad_flows(n.b)) { double* bb = adj_of(n.b); for (int i = 0; i < len; ++i) bb[i] += g[i] * av[i]; }
                break;
            }
            case Op::Div: {
                const double* bv = values_.data() + nodes_[n.b].val;
                const double* yv = values_.data() + n.val;
                if (grad_flows(n.a)) { double* aa = adj_of(n.a); for (int i = 0; i < len; ++i) aa[i] += g[i] / bv[i]; }
                if (grad_flows(n.b)) { double* bb = adj_of(n.b); for (int i = 0; i < len; ++i) bb[i] -= g[i] * yv[i] / bv[i]; }
                break;
            }
            case Op::Neg: {
                if (grad_flows(n.a)) { double* aa = adj_of(n.a); for (int i = 0; i < len; ++i) aa[i] -= g[i]; }
                break;
            }
            case Op::AddC: {
                if (grad_flows(n.a)) { double* aa = adj_of(n.a); for (int i = 0; i < len; ++i) aa[i] += g[i]; }
                break;
            }
            case Op::MulC: {
                if (grad_flows(n.a)) { double* aa = adj_of(n.a); for (int i = 0; i < len; ++i) aa[i] += g[i] * n.c0; }
                break;
            }
            case Op::MaxC: {
                if (grad_flows(n.a)) {
                    const double* av = values_.data() + nodes_[n.a].val;
                    double* aa = adj_of(n.a);
                    for (int i = 0; i < len; ++i)
                        if (av[i] > n.c0) aa[i] += g[i];
                }
                break;
            }
            case Op::Scale: {
                const double* sv = values_.data() + nodes_[n.a].val;
                const double* xv = values_.data() + nodes_[n.b].val;
                if (grad_flows(n.a)) {
                    double s = 0.0;
                    for (int i = 0; i < len; ++i) s += g[i] * xv[i];
                    adj_of(n.a)[0] += s;
                }
                if (grad_flows(n.b)) { double* bb = adj_of(n.b); for (int i = 0; i < len; ++i) bb[i] += g[i] * sv[0]; }
                break;
            }
            case Op::Bcast: {
                if (grad_flows(n.a)) {
                    double s = 0.0;
                    for (int i = 0; i < len; ++i) s += g[i];
                    adj_of(n.a)[0] += s;
                }
                break;
            }
            case Op::MatVec: {
                int r = nodes_[n.a].rows, c = nodes_[n.a].cols;
                const double* wv = values_.data() + nodes_[n.a].val;
                const double* xv = values_.data() + nodes_[n.b].val;
                if (grad_flows(n.a)) {
                    double* wa = adj_of(n.a);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j) wa[static_cast<size_t>(i) * c + j] += g[i] * xv[j];
                }
                if (grad_flows(n.b)) {
                    double* xa = adj_of(n.b);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j) xa[j] += wv[static_cast<size_t>(i) * c + j] * g[i];
                }
                break;
            }
            case Op::MatTVec: {
                int r = nodes_[n.a].rows, c = nodes_[n.a].cols;
                const double* wv = values_.data() + nodes_[n.a].val;
                const double* uv = values_.data() + nodes_[n.b].val;
                if (grad_flows(n.a)) {
                    double* wa = adj_of(n.a);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j) wa[static_cast<size_t>(i) * c + j] += uv[i] * g[j];
                }
                if (grad_flows(n.b)) {
                    double* ua = adj_of(n.b);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j) ua[i] += wv[static_cast<size_t>(i) * c + j] * g[j];
                }
                break;
            }
            case Op::MatMul: backward_matmul(n, g); break;
            case Op::Outer: {
                const double* uv = values_.data() + nodes_[n.a].val;
                const double* vv = values_.data() + nodes_[n.b].val;
                int r = n.rows, c = n.cols;
                if (grad_flows(n.a)) {
                    double* ua = adj_of(n.a);
                    for (int i = 0; i < r; ++i) {
                        double s = 0.0;
                        for (int j = 0; j < c; ++j) s += g[static_cast<size_t>(i) * c + j] * vv[j];
                        ua[i] += s;
                    }
                }
                if (grad_flows(n.b)) {
                    double* va = adj_of(n.b);
                    for (int j = 0; j < c; ++j) {
                        double s = 0.0;
                        for (int i = 0; i < r; ++i) s += g[static_cast<size_t>(i) * c + j] * uv[i];
                        va[j] += s;
                    }
                }
                break;
            }
            case Op::Transpose: {
                if (grad_flows(n.a)) {
                    double* aa = adj_of(n.a);
                    int r = n.rows, c = n.cols; // y is r x c; a is c x r
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j) aa[static_cast<size_t>(j) * r + i] += g[static_cast<size_t>(i) * c + j];
                }
                break;
            }
            case Op::Dot: {
                const double* av = values_.data() + nodes_[n.a].val;
                const double* bv = values_.data() + nodes_[n.b].val;
                int alen = nodes_[n.a].rows * nodes_[n.a].cols;
                if (grad_flows(n.a)) { double* aa = adj_of(n.a); for (int i = 0; i < alen; ++i) aa[i] += g[0] * bv[i]; }
                if (grad_flows(n.b)) { double* bb = adj_of(n.b); for (int i = 0; i < alen; ++i) bb[i] += g[0] * av[i]; }
                break;
            }
            case Op::Sum: {
                if (grad_flows(n.a)) {
                    double* aa = adj_of(n.a);
                    int alen = nodes_[n.a].rows * nodes_[n.a].cols;
                    for (int i = 0; i < alen; ++i) aa[i] += g[0];
                }
                break;
            }
            case Op::Tanh: {
                if (grad_flows(n.a)) {
                    const double* yv = values_.data() + n.val;
                    double* aa = adj_of(n.a);
                    for (int i = 0; i < len; ++i) aa[i] += g[i] * (1.0 - yv[i] * yv[i]);
                }
                break;
            }
            case Op::Sigmoid: {
                if (grad_flows(n.a)) {
                    const double* yv = values_.data() + n.val;
                    double* aa = adj_of(n.a);
                    for (int i = 0; i < len; ++i) aa[i] += g[i] * yv[i] * (1.0 - yv[i]);
                }
                break;
            }
            case Op::Softplus: {
                if (grad_flows(n.a)) {
                    const double* av = values_.data() + nodes_[n.a].val;
                    double* aa = adj_of(n.a);
                    for (int i = 0; i < len; ++i) aa[i] += g[i] * stable_sigmoid(av[i]);
                }
                break;
            }
            case Op::Exp: {
                if (grad_flows(n.a)) {
                    const double* yv = values_.data() + n.val;
                    double* aa = adj_of(n.a);
                    for (int i = 0; i < len; ++i) aa[i] += g[i] * yv[i];
                }
                break;
            }
            case Op::Relu: {
                if (grad_flows(n.a)) {
                    const double* av = values_.data() + nodes_[n.a].val;
                    double* aa = adj_of(n.a);
                    for (int i = 0; i < len; ++i)
                        if (av[i] > 0.0) aa[i] += g[i];
                }
                break;
            }
            case Op::Sqrt: {
                if (grad_flows(n.a)) {
                    const double* yv = values_.data() + n.val;
                    double* aa = adj_of(n.a);
                    for (int i = 0; i < len; ++i) aa[i] += g[i] * 0.5 / yv[i];
                }
                break;
            }
            case Op::Square: {
                if (grad_flows(n.a)) {
                    const double* av = values_.data() + nodes_[n.a].val;
                    double* aa = adj_of(n.a);
                    for (int i = 0; i < len; ++i) aa[i] += g[i] * 2.0 * av[i];
                }
                break;
            }
            case Op::Concat2: {
                int alen = nodes_[n.a].rows;
                int blen = nodes_[n.b].rows;
                if (grad_flows(n.a)) { double* aa = adj_of(n.a); for (int i = 0; i < alen; ++i) aa[i] += g[i]; }
                if (grad_flows(n.b)) { double* bb = adj_of(n.b); for (int i = 0; i < blen; ++i) bb[i] += g[alen + i]; }
                break;
            }
            case Op::Slice: {
                if (grad_flows(n.a)) {
                    double* aa = adj_of(n.a);
                    for (int i = 0; i < len; ++i) aa[n.i0 + i] += g[i];
                }
                break;
            }
            case Op::SliceEmbed: {
                if (grad_flows(n.a)) {
                    double* aa = adj_of(n.a);
                    int alen = nodes_[n.a].rows;
                    for (int i = 0; i < alen; ++i) aa[i] += g[n.i0 + i];
                }
                break;
            }
            case Op::Col: {
                if (grad_flows(n.a)) {
                    double* aa = adj_of(n.a);
                    int c = nodes_[n.a].cols;
                    for (int i = 0; i < len; ++i) aa[static_cast<size_t>(i) * c + n.i0] += g[i];
                }
                break;
            }
            case Op::ColEmbed: {
                if (grad_flows(n.a)) {
                    double* aa = adj_of(n.a);
                    int alen = nodes_[n.a].rows;
                    for (int i = 0; i < alen; ++i) aa[i] += g[static_cast<size_t>(i) * n.cols + n.i0];
                }
                break;
            }
            case Op::SymEigVals: {
                // dλ_k = v_kᵀ dA v_k  →  Ā += Σ_k λ̄_k v_k v_kᵀ
                if (grad_flows(n.a)) {
                    int nn = n.rows;
                    const double* vec = aux_.data() + n.aux + nn;
                    double* aa = adj_of(n.a);
                    for (int k2 = 0; k2 < nn; ++k2) {
                        double gk = g[k2];
                        if (gk == 0.0) continue;
                        for (int i = 0; i < nn; ++i)
                            for (int j = 0; j < nn; ++j)
                                aa[static_cast<size_t>(i) * nn + j] +=
                                    gk * vec[static_cast<size_t>(i) * nn + k2] * vec[static_cast<size_t>(j) * nn + k2];
                    }
                }
                break;
            }
            case Op::SymEigVecs: {
                // Standard divided-difference eigenvector adjoint:
                //   Ā += V (H ∘ (Vᵀ V̄)) Vᵀ,  H_jk = 1/(λ_k − λ_j) off-diagonal, 0 on it.
                // Near-degenerate pairs contribute 0 (guarded); downstream uses are
                // rotation-invariant quantities so this is the right limit.
                if (grad_flows(n.a)) {
                    int nn = n.rows;
                    const double* lam = aux_.data() + n.aux;
                    const double* vec = aux_.data() + n.aux + nn;
                    std::vector<double> m1(static_cast<size_t>(nn) * nn, 0.0);
                    // m1 = Vᵀ V̄
                    for (int i = 0; i < nn; ++i)
                        for (int j = 0; j < nn; ++j) {
                            double s = 0.0;
                            for (int k2 = 0; k2 < nn; ++k2)
                                s += vec[static_cast<size_t>(k2) * nn + i] * g[static_cast<size_t>(k2) * nn + j];
                            m1[static_cast<size_t>(i) * nn + j] = s;
                        }
                    for (int j = 0; j < nn; ++j)
                        for (int k2 = 0; k2 < nn; ++k2) {
                            double d = lam[k2] - lam[j];
                            m1[static_cast<size_t>(j) * nn + k2] =
                                (j != k2 && std::abs(d) > 1e-12) ? m1[static_cast<size_t>(j) * nn + k2] / d : 0.0;
                        }
                    double* aa = adj_of(n.a);
                    // Ā += V m1 Vᵀ
                    for (int i = 0; i < nn; ++i)
                        for (int j = 0; j < nn; ++j) {
                            double s = 0.0;
                            for (int p = 0; p < nn; ++p) {
                                double vip = vec[static_cast<size_t>(i) * nn + p];
                                if (vip == 0.0) continue;
                                for (int q = 0; q < nn; ++q)
                                    s += vip * m1[static_cast<size_t>(p) * nn + q] * vec[static_cast<size_t>(j) * nn + q];
                            }
                            aa[static_cast<size_t>(i) * nn + j] += s;
                        }
                }
                break;
            }
        }
    }

    void backward_matmul(const Node& n, const double* g) {
        bool ta = n.flags & 1, tb = n.flags & 2;
        Var a{this, n.a}, b{this, n.b};
        int p = n.rows, r = n.cols;
        int q = ta ? rows(a) : cols(a);
        const double* av = vals(a);
        const double* bv = vals(b);
        auto A = [&](int i, int k) { return ta ? av[static_cast<size_t>(k) * cols(a) + i] : av[static_cast<size_t>(i) * cols(a) + k]; };
        auto B = [&](int k, int j) { return tb ? bv[static_cast<size_t>(j) * cols(b) + k] : bv[static_cast<size_t>(k) * cols(b) + j]; };

        if (nodes_[n.a].grad) {
            double* aa = adjoints_.data() + nodes_[n.a].val;
            // dL/dA(i,k) (in logical orientation) = Σ_j g(i,j) B(k,j)
            for (int i = 0; i < p; ++i)
                for (int k = 0; k < q; ++k) {
                    double s = 0.0;
                    for (int j = 0; j < r; ++j) s += g[static_cast<size_t>(i) * r + j] * B(k, j);
                    if (ta)
                        aa[static_cast<size_t>(k) * cols(a) + i] += s;
                    else
                        aa[static_cast<size_t>(i) * cols(a) + k] += s;
                }
        }
        if (nodes_[n.b].grad) {
            double* bb = adjoints_.data() + nodes_[n.b].val;
            for (int k = 0; k < q; ++k)
                for (int j = 0; j < r; ++j) {
                    double s = 0.0;
                    for (int i = 0; i < p; ++i) s += A(i, k) * g[static_cast<size_t>(i) * r + j];
                    if (tb)
                        bb[static_cast<size_t>(j) * cols(b) + k] += s;
                    else
                        bb[static_cast<size_t>(k) * cols(b) + j] += s;
                }
        }
    }

    // ---- graph-building adjoint rules ------------------------------------------------

    void emit_adjoint(int32_t k, Var g, int32_t lo, std::vector<int32_t>& adj) {
        const Node n = nodes_[k]; // copy: builders may reallocate nodes_
        Var a{this, n.a}, b{this, n.b};

        // Propagation is purely structural: the grad flag is not consulted, so
        // derivatives with respect to constants (e.g. evaluation points held
        // fixed on a tape) are still correct.
        auto acc = [&](int32_t input, Var contrib) {
            if (input < lo) return;
            int32_t& s = adj[static_cast<size_t>(input - lo)];
            if (s < 0)
                s = contrib.id;
            else
                s = add(Var{this, s}, contrib).id;
        };

        switch (n.op) {
            case Op::Leaf:
            case Op::Const:
            case Op::Step: break;
            case Op::Add:
                acc(n.a, g);
                acc(n.b, g);
                break;
            case Op::Sub:
                acc(n.a, g);
                acc(n.b, neg(g));
                break;
            case Op::Mul:
                acc(n.a, mul(g, b));
                acc(n.b, mul(g, a));
                break;
            case Op::Div: {
                acc(n.a, div(g, b));
                acc(n.b, neg(div(mul(g, Var{this, k}), b)));
                break;
            }
            case Op::Neg: acc(n.a, neg(g)); break;
            case Op::AddC: acc(n.a, g); break;
            case Op::MulC: acc(n.a, mul_c(g, n.c0)); break;
            case Op::MaxC: acc(n.a, mul(g, step(add_c(a, -n.c0)))); break;
            case Op::Scale:
                acc(n.a, dot(g, b));
                acc(n.b, scale(a, g));
                break;
            case Op::Bcast: acc(n.a, sum(g)); break;
            case Op::MatVec:
                acc(n.a, outer(g, b));
                acc(n.b, mat_t_vec(a, g));
                break;
            case Op::MatTVec:
                acc(n.a, outer(b, g));
                acc(n.b, matvec(a, g));
                break;
            case Op::MatMul: {
                bool ta = n.flags & 1, tb = n.flags & 2;
                // Logical product is op(A)·op(B); push adjoints back through the flags.
                if (nodes_[n.a].grad) {
                    Var ga = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
                    acc(n.a, ga);
                }
                if (nodes_[n.b].grad) {
                    Var gb = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
                    acc(n.b, gb);
                }
                break;
            }
            case Op::Outer:
                acc(n.a, matvec(g, b));
                acc(n.b, mat_t_vec(g, a));
                break;
            case Op::Transpose: acc(n.a, transpose(g)); break;
            case Op::Dot:
                acc(n.a, scale(g, b));
                acc(n.b, scale(g, a));
                break;
            case Op::Sum: acc(n.a, bcast(g, nodes_[n.a].rows, nodes_[n.a].cols)); break;
            case Op::Tanh: acc(n.a, mul(g, add_c(neg(square(Var{this, k})), 1.0))); break;
            case Op::Sigmoid: {
                Var y{this, k};
                acc(n.a, mul(g, mul(y, add_c(neg(y), 1.0))));
                break;
            }
            case Op::Softplus: acc(n.a, mul(g, sigmoid(a))); break;
            case Op::Exp: acc(n.a, mul(g, Var{this, k})); break;
            case Op::Relu: acc(n.a, mul(g, step(a))); break;
            case Op::Sqrt: acc(n.a, div(mul_c(g, 0.5), Var{this, k})); break;
            case Op::Square: acc(n.a, mul(g, mul_c(a, 2.0))); break;
            case Op::Concat2:
                acc(n.a, slice(g, 0, nodes_[n.a].rows));
                acc(n.b, slice(g, nodes_[n.a].rows, nodes_[n.b].rows));
                break;
            case Op::Slice: acc(n.a, slice_embed(g, n.i0, nodes_[n.a].rows, nodes_[n.a].cols)); break;
            case Op::SliceEmbed: acc(n.a, slice(g, n.i0, nodes_[n.a].rows)); break;
            case Op::Col: acc(n.a, col_embed(g, n.i0, nodes_[n.a].cols)); break;
            case Op::ColEmbed: acc(n.a, col(g, n.i0)); break;
            case Op::SymEigVals:
            case Op::SymEigVecs:
                throw ContractError("eigendecomposition nodes cannot appear inside a nested derivative sweep");
        }
    }

    friend struct Var;
};

inline int Var::rows() const { return tape->rows(*this); }
inline int Var::cols() const { return tape->cols(*this); }
inline int Var::size() const { return tape->size(*this); }
inline const double* Var::vals() const { return tape->vals(*this); }
inline double Var::scalar() const { return tape->scalar(*this); }
inline Tensor Var::value() const { return tape->value(*this); }

// Free-function spellings so templated code reads naturally for Var and DualVar alike.
inline Var add(Var a, Var b) { return a.tape->add(a, b); }
inline Var sub(Var a, Var b) { return a.tape->sub(a, b); }
inline Var mul(Var a, Var b) { return a.tape->mul(a, b); }
inline Var div(Var a, Var b) { return a.tape->div(a, b); }
inline Var neg(Var a) { return a.tape->neg(a); }
inline Var add_c(Var a, double c) { return a.tape->add_c(a, c); }
inline Var mul_c(Var a, double c) { return a.tape->mul_c(a, c); }
inline Var max_c(Var a, double c) { return a.tape->max_c(a, c); }
inline Var scale(Var s, Var x) { return s.tape->scale(s, x); }
inline Var matvec(Var w, Var x) { return w.tape->matvec(w, x); }
inline Var mat_t_vec(Var w, Var u) { return w.tape->mat_t_vec(w, u); }
inline Var matmul(Var a, Var b, bool ta = false, bool tb = false) { return a.tape->matmul(a, b, ta, tb); }
inline Var outer(Var u, Var v) { return u.tape->outer(u, v); }
inline Var transpose(Var a) { return a.tape->transpose(a); }
inline Var dot(Var a, Var b) { return a.tape->dot(a, b); }
inline Var sum(Var a) { return a.tape->sum(a); }
inline Var tanh(Var a) { return a.tape->tanh_(a); }
inline Var sigmoid(Var a) { return a.tape->sigmoid(a); }
inline Var softplus(Var a) { return a.tape->softplus(a); }
inline Var exp(Var a) { return a.tape->exp_(a); }
inline Var relu(Var a) { return a.tape->relu(a); }
inline Var step(Var a) { return a.tape->step(a); }
inline Var sqrt(Var a) { return a.tape->sqrt_(a); }
inline Var square(Var a) { return a.tape->square(a); }
inline Var concat2(Var a, Var b) { return a.tape->concat2(a, b); }
inline Var slice(Var a, int offset, int len) { return a.tape->slice(a, offset, len); }
inline Var col(Var m, int j) { return m.tape->col(m, j); }
inline Var sym_eig_vals(Var a) { return a.tape->sym_eig_vals(a); }
inline Var sym_eig_vecs(Var a) { return a.tape->sym_eig_vecs(a); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }

// Squared Euclidean norm of any tensor (flattened).
inline Var sq_norm(Var a) { return dot(a, a); }

// Euclidean norm with the argument floored away from zero so the derivative
// stays bounded; `floor` bounds the *norm* from below.
inline Var norm_floored(Var a, double floor = 0.0) {
    Var s = dot(a, a);
    if (floor > 0.0) s = max_c(s, floor * floor);
    return sqrt(max_c(s, 1e-300));
}

} // namespace frameflow
