#pragma once

// Tensor-level differentiation entry points. Each call traces the function on
// a private tape, differentiates it, and returns plain tensors. These are the
// convenience APIs used by tests and geometry code; the training loop drives a
// long-lived tape directly.

#include "dual.hpp"
#include "tape.hpp"

namespace frameflow {

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Const: return "const";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Neg: return "neg";
        case Op::AddC: return "add_c";
        case Op::MulC: return "mul_c";
        case Op::MaxC: return "max_c";
        case Op::Scale: return "scale";
        case Op::Bcast: return "bcast";
        case Op::MatVec: return "matvec";
        case Op::MatTVec: return "mat_t_vec";
        case Op::MatMul: return "matmul";
        case Op::Outer: return "outer";
        case Op::Transpose: return "transpose";
        case Op::Dot: return "dot";
        case Op::Sum: return "sum";
        case Op::Tanh: return "tanh";
        case Op::Sigmoid: return "sigmoid";
        case Op::Softplus: return "softplus";
        case Op::Exp: return "exp";
        case Op::Relu: return "relu";
        case Op::Step: return "step";
        case Op::Sqrt: return "sqrt";
        case Op::Square: return "square";
        case Op::Concat2: return "concat2";
        case Op::Slice: return "slice";
        case Op::SliceEmbed: return "slice_embed";
        case Op::Col: return "col";
        case Op::ColEmbed: return "col_embed";
        case Op::SymEigVals: return "sym_eig_vals";
        case Op::SymEigVecs: return "sym_eig_vecs";
    }
    return "?";
}

// Gradient of a scalar-valued function. `f` is called as f(tape, Var) -> Var.
template <class F>
Tensor grad(F&& f, const Tensor& x) {
    if (!x.all_finite()) throw NumericError("grad: input has non-finite entries");
    Tape tape;
    Var xv = tape.leaf(x);
    Var y = f(tape, xv);
    require(y.size() == 1, "grad: function output is not scalar");
    tape.backward(y);
    Tensor g = tape.adjoint(xv);
    if (!g.all_finite()) throw NumericError("gradient sweep produced a non-finite value");
    return g;
}

// Directional derivative J_f(x)·v of a vector-valued function without forming
// the Jacobian. `f` is called as f(tape, DualVar) -> DualVar.
template <class F>
Tensor jvp(F&& f, const Tensor& x, const Tensor& v) {
    require(x.rows() == v.rows() && x.cols() == v.cols(), "jvp: direction shape must match input");
    Tape tape;
    DualVar xv = make_dual(tape.leaf(x), tape.constant(v));
    DualVar y = f(tape, xv);
    return tape.value(y.d);
}

// Pullback Jᵀ_f(x)·w via a graph-building reverse sweep. `f`: f(tape, Var) -> Var.
template <class F>
Tensor vjp(F&& f, const Tensor& x, const Tensor& w) {
    Tape tape;
    Var xv = tape.leaf(x);
    Var y = f(tape, xv);
    require(y.size() == static_cast<int>(w.size()), "vjp: seed shape must match output");
    Var seed = tape.constant(w);
    Var g = tape.grad_graph(y, std::array<Var, 1>{xv}, seed)[0];
    return tape.value(g);
}

// Dense k×n Jacobian assembled column-by-column from forward-mode passes
// (inputs are small here, n ≤ 64). `f`: f(tape, DualVar) -> DualVar.
template <class F>
Tensor jacobian(F&& f, const Tensor& x) {
    require(x.cols() == 1, "jacobian: expects a vector input");
    int n = x.rows();
    Tensor out;
    for (int j = 0; j < n; ++j) {
        Tensor ej(n, 1);
        ej[j] = 1.0;
        Tensor column = jvp(f, x, ej);
        if (j == 0) out = Tensor(static_cast<int>(column.size()), n);
        for (int i = 0; i < out.rows(); ++i) out(i, j) = column[i];
    }
    return out;
}

} // namespace frameflow
