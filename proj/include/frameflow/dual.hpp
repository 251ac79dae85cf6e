#pragma once

// Forward-mode directional derivatives as dual numbers over tape primitives.
// A DualVar carries (value, tangent); every rule below records ordinary tape
// nodes for both halves, so forward-mode results remain differentiable by the
// reverse sweep (forward-over-reverse and reverse-over-forward both work).
//
// Functions are spelled identically to the Var API; templated network code can
// run on either representation unchanged. Weight/bias parameters stay plain
// Vars (no tangent); only the data path is dualized.

#include "tape.hpp"

namespace frameflow {

struct DualVar {
    Var v; // primal value
    Var d; // tangent (same shape)
};

// Lift a Var with a zero tangent (e.g. a frozen coordinate of a dual input).
inline DualVar dual_const(Var x) {
    return {x, x.tape->constant(Tensor::zeros(x.rows(), x.cols()))};
}

inline DualVar make_dual(Var value, Var tangent) { return {value, tangent}; }

inline DualVar add(DualVar a, DualVar b) { return {add(a.v, b.v), add(a.d, b.d)}; }
inline DualVar sub(DualVar a, DualVar b) { return {sub(a.v, b.v), sub(a.d, b.d)}; }
inline DualVar neg(DualVar a) { return {neg(a.v), neg(a.d)}; }

inline DualVar mul(DualVar a, DualVar b) {
    return {mul(a.v, b.v), add(mul(a.d, b.v), mul(a.v, b.d))};
}

inline DualVar div(DualVar a, DualVar b) {
    Var y = div(a.v, b.v);
    return {y, div(sub(a.d, mul(y, b.d)), b.v)};
}

inline DualVar add_c(DualVar a, double c) { return {add_c(a.v, c), a.d}; }
inline DualVar mul_c(DualVar a, double c) { return {mul_c(a.v, c), mul_c(a.d, c)}; }

inline DualVar max_c(DualVar a, double c) {
    // Tangent passes only where the input is above the clamp.
    return {max_c(a.v, c), mul(a.d, step(add_c(a.v, -c)))};
}

inline DualVar scale(DualVar s, DualVar x) {
    return {scale(s.v, x.v), add(scale(s.d, x.v), scale(s.v, x.d))};
}

// Linear maps with constant (parameter) matrices.
inline DualVar matvec(Var w, DualVar x) { return {matvec(w, x.v), matvec(w, x.d)}; }
inline DualVar mat_t_vec(Var w, DualVar u) { return {mat_t_vec(w, u.v), mat_t_vec(w, u.d)}; }

inline DualVar add(DualVar a, Var b_const) { return {add(a.v, b_const), a.d}; }

inline DualVar dot(DualVar a, DualVar b) {
    return {dot(a.v, b.v), add(dot(a.d, b.v), dot(a.v, b.d))};
}

inline DualVar sum(DualVar a) { return {sum(a.v), sum(a.d)}; }

inline DualVar tanh(DualVar a) {
    Var y = tanh(a.v);
    return {y, mul(a.d, add_c(neg(square(y)), 1.0))};
}

inline DualVar sigmoid(DualVar a) {
    Var y = sigmoid(a.v);
    return {y, mul(a.d, mul(y, add_c(neg(y), 1.0)))};
}

inline DualVar softplus(DualVar a) { return {softplus(a.v), mul(a.d, sigmoid(a.v))}; }

inline DualVar exp(DualVar a) {
    Var y = exp(a.v);
    return {y, mul(a.d, y)};
}

inline DualVar relu(DualVar a) { return {relu(a.v), mul(a.d, step(a.v))}; }

inline DualVar sqrt(DualVar a) {
    Var y = sqrt(a.v);
    return {y, div(mul_c(a.d, 0.5), y)};
}

inline DualVar square(DualVar a) { return {square(a.v), mul(a.d, mul_c(a.v, 2.0))}; }

inline DualVar concat2(DualVar a, DualVar b) { return {concat2(a.v, b.v), concat2(a.d, b.d)}; }

inline DualVar slice(DualVar a, int offset, int len) {
    return {slice(a.v, offset, len), slice(a.d, offset, len)};
}

inline DualVar col(DualVar m, int j) { return {col(m.v, j), col(m.d, j)}; }

inline DualVar operator+(DualVar a, DualVar b) { return add(a, b); }
inline DualVar operator-(DualVar a, DualVar b) { return sub(a, b); }
inline DualVar operator*(DualVar a, DualVar b) { return mul(a, b); }
inline DualVar operator/(DualVar a, DualVar b) { return div(a, b); }
inline DualVar operator-(DualVar a) { return neg(a); }

} // namespace frameflow
