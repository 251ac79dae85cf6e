#pragma once
// Spectral tools for the symmetrized flow operator
//
//     A(z) = sgn(T) * ( J_F(z) + J_F(z)^T + <grad sigma(z), F(z)> I )
//
// whose eigenvalues control whether the flow of F is locally non-contracting.
// Three evaluation strategies are provided:
//
//   * exact dense:   materialize A on the tape (n Jacobian-vector passes) and
//                    run the symmetric eigensolver primitive on it;
//   * matrix-free:   wrap A as a matvec handle (one forward-mode pass plus one
//                    reverse-mode pass per application) and estimate
//                    tr f(A) with Hutchinson probing + Lanczos quadrature;
//   * plain numeric: `eigenvalues_exact` for tensors outside any tape.
//
// The matvec handle and all estimators build ordinary tape nodes, so the
// resulting scalars are differentiable with the rest of the graph.  The
// tridiagonal eigensolve uses the dedicated symmetric-eigen primitives, whose
// derivatives are only available to the value-mode backward sweep; that is
// the sweep the optimizer uses, so penalties remain trainable.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <frameflow/dual.hpp>
#include <frameflow/jacobi.hpp>
#include <frameflow/rng.hpp>
#include <frameflow/tape.hpp>
#include <frameflow/tensor.hpp>

namespace frameflow {

// ---------------------------------------------------------------------------
// Plain dense eigenvalues (no tape).
// ---------------------------------------------------------------------------

// Eigenvalues of (a + a^T)/2, ascending.  Input must be square and finite.
inline Tensor eigenvalues_exact(const Tensor& a) {
    require(a.rows() == a.cols(), "eigenvalues_exact: matrix must be square");
    if (!a.all_finite()) throw NumericError("eigenvalues_exact: non-finite entries");
    const int n = a.rows();
    std::vector<double> work(static_cast<size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            work[static_cast<size_t>(i) * n + j] = 0.5 * (a(i, j) + a(j, i));
    Tensor vals(n, 1);
    sym_eigen_jacobi(n, work.data(), vals.data(), nullptr);
    return vals;
}

// ---------------------------------------------------------------------------
// Matrix-free operator handle.
// ---------------------------------------------------------------------------

// A symmetric linear operator exposed only through matvec application.  The
// callable builds tape nodes, so repeated applications (as in Lanczos) stay
// differentiable end to end.
struct LinearOperatorHandle {
    int dim = 0;
    std::function<Var(Var)> apply;

    Var operator()(Var v) const {
        require(static_cast<bool>(apply), "operator handle: empty");
        require(v.tape != nullptr && v.size() == dim,
                "operator handle: vector has wrong dimension");
        return apply(v);
    }
};

// Handle for an explicit symmetric matrix (symmetrized defensively).  Used by
// estimator tests and available for small dense problems.
inline LinearOperatorHandle dense_operator(Tape& t, const Tensor& a) {
    require(a.rows() == a.cols(), "dense_operator: matrix must be square");
    const int n = a.rows();
    Tensor sym(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) sym(i, j) = 0.5 * (a(i, j) + a(j, i));
    Var mat = t.constant(sym);
    return {n, [mat](Var v) { return matvec(mat, v); }};
}

namespace detail {

// Type-erased view of one vector field: plain evaluation (tape nodes) and
// forward-mode evaluation (value + directional derivative).
struct ErasedField {
    std::function<Var(Var)> plain;
    std::function<DualVar(DualVar)> dual;
};

template <class Field>
ErasedField erase_field(const Field& f) {
    return {[f](Var x) { return f(x); }, [f](DualVar x) { return f(x); }};
}

// Directional derivative of a scalar field along the plain field value:
// c = <grad sigma(z), F(z)>.  Returns an invalid Var when sigma is absent.
inline Var conformal_rate(Tape& t, const ErasedField* sigma, Var z, Var f_at_z) {
    if (sigma == nullptr) return Var{};
    DualVar sd = sigma->dual(make_dual(z, f_at_z));
    require(sd.v.size() == 1, "conformal rate: scalar field must have one output");
    (void)t;
    return sd.d;
}

inline double sign_of(Tape& t, Var t_val) {
    require(t_val.size() == 1, "flow operator: horizon must be a scalar");
    double tv = t.value(t_val)[0];
    if (!std::isfinite(tv)) throw NumericError("flow operator: non-finite horizon");
    return tv >= 0.0 ? 1.0 : -1.0;
}

// Core matvec builder shared by the templated wrappers below.
inline LinearOperatorHandle lie_operator_core(Tape& t, ErasedField f, const ErasedField* sigma,
                                              double sign, Var z) {
    require(sign == 1.0 || sign == -1.0, "flow operator: sign must be +1 or -1");
    require(z.tape == &t, "flow operator: point is not on this tape");
    const int n = z.size();
    Var y = f.plain(z);
    require(y.size() == n, "flow operator: field output dimension mismatch");
    Var c = conformal_rate(t, sigma, z, y);

    Tape* tp = &t;
    auto apply = [tp, f, y, c, sign, z](Var v) -> Var {
        DualVar jv = f.dual(make_dual(z, v));              // J_F v
        std::array<Var, 1> wrt{z};
        Var jtv = tp->grad_graph(y, wrt, v)[0];            // J_F^T v
        Var out = add(jv.d, jtv);
        if (c.valid()) out = add(out, scale(c, v));
        return sign == 1.0 ? out : neg(out);
    };
    return {n, std::move(apply)};
}

}  // namespace detail

// Matrix-free handle for A = sign * (J_F + J_F^T) at point z.
template <class Field>
LinearOperatorHandle lie_operator(Tape& t, const Field& f, double sign, Var z) {
    return detail::lie_operator_core(t, detail::erase_field(f), nullptr, sign, z);
}

// Same with the conformal correction <grad sigma, F> I included.
template <class Field, class ScalarField>
LinearOperatorHandle lie_operator(Tape& t, const Field& f, const ScalarField& sigma, double sign,
                                  Var z) {
    detail::ErasedField s = detail::erase_field(sigma);
    return detail::lie_operator_core(t, detail::erase_field(f), &s, sign, z);
}

// Dense tape-level matrix A = sign * (J_F + J_F^T [+ cI]) built from n
// forward-mode passes.  Differentiable; feeds the symmetric-eigen primitives.
namespace detail {

inline Var flow_operator_matrix_core(Tape& t, const ErasedField& f, const ErasedField* sigma,
                                     double sign, Var z) {
    require(sign == 1.0 || sign == -1.0, "flow operator: sign must be +1 or -1");
    require(z.tape == &t, "flow operator: point is not on this tape");
    const int n = z.size();
    require(n <= 64, "flow operator: dimension too large for dense assembly");
    Var y = f.plain(z);
    require(y.size() == n, "flow operator: field output dimension mismatch");

    Var jac{};  // sum_k (J e_k) e_k^T
    for (int k = 0; k < n; ++k) {
        Tensor ek(n, 1);
        ek[static_cast<size_t>(k)] = 1.0;
        Var basis = t.constant(ek);
        DualVar dk = f.dual(make_dual(z, basis));
        Var colk = outer(dk.d, basis);
        jac = jac.valid() ? add(jac, colk) : colk;
    }
    Var a_mat = add(jac, transpose(jac));
    Var c = conformal_rate(t, sigma, z, y);
    if (c.valid()) {
        Tensor eye(n, n);
        for (int i = 0; i < n; ++i) eye(i, i) = 1.0;
        a_mat = add(a_mat, scale(c, t.constant(eye)));
    }
    return sign == 1.0 ? a_mat : neg(a_mat);
}

}  // namespace detail

template <class Field>
Var flow_operator_matrix(Tape& t, const Field& f, double sign, Var z) {
    return detail::flow_operator_matrix_core(t, detail::erase_field(f), nullptr, sign, z);
}

template <class Field, class ScalarField>
Var flow_operator_matrix(Tape& t, const Field& f, const ScalarField& sigma, double sign, Var z) {
    detail::ErasedField s = detail::erase_field(sigma);
    return detail::flow_operator_matrix_core(t, detail::erase_field(f), &s, sign, z);
}

// ---------------------------------------------------------------------------
// Lanczos quadrature.
// ---------------------------------------------------------------------------

// Spectral function applied elementwise to a vector of Ritz values.
using SpectralFn = std::function<Var(Tape&, Var)>;

struct LanczosQuadrature {
    Var ritz_values;   // k x 1, ascending
    Var weights;       // k x 1, squared first eigenvector components
    int steps_taken = 0;
    bool broke_down = false;
};

// Runs `max_steps` Lanczos iterations of `op` started at `probe`, with full
// reorthogonalization against all previous basis vectors.  A residual norm
// below 1e-14 stops early with the partial tridiagonal matrix, which is then
// exact on the Krylov subspace explored so far.  The quadrature rule is
//     probe^T f(A) probe  ~=  ||probe||^2 * sum_j weights_j * f(ritz_j).
inline LanczosQuadrature lanczos_quadrature(Tape& t, const LinearOperatorHandle& op,
                                            const Tensor& probe, int max_steps) {
    require(op.dim >= 1, "lanczos: operator dimension must be positive");
    require(max_steps >= 1 && max_steps <= op.dim,
            "lanczos: step count must be in [1, dim]");
    require(probe.rows() == op.dim && probe.cols() == 1,
            "lanczos: probe has wrong dimension");
    if (!probe.all_finite()) throw NumericError("lanczos: non-finite probe");

    double pn = 0.0;
    for (int i = 0; i < op.dim; ++i) pn += probe[static_cast<size_t>(i)] * probe[static_cast<size_t>(i)];
    pn = std::sqrt(pn);
    require(pn > 0.0, "lanczos: probe must be nonzero");
    Tensor q0t(op.dim, 1);
    for (int i = 0; i < op.dim; ++i) q0t[static_cast<size_t>(i)] = probe[static_cast<size_t>(i)] / pn;

    std::vector<Var> basis;
    basis.push_back(t.constant(q0t));
    std::vector<Var> alphas, betas;
    bool broke_down = false;

    for (int k = 0; k < max_steps; ++k) {
        Var qk = basis.back();
        Var w = op(qk);
        Var ak = dot(w, qk);
        alphas.push_back(ak);
        w = sub(w, scale(ak, qk));
        if (k > 0) w = sub(w, scale(betas.back(), basis[basis.size() - 2]));
        // Full reorthogonalization keeps the basis numerically orthonormal.
        for (const Var& qj : basis) w = sub(w, scale(dot(w, qj), qj));
        if (k + 1 == max_steps) break;

        Var wn2 = dot(w, w);
        double wn2v = t.value(wn2)[0];
        if (!std::isfinite(wn2v)) throw NumericError("lanczos: non-finite iterate");
        if (std::sqrt(wn2v) < 1e-14) {
            broke_down = true;  // invariant subspace found; partial rule is exact on it
            break;
        }
        Var bk = sqrt(wn2);
        betas.push_back(bk);
        basis.push_back(scale(div(t.constant_scalar(1.0), bk), w));
    }

    const int k_eff = static_cast<int>(alphas.size());
    Var tri{};
    for (int j = 0; j < k_eff; ++j) {
        Tensor ejj(k_eff, k_eff);
        ejj(j, j) = 1.0;
        Var term = scale(alphas[static_cast<size_t>(j)], t.constant(ejj));
        tri = tri.valid() ? add(tri, term) : term;
    }
    for (int j = 0; j + 1 < k_eff; ++j) {
        Tensor eoff(k_eff, k_eff);
        eoff(j, j + 1) = 1.0;
        eoff(j + 1, j) = 1.0;
        tri = add(tri, scale(betas[static_cast<size_t>(j)], t.constant(eoff)));
    }

    LanczosQuadrature out;
    out.ritz_values = sym_eig_vals(tri);
    Var vecs = sym_eig_vecs(tri);              // k x k, eigenvectors as columns
    out.weights = square(slice(vecs, 0, k_eff));  // first row = first components
    out.steps_taken = k_eff;
    out.broke_down = broke_down;
    return out;
}

// ---------------------------------------------------------------------------
// Hutchinson trace estimation.
// ---------------------------------------------------------------------------

// Estimates tr f_i(A) for each spectral function, sharing one Lanczos run per
// probe across all functions.  Probes are Rademacher vectors drawn from a
// counter-based stream, so a fixed seed gives a bit-reproducible estimate.
inline std::vector<Var> hutchinson_traces(Tape& t, const LinearOperatorHandle& op,
                                          std::span<const SpectralFn> fns, int probes,
                                          int lanczos_steps, uint64_t seed) {
    require(!fns.empty(), "hutchinson: need at least one spectral function");
    require(probes >= 1, "hutchinson: probe count must be positive");

    std::vector<Var> acc(fns.size(), Var{});
    for (int p = 0; p < probes; ++p) {
        Rng rng = Rng::stream({seed, static_cast<uint64_t>(p)});
        Tensor z(op.dim, 1);
        for (int i = 0; i < op.dim; ++i) z[static_cast<size_t>(i)] = rng.rademacher();
        LanczosQuadrature quad = lanczos_quadrature(t, op, z, lanczos_steps);
        for (size_t fi = 0; fi < fns.size(); ++fi) {
            Var fv = fns[fi](t, quad.ritz_values);
            require(fv.size() == quad.steps_taken,
                    "hutchinson: spectral function must act elementwise");
            // ||z||^2 = dim for Rademacher probes.
            Var contrib = mul_c(dot(quad.weights, fv), static_cast<double>(op.dim));
            acc[fi] = acc[fi].valid() ? add(acc[fi], contrib) : contrib;
        }
    }
    for (Var& a : acc) a = mul_c(a, 1.0 / static_cast<double>(probes));
    return acc;
}

inline Var hutchinson_trace(Tape& t, const LinearOperatorHandle& op, const SpectralFn& f,
                            int probes, int lanczos_steps, uint64_t seed) {
    std::array<SpectralFn, 1> fns{f};
    return hutchinson_traces(t, op, fns, probes, lanczos_steps, seed)[0];
}

// ---------------------------------------------------------------------------
// Non-contraction penalty.
// ---------------------------------------------------------------------------

struct SpectralPenaltySpec {
    enum class Impl {
        ExactEigen,   // dense A + symmetric eigensolver primitive
        MatrixFree,   // Hutchinson + Lanczos through the matvec handle
    };
    enum class Shape {
        Softmin,       // T^2 * relu(-softmin(lambda))^2, softmin via exp weights
        ReluSquared,   // T^2 * sum_j relu(-lambda_j)^2
    };
    Impl impl = Impl::ExactEigen;
    Shape shape = Shape::Softmin;
    int lanczos_steps = 3;
    int probes = 8;
};

namespace detail {

// Penalty from an explicit eigenvalue vector.
inline Var shape_penalty_from_eigs(Tape& t, Var lam, Var t_val, SpectralPenaltySpec::Shape shape) {
    (void)t;
    if (shape == SpectralPenaltySpec::Shape::ReluSquared) {
        Var s = sum(square(relu(neg(lam))));
        return mul(square(t_val), s);
    }
    Var e = exp(neg(lam));
    Var ratio = div(dot(lam, e), sum(e));
    Var viol = relu(neg(ratio));
    return mul(square(t_val), square(viol));
}

inline Var psd_penalty_core(Tape& t, const ErasedField& f, const ErasedField* sigma, Var t_val,
                            Var z, const SpectralPenaltySpec& spec, uint64_t probe_seed) {
    const double sign = sign_of(t, t_val);
    if (spec.impl == SpectralPenaltySpec::Impl::ExactEigen) {
        Var a_mat = flow_operator_matrix_core(t, f, sigma, sign, z);
        Var lam = sym_eig_vals(a_mat);
        return shape_penalty_from_eigs(t, lam, t_val, spec.shape);
    }

    LinearOperatorHandle op = lie_operator_core(t, f, sigma, sign, z);
    require(spec.lanczos_steps >= 1 && spec.lanczos_steps <= op.dim,
            "psd penalty: lanczos step count must be in [1, dim]");
    if (spec.shape == SpectralPenaltySpec::Shape::ReluSquared) {
        SpectralFn fn = [](Tape&, Var lam) { return square(relu(neg(lam))); };
        Var est = hutchinson_trace(t, op, fn, spec.probes, spec.lanczos_steps, probe_seed);
        return mul(square(t_val), est);
    }
    // Softmin from two trace estimates sharing probes:
    //   softmin(lambda) ~= tr(A e^{-A}) / tr(e^{-A}).
    std::array<SpectralFn, 2> fns{
        SpectralFn([](Tape&, Var lam) { return mul(lam, exp(neg(lam))); }),
        SpectralFn([](Tape&, Var lam) { return exp(neg(lam)); }),
    };
    std::vector<Var> est = hutchinson_traces(t, op, fns, spec.probes, spec.lanczos_steps, probe_seed);
    Var den = max_c(est[1], 1e-30);  // tr e^{-A} > 0; floor guards estimator noise
    Var ratio = div(est[0], den);
    Var viol = relu(neg(ratio));
    return mul(square(t_val), square(viol));
}

}  // namespace detail

// Penalty discouraging contracting directions of the flow of F at point z,
// weighted by the (squared) horizon t_val.  Differentiable via the value-mode
// backward sweep.  `probe_seed` fixes the Hutchinson probes (matrix-free only).
template <class Field>
Var psd_penalty(Tape& t, const Field& f, Var t_val, Var z, const SpectralPenaltySpec& spec,
                uint64_t probe_seed = 0) {
    return detail::psd_penalty_core(t, detail::erase_field(f), nullptr, t_val, z, spec, probe_seed);
}

template <class Field, class ScalarField>
Var psd_penalty(Tape& t, const Field& f, const ScalarField& sigma, Var t_val, Var z,
                const SpectralPenaltySpec& spec, uint64_t probe_seed = 0) {
    detail::ErasedField s = detail::erase_field(sigma);
    return detail::psd_penalty_core(t, detail::erase_field(f), &s, t_val, z, spec, probe_seed);
}

}  // namespace frameflow
