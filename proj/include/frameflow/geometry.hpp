#pragma once

// Differential-geometric primitives: Lie brackets via dual-number JVPs, the
// symmetric Lie-derivative operator, adaptive Dormand–Prince 5(4) flow
// integration with arc-length accumulation, and flow-consistency checks.

#include <cmath>
#include <functional>
#include <vector>

#include "model.hpp"

namespace frameflow {

using VecField = std::function<Tensor(const Tensor&)>;          // plain pointwise field
using DualField = std::function<DualVar(Tape&, DualVar)>;       // tape-level, JVP-capable
using StopPredicate = std::function<bool(const Tensor&)>;

// ---- Lie bracket and Lie-derivative operator -----------------------------------

// [F_i, F_j](x) = J_{F_j}(x)·F_i(x) − J_{F_i}(x)·F_j(x), using two dual passes
// (the second pass reuses the value computed by the first).
inline Tensor lie_bracket(const DualField& fi, const DualField& fj, const Tensor& x) {
    Tape t;
    Var xv = t.constant(x);
    DualVar fi_at_x = fi(t, dual_const(xv));           // value only
    DualVar jj_fi = fj(t, make_dual(xv, fi_at_x.v));   // tangent = J_{F_j}·F_i, value = F_j(x)
    DualVar ji_fj = fi(t, make_dual(xv, jj_fi.v));     // tangent = J_{F_i}·F_j
    return t.value(sub(jj_fi.d, ji_fj.d));
}

// A(x) = sign·(JF(x) + JF(x)ᵀ + ⟨∇σ(x), F(x)⟩·I). The σ term is a single
// directional derivative of σ along F. Pass sigma = nullptr for σ ≡ 0.
inline Tensor lie_derivative_matrix(const DualField& f, const DualField* sigma, double t_sign,
                                    const Tensor& x) {
    int n = static_cast<int>(x.size());
    require(n >= 1 && n <= 64, "lie_derivative_matrix: exact path supports 1 <= n <= 64");
    require(t_sign == 1.0 || t_sign == -1.0, "lie_derivative_matrix: sign must be ±1");

    Tape t;
    Var xv = t.constant(x);

    Tensor jf = Tensor::zeros(n, n);
    Tensor f_val;
    for (int k = 0; k < n; ++k) {
        Tensor ek = Tensor::zeros(n, 1);
        ek[k] = 1.0;
        DualVar out = f(t, make_dual(xv, t.constant(ek)));
        Tensor colk = t.value(out.d);
        for (int i = 0; i < n; ++i) jf(i, k) = colk[i];
        if (k == 0) f_val = t.value(out.v);
    }

    double conformal = 0.0;
    if (sigma != nullptr) {
        DualVar s = (*sigma)(t, make_dual(xv, t.constant(f_val)));
        Tensor d = t.value(s.d);
        require(d.size() == 1, "lie_derivative_matrix: sigma must be a scalar field");
        conformal = d[0];
    }

    Tensor a = Tensor::zeros(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            a(i, j) = t_sign * (jf(i, j) + jf(j, i) + (i == j ? conformal : 0.0));
    // guard against any asymmetric rounding residue
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double s = 0.5 * (a(i, j) + a(j, i));
            a(i, j) = s;
            a(j, i) = s;
        }
    return a;
}

// ---- adaptive flow integration --------------------------------------------------

struct FlowTrace {
    std::vector<double> times;      // strictly increasing, starts at 0
    std::vector<Tensor> states;     // states[0] = initial condition
    std::vector<double> arc_length; // cumulative ∫‖F‖dt, nondecreasing
    long accepted_steps = 0;
    long rejected_steps = 0;
    std::vector<uint8_t> step_log;  // per attempt: 1 accepted, 0 rejected
    bool stopped_early = false;     // stop predicate fired before t_end

    const Tensor& end() const { return states.back(); }
};

// Dormand–Prince 5(4) with the standard controller. Arc length rides along as
// an augmented state component. Per-step error must satisfy
// ‖err‖ ≤ max(atol, rtol·‖state‖).
inline FlowTrace integrate_flow(const VecField& f, const Tensor& x0, double t_end, double rtol,
                                double atol, const StopPredicate& stop = nullptr) {
    require(t_end >= 0.0, "integrate_flow: t_end must be nonnegative");
    require(rtol > 0.0 && atol > 0.0, "integrate_flow: tolerances must be positive");
    require_all_finite(x0.data(), x0.size(), "integrate_flow initial state");

    const int n = static_cast<int>(x0.size());

    FlowTrace trace;
    trace.times.push_back(0.0);
    trace.states.push_back(x0);
    trace.arc_length.push_back(0.0);
    if (t_end == 0.0 || (stop && stop(x0))) {
        trace.stopped_early = t_end != 0.0;
        return trace;
    }

    // augmented RHS: d/dt [x; l] = [F(x); ‖F(x)‖]
    auto rhs = [&](const Tensor& y) {
        Tensor x_part = Tensor::zeros(n, 1);
        for (int i = 0; i < n; ++i) x_part[i] = y[i];
        Tensor fx = f(x_part);
        require(static_cast<int>(fx.size()) == n, "integrate_flow: field changed dimension");
        Tensor out = Tensor::zeros(n + 1, 1);
        double speed_sq = 0.0;
        for (int i = 0; i < n; ++i) {
            out[i] = fx[i];
            speed_sq += fx[i] * fx[i];
        }
        out[n] = std::sqrt(speed_sq);
        return out;
    };

    // Dormand–Prince coefficients
    static const double a2[] = {1.0 / 5};
    static const double a3[] = {3.0 / 40, 9.0 / 40};
    static const double a4[] = {44.0 / 45, -56.0 / 15, 32.0 / 9};
    static const double a5[] = {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729};
    static const double a6[] = {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176,
                                -5103.0 / 18656};
    static const double b5[] = {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784,
                                11.0 / 84, 0.0};
    static const double b4[] = {5179.0 / 57600, 0.0,           7571.0 / 16695, 393.0 / 640,
                                -92097.0 / 339200, 187.0 / 2100, 1.0 / 40};

    Tensor y = Tensor::zeros(n + 1, 1);
    for (int i = 0; i < n; ++i) y[i] = x0[i];

    double t = 0.0;
    double h = std::min(t_end, 1e-2);
    long attempts = 0;

    while (t < t_end) {
        if (++attempts > 1000000) throw NumericError("budget error: flow integration exceeded 1e6 step attempts");
        if (h < 1e-14) throw NumericError("stiffness error: flow integration step size underflow");
        h = std::min(h, t_end - t);

        Tensor k_list[7];
        k_list[0] = rhs(y);
        auto advance = [&](const double* coeff, int count) {
            Tensor arg = y;
            for (int s = 0; s < count; ++s)
                for (int i = 0; i <= n; ++i) arg[i] += h * coeff[s] * k_list[s][i];
            return rhs(arg);
        };
        k_list[1] = advance(a2, 1);
        k_list[2] = advance(a3, 2);
        k_list[3] = advance(a4, 3);
        k_list[4] = advance(a5, 4);
        k_list[5] = advance(a6, 5);
        // 7th stage is the 5th-order solution itself (FSAL structure)
        Tensor y5 = y;
        for (int s = 0; s < 6; ++s)
            for (int i = 0; i <= n; ++i) y5[i] += h * b5[s] * k_list[s][i];
        k_list[6] = rhs(y5);

        double err_sq = 0.0, state_sq = 0.0;
        for (int i = 0; i <= n; ++i) {
            double e = 0.0;
            for (int s = 0; s < 7; ++s) e += h * (b5[s] - b4[s]) * k_list[s][i];
            err_sq += e * e;
            state_sq += y[i] * y[i];
        }
        double err = std::sqrt(err_sq);
        double tol = std::max(atol, rtol * std::sqrt(state_sq));
        if (!std::isfinite(err)) throw NumericError("flow integration produced a non-finite state");

        if (err <= tol) {
            t += h;
            y = y5;
            trace.times.push_back(t);
            Tensor x_now = Tensor::zeros(n, 1);
            for (int i = 0; i < n; ++i) x_now[i] = y[i];
            trace.states.push_back(x_now);
            trace.arc_length.push_back(y[n]);
            trace.accepted_steps += 1;
            trace.step_log.push_back(1);
            if (stop && stop(x_now)) {
                trace.stopped_early = true;
                break;
            }
        } else {
            trace.rejected_steps += 1;
            trace.step_log.push_back(0);
        }

        double ratio = err > 0.0 ? std::pow(tol / err, 0.2) : 5.0;
        h *= std::min(5.0, std::max(0.2, 0.9 * ratio));
    }
    return trace;
}

// ---- model-backed pointwise evaluation -------------------------------------------
//
// Persistent scratch tape so repeated field evaluations do not re-copy network
// parameters; each call truncates back to the bound-parameter watermark.

class ModelFields {
  public:
    explicit ModelFields(const FrameModel& model)
        : n_(model.n), m_(model.m), bound_(bind_model(tape_, model, /*as_leaves=*/false)) {
        mark_ = tape_.mark();
    }

    int fields() const { return m_; }

    Tensor field(int i, const Tensor& z) {
        require(i >= 0 && i < m_, "field index out of range");
        tape_.reset_to_mark(mark_);
        Var zv = tape_.constant(z);
        return tape_.value(BoundModel::field(bound_.field_stack(zv), i, n_));
    }

    Tensor horizons(const Tensor& z) {
        tape_.reset_to_mark(mark_);
        return tape_.value(bound_.horizons(tape_.constant(z)));
    }

    Tensor combined(const Tensor& z) {
        tape_.reset_to_mark(mark_);
        return tape_.value(bound_.combined_velocity(tape_.constant(z)));
    }

    VecField field_fn(int i) {
        return [this, i](const Tensor& z) { return field(i, z); };
    }

    VecField combined_fn() {
        return [this](const Tensor& z) { return combined(z); };
    }

  private:
    Tape tape_;
    int n_, m_;
    BoundModel bound_;
    Tape::Mark mark_;
};

// ---- flow-consistency checks ------------------------------------------------------

// Distance between (a) the sequential flows, field i run for times[i], and
// (b) the combined field integrated for `horizon` (stopping early once its
// speed drops below 1e-6 — the combined flow reaches its fixed point only as
// t → ∞).
inline double composed_vs_combined_residual(const std::vector<VecField>& fields,
                                            const std::vector<double>& times,
                                            const VecField& combined, const Tensor& x0,
                                            double horizon, double rtol = 1e-8,
                                            double atol = 1e-8) {
    require(fields.size() == times.size(), "composed flows: one time per field");
    Tensor z = x0;
    for (size_t i = 0; i < fields.size(); ++i) {
        require(times[i] >= 0.0, "composed flows: times must be nonnegative");
        z = integrate_flow(fields[i], z, times[i], rtol, atol).end();
    }

    StopPredicate slow = [&](const Tensor& p) {
        Tensor v = combined(p);
        return std::sqrt(v.dot(v)) < 1e-6;
    };
    Tensor zc = integrate_flow(combined, x0, horizon, rtol, atol, slow).end();

    Tensor d = Tensor::zeros(static_cast<int>(x0.size()), 1);
    for (size_t i = 0; i < x0.size(); ++i) d[i] = z[i] - zc[i];
    return std::sqrt(d.dot(d));
}

inline double composed_vs_combined_flow_check(const FrameModel& model, const Tensor& x,
                                              double horizon, double rtol = 1e-8,
                                              double atol = 1e-8) {
    ModelFields mf(model);
    Tensor horizons = mf.horizons(x);
    std::vector<VecField> fields;
    std::vector<double> times;
    for (int i = 0; i < model.m; ++i) {
        fields.push_back(mf.field_fn(i));
        times.push_back(horizons[i]);
    }
    return composed_vs_combined_residual(fields, times, mf.combined_fn(), x, horizon, rtol, atol);
}

// Equal-time flows of a field with positive-semidefinite Lie derivative must
// not contract pairwise distances.
inline bool equal_time_noncontraction_check(const VecField& f, const Tensor& x, const Tensor& y,
                                            double t, double rtol = 1e-8, double atol = 1e-8) {
    require(x.size() == y.size(), "noncontraction check: dimension mismatch");
    Tensor fx = integrate_flow(f, x, t, rtol, atol).end();
    Tensor fy = integrate_flow(f, y, t, rtol, atol).end();
    double before_sq = 0.0, after_sq = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        before_sq += (x[i] - y[i]) * (x[i] - y[i]);
        after_sq += (fx[i] - fy[i]) * (fx[i] - fy[i]);
    }
    return std::sqrt(after_sq) >= std::sqrt(before_sq) * (1.0 - 1e-6);
}

} // namespace frameflow
