#pragma once
// Five-term training objective.
//
// Per sample x with a drawn field index i and time t:
//
//   L_c      = || sum_i T_i(u) F_i(u)  -  du/dt ||^2     (trajectory matching)
//   R_lambda = spectral non-contraction penalty of field i at z
//   R_comm   = sum_{i != j} ||[F_i, F_j](z)||^2 T_i(z) T_j(z)
//   R_time   = || S o (JT(z) F(z) + I_m) ||_F^2          (unit-speed clocks)
//   R_metric = m * ( <grad sigma_i(z), F_i(z)> T_i(z) )^2
//
// where (u, du/dt) come from the learned interpolant at (t, x), z = u is the
// trajectory point, and S rescales off-diagonal entries by
// 1 / (||F_j|| * ||grad T_i||), floored at 1e-8.
//
// The total is  L_c + alpha R_lambda + beta R_comm + zeta R_time + eta R_metric,
// averaged over the batch.  Per-sample randomness (field index, time, probe
// seed) comes from a counter-based stream keyed on the step seed and a hash of
// the sample's coordinates, so results are independent of batch order.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <frameflow/model.hpp>
#include <frameflow/spectral.hpp>

namespace frameflow {

struct LossWeights {
    double alpha = 1.0;  // spectral non-contraction
    double beta = 1.0;   // commutativity
    double zeta = 1.0;   // time consistency
    double eta = 0.0;    // conformal-rate magnitude
};

struct LossBreakdown {
    double l_c = 0.0;
    double r_lambda = 0.0;
    double r_commute = 0.0;
    double r_time = 0.0;
    double r_metric = 0.0;
    LossWeights weights;
    double total = 0.0;
    // Draw for a single sample; -1 marks a batch aggregate.
    int sampled_i = -1;
    double sampled_t = -1.0;
};

// ---------------------------------------------------------------------------
// Per-sample randomness.
// ---------------------------------------------------------------------------

struct SampleDraw {
    int field_index = 0;   // 0-based
    double time = 0.0;     // in [0,1]
    uint64_t probe_seed = 0;
};

namespace detail {

// FNV-1a over the raw coordinate bytes: ties a sample's draw to its content,
// making batch results independent of sample order.
inline uint64_t hash_point(const Tensor& x) {
    uint64_t h = 1469598103934665603ull;
    const auto* p = reinterpret_cast<const unsigned char*>(x.data());
    const size_t bytes = static_cast<size_t>(x.rows()) * x.cols() * sizeof(double);
    for (size_t b = 0; b < bytes; ++b) {
        h ^= p[b];
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace detail

inline SampleDraw draw_for_sample(uint64_t step_seed, const Tensor& x, int m) {
    require(m >= 1, "sample draw: need at least one field");
    Rng rng = Rng::stream({step_seed, detail::hash_point(x)});
    SampleDraw d;
    d.field_index = rng.uniform_int(0, m - 1);
    d.time = rng.uniform();
    d.probe_seed = rng.next_u64();
    return d;
}

// ---------------------------------------------------------------------------
// Individual terms (tape-level; differentiable).
// ---------------------------------------------------------------------------

// || combined_velocity(u) - du/dt ||^2 at interpolation time tt.
inline Var flow_matching_loss(Tape& tp, const BoundModel& bm, const Tensor& x, double tt) {
    BoundModel::Interp ip = bm.interpolant(tt, tp.constant(x));
    Var matched = bm.combined_velocity(ip.u);
    return sq_norm(sub(matched, ip.du_dt));
}

// sum_{i != j} ||[F_i, F_j](z)||^2 T_i(z) T_j(z); zero when m = 1.
inline Var commute_regularizer(Tape& tp, const BoundModel& bm, Var z) {
    const int n = bm.n, m = bm.m;
    if (m < 2) return tp.constant_scalar(0.0);

    Var stack = bm.field_stack(z);
    Var horizons = bm.horizons(z);
    // One forward-mode pass per field gives J_stack * F_i, i.e. the derivative
    // of every field along F_i at once.
    std::vector<Var> along;
    along.reserve(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        Var fi = BoundModel::field(stack, i, n);
        along.push_back(bm.f(make_dual(z, fi)).d);
    }

    Var acc{};
    for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < m; ++j) {
            Var bracket = sub(slice(along[static_cast<size_t>(i)], j * n, n),
                              slice(along[static_cast<size_t>(j)], i * n, n));
            Var ti = slice(horizons, i, 1);
            Var tj = slice(horizons, j, 1);
            Var term = mul(mul(sq_norm(bracket), ti), tj);
            acc = acc.valid() ? add(acc, term) : term;
        }
    return mul_c(acc, 2.0);  // both orderings of each pair contribute equally
}

// || S o (JT F + I_m) ||_F^2 with off-diagonal rescaling by
// 1/(||F_j|| ||grad T_i||), both norms floored at 1e-8.
inline Var time_regularizer(Tape& tp, const BoundModel& bm, Var z) {
    const int n = bm.n, m = bm.m;
    Var stack = bm.field_stack(z);
    Var horizons = bm.horizons(z);

    auto basis_m = [&](int i) {
        Tensor e(m, 1);
        e[static_cast<size_t>(i)] = 1.0;
        return tp.constant(e);
    };

    // Rows of JT via one reverse sweep per clock output.
    std::array<Var, 1> wrt{z};
    Var jt{};          // m x n
    Var grad_inv{};    // m x 1, 1/||grad T_i||
    for (int i = 0; i < m; ++i) {
        Var gi = tp.grad_graph(horizons, wrt, basis_m(i))[0];
        Var row = outer(basis_m(i), gi);
        jt = jt.valid() ? add(jt, row) : row;
        Var inv = div(tp.constant_scalar(1.0), norm_floored(gi, 1e-8));
        grad_inv = grad_inv.valid() ? concat2(grad_inv, inv) : inv;
    }

    Var f_mat{};       // n x m, columns F_i
    Var field_inv{};   // m x 1, 1/||F_j||
    for (int j = 0; j < m; ++j) {
        Var fj = BoundModel::field(stack, j, n);
        Var colj = outer(fj, basis_m(j));
        f_mat = f_mat.valid() ? add(f_mat, colj) : colj;
        Var inv = div(tp.constant_scalar(1.0), norm_floored(fj, 1e-8));
        field_inv = field_inv.valid() ? concat2(field_inv, inv) : inv;
    }

    Tensor eye(m, m), off(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) {
            eye(i, j) = (i == j) ? 1.0 : 0.0;
            off(i, j) = (i == j) ? 0.0 : 1.0;
        }
    Var residual = add(matmul(jt, f_mat), tp.constant(eye));
    Var scaling = add(mul(outer(grad_inv, field_inv), tp.constant(off)), tp.constant(eye));
    return sum(square(mul(scaling, residual)));
}

// m * ( <grad sigma_i(z), F_i(z)> T_i(z) )^2; zero under the inactive stub.
inline Var metric_regularizer(Tape& tp, const BoundModel& bm, Var z, int i) {
    require(i >= 0 && i < bm.m, "metric regularizer: field index out of range");
    if (!bm.sigma.has_value()) return tp.constant_scalar(0.0);
    Var fi = BoundModel::field(bm.field_stack(z), i, bm.n);
    DualVar sd = (*bm.sigma)(make_dual(z, fi));
    Var rate = slice(sd.d, i, 1);
    Var ti = slice(bm.horizons(z), i, 1);
    return mul_c(square(mul(rate, ti)), static_cast<double>(bm.m));
}

namespace detail {

// Field i (and conformal component i) of a bound model as standalone
// callables for the spectral penalty.
struct FieldChunk {
    const BoundMlp* net;
    int offset, len;
    template <class V>
    V operator()(V x) const {
        return slice((*net)(x), offset, len);
    }
};

struct ScalarChunk {
    const BoundMlp* net;
    int index;
    template <class V>
    V operator()(V x) const {
        return slice((*net)(x), index, 1);
    }
};

}  // namespace detail

// Spectral non-contraction penalty of field i at z, weighted by T_i(z).
inline Var lambda_regularizer(Tape& tp, const BoundModel& bm, Var z, int i,
                              const SpectralPenaltySpec& spec, uint64_t probe_seed) {
    require(i >= 0 && i < bm.m, "spectral regularizer: field index out of range");
    Var ti = slice(bm.horizons(z), i, 1);
    detail::FieldChunk field{&bm.f, i * bm.n, bm.n};
    if (bm.sigma.has_value()) {
        detail::ScalarChunk sc{&*bm.sigma, i};
        return psd_penalty(tp, field, sc, ti, z, spec, probe_seed);
    }
    return psd_penalty(tp, field, ti, z, spec, probe_seed);
}

// ---------------------------------------------------------------------------
// Assembled objective.
// ---------------------------------------------------------------------------

struct SampleLoss {
    Var total;             // tape-level weighted sum, ready for a backward sweep
    LossBreakdown parts;   // numeric values of each term
};

inline SampleLoss sample_loss(Tape& tp, const BoundModel& bm, const Tensor& x,
                              uint64_t step_seed, const LossWeights& w,
                              const SpectralPenaltySpec& spec) {
    require(x.rows() == bm.n && x.cols() == 1, "sample loss: point has wrong dimension");
    SampleDraw draw = draw_for_sample(step_seed, x, bm.m);

    // The interpolant is shared: L_c matches velocities along it and the
    // regularizers are evaluated at the trajectory point z = u.
    BoundModel::Interp ip = bm.interpolant(draw.time, tp.constant(x));
    Var z = ip.u;
    Var lc = sq_norm(sub(bm.combined_velocity(z), ip.du_dt));
    Var rl = lambda_regularizer(tp, bm, z, draw.field_index, spec, draw.probe_seed);
    Var rc = commute_regularizer(tp, bm, z);
    Var rt = time_regularizer(tp, bm, z);
    Var rm = metric_regularizer(tp, bm, z, draw.field_index);

    SampleLoss out;
    out.parts.l_c = tp.value(lc)[0];
    out.parts.r_lambda = tp.value(rl)[0];
    out.parts.r_commute = tp.value(rc)[0];
    out.parts.r_time = tp.value(rt)[0];
    out.parts.r_metric = tp.value(rm)[0];
    auto check = [](double v, const char* term) {
        if (!std::isfinite(v))
            throw NumericError(std::string("loss: ") + term + " term is not finite");
    };
    check(out.parts.l_c, "flow-matching");
    check(out.parts.r_lambda, "spectral");
    check(out.parts.r_commute, "commutativity");
    check(out.parts.r_time, "time-consistency");
    check(out.parts.r_metric, "conformal-rate");

    out.total = add(lc, add(mul_c(rl, w.alpha),
                            add(mul_c(rc, w.beta),
                                add(mul_c(rt, w.zeta), mul_c(rm, w.eta)))));
    out.parts.weights = w;
    out.parts.total = tp.value(out.total)[0];
    out.parts.sampled_i = draw.field_index;
    out.parts.sampled_t = draw.time;
    return out;
}

// Gradients with the same storage layout as the model parameters.
struct ModelGradients {
    std::vector<Tensor> f_w, f_b, t_w, t_b, s_w, s_b, sigma_w, sigma_b;
    Tensor c;
};

namespace detail {

inline void collect_net_gradients(const Tape& tp, const BoundMlp& net, std::vector<Tensor>& gw,
                                  std::vector<Tensor>& gb) {
    gw.clear();
    gb.clear();
    for (const Var& w : net.w) gw.push_back(tp.adjoint(w));
    for (const Var& b : net.b) gb.push_back(tp.adjoint(b));
}

}  // namespace detail

// Average loss over a batch; when `grads` is non-null the model is bound as
// leaves and the averaged gradient is written there.  One tape serves the
// whole batch: per-sample scratch is reclaimed after each backward sweep while
// leaf adjoints keep accumulating.
inline LossBreakdown batch_loss(const FrameModel& model, std::span<const Tensor> batch,
                                uint64_t step_seed, const LossWeights& w,
                                const SpectralPenaltySpec& spec, ModelGradients* grads = nullptr) {
    require(!batch.empty(), "batch loss: empty batch");

    Tape tp;
    BoundModel bm = bind_model(tp, model, /*as_leaves=*/grads != nullptr);
    Tape::Mark mark = tp.mark();

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    LossBreakdown agg;
    for (const Tensor& x : batch) {
        SampleLoss sl = sample_loss(tp, bm, x, step_seed, w, spec);
        agg.l_c += sl.parts.l_c * inv_b;
        agg.r_lambda += sl.parts.r_lambda * inv_b;
        agg.r_commute += sl.parts.r_commute * inv_b;
        agg.r_time += sl.parts.r_time * inv_b;
        agg.r_metric += sl.parts.r_metric * inv_b;
        agg.total += sl.parts.total * inv_b;
        if (batch.size() == 1) {
            agg.sampled_i = sl.parts.sampled_i;
            agg.sampled_t = sl.parts.sampled_t;
        }
        if (grads != nullptr) tp.backward_accumulate(sl.total, inv_b);
        tp.reset_to_mark(mark);
    }
    agg.weights = w;

    if (grads != nullptr) {
        detail::collect_net_gradients(tp, bm.f, grads->f_w, grads->f_b);
        detail::collect_net_gradients(tp, bm.t, grads->t_w, grads->t_b);
        detail::collect_net_gradients(tp, bm.s, grads->s_w, grads->s_b);
        if (bm.sigma.has_value())
            detail::collect_net_gradients(tp, *bm.sigma, grads->sigma_w, grads->sigma_b);
        else {
            grads->sigma_w.clear();
            grads->sigma_b.clear();
        }
        grads->c = tp.adjoint(bm.c);
    }
    return agg;
}

}  // namespace frameflow
