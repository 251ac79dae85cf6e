#include <catch2/catch_amalgamated.hpp>

#include <frameflow/geometry.hpp>
#include <frameflow/autodiff.hpp>

#include "oracles.hpp"

using namespace frameflow;
using oracles::max_abs_diff;
using oracles::random_tensor;

namespace {

DualField constant_field(Tensor v) {
    return [v](Tape& t, DualVar x) {
        (void)x;
        return dual_const(t.constant(v));
    };
}

// rotation field (−x₂, x₁)
DualField rotation_field() {
    return [](Tape& t, DualVar x) {
        (void)t;
        return concat2(neg(slice(x, 1, 1)), slice(x, 0, 1));
    };
}

double norm_of(const Tensor& v) { return std::sqrt(v.dot(v)); }

Tensor diff(const Tensor& a, const Tensor& b) {
    Tensor d = Tensor::zeros(a.rows(), a.cols());
    for (size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return d;
}

} // namespace

TEST_CASE("bracket of two constant fields vanishes") {
    DualField f1 = constant_field(Tensor{1.0, 2.0, 3.0});
    DualField f2 = constant_field(Tensor{-0.5, 0.0, 4.0});
    Tensor b = lie_bracket(f1, f2, Tensor{0.3, -0.1, 0.9});
    CHECK(norm_of(b) == 0.0);
}

TEST_CASE("bracket of the identity field with a constant is minus the constant") {
    DualField ident = [](Tape& t, DualVar x) {
        (void)t;
        return x;
    };
    Tensor c{0.7, -1.3};
    DualField constf = constant_field(c);
    Tensor b = lie_bracket(ident, constf, Tensor{2.0, 5.0});
    CHECK(b[0] == Catch::Approx(-c[0]));
    CHECK(b[1] == Catch::Approx(-c[1]));
}

TEST_CASE("bracket of polynomial fields matches the symbolic expansion") {
    // X = (−x₂, x₁), Y = (x₁, x₂): J_Y = I, J_X = [[0,−1],[1,0]]
    // [X,Y] = J_Y X − J_X Y = (−x₂, x₁) − (−x₂, x₁) = 0 … the rotation field is
    // a symmetry of the radial field. Use the quadratic pair instead:
    // X = (x₂², x₁), Y = (x₁x₂, −x₂).
    DualField x_field = [](Tape& t, DualVar x) {
        (void)t;
        return concat2(square(slice(x, 1, 1)), slice(x, 0, 1));
    };
    DualField y_field = [](Tape& t, DualVar x) {
        (void)t;
        return concat2(mul(slice(x, 0, 1), slice(x, 1, 1)), neg(slice(x, 1, 1)));
    };
    auto symbolic = [](double x1, double x2) {
        // J_Y = [[x₂, x₁],[0,−1]], J_X = [[0, 2x₂],[1, 0]]
        // [X,Y] = J_Y·X − J_X·Y = (x₂·x₂² + x₁·x₁, −x₁) − (−2x₂², x₁x₂)
        return Tensor{x2 * x2 * x2 + x1 * x1 + 2.0 * x2 * x2, -x1 - x1 * x2};
    };
    Rng rng(4);
    for (int trial = 0; trial < 25; ++trial) {
        Tensor p = random_tensor(rng, 2, 1, 1.5);
        Tensor got = lie_bracket(x_field, y_field, p);
        Tensor want = symbolic(p[0], p[1]);
        CHECK(max_abs_diff(got, want) < 1e-12);
    }
}

TEST_CASE("bracket also matches a finite-difference oracle on those fields") {
    DualField x_field = [](Tape& t, DualVar x) {
        (void)t;
        return concat2(square(slice(x, 1, 1)), slice(x, 0, 1));
    };
    DualField y_field = [](Tape& t, DualVar x) {
        (void)t;
        return concat2(mul(slice(x, 0, 1), slice(x, 1, 1)), neg(slice(x, 1, 1)));
    };
    auto plain_x = [](const Tensor& p) { return Tensor{p[1] * p[1], p[0]}; };
    auto plain_y = [](const Tensor& p) { return Tensor{p[0] * p[1], -p[1]}; };

    Rng rng(5);
    Tensor p = random_tensor(rng, 2);
    Tensor jx = oracles::fd_jacobian(plain_x, p);
    Tensor jy = oracles::fd_jacobian(plain_y, p);
    Tensor fx = plain_x(p), fy = plain_y(p);
    Tensor want = Tensor::zeros(2, 1);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) want[i] += jy(i, j) * fx[j] - jx(i, j) * fy[j];
    CHECK(max_abs_diff(lie_bracket(x_field, y_field, p), want) < 1e-6);
}

TEST_CASE("bracket is antisymmetric for random network fields") {
    Rng rng(11);
    MlpSpec spec = mlp_spec(3, 3, 8, 2);
    Mlp net_a = Mlp::init(spec, rng);
    Mlp net_b = Mlp::init(spec, rng);
    DualField fa = [&](Tape& t, DualVar x) { return bind(t, net_a, false)(x); };
    DualField fb = [&](Tape& t, DualVar x) { return bind(t, net_b, false)(x); };

    for (int trial = 0; trial < 10; ++trial) {
        Tensor p = random_tensor(rng, 3);
        Tensor ab = lie_bracket(fa, fb, p);
        Tensor ba = lie_bracket(fb, fa, p);
        for (size_t i = 0; i < ab.size(); ++i) CHECK(std::abs(ab[i] + ba[i]) <= 1e-12);
    }
}

TEST_CASE("jacobi identity holds under nested finite-difference evaluation") {
    // Three polynomial fields on ℝ²
    auto px = [](const Tensor& p) { return Tensor{p[1] * p[1], p[0]}; };
    auto py = [](const Tensor& p) { return Tensor{p[0] * p[1], -p[1]}; };
    auto pz = [](const Tensor& p) { return Tensor{p[0] + p[1] * p[1], p[0] * p[0]}; };
    using PlainField = std::function<Tensor(const Tensor&)>;

    // plain bracket via FD jacobians
    auto fd_bracket = [](const PlainField& a, const PlainField& b, const Tensor& p) {
        Tensor ja = oracles::fd_jacobian(a, p);
        Tensor jb = oracles::fd_jacobian(b, p);
        Tensor va = a(p), vb = b(p);
        Tensor out = Tensor::zeros(2, 1);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) out[i] += jb(i, j) * va[j] - ja(i, j) * vb[j];
        return out;
    };

    auto nested = [&](const PlainField& a, const PlainField& b, const PlainField& c) {
        // [a, [b, c]] evaluated with the outer bracket by finite differences
        return [&, a, b, c](const Tensor& p) {
            PlainField inner = [&, b, c](const Tensor& q) { return fd_bracket(b, c, q); };
            return fd_bracket(a, inner, p);
        };
    };

    Rng rng(6);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor p = random_tensor(rng, 2, 1, 0.8);
        Tensor total = Tensor::zeros(2, 1);
        Tensor t1 = nested(px, py, pz)(p);
        Tensor t2 = nested(py, pz, px)(p);
        Tensor t3 = nested(pz, px, py)(p);
        for (int i = 0; i < 2; ++i) total[i] = t1[i] + t2[i] + t3[i];
        CHECK(norm_of(total) < 1e-6);
    }
}

TEST_CASE("lie-derivative operator of a rotation field is zero") {
    Tensor a = lie_derivative_matrix(rotation_field(), nullptr, 1.0, Tensor{0.4, -0.9});
    CHECK(max_abs_diff(a, Tensor::zeros(2, 2)) < 1e-14);
}

TEST_CASE("lie-derivative operator of a linear contraction is minus twice the identity") {
    DualField shrink = [](Tape& t, DualVar x) {
        (void)t;
        return neg(x);
    };
    Tensor a = lie_derivative_matrix(shrink, nullptr, 1.0, Tensor{1.0, 2.0, 3.0});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(a(i, j) == Catch::Approx(i == j ? -2.0 : 0.0).margin(1e-14));
}

TEST_CASE("conformal term adds the directional derivative of sigma") {
    DualField ident = [](Tape& t, DualVar x) {
        (void)t;
        return x;
    };
    DualField sig = [](Tape& t, DualVar x) {
        return dot(x, dual_const(t.constant(Tensor{1.0, 0.0})));
    };
    Tensor a = lie_derivative_matrix(ident, &sig, 1.0, Tensor{2.0, 0.0});
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) CHECK(a(i, j) == Catch::Approx(i == j ? 4.0 : 0.0).margin(1e-12));
}

TEST_CASE("sigma-free operator equals twice the symmetric jacobian part") {
    Rng rng(12);
    MlpSpec spec = mlp_spec(3, 3, 8, 2);
    Mlp net = Mlp::init(spec, rng);
    DualField f = [&](Tape& t, DualVar x) { return bind(t, net, false)(x); };

    Tensor p = random_tensor(rng, 3);
    Tensor a = lie_derivative_matrix(f, nullptr, 1.0, p);
    Tensor j = jacobian([&](Tape& t, DualVar x) { return bind(t, net, false)(x); }, p);
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) CHECK(std::abs(a(i, k) - (j(i, k) + j(k, i))) <= 1e-10);

    Tensor a_neg = lie_derivative_matrix(f, nullptr, -1.0, p);
    CHECK(max_abs_diff(a_neg, Tensor::zeros(3, 3)) ==
          Catch::Approx(max_abs_diff(a, Tensor::zeros(3, 3))));
}

TEST_CASE("flow of a linear decay halves the state at log 2") {
    VecField decay = [](const Tensor& x) {
        Tensor v = Tensor::zeros(x.rows(), 1);
        for (size_t i = 0; i < x.size(); ++i) v[i] = -x[i];
        return v;
    };
    Tensor x0{1.0, -2.0, 0.5};
    FlowTrace trace = integrate_flow(decay, x0, std::log(2.0), 1e-10, 1e-10);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(trace.end()[i] - 0.5 * x0[i]) < 1e-8);
    CHECK(trace.states[0][0] == x0[0]);
    for (size_t i = 1; i < trace.times.size(); ++i) {
        CHECK(trace.times[i] > trace.times[i - 1]);
        CHECK(trace.arc_length[i] >= trace.arc_length[i - 1]);
    }
}

TEST_CASE("flow of a constant field is exact") {
    Tensor v{0.3, -1.1};
    VecField constf = [&](const Tensor&) { return v; };
    Tensor x0{5.0, 5.0};
    double tau = 2.5;
    FlowTrace trace = integrate_flow(constf, x0, tau, 1e-8, 1e-8);
    CHECK(std::abs(trace.end()[0] - (x0[0] + tau * v[0])) < 1e-13);
    CHECK(std::abs(trace.end()[1] - (x0[1] + tau * v[1])) < 1e-13);
}

TEST_CASE("quarter turn of the unit-speed circular field has arc length pi/2") {
    VecField circ = [](const Tensor& x) {
        double r = std::sqrt(x[0] * x[0] + x[1] * x[1]);
        return Tensor{-x[1] / r, x[0] / r};
    };
    FlowTrace trace = integrate_flow(circ, Tensor{1.0, 0.0}, M_PI / 2.0, 1e-10, 1e-10);
    CHECK(std::abs(trace.arc_length.back() - M_PI / 2.0) < 1e-6);
    CHECK(std::abs(trace.end()[0]) < 1e-8);
    CHECK(std::abs(trace.end()[1] - 1.0) < 1e-8);
}

TEST_CASE("endpoint error scales with at least fourth-order convergence") {
    VecField decay = [](const Tensor& x) { return Tensor{-x[0]}; };
    Tensor x0{1.0};
    double t_end = 1.0;
    double exact = std::exp(-1.0);

    std::vector<double> log_h, log_e;
    for (double tol : {1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8}) {
        FlowTrace trace = integrate_flow(decay, x0, t_end, tol, tol);
        double err = std::abs(trace.end()[0] - exact);
        if (err <= 0.0) continue;
        double mean_h = t_end / static_cast<double>(trace.accepted_steps);
        log_h.push_back(std::log(mean_h));
        log_e.push_back(std::log(err));
    }
    REQUIRE(log_h.size() >= 4);
    // least-squares slope of log err against log h
    double mx = 0, my = 0;
    for (size_t i = 0; i < log_h.size(); ++i) {
        mx += log_h[i];
        my += log_e[i];
    }
    mx /= static_cast<double>(log_h.size());
    my /= static_cast<double>(log_h.size());
    double num = 0, den = 0;
    for (size_t i = 0; i < log_h.size(); ++i) {
        num += (log_h[i] - mx) * (log_e[i] - my);
        den += (log_h[i] - mx) * (log_h[i] - mx);
    }
    double slope = num / den;
    CHECK(slope >= 4.0);
}

TEST_CASE("stiffness and budget guards trip") {
    // A field whose magnitude explodes so violently the controller underflows.
    VecField blowup = [](const Tensor& x) {
        double v = std::exp(x[0] * x[0]);
        return Tensor{v * 1e120};
    };
    CHECK_THROWS_AS(integrate_flow(blowup, Tensor{1.0}, 1.0, 1e-12, 1e-12), NumericError);

    CHECK_THROWS_AS(integrate_flow([](const Tensor& x) { return x; }, Tensor{1.0}, -1.0, 1e-8, 1e-8),
                    ContractError);
}

TEST_CASE("composed and combined flows agree for constant commuting fields") {
    VecField f1 = [](const Tensor&) { return Tensor{1.0, 0.0}; };
    VecField f2 = [](const Tensor&) { return Tensor{0.0, 1.0}; };
    VecField both = [](const Tensor&) { return Tensor{1.0, 1.0}; };
    double res = composed_vs_combined_residual({f1, f2}, {1.0, 1.0}, both, Tensor{0.2, -0.4}, 1.0);
    CHECK(res <= 1e-8);
}

TEST_CASE("non-commuting fields show the expected second-order discrepancy") {
    // F₁ = (x₂, 0), F₂ = (0, x₁); [F₁,F₂] = (−x₁, x₂).
    double eps = 0.05;
    VecField f1 = [](const Tensor& p) { return Tensor{p[1], 0.0}; };
    VecField f2 = [](const Tensor& p) { return Tensor{0.0, p[0]}; };
    VecField both = [&](const Tensor& p) { return Tensor{eps * p[1], eps * p[0]}; };
    Tensor x0{1.0, 0.7};

    double res = composed_vs_combined_residual({f1, f2}, {eps, eps}, both, x0, 1.0);
    Tensor bracket{-x0[0], x0[1]};
    double leading = 0.5 * eps * eps * norm_of(bracket);
    CHECK(res > 0.0);
    CHECK(res == Catch::Approx(leading).epsilon(0.2));
}

TEST_CASE("model-backed composed flow check runs end to end") {
    ModelConfig cfg;
    cfg.hidden_width = 8;
    cfg.hidden_layers = 2;
    FrameModel model = init_frame_model(2, 2, cfg, 17);
    double res = composed_vs_combined_flow_check(model, Tensor{0.1, 0.2}, 1.0, 1e-8, 1e-8);
    CHECK(std::isfinite(res));
    CHECK(res >= 0.0);
}

TEST_CASE("expansion flows do not contract equal-time distances") {
    VecField grow = [](const Tensor& x) { return x; };
    Tensor a{0.0, 1.0}, b{0.5, 0.3};
    CHECK(equal_time_noncontraction_check(grow, a, b, 1.0));

    // and the ratio is e for the linear expansion
    Tensor fa = integrate_flow(grow, a, 1.0, 1e-10, 1e-10).end();
    Tensor fb = integrate_flow(grow, b, 1.0, 1e-10, 1e-10).end();
    CHECK(norm_of(diff(fa, fb)) / norm_of(diff(a, b)) == Catch::Approx(std::exp(1.0)).epsilon(1e-7));
}

TEST_CASE("rotations keep equal-time distances exactly") {
    VecField rot = [](const Tensor& x) { return Tensor{-x[1], x[0]}; };
    Tensor a{1.0, 0.0}, b{0.0, 0.6};
    CHECK(equal_time_noncontraction_check(rot, a, b, 2.0));
    Tensor fa = integrate_flow(rot, a, 2.0, 1e-10, 1e-10).end();
    Tensor fb = integrate_flow(rot, b, 2.0, 1e-10, 1e-10).end();
    CHECK(norm_of(diff(fa, fb)) == Catch::Approx(norm_of(diff(a, b))).epsilon(1e-8));
}

TEST_CASE("contractions fail the noncontraction check") {
    VecField shrink = [](const Tensor& x) {
        Tensor v = Tensor::zeros(x.rows(), 1);
        for (size_t i = 0; i < x.size(); ++i) v[i] = -x[i];
        return v;
    };
    CHECK_FALSE(equal_time_noncontraction_check(shrink, Tensor{1.0, 0.0}, Tensor{0.0, 1.0}, 0.5));
}
