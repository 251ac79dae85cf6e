#include <catch2/catch_amalgamated.hpp>

#include <frameflow/autodiff.hpp>
#include <frameflow/dual.hpp>
#include <frameflow/tape.hpp>

#include "oracles.hpp"

using namespace frameflow;
using oracles::fd_grad;
using oracles::fd_jvp;
using oracles::max_abs_diff;
using oracles::max_rel_err;
using oracles::random_tensor;
using oracles::RefNet;

TEST_CASE("grad of dot with self is 2x") {
    Tensor x{1.0, 2.0};
    Tensor g = grad([](Tape&, Var v) { return dot(v, v); }, x);
    CHECK(g[0] == Catch::Approx(2.0));
    CHECK(g[1] == Catch::Approx(4.0));
}

TEST_CASE("grad of a constant function is zero") {
    Tensor x{0.3, -1.2, 4.0};
    Tensor g = grad([](Tape& t, Var) { return t.constant_scalar(7.5); }, x);
    for (size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("grad rejects non-scalar outputs") {
    Tensor x{1.0, 2.0};
    CHECK_THROWS_AS(grad([](Tape&, Var v) { return add(v, v); }, x), ContractError);
}

TEST_CASE("grad rejects non-finite input") {
    Tensor x{1.0, std::nan("")};
    CHECK_THROWS_AS(grad([](Tape&, Var v) { return dot(v, v); }, x), NumericError);
}

TEST_CASE("grad of an MLP scalar head matches finite differences") {
    Rng rng(42);
    RefNet net = RefNet::make(rng, 4, 8, 1);
    auto on_tape = [&](Tape& t, Var x) {
        Var h = tanh(add(matvec(t.constant(net.w1), x), t.constant(net.b1)));
        Var y = add(matvec(t.constant(net.w2), h), t.constant(net.b2));
        return slice(y, 0, 1);
    };
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_tensor(rng, 4);
        Tensor want = fd_grad([&](const Tensor& p) { return net(p)[0]; }, x);
        Tensor got = grad(on_tape, x);
        CHECK(max_rel_err(got, want) < 1e-5);
    }
}

TEST_CASE("jvp of a linear map picks out columns") {
    Rng rng(7);
    Tensor a = random_tensor(rng, 3, 3);
    auto f = [&](Tape& t, DualVar x) { return matvec(t.constant(a), x); };
    Tensor e1{1.0, 0.0, 0.0};
    Tensor x = random_tensor(rng, 3);
    Tensor jv = jvp(f, x, e1);
    for (int i = 0; i < 3; ++i) CHECK(jv[i] == Catch::Approx(a(i, 0)));
}

TEST_CASE("jvp of identity returns the direction") {
    auto f = [](Tape&, DualVar x) { return x; };
    Tensor x{0.5, -0.5};
    Tensor v{2.0, 3.0};
    Tensor jv = jvp(f, x, v);
    CHECK(jv[0] == 2.0);
    CHECK(jv[1] == 3.0);
}

TEST_CASE("jvp rejects a direction with the wrong shape") {
    auto f = [](Tape&, DualVar x) { return x; };
    CHECK_THROWS_AS(jvp(f, Tensor{1.0, 2.0}, Tensor{1.0}), ContractError);
}

TEST_CASE("jvp of a tanh MLP matches central differences") {
    Rng rng(11);
    RefNet net = RefNet::make(rng, 3, 6, 3);
    auto f = [&](Tape& t, DualVar x) {
        DualVar h = tanh(add(matvec(t.constant(net.w1), x), t.constant(net.b1)));
        return add(matvec(t.constant(net.w2), h), t.constant(net.b2));
    };
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_tensor(rng, 3);
        Tensor v = random_tensor(rng, 3);
        Tensor want = fd_jvp([&](const Tensor& p) { return net(p); }, x, v);
        Tensor got = jvp(f, x, v);
        CHECK(max_rel_err(got, want, 1e-6) < 1e-5);
    }
}

TEST_CASE("jacobian of a linear map is the matrix itself") {
    Rng rng(3);
    Tensor a = random_tensor(rng, 4, 4);
    auto f = [&](Tape& t, DualVar x) { return matvec(t.constant(a), x); };
    Tensor j = jacobian(f, random_tensor(rng, 4));
    CHECK(max_abs_diff(j, a) < 1e-14);
}

TEST_CASE("jacobian of identity is the identity") {
    auto f = [](Tape&, DualVar x) { return x; };
    Tensor j = jacobian(f, Tensor{1.0, 2.0, 3.0});
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) CHECK(j(i, k) == (i == k ? 1.0 : 0.0));
}

TEST_CASE("jacobian of an MLP matches finite-difference columns") {
    Rng rng(13);
    RefNet net = RefNet::make(rng, 3, 10, 3);
    auto f = [&](Tape& t, DualVar x) {
        DualVar h = tanh(add(matvec(t.constant(net.w1), x), t.constant(net.b1)));
        return add(matvec(t.constant(net.w2), h), t.constant(net.b2));
    };
    Tensor x = random_tensor(rng, 3);
    Tensor want = oracles::fd_jacobian([&](const Tensor& p) { return net(p); }, x);
    Tensor got = jacobian(f, x);
    CHECK(max_rel_err(got, want, 1e-6) < 1e-5);
}

namespace {

// Scalar projections of each primitive for the finite-difference sweep.
// Every entry builds y = <r, prim(x-stuff)> on the tape and the same thing
// in plain doubles via the tape's own forward values (primal values are
// checked separately by construction-time evaluation).
struct PrimitiveCase {
    const char* name;
    int in_len;
    std::function<Var(Tape&, Var)> build;
    bool kinky;                             // piecewise op: keep FD probes away from the kink
    std::function<bool(const Tensor&)> ok;  // optional extra input filter

    PrimitiveCase(const char* nm, int len, std::function<Var(Tape&, Var)> b, bool k = false,
                  std::function<bool(const Tensor&)> o = {})
        : name(nm), in_len(len), build(std::move(b)), kinky(k), ok(std::move(o)) {}
};

double eval_scalar(const PrimitiveCase& c, const Tensor& x) {
    Tape t;
    Var xv = t.leaf(x);
    return c.build(t, xv).scalar();
}

} // namespace

TEST_CASE("every differentiable primitive passes a finite-difference gradient check") {
    Rng rng(1234);
    Tensor r6 = random_tensor(rng, 6);
    Tensor r9 = random_tensor(rng, 9);
    Tensor r3 = random_tensor(rng, 3);
    Tensor r2 = random_tensor(rng, 2);
    Tensor m23 = random_tensor(rng, 2, 3);
    Tensor v3 = random_tensor(rng, 3);
    Tensor v2 = random_tensor(rng, 2);

    std::vector<PrimitiveCase> cases;
    auto head = [&](Var y, Tape& t, const Tensor& r) { return dot(y, t.constant(r)); };

    cases.push_back({"add", 6, [&](Tape& t, Var x) {
                         return head(add(slice(x, 0, 3), slice(x, 3, 3)), t, r3);
                     }});
    cases.push_back({"sub", 6, [&](Tape& t, Var x) {
                         return head(sub(slice(x, 0, 3), slice(x, 3, 3)), t, r3);
                     }});
    cases.push_back({"mul", 6, [&](Tape& t, Var x) {
                         return head(mul(slice(x, 0, 3), slice(x, 3, 3)), t, r3);
                     }});
    cases.push_back({"div", 6, [&](Tape& t, Var x) {
                         return head(div(slice(x, 0, 3), add_c(square(slice(x, 3, 3)), 1.0)), t, r3);
                     }});
    cases.push_back({"neg", 3, [&](Tape& t, Var x) { return head(neg(x), t, r3); }});
    cases.push_back({"add_c", 3, [&](Tape& t, Var x) { return head(add_c(x, 0.7), t, r3); }});
    cases.push_back({"mul_c", 3, [&](Tape& t, Var x) { return head(mul_c(x, -1.3), t, r3); }});
    cases.push_back({"max_c", 3, [&](Tape& t, Var x) { return head(max_c(x, 0.05), t, r3); }, true});
    cases.push_back({"scale", 4, [&](Tape& t, Var x) {
                         return head(scale(slice(x, 0, 1), slice(x, 1, 3)), t, r3);
                     }});
    cases.push_back({"bcast", 1, [&](Tape& t, Var x) {
                         return head(t.bcast(slice(x, 0, 1), 3, 2), t, r6);
                     }});
    cases.push_back({"matvec", 9, [&](Tape& t, Var x) {
                         return head(matvec(t.constant(m23), slice(x, 0, 3)), t, r2);
                     }});
    cases.push_back({"matvec_w", 6, [&](Tape& t, Var x) {
                         // weight side of matvec: reshape x into 2x3 via slices
                         Var w = add(t.constant(Tensor::zeros(2, 3)),
                                     add(t.slice_embed(slice(x, 0, 3), 0, 2, 3), t.slice_embed(slice(x, 3, 3), 3, 2, 3)));
                         return head(matvec(w, t.constant(v3)), t, r2);
                     }});
    cases.push_back({"mat_t_vec", 2, [&](Tape& t, Var x) {
                         return head(mat_t_vec(t.constant(m23), x), t, r3);
                     }});
    Tensor mm_b32 = random_tensor(rng, 3, 2), mm_r4a = random_tensor(rng, 4);
    Tensor mm_b22 = random_tensor(rng, 2, 2), mm_r6a = random_tensor(rng, 6);
    Tensor mm_b23 = random_tensor(rng, 2, 3), mm_r4b = random_tensor(rng, 4);
    Tensor mm_b22b = random_tensor(rng, 2, 2), mm_r6b = random_tensor(rng, 6);
    cases.push_back({"matmul", 6, [&, mm_b32, mm_r4a](Tape& t, Var x) {
                         Var a = t.slice_embed(x, 0, 2, 3); // x as 2x3
                         return head(matmul(a, t.constant(mm_b32)), t, mm_r4a);
                     }});
    cases.push_back({"matmul_ta", 6, [&, mm_b22, mm_r6a](Tape& t, Var x) {
                         Var a = t.slice_embed(x, 0, 2, 3);
                         return head(matmul(a, t.constant(mm_b22), true, false), t, mm_r6a);
                     }});
    cases.push_back({"matmul_tb", 6, [&, mm_b23, mm_r4b](Tape& t, Var x) {
                         Var a = t.slice_embed(x, 0, 2, 3);
                         return head(matmul(a, t.constant(mm_b23), false, true), t, mm_r4b);
                     }});
    cases.push_back({"matmul_tatb", 6, [&, mm_b22b, mm_r6b](Tape& t, Var x) {
                         Var a = t.slice_embed(x, 0, 2, 3);
                         return head(matmul(a, t.constant(mm_b22b), true, true), t, mm_r6b);
                     }});
    cases.push_back({"outer", 5, [&](Tape& t, Var x) {
                         return head(outer(slice(x, 0, 2), slice(x, 2, 3)), t, r6);
                     }});
    cases.push_back({"transpose", 6, [&](Tape& t, Var x) {
                         return head(transpose(t.slice_embed(x, 0, 2, 3)), t, r6);
                     }});
    cases.push_back({"dot", 6, [&](Tape&, Var x) {
                         return dot(slice(x, 0, 3), slice(x, 3, 3));
                     }});
    cases.push_back({"sum", 3, [&](Tape&, Var x) { return sum(x); }});
    cases.push_back({"tanh", 3, [&](Tape& t, Var x) { return head(tanh(x), t, r3); }});
    cases.push_back({"sigmoid", 3, [&](Tape& t, Var x) { return head(sigmoid(x), t, r3); }});
    cases.push_back({"softplus", 3, [&](Tape& t, Var x) { return head(softplus(x), t, r3); }});
    cases.push_back({"exp", 3, [&](Tape& t, Var x) { return head(exp(x), t, r3); }});
    cases.push_back({"relu", 3, [&](Tape& t, Var x) { return head(relu(x), t, r3); }, true});
    cases.push_back({"sqrt", 3, [&](Tape& t, Var x) {
                         return head(sqrt(add_c(square(x), 0.5)), t, r3);
                     }});
    cases.push_back({"square", 3, [&](Tape& t, Var x) { return head(square(x), t, r3); }});
    cases.push_back({"concat2", 5, [&](Tape& t, Var x) {
                         return head(concat2(slice(x, 0, 2), slice(x, 2, 3)), t,
                                     Tensor{0.3, -0.2, 0.9, 1.1, -0.7});
                     }});
    cases.push_back({"slice", 6, [&](Tape& t, Var x) { return head(slice(x, 2, 3), t, r3); }});
    cases.push_back({"slice_embed", 3, [&](Tape& t, Var x) {
                         return head(t.slice_embed(x, 2, 6, 1), t, r6);
                     }});
    cases.push_back({"col", 6, [&](Tape& t, Var x) {
                         return head(col(t.slice_embed(x, 0, 2, 3), 1), t, r2);
                     }});
    cases.push_back({"col_embed", 2, [&](Tape& t, Var x) {
                         return head(t.col_embed(x, 0, 3), t, r6);
                     }});
    // Sorted eigenvalues are non-differentiable at crossings; keep the FD
    // oracle away from nearly-degenerate spectra.
    auto well_separated = [](const Tensor& x) {
        double s[9], lam[3];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) s[i * 3 + j] = x[i * 3 + j] + x[j * 3 + i];
        sym_eigen_jacobi(3, s, lam, nullptr);
        return lam[1] - lam[0] > 0.1 && lam[2] - lam[1] > 0.1;
    };
    cases.push_back({"sym_eig_vals", 9,
                     [&](Tape& t, Var x) {
                         Var a = t.slice_embed(x, 0, 3, 3);
                         Var s = add(a, transpose(a));
                         return head(sym_eig_vals(s), t, r3);
                     },
                     false, well_separated});

    for (const auto& c : cases) {
        DYNAMIC_SECTION("primitive " << c.name) {
            int checked = 0;
            for (int trial = 0; trial < 100; ++trial) {
                Tensor x = random_tensor(rng, c.in_len);
                if (c.kinky) {
                    bool near_kink = false;
                    for (size_t i = 0; i < x.size(); ++i)
                        if (std::abs(x[i]) < 0.08 || std::abs(x[i] - 0.05) < 0.08) near_kink = true;
                    if (near_kink) continue;
                }
                if (c.ok && !c.ok(x)) continue;

                Tensor want = fd_grad([&](const Tensor& p) { return eval_scalar(c, p); }, x);
                Tape t;
                Var xv = t.leaf(x);
                Var y = c.build(t, xv);
                t.backward(y);
                Tensor got = t.adjoint(xv);
                REQUIRE(max_rel_err(got, want, 1e-5) < 1e-5);
                ++checked;
            }
            CHECK(checked >= 50);
        }
    }
}

TEST_CASE("gradient of eigenvector quadrature weights matches finite differences") {
    // Rotation-invariant function of the eigenvectors: sum_k (e1^T v_k)^2 λ_k,
    // i.e. first-component quadrature weights against the spectrum.
    Rng rng(99);
    auto scalar_fn = [](Tape& t, Var x) {
        Var a = t.slice_embed(x, 0, 3, 3);
        Var s = add(a, transpose(a));
        Var lam = sym_eig_vals(s);
        Var vecs = sym_eig_vecs(s);
        Var first_row = slice(vecs, 0, 3); // row 0: first components of each eigenvector
        return dot(square(first_row), lam);
    };
    // fixed, well-separated spectrum
    Tensor x(9, 1);
    Tensor base{3.0, 0.4, -0.1, 0.4, 1.0, 0.2, -0.1, 0.2, -2.0};
    for (int i = 0; i < 9; ++i) x[i] = 0.5 * base[i];

    Tensor want = fd_grad(
        [&](const Tensor& p) {
            Tape t;
            Var xv = t.leaf(p);
            return scalar_fn(t, xv).scalar();
        },
        x, 1e-6);
    Tape t;
    Var xv = t.leaf(x);
    Var y = scalar_fn(t, xv);
    t.backward(y);
    CHECK(max_abs_diff(t.adjoint(xv), want) < 1e-7);
}

TEST_CASE("grad is linear in the function") {
    Rng rng(5);
    Tensor x = random_tensor(rng, 4);
    double a = 1.7, b = -0.4;
    auto f = [](Tape&, Var v) { return dot(v, v); };
    auto g = [](Tape&, Var v) { return sum(tanh(v)); };
    auto combo = [&](Tape& t, Var v) { return add(mul_c(f(t, v), a), mul_c(g(t, v), b)); };

    Tensor gf = grad(f, x), gg = grad(g, x), gc = grad(combo, x);
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(oracles::rel_err(gc[i], a * gf[i] + b * gg[i]) < 1e-12);
}

TEST_CASE("jvp and vjp are transpose-consistent") {
    Rng rng(21);
    RefNet net = RefNet::make(rng, 4, 7, 3);
    auto fwd = [&](Tape& t, DualVar x) {
        DualVar h = tanh(add(matvec(t.constant(net.w1), x), t.constant(net.b1)));
        return add(matvec(t.constant(net.w2), h), t.constant(net.b2));
    };
    auto fwd_plain = [&](Tape& t, Var x) {
        Var h = tanh(add(matvec(t.constant(net.w1), x), t.constant(net.b1)));
        return add(matvec(t.constant(net.w2), h), t.constant(net.b2));
    };
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor(rng, 4);
        Tensor v = random_tensor(rng, 4);
        Tensor u = random_tensor(rng, 3);
        Tensor jv = jvp(fwd, x, v);
        Tensor jtu = vjp(fwd_plain, x, u);
        CHECK(oracles::rel_err(u.dot(jv), jtu.dot(v)) < 1e-12);
    }
}

TEST_CASE("replaying a tape reproduces every value bit-for-bit") {
    Rng rng(31);
    Tape t;
    Var x = t.leaf(random_tensor(rng, 5));
    Var w = t.constant(random_tensor(rng, 5, 5));
    Var y = tanh(matvec(w, x));
    Var z = dot(y, y);
    Var q = sqrt(add_c(z, 1.0));
    Var lam = sym_eig_vals(add(w, transpose(w)));
    Var out = add(q, sum(lam));

    std::vector<double> before;
    for (Var v : {x, y, z, q, lam, out})
        for (int i = 0; i < v.size(); ++i) before.push_back(v.vals()[i]);

    t.replay();

    std::vector<double> after;
    for (Var v : {x, y, z, q, lam, out})
        for (int i = 0; i < v.size(); ++i) after.push_back(v.vals()[i]);

    REQUIRE(before.size() == after.size());
    for (size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
}

TEST_CASE("graph-building backward agrees with the numeric sweep") {
    Rng rng(77);
    RefNet net = RefNet::make(rng, 4, 6, 1);
    Tensor x = random_tensor(rng, 4);

    Tape t;
    Var xv = t.leaf(x);
    Var h = tanh(add(matvec(t.constant(net.w1), xv), t.constant(net.b1)));
    Var y = slice(add(matvec(t.constant(net.w2), h), t.constant(net.b2)), 0, 1);

    Var g_graph = t.grad_graph(y, std::array<Var, 1>{xv})[0];
    t.backward(y);
    CHECK(max_abs_diff(t.value(g_graph), t.adjoint(xv)) < 1e-14);
}

TEST_CASE("second-order: gradient flows through an inner reverse sweep") {
    // L(x) = <c, ∇g(x)> with g = sum(tanh(x)); analytic dL/dx = c ∘ tanh''(x).
    Rng rng(55);
    Tensor x = random_tensor(rng, 5);
    Tensor c = random_tensor(rng, 5);

    Tape t;
    Var xv = t.leaf(x);
    Var g = sum(tanh(xv));
    Var inner = t.grad_graph(g, std::array<Var, 1>{xv})[0];
    Var loss = dot(inner, t.constant(c));
    t.backward(loss);
    Tensor got = t.adjoint(xv);

    for (int i = 0; i < 5; ++i) {
        double th = std::tanh(x[i]);
        double want = c[i] * (-2.0 * th * (1.0 - th * th));
        CHECK(oracles::rel_err(got[i], want) < 1e-10);
    }
}

TEST_CASE("second-order: forward-over-reverse matches finite differences") {
    // d/dε [ <w, f(x+εv)> gradient pullback ] — differentiate a vjp result.
    Rng rng(66);
    RefNet net = RefNet::make(rng, 3, 5, 3);
    Tensor x = random_tensor(rng, 3);
    Tensor w = random_tensor(rng, 3);
    Tensor dir = random_tensor(rng, 3);

    // value under test: d/dx [ <grad_x <w, f(x)>, dir> ] vs FD of the pullback
    auto pullback = [&](const Tensor& p) {
        Tape t;
        Var xv = t.leaf(p);
        Var h = tanh(add(matvec(t.constant(net.w1), xv), t.constant(net.b1)));
        Var y = add(matvec(t.constant(net.w2), h), t.constant(net.b2));
        Var s = dot(y, t.constant(w));
        Var g = t.grad_graph(s, std::array<Var, 1>{xv})[0];
        return t.value(g);
    };
    Tensor want = fd_grad([&](const Tensor& p) { return pullback(p).dot(dir); }, x, 1e-6);

    Tape t;
    Var xv = t.leaf(x);
    Var h = tanh(add(matvec(t.constant(net.w1), xv), t.constant(net.b1)));
    Var y = add(matvec(t.constant(net.w2), h), t.constant(net.b2));
    Var s = dot(y, t.constant(w));
    Var g = t.grad_graph(s, std::array<Var, 1>{xv})[0];
    Var proj = dot(g, t.constant(dir));
    t.backward(proj);
    CHECK(max_rel_err(t.adjoint(xv), want, 1e-7) < 1e-5);
}

TEST_CASE("reset_to_mark keeps leaves and discards scratch") {
    Tape t;
    Var p = t.leaf(Tensor{1.0, 2.0});
    auto m = t.mark();
    size_t base_nodes = t.node_count();

    for (int rep = 0; rep < 3; ++rep) {
        Var y = dot(tanh(p), tanh(p));
        t.backward_accumulate(y); // fresh scratch adjoints are zero-initialized
        t.reset_to_mark(m);       // drops scratch values *and* scratch adjoints
        CHECK(t.node_count() == base_nodes);
        CHECK(p.vals()[0] == 1.0);
        CHECK(p.vals()[1] == 2.0);
    }

    // Leaf adjoints accumulated across the three sweeps (never zeroed above):
    Tensor acc = t.adjoint(p);
    Tape t2;
    Var p2 = t2.leaf(Tensor{1.0, 2.0});
    Var y2 = dot(tanh(p2), tanh(p2));
    t2.backward(y2);
    Tensor one = t2.adjoint(p2);
    CHECK(acc[0] == Catch::Approx(3.0 * one[0]));
    CHECK(acc[1] == Catch::Approx(3.0 * one[1]));
}

TEST_CASE("eigendecomposition nodes refuse nested derivative sweeps") {
    Tape t;
    Var x = t.leaf(Tensor{1.0, 0.2, 0.2, 2.0});
    Var a = t.slice_embed(x, 0, 2, 2);
    Var lam = sym_eig_vals(add(a, transpose(a)));
    Var y = sum(lam);
    CHECK_THROWS_AS(t.grad_graph(y, std::array<Var, 1>{x}), ContractError);
}
