#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <frameflow/datasets.hpp>

using namespace frameflow;

namespace {

const std::vector<std::string> kNames = {"plane4d", "sphere", "torus", "swiss_roll",
                                         "paraboloid"};

// Scalar implicit function whose zero set is the manifold (all five families
// have codimension one). Used to cross-check the analytic normals against
// finite differences.
double implicit_fn(const ManifoldDataset& ds, const Tensor& x) {
    if (ds.name == "plane4d") {
        Tensor nrm = ds.normal_at(x);
        double g = 0.0;
        for (int i = 0; i < 4; ++i) g += nrm(i, 0) * x[static_cast<size_t>(i)];
        return g;
    }
    if (ds.name == "sphere") {
        return x[0] * x[0] + x[1] * x[1] + x[2] * x[2] - 1.0;
    }
    if (ds.name == "torus") {
        const double s = 1.0 / 3.0;
        const double ring = std::hypot(x[0], x[1]) / s - 2.0;
        const double vert = x[2] / s;
        return ring * ring + vert * vert - 1.0;
    }
    if (ds.name == "swiss_roll") {
        const double planar = 9.0 * std::acos(-1.0);
        const double s = 2.0 / std::sqrt(planar * planar + 100.0);
        const double phi = std::hypot(x[0], x[2]) / s;
        return x[2] * std::cos(phi) - x[0] * std::sin(phi);
    }
    if (ds.name == "paraboloid") {
        return x[2] - x[0] * x[0] + x[1] * x[1];
    }
    FAIL("unknown dataset name in test helper");
    return 0.0;
}

double max_abs_offdiag_error(const Tensor& gram) {
    double worst = 0.0;
    for (int i = 0; i < gram.rows(); ++i)
        for (int j = 0; j < gram.cols(); ++j) {
            const double want = (i == j) ? 1.0 : 0.0;
            worst = std::max(worst, std::abs(gram(i, j) - want));
        }
    return worst;
}

Tensor frame_gram(const ManifoldDataset& ds, const Tensor& x) {
    Tensor tang = ds.tangent_at(x);
    Tensor nrm = ds.normal_at(x);
    const int n = ds.n, k = tang.cols() + nrm.cols();
    Tensor basis(n, k);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < tang.cols(); ++j) basis(i, j) = tang(i, j);
        for (int j = 0; j < nrm.cols(); ++j) basis(i, tang.cols() + j) = nrm(i, j);
    }
    Tensor gram(k, k);
    for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b) {
            double d = 0.0;
            for (int i = 0; i < n; ++i) d += basis(i, a) * basis(i, b);
            gram(a, b) = d;
        }
    return gram;
}

}  // namespace

TEST_CASE("unknown dataset name is rejected", "[datasets]") {
    CHECK_THROWS_AS(make_dataset("klein_bottle", {}, 7), ConfigError);
    CHECK_THROWS_AS(make_dataset("", {}, 7), ConfigError);
}

TEST_CASE("datasets honor requested counts and advertise their shape", "[datasets]") {
    struct Expect {
        const char* name;
        int n, m_true;
    };
    const Expect expected[] = {{"plane4d", 4, 3},
                               {"sphere", 3, 2},
                               {"torus", 3, 2},
                               {"swiss_roll", 3, 2},
                               {"paraboloid", 3, 2}};
    for (const auto& e : expected) {
        ManifoldDataset ds = make_dataset(e.name, {57, 13}, 42);
        INFO(e.name);
        CHECK(ds.name == e.name);
        CHECK(ds.n == e.n);
        CHECK(ds.m_true == e.m_true);
        CHECK(ds.seed == 42);
        REQUIRE(ds.train.size() == 57);
        REQUIRE(ds.test.size() == 13);
        for (const Tensor& p : ds.train) {
            REQUIRE(p.rows() == e.n);
            REQUIRE(p.cols() == 1);
            REQUIRE(p.all_finite());
        }
        for (const Tensor& p : ds.test) {
            REQUIRE(p.rows() == e.n);
            REQUIRE(p.cols() == 1);
        }
    }
}

TEST_CASE("default counts are 10000 train and 2000 test", "[datasets]") {
    ManifoldDataset ds = make_dataset("sphere", DatasetCounts{}, 3);
    CHECK(ds.train.size() == 10000);
    CHECK(ds.test.size() == 2000);
}

TEST_CASE("sphere samples lie on the unit sphere", "[datasets]") {
    ManifoldDataset ds = make_dataset("sphere", {2000, 300}, 11);
    for (const Tensor& p : ds.train) REQUIRE(std::abs(p.norm() - 1.0) <= 1e-12);
    for (const Tensor& p : ds.test) REQUIRE(std::abs(p.norm() - 1.0) <= 1e-12);
}

TEST_CASE("paraboloid normal at the origin is the vertical axis", "[datasets]") {
    ManifoldDataset ds = make_dataset("paraboloid", {10, 0}, 5);
    Tensor origin(3, 1);
    Tensor nrm = ds.normal_at(origin);
    REQUIRE(nrm.rows() == 3);
    REQUIRE(nrm.cols() == 1);
    const double sign = nrm(2, 0) >= 0.0 ? 1.0 : -1.0;
    CHECK(std::abs(nrm(0, 0)) <= 1e-14);
    CHECK(std::abs(nrm(1, 0)) <= 1e-14);
    CHECK(std::abs(sign * nrm(2, 0) - 1.0) <= 1e-14);
}

TEST_CASE("torus height averages to zero over uniform angles", "[datasets]") {
    ManifoldDataset ds = make_dataset("torus", {10000, 0}, 19);
    double mean = 0.0;
    for (const Tensor& p : ds.train) mean += p[2];
    mean /= static_cast<double>(ds.train.size());
    double var = 0.0;
    for (const Tensor& p : ds.train) var += (p[2] - mean) * (p[2] - mean);
    var /= static_cast<double>(ds.train.size() - 1);
    const double sigma_of_mean = std::sqrt(var / static_cast<double>(ds.train.size()));
    CHECK(std::abs(mean) <= 3.0 * sigma_of_mean);
}

TEST_CASE("tangent and normal frames are orthonormal at every sample", "[datasets]") {
    for (const auto& name : kNames) {
        ManifoldDataset ds = make_dataset(name, {400, 100}, 23);
        INFO(name);
        double worst = 0.0;
        auto visit = [&](const std::vector<Tensor>& pts) {
            for (const Tensor& p : pts) {
                Tensor tang = ds.tangent_at(p);
                Tensor nrm = ds.normal_at(p);
                REQUIRE(tang.rows() == ds.n);
                REQUIRE(tang.cols() == ds.m_true);
                REQUIRE(nrm.rows() == ds.n);
                REQUIRE(nrm.cols() == ds.n - ds.m_true);
                worst = std::max(worst, max_abs_offdiag_error(frame_gram(ds, p)));
            }
        };
        visit(ds.train);
        visit(ds.test);
        CHECK(worst <= 1e-10);
    }
}

TEST_CASE("every sample satisfies its defining equation", "[datasets]") {
    for (const auto& name : kNames) {
        ManifoldDataset ds = make_dataset(name, {2000, 400}, 31);
        INFO(name);
        double worst = 0.0;
        for (const Tensor& p : ds.train) worst = std::max(worst, std::abs(implicit_fn(ds, p)));
        for (const Tensor& p : ds.test) worst = std::max(worst, std::abs(implicit_fn(ds, p)));
        CHECK(worst <= 1e-12);
    }
}

TEST_CASE("analytic normals match finite-difference gradients of the implicit function",
          "[datasets]") {
    const double eps = 1e-6;
    for (const auto& name : kNames) {
        ManifoldDataset ds = make_dataset(name, {100, 0}, 47);
        INFO(name);
        double worst_angle = 0.0;
        for (const Tensor& p : ds.train) {
            Tensor grad(ds.n, 1);
            for (int i = 0; i < ds.n; ++i) {
                Tensor hi = p, lo = p;
                hi[static_cast<size_t>(i)] += eps;
                lo[static_cast<size_t>(i)] -= eps;
                grad[static_cast<size_t>(i)] = (implicit_fn(ds, hi) - implicit_fn(ds, lo)) / (2.0 * eps);
            }
            const double gn = grad.norm();
            REQUIRE(gn > 0.0);
            Tensor nrm = ds.normal_at(p);
            double dot = 0.0;
            for (int i = 0; i < ds.n; ++i) dot += grad[static_cast<size_t>(i)] / gn * nrm(i, 0);
            const double angle = std::acos(std::min(1.0, std::abs(dot)));
            worst_angle = std::max(worst_angle, angle);
        }
        CHECK(worst_angle <= 1e-4);
    }
}

TEST_CASE("generation is deterministic given the seed", "[datasets]") {
    for (const auto& name : kNames) {
        ManifoldDataset a = make_dataset(name, {64, 16}, 99);
        ManifoldDataset b = make_dataset(name, {64, 16}, 99);
        ManifoldDataset c = make_dataset(name, {64, 16}, 100);
        INFO(name);
        bool identical = true;
        for (size_t k = 0; k < a.train.size(); ++k)
            for (size_t i = 0; i < a.train[k].size(); ++i)
                if (a.train[k][i] != b.train[k][i]) identical = false;
        for (size_t k = 0; k < a.test.size(); ++k)
            for (size_t i = 0; i < a.test[k].size(); ++i)
                if (a.test[k][i] != b.test[k][i]) identical = false;
        CHECK(identical);
        bool differs = false;
        for (size_t k = 0; k < a.train.size() && !differs; ++k)
            for (size_t i = 0; i < a.train[k].size(); ++i)
                if (a.train[k][i] != c.train[k][i]) differs = true;
        CHECK(differs);
    }
}

TEST_CASE("train and test splits come from distinct streams", "[datasets]") {
    ManifoldDataset ds = make_dataset("sphere", {5, 5}, 77);
    bool differs = false;
    for (size_t i = 0; i < ds.train[0].size(); ++i)
        if (ds.train[0][i] != ds.test[0][i]) differs = true;
    CHECK(differs);
}

TEST_CASE("ambient diameter is near two", "[datasets]") {
    // The reference point C is initialized inside [-0.5, 0.5]^n, so every
    // family is positioned around the origin at roughly unit radius. The
    // paraboloid's domain is pinned exactly, giving it a slightly larger
    // spread (corner-to-corner sqrt(8)).
    for (const auto& name : kNames) {
        ManifoldDataset ds = make_dataset(name, {600, 0}, 13);
        INFO(name);
        double diam = 0.0;
        for (size_t a = 0; a < ds.train.size(); ++a)
            for (size_t b = a + 1; b < ds.train.size(); ++b) {
                double d2 = 0.0;
                for (size_t i = 0; i < ds.train[a].size(); ++i) {
                    const double d = ds.train[a][i] - ds.train[b][i];
                    d2 += d * d;
                }
                diam = std::max(diam, d2);
            }
        diam = std::sqrt(diam);
        if (ds.name == "paraboloid") {
            CHECK(diam >= 2.0);
            CHECK(diam <= 2.0 * std::sqrt(2.0) + 1e-12);
        } else {
            CHECK(diam >= 1.5);
            CHECK(diam <= 2.0 + 1e-9);
        }
    }
}

TEST_CASE("csv export and import round-trip points exactly", "[datasets]") {
    ManifoldDataset ds = make_dataset("torus", {25, 0}, 3);
    const std::string path = "datasets_roundtrip_test.csv";
    save_points_csv(path, ds.train);

    std::ifstream check(path);
    std::string header;
    REQUIRE(std::getline(check, header));
    CHECK(header == "x0,x1,x2");
    check.close();

    std::vector<Tensor> loaded = load_points_csv(path);
    REQUIRE(loaded.size() == ds.train.size());
    for (size_t k = 0; k < loaded.size(); ++k) {
        REQUIRE(loaded[k].rows() == 3);
        for (size_t i = 0; i < loaded[k].size(); ++i) REQUIRE(loaded[k][i] == ds.train[k][i]);
    }
    std::remove(path.c_str());
}

TEST_CASE("csv import rejects malformed files", "[datasets]") {
    const std::string path = "datasets_malformed_test.csv";
    auto write_file = [&](const char* text) {
        std::ofstream out(path);
        out << text;
    };

    write_file("y0,y1\n1,2\n");
    CHECK_THROWS_AS(load_points_csv(path), ConfigError);

    write_file("x0,x1\n1,2,3\n");
    CHECK_THROWS_AS(load_points_csv(path), ConfigError);

    write_file("x0,x1\n1\n");
    CHECK_THROWS_AS(load_points_csv(path), ConfigError);

    write_file("x0,x1\n1,banana\n");
    CHECK_THROWS_AS(load_points_csv(path), ConfigError);

    CHECK_THROWS_AS(load_points_csv("definitely_missing_file_xyz.csv"), ConfigError);
    std::remove(path.c_str());
}
