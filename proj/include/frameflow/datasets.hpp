#pragma once
// Synthetic manifold samplers with analytic tangent/normal frames.
//
// Five families, every one rescaled/positioned so its ambient diameter is
// about 2 and it straddles the origin (the reference point C is initialized
// in [-0.5, 0.5]^n, so the data must live on that scale):
//
//   plane4d     3-plane through the origin in R^4, random seeded orthonormal
//               basis (never axis-aligned by construction of the seed draw)
//   sphere      unit sphere S^2 in R^3, uniform via normalized Gaussians
//   torus       tube radius 1 around a circle of radius 2, scaled by 1/3;
//               angles sampled uniformly (not area-uniform)
//   swiss_roll  (phi cos phi, h, phi sin phi), phi in [1.5 pi, 4.5 pi],
//               h in [0, 10], centered and scaled to diameter ~ 2
//   paraboloid  x3 = x1^2 - x2^2 over (x1, x2) uniform in [-1, 1]^2
//
// `normal_at` / `tangent_at` return orthonormal frames (columns) spanning the
// normal and tangent spaces at any point on the manifold.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <frameflow/rng.hpp>
#include <frameflow/tensor.hpp>

namespace frameflow {

struct DatasetCounts {
    int train = 10000;
    int test = 2000;
};

struct ManifoldDataset {
    std::string name;
    int n = 0;        // ambient dimension
    int m_true = 0;   // intrinsic dimension
    uint64_t seed = 0;
    std::vector<Tensor> train;
    std::vector<Tensor> test;
    std::function<Tensor(const Tensor&)> normal_at;   // n x (n - m_true)
    std::function<Tensor(const Tensor&)> tangent_at;  // n x m_true
};

namespace detail {

inline void gram_schmidt_columns(Tensor& a) {
    const int n = a.rows(), k = a.cols();
    for (int j = 0; j < k; ++j) {
        for (int p = 0; p < j; ++p) {
            double d = 0.0;
            for (int i = 0; i < n; ++i) d += a(i, j) * a(i, p);
            for (int i = 0; i < n; ++i) a(i, j) -= d * a(i, p);
        }
        double nn = 0.0;
        for (int i = 0; i < n; ++i) nn += a(i, j) * a(i, j);
        nn = std::sqrt(nn);
        require(nn > 1e-12, "dataset: degenerate basis draw");
        for (int i = 0; i < n; ++i) a(i, j) /= nn;
    }
}

inline Tensor column(std::initializer_list<double> vals) {
    Tensor v(static_cast<int>(vals.size()), 1);
    int i = 0;
    for (double x : vals) v[static_cast<size_t>(i++)] = x;
    return v;
}

// Normalized copy of v.
inline Tensor unit(Tensor v) {
    double nn = 0.0;
    for (size_t i = 0; i < v.size(); ++i) nn += v[i] * v[i];
    nn = std::sqrt(nn);
    for (size_t i = 0; i < v.size(); ++i) v[i] /= nn;
    return v;
}

inline Tensor hstack(const std::vector<Tensor>& cols) {
    const int n = cols.front().rows();
    Tensor out(n, static_cast<int>(cols.size()));
    for (size_t j = 0; j < cols.size(); ++j)
        for (int i = 0; i < n; ++i) out(i, static_cast<int>(j)) = cols[j][static_cast<size_t>(i)];
    return out;
}

constexpr double kPi = 3.14159265358979323846;
constexpr double kTorusMajor = 2.0, kTorusMinor = 1.0, kTorusScale = 1.0 / 3.0;
constexpr double kRollPhiLo = 1.5 * kPi, kRollPhiHi = 4.5 * kPi, kRollHeight = 10.0;

inline double roll_scale() {
    const double planar = 2.0 * kRollPhiHi;  // spiral spans [-phi_hi, phi_hi] in x and z
    return 2.0 / std::sqrt(planar * planar + kRollHeight * kRollHeight);
}

inline Tensor roll_point(double phi, double h) {
    const double s = roll_scale();
    return column({s * phi * std::cos(phi), s * (h - 0.5 * kRollHeight), s * phi * std::sin(phi)});
}

inline Tensor torus_point(double theta, double phi) {
    const double ring = kTorusMajor + kTorusMinor * std::cos(theta);
    return column({kTorusScale * ring * std::cos(phi), kTorusScale * ring * std::sin(phi),
                   kTorusScale * kTorusMinor * std::sin(theta)});
}

}  // namespace detail

inline ManifoldDataset make_dataset(const std::string& name, const DatasetCounts& counts,
                                    uint64_t seed) {
    require(counts.train >= 1 && counts.test >= 0, "dataset: counts must be positive");
    ManifoldDataset ds;
    ds.name = name;
    ds.seed = seed;

    auto fill = [&](auto gen) {
        Rng train_rng = Rng::stream({seed, 1});
        Rng test_rng = Rng::stream({seed, 2});
        ds.train.reserve(static_cast<size_t>(counts.train));
        ds.test.reserve(static_cast<size_t>(counts.test));
        for (int i = 0; i < counts.train; ++i) ds.train.push_back(gen(train_rng));
        for (int i = 0; i < counts.test; ++i) ds.test.push_back(gen(test_rng));
    };

    using detail::column;
    using detail::unit;

    if (name == "plane4d") {
        ds.n = 4;
        ds.m_true = 3;
        Rng basis_rng = Rng::stream({seed, 0});
        Tensor basis(4, 4);
        for (size_t i = 0; i < basis.size(); ++i) basis[i] = basis_rng.gaussian();
        detail::gram_schmidt_columns(basis);
        Tensor tang(4, 3), norm(4, 1);
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 3; ++j) tang(i, j) = basis(i, j);
            norm(i, 0) = basis(i, 3);
        }
        // Coefficients span [-1/sqrt(3), 1/sqrt(3)]^3: corner-to-corner
        // distance 2.
        const double half = 1.0 / std::sqrt(3.0);
        fill([tang, half](Rng& rng) {
            Tensor x(4, 1);
            for (int j = 0; j < 3; ++j) {
                double u = rng.uniform(-half, half);
                for (int i = 0; i < 4; ++i) x[static_cast<size_t>(i)] += u * tang(i, j);
            }
            return x;
        });
        ds.tangent_at = [tang](const Tensor&) { return tang; };
        ds.normal_at = [norm](const Tensor&) { return norm; };
        return ds;
    }

    if (name == "sphere") {
        ds.n = 3;
        ds.m_true = 2;
        fill([](Rng& rng) {
            Tensor g(3, 1);
            double nn = 0.0;
            do {
                for (int i = 0; i < 3; ++i) g[static_cast<size_t>(i)] = rng.gaussian();
                nn = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
            } while (nn < 1e-8);
            for (int i = 0; i < 3; ++i) g[static_cast<size_t>(i)] /= nn;
            return g;
        });
        ds.normal_at = [](const Tensor& x) { return unit(x); };
        ds.tangent_at = [](const Tensor& x) {
            Tensor nrm = unit(x);
            // Complete the normal to an orthonormal basis.
            Tensor ref = std::abs(nrm[0]) < 0.9 ? column({1.0, 0.0, 0.0}) : column({0.0, 1.0, 0.0});
            Tensor t1 = column({nrm[1] * ref[2] - nrm[2] * ref[1], nrm[2] * ref[0] - nrm[0] * ref[2],
                                nrm[0] * ref[1] - nrm[1] * ref[0]});
            t1 = unit(t1);
            Tensor t2 = column({nrm[1] * t1[2] - nrm[2] * t1[1], nrm[2] * t1[0] - nrm[0] * t1[2],
                                nrm[0] * t1[1] - nrm[1] * t1[0]});
            return detail::hstack({t1, unit(t2)});
        };
        return ds;
    }

    if (name == "torus") {
        ds.n = 3;
        ds.m_true = 2;
        fill([](Rng& rng) {
            return detail::torus_point(rng.uniform(0.0, 2.0 * detail::kPi),
                                       rng.uniform(0.0, 2.0 * detail::kPi));
        });
        auto angles = [](const Tensor& x, double& theta_cos, double& theta_sin, double& phi) {
            const double ring = std::hypot(x[0], x[1]) / detail::kTorusScale;
            phi = std::atan2(x[1], x[0]);
            theta_cos = (ring - detail::kTorusMajor) / detail::kTorusMinor;
            theta_sin = x[2] / (detail::kTorusScale * detail::kTorusMinor);
        };
        ds.normal_at = [angles](const Tensor& x) {
            double ct, st, phi;
            angles(x, ct, st, phi);
            return unit(column({ct * std::cos(phi), ct * std::sin(phi), st}));
        };
        ds.tangent_at = [angles](const Tensor& x) {
            double ct, st, phi;
            angles(x, ct, st, phi);
            Tensor d_theta = unit(column({-st * std::cos(phi), -st * std::sin(phi), ct}));
            Tensor d_phi = column({-std::sin(phi), std::cos(phi), 0.0});
            return detail::hstack({d_theta, d_phi});
        };
        return ds;
    }

    if (name == "swiss_roll") {
        ds.n = 3;
        ds.m_true = 2;
        fill([](Rng& rng) {
            return detail::roll_point(rng.uniform(detail::kRollPhiLo, detail::kRollPhiHi),
                                      rng.uniform(0.0, detail::kRollHeight));
        });
        auto recover_phi = [](const Tensor& x) {
            return std::hypot(x[0], x[2]) / detail::roll_scale();
        };
        ds.tangent_at = [recover_phi](const Tensor& x) {
            const double phi = recover_phi(x);
            Tensor d_phi = unit(column({std::cos(phi) - phi * std::sin(phi), 0.0,
                                        std::sin(phi) + phi * std::cos(phi)}));
            Tensor d_h = column({0.0, 1.0, 0.0});
            return detail::hstack({d_phi, d_h});
        };
        ds.normal_at = [recover_phi](const Tensor& x) {
            const double phi = recover_phi(x);
            const double tx = std::cos(phi) - phi * std::sin(phi);
            const double tz = std::sin(phi) + phi * std::cos(phi);
            return unit(column({-tz, 0.0, tx}));
        };
        return ds;
    }

    if (name == "paraboloid") {
        ds.n = 3;
        ds.m_true = 2;
        fill([](Rng& rng) {
            const double x1 = rng.uniform(-1.0, 1.0), x2 = rng.uniform(-1.0, 1.0);
            return column({x1, x2, x1 * x1 - x2 * x2});
        });
        ds.normal_at = [](const Tensor& x) {
            return unit(column({-2.0 * x[0], 2.0 * x[1], 1.0}));
        };
        ds.tangent_at = [](const Tensor& x) {
            Tensor t1 = unit(column({1.0, 0.0, 2.0 * x[0]}));
            Tensor t2 = column({0.0, 1.0, -2.0 * x[1]});
            // Orthonormalize t2 against t1 (they are not orthogonal in general).
            double d = t2[0] * t1[0] + t2[1] * t1[1] + t2[2] * t1[2];
            for (int i = 0; i < 3; ++i) t2[static_cast<size_t>(i)] -= d * t1[static_cast<size_t>(i)];
            return detail::hstack({t1, unit(t2)});
        };
        return ds;
    }

    throw ConfigError("dataset: unknown name '" + name + "'");
}

// ---------------------------------------------------------------------------
// CSV import/export (one row per point, header x0..x{n-1}).
// ---------------------------------------------------------------------------

inline void save_points_csv(const std::string& path, const std::vector<Tensor>& points) {
    require(!points.empty(), "csv export: no points");
    std::ofstream out(path);
    if (!out) throw ConfigError("csv export: cannot open '" + path + "'");
    const int n = points.front().rows();
    for (int j = 0; j < n; ++j) out << (j ? "," : "") << "x" << j;
    out << "\n";
    char buf[32];
    for (const Tensor& p : points) {
        require(p.rows() == n && p.cols() == 1, "csv export: inconsistent point shapes");
        for (int j = 0; j < n; ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", p[static_cast<size_t>(j)]);
            out << (j ? "," : "") << buf;
        }
        out << "\n";
    }
    if (!out) throw ConfigError("csv export: write failed for '" + path + "'");
}

inline std::vector<Tensor> load_points_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("csv import: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("csv import: empty file '" + path + "'");
    int n = 0;
    {
        std::stringstream header(line);
        std::string cell;
        while (std::getline(header, cell, ',')) {
            std::string want = "x" + std::to_string(n);
            if (cell != want)
                throw ConfigError("csv import: bad header column '" + cell + "' in '" + path + "'");
            ++n;
        }
        if (n == 0) throw ConfigError("csv import: header has no columns in '" + path + "'");
    }
    std::vector<Tensor> points;
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream row(line);
        std::string cell;
        Tensor p(n, 1);
        int j = 0;
        while (std::getline(row, cell, ',')) {
            if (j >= n) throw ConfigError("csv import: too many columns at line " + std::to_string(lineno));
            size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                throw ConfigError("csv import: bad number '" + cell + "' at line " + std::to_string(lineno));
            }
            if (used != cell.size())
                throw ConfigError("csv import: bad number '" + cell + "' at line " + std::to_string(lineno));
            p[static_cast<size_t>(j++)] = v;
        }
        if (j != n) throw ConfigError("csv import: wrong column count at line " + std::to_string(lineno));
        points.push_back(std::move(p));
    }
    return points;
}

}  // namespace frameflow
