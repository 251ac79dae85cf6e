#pragma once
// Measurements on trained models: tangency angles against analytic frames,
// intrinsic-dimension detection, intrinsic-coordinate extraction, collapse and
// commutation residuals, and regularization-sensitivity sweeps.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <frameflow/geometry.hpp>
#include <frameflow/trainer.hpp>

namespace frameflow {

// ---------------------------------------------------------------------------
// Angular error: deviation of each learned field from the tangent space.
// ---------------------------------------------------------------------------

struct AngularStats {
    double mean_deg = 0.0;
    double std_deg = 0.0;
    size_t count = 0;
};

// Returns the n×k matrix whose columns are the vectors to score at x.
using FrameProvider = std::function<Tensor(const Tensor&)>;

// Deviation from tangency in degrees: asin of the norm of the unit vector's
// projection onto the (orthonormal) normal frame. Zero for a vector in the
// tangent space, 90° for one normal to the manifold. For a one-column normal
// frame this equals |90° − arccos(|⟨v̂, n̂⟩|)|.
inline double tangency_deviation_deg(const Tensor& v, const Tensor& normal_frame) {
    const int n = v.rows();
    require(normal_frame.rows() == n, "angular error: frame/vector dimension mismatch");
    double vn = 0.0;
    for (int i = 0; i < n; ++i) vn += v[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
    vn = std::sqrt(vn);
    require(vn > 0.0, "angular error: zero-norm vector has no direction");
    double proj_sq = 0.0;
    for (int j = 0; j < normal_frame.cols(); ++j) {
        double d = 0.0;
        for (int i = 0; i < n; ++i) d += v[static_cast<size_t>(i)] / vn * normal_frame(i, j);
        proj_sq += d * d;
    }
    const double s = std::min(1.0, std::sqrt(proj_sq));
    return std::asin(s) * (180.0 / 3.14159265358979323846);
}

inline AngularStats angular_error_of(const FrameProvider& frames, const ManifoldDataset& ds,
                                     std::span<const Tensor> points) {
    require(!points.empty(), "angular error: no points");
    double sum = 0.0, sum_sq = 0.0;
    size_t count = 0;
    for (const Tensor& x : points) {
        const Tensor fr = frames(x);
        const Tensor nf = ds.normal_at(x);
        for (int i = 0; i < fr.cols(); ++i) {
            Tensor col(fr.rows(), 1);
            for (int r = 0; r < fr.rows(); ++r) col[static_cast<size_t>(r)] = fr(r, i);
            const double deg = tangency_deviation_deg(col, nf);
            sum += deg;
            sum_sq += deg * deg;
            ++count;
        }
    }
    AngularStats out;
    out.count = count;
    out.mean_deg = sum / static_cast<double>(count);
    if (count > 1) {
        const double var =
            std::max(0.0, (sum_sq - sum * sum / static_cast<double>(count)) /
                              static_cast<double>(count - 1));
        out.std_deg = std::sqrt(var);
    }
    return out;
}

inline AngularStats angular_error(const FrameModel& model, const ManifoldDataset& ds,
                                  std::span<const Tensor> points) {
    FrameProvider frames = [&model](const Tensor& x) { return eval_fields(model, x).f; };
    return angular_error_of(frames, ds, points);
}

inline AngularStats angular_error(const FrameModel& model, const ManifoldDataset& ds) {
    return angular_error(model, ds, ds.test);
}

// ---------------------------------------------------------------------------
// Frame loss on held-out points (trajectory-matching term only).
// ---------------------------------------------------------------------------

// Mean of the trajectory-matching loss over the given points. Deterministic:
// the per-sample time draws are content-addressed from loss_seed.
inline double frame_loss(const FrameModel& model, std::span<const Tensor> points,
                         uint64_t loss_seed = 0) {
    require(!points.empty(), "frame loss: no points");
    LossWeights w;  // defaults; l_c is reported unweighted
    SpectralPenaltySpec spec;
    return batch_loss(model, points, loss_seed, w, spec).l_c;
}

// Mean of the trajectory-matching term over the final epoch of a history.
inline double final_frame_loss(const std::vector<StepRecord>& history, int epochs) {
    require(!history.empty(), "final frame loss: empty history");
    require(epochs >= 1 && history.size() % static_cast<size_t>(epochs) == 0,
            "final frame loss: history length is not a whole number of epochs");
    const size_t per = history.size() / static_cast<size_t>(epochs);
    double sum = 0.0;
    for (size_t i = history.size() - per; i < history.size(); ++i) sum += history[i].parts.l_c;
    return sum / static_cast<double>(per);
}

// ---------------------------------------------------------------------------
// Intrinsic-dimension detection: smallest m whose final frame loss vanishes.
// ---------------------------------------------------------------------------

inline constexpr double kDimensionLossThreshold = 1e-4;

struct DimensionCurve {
    std::vector<int> m_values;       // ascending
    std::vector<double> frame_loss;  // final-epoch mean trajectory loss per m
    int detected_m = -1;             // -1 = no m fell below the threshold
};

inline DimensionCurve dimension_detect(const ManifoldDataset& data, std::span<const int> m_range,
                                       const TrainConfig& base,
                                       double threshold = kDimensionLossThreshold) {
    require(!m_range.empty(), "dimension detection: empty m range");
    std::set<int> ms(m_range.begin(), m_range.end());
    DimensionCurve curve;
    for (int m : ms) {
        require(m >= 1, "dimension detection: m must be positive");
        TrainConfig cfg = base;
        cfg.m = m;
        cfg.warm_start.reset();
        TrainResult res = train(cfg, data);
        const double loss = final_frame_loss(res.history, cfg.epochs);
        curve.m_values.push_back(m);
        curve.frame_loss.push_back(loss);
        if (curve.detected_m < 0 && loss < threshold) curve.detected_m = m;
    }
    return curve;
}

// ---------------------------------------------------------------------------
// Coordinate extraction: learned time functions, optionally arc-lengths.
// ---------------------------------------------------------------------------

struct CoordinateRow {
    std::vector<double> time_coords;   // T_i(x), the time-function proxy coordinates
    std::vector<double> arc_lengths;   // filled when arc-lengths are requested
    bool flow_ok = true;               // false if any segment's integration failed
};

// Horizon values (one per field) at a point.
using HorizonProvider = std::function<Tensor(const Tensor&)>;

// Core extraction over arbitrary fields and horizon functions. Time-function
// coordinates are read at the starting point; arc-lengths follow the fields
// sequentially, each segment flowing for the horizon read at the segment's
// own start.
inline std::vector<CoordinateRow> extract_coordinates(const std::vector<VecField>& fields,
                                                      const HorizonProvider& horizons,
                                                      std::span<const Tensor> points,
                                                      bool with_arc_lengths = false,
                                                      double rtol = 1e-8, double atol = 1e-10) {
    const int m = static_cast<int>(fields.size());
    require(m >= 1, "coordinate extraction: no fields");
    std::vector<CoordinateRow> rows;
    rows.reserve(points.size());
    for (const Tensor& x : points) {
        CoordinateRow row;
        const Tensor horizon = horizons(x);
        require(static_cast<int>(horizon.size()) == m,
                "coordinate extraction: horizon count does not match field count");
        for (int i = 0; i < m; ++i) row.time_coords.push_back(horizon[static_cast<size_t>(i)]);
        if (with_arc_lengths) {
            Tensor z = x;
            for (int i = 0; i < m; ++i) {
                const double ti = horizons(z)[static_cast<size_t>(i)];
                try {
                    FlowTrace tr = integrate_flow(fields[static_cast<size_t>(i)], z,
                                                  std::max(0.0, ti), rtol, atol);
                    row.arc_lengths.push_back(tr.arc_length.back());
                    z = tr.end();
                } catch (const NumericError&) {
                    row.flow_ok = false;
                    row.arc_lengths.push_back(std::numeric_limits<double>::quiet_NaN());
                }
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::vector<CoordinateRow> extract_coordinates(const FrameModel& model,
                                                      std::span<const Tensor> points,
                                                      bool with_arc_lengths = false,
                                                      double rtol = 1e-8, double atol = 1e-10) {
    ModelFields mf(model);
    std::vector<VecField> fields;
    for (int i = 0; i < model.m; ++i) fields.push_back(mf.field_fn(i));
    HorizonProvider horizons = [&mf](const Tensor& x) { return mf.horizons(x); };
    return extract_coordinates(fields, horizons, points, with_arc_lengths, rtol, atol);
}

// ---------------------------------------------------------------------------
// Collapse residual: distance from the combined flow's endpoint to C.
// ---------------------------------------------------------------------------

struct CollapseStats {
    double median = 0.0;
    double mean = 0.0;
    double max = 0.0;
    size_t converged = 0;  // points whose combined speed dropped below the threshold
    size_t total = 0;
};

// Core residual over an arbitrary combined field and target point.
inline CollapseStats collapse_residual(const VecField& combined, const Tensor& target,
                                       std::span<const Tensor> points, double vel_eps = 1e-6,
                                       double max_time = 64.0, double rtol = 1e-8,
                                       double atol = 1e-10) {
    require(!points.empty(), "collapse residual: no points");
    StopPredicate slow = [&](const Tensor& z) {
        const Tensor v = combined(z);
        double sq = 0.0;
        for (size_t i = 0; i < v.size(); ++i) sq += v[i] * v[i];
        return std::sqrt(sq) < vel_eps;
    };

    std::vector<double> residuals;
    residuals.reserve(points.size());
    CollapseStats out;
    out.total = points.size();
    for (const Tensor& x : points) {
        FlowTrace tr = integrate_flow(combined, x, max_time, rtol, atol, slow);
        if (tr.stopped_early) out.converged += 1;
        double sq = 0.0;
        for (size_t i = 0; i < x.size(); ++i) {
            const double d = tr.end()[i] - target[i];
            sq += d * d;
        }
        residuals.push_back(std::sqrt(sq));
    }
    std::vector<double> sorted = residuals;
    std::sort(sorted.begin(), sorted.end());
    out.median = sorted[sorted.size() / 2];
    out.max = sorted.back();
    double sum = 0.0;
    for (double r : residuals) sum += r;
    out.mean = sum / static_cast<double>(residuals.size());
    return out;
}

inline CollapseStats collapse_residual(const FrameModel& model, std::span<const Tensor> points,
                                       double vel_eps = 1e-6, double max_time = 64.0,
                                       double rtol = 1e-8, double atol = 1e-10) {
    ModelFields mf(model);
    return collapse_residual(mf.combined_fn(), model.c, points, vel_eps, max_time, rtol, atol);
}

// ---------------------------------------------------------------------------
// Commutation residual of the learned fields.
// ---------------------------------------------------------------------------

struct CommuteStats {
    double mean = 0.0;  // mean over points of Σ_{i<j} ‖[F_i,F_j](x)‖
    double max = 0.0;
    size_t count = 0;
};

inline CommuteStats commute_residual(const FrameModel& model, std::span<const Tensor> points) {
    CommuteStats out;
    if (model.m < 2 || points.empty()) return out;
    auto field_dual = [&model](int i) {
        return DualField([&model, i](Tape& tp, DualVar z) {
            BoundModel bm = bind_model(tp, model, /*as_leaves=*/false);
            return BoundModel::field(bm.field_stack(z), i, model.n);
        });
    };
    std::vector<DualField> fields;
    for (int i = 0; i < model.m; ++i) fields.push_back(field_dual(i));
    double sum = 0.0;
    for (const Tensor& x : points) {
        double at_x = 0.0;
        for (int i = 0; i < model.m; ++i)
            for (int j = i + 1; j < model.m; ++j) {
                const Tensor br = lie_bracket(fields[static_cast<size_t>(i)],
                                              fields[static_cast<size_t>(j)], x);
                at_x += br.norm();
            }
        sum += at_x;
        out.max = std::max(out.max, at_x);
        out.count += 1;
    }
    out.mean = sum / static_cast<double>(out.count);
    return out;
}

// ---------------------------------------------------------------------------
// Aggregate report.
// ---------------------------------------------------------------------------

struct EvalOptions {
    int collapse_samples = 100;  // test-set prefix used for flow integration
    int commute_samples = 50;
    int coord_samples = 50;
    bool arc_lengths = false;
    uint64_t loss_seed = 0;
};

struct EvalReport {
    AngularStats angular;
    double frame_loss = 0.0;              // trajectory term on the full test set
    std::vector<double> frame_loss_per_m; // filled by dimension detection, if run
    int detected_m = -1;
    CollapseStats collapse;
    CommuteStats commute;
    std::vector<CoordinateRow> coordinates;
};

inline EvalReport evaluate(const FrameModel& model, const ManifoldDataset& ds,
                           const EvalOptions& opt = {}) {
    require(!ds.test.empty(), "evaluate: dataset has no test points");
    EvalReport rep;
    rep.angular = angular_error(model, ds);
    rep.frame_loss = frame_loss(model, ds.test, opt.loss_seed);
    const auto take = [&](int k) {
        return std::span<const Tensor>(ds.test.data(),
                                       std::min(ds.test.size(), static_cast<size_t>(std::max(1, k))));
    };
    rep.collapse = collapse_residual(model, take(opt.collapse_samples));
    rep.commute = commute_residual(model, take(opt.commute_samples));
    rep.coordinates = extract_coordinates(model, take(opt.coord_samples), opt.arc_lengths);
    return rep;
}

// ---------------------------------------------------------------------------
// Sensitivity sweep over one regularization coefficient.
// ---------------------------------------------------------------------------

struct SweepPoint {
    double value = 0.0;
    double angular_mean_deg = 0.0;
    double angular_std_deg = 0.0;
    double final_frame_loss = 0.0;
    bool failed = false;
    std::string error;
};

inline void set_loss_weight(LossWeights& w, const std::string& coefficient, double value) {
    if (coefficient == "alpha") w.alpha = value;
    else if (coefficient == "beta") w.beta = value;
    else if (coefficient == "zeta") w.zeta = value;
    else if (coefficient == "eta") w.eta = value;
    else throw ConfigError("sweep: unknown coefficient '" + coefficient +
                           "' (expected alpha, beta, zeta, or eta)");
}

inline std::vector<SweepPoint> sensitivity_sweep(const ManifoldDataset& data,
                                                 const std::string& coefficient,
                                                 std::span<const double> values,
                                                 const TrainConfig& base) {
    require(!values.empty(), "sweep: no coefficient values");
    std::vector<SweepPoint> curve;
    for (double v : values) {
        require(v >= 0.0, "sweep: coefficient values must be nonnegative");
        SweepPoint pt;
        pt.value = v;
        TrainConfig cfg = base;
        set_loss_weight(cfg.weights, coefficient, v);
        try {
            TrainResult res = train(cfg, data);
            const AngularStats a = angular_error(res.model, data);
            pt.angular_mean_deg = a.mean_deg;
            pt.angular_std_deg = a.std_deg;
            pt.final_frame_loss = final_frame_loss(res.history, cfg.epochs);
        } catch (const std::exception& e) {
            pt.failed = true;
            pt.error = e.what();
        }
        curve.push_back(std::move(pt));
    }
    return curve;
}

// ---------------------------------------------------------------------------
// CSV writers for plot-ready outputs.
// ---------------------------------------------------------------------------

inline void save_dimension_csv(const std::string& path, const DimensionCurve& curve) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot open dimension curve for writing: " + path);
    os << "m,frame_loss\n";
    char buf[64];
    for (size_t i = 0; i < curve.m_values.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%d,%.17g\n", curve.m_values[i], curve.frame_loss[i]);
        os << buf;
    }
    if (!os) throw ConfigError("dimension curve write failed: " + path);
}

inline void save_sweep_csv(const std::string& path, const std::vector<SweepPoint>& curve) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot open sweep curve for writing: " + path);
    os << "value,angular_mean_deg,angular_std_deg,final_frame_loss,failed\n";
    char buf[200];
    for (const SweepPoint& p : curve) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%d\n", p.value, p.angular_mean_deg,
                      p.angular_std_deg, p.final_frame_loss, p.failed ? 1 : 0);
        os << buf;
    }
    if (!os) throw ConfigError("sweep curve write failed: " + path);
}

inline void save_coordinates_csv(const std::string& path, const std::vector<CoordinateRow>& rows) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot open coordinates for writing: " + path);
    if (rows.empty()) throw ConfigError("coordinates: nothing to write");
    const size_t m = rows.front().time_coords.size();
    const bool arcs = !rows.front().arc_lengths.empty();
    os << "sample";
    for (size_t i = 0; i < m; ++i) os << ",t" << i;
    if (arcs)
        for (size_t i = 0; i < m; ++i) os << ",l" << i;
    if (arcs) os << ",flow_ok";
    os << "\n";
    char buf[64];
    for (size_t k = 0; k < rows.size(); ++k) {
        os << k;
        for (size_t i = 0; i < m; ++i) {
            std::snprintf(buf, sizeof buf, ",%.17g", rows[k].time_coords[i]);
            os << buf;
        }
        if (arcs) {
            for (size_t i = 0; i < m; ++i) {
                std::snprintf(buf, sizeof buf, ",%.17g", rows[k].arc_lengths[i]);
                os << buf;
            }
            os << "," << (rows[k].flow_ok ? 1 : 0);
        }
        os << "\n";
    }
    if (!os) throw ConfigError("coordinates write failed: " + path);
}

}  // namespace frameflow
