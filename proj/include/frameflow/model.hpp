#pragma once

// The learned object: m tangent vector fields with per-field time horizons,
// optional conformal factors, a time-interpolant correction network, and a
// learnable reference point. Includes checkpoint serialization.

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nets.hpp"

namespace frameflow {

struct ModelConfig {
    int hidden_width = 32;
    int hidden_layers = 4;
    Activation act = Activation::Tanh;
    Init init = Init::GlorotNormal;
    Head f_head = Head::Spherical;
    double f_radius = 1e-2; // minimum field magnitude under the spherical head
    bool use_sigma = false; // when false, conformal factors are identically zero
};

struct FrameModel {
    int n = 0; // ambient dimension
    int m = 0; // number of vector fields
    Mlp f_net;                    // x ∈ ℝⁿ → stacked fields ℝ^{n·m}, chunk i = field i
    Mlp t_net;                    // x → horizons ℝ₊^m
    Mlp s_net;                    // (t, x) ∈ ℝ^{1+n} → correction ℝⁿ
    std::optional<Mlp> sigma_net; // x → ℝ^m, absent means σ ≡ 0
    Tensor c;                     // reference point ℝⁿ

    int64_t param_count() const {
        int64_t total = f_net.param_count() + t_net.param_count() + s_net.param_count() + n;
        if (sigma_net) total += sigma_net->param_count();
        return total;
    }
};

inline FrameModel init_frame_model(int n, int m, const ModelConfig& cfg, uint64_t seed) {
    require(m >= 1, "dimension error: need at least one vector field");
    require(n >= m, "dimension error: number of fields m must not exceed ambient dimension n");

    FrameModel model;
    model.n = n;
    model.m = m;

    MlpSpec fs = mlp_spec(n, n * m, cfg.hidden_width, cfg.hidden_layers);
    fs.act = cfg.act;
    fs.init = cfg.init;
    fs.head = cfg.f_head;
    fs.head_radius = cfg.f_radius;
    fs.head_chunks = m;
    Rng f_rng(Rng::stream({seed, 1}));
    model.f_net = Mlp::init(std::move(fs), f_rng);

    MlpSpec ts = mlp_spec(n, m, cfg.hidden_width, cfg.hidden_layers);
    ts.act = cfg.act;
    ts.init = cfg.init;
    ts.head = Head::Softplus;
    Rng t_rng(Rng::stream({seed, 2}));
    model.t_net = Mlp::init(std::move(ts), t_rng);

    MlpSpec ss = mlp_spec(1 + n, n, cfg.hidden_width, cfg.hidden_layers);
    ss.act = cfg.act;
    ss.init = cfg.init;
    Rng s_rng(Rng::stream({seed, 3}));
    model.s_net = Mlp::init(std::move(ss), s_rng);

    if (cfg.use_sigma) {
        MlpSpec gs = mlp_spec(n, m, cfg.hidden_width, cfg.hidden_layers);
        gs.act = cfg.act;
        gs.init = cfg.init;
        Rng g_rng(Rng::stream({seed, 4}));
        model.sigma_net = Mlp::init(std::move(gs), g_rng);
    }

    Rng c_rng(Rng::stream({seed, 5}));
    model.c = Tensor::zeros(n, 1);
    for (int i = 0; i < n; ++i) model.c[i] = c_rng.uniform(-0.5, 0.5);
    return model;
}

// ---- tape-bound evaluation ---------------------------------------------------

struct BoundModel {
    int n = 0, m = 0;
    BoundMlp f, t, s;
    std::optional<BoundMlp> sigma;
    Var c;

    // Stacked field output at x: length n·m, chunk i holds field i.
    template <class V>
    V field_stack(V x) const {
        return f(x);
    }

    template <class V>
    static V field(V stack, int i, int n_dim) {
        return slice(stack, i * n_dim, n_dim);
    }

    template <class V>
    V horizons(V x) const {
        return t(x);
    }

    // Conformal factor vector; a true zero constant when the stub is active.
    Var sigma_vals(Tape& tp, Var x) const {
        if (sigma) return (*sigma)(x);
        return tp.constant(Tensor::zeros(m, 1));
    }

    // Combined velocity Σᵢ Tᵢ(x)·Fᵢ(x).
    template <class V>
    V combined_velocity(V x) const {
        V stack = f(x);
        V horizon = t(x);
        V out = scale(slice(horizon, 0, 1), field(stack, 0, n));
        for (int i = 1; i < m; ++i)
            out = add(out, scale(slice(horizon, i, 1), field(stack, i, n)));
        return out;
    }

    struct Interp {
        Var u;      // interpolated point
        Var du_dt;  // its time derivative
        Var s_val;  // correction-network output at (t, x)
    };

    // u = (1−t)x + tC + t(1−t)s(t,x);  du/dt = C − x + (1−2t)s + t(1−t)∂ₜs.
    // ∂ₜs comes from a dual-number pass, so everything stays differentiable
    // with respect to the network parameters.
    Interp interpolant(double tt, Var x) const {
        require(tt >= 0.0 && tt <= 1.0, "domain error: interpolant time must lie in [0,1]");
        Tape& tp = *x.tape;
        Var t_scalar = tp.constant_scalar(tt);
        Var one = tp.constant_scalar(1.0);
        DualVar t_dual = make_dual(t_scalar, one);
        DualVar in = concat2(t_dual, dual_const(x));
        DualVar sv = s(in);

        Var u = add(add(mul_c(x, 1.0 - tt), mul_c(c, tt)), mul_c(sv.v, tt * (1.0 - tt)));
        Var du = add(add(sub(c, x), mul_c(sv.v, 1.0 - 2.0 * tt)), mul_c(sv.d, tt * (1.0 - tt)));
        return {u, du, sv.v};
    }
};

inline BoundModel bind_model(Tape& tp, const FrameModel& model, bool as_leaves = true) {
    BoundModel bm;
    bm.n = model.n;
    bm.m = model.m;
    bm.f = bind(tp, model.f_net, as_leaves);
    bm.t = bind(tp, model.t_net, as_leaves);
    bm.s = bind(tp, model.s_net, as_leaves);
    if (model.sigma_net) bm.sigma = bind(tp, *model.sigma_net, as_leaves);
    bm.c = as_leaves ? tp.leaf(model.c) : tp.constant(model.c);
    return bm;
}

// ---- one-shot plain-tensor evaluation ------------------------------------------

struct FieldsEval {
    Tensor f;     // n×m, column i = field i
    Tensor t;     // m positive horizons
    Tensor sigma; // m conformal factors (zero under the stub)
};

inline FieldsEval eval_fields(const FrameModel& model, const Tensor& x) {
    require(static_cast<int>(x.size()) == model.n, "eval_fields: point has wrong dimension");
    require_all_finite(x.data(), x.size(), "eval_fields input");

    Tape tp;
    BoundModel bm = bind_model(tp, model, /*as_leaves=*/false);
    Var xv = tp.constant(x);
    Var stack = bm.field_stack(xv);
    Var horizon = bm.horizons(xv);
    Var sig = bm.sigma_vals(tp, xv);

    FieldsEval out;
    out.f = Tensor::zeros(model.n, model.m);
    const double* sv = stack.vals();
    for (int i = 0; i < model.m; ++i)
        for (int r = 0; r < model.n; ++r) out.f(r, i) = sv[i * model.n + r];
    out.t = tp.value(horizon);
    out.sigma = tp.value(sig);
    return out;
}

struct InterpEval {
    Tensor u;
    Tensor du_dt;
};

inline InterpEval eval_interpolant(const FrameModel& model, double t, const Tensor& x) {
    require(static_cast<int>(x.size()) == model.n, "eval_interpolant: point has wrong dimension");
    require_all_finite(x.data(), x.size(), "eval_interpolant input");

    Tape tp;
    BoundModel bm = bind_model(tp, model, /*as_leaves=*/false);
    Var xv = tp.constant(x);
    BoundModel::Interp res = bm.interpolant(t, xv);
    return {tp.value(res.u), tp.value(res.du_dt)};
}

// ---- checkpoint serialization ---------------------------------------------------
//
// Layout (all integers unsigned 32-bit little-endian, all floats IEEE-754
// binary64 little-endian):
//   bytes 0..7   magic "FFCK0001"
//   u32          entry count
//   per entry:   u32 name length, name bytes, u32 rows, u32 cols,
//                rows·cols doubles (row-major)
// Entries: "meta" = [n, m, has_sigma]; per network p ∈ {f, t, s, sigma}:
// "p.widths", "p.meta" = [activation, head, radius, chunks, init scheme],
// "p.w<l>" / "p.b<l>" per layer; and "c" for the reference point.

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char buf[4];
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 4);
}

inline uint32_t read_u32(std::istream& is) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    if (!is) throw ConfigError("checkpoint truncated");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[i]) << (8 * i);
    return v;
}

inline void write_f64(std::ostream& os, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

inline double read_f64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw ConfigError("checkpoint truncated");
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(buf[i]) << (8 * i);
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
}

inline void write_entry(std::ostream& os, const std::string& name, const Tensor& t) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(t.rows()));
    write_u32(os, static_cast<uint32_t>(t.cols()));
    for (size_t i = 0; i < t.size(); ++i) write_f64(os, t[i]);
}

inline std::pair<std::string, Tensor> read_entry(std::istream& is) {
    uint32_t name_len = read_u32(is);
    if (name_len > 4096) throw ConfigError("checkpoint corrupt: absurd key length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw ConfigError("checkpoint truncated");
    uint32_t rows = read_u32(is), cols = read_u32(is);
    if (rows == 0 || cols == 0 || static_cast<uint64_t>(rows) * cols > (1u << 28))
        throw ConfigError("checkpoint corrupt: bad tensor shape");
    Tensor t = Tensor::zeros(static_cast<int>(rows), static_cast<int>(cols));
    for (size_t i = 0; i < t.size(); ++i) t[i] = read_f64(is);
    return {std::move(name), std::move(t)};
}

inline void write_net(std::ostream& os, const std::string& prefix, const Mlp& net) {
    Tensor widths = Tensor::zeros(static_cast<int>(net.spec.widths.size()), 1);
    for (size_t i = 0; i < net.spec.widths.size(); ++i) widths[i] = net.spec.widths[i];
    write_entry(os, prefix + ".widths", widths);
    Tensor meta{static_cast<double>(static_cast<int>(net.spec.act)),
                static_cast<double>(static_cast<int>(net.spec.head)), net.spec.head_radius,
                static_cast<double>(net.spec.head_chunks),
                static_cast<double>(static_cast<int>(net.spec.init))};
    write_entry(os, prefix + ".meta", meta);
    for (size_t l = 0; l < net.w.size(); ++l) {
        write_entry(os, prefix + ".w" + std::to_string(l), net.w[l]);
        write_entry(os, prefix + ".b" + std::to_string(l), net.b[l]);
    }
}

} // namespace detail

inline void save_checkpoint(const FrameModel& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open checkpoint for writing: " + path);
    os.write("FFCK0001", 8);

    auto net_entries = [](const Mlp& net) { return 2 + 2 * static_cast<uint32_t>(net.w.size()); };
    uint32_t entries = 2 + net_entries(model.f_net) + net_entries(model.t_net) + net_entries(model.s_net);
    if (model.sigma_net) entries += net_entries(*model.sigma_net);

    detail::write_u32(os, entries);
    detail::write_entry(os, "meta",
                        Tensor{static_cast<double>(model.n), static_cast<double>(model.m),
                               model.sigma_net ? 1.0 : 0.0});
    detail::write_net(os, "f", model.f_net);
    detail::write_net(os, "t", model.t_net);
    detail::write_net(os, "s", model.s_net);
    if (model.sigma_net) detail::write_net(os, "sigma", *model.sigma_net);
    detail::write_entry(os, "c", model.c);
    if (!os) throw ConfigError("checkpoint write failed: " + path);
}

inline FrameModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != "FFCK0001") throw ConfigError("not a checkpoint file: " + path);

    uint32_t entries = detail::read_u32(is);
    std::vector<std::pair<std::string, Tensor>> kv;
    kv.reserve(entries);
    for (uint32_t e = 0; e < entries; ++e) kv.push_back(detail::read_entry(is));

    auto find = [&](const std::string& key) -> const Tensor& {
        for (const auto& [k, v] : kv)
            if (k == key) return v;
        throw ConfigError("checkpoint missing key: " + key);
    };

    auto load_net = [&](const std::string& prefix) {
        const Tensor& widths = find(prefix + ".widths");
        const Tensor& meta = find(prefix + ".meta");
        if (meta.size() != 5) throw ConfigError("checkpoint corrupt: bad net metadata");
        MlpSpec spec;
        for (size_t i = 0; i < widths.size(); ++i) spec.widths.push_back(static_cast<int>(widths[i]));
        spec.act = static_cast<Activation>(static_cast<int>(meta[0]));
        spec.head = static_cast<Head>(static_cast<int>(meta[1]));
        spec.head_radius = meta[2];
        spec.head_chunks = static_cast<int>(meta[3]);
        spec.init = static_cast<Init>(static_cast<int>(meta[4]));
        spec.validate();
        Mlp net;
        net.spec = std::move(spec);
        for (size_t l = 0; l + 1 < net.spec.widths.size(); ++l) {
            const Tensor& w = find(prefix + ".w" + std::to_string(l));
            const Tensor& b = find(prefix + ".b" + std::to_string(l));
            if (w.rows() != net.spec.widths[l + 1] || w.cols() != net.spec.widths[l] ||
                b.rows() != net.spec.widths[l + 1])
                throw ConfigError("checkpoint corrupt: layer shape mismatch in " + prefix);
            net.w.push_back(w);
            net.b.push_back(b);
        }
        return net;
    };

    const Tensor& meta = find("meta");
    if (meta.size() != 3) throw ConfigError("checkpoint corrupt: bad model metadata");
    FrameModel model;
    model.n = static_cast<int>(meta[0]);
    model.m = static_cast<int>(meta[1]);
    model.f_net = load_net("f");
    model.t_net = load_net("t");
    model.s_net = load_net("s");
    if (meta[2] != 0.0) model.sigma_net = load_net("sigma");
    model.c = find("c");
    if (model.c.rows() != model.n || model.c.cols() != 1)
        throw ConfigError("checkpoint corrupt: reference point shape");
    return model;
}

} // namespace frameflow
