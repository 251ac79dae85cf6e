#pragma once

// Small dense networks evaluated on the tape. The same forward pass runs in
// plain mode (Var) and in dual-number mode (DualVar), so callers can push
// tangents through a network without a second implementation.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dual.hpp"
#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace frameflow {

enum class Activation : uint8_t { Tanh = 0, LipSwish = 1 };
enum class Head : uint8_t { Identity = 0, Softplus = 1, Spherical = 2 };
enum class Init : uint8_t { GlorotNormal = 0, TanhTailored = 1 };

// Layer chain is the full list of widths, input and output included.
struct MlpSpec {
    std::vector<int> widths;
    Activation act = Activation::Tanh;
    Head head = Head::Identity;
    double head_radius = 0.0; // minimum column norm enforced by the spherical head
    int head_chunks = 1;      // output splits into this many equal columns for the spherical head
    Init init = Init::GlorotNormal;

    void validate() const {
        require(widths.size() >= 2, "mlp spec: need at least input and output widths");
        for (int w : widths) require(w >= 1, "mlp spec: widths must be positive");
        if (head == Head::Spherical) {
            require(head_radius > 0.0, "mlp spec: spherical head needs a positive radius");
            require(head_chunks >= 1 && widths.back() % head_chunks == 0,
                    "mlp spec: output width must split evenly into head chunks");
        }
    }

    int in_dim() const { return widths.front(); }
    int out_dim() const { return widths.back(); }
};

inline MlpSpec mlp_spec(int in, int out, int hidden_width = 32, int hidden_layers = 4) {
    MlpSpec s;
    s.widths.push_back(in);
    for (int l = 0; l < hidden_layers; ++l) s.widths.push_back(hidden_width);
    s.widths.push_back(out);
    return s;
}

// Parameter storage. Weights are row-major (out × in); the optimizer mutates
// these tensors directly between batches.
struct Mlp {
    MlpSpec spec;
    std::vector<Tensor> w;
    std::vector<Tensor> b;

    static Mlp init(MlpSpec spec, Rng& rng) {
        spec.validate();
        Mlp net;
        net.spec = std::move(spec);
        const auto& widths = net.spec.widths;
        for (size_t l = 0; l + 1 < widths.size(); ++l) {
            int fan_in = widths[l], fan_out = widths[l + 1];
            double std_dev = std::sqrt(2.0 / (fan_in + fan_out));
            if (net.spec.init == Init::TanhTailored) std_dev *= 5.0 / 3.0;
            Tensor wl(fan_out, fan_in);
            for (size_t i = 0; i < wl.size(); ++i) wl[i] = std_dev * rng.gaussian();
            net.w.push_back(std::move(wl));
            net.b.push_back(Tensor::zeros(fan_out, 1));
        }
        return net;
    }

    int64_t param_count() const {
        int64_t total = 0;
        for (size_t l = 0; l + 1 < spec.widths.size(); ++l)
            total += static_cast<int64_t>(spec.widths[l] + 1) * spec.widths[l + 1];
        return total;
    }
};

namespace detail {

template <class V>
struct lift;

template <>
struct lift<Var> {
    static Var constant_scalar(Tape& t, double c) { return t.constant_scalar(c); }
};

template <>
struct lift<DualVar> {
    static DualVar constant_scalar(Tape& t, double c) { return dual_const(t.constant_scalar(c)); }
};

inline Tape* tape_of(Var v) { return v.tape; }
inline Tape* tape_of(DualVar v) { return v.v.tape; }

} // namespace detail

// A network whose parameters live on a tape (as leaves when training, as
// constants when only evaluating).
struct BoundMlp {
    const MlpSpec* spec = nullptr;
    std::vector<Var> w;
    std::vector<Var> b;

    template <class V>
    V operator()(V x) const {
        Tape& t = *detail::tape_of(x);
        V h = x;
        for (size_t l = 0; l < w.size(); ++l) {
            V z = add(matvec(w[l], h), b[l]);
            h = (l + 1 < w.size()) ? activate(z) : z;
        }
        return apply_head(t, h);
    }

  private:
    template <class V>
    V activate(V z) const {
        if (spec->act == Activation::LipSwish) return mul_c(mul(z, sigmoid(z)), 1.0 / 1.1);
        return tanh(z);
    }

    template <class V>
    V apply_head(Tape& t, V y) const {
        switch (spec->head) {
            case Head::Identity: return y;
            case Head::Softplus: return max_c(softplus(y), 1e-8);
            case Head::Spherical: {
                // per column: y ← y · max(1, r/‖y‖), a norm floor at r
                int chunks = spec->head_chunks;
                int len = spec->out_dim() / chunks;
                V out = project_chunk(t, slice(y, 0, len));
                for (int k = 1; k < chunks; ++k)
                    out = concat2(out, project_chunk(t, slice(y, k * len, len)));
                return out;
            }
        }
        return y;
    }

    template <class V>
    V project_chunk(Tape& t, V yk) const {
        V nrm = sqrt(max_c(dot(yk, yk), 1e-300));
        V factor = max_c(div(detail::lift<V>::constant_scalar(t, spec->head_radius), nrm), 1.0);
        return scale(factor, yk);
    }
};

inline BoundMlp bind(Tape& t, const Mlp& net, bool as_leaves = true) {
    BoundMlp bm;
    bm.spec = &net.spec;
    for (size_t l = 0; l < net.w.size(); ++l) {
        bm.w.push_back(as_leaves ? t.leaf(net.w[l]) : t.constant(net.w[l]));
        bm.b.push_back(as_leaves ? t.leaf(net.b[l]) : t.constant(net.b[l]));
    }
    return bm;
}

} // namespace frameflow
