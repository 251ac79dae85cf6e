#pragma once

// Isometric autoencoder baseline. An encoder e: R^n -> R^m and decoder
// d: R^m -> R^n are trained on manifold samples with a reconstruction loss
// plus an isotropy penalty ||J_e(x) J_e(x)^T - I_m||_F^2 that pushes the
// encoder's input-Jacobian rows toward an orthonormal set, so the chart it
// learns is locally distance-preserving. The decoder's Jacobian columns at
// encoded test points then serve as an estimated tangent frame, scored with
// the same angular metric as the flow-based method. This is the comparison
// baseline; it shares the tensor, network, optimizer, and evaluation plumbing
// rather than bringing its own stack.

#include <algorithm>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <frameflow/common.hpp>
#include <frameflow/datasets.hpp>
#include <frameflow/eval.hpp>
#include <frameflow/nets.hpp>
#include <frameflow/rng.hpp>
#include <frameflow/tape.hpp>
#include <frameflow/tensor.hpp>
#include <frameflow/trainer.hpp>

namespace frameflow {

// ---------------------------------------------------------------------------
// Model and configuration.
// ---------------------------------------------------------------------------

struct IsoAeModel {
    int n = 0;            // ambient dimension
    int m = 0;            // latent (chart) dimension
    double eta_iso = 1.0; // isotropy penalty weight the model was trained with
    Mlp encoder;          // n -> m
    Mlp decoder;          // m -> n
};

struct IsoAeConfig {
    std::string dataset = "sphere";
    int m = 2;
    uint64_t seed = 0;
    int train_count = 10000;
    int test_count = 2000;
    int batch_size = 100;
    int epochs = 200;
    double lr = 1e-3;      // constant Adam step size
    double eta_iso = 1.0;  // weight on the isotropy penalty; 0 gives a plain autoencoder
    int hidden_width = 32;
    int hidden_layers = 4; // 0 makes both networks single affine maps
    std::function<void(int epoch, double epoch_mean_total)> on_epoch;
};

inline void check_isoae_config(const IsoAeConfig& cfg) {
    auto bad = [](const std::string& msg) { throw ConfigError("isoae config: " + msg); };
    if (cfg.m < 1) bad("m must be at least 1");
    if (cfg.epochs < 1) bad("epochs must be at least 1");
    if (cfg.batch_size < 1) bad("batch size must be at least 1");
    if (cfg.train_count < 1) bad("train count must be at least 1");
    if (cfg.test_count < 0) bad("test count must be non-negative");
    if (!(cfg.lr > 0.0)) bad("learning rate must be positive");
    if (!(cfg.eta_iso >= 0.0)) bad("isotropy weight must be non-negative");
    if (cfg.hidden_width < 1) bad("hidden width must be at least 1");
    if (cfg.hidden_layers < 0) bad("hidden layer count must be non-negative");
}

// Fresh encoder/decoder pair. Hidden layers use the smooth monotone gate
// activation; both output layers are plain affine heads.
inline IsoAeModel init_isoae(int n, int m, const IsoAeConfig& cfg, uint64_t seed) {
    require(n >= 1 && m >= 1, "isoae: dimensions must be positive");
    IsoAeModel ae;
    ae.n = n;
    ae.m = m;
    ae.eta_iso = cfg.eta_iso;

    MlpSpec enc = mlp_spec(n, m, cfg.hidden_width, cfg.hidden_layers);
    enc.act = Activation::LipSwish;
    Rng enc_rng(Rng::stream({seed, 1}));
    ae.encoder = Mlp::init(std::move(enc), enc_rng);

    MlpSpec dec = mlp_spec(m, n, cfg.hidden_width, cfg.hidden_layers);
    dec.act = Activation::LipSwish;
    Rng dec_rng(Rng::stream({seed, 2}));
    ae.decoder = Mlp::init(std::move(dec), dec_rng);
    return ae;
}

// ---------------------------------------------------------------------------
// Plain (tape-free callers') evaluation helpers.
// ---------------------------------------------------------------------------

inline Tensor isoae_encode(const IsoAeModel& ae, const Tensor& x) {
    require(x.rows() == ae.n && x.cols() == 1, "isoae encode: input must be an n-vector");
    Tape tp;
    BoundMlp enc = bind(tp, ae.encoder, /*as_leaves=*/false);
    return tp.value(enc(tp.constant(x)));
}

inline Tensor isoae_decode(const IsoAeModel& ae, const Tensor& z) {
    require(z.rows() == ae.m && z.cols() == 1, "isoae decode: input must be an m-vector");
    Tape tp;
    BoundMlp dec = bind(tp, ae.decoder, /*as_leaves=*/false);
    return tp.value(dec(tp.constant(z)));
}

// Encoder Jacobian J_e(x), one reverse sweep per latent coordinate (m x n).
inline Tensor encoder_jacobian(const IsoAeModel& ae, const Tensor& x) {
    require(x.rows() == ae.n && x.cols() == 1, "isoae jacobian: input must be an n-vector");
    Tape tp;
    BoundMlp enc = bind(tp, ae.encoder, /*as_leaves=*/false);
    Var xv = tp.leaf(x);
    Var z = enc(xv);
    Tensor j(ae.m, ae.n);
    for (int i = 0; i < ae.m; ++i) {
        tp.backward(slice(z, i, 1));
        const Tensor row = tp.adjoint(xv);
        for (int k = 0; k < ae.n; ++k) j(i, k) = row[static_cast<size_t>(k)];
    }
    return j;
}

// Decoder Jacobian J_d(z), one forward sweep per latent coordinate (n x m).
inline Tensor decoder_jacobian(const IsoAeModel& ae, const Tensor& z) {
    require(z.rows() == ae.m && z.cols() == 1, "isoae jacobian: input must be an m-vector");
    Tape tp;
    BoundMlp dec = bind(tp, ae.decoder, /*as_leaves=*/false);
    const Tape::Mark mark = tp.mark();
    Tensor j(ae.n, ae.m);
    for (int k = 0; k < ae.m; ++k) {
        Tensor ek(ae.m, 1);
        ek[static_cast<size_t>(k)] = 1.0;
        DualVar zv = make_dual(tp.constant(z), tp.constant(ek));
        const Tensor col = tp.value(dec(zv).d);
        for (int i = 0; i < ae.n; ++i) j(i, k) = col[static_cast<size_t>(i)];
        tp.reset_to_mark(mark);
    }
    return j;
}

// ||J_e(x) J_e(x)^T - I_m||_F^2: zero exactly when the encoder rows form an
// orthonormal set at x.
inline double isoae_isotropy_gap(const IsoAeModel& ae, const Tensor& x) {
    const Tensor j = encoder_jacobian(ae, x);
    double acc = 0.0;
    for (int a = 0; a < ae.m; ++a)
        for (int b = 0; b < ae.m; ++b) {
            double g = 0.0;
            for (int k = 0; k < ae.n; ++k) g += j(a, k) * j(b, k);
            const double d = g - (a == b ? 1.0 : 0.0);
            acc += d * d;
        }
    return acc;
}

// ---------------------------------------------------------------------------
// Loss: mean over the batch of ||d(e(x)) - x||^2 + eta_iso * isotropy gap.
// ---------------------------------------------------------------------------

struct IsoAeLossParts {
    double recon = 0.0;
    double iso = 0.0;
    double total = 0.0;
};

struct IsoAeGradients {
    std::vector<Tensor> enc_w, enc_b, dec_w, dec_b;
};

struct IsoAeStepRecord {
    int64_t step = 0;
    IsoAeLossParts parts;
};

// Batch loss on one tape; per-sample scratch is reclaimed after each backward
// sweep while parameter adjoints keep accumulating. The isotropy term needs
// the encoder Jacobian *inside* the differentiated graph, so its rows are
// built with m graph-emitting reverse sweeps: the emitted adjoint nodes are
// ordinary tape nodes, and the final backward pass differentiates through
// them to reach the weights.
inline IsoAeLossParts isoae_batch_loss(const IsoAeModel& ae, std::span<const Tensor> batch,
                                       IsoAeGradients* grads = nullptr) {
    require(!batch.empty(), "isoae batch loss: empty batch");

    Tape tp;
    BoundMlp enc = bind(tp, ae.encoder, /*as_leaves=*/grads != nullptr);
    BoundMlp dec = bind(tp, ae.decoder, /*as_leaves=*/grads != nullptr);
    const Tape::Mark mark = tp.mark();

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    IsoAeLossParts agg;
    for (const Tensor& x : batch) {
        require(x.rows() == ae.n && x.cols() == 1, "isoae batch loss: sample dimension mismatch");
        Var xv = tp.leaf(x);
        Var z = enc(xv);
        Var recon = sq_norm(sub(dec(z), tp.constant(x)));

        Var total = recon;
        double iso_val = 0.0;
        if (ae.eta_iso > 0.0) {
            const std::array<Var, 1> wrt{xv};
            std::vector<Var> rows;
            rows.reserve(static_cast<size_t>(ae.m));
            for (int i = 0; i < ae.m; ++i) {
                Tensor ei(ae.m, 1);
                ei[static_cast<size_t>(i)] = 1.0;
                rows.push_back(tp.grad_graph(z, wrt, tp.constant(ei))[0]);
            }
            Var iso = tp.constant_scalar(0.0);
            for (int a = 0; a < ae.m; ++a)
                for (int b = 0; b < ae.m; ++b) {
                    Var gram = dot(rows[static_cast<size_t>(a)], rows[static_cast<size_t>(b)]);
                    iso = add(iso, square(a == b ? add_c(gram, -1.0) : gram));
                }
            iso_val = tp.value(iso)[0];
            total = add(recon, mul_c(iso, ae.eta_iso));
        }

        agg.recon += tp.value(recon)[0] * inv_b;
        agg.iso += iso_val * inv_b;
        agg.total += tp.value(total)[0] * inv_b;
        if (grads != nullptr) tp.backward_accumulate(total, inv_b);
        tp.reset_to_mark(mark);
    }

    if (grads != nullptr) {
        detail::collect_net_gradients(tp, enc, grads->enc_w, grads->enc_b);
        detail::collect_net_gradients(tp, dec, grads->dec_w, grads->dec_b);
    }
    return agg;
}

namespace detail {

inline std::vector<const Tensor*> isoae_gradient_view(const IsoAeGradients& g) {
    std::vector<const Tensor*> out;
    for (const Tensor& t : g.enc_w) out.push_back(&t);
    for (const Tensor& t : g.enc_b) out.push_back(&t);
    for (const Tensor& t : g.dec_w) out.push_back(&t);
    for (const Tensor& t : g.dec_b) out.push_back(&t);
    return out;
}

inline std::vector<Tensor*> isoae_mutable_gradient_view(IsoAeGradients& g) {
    std::vector<Tensor*> out;
    for (Tensor& t : g.enc_w) out.push_back(&t);
    for (Tensor& t : g.enc_b) out.push_back(&t);
    for (Tensor& t : g.dec_w) out.push_back(&t);
    for (Tensor& t : g.dec_b) out.push_back(&t);
    return out;
}

// Parameter order must match isoae_gradient_view above.
inline ParamView isoae_params(IsoAeModel& ae) {
    ParamView pv;
    net_params(ae.encoder, pv.tensors);
    net_params(ae.decoder, pv.tensors);
    pv.c_index = pv.tensors.size();  // no decay-exempt parameter; index is one past the end
    return pv;
}

}  // namespace detail

// Chunked parallel variant of isoae_batch_loss. The loss has no per-sample
// randomness, and chunk results are reduced in a fixed order, so the result
// is independent of the worker count.
inline IsoAeLossParts parallel_isoae_batch_loss(const IsoAeModel& ae, std::span<const Tensor> batch,
                                                IsoAeGradients* grads, int workers) {
    require(workers >= 1, "isoae batch loss: worker count must be positive");
    const int chunks = std::min<int>(workers, static_cast<int>(batch.size()));
    if (chunks <= 1) return isoae_batch_loss(ae, batch, grads);

    const size_t per = (batch.size() + chunks - 1) / static_cast<size_t>(chunks);
    std::vector<IsoAeLossParts> parts(static_cast<size_t>(chunks));
    std::vector<IsoAeGradients> chunk_grads(grads ? static_cast<size_t>(chunks) : 0);
    std::vector<std::exception_ptr> errors(static_cast<size_t>(chunks));

    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(chunks));
    for (int k = 0; k < chunks; ++k) {
        pool.emplace_back([&, k]() {
            try {
                const size_t lo = static_cast<size_t>(k) * per;
                const size_t hi = std::min(batch.size(), lo + per);
                parts[static_cast<size_t>(k)] =
                    isoae_batch_loss(ae, batch.subspan(lo, hi - lo),
                                     grads ? &chunk_grads[static_cast<size_t>(k)] : nullptr);
            } catch (...) {
                errors[static_cast<size_t>(k)] = std::current_exception();
            }
        });
    }
    for (std::thread& th : pool) th.join();
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);

    const double total_n = static_cast<double>(batch.size());
    auto chunk_size = [&](int k) {
        const size_t lo = static_cast<size_t>(k) * per;
        return static_cast<double>(std::min(batch.size(), lo + per) - lo);
    };

    IsoAeLossParts out;
    for (int k = 0; k < chunks; ++k) {
        const double w = chunk_size(k) / total_n;
        out.recon += w * parts[static_cast<size_t>(k)].recon;
        out.iso += w * parts[static_cast<size_t>(k)].iso;
        out.total += w * parts[static_cast<size_t>(k)].total;
    }

    if (grads) {
        *grads = std::move(chunk_grads[0]);
        std::vector<Tensor*> acc = detail::isoae_mutable_gradient_view(*grads);
        const double w0 = chunk_size(0) / total_n;
        for (Tensor* t : acc)
            for (size_t i = 0; i < t->size(); ++i) (*t)[i] *= w0;
        for (int k = 1; k < chunks; ++k) {
            const std::vector<const Tensor*> add =
                detail::isoae_gradient_view(chunk_grads[static_cast<size_t>(k)]);
            const double wk = chunk_size(k) / total_n;
            for (size_t j = 0; j < acc.size(); ++j)
                for (size_t i = 0; i < add[j]->size(); ++i) (*acc[j])[i] += wk * (*add[j])[i];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop: plain Adam, constant step size, no weight decay or clipping.
// ---------------------------------------------------------------------------

struct IsoAeResult {
    IsoAeModel model;
    std::vector<IsoAeStepRecord> history;
};

inline IsoAeResult train_isoae(const IsoAeConfig& cfg, const ManifoldDataset& data) {
    check_isoae_config(cfg);
    require(data.n >= 1, "isoae trainer: dataset has no ambient dimension");
    require(!data.train.empty(), "isoae trainer: dataset has no training samples");
    require(static_cast<int>(data.train.size()) >= cfg.batch_size,
            "isoae trainer: batch size exceeds the provided training set");

    IsoAeModel ae =
        init_isoae(data.n, cfg.m, cfg, Rng::stream({cfg.seed, 9101}).next_u64());

    detail::ParamView pv = detail::isoae_params(ae);
    TrainConfig opt_cfg;  // optimizer knobs only; the loop below owns everything else
    opt_cfg.optimizer = Optimizer::Adam;
    opt_cfg.weight_decay = 0.0;
    opt_cfg.clip_norm = 0.0;
    detail::OptState opt = detail::make_opt_state(pv, opt_cfg);

    const size_t train_n = data.train.size();
    const int64_t batches =
        static_cast<int64_t>((train_n + cfg.batch_size - 1) / static_cast<size_t>(cfg.batch_size));
    const int workers = worker_threads();

    std::vector<size_t> order(train_n);
    std::iota(order.begin(), order.end(), size_t{0});

    IsoAeResult out;
    out.history.reserve(static_cast<size_t>(batches * cfg.epochs));

    int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng = Rng::stream({cfg.seed, 9102, static_cast<uint64_t>(epoch)});
        for (size_t i = train_n - 1; i > 0; --i) {
            const size_t j = static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i)));
            std::swap(order[i], order[j]);
        }

        double epoch_mean = 0.0;
        for (int64_t b = 0; b < batches; ++b) {
            const size_t lo = static_cast<size_t>(b) * static_cast<size_t>(cfg.batch_size);
            const size_t hi = std::min(train_n, lo + static_cast<size_t>(cfg.batch_size));
            std::vector<Tensor> batch;
            batch.reserve(hi - lo);
            for (size_t i = lo; i < hi; ++i) batch.push_back(data.train[order[i]]);

            IsoAeGradients grads;
            const IsoAeLossParts parts = parallel_isoae_batch_loss(ae, batch, &grads, workers);
            out.history.push_back({step, parts});
            epoch_mean += parts.total / static_cast<double>(batches);

            if (!(parts.total <= 1e6))
                throw DivergenceError("isoae training diverged: total loss " +
                                      std::to_string(parts.total) + " at step " +
                                      std::to_string(step));

            detail::optimizer_step(pv, detail::isoae_gradient_view(grads), opt, cfg.lr, opt_cfg);
            ++step;
        }
        if (cfg.on_epoch) cfg.on_epoch(epoch, epoch_mean);
    }

    out.model = std::move(ae);
    return out;
}

// Convenience overload: draws the dataset from the same stream as the flow
// trainer, so both methods see identical samples at equal seeds and counts.
inline IsoAeResult train_isoae(const IsoAeConfig& cfg) {
    check_isoae_config(cfg);
    ManifoldDataset data = make_dataset(cfg.dataset, {cfg.train_count, cfg.test_count},
                                        Rng::stream({cfg.seed, 9000}).next_u64());
    return train_isoae(cfg, data);
}

// ---------------------------------------------------------------------------
// Tangent-frame quality: decoder Jacobian columns at encoded test points,
// scored against the dataset's analytic normal frames with the same angular
// metric as the flow-based evaluation.
// ---------------------------------------------------------------------------

inline AngularStats isoae_tangent_error(const IsoAeModel& ae, const ManifoldDataset& ds,
                                        std::span<const Tensor> points) {
    require(ds.n == ae.n, "isoae tangent error: dataset/model dimension mismatch");
    FrameProvider frames = [&ae](const Tensor& x) {
        return decoder_jacobian(ae, isoae_encode(ae, x));
    };
    return angular_error_of(frames, ds, points);
}

inline AngularStats isoae_tangent_error(const IsoAeModel& ae, const ManifoldDataset& ds) {
    return isoae_tangent_error(ae, ds, ds.test);
}

// ---------------------------------------------------------------------------
// Loss-history CSV (columns: step, recon, iso, total).
// ---------------------------------------------------------------------------

inline void save_isoae_history_csv(const std::string& path,
                                   const std::vector<IsoAeStepRecord>& history) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot open loss history for writing: " + path);
    os << "step,recon,iso,total\n";
    char buf[160];
    for (const IsoAeStepRecord& r : history) {
        std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g\n",
                      static_cast<long long>(r.step), r.parts.recon, r.parts.iso, r.parts.total);
        os << buf;
    }
    if (!os.good()) throw ConfigError("failed while writing loss history: " + path);
}

}  // namespace frameflow
