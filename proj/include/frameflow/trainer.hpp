#pragma once
// Minibatch training loop: shuffled epochs, an adaptive moment-based update
// with decoupled weight decay, linear learning-rate decay, global-norm
// gradient clipping, counter-based deterministic randomness, atomic
// checkpointing, and a per-step loss history.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <frameflow/datasets.hpp>
#include <frameflow/jacobi.hpp>
#include <frameflow/losses.hpp>
#include <frameflow/model.hpp>

namespace frameflow {

// Loss exceeded the divergence threshold; distinguished from other numeric
// failures so callers can report it as a tuning problem rather than a bug.
struct DivergenceError : NumericError {
    explicit DivergenceError(const std::string& msg) : NumericError(msg) {}
};

// Optimizer choice. Adam updates every parameter with bias-corrected AdamW.
// EigenAdam keeps AdamW for vectors (biases, reference point) but runs the
// weight-matrix Adam moments in the eigenbasis of per-layer gradient
// covariances (left: G Gᵀ EMA, right: Gᵀ G EMA, bases refreshed
// periodically), which preconditions each layer along the directions the
// gradients actually explore and reaches much lower flow-matching loss in
// the same step budget.
enum class Optimizer { Adam, EigenAdam };

struct TrainConfig {
    std::string dataset = "plane4d";
    int m = 3;                 // number of vector fields to learn
    uint64_t seed = 0;
    int train_count = 10000;
    int test_count = 2000;
    int batch_size = 100;
    int epochs = 200;
    double lr_start = 1e-2;    // linear decay from lr_start to lr_end; set equal for constant
    double lr_end = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    Optimizer optimizer = Optimizer::Adam;
    int eig_update_every = 10;    // EigenAdam: steps between eigenbasis refreshes
    double weight_decay = 1e-3;  // decoupled; never applied to the reference point
    double clip_norm = 10.0;     // global-norm gradient clip; 0 disables
    LossWeights weights;
    SpectralPenaltySpec penalty;
    ModelConfig model;
    int checkpoint_every = 0;            // epochs between checkpoints; 0 = final only
    std::string checkpoint_path;         // empty disables checkpoint files
    std::optional<FrameModel> warm_start;
    std::function<void(int epoch, const LossBreakdown& epoch_mean)> on_epoch;
};

struct StepRecord {
    int64_t step = 0;
    LossBreakdown parts;
};

struct TrainResult {
    FrameModel model;
    std::vector<StepRecord> history;
};

inline void check_train_config(const TrainConfig& cfg) {
    auto bad = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
    if (cfg.m < 1) bad("m must be at least 1");
    if (cfg.epochs < 1) bad("epochs must be at least 1");
    if (cfg.batch_size < 1) bad("batch size must be at least 1");
    if (cfg.train_count < 1) bad("train count must be at least 1");
    if (cfg.test_count < 0) bad("test count must be nonnegative");
    if (cfg.batch_size > cfg.train_count) bad("batch size exceeds the training set size");
    if (!(cfg.lr_start >= 0.0) || !(cfg.lr_end >= 0.0)) bad("learning rate must be nonnegative");
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0)) bad("beta1 must lie in [0, 1)");
    if (!(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) bad("beta2 must lie in [0, 1)");
    if (!(cfg.adam_eps > 0.0)) bad("optimizer epsilon must be positive");
    if (cfg.eig_update_every < 1) bad("eigenbasis refresh cadence must be at least 1");
    if (!(cfg.weight_decay >= 0.0)) bad("weight decay must be nonnegative");
    if (!(cfg.clip_norm >= 0.0)) bad("clip norm must be nonnegative");
    if (cfg.checkpoint_every < 0) bad("checkpoint cadence must be nonnegative");
}

namespace detail {

// All trainable tensors in a fixed order. The gradient view below must list
// the matching tensors of ModelGradients in exactly the same order.
struct ParamView {
    std::vector<Tensor*> tensors;
    size_t c_index = 0;  // reference point: excluded from weight decay
};

inline void net_params(Mlp& net, std::vector<Tensor*>& out) {
    for (Tensor& w : net.w) out.push_back(&w);
    for (Tensor& b : net.b) out.push_back(&b);
}

inline ParamView model_params(FrameModel& model) {
    ParamView pv;
    net_params(model.f_net, pv.tensors);
    net_params(model.t_net, pv.tensors);
    net_params(model.s_net, pv.tensors);
    if (model.sigma_net) net_params(*model.sigma_net, pv.tensors);
    pv.c_index = pv.tensors.size();
    pv.tensors.push_back(&model.c);
    return pv;
}

template <class Grads, class TensorPtr>
inline std::vector<TensorPtr> gradient_view_impl(Grads& g, bool has_sigma) {
    std::vector<TensorPtr> out;
    auto push = [&out](auto& v) {
        for (auto& t : v) out.push_back(&t);
    };
    push(g.f_w);
    push(g.f_b);
    push(g.t_w);
    push(g.t_b);
    push(g.s_w);
    push(g.s_b);
    if (has_sigma) {
        push(g.sigma_w);
        push(g.sigma_b);
    }
    out.push_back(&g.c);
    return out;
}

inline std::vector<const Tensor*> gradient_view(const ModelGradients& g, bool has_sigma) {
    return gradient_view_impl<const ModelGradients, const Tensor*>(g, has_sigma);
}

inline std::vector<Tensor*> mutable_gradient_view(ModelGradients& g, bool has_sigma) {
    return gradient_view_impl<ModelGradients, Tensor*>(g, has_sigma);
}

struct OptState {
    std::vector<Tensor> m1, m2;   // AdamW moments (every parameter under Adam; vectors under
                                  // EigenAdam; rotated-space moments for EigenAdam matrices)
    std::vector<Tensor> cov_l, cov_r;  // EigenAdam gradient-covariance EMAs per matrix
    std::vector<Tensor> q_l, q_r;      // EigenAdam eigenbases (identity until first refresh)
    int64_t t = 0;
};

inline OptState make_opt_state(const ParamView& pv, const TrainConfig& cfg) {
    OptState st;
    st.m1.reserve(pv.tensors.size());
    st.m2.reserve(pv.tensors.size());
    for (const Tensor* p : pv.tensors) {
        st.m1.emplace_back(p->rows(), p->cols());
        st.m2.emplace_back(p->rows(), p->cols());
    }
    if (cfg.optimizer == Optimizer::EigenAdam) {
        for (const Tensor* p : pv.tensors) {
            const bool mat = p->cols() > 1;
            const int r = mat ? p->rows() : 0;
            const int c = mat ? p->cols() : 0;
            st.cov_l.emplace_back(r, r);
            st.cov_r.emplace_back(c, c);
            Tensor ql(r, r), qr(c, c);
            for (int i = 0; i < r; ++i) ql(i, i) = 1.0;
            for (int i = 0; i < c; ++i) qr(i, i) = 1.0;
            st.q_l.push_back(std::move(ql));
            st.q_r.push_back(std::move(qr));
        }
    }
    return st;
}

// C = A * B for plain row-major matrices.
inline Tensor matmul_plain(const Tensor& a, const Tensor& b) {
    require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
    Tensor out(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    return out;
}

inline Tensor transpose_plain(const Tensor& a) {
    Tensor out(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

// Orthonormal eigenbasis (columns) of a symmetric PSD accumulator.
inline Tensor eigenbasis_of(const Tensor& cov) {
    const int n = cov.rows();
    std::vector<double> a(cov.data(), cov.data() + cov.size());
    for (int i = 0; i < n; ++i)  // symmetrize away accumulation round-off
        for (int j = i + 1; j < n; ++j) {
            const double m = 0.5 * (a[static_cast<size_t>(i) * n + j] + a[static_cast<size_t>(j) * n + i]);
            a[static_cast<size_t>(i) * n + j] = a[static_cast<size_t>(j) * n + i] = m;
        }
    std::vector<double> vals(static_cast<size_t>(n));
    Tensor q(n, n);
    sym_eigen_jacobi(n, a.data(), vals.data(), q.data());
    return q;
}

inline void optimizer_step(ParamView& pv, const std::vector<const Tensor*>& grads, OptState& st,
                           double lr, const TrainConfig& cfg) {
    require(grads.size() == pv.tensors.size(), "optimizer: gradient/parameter count mismatch");

    double sq = 0.0;
    for (const Tensor* g : grads)
        for (size_t i = 0; i < g->size(); ++i) sq += (*g)[i] * (*g)[i];
    if (!std::isfinite(sq)) throw NumericError("trainer: gradient is not finite");
    const double gnorm = std::sqrt(sq);
    const double clip = (cfg.clip_norm > 0.0 && gnorm > cfg.clip_norm) ? cfg.clip_norm / gnorm : 1.0;

    st.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    for (size_t k = 0; k < pv.tensors.size(); ++k) {
        Tensor& p = *pv.tensors[k];
        const Tensor& g = *grads[k];
        require(g.rows() == p.rows() && g.cols() == p.cols(),
                "optimizer: gradient/parameter shape mismatch");
        const bool decay = (k != pv.c_index);
        const bool eigen_matrix = cfg.optimizer == Optimizer::EigenAdam && p.cols() > 1;
        if (eigen_matrix) {
            Tensor g_clip(p.rows(), p.cols());
            for (size_t i = 0; i < p.size(); ++i) g_clip[i] = g[i] * clip;
            Tensor& cl = st.cov_l[k];
            Tensor& cr = st.cov_r[k];
            const Tensor gt = transpose_plain(g_clip);
            const Tensor ggt = matmul_plain(g_clip, gt);
            const Tensor gtg = matmul_plain(gt, g_clip);
            for (size_t i = 0; i < cl.size(); ++i)
                cl[i] = cfg.beta2 * cl[i] + (1.0 - cfg.beta2) * ggt[i];
            for (size_t i = 0; i < cr.size(); ++i)
                cr[i] = cfg.beta2 * cr[i] + (1.0 - cfg.beta2) * gtg[i];
            Tensor& ql = st.q_l[k];
            Tensor& qr = st.q_r[k];
            if ((st.t - 1) % cfg.eig_update_every == 0) {
                Tensor ql_new = eigenbasis_of(cl);
                Tensor qr_new = eigenbasis_of(cr);
                // Carry the first moment into the new basis; the elementwise
                // second moment keeps its slots (refreshes are frequent and
                // the basis drifts slowly, so the mismatch is transient).
                Tensor m_std = matmul_plain(matmul_plain(ql, st.m1[k]), transpose_plain(qr));
                st.m1[k] = matmul_plain(matmul_plain(transpose_plain(ql_new), m_std), qr_new);
                ql = std::move(ql_new);
                qr = std::move(qr_new);
            }
            const Tensor g_rot = matmul_plain(matmul_plain(transpose_plain(ql), g_clip), qr);
            Tensor& m1 = st.m1[k];
            Tensor& m2 = st.m2[k];
            Tensor n_rot(p.rows(), p.cols());
            for (size_t i = 0; i < p.size(); ++i) {
                m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g_rot[i];
                m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g_rot[i] * g_rot[i];
                n_rot[i] = (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + cfg.adam_eps);
            }
            const Tensor upd = matmul_plain(matmul_plain(ql, n_rot), transpose_plain(qr));
            for (size_t i = 0; i < p.size(); ++i) {
                double u = upd[i];
                if (decay) u += cfg.weight_decay * p[i];
                p[i] -= lr * u;
            }
            continue;
        }
        Tensor& m1 = st.m1[k];
        Tensor& m2 = st.m2[k];
        for (size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i] * clip;
            m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * gi;
            m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * gi * gi;
            double update = (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + cfg.adam_eps);
            if (decay) update += cfg.weight_decay * p[i];
            p[i] -= lr * update;
        }
    }
}

inline void accumulate_breakdown(LossBreakdown& acc, const LossBreakdown& parts, double w) {
    acc.l_c += w * parts.l_c;
    acc.r_lambda += w * parts.r_lambda;
    acc.r_commute += w * parts.r_commute;
    acc.r_time += w * parts.r_time;
    acc.r_metric += w * parts.r_metric;
    acc.total += w * parts.total;
}

}  // namespace detail

// Batch loss with the gradient accumulated over worker-sized chunks, each on
// its own tape. Per-sample randomness is content-addressed, so chunking does
// not change any sample's draw; the chunk results are reduced in a fixed
// order. With one worker this is exactly batch_loss.
inline LossBreakdown parallel_batch_loss(const FrameModel& model, std::span<const Tensor> batch,
                                         uint64_t step_seed, const LossWeights& w,
                                         const SpectralPenaltySpec& spec, ModelGradients* grads,
                                         int workers) {
    require(workers >= 1, "batch loss: worker count must be positive");
    const int chunks = std::min<int>(workers, static_cast<int>(batch.size()));
    if (chunks <= 1) return batch_loss(model, batch, step_seed, w, spec, grads);

    const size_t per = (batch.size() + chunks - 1) / static_cast<size_t>(chunks);
    std::vector<LossBreakdown> parts(static_cast<size_t>(chunks));
    std::vector<ModelGradients> chunk_grads(grads ? static_cast<size_t>(chunks) : 0);
    std::vector<std::exception_ptr> errors(static_cast<size_t>(chunks));

    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(chunks));
    for (int k = 0; k < chunks; ++k) {
        pool.emplace_back([&, k]() {
            try {
                const size_t lo = static_cast<size_t>(k) * per;
                const size_t hi = std::min(batch.size(), lo + per);
                parts[static_cast<size_t>(k)] =
                    batch_loss(model, batch.subspan(lo, hi - lo), step_seed, w, spec,
                               grads ? &chunk_grads[static_cast<size_t>(k)] : nullptr);
            } catch (...) {
                errors[static_cast<size_t>(k)] = std::current_exception();
            }
        });
    }
    for (std::thread& th : pool) th.join();
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);

    LossBreakdown out;
    out.weights = w;
    const double total_n = static_cast<double>(batch.size());
    auto chunk_size = [&](int k) {
        const size_t lo = static_cast<size_t>(k) * per;
        return static_cast<double>(std::min(batch.size(), lo + per) - lo);
    };
    for (int k = 0; k < chunks; ++k)
        detail::accumulate_breakdown(out, parts[static_cast<size_t>(k)], chunk_size(k) / total_n);

    if (grads) {
        const bool has_sigma = model.sigma_net.has_value();
        *grads = std::move(chunk_grads[0]);
        std::vector<Tensor*> acc = detail::mutable_gradient_view(*grads, has_sigma);
        const double w0 = chunk_size(0) / total_n;
        for (Tensor* t : acc)
            for (size_t i = 0; i < t->size(); ++i) (*t)[i] *= w0;
        for (int k = 1; k < chunks; ++k) {
            std::vector<const Tensor*> add =
                detail::gradient_view(chunk_grads[static_cast<size_t>(k)], has_sigma);
            const double wk = chunk_size(k) / total_n;
            for (size_t j = 0; j < acc.size(); ++j)
                for (size_t i = 0; i < add[j]->size(); ++i) (*acc[j])[i] += wk * (*add[j])[i];
        }
    }
    return out;
}

inline TrainResult train(const TrainConfig& cfg, const ManifoldDataset& data) {
    check_train_config(cfg);
    require(static_cast<int>(data.train.size()) >= cfg.batch_size,
            "trainer: batch size exceeds the provided training set");
    const int n = data.n;

    FrameModel model;
    if (cfg.warm_start) {
        if (cfg.warm_start->n != n || cfg.warm_start->m != cfg.m)
            throw ConfigError("train config: warm start has shape (n=" +
                              std::to_string(cfg.warm_start->n) + ", m=" +
                              std::to_string(cfg.warm_start->m) + "), expected (n=" +
                              std::to_string(n) + ", m=" + std::to_string(cfg.m) + ")");
        model = *cfg.warm_start;
    } else {
        model = init_frame_model(n, cfg.m, cfg.model, Rng::stream({cfg.seed, 9001}).next_u64());
    }

    detail::ParamView pv = detail::model_params(model);
    detail::OptState opt = detail::make_opt_state(pv, cfg);

    const size_t train_n = data.train.size();
    const int64_t batches =
        static_cast<int64_t>((train_n + cfg.batch_size - 1) / static_cast<size_t>(cfg.batch_size));
    const int64_t total_steps = batches * cfg.epochs;
    const int workers = worker_threads();

    std::vector<size_t> order(train_n);
    std::iota(order.begin(), order.end(), size_t{0});

    TrainResult out;
    out.history.reserve(static_cast<size_t>(total_steps));

    auto save_ckpt = [&]() {
        if (cfg.checkpoint_path.empty()) return;
        const std::string tmp = cfg.checkpoint_path + ".tmp";
        save_checkpoint(model, tmp);
        if (std::rename(tmp.c_str(), cfg.checkpoint_path.c_str()) != 0)
            throw ConfigError("cannot move checkpoint into place: " + cfg.checkpoint_path);
    };

    int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng = Rng::stream({cfg.seed, 9002, static_cast<uint64_t>(epoch)});
        for (size_t i = train_n - 1; i > 0; --i) {
            const size_t j = static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i)));
            std::swap(order[i], order[j]);
        }

        LossBreakdown epoch_mean;
        epoch_mean.weights = cfg.weights;
        for (int64_t b = 0; b < batches; ++b) {
            const size_t lo = static_cast<size_t>(b) * static_cast<size_t>(cfg.batch_size);
            const size_t hi = std::min(train_n, lo + static_cast<size_t>(cfg.batch_size));
            std::vector<Tensor> batch;
            batch.reserve(hi - lo);
            for (size_t i = lo; i < hi; ++i) batch.push_back(data.train[order[i]]);

            const uint64_t step_seed =
                Rng::stream({cfg.seed, 9003, static_cast<uint64_t>(epoch), static_cast<uint64_t>(b)})
                    .next_u64();
            ModelGradients grads;
            const LossBreakdown parts =
                parallel_batch_loss(model, batch, step_seed, cfg.weights, cfg.penalty, &grads, workers);
            out.history.push_back({step, parts});
            detail::accumulate_breakdown(epoch_mean, parts, 1.0 / static_cast<double>(batches));

            if (!(parts.total <= 1e6))
                throw DivergenceError("training diverged: total loss " +
                                      std::to_string(parts.total) + " at step " +
                                      std::to_string(step));

            const double frac =
                total_steps > 1 ? static_cast<double>(step) / static_cast<double>(total_steps - 1)
                                : 0.0;
            const double lr = cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac;
            detail::optimizer_step(pv, detail::gradient_view(grads, model.sigma_net.has_value()), opt,
                              lr, cfg);
            ++step;
        }

        if (cfg.on_epoch) cfg.on_epoch(epoch, epoch_mean);
        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
            epoch + 1 < cfg.epochs)
            save_ckpt();
    }
    save_ckpt();

    out.model = std::move(model);
    return out;
}

inline TrainResult train(const TrainConfig& cfg) {
    check_train_config(cfg);
    ManifoldDataset data = make_dataset(cfg.dataset, {cfg.train_count, cfg.test_count},
                                        Rng::stream({cfg.seed, 9000}).next_u64());
    return train(cfg, data);
}

// ---------------------------------------------------------------------------
// Loss-history CSV.
// ---------------------------------------------------------------------------

inline void save_history_csv(const std::string& path, const std::vector<StepRecord>& history) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot open loss history for writing: " + path);
    os << "step,l_c,r_lambda,r_commute,r_time,r_metric,total\n";
    char buf[360];
    for (const StepRecord& r : history) {
        std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      static_cast<long long>(r.step), r.parts.l_c, r.parts.r_lambda,
                      r.parts.r_commute, r.parts.r_time, r.parts.r_metric, r.parts.total);
        os << buf;
    }
    if (!os) throw ConfigError("loss history write failed: " + path);
}

}  // namespace frameflow
