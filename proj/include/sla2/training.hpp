#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sla2/attention.hpp"
#include "sla2/data.hpp"
#include "sla2/model.hpp"
#include "sla2/tape.hpp"

namespace sla2 {

// splitmix64-style stream derivation: per-step / per-record seeds come from the
// master seed so any step can be reproduced without replaying RNG state.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

struct TrainConfig {
    std::vector<double> k_percents = {3.0, 5.0, 10.0, 15.0};
    double tau = 0.1;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t steps = 100;
    std::size_t batch_size = 4;
    std::uint64_t seed = 0;
    int stage = 1;
    double sparsity_target = 95.0;     // stage 2
    bool qat = false;                  // stage 2
    bool freeze_projections = false;   // stage 1 heuristic-router ablation

    void validate() const {
        if (k_percents.empty()) throw shape_error("TrainConfig: k_percents must be non-empty");
        for (const double k : k_percents) {
            if (!(k > 0.0 && k <= 100.0)) {
                throw shape_error("TrainConfig: each k_percent must be in (0, 100]");
            }
        }
        if (!(tau > 0.0)) throw numeric_error("TrainConfig: tau must be positive");
    }
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::size_t t = 0;
    std::vector<std::vector<double>> m, v;  // one slot per tensor
};

class Adam {
public:
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    AdamState& state() { return state_; }
    const AdamState& state() const { return state_; }
    void set_state(AdamState s) { state_ = std::move(s); }

    void step(const std::vector<Matrix<double>*>& params,
              const std::vector<const Matrix<double>*>& grads) {
        if (params.size() != grads.size()) throw shape_error("Adam: params/grads length mismatch");
        if (state_.m.empty()) {
            state_.m.resize(params.size());
            state_.v.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                state_.m[i].assign(params[i]->size(), 0.0);
                state_.v[i].assign(params[i]->size(), 0.0);
            }
        }
        ++state_.t;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(state_.t));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(state_.t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i]->data();
            const auto& g = grads[i]->data();
            auto& m = state_.m[i];
            auto& v = state_.v[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                m[j] = b1_ * m[j] + (1.0 - b1_) * g[j];
                v[j] = b2_ * v[j] + (1.0 - b2_) * g[j] * g[j];
                p[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
            }
        }
    }

private:
    double lr_, b1_, b2_, eps_;
    AdamState state_;
};

// ---------------------------------------------------------------------------
// Q/K/V dataset sampling
// ---------------------------------------------------------------------------

struct QKVDataset {
    std::size_t bq = 16;
    std::size_t bk = 8;
    std::vector<QKVRecord> records;

    void validate() const {
        if (records.empty()) return;
        const std::size_t n = records.front().q.rows();
        const std::size_t d = records.front().q.cols();
        for (const auto& r : records) {
            if (r.q.rows() != n || r.q.cols() != d || !r.q.same_shape(r.k) ||
                !r.q.same_shape(r.v)) {
                throw shape_error("QKVDataset: inconsistent record shapes");
            }
        }
    }
};

// Runs the model with full attention on every (sequence, timestep) pair and
// captures per-layer per-head Q, K, V.
inline QKVDataset sample_qkv(const ToyModelParams& model,
                             const std::vector<Matrix<double>>& sequences,
                             const std::vector<std::size_t>& timesteps, std::uint64_t seed) {
    QKVDataset ds;
    ds.bq = model.cfg.bq;
    ds.bk = model.cfg.bk;
    for (std::size_t s = 0; s < sequences.size(); ++s) {
        for (const std::size_t t : timesteps) {
            auto [xt, eps] = ddpm_noisy_sample(sequences[s], t, model.cfg.diffusion_steps,
                                               derive_seed(seed, s, t));
            ad::Tape tape;
            ModelVars mv = register_model(tape, model);
            AttentionRunOptions opts;  // full attention
            model_forward(tape, model, mv, xt, t, opts, &ds.records);
        }
    }
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Stage 1: router + mixing-ratio initialization against full attention
// ---------------------------------------------------------------------------

struct Stage1HeadResult {
    std::size_t layer = 0;
    std::size_t head = 0;
    double k_percent = 5.0;
    RouterParams<double> router;
    Vector<double> rho;
    std::vector<double> loss_curve;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

struct Stage1Result {
    std::vector<Stage1HeadResult> heads;

    const Stage1HeadResult& find(std::size_t layer, std::size_t head, double k_percent) const {
        const Stage1HeadResult* best = nullptr;
        for (const auto& h : heads) {
            if (h.layer == layer && h.head == head &&
                (!best || std::abs(h.k_percent - k_percent) <
                              std::abs(best->k_percent - k_percent))) {
                best = &h;
            }
        }
        if (!best) throw contract_error("Stage1Result: no entry for requested layer/head");
        return *best;
    }
};

// Loss and parameter gradients for one record on the soft-routed training path.
struct Stage1RecordGrads {
    double loss = 0.0;
    Matrix<double> dproj_q, dproj_k;
    Vector<double> drho;
};

inline Stage1RecordGrads stage1_record_grads(const QKVRecord& rec, std::size_t bq, std::size_t bk,
                                             const RouterParams<double>& params,
                                             const Vector<double>& rho, double k_percent) {
    AttentionInputs<double> inputs{rec.q, rec.k, rec.v, bq, bk};
    Matrix<double> o_full = full_attention(inputs);
    Matrix<double> ktilde = smooth_k(inputs.k).first;
    Stage1RouterContext<double> ctx = make_router_context(inputs.q, ktilde, params, bq, bk);
    SoftMask<double> soft = soft_topk(ctx.pc, k_percent, params.tau);
    MixRatio<double> mix{rho};
    auto [out, saved] = sla2_forward_blockwise(inputs, Routing<double>{soft}, mix);
    Matrix<double> diff = sub(out, o_full);
    double loss = 0.0;
    for (const double v : diff.data()) loss += v * v;
    loss /= static_cast<double>(diff.size());
    Matrix<double> d_out = scale(diff, 2.0 / static_cast<double>(diff.size()));
    SLA2Gradients<double> g = sla2_backward(saved, inputs, mix, d_out, &ctx);
    return Stage1RecordGrads{loss, std::move(g.dproj_q), std::move(g.dproj_k),
                             std::move(g.drho)};
}

// Inference-consistent evaluation: hard Top-k routing, MSE to full attention.
inline double stage1_record_loss_hard(const QKVRecord& rec, std::size_t bq, std::size_t bk,
                                      const RouterParams<double>& params,
                                      const Vector<double>& rho, double k_percent) {
    AttentionInputs<double> inputs{rec.q, rec.k, rec.v, bq, bk};
    Matrix<double> o_full = full_attention(inputs);
    Matrix<double> ktilde = smooth_k(inputs.k).first;
    BlockMask mask = hard_topk(block_scores(inputs.q, ktilde, params, bq, bk), k_percent);
    auto [out, saved] = sla2_forward_blockwise(inputs, Routing<double>{mask}, MixRatio<double>{rho});
    Matrix<double> diff = sub(out, o_full);
    double loss = 0.0;
    for (const double v : diff.data()) loss += v * v;
    return loss / static_cast<double>(diff.size());
}

// Trains (proj_q, proj_k, rho) per (layer, head, k%) by minimizing the MSE of
// the soft-routed SLA2 output against full attention over the sampled dataset.
inline Stage1Result stage1_train(const QKVDataset& dataset, const TrainConfig& cfg) {
    cfg.validate();
    dataset.validate();
    if (dataset.records.empty()) throw contract_error("stage1_train: dataset is empty");

    // Group record indices by (layer, head).
    std::vector<std::pair<std::size_t, std::size_t>> groups;
    for (const auto& r : dataset.records) {
        const std::pair<std::size_t, std::size_t> key{r.layer, r.head};
        if (std::find(groups.begin(), groups.end(), key) == groups.end()) groups.push_back(key);
    }
    std::sort(groups.begin(), groups.end());

    Stage1Result result;
    for (const auto& [layer, head] : groups) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < dataset.records.size(); ++i) {
            if (dataset.records[i].layer == layer && dataset.records[i].head == head) {
                idx.push_back(i);
            }
        }
        const std::size_t d = dataset.records[idx.front()].q.cols();
        const std::size_t tm = dataset.records[idx.front()].q.rows() / dataset.bq;

        for (const double k_percent : cfg.k_percents) {
            Stage1HeadResult hr;
            hr.layer = layer;
            hr.head = head;
            hr.k_percent = k_percent;
            hr.router = RouterParams<double>::identity(d, cfg.tau);
            hr.rho = Vector<double>(tm, 0.0);

            Matrix<double> rho_m(tm, 1, 0.0);
            std::vector<Matrix<double>*> tensors;
            if (!cfg.freeze_projections) {
                tensors = {&hr.router.proj_q, &hr.router.proj_k, &rho_m};
            } else {
                tensors = {&rho_m};
            }
            Adam opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

            const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
            for (std::size_t step = 0; step < cfg.steps; ++step) {
                Matrix<double> g_pq(d, d, 0.0), g_pk(d, d, 0.0), g_rho(tm, 1, 0.0);
                double loss = 0.0;
                for (std::size_t b = 0; b < batch; ++b) {
                    const std::size_t rec_i = idx[(step * batch + b) % idx.size()];
                    Stage1RecordGrads rg = stage1_record_grads(
                        dataset.records[rec_i], dataset.bq, dataset.bk, hr.router, hr.rho,
                        k_percent);
                    loss += rg.loss;
                    g_pq = add(g_pq, rg.dproj_q);
                    g_pk = add(g_pk, rg.dproj_k);
                    for (std::size_t i = 0; i < tm; ++i) g_rho(i, 0) += rg.drho[i];
                }
                const double inv_b = 1.0 / static_cast<double>(batch);
                loss *= inv_b;
                if (!std::isfinite(loss)) {
                    throw numeric_error("stage1_train: loss diverged at step " +
                                        std::to_string(step));
                }
                g_pq = scale(g_pq, inv_b);
                g_pk = scale(g_pk, inv_b);
                g_rho = scale(g_rho, inv_b);
                hr.loss_curve.push_back(loss);
                if (step == 0) hr.initial_loss = loss;

                std::vector<const Matrix<double>*> grads;
                if (!cfg.freeze_projections) {
                    grads = {&g_pq, &g_pk, &g_rho};
                } else {
                    grads = {&g_rho};
                }
                opt.step(tensors, grads);
                for (std::size_t i = 0; i < tm; ++i) hr.rho[i] = rho_m(i, 0);
            }
            // Post-training loss on the whole group, soft path (the training objective).
            double final_loss = 0.0;
            for (const std::size_t rec_i : idx) {
                final_loss += stage1_record_grads(dataset.records[rec_i], dataset.bq, dataset.bk,
                                                  hr.router, hr.rho, k_percent)
                                  .loss;
            }
            hr.final_loss = final_loss / static_cast<double>(idx.size());
            result.heads.push_back(std::move(hr));
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Diffusion loss and stage 2 fine-tuning
// ---------------------------------------------------------------------------

// ε-prediction MSE with an injectable predictor (used by tests and oracles).
inline double diffusion_loss_with(
    const std::function<Matrix<double>(const Matrix<double>&, std::size_t)>& predict,
    const std::vector<Matrix<double>>& batch, std::size_t timestep, std::size_t total_steps,
    std::uint64_t noise_seed) {
    double loss = 0.0;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        auto [xt, eps] = ddpm_noisy_sample(batch[s], timestep, total_steps,
                                           derive_seed(noise_seed, s));
        Matrix<double> pred = predict(xt, timestep);
        Matrix<double> diff = sub(pred, eps);
        double acc = 0.0;
        for (const double v : diff.data()) acc += v * v;
        loss += acc / static_cast<double>(diff.size());
    }
    return loss / static_cast<double>(batch.size());
}

inline double diffusion_loss(const ToyModelParams& model, const std::vector<Matrix<double>>& batch,
                             std::size_t timestep, std::uint64_t noise_seed,
                             const AttentionRunOptions& opts = {}) {
    return diffusion_loss_with(
        [&](const Matrix<double>& xt, std::size_t t) {
            ad::Tape tape;
            ModelVars mv = register_model(tape, model);
            return tape.value(model_forward(tape, model, mv, xt, t, opts));
        },
        batch, timestep, model.cfg.diffusion_steps, noise_seed);
}

// Mean diffusion loss over a fixed validation grid of timesteps; deterministic.
inline double evaluate_diffusion(const ToyModelParams& model,
                                 const std::vector<Matrix<double>>& val_sequences,
                                 const AttentionRunOptions& opts, std::uint64_t seed,
                                 std::size_t timestep_count = 4) {
    double total = 0.0;
    for (std::size_t i = 0; i < timestep_count; ++i) {
        const std::size_t t =
            (i + 1) * model.cfg.diffusion_steps / (timestep_count + 1);
        total += diffusion_loss(model, val_sequences, t, derive_seed(seed, 7000 + i), opts);
    }
    return total / static_cast<double>(timestep_count);
}

// Stratified timestep schedule: step s draws the (s mod C)-th representative of
// an even C-way split of [0, T). Keeps consecutive loss windows comparable and
// the whole run reproducible from (seed, step).
inline std::size_t scheduled_timestep(std::size_t step, std::size_t total_steps) {
    const std::size_t cycle = std::min<std::size_t>(10, total_steps);
    const std::size_t j = step % cycle;
    const auto t = static_cast<std::size_t>((static_cast<double>(j) + 0.5) *
                                            static_cast<double>(total_steps) /
                                            static_cast<double>(cycle));
    return std::min(t, total_steps - 1);
}

// One gradient step of the end-to-end diffusion objective on a batch of clean
// sequences. Shared by full-attention pretraining and stage-2 fine-tuning.
inline double diffusion_train_step(ToyModelParams& model,
                                   const std::vector<const Matrix<double>*>& batch,
                                   std::size_t timestep, std::uint64_t noise_seed, Adam& opt,
                                   const AttentionRunOptions& opts) {
    ad::Tape tape;
    ModelVars mv = register_model(tape, model);
    ad::Tape::Var total{};
    for (std::size_t s = 0; s < batch.size(); ++s) {
        auto [xt, eps] = ddpm_noisy_sample(*batch[s], timestep, model.cfg.diffusion_steps,
                                           derive_seed(noise_seed, s));
        ad::Tape::Var pred = model_forward(tape, model, mv, xt, timestep, opts);
        ad::Tape::Var l = tape.mse_against(pred, eps);
        total = (s == 0) ? l : tape.add(total, l);
    }
    ad::Tape::Var loss = tape.scale(total, 1.0 / static_cast<double>(batch.size()));
    tape.backward(loss);

    std::vector<Matrix<double>*> tensors;
    std::vector<ad::Tape::Var> vars;
    collect_trainable(model, mv, tensors, vars);
    std::vector<const Matrix<double>*> grads;
    grads.reserve(vars.size());
    for (const auto v : vars) grads.push_back(&tape.grad(v));
    opt.step(tensors, grads);
    return tape.scalar(loss);
}

// Stage-2 run state; serializable so a run can resume bit-exactly.
struct Stage2RunState {
    ToyModelParams model;  // routers installed and frozen, rho trainable
    AdamState adam;
    std::size_t step = 0;
    std::vector<double> loss_curve;
    double k_percent = 5.0;
    bool qat = false;
};

inline Stage2RunState stage2_init(const ToyModelParams& pretrained, const Stage1Result& stage1,
                                  const TrainConfig& cfg) {
    Stage2RunState st;
    st.model = pretrained;
    st.k_percent = 100.0 - cfg.sparsity_target;
    st.qat = cfg.qat;
    for (std::size_t l = 0; l < st.model.layers.size(); ++l) {
        for (std::size_t h = 0; h < st.model.cfg.heads; ++h) {
            const Stage1HeadResult& hr = stage1.find(l, h, st.k_percent);
            st.model.layers[l].router[h] = hr.router;
            Matrix<double> rho_m(hr.rho.size(), 1);
            for (std::size_t i = 0; i < hr.rho.size(); ++i) rho_m(i, 0) = hr.rho[i];
            st.model.layers[l].rho[h] = std::move(rho_m);
        }
    }
    return st;
}

// Advances the stage-2 fine-tune by num_steps. Data order, timesteps and noise
// are all derived from (cfg.seed, state.step), so resuming from a checkpoint
// reproduces the exact continuation.
inline void stage2_run(Stage2RunState& state, const std::vector<Matrix<double>>& sequences,
                       const TrainConfig& cfg, std::size_t num_steps) {
    if (sequences.empty()) throw contract_error("stage2_run: no training sequences");
    Adam opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    opt.set_state(std::move(state.adam));
    QuantConfig quant;
    AttentionRunOptions opts;
    opts.use_sla2 = true;
    opts.k_percent = state.k_percent;
    opts.quant = state.qat ? &quant : nullptr;

    const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
    for (std::size_t s = 0; s < num_steps; ++s) {
        const std::size_t step = state.step;
        std::vector<const Matrix<double>*> batch_ptrs;
        for (std::size_t b = 0; b < batch; ++b) {
            batch_ptrs.push_back(&sequences[(step * batch + b) % sequences.size()]);
        }
        const std::size_t t = scheduled_timestep(step, state.model.cfg.diffusion_steps);
        const double loss = diffusion_train_step(state.model, batch_ptrs, t,
                                                 derive_seed(cfg.seed, 2000, step), opt, opts);
        if (!std::isfinite(loss)) {
            throw numeric_error("stage2_run: loss diverged at step " + std::to_string(step));
        }
        state.loss_curve.push_back(loss);
        ++state.step;
    }
    state.adam = std::move(opt.state());
}

// Full-attention fine-tune used for pretraining and as a comparison baseline.
inline std::vector<double> train_full_attention(ToyModelParams& model,
                                                const std::vector<Matrix<double>>& sequences,
                                                const TrainConfig& cfg, std::size_t num_steps) {
    Adam opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    AttentionRunOptions opts;  // full attention
    std::vector<double> curve;
    const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
    for (std::size_t step = 0; step < num_steps; ++step) {
        std::vector<const Matrix<double>*> batch_ptrs;
        for (std::size_t b = 0; b < batch; ++b) {
            batch_ptrs.push_back(&sequences[(step * batch + b) % sequences.size()]);
        }
        const std::size_t t = scheduled_timestep(step, model.cfg.diffusion_steps);
        const double loss = diffusion_train_step(model, batch_ptrs, t,
                                                 derive_seed(cfg.seed, 2000, step), opt, opts);
        if (!std::isfinite(loss)) {
            throw numeric_error("train_full_attention: loss diverged at step " +
                                std::to_string(step));
        }
        curve.push_back(loss);
    }
    return curve;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient audit
// ---------------------------------------------------------------------------

struct FiniteDiffReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

// Central differences per leaf coordinate against the provided analytic
// gradients. The relative-error denominator is floored at a small fraction of
// the leaf's gradient scale so that near-zero entries do not drown the report
// in finite-difference roundoff.
template <class Eval>
FiniteDiffReport finite_diff_check(Eval&& eval, const std::vector<Matrix<double>*>& leaves,
                                   const std::vector<const Matrix<double>*>& analytic,
                                   double eps) {
    if (leaves.size() != analytic.size()) {
        throw shape_error("finite_diff_check: leaves/analytic length mismatch");
    }
    FiniteDiffReport report;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Matrix<double>& leaf = *leaves[li];
        const Matrix<double>& a = *analytic[li];
        if (!leaf.same_shape(a)) throw shape_error("finite_diff_check: gradient shape mismatch");
        double leaf_scale = 0.0;
        for (const double v : a.data()) leaf_scale = std::max(leaf_scale, std::abs(v));
        const double floor = std::max(1e-3 * leaf_scale, 1e-12);
        for (std::size_t i = 0; i < leaf.size(); ++i) {
            const double saved = leaf.data()[i];
            leaf.data()[i] = saved + eps;
            const double fp = eval();
            leaf.data()[i] = saved - eps;
            const double fm = eval();
            leaf.data()[i] = saved;
            const double fd = (fp - fm) / (2.0 * eps);
            const double abs_err = std::abs(fd - a.data()[i]);
            const double rel =
                abs_err / std::max({std::abs(fd), std::abs(a.data()[i]), floor});
            report.max_abs_err = std::max(report.max_abs_err, abs_err);
            report.max_rel_err = std::max(report.max_rel_err, rel);
        }
    }
    return report;
}

}  // namespace sla2
