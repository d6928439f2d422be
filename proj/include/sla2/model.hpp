#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "sla2/attention.hpp"
#include "sla2/tape.hpp"

namespace sla2 {

struct ModelConfig {
    std::size_t n = 256;        // sequence length
    std::size_t d_model = 64;
    std::size_t heads = 2;
    std::size_t layers = 2;
    std::size_t diffusion_steps = 32;
    std::size_t bq = 16;
    std::size_t bk = 8;

    std::size_t head_dim() const { return d_model / heads; }
    std::size_t tm() const { return n / bq; }

    void validate() const {
        if (d_model % heads != 0) throw shape_error("ModelConfig: d_model must divide by heads");
        if (n % bq != 0 || n % bk != 0) throw shape_error("ModelConfig: N must divide by bq, bk");
        if (diffusion_steps == 0) throw shape_error("ModelConfig: diffusion_steps must be > 0");
    }
};

// Denoiser parameters. Router projections and mixing logits live per layer per
// head; the projections are only ever trained in stage 1 (outside the model).
struct LayerParams {
    Matrix<double> wq, wk, wv, wo;
    Matrix<double> ln1_g, ln1_b, ln2_g, ln2_b;
    Matrix<double> w_mlp1, b_mlp1, w_mlp2, b_mlp2;
    std::vector<RouterParams<double>> router;  // per head
    std::vector<Matrix<double>> rho;           // per head, tm×1
};

struct ToyModelParams {
    ModelConfig cfg;
    Matrix<double> w_in, b_in;
    Matrix<double> w_t1, b_t1, w_t2, b_t2;  // timestep-embedding MLP
    Matrix<double> ln_f_g, ln_f_b;
    Matrix<double> w_out, b_out;
    std::vector<LayerParams> layers;
};

namespace detail {

inline Matrix<double> gaussian_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                                      double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix<double> m(rows, cols);
    for (auto& v : m.data()) v = dist(rng);
    return m;
}

}  // namespace detail

inline ToyModelParams init_toy_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t dm = cfg.d_model;
    const double s = 0.02;
    ToyModelParams p;
    p.cfg = cfg;
    p.w_in = detail::gaussian_matrix(rng, dm, dm, s);
    p.b_in = Matrix<double>(1, dm, 0.0);
    p.w_t1 = detail::gaussian_matrix(rng, dm, dm, s);
    p.b_t1 = Matrix<double>(1, dm, 0.0);
    p.w_t2 = detail::gaussian_matrix(rng, dm, dm, s);
    p.b_t2 = Matrix<double>(1, dm, 0.0);
    p.ln_f_g = Matrix<double>(1, dm, 1.0);
    p.ln_f_b = Matrix<double>(1, dm, 0.0);
    p.w_out = detail::gaussian_matrix(rng, dm, dm, s);
    p.b_out = Matrix<double>(1, dm, 0.0);
    p.layers.resize(cfg.layers);
    for (auto& layer : p.layers) {
        layer.wq = detail::gaussian_matrix(rng, dm, dm, s);
        layer.wk = detail::gaussian_matrix(rng, dm, dm, s);
        layer.wv = detail::gaussian_matrix(rng, dm, dm, s);
        layer.wo = detail::gaussian_matrix(rng, dm, dm, s);
        layer.ln1_g = Matrix<double>(1, dm, 1.0);
        layer.ln1_b = Matrix<double>(1, dm, 0.0);
        layer.ln2_g = Matrix<double>(1, dm, 1.0);
        layer.ln2_b = Matrix<double>(1, dm, 0.0);
        layer.w_mlp1 = detail::gaussian_matrix(rng, dm, 4 * dm, s);
        layer.b_mlp1 = Matrix<double>(1, 4 * dm, 0.0);
        layer.w_mlp2 = detail::gaussian_matrix(rng, 4 * dm, dm, s);
        layer.b_mlp2 = Matrix<double>(1, dm, 0.0);
        layer.router.assign(cfg.heads, RouterParams<double>::identity(cfg.head_dim()));
        layer.rho.assign(cfg.heads, Matrix<double>(cfg.tm(), 1, 0.0));
    }
    return p;
}

// ---------------------------------------------------------------------------
// DDPM pieces (cosine schedule, ε-prediction target)
// ---------------------------------------------------------------------------

inline double ddpm_alpha_bar(std::size_t t, std::size_t total_steps) {
    constexpr double s = 0.008;
    const auto f = [&](double u) {
        const double x = (u + s) / (1.0 + s) * (3.14159265358979323846 / 2.0);
        const double c = std::cos(x);
        return c * c;
    };
    const double u = static_cast<double>(t) / static_cast<double>(total_steps);
    return f(u) / f(0.0);
}

// x_t = sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·ε ; returns (x_t, ε), deterministic per seed.
inline std::pair<Matrix<double>, Matrix<double>> ddpm_noisy_sample(const Matrix<double>& x0,
                                                                   std::size_t t,
                                                                   std::size_t total_steps,
                                                                   std::uint64_t noise_seed) {
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix<double> eps(x0.rows(), x0.cols());
    for (auto& v : eps.data()) v = dist(rng);
    const double ab = ddpm_alpha_bar(t, total_steps);
    const double ca = std::sqrt(ab);
    const double cb = std::sqrt(1.0 - ab);
    Matrix<double> xt(x0.rows(), x0.cols());
    for (std::size_t i = 0; i < x0.size(); ++i) {
        xt.data()[i] = ca * x0.data()[i] + cb * eps.data()[i];
    }
    return {std::move(xt), std::move(eps)};
}

inline Matrix<double> timestep_features(std::size_t t, std::size_t d_model) {
    Matrix<double> s(1, d_model);
    for (std::size_t i = 0; i < d_model / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) /
                                                   static_cast<double>(d_model));
        s(0, 2 * i) = std::sin(static_cast<double>(t) * freq);
        s(0, 2 * i + 1) = std::cos(static_cast<double>(t) * freq);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Tape-recorded forward
// ---------------------------------------------------------------------------

struct AttentionRunOptions {
    bool use_sla2 = false;  // false → full attention in every head
    double k_percent = 5.0;
    const QuantConfig* quant = nullptr;
};

struct QKVRecord {
    std::size_t layer = 0;
    std::size_t timestep = 0;
    std::size_t head = 0;
    Matrix<double> q, k, v;
};

// Tape handles for every model tensor, in a fixed registration order.
struct ModelVars {
    ad::Tape::Var w_in, b_in, w_t1, b_t1, w_t2, b_t2, ln_f_g, ln_f_b, w_out, b_out;
    struct LayerVars {
        ad::Tape::Var wq, wk, wv, wo, ln1_g, ln1_b, ln2_g, ln2_b, w_mlp1, b_mlp1, w_mlp2, b_mlp2;
        std::vector<ad::Tape::Var> rho;
    };
    std::vector<LayerVars> layers;
};

inline ModelVars register_model(ad::Tape& tape, const ToyModelParams& p) {
    ModelVars mv;
    mv.w_in = tape.leaf(p.w_in);
    mv.b_in = tape.leaf(p.b_in);
    mv.w_t1 = tape.leaf(p.w_t1);
    mv.b_t1 = tape.leaf(p.b_t1);
    mv.w_t2 = tape.leaf(p.w_t2);
    mv.b_t2 = tape.leaf(p.b_t2);
    mv.ln_f_g = tape.leaf(p.ln_f_g);
    mv.ln_f_b = tape.leaf(p.ln_f_b);
    mv.w_out = tape.leaf(p.w_out);
    mv.b_out = tape.leaf(p.b_out);
    mv.layers.resize(p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const LayerParams& lp = p.layers[l];
        auto& lv = mv.layers[l];
        lv.wq = tape.leaf(lp.wq);
        lv.wk = tape.leaf(lp.wk);
        lv.wv = tape.leaf(lp.wv);
        lv.wo = tape.leaf(lp.wo);
        lv.ln1_g = tape.leaf(lp.ln1_g);
        lv.ln1_b = tape.leaf(lp.ln1_b);
        lv.ln2_g = tape.leaf(lp.ln2_g);
        lv.ln2_b = tape.leaf(lp.ln2_b);
        lv.w_mlp1 = tape.leaf(lp.w_mlp1);
        lv.b_mlp1 = tape.leaf(lp.b_mlp1);
        lv.w_mlp2 = tape.leaf(lp.w_mlp2);
        lv.b_mlp2 = tape.leaf(lp.b_mlp2);
        lv.rho.reserve(lp.rho.size());
        for (const auto& rho : lp.rho) lv.rho.push_back(tape.leaf(rho));
    }
    return mv;
}

// Flat list of trainable tensors with their tape handles, in registration
// order. Stage-2 training updates all of them; router projections are not tape
// leaves at all and therefore cannot receive gradients.
inline void collect_trainable(ToyModelParams& p, ModelVars& mv,
                              std::vector<Matrix<double>*>& tensors,
                              std::vector<ad::Tape::Var>& vars) {
    tensors = {&p.w_in, &p.b_in, &p.w_t1, &p.b_t1, &p.w_t2,  &p.b_t2,
               &p.ln_f_g, &p.ln_f_b, &p.w_out, &p.b_out};
    vars = {mv.w_in, mv.b_in, mv.w_t1, mv.b_t1, mv.w_t2,  mv.b_t2,
            mv.ln_f_g, mv.ln_f_b, mv.w_out, mv.b_out};
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        LayerParams& lp = p.layers[l];
        auto& lv = mv.layers[l];
        for (auto* t : {&lp.wq, &lp.wk, &lp.wv, &lp.wo, &lp.ln1_g, &lp.ln1_b, &lp.ln2_g,
                        &lp.ln2_b, &lp.w_mlp1, &lp.b_mlp1, &lp.w_mlp2, &lp.b_mlp2}) {
            tensors.push_back(t);
        }
        for (auto v : {lv.wq, lv.wk, lv.wv, lv.wo, lv.ln1_g, lv.ln1_b, lv.ln2_g, lv.ln2_b,
                       lv.w_mlp1, lv.b_mlp1, lv.w_mlp2, lv.b_mlp2}) {
            vars.push_back(v);
        }
        for (std::size_t h = 0; h < lp.rho.size(); ++h) {
            tensors.push_back(&lp.rho[h]);
            vars.push_back(lv.rho[h]);
        }
    }
}

// Noise-prediction forward: input projection plus timestep embedding, then
// pre-norm transformer blocks, then a projected read-out.
inline ad::Tape::Var model_forward(ad::Tape& tape, const ToyModelParams& p, const ModelVars& mv,
                                   const Matrix<double>& x_t, std::size_t timestep,
                                   const AttentionRunOptions& opts,
                                   std::vector<QKVRecord>* capture = nullptr) {
    const ModelConfig& cfg = p.cfg;
    const std::size_t hd = cfg.head_dim();
    ad::Tape::Var x = tape.leaf(x_t, /*requires_grad=*/false);
    ad::Tape::Var t_feat = tape.leaf(timestep_features(timestep, cfg.d_model), false);
    ad::Tape::Var temb =
        tape.affine(tape.gelu(tape.affine(t_feat, mv.w_t1, mv.b_t1)), mv.w_t2, mv.b_t2);
    ad::Tape::Var h = tape.add_row_broadcast(tape.affine(x, mv.w_in, mv.b_in),
                                             temb);

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto& lv = mv.layers[l];
        ad::Tape::Var a = tape.layer_norm(h, lv.ln1_g, lv.ln1_b);
        ad::Tape::Var qf = tape.matmul(a, lv.wq);
        ad::Tape::Var kf = tape.matmul(a, lv.wk);
        ad::Tape::Var vf = tape.matmul(a, lv.wv);
        std::vector<ad::Tape::Var> head_outs;
        head_outs.reserve(cfg.heads);
        for (std::size_t head = 0; head < cfg.heads; ++head) {
            ad::Tape::Var qh = tape.slice_cols(qf, head * hd, (head + 1) * hd);
            ad::Tape::Var kh = tape.slice_cols(kf, head * hd, (head + 1) * hd);
            ad::Tape::Var vh = tape.slice_cols(vf, head * hd, (head + 1) * hd);
            if (capture) {
                capture->push_back(
                    QKVRecord{l, timestep, head, tape.value(qh), tape.value(kh), tape.value(vh)});
            }
            if (opts.use_sla2) {
                head_outs.push_back(tape.sla2_attention(qh, kh, vh, lv.rho[head],
                                                        p.layers[l].router[head], cfg.bq, cfg.bk,
                                                        opts.k_percent, opts.quant));
            } else {
                head_outs.push_back(tape.full_attention(qh, kh, vh));
            }
        }
        ad::Tape::Var attn = tape.matmul(tape.concat_cols(head_outs), lv.wo);
        h = tape.add(h, attn);
        ad::Tape::Var m = tape.layer_norm(h, lv.ln2_g, lv.ln2_b);
        ad::Tape::Var mlp = tape.affine(tape.gelu(tape.affine(m, lv.w_mlp1, lv.b_mlp1)),
                                        lv.w_mlp2, lv.b_mlp2);
        h = tape.add(h, mlp);
    }
    return tape.affine(tape.layer_norm(h, mv.ln_f_g, mv.ln_f_b), mv.w_out, mv.b_out);
}

}  // namespace sla2
