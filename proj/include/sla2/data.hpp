#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "sla2/matrix.hpp"
#include "sla2/model.hpp"

namespace sla2 {

// Length-n sequences of d_model-dim features drawn from a mixture of smooth
// sinusoids; the denoising task needs global context to separate components.
inline std::vector<Matrix<double>> make_smooth_sequences(std::size_t count, std::size_t n,
                                                         std::size_t d_model,
                                                         std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * 3.14159265358979323846);
    std::uniform_int_distribution<int> freq(1, 8);
    std::normal_distribution<double> amp(0.0, 1.0);
    std::vector<Matrix<double>> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        constexpr std::size_t components = 3;
        std::vector<double> f(components), ph(components);
        for (std::size_t m = 0; m < components; ++m) {
            f[m] = static_cast<double>(freq(rng));
            ph[m] = phase(rng);
        }
        Matrix<double> x(n, d_model);
        for (std::size_t c = 0; c < d_model; ++c) {
            double a[components];
            double po[components];
            for (std::size_t m = 0; m < components; ++m) {
                a[m] = amp(rng) / std::sqrt(static_cast<double>(components));
                po[m] = phase(rng);
            }
            for (std::size_t r = 0; r < n; ++r) {
                double v = 0.0;
                for (std::size_t m = 0; m < components; ++m) {
                    v += a[m] * std::sin(2.0 * 3.14159265358979323846 * f[m] *
                                             static_cast<double>(r) / static_cast<double>(n) +
                                         ph[m] + po[m]);
                }
                x(r, c) = v;
            }
        }
        out.push_back(std::move(x));
    }
    return out;
}

// QKV instances with one dominant key block per query block, constructed so
// that pooled identity scores misrank it. The dominant block holds a few
// strongly aligned rows in the first half of the feature space (spiky scores
// that mean pooling dilutes), while every other block carries a uniform
// medium alignment in the second half (high pooled mean, little exp mass).
// A learned feature metric can amplify the spike subspace; the identity
// metric cannot.
struct PlantedConfig {
    std::size_t n = 256;
    std::size_t d = 16;
    std::size_t bq = 16;
    std::size_t bk = 8;
    std::size_t records = 8;
    double spike_fraction = 0.25;
    double spike_query_scale = 3.0;
    double spike_key_scale = 8.0;
    double decoy_query_scale = 2.0;
    double decoy_key_max = 5.0;
};

struct PlantedRecord {
    Matrix<double> q, k, v;
    std::vector<std::size_t> dominant_block;  // per query block
};

inline std::vector<PlantedRecord> make_planted_qkv(const PlantedConfig& cfg,
                                                   std::uint64_t seed) {
    const std::size_t tm = cfg.n / cfg.bq, tn = cfg.n / cfg.bk;
    const std::size_t d_sig = cfg.d / 2;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.05);
    std::normal_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> decoy_mag(1.0, cfg.decoy_key_max);

    const auto random_unit = [&](std::size_t dim) {
        std::vector<double> u(dim);
        double nrm = 0.0;
        for (auto& v : u) {
            v = unit(rng);
            nrm += v * v;
        }
        nrm = std::sqrt(nrm);
        for (auto& v : u) v /= nrm;
        return u;
    };

    std::vector<PlantedRecord> out;
    out.reserve(cfg.records);
    for (std::size_t rec = 0; rec < cfg.records; ++rec) {
        PlantedRecord pr;
        pr.q = Matrix<double>(cfg.n, cfg.d);
        pr.k = Matrix<double>(cfg.n, cfg.d);
        pr.v = Matrix<double>(cfg.n, cfg.d);
        for (auto& v : pr.q.data()) v = noise(rng);
        for (auto& v : pr.k.data()) v = noise(rng);
        for (auto& v : pr.v.data()) v = unit(rng);

        // Distinct dominant block per query block.
        std::vector<std::size_t> perm(tn);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        pr.dominant_block.assign(perm.begin(), perm.begin() + tm);

        // Shared decoy direction in the second half of the feature space.
        const std::vector<double> w = random_unit(cfg.d - d_sig);

        std::vector<std::vector<double>> u(tm);
        for (std::size_t i = 0; i < tm; ++i) {
            u[i] = random_unit(d_sig);
            // Queries: block-coherent signal direction plus a constant decoy component.
            for (std::size_t r = i * cfg.bq; r < (i + 1) * cfg.bq; ++r) {
                for (std::size_t f = 0; f < d_sig; ++f) {
                    pr.q(r, f) += cfg.spike_query_scale * u[i][f];
                }
                for (std::size_t f = 0; f < cfg.d - d_sig; ++f) {
                    pr.q(r, d_sig + f) += cfg.decoy_query_scale * w[f];
                }
            }
        }
        std::vector<bool> dominant(tn, false);
        std::vector<std::size_t> owner(tn, 0);
        for (std::size_t i = 0; i < tm; ++i) {
            dominant[pr.dominant_block[i]] = true;
            owner[pr.dominant_block[i]] = i;
        }
        const auto spikes = static_cast<std::size_t>(
            std::max(1.0, cfg.spike_fraction * static_cast<double>(cfg.bk)));
        for (std::size_t j = 0; j < tn; ++j) {
            if (dominant[j]) {
                const auto& dir = u[owner[j]];
                for (std::size_t t = 0; t < spikes; ++t) {
                    const std::size_t r = j * cfg.bk + t;
                    for (std::size_t f = 0; f < d_sig; ++f) {
                        pr.k(r, f) += cfg.spike_key_scale * dir[f];
                    }
                }
            } else {
                const double c = decoy_mag(rng);
                for (std::size_t r = j * cfg.bk; r < (j + 1) * cfg.bk; ++r) {
                    for (std::size_t f = 0; f < cfg.d - d_sig; ++f) {
                        pr.k(r, d_sig + f) += c * w[f];
                    }
                }
            }
        }
        out.push_back(std::move(pr));
    }
    return out;
}

}  // namespace sla2
