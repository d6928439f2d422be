#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "sla2/matrix.hpp"

namespace sla2 {

// Learnable routing module: pooled queries/keys go through two square
// projections, block scores are row-softmaxed, then Top-k (hard, inference) or
// SoftTop-k (differentiable, stage-1 training) picks the sparse-branch blocks.
template <class T>
struct RouterParams {
    Matrix<T> proj_q;  // d×d
    Matrix<T> proj_k;  // d×d
    T tau = T(0.1);    // SoftTop-k temperature

    static RouterParams identity(std::size_t d, T tau = T(0.1)) {
        return RouterParams{Matrix<T>::identity(d), Matrix<T>::identity(d), tau};
    }

    void validate() const {
        if (proj_q.rows() != proj_q.cols() || proj_k.rows() != proj_k.cols() ||
            proj_q.rows() != proj_k.rows()) {
            throw shape_error("RouterParams: projections must be square with equal side");
        }
        if (!(tau > T(0))) throw numeric_error("RouterParams: tau must be positive");
    }
};

inline std::size_t topk_budget(double k_percent, std::size_t tn) {
    const auto kappa = static_cast<std::size_t>(
        std::max(1.0, std::llround(k_percent / 100.0 * static_cast<double>(tn)) * 1.0));
    return std::min(kappa, tn);
}

// Hard per-(query-block, key-block) routing decision.
struct BlockMask {
    std::size_t tm = 0;
    std::size_t tn = 0;
    std::vector<std::uint8_t> bits;  // tm×tn row-major
    std::size_t keep_per_row = 0;    // κ for router-produced masks

    std::uint8_t at(std::size_t i, std::size_t j) const { return bits[i * tn + j]; }
    std::uint8_t& at(std::size_t i, std::size_t j) { return bits[i * tn + j]; }

    double sparsity() const {
        std::size_t ones = 0;
        for (const auto b : bits) ones += b;
        return 1.0 - static_cast<double>(ones) / static_cast<double>(tm * tn);
    }

    bool row_full(std::size_t i) const {
        for (std::size_t j = 0; j < tn; ++j)
            if (!at(i, j)) return false;
        return true;
    }

    static BlockMask ones(std::size_t tm, std::size_t tn) {
        return BlockMask{tm, tn, std::vector<std::uint8_t>(tm * tn, 1), tn};
    }
    static BlockMask zeros(std::size_t tm, std::size_t tn) {
        return BlockMask{tm, tn, std::vector<std::uint8_t>(tm * tn, 0), 0};
    }
};

// SoftTop-k output: per-row sigmoid relaxation whose row sums equal the hard
// budget κ. Stores the solved shifts λ and the temperature that produced it.
template <class T>
struct SoftMask {
    std::size_t tm = 0;
    std::size_t tn = 0;
    Matrix<T> values;   // in (0,1)
    Vector<T> lambdas;  // per-row λ_i
    T tau = T(0.1);
    std::size_t budget = 0;  // κ
};

// Row-softmaxed block scores: softmax( (pool(q)·proj_q)(pool(k)·proj_k)^T / sqrt(d) ).
// Callers that smooth K feed the smoothed K here; the row softmax makes the
// result invariant to that choice up to rounding.
template <class T>
Matrix<T> block_scores(const Matrix<T>& q, const Matrix<T>& k, const RouterParams<T>& params,
                       std::size_t bq, std::size_t bk) {
    params.validate();
    const std::size_t d = q.cols();
    if (k.cols() != d || params.proj_q.rows() != d) {
        throw shape_error("block_scores: feature dimension mismatch");
    }
    Matrix<T> qbar = mean_pool(q, bq);
    Matrix<T> kbar = mean_pool(k, bk);
    Matrix<T> qp = matmul(qbar, params.proj_q);
    Matrix<T> kp = matmul(kbar, params.proj_k);
    Matrix<T> scores = scale(matmul(qp, kp, /*transpose_b=*/true),
                             T(1) / std::sqrt(static_cast<T>(d)));
    return row_softmax(scores);
}

// Per row, the κ largest entries get 1 where κ = max(1, round(k%·tn)); ties are
// broken toward the lowest column index.
template <class T>
BlockMask hard_topk(const Matrix<T>& pc, double k_percent) {
    if (!(k_percent > 0.0 && k_percent <= 100.0)) {
        throw shape_error("hard_topk: k_percent must be in (0, 100]");
    }
    const std::size_t tm = pc.rows();
    const std::size_t tn = pc.cols();
    const std::size_t kappa = topk_budget(k_percent, tn);
    BlockMask mask = BlockMask::zeros(tm, tn);
    mask.keep_per_row = kappa;
    std::vector<std::size_t> idx(tn);
    for (std::size_t i = 0; i < tm; ++i) {
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return pc(i, a) > pc(i, b);  // stable: equal values keep lowest index first
        });
        for (std::size_t r = 0; r < kappa; ++r) mask.at(i, idx[r]) = 1;
    }
    return mask;
}

// Differentiable Top-k relaxation: values_ij = σ(pc_ij/τ + λ_i) with λ_i solved
// by bisection so each row sums to κ.
template <class T>
SoftMask<T> soft_topk(const Matrix<T>& pc, double k_percent, T tau) {
    if (!(tau > T(0))) throw numeric_error("soft_topk: tau must be positive");
    const std::size_t tm = pc.rows();
    const std::size_t tn = pc.cols();
    const std::size_t kappa = topk_budget(k_percent, tn);
    SoftMask<T> out;
    out.tm = tm;
    out.tn = tn;
    out.tau = tau;
    out.budget = kappa;
    out.values = Matrix<T>(tm, tn);
    out.lambdas = Vector<T>(tm);

    constexpr int kMaxIters = 200;
    constexpr double kTol = 1e-6;
    const double target = static_cast<double>(kappa);

    for (std::size_t i = 0; i < tm; ++i) {
        double row_min = pc(i, 0), row_max = pc(i, 0);
        for (std::size_t j = 1; j < tn; ++j) {
            row_min = std::min(row_min, static_cast<double>(pc(i, j)));
            row_max = std::max(row_max, static_cast<double>(pc(i, j)));
        }
        // σ saturates beyond ±40, so the root is bracketed.
        double lo = -row_max / static_cast<double>(tau) - 40.0;
        double hi = -row_min / static_cast<double>(tau) + 40.0;
        const auto row_sum = [&](double lam) {
            double s = 0.0;
            for (std::size_t j = 0; j < tn; ++j) {
                const double x = static_cast<double>(pc(i, j)) / static_cast<double>(tau) + lam;
                s += 1.0 / (1.0 + std::exp(-x));
            }
            return s;
        };
        double lam = 0.0;
        double resid = 0.0;
        bool converged = false;
        for (int iter = 0; iter < kMaxIters; ++iter) {
            lam = 0.5 * (lo + hi);
            const double s = row_sum(lam);
            resid = s - target;
            if (std::abs(resid) <= kTol) {
                converged = true;
                break;
            }
            if (resid > 0.0) {
                hi = lam;
            } else {
                lo = lam;
            }
        }
        if (!converged) {
            throw numeric_error("soft_topk: bisection did not converge on row " +
                                std::to_string(i) + " (residual " + std::to_string(resid) + ")");
        }
        out.lambdas[i] = static_cast<T>(lam);
        for (std::size_t j = 0; j < tn; ++j) {
            const double x = static_cast<double>(pc(i, j)) / static_cast<double>(tau) + lam;
            double v = 1.0 / (1.0 + std::exp(-x));
            v = std::clamp(v, std::numeric_limits<double>::min(),
                           1.0 - std::numeric_limits<double>::epsilon() / 2);
            out.values(i, j) = static_cast<T>(v);
        }
    }
    return out;
}

// Frozen-λ gradient: λ_i treated as constant, so the Jacobian is diagonal with
// entries σ'(·)/τ = value(1−value)/τ.
template <class T>
Matrix<T> soft_topk_backward(const Matrix<T>& pc, const SoftMask<T>& softmask,
                             const Matrix<T>& upstream) {
    if (pc.rows() != softmask.tm || pc.cols() != softmask.tn || !pc.same_shape(upstream)) {
        throw shape_error("soft_topk_backward: shape mismatch");
    }
    Matrix<T> grad(pc.rows(), pc.cols());
    const T inv_tau = T(1) / softmask.tau;
    for (std::size_t i = 0; i < pc.size(); ++i) {
        const T v = softmask.values.data()[i];
        grad.data()[i] = upstream.data()[i] * v * (T(1) - v) * inv_tau;
    }
    return grad;
}

// M[i,j] = mc[i/bq, j/bk]; used by dense/oracle paths only.
template <class T>
Matrix<T> expand_mask(const BlockMask& mc, std::size_t bq, std::size_t bk) {
    Matrix<T> m(mc.tm * bq, mc.tn * bk);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            m(i, j) = static_cast<T>(mc.at(i / bq, j / bk));
        }
    }
    return m;
}

}  // namespace sla2
