#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "sla2/matrix.hpp"
#include "sla2/quant.hpp"
#include "sla2/router.hpp"

namespace sla2 {

template <class T>
T sigmoid(T x) {
    const T v = T(1) / (T(1) + std::exp(-x));
    return std::clamp(v, std::numeric_limits<T>::min(),
                      T(1) - std::numeric_limits<T>::epsilon() / 2);
}

template <class T>
struct AttentionInputs {
    Matrix<T> q, k, v;  // N×d each
    std::size_t bq = 1;
    std::size_t bk = 1;

    std::size_t seq_len() const { return q.rows(); }
    std::size_t head_dim() const { return q.cols(); }
    std::size_t tm() const { return q.rows() / bq; }
    std::size_t tn() const { return q.rows() / bk; }

    void validate() const {
        if (!q.same_shape(k) || !q.same_shape(v)) {
            throw shape_error("AttentionInputs: q, k, v must share N×d");
        }
        if (bq == 0 || bk == 0 || q.rows() % bq != 0 || q.rows() % bk != 0) {
            throw shape_error("AttentionInputs: N must be divisible by bq and bk");
        }
    }
};

// Per-query-block mixing logits. alpha(i) = σ(rho_i), broadcast over the bq rows
// of query block i.
template <class T>
struct MixRatio {
    Vector<T> rho;

    static MixRatio zeros(std::size_t tm) { return MixRatio{Vector<T>(tm, T(0))}; }
    static MixRatio constant(std::size_t tm, T rho_value) {
        return MixRatio{Vector<T>(tm, rho_value)};
    }

    T alpha(std::size_t block) const { return sigmoid(rho[block]); }
};

template <class T>
using Routing = std::variant<BlockMask, SoftMask<T>>;

// ---------------------------------------------------------------------------
// Full attention oracle
// ---------------------------------------------------------------------------

template <class T>
Matrix<T> attention_scores(const Matrix<T>& q, const Matrix<T>& k) {
    return scale(matmul(q, k, /*transpose_b=*/true), T(1) / std::sqrt(static_cast<T>(q.cols())));
}

template <class T>
Matrix<T> full_attention(const AttentionInputs<T>& inputs) {
    inputs.validate();
    return matmul(row_softmax(attention_scores(inputs.q, inputs.k)), inputs.v);
}

// ---------------------------------------------------------------------------
// Decomposition of full attention into masked and complement parts
// ---------------------------------------------------------------------------

template <class T>
struct DecompositionView {
    Matrix<T> p_full;      // P
    Matrix<T> p1;          // P ⊙ M
    Matrix<T> p2;          // P ⊙ (1−M)
    Vector<T> alpha_star;  // rowsum(P1)
    Matrix<T> p_s;         // P1 row-normalized (zero rows where alpha_star = 0)
};

template <class T>
constexpr T identity_tolerance() {
    return std::is_same_v<T, double> ? T(1e-12) : T(1e-4);
}

template <class T>
DecompositionView<T> decompose(const AttentionInputs<T>& inputs, const BlockMask& mask) {
    inputs.validate();
    DecompositionView<T> view;
    view.p_full = row_softmax(attention_scores(inputs.q, inputs.k));
    const std::size_t n = inputs.seq_len();
    view.p1 = Matrix<T>(n, n);
    view.p2 = Matrix<T>(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const bool kept = mask.at(i / inputs.bq, j / inputs.bk) != 0;
            view.p1(i, j) = kept ? view.p_full(i, j) : T(0);
            view.p2(i, j) = kept ? T(0) : view.p_full(i, j);
        }
    }
    view.alpha_star = rowsum(view.p1);
    view.p_s = Matrix<T>(n, n, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        if (view.alpha_star[i] > T(0)) {
            const T inv = T(1) / view.alpha_star[i];
            for (std::size_t j = 0; j < n; ++j) view.p_s(i, j) = view.p1(i, j) * inv;
        }
    }
    // P1·V = α* ⊙ (P_s·V) must hold to rounding.
    Matrix<T> lhs = matmul(view.p1, inputs.v);
    Matrix<T> rhs = matmul(view.p_s, inputs.v);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < inputs.head_dim(); ++c) rhs(i, c) *= view.alpha_star[i];
    }
    if (max_abs_diff(lhs, rhs) > identity_tolerance<T>()) {
        throw numeric_error("decompose: masked-output identity violated");
    }
    return view;
}

// Returns P2·V + (α*−1)⊙O_s and checks it equals O_f − O_s, the exact form of
// the residual the baseline's projection has to absorb.
template <class T>
Matrix<T> sla_residual_identity(const DecompositionView<T>& view, const Matrix<T>& v,
                                const Matrix<T>& o_s) {
    Matrix<T> residual = matmul(view.p2, v);
    for (std::size_t i = 0; i < residual.rows(); ++i) {
        for (std::size_t c = 0; c < residual.cols(); ++c) {
            residual(i, c) += (view.alpha_star[i] - T(1)) * o_s(i, c);
        }
    }
    Matrix<T> expect = sub(matmul(view.p_full, v), o_s);
    const T tol = std::is_same_v<T, double> ? T(1e-10) : T(1e-3);
    if (max_abs_diff(residual, expect) > tol) {
        throw numeric_error("sla_residual_identity: residual does not match O_f - O_s");
    }
    return residual;
}

// ---------------------------------------------------------------------------
// SLA baseline (heuristic mask, additive projection on the linear branch)
// ---------------------------------------------------------------------------

namespace detail {

constexpr double kMaskNegInf = 1e9;  // additive pre-softmax mask penalty

// Row-normalizes; rows with zero sum become zero rows.
template <class T>
Matrix<T> normalize_rows_or_zero(const Matrix<T>& x, Vector<T>* out_rowsum = nullptr) {
    Matrix<T> out(x.rows(), x.cols(), T(0));
    Vector<T> sums = rowsum(x);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        if (sums[i] != T(0)) {
            const T inv = T(1) / sums[i];
            for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) * inv;
        }
    }
    if (out_rowsum) *out_rowsum = std::move(sums);
    return out;
}

}  // namespace detail

// Heuristic split per pooled-score row: top ceil(k_h%·tn) blocks to sparse
// attention, bottom floor(k_l%·tn) skipped, remainder to the linear branch.
// Output is O_s + O_l·proj (the additive-projection formulation).
template <class T>
Matrix<T> sla_baseline_forward(const AttentionInputs<T>& inputs, double k_h, double k_l,
                               const Matrix<T>& proj) {
    inputs.validate();
    if (k_h <= 0.0 || k_l < 0.0 || k_h + k_l > 100.0) {
        throw shape_error("sla_baseline_forward: need k_h > 0, k_l >= 0, k_h + k_l <= 100");
    }
    const std::size_t d = inputs.head_dim();
    if (proj.rows() != d || proj.cols() != d) {
        throw shape_error("sla_baseline_forward: proj must be d×d");
    }
    const std::size_t tm = inputs.tm(), tn = inputs.tn();
    const auto kappa_h = std::min<std::size_t>(
        tn, std::max<std::size_t>(1, static_cast<std::size_t>(
                                          std::ceil(k_h / 100.0 * static_cast<double>(tn)))));
    const auto kappa_l = std::min<std::size_t>(
        tn - kappa_h,
        static_cast<std::size_t>(std::floor(k_l / 100.0 * static_cast<double>(tn))));

    Matrix<T> pc = row_softmax(scale(
        matmul(mean_pool(inputs.q, inputs.bq), mean_pool(inputs.k, inputs.bk), true),
        T(1) / std::sqrt(static_cast<T>(d))));

    BlockMask sparse = BlockMask::zeros(tm, tn);
    sparse.keep_per_row = kappa_h;
    BlockMask linear = BlockMask::zeros(tm, tn);
    std::vector<std::size_t> idx(tn);
    for (std::size_t i = 0; i < tm; ++i) {
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return pc(i, a) > pc(i, b); });
        for (std::size_t r = 0; r < kappa_h; ++r) sparse.at(i, idx[r]) = 1;
        for (std::size_t r = kappa_h; r + kappa_l < tn; ++r) linear.at(i, idx[r]) = 1;
    }

    // Sparse branch: softmax restricted to selected entries.
    Matrix<T> s = attention_scores(inputs.q, inputs.k);
    for (std::size_t i = 0; i < s.rows(); ++i) {
        for (std::size_t j = 0; j < s.cols(); ++j) {
            if (!sparse.at(i / inputs.bq, j / inputs.bk)) s(i, j) -= T(detail::kMaskNegInf);
        }
    }
    Matrix<T> o_s = matmul(row_softmax(s), inputs.v);

    // Linear branch, gated form: φ(Q)(φ(K)ᵀ(M_l V)) / (φ(Q)(φ(K)ᵀ(M_l 1))).
    bool any_linear = false;
    for (const auto b : linear.bits) any_linear |= (b != 0);
    Matrix<T> o_l(inputs.seq_len(), d, T(0));
    if (any_linear) {
        Matrix<T> ml = expand_mask<T>(linear, inputs.bq, inputs.bk);
        Matrix<T> phi_q = row_softmax(inputs.q);
        Matrix<T> phi_k = row_softmax(inputs.k);
        Matrix<T> num = matmul(phi_q, matmul(transpose(phi_k), matmul(ml, inputs.v)));
        Vector<T> counts = rowsum(ml);
        Vector<T> kd(d, T(0));
        for (std::size_t n = 0; n < phi_k.rows(); ++n) {
            for (std::size_t f = 0; f < d; ++f) kd[f] += phi_k(n, f) * counts[n];
        }
        for (std::size_t r = 0; r < o_l.rows(); ++r) {
            T denom = T(0);
            for (std::size_t f = 0; f < d; ++f) denom += phi_q(r, f) * kd[f];
            for (std::size_t c = 0; c < d; ++c) o_l(r, c) = num(r, c) / denom;
        }
    }
    return add(o_s, matmul(o_l, proj));
}

// ---------------------------------------------------------------------------
// SLA2 naive (dense) reference forward
// ---------------------------------------------------------------------------

template <class T>
struct NaiveDetail {
    Matrix<T> p_sparse;    // row-normalized sparse-branch probabilities
    Matrix<T> p_linear;    // row-normalized linear-branch probabilities
    Matrix<T> o_s, o_l;
    Vector<T> alpha_eff;   // per-row effective mixing ratio
};

// Dense reference for the blockwise kernel. Hard masks use the additive large
// negative constant pre-softmax (equivalent to skipping blocks); soft masks
// gate probability mass per block. Rows whose complement is empty fall back to
// the sparse branch alone.
template <class T>
Matrix<T> sla2_forward_naive(const AttentionInputs<T>& inputs, const Routing<T>& routing,
                             const MixRatio<T>& alpha, bool smooth = true,
                             NaiveDetail<T>* detail = nullptr) {
    inputs.validate();
    const std::size_t n = inputs.seq_len(), d = inputs.head_dim();
    const std::size_t bq = inputs.bq, bk = inputs.bk;
    const bool hard = std::holds_alternative<BlockMask>(routing);
    const BlockMask* mask = hard ? &std::get<BlockMask>(routing) : nullptr;
    const SoftMask<T>* soft = hard ? nullptr : &std::get<SoftMask<T>>(routing);
    if (alpha.rho.size() != inputs.tm()) throw shape_error("sla2_forward_naive: rho length != tm");
    if (hard) {
        for (std::size_t i = 0; i < mask->tm; ++i) {
            bool any = false;
            for (std::size_t j = 0; j < mask->tn; ++j) any |= (mask->at(i, j) != 0);
            if (!any) throw shape_error("sla2_forward_naive: mask row keeps no blocks");
        }
    }

    Matrix<T> ktilde = smooth ? smooth_k(inputs.k).first : inputs.k;

    // Sparse branch probabilities.
    Matrix<T> p_sparse;
    if (hard) {
        Matrix<T> s = attention_scores(inputs.q, ktilde);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (!mask->at(i / bq, j / bk)) s(i, j) -= T(detail::kMaskNegInf);
            }
        }
        p_sparse = row_softmax(s);
    } else {
        Matrix<T> s = attention_scores(inputs.q, ktilde);
        p_sparse = Matrix<T>(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            T m = s(i, 0);
            for (std::size_t j = 1; j < n; ++j) m = std::max(m, s(i, j));
            T sum = T(0);
            for (std::size_t j = 0; j < n; ++j) {
                const T w = soft->values(i / bq, j / bk);
                p_sparse(i, j) = w * std::exp(s(i, j) - m);
                sum += p_sparse(i, j);
            }
            const T inv = T(1) / sum;
            for (std::size_t j = 0; j < n; ++j) p_sparse(i, j) *= inv;
        }
    }
    Matrix<T> o_s = matmul(p_sparse, inputs.v);

    // Linear branch probabilities on the complement.
    Matrix<T> phi_q = row_softmax(inputs.q);
    Matrix<T> phi_k = row_softmax(ktilde);
    Matrix<T> u = matmul(phi_q, phi_k, /*transpose_b=*/true);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const T gate = hard ? T(1 - mask->at(i / bq, j / bk))
                                : T(1) - soft->values(i / bq, j / bk);
            u(i, j) *= gate;
        }
    }
    Matrix<T> p_linear = detail::normalize_rows_or_zero(u);
    Matrix<T> o_l = matmul(p_linear, inputs.v);

    Vector<T> alpha_eff(n);
    Matrix<T> out(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t block = i / bq;
        const bool forced = hard && mask->row_full(block);
        const T a = forced ? T(1) : alpha.alpha(block);
        alpha_eff[i] = a;
        for (std::size_t c = 0; c < d; ++c) {
            out(i, c) = forced ? o_s(i, c) : a * o_s(i, c) + (T(1) - a) * o_l(i, c);
        }
    }
    if (detail) {
        *detail = NaiveDetail<T>{std::move(p_sparse), std::move(p_linear), std::move(o_s),
                                 std::move(o_l), std::move(alpha_eff)};
    }
    return out;
}

// ---------------------------------------------------------------------------
// SLA2 blockwise forward (streaming softmax + linear accumulators)
// ---------------------------------------------------------------------------

// Everything the backward needs from the forward.
template <class T>
struct SLA2ForwardSaved {
    Matrix<T> o_s, o_l;                  // branch outputs, N×d
    Vector<T> big_l;                     // per-row logsumexp L = m + log l
    std::vector<Matrix<T>> h_blocks;     // per-query-block d×d accumulators H_i
    std::vector<Vector<T>> z_blocks;     // per-query-block d-vectors Z_i
    Routing<T> routing;                  // the mask (hard) or soft weights used
    Matrix<T> q_phi, k_phi;              // feature-mapped Q and (smoothed) K
    bool smoothed = true;
    std::size_t bq = 1, bk = 1;

    bool hard() const { return std::holds_alternative<BlockMask>(routing); }
};

namespace detail {

template <class T>
Matrix<T> take_rows(const Matrix<T>& m, std::size_t start, std::size_t count) {
    Matrix<T> out(count, m.cols());
    for (std::size_t r = 0; r < count; ++r) {
        const auto src = m.row(start + r);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

// S_ij = Q_i K_j^T / sqrt(d), optionally through quantize → int product → dequantize.
template <class T>
Matrix<T> block_scores_qk(const Matrix<T>& q, const Matrix<T>& k, std::size_t qi0, std::size_t bq,
                          std::size_t kj0, std::size_t bk, const QuantConfig* quant) {
    const std::size_t d = q.cols();
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
    if (quant && quant->qk_product) {
        const auto qa = quantize(take_rows(q, qi0, bq));
        const auto qb = quantize(take_rows(k, kj0, bk));
        return scale(quantized_product(qa, qb, /*transpose_b=*/true), inv_sqrt_d);
    }
    Matrix<T> s(bq, bk);
    for (std::size_t r = 0; r < bq; ++r) {
        const auto qrow = q.row(qi0 + r);
        for (std::size_t t = 0; t < bk; ++t) {
            const auto krow = k.row(kj0 + t);
            T acc = T(0);
            for (std::size_t f = 0; f < d; ++f) acc += qrow[f] * krow[f];
            s(r, t) = acc * inv_sqrt_d;
        }
    }
    return s;
}

template <class T>
Matrix<T> block_product_pv(const Matrix<T>& p, const Matrix<T>& v, std::size_t vj0, std::size_t bk,
                           const QuantConfig* quant) {
    if (quant && quant->pv_product) {
        const auto qp = quantize(p);
        const auto qv = quantize(take_rows(v, vj0, bk));
        return quantized_product(qp, qv);
    }
    const std::size_t d = v.cols();
    Matrix<T> out(p.rows(), d, T(0));
    for (std::size_t r = 0; r < p.rows(); ++r) {
        auto orow = out.row(r);
        for (std::size_t t = 0; t < bk; ++t) {
            const T prt = p(r, t);
            const auto vrow = v.row(vj0 + t);
            for (std::size_t c = 0; c < d; ++c) orow[c] += prt * vrow[c];
        }
    }
    return out;
}

}  // namespace detail

// FlashAttention-style forward: visits only the routed blocks of the sparse
// branch, accumulates the complement into per-query-block linear-attention
// state, and never materializes an N×N matrix. With a SoftMask every block
// contributes to both branches, gated by w and 1−w.
template <class T>
std::pair<Matrix<T>, SLA2ForwardSaved<T>> sla2_forward_blockwise(
    const AttentionInputs<T>& inputs, const Routing<T>& routing, const MixRatio<T>& alpha,
    const QuantConfig* quant = nullptr, bool smooth = true) {
    inputs.validate();
    const std::size_t n = inputs.seq_len(), d = inputs.head_dim();
    const std::size_t bq = inputs.bq, bk = inputs.bk;
    const std::size_t tm = inputs.tm(), tn = inputs.tn();
    const bool hard = std::holds_alternative<BlockMask>(routing);
    const BlockMask* mask = hard ? &std::get<BlockMask>(routing) : nullptr;
    const SoftMask<T>* soft = hard ? nullptr : &std::get<SoftMask<T>>(routing);
    if (alpha.rho.size() != tm) throw shape_error("sla2_forward_blockwise: rho length != tm");
    if (hard && (mask->tm != tm || mask->tn != tn)) {
        throw shape_error("sla2_forward_blockwise: mask geometry mismatch");
    }
    if (!hard && (soft->tm != tm || soft->tn != tn)) {
        throw shape_error("sla2_forward_blockwise: soft mask geometry mismatch");
    }
    if (hard) {
        for (std::size_t i = 0; i < tm; ++i) {
            bool any = false;
            for (std::size_t j = 0; j < tn; ++j) any |= (mask->at(i, j) != 0);
            if (!any) throw shape_error("sla2_forward_blockwise: mask row keeps no blocks");
        }
    }

    SLA2ForwardSaved<T> saved;
    saved.routing = routing;
    saved.smoothed = smooth;
    saved.bq = bq;
    saved.bk = bk;

    Matrix<T> ktilde = smooth ? smooth_k(inputs.k).first : inputs.k;
    saved.q_phi = row_softmax(inputs.q);
    saved.k_phi = row_softmax(ktilde);

    // Per-key-block linear contributions h_j = K^φ_j^T V_j, z_j = colsum(K^φ_j).
    std::vector<Matrix<T>> h(tn);
    std::vector<Vector<T>> z(tn);
    for (std::size_t j = 0; j < tn; ++j) {
        h[j] = Matrix<T>(d, d, T(0));
        z[j] = Vector<T>(d, T(0));
        for (std::size_t t = 0; t < bk; ++t) {
            const auto kp = saved.k_phi.row(j * bk + t);
            const auto vr = inputs.v.row(j * bk + t);
            for (std::size_t f = 0; f < d; ++f) {
                z[j][f] += kp[f];
                const T kf = kp[f];
                auto hrow = h[j].row(f);
                for (std::size_t c = 0; c < d; ++c) hrow[c] += kf * vr[c];
            }
        }
    }

    saved.o_s = Matrix<T>(n, d, T(0));
    saved.o_l = Matrix<T>(n, d, T(0));
    saved.big_l = Vector<T>(n, T(0));
    saved.h_blocks.assign(tm, Matrix<T>(d, d, T(0)));
    saved.z_blocks.assign(tm, Vector<T>(d, T(0)));
    Matrix<T> out(n, d, T(0));

    parallel_for(tm, [&](std::size_t i) {
        const std::size_t r0 = i * bq;
        std::vector<T> m_run(bq, -std::numeric_limits<T>::infinity());
        std::vector<T> l_run(bq, T(0));
        Matrix<T> o_acc(bq, d, T(0));
        Matrix<T>& h_i = saved.h_blocks[i];
        Vector<T>& z_i = saved.z_blocks[i];

        for (std::size_t j = 0; j < tn; ++j) {
            const T w = hard ? static_cast<T>(mask->at(i, j)) : soft->values(i, j);
            const T cw = hard ? static_cast<T>(1 - mask->at(i, j)) : T(1) - soft->values(i, j);
            if (cw > T(0)) {
                for (std::size_t f = 0; f < d; ++f) {
                    z_i[f] += cw * z[j][f];
                    const auto hsrc = h[j].row(f);
                    auto hdst = h_i.row(f);
                    for (std::size_t c = 0; c < d; ++c) hdst[c] += cw * hsrc[c];
                }
            }
            if (w <= T(0)) continue;

            Matrix<T> s = detail::block_scores_qk(inputs.q, ktilde, r0, bq, j * bk, bk, quant);
            Matrix<T> p(bq, bk);
            std::vector<T> row_sums(bq);
            for (std::size_t r = 0; r < bq; ++r) {
                T mx = s(r, 0);
                for (std::size_t t = 1; t < bk; ++t) mx = std::max(mx, s(r, t));
                const T m_new = std::max(m_run[r], mx);
                const T rescale = std::exp(m_run[r] - m_new);  // 0 on the first block
                T rs = T(0);
                for (std::size_t t = 0; t < bk; ++t) {
                    p(r, t) = std::exp(s(r, t) - m_new);
                    rs += p(r, t);
                }
                row_sums[r] = rs;
                l_run[r] = rescale * l_run[r] + w * rs;
                auto orow = o_acc.row(r);
                for (std::size_t c = 0; c < d; ++c) orow[c] *= rescale;
                m_run[r] = m_new;
            }
            Matrix<T> pv = detail::block_product_pv(p, inputs.v, j * bk, bk, quant);
            for (std::size_t r = 0; r < bq; ++r) {
                auto orow = o_acc.row(r);
                const auto pvrow = pv.row(r);
                for (std::size_t c = 0; c < d; ++c) orow[c] += w * pvrow[c];
            }
        }

        const bool full_row = hard && mask->row_full(i);
        const T a = full_row ? T(1) : alpha.alpha(i);
        for (std::size_t r = 0; r < bq; ++r) {
            const T inv_l = T(1) / l_run[r];
            saved.big_l[r0 + r] = m_run[r] + std::log(l_run[r]);
            auto os = saved.o_s.row(r0 + r);
            const auto oa = o_acc.row(r);
            for (std::size_t c = 0; c < d; ++c) os[c] = oa[c] * inv_l;
            if (!full_row) {
                const auto qp = saved.q_phi.row(r0 + r);
                T denom = T(0);
                for (std::size_t f = 0; f < d; ++f) denom += qp[f] * z_i[f];
                auto ol = saved.o_l.row(r0 + r);
                for (std::size_t c = 0; c < d; ++c) {
                    T num = T(0);
                    for (std::size_t f = 0; f < d; ++f) num += qp[f] * h_i(f, c);
                    ol[c] = num / denom;
                }
            }
            auto orow = out.row(r0 + r);
            const auto os2 = saved.o_s.row(r0 + r);
            const auto ol2 = saved.o_l.row(r0 + r);
            for (std::size_t c = 0; c < d; ++c) {
                orow[c] = full_row ? os2[c] : a * os2[c] + (T(1) - a) * ol2[c];
            }
        }
    });
    return {std::move(out), std::move(saved)};
}

// ---------------------------------------------------------------------------
// SLA2 manual backward
// ---------------------------------------------------------------------------

// Named mutations for verifying that the gradient test suite catches real bugs.
enum class Fault {
    none,
    dv_linear_assign,  // linear-branch dV overwrites instead of accumulating
};

template <class T>
struct SLA2Gradients {
    Matrix<T> dq, dk, dv;
    Vector<T> drho;
    Matrix<T> dproj_q, dproj_k;  // populated only on the stage-1 soft-routing path
};

// Inputs the stage-1 backward needs to chain block-score gradients into the
// router projections. Built by make_router_context on the same (q, smoothed k)
// the forward routed with.
template <class T>
struct Stage1RouterContext {
    RouterParams<T> params;
    Matrix<T> qbar, kbar;    // pooled inputs
    Matrix<T> qproj, kproj;  // pooled inputs after projection
    Matrix<T> pc;            // row-softmaxed block scores
};

template <class T>
Stage1RouterContext<T> make_router_context(const Matrix<T>& q, const Matrix<T>& k_routed,
                                           const RouterParams<T>& params, std::size_t bq,
                                           std::size_t bk) {
    params.validate();
    Stage1RouterContext<T> ctx;
    ctx.params = params;
    ctx.qbar = mean_pool(q, bq);
    ctx.kbar = mean_pool(k_routed, bk);
    ctx.qproj = matmul(ctx.qbar, params.proj_q);
    ctx.kproj = matmul(ctx.kbar, params.proj_k);
    ctx.pc = row_softmax(scale(matmul(ctx.qproj, ctx.kproj, /*transpose_b=*/true),
                               T(1) / std::sqrt(static_cast<T>(q.cols()))));
    return ctx;
}

// Gradients of the blockwise forward with respect to Q, K, V and the mixing
// logits, with the feature-map and K-smoothing Jacobians chained in. On the
// soft-routing path the block-weight gradients are pushed through the
// frozen-λ SoftTop-k rule into the router projections.
template <class T>
SLA2Gradients<T> sla2_backward(const SLA2ForwardSaved<T>& saved,
                               const AttentionInputs<T>& inputs, const MixRatio<T>& alpha,
                               const Matrix<T>& d_out,
                               const Stage1RouterContext<T>* router_ctx = nullptr,
                               Fault fault = Fault::none) {
    inputs.validate();
    const std::size_t n = inputs.seq_len(), d = inputs.head_dim();
    const std::size_t bq = saved.bq, bk = saved.bk;
    const std::size_t tm = n / bq, tn = n / bk;
    if (saved.o_s.rows() != n || saved.o_s.cols() != d || saved.big_l.size() != n) {
        throw contract_error("sla2_backward: saved state missing or inconsistent");
    }
    if (!d_out.same_shape(saved.o_s)) throw shape_error("sla2_backward: d_out shape mismatch");
    const bool hard = saved.hard();
    const BlockMask* mask = hard ? &std::get<BlockMask>(saved.routing) : nullptr;
    const SoftMask<T>* soft = hard ? nullptr : &std::get<SoftMask<T>>(saved.routing);
    if (!hard && !router_ctx) {
        throw contract_error("sla2_backward: soft routing requires a router context");
    }

    Matrix<T> ktilde = saved.smoothed ? smooth_k(inputs.k).first : inputs.k;
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));

    // Branch upstreams and the α gradient.
    Matrix<T> d_os(n, d), d_ol(n, d);
    SLA2Gradients<T> g;
    g.drho = Vector<T>(tm, T(0));
    for (std::size_t i = 0; i < tm; ++i) {
        const bool full_row = hard && mask->row_full(i);
        const T a = full_row ? T(1) : alpha.alpha(i);
        T d_alpha = T(0);
        for (std::size_t r = i * bq; r < (i + 1) * bq; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
                d_os(r, c) = a * d_out(r, c);
                d_ol(r, c) = (T(1) - a) * d_out(r, c);
                d_alpha += d_out(r, c) * (saved.o_s(r, c) - saved.o_l(r, c));
            }
        }
        if (!full_row) {
            const T av = alpha.alpha(i);
            g.drho[i] = d_alpha * av * (T(1) - av);
        }
    }

    Vector<T> d_row_s = rowsum(hadamard(d_os, saved.o_s));
    Vector<T> d_row_l = rowsum(hadamard(d_ol, saved.o_l));

    g.dq = Matrix<T>(n, d, T(0));
    Matrix<T> d_ktilde(n, d, T(0));
    g.dv = Matrix<T>(n, d, T(0));
    Matrix<T> d_qphi(n, d, T(0));
    Matrix<T> d_kphi(n, d, T(0));
    Matrix<T> d_w(tm, tn, T(0));

    // Linear branch: per-query-block dH_i, dZ_i.
    std::vector<Matrix<T>> dh(tm, Matrix<T>(d, d, T(0)));
    std::vector<Vector<T>> dz(tm, Vector<T>(d, T(0)));
    for (std::size_t i = 0; i < tm; ++i) {
        if (hard && mask->row_full(i)) continue;  // no linear contribution
        const Matrix<T>& h_i = saved.h_blocks[i];
        const Vector<T>& z_i = saved.z_blocks[i];
        for (std::size_t r = i * bq; r < (i + 1) * bq; ++r) {
            const auto qp = saved.q_phi.row(r);
            T denom = T(0);
            for (std::size_t f = 0; f < d; ++f) denom += qp[f] * z_i[f];
            const T inv_denom = T(1) / denom;
            for (std::size_t f = 0; f < d; ++f) {
                const T qscaled = qp[f] * inv_denom;
                auto dhrow = dh[i].row(f);
                for (std::size_t c = 0; c < d; ++c) dhrow[c] += qscaled * d_ol(r, c);
                dz[i][f] -= qscaled * d_row_l[r];
            }
            auto dqp = d_qphi.row(r);
            for (std::size_t f = 0; f < d; ++f) {
                T acc = T(0);
                for (std::size_t c = 0; c < d; ++c) acc += d_ol(r, c) * h_i(f, c);
                dqp[f] += (acc - d_row_l[r] * z_i[f]) * inv_denom;
            }
        }
    }

    // Recomputed per-key-block linear contributions (needed for soft dW).
    std::vector<Matrix<T>> h(tn);
    std::vector<Vector<T>> z(tn);
    if (!hard) {
        for (std::size_t j = 0; j < tn; ++j) {
            h[j] = Matrix<T>(d, d, T(0));
            z[j] = Vector<T>(d, T(0));
            for (std::size_t t = 0; t < bk; ++t) {
                const auto kp = saved.k_phi.row(j * bk + t);
                const auto vr = inputs.v.row(j * bk + t);
                for (std::size_t f = 0; f < d; ++f) {
                    z[j][f] += kp[f];
                    for (std::size_t c = 0; c < d; ++c) h[j](f, c) += kp[f] * vr[c];
                }
            }
        }
    }

    // Sparse branch (flash-style) and the per-key-block linear reductions.
    for (std::size_t j = 0; j < tn; ++j) {
        const std::size_t c0 = j * bk;
        Matrix<T> dh_tot(d, d, T(0));
        Vector<T> dz_tot(d, T(0));
        for (std::size_t i = 0; i < tm; ++i) {
            const T w = hard ? static_cast<T>(mask->at(i, j)) : soft->values(i, j);
            const T cw = hard ? static_cast<T>(1 - mask->at(i, j)) : T(1) - soft->values(i, j);
            if (cw > T(0) && !(hard && mask->row_full(i))) {
                for (std::size_t f = 0; f < d; ++f) {
                    dz_tot[f] += cw * dz[i][f];
                    for (std::size_t c = 0; c < d; ++c) dh_tot(f, c) += cw * dh[i](f, c);
                }
                if (!hard) {
                    T dot = T(0);
                    for (std::size_t f = 0; f < d; ++f) {
                        dot += dz[i][f] * z[j][f];
                        for (std::size_t c = 0; c < d; ++c) dot += dh[i](f, c) * h[j](f, c);
                    }
                    d_w(i, j) -= dot;
                }
            }
            if (w <= T(0)) continue;

            const std::size_t r0 = i * bq;
            // Full-precision recompute of scores and probabilities (QAT contract:
            // the backward never sees quantized values).
            for (std::size_t r = 0; r < bq; ++r) {
                const auto qrow = inputs.q.row(r0 + r);
                const auto dorow = d_os.row(r0 + r);
                const T big_l = saved.big_l[r0 + r];
                const T ds_row = d_row_s[r0 + r];
                T dw_acc = T(0);
                for (std::size_t t = 0; t < bk; ++t) {
                    const auto krow = ktilde.row(c0 + t);
                    T s_rt = T(0);
                    for (std::size_t f = 0; f < d; ++f) s_rt += qrow[f] * krow[f];
                    s_rt *= inv_sqrt_d;
                    const T e_rt = std::exp(s_rt - big_l);  // unweighted probability
                    const T p_rt = w * e_rt;
                    const auto vrow = inputs.v.row(c0 + t);
                    T dp_rt = T(0);
                    for (std::size_t c = 0; c < d; ++c) dp_rt += dorow[c] * vrow[c];
                    auto dvrow = g.dv.row(c0 + t);
                    for (std::size_t c = 0; c < d; ++c) dvrow[c] += p_rt * dorow[c];
                    const T ds_rt = p_rt * (dp_rt - ds_row) * inv_sqrt_d;
                    auto dqrow = g.dq.row(r0 + r);
                    auto dkrow = d_ktilde.row(c0 + t);
                    for (std::size_t f = 0; f < d; ++f) {
                        dqrow[f] += ds_rt * krow[f];
                        dkrow[f] += ds_rt * qrow[f];
                    }
                    if (!hard) dw_acc += e_rt * (dp_rt - ds_row);
                }
                if (!hard) d_w(i, j) += dw_acc;
            }
        }
        // dK^φ_j = V_j dH^T + 1·dZ^T ; dV_j += K^φ_j dH.
        for (std::size_t t = 0; t < bk; ++t) {
            const auto vrow = inputs.v.row(c0 + t);
            const auto kprow = saved.k_phi.row(c0 + t);
            auto dkp = d_kphi.row(c0 + t);
            auto dvrow = g.dv.row(c0 + t);
            for (std::size_t f = 0; f < d; ++f) {
                T acc = dz_tot[f];
                for (std::size_t c = 0; c < d; ++c) acc += vrow[c] * dh_tot(f, c);
                dkp[f] += acc;
            }
            for (std::size_t c = 0; c < d; ++c) {
                T acc = T(0);
                for (std::size_t f = 0; f < d; ++f) acc += kprow[f] * dh_tot(f, c);
                if (fault == Fault::dv_linear_assign) {
                    dvrow[c] = acc;
                } else {
                    dvrow[c] += acc;
                }
            }
        }
    }

    // Feature-map chains: φ is a row softmax over the feature axis.
    g.dq = add(g.dq, row_softmax_backward(d_qphi, saved.q_phi));
    d_ktilde = add(d_ktilde, row_softmax_backward(d_kphi, saved.k_phi));

    // Router chain (stage 1): dW → frozen-λ SoftTop-k → row softmax → projections.
    if (!hard) {
        const Stage1RouterContext<T>& ctx = *router_ctx;
        Matrix<T> d_pc = soft_topk_backward(ctx.pc, *soft, d_w);
        Matrix<T> d_scores = row_softmax_backward(d_pc, ctx.pc);
        Matrix<T> d_qproj = scale(matmul(d_scores, ctx.kproj), inv_sqrt_d);
        Matrix<T> d_kproj = scale(matmul(transpose(d_scores), ctx.qproj), inv_sqrt_d);
        g.dproj_q = matmul(transpose(ctx.qbar), d_qproj);
        g.dproj_k = matmul(transpose(ctx.kbar), d_kproj);
        g.dq = add(g.dq, mean_pool_backward(matmul(d_qproj, ctx.params.proj_q, true), bq));
        d_ktilde = add(d_ktilde, mean_pool_backward(matmul(d_kproj, ctx.params.proj_k, true), bk));
    }

    g.dk = saved.smoothed ? smooth_k_backward(d_ktilde) : std::move(d_ktilde);
    return g;
}

}  // namespace sla2
