#pragma once

#include <cstddef>
#include <cstdint>

#include "sla2/common.hpp"

namespace sla2 {

struct GeometryConfig {
    std::size_t n = 0;       // tokens
    std::size_t d = 0;       // head dim
    std::size_t heads = 1;
    std::size_t layers = 1;
    std::size_t steps = 1;   // denoising iterations

    void validate() const {
        if (n == 0 || d == 0 || heads == 0 || layers == 0 || steps == 0) {
            throw shape_error("GeometryConfig: all fields must be positive");
        }
    }
    double multiplier() const {
        return static_cast<double>(heads) * static_cast<double>(layers) *
               static_cast<double>(steps);
    }
};

struct FlopsReport {
    double full = 0;
    double sparse_branch = 0;
    double linear_branch = 0;
    double router = 0;
    double total = 0;
    double sparsity = 0;
    double savings = 0;            // 1 − total/full
    double overhead_fraction = 0;  // (linear + router)/full, independent of sparsity
};

// Full attention costs 4N²d per head per layer per step.
inline double flops_full(const GeometryConfig& g) {
    g.validate();
    const double n = static_cast<double>(g.n);
    const double d = static_cast<double>(g.d);
    return 4.0 * n * n * d * g.multiplier();
}

// Cost decomposition of the blockwise kernel: the sparse branch pays the kept
// fraction of the full QKᵀ+PV work; the linear branch pays the accumulator form
// (KᵀV and Q·H plus the normalizer); the router pays pooled projections and the
// compressed score matmul. Block counts are kept as real ratios, this is an
// analytic model rather than an execution plan.
inline FlopsReport flops_sla2(const GeometryConfig& g, double sparsity, std::size_t bq,
                              std::size_t bk) {
    g.validate();
    if (!(sparsity >= 0.0 && sparsity < 1.0)) {
        throw shape_error("flops_sla2: sparsity must be in [0, 1)");
    }
    const double n = static_cast<double>(g.n);
    const double d = static_cast<double>(g.d);
    const double tmr = n / static_cast<double>(bq);
    const double tnr = n / static_cast<double>(bk);
    const double mult = g.multiplier();

    FlopsReport r;
    r.sparsity = sparsity;
    r.full = flops_full(g);
    r.sparse_branch = (1.0 - sparsity) * 4.0 * n * n * d * mult;
    r.linear_branch = (4.0 * n * d * d + 2.0 * n * d) * mult;
    r.router = (2.0 * tmr * tnr * d            // compressed score matmul
                + 2.0 * tmr * d * d + 2.0 * tnr * d * d  // the two projections
                + 2.0 * n * d)                 // pooling of Q and K
               * mult;
    r.total = r.sparse_branch + r.linear_branch + r.router;
    r.savings = 1.0 - r.total / r.full;
    r.overhead_fraction = (r.linear_branch + r.router) / r.full;
    return r;
}

}  // namespace sla2
