#include <gtest/gtest.h>

#include <cmath>

#include "sla2/tape.hpp"
#include "sla2/training.hpp"
#include "test_util.hpp"

using namespace sla2;

namespace {

// FD harness adapter: rebuilds the tape expression via `build` on every eval.
template <class Build>
FiniteDiffReport check_op(Build&& build, std::vector<Matrix<double>*> leaves, double eps = 1e-5) {
    std::vector<Matrix<double>> analytic;
    {
        ad::Tape tape;
        std::vector<ad::Tape::Var> vars;
        vars.reserve(leaves.size());
        for (auto* l : leaves) vars.push_back(tape.leaf(*l));
        ad::Tape::Var root = build(tape, vars);
        tape.backward(root);
        for (const auto v : vars) analytic.push_back(tape.grad(v));
    }
    const auto eval = [&]() {
        ad::Tape tape;
        std::vector<ad::Tape::Var> vars;
        vars.reserve(leaves.size());
        for (auto* l : leaves) vars.push_back(tape.leaf(*l));
        return tape.scalar(build(tape, vars));
    };
    std::vector<const Matrix<double>*> aptr;
    for (const auto& a : analytic) aptr.push_back(&a);
    return finite_diff_check(eval, leaves, aptr, eps);
}

Matrix<double> ones(std::size_t r, std::size_t c) { return Matrix<double>(r, c, 1.0); }

}  // namespace

TEST(Tape, QuadraticGradientIsExact) {
    Matrix<double> x = testutil::gaussian_matrix(4, 5, 501);
    FiniteDiffReport report = check_op(
        [&](ad::Tape& t, std::vector<ad::Tape::Var>& v) {
            return t.weighted_sum(t.hadamard(v[0], v[0]), ones(4, 5));
        },
        {&x}, 1e-4);
    EXPECT_LE(report.max_rel_err, 1e-10);
}

TEST(Tape, MatmulGradients) {
    Matrix<double> a = testutil::gaussian_matrix(5, 4, 502);
    Matrix<double> b = testutil::gaussian_matrix(4, 6, 503);
    Matrix<double> w = testutil::gaussian_matrix(5, 6, 504);
    FiniteDiffReport report = check_op(
        [&](ad::Tape& t, std::vector<ad::Tape::Var>& v) {
            return t.weighted_sum(t.matmul(v[0], v[1]), w);
        },
        {&a, &b});
    EXPECT_LE(report.max_rel_err, 1e-6);
}

TEST(Tape, TransposedMatmulGradients) {
    Matrix<double> a = testutil::gaussian_matrix(5, 4, 505);
    Matrix<double> b = testutil::gaussian_matrix(6, 4, 506);
    Matrix<double> w = testutil::gaussian_matrix(5, 6, 507);
    FiniteDiffReport report = check_op(
        [&](ad::Tape& t, std::vector<ad::Tape::Var>& v) {
            return t.weighted_sum(t.matmul(v[0], v[1], true), w);
        },
        {&a, &b});
    EXPECT_LE(report.max_rel_err, 1e-6);
}

TEST(Tape, SoftmaxPoolArithmeticGradients) {
    Matrix<double> x = testutil::gaussian_matrix(8, 6, 508);
    Matrix<double> y = testutil::gaussian_matrix(8, 6, 509);
    Matrix<double> w = testutil::gaussian_matrix(2, 6, 510);
    FiniteDiffReport report = check_op(
        [&](ad::Tape& t, std::vector<ad::Tape::Var>& v) {
            ad::Tape::Var mixed = t.add(t.row_softmax(v[0]), t.scale(t.hadamard(v[0], v[1]), 0.3));
            return t.weighted_sum(t.mean_pool(t.sub(mixed, v[1]), 4), w);
        },
        {&x, &y});
    EXPECT_LE(report.max_rel_err, 1e-6);
}

TEST(Tape, LayerNormGradients) {
    Matrix<double> x = testutil::gaussian_matrix(6, 8, 511);
    Matrix<double> g = testutil::random_matrix(1, 8, 512, 0.5, 1.5);
    Matrix<double> b = testutil::gaussian_matrix(1, 8, 513);
    Matrix<double> w = testutil::gaussian_matrix(6, 8, 514);
    FiniteDiffReport report = check_op(
        [&](ad::Tape& t, std::vector<ad::Tape::Var>& v) {
            return t.weighted_sum(t.layer_norm(v[0], v[1], v[2]), w);
        },
        {&x, &g, &b});
    EXPECT_LE(report.max_rel_err, 1e-6);
}

TEST(Tape, GeluAffineGradients) {
    Matrix<double> x = testutil::gaussian_matrix(5, 4, 515);
    Matrix<double> w1 = testutil::gaussian_matrix(4, 7, 516);
    Matrix<double> b1 = testutil::gaussian_matrix(1, 7, 517);
    Matrix<double> w = testutil::gaussian_matrix(5, 7, 518);
    FiniteDiffReport report = check_op(
        [&](ad::Tape& t, std::vector<ad::Tape::Var>& v) {
            return t.weighted_sum(t.gelu(t.affine(v[0], v[1], v[2])), w);
        },
        {&x, &w1, &b1});
    EXPECT_LE(report.max_rel_err, 1e-6);
}

TEST(Tape, SliceConcatRoundTripGradients) {
    Matrix<double> x = testutil::gaussian_matrix(5, 8, 519);
    Matrix<double> w = testutil::gaussian_matrix(5, 8, 520);
    FiniteDiffReport report = check_op(
        [&](ad::Tape& t, std::vector<ad::Tape::Var>& v) {
            ad::Tape::Var left = t.slice_cols(v[0], 0, 4);
            ad::Tape::Var right = t.slice_cols(v[0], 4, 8);
            return t.weighted_sum(t.concat_cols({t.scale(left, 2.0), right}), w);
        },
        {&x});
    EXPECT_LE(report.max_rel_err, 1e-6);
}

TEST(Tape, MseGradients) {
    Matrix<double> x = testutil::gaussian_matrix(4, 4, 521);
    Matrix<double> target = testutil::gaussian_matrix(4, 4, 522);
    FiniteDiffReport report = check_op(
        [&](ad::Tape& t, std::vector<ad::Tape::Var>& v) { return t.mse_against(v[0], target); },
        {&x});
    EXPECT_LE(report.max_rel_err, 1e-6);
}

TEST(Tape, LeafUsedTwiceAccumulatesBothPaths) {
    Matrix<double> x = testutil::gaussian_matrix(3, 3, 523);
    ad::Tape tape;
    ad::Tape::Var v = tape.leaf(x);
    // f = Σ x + Σ x⊙x  →  df/dx = 1 + 2x
    ad::Tape::Var root = tape.add(tape.weighted_sum(v, ones(3, 3)),
                                  tape.weighted_sum(tape.hadamard(v, v), ones(3, 3)));
    tape.backward(root);
    const Matrix<double>& g = tape.grad(v);
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_NEAR(g.data()[i], 1.0 + 2.0 * x.data()[i], 1e-12);
    }
}

TEST(Tape, FullAttentionCompositionMatchesDirectFunction) {
    auto in = testutil::random_inputs(16, 4, 4, 4, 524);
    ad::Tape tape;
    ad::Tape::Var q = tape.leaf(in.q), k = tape.leaf(in.k), v = tape.leaf(in.v);
    ad::Tape::Var o = tape.full_attention(q, k, v);
    EXPECT_LE(max_abs_diff(tape.value(o), full_attention(in)), 1e-14);
}

TEST(Tape, Sla2OpValueMatchesBlockwiseForward) {
    auto in = testutil::random_inputs(16, 4, 4, 4, 525);
    RouterParams<double> router = RouterParams<double>::identity(4);
    Matrix<double> rho = testutil::random_matrix(4, 1, 526);

    ad::Tape tape;
    ad::Tape::Var q = tape.leaf(in.q), k = tape.leaf(in.k), v = tape.leaf(in.v);
    ad::Tape::Var r = tape.leaf(rho);
    ad::Tape::Var o = tape.sla2_attention(q, k, v, r, router, 4, 4, 50.0);

    Matrix<double> ktilde = smooth_k(in.k).first;
    BlockMask mask = hard_topk(block_scores(in.q, ktilde, router, 4, 4), 50.0);
    Vector<double> rho_v(4);
    for (std::size_t i = 0; i < 4; ++i) rho_v[i] = rho(i, 0);
    auto [expect, saved] =
        sla2_forward_blockwise(in, Routing<double>{mask}, MixRatio<double>{rho_v});
    EXPECT_EQ(max_abs_diff(tape.value(o), expect), 0.0);
}

TEST(Tape, Sla2OpGradientsMatchFiniteDifferences) {
    // Perturbations to V and rho never change the hard mask, so the composite
    // map stays differentiable along these coordinates.
    auto in = testutil::random_inputs(16, 4, 4, 4, 527);
    RouterParams<double> router = RouterParams<double>::identity(4);
    Matrix<double> rho = testutil::random_matrix(4, 1, 528);
    Matrix<double> w = testutil::gaussian_matrix(16, 4, 529);

    FiniteDiffReport report = check_op(
        [&](ad::Tape& t, std::vector<ad::Tape::Var>& v) {
            ad::Tape::Var q = t.leaf(in.q, false);
            ad::Tape::Var k = t.leaf(in.k, false);
            return t.weighted_sum(t.sla2_attention(q, k, v[0], v[1], router, 4, 4, 50.0), w);
        },
        {&in.v, &rho});
    EXPECT_LE(report.max_rel_err, 1e-6);
}
