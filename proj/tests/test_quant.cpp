#include <gtest/gtest.h>

#include <cmath>

#include "sla2/quant.hpp"
#include "test_util.hpp"

using namespace sla2;

TEST(Quantize, DirectFormula) {
    Matrix<double> x(1, 4, {1.0, -0.5, 0.25, 0.0});
    QuantizedBlock<double> q = quantize(x);
    EXPECT_DOUBLE_EQ(q.scale, 1.0 / 127.0);
    EXPECT_EQ(q.values[0], 127);
    EXPECT_EQ(q.values[1], -64);  // ties away from zero
    EXPECT_EQ(q.values[2], 32);
    EXPECT_EQ(q.values[3], 0);
    Matrix<double> back = dequantize(q);
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_LE(std::abs(back.data()[i] - x.data()[i]), 1.0 / 254.0 + 1e-15);
    }
}

TEST(Quantize, ZeroBlock) {
    Matrix<double> x(3, 3, 0.0);
    QuantizedBlock<double> q = quantize(x);
    for (const auto v : q.values) EXPECT_EQ(v, 0);
    EXPECT_GT(q.scale, 0.0);
    EXPECT_EQ(max_abs(dequantize(q)), 0.0);
}

TEST(Quantize, IntegerCodeIsScaleInvariant) {
    Matrix<double> x = testutil::gaussian_matrix(6, 6, 201);
    QuantizedBlock<double> a = quantize(x);
    QuantizedBlock<double> b = quantize(scale(x, 10.0));
    EXPECT_EQ(a.values, b.values);
}

TEST(Quantize, RoundTripWithinHalfScale) {
    for (std::uint64_t seed : {202u, 203u, 204u}) {
        Matrix<double> x = testutil::gaussian_matrix(8, 8, seed, 3.0);
        QuantizedBlock<double> q = quantize(x);
        Matrix<double> back = dequantize(q);
        for (std::size_t i = 0; i < x.size(); ++i) {
            EXPECT_LE(std::abs(back.data()[i] - x.data()[i]), q.scale / 2.0 + 1e-15);
        }
    }
}

TEST(QuantizedProduct, IdentityBlocks) {
    Matrix<double> eye = Matrix<double>::identity(4);
    Matrix<double> x = testutil::random_matrix(4, 4, 205);
    QuantizedBlock<double> qe = quantize(eye);
    QuantizedBlock<double> qx = quantize(x);
    Matrix<double> prod = quantized_product(qe, qx);
    // identity quantizes exactly, so the product is the dequantized operand
    EXPECT_LE(max_abs_diff(prod, dequantize(qx)), 1e-12);
}

TEST(QuantizedProduct, PropagatedErrorBound) {
    const std::size_t d = 16;
    Matrix<double> a = testutil::gaussian_matrix(d, d, 206);
    Matrix<double> b = testutil::gaussian_matrix(d, d, 207);
    QuantizedBlock<double> qa = quantize(a);
    QuantizedBlock<double> qb = quantize(b);
    Matrix<double> approx = quantized_product(qa, qb);
    Matrix<double> exact = matmul(a, b);
    const double absmax_a = max_abs(a), absmax_b = max_abs(b);
    const double bound = static_cast<double>(d) *
                         (qa.scale * absmax_b / 2.0 + qb.scale * absmax_a / 2.0 +
                          qa.scale * qb.scale / 4.0);
    for (std::size_t i = 0; i < exact.size(); ++i) {
        EXPECT_LE(std::abs(approx.data()[i] - exact.data()[i]), bound + 1e-12);
    }
}

TEST(QuantizedProduct, ProbabilityBlockReconstruction) {
    Matrix<double> p = row_softmax(testutil::gaussian_matrix(8, 8, 208));
    QuantizedBlock<double> qp = quantize(p);
    EXPECT_LE(qp.scale, 1.0 / 127.0 + 1e-15);  // absmax of a probability block ≤ 1
    Matrix<double> back = dequantize(qp);
    for (std::size_t i = 0; i < p.size(); ++i) {
        EXPECT_LE(std::abs(back.data()[i] - p.data()[i]), 1.0 / 254.0 + 1e-15);
    }
}

TEST(SmoothK, ZeroMeanUnchanged) {
    Matrix<double> k = testutil::gaussian_matrix(10, 4, 209);
    Vector<double> mu = colmean(k);
    for (std::size_t i = 0; i < k.rows(); ++i)
        for (std::size_t j = 0; j < k.cols(); ++j) k(i, j) -= mu[j];
    auto [smoothed, mean] = smooth_k(k);
    EXPECT_LE(max_abs_diff(smoothed, k), 1e-15);
}

TEST(SmoothK, ConstantBecomesZero) {
    Matrix<double> k(6, 3, 2.5);
    auto [smoothed, mean] = smooth_k(k);
    EXPECT_EQ(max_abs(smoothed), 0.0);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(mean[j], 2.5);
}

TEST(SmoothK, SoftmaxAttentionUnchanged) {
    const std::size_t n = 24, d = 8;
    Matrix<double> q = testutil::gaussian_matrix(n, d, 210);
    Matrix<double> k = testutil::gaussian_matrix(n, d, 211);
    auto [ks, mean] = smooth_k(k);
    const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
    Matrix<double> p_raw = row_softmax(scale(matmul(q, k, true), inv_sqrt_d));
    Matrix<double> p_smooth = row_softmax(scale(matmul(q, ks, true), inv_sqrt_d));
    EXPECT_LE(max_abs_diff(p_raw, p_smooth), 1e-10);
}

TEST(SmoothKBackward, MatchesDirectJacobian) {
    // d/dk of (k − colmean(k)) applied to upstream G is G − colmean(G).
    Matrix<double> g = testutil::gaussian_matrix(7, 3, 212);
    Matrix<double> dk = smooth_k_backward(g);
    Vector<double> mu = colmean(g);
    for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) {
            EXPECT_NEAR(dk(i, j), g(i, j) - mu[j], 1e-15);
        }
    }
}
