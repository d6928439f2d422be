#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "sla2/matrix.hpp"

namespace sla2 {

// Fake-quantization settings for the QAT forward. Only the forward pass is
// affected; the backward always consumes full-precision saved tensors.
struct QuantConfig {
    int bits = 8;  // INT8 symmetric; the only width supported here
    bool qk_product = true;
    bool pv_product = true;
};

// Symmetric absmax-scaled INT8 block: values in [-127, 127], real = values * scale.
template <class T>
struct QuantizedBlock {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> values;
    T scale = T(1);
};

// Nearest rounding, ties away from zero.
template <class T>
QuantizedBlock<T> quantize(const Matrix<T>& x) {
    QuantizedBlock<T> q;
    q.rows = x.rows();
    q.cols = x.cols();
    q.values.resize(x.size());
    T absmax = T(0);
    for (const T v : x.data()) absmax = std::max(absmax, std::abs(v));
    if (absmax == T(0)) {
        q.scale = std::numeric_limits<T>::min();
        return q;  // values already zero
    }
    q.scale = absmax / T(127);
    const T inv = T(1) / q.scale;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const long r = std::lround(static_cast<double>(x.data()[i] * inv));
        q.values[i] = static_cast<std::int8_t>(std::clamp<long>(r, -127, 127));
    }
    return q;
}

template <class T>
Matrix<T> dequantize(const QuantizedBlock<T>& q) {
    Matrix<T> out(q.rows, q.cols);
    for (std::size_t i = 0; i < q.values.size(); ++i) {
        out.data()[i] = static_cast<T>(q.values[i]) * q.scale;
    }
    return out;
}

// Integer-domain product accumulated in int32, rescaled by s_a * s_b.
template <class T>
Matrix<T> quantized_product(const QuantizedBlock<T>& a, const QuantizedBlock<T>& b,
                            bool transpose_b = false) {
    const std::size_t inner = transpose_b ? b.cols : b.rows;
    const std::size_t n_out = transpose_b ? b.rows : b.cols;
    if (a.cols != inner) throw shape_error("quantized_product: inner dimensions disagree");
    Matrix<T> out(a.rows, n_out);
    const T s = a.scale * b.scale;
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < n_out; ++j) {
            std::int32_t acc = 0;
            for (std::size_t k = 0; k < inner; ++k) {
                const std::int32_t av = a.values[i * a.cols + k];
                const std::int32_t bv = transpose_b ? b.values[j * b.cols + k]
                                                    : b.values[k * b.cols + j];
                acc += av * bv;
            }
            out(i, j) = static_cast<T>(acc) * s;
        }
    }
    return out;
}

// K smoothing: subtract the per-column mean over tokens. Leaves softmax attention
// unchanged (per-row constant score shift) while shrinking the quantization range.
// Returns the subtracted mean for gradient chaining.
template <class T>
std::pair<Matrix<T>, Vector<T>> smooth_k(const Matrix<T>& k) {
    Vector<T> mean = colmean(k);
    Matrix<T> out(k.rows(), k.cols());
    for (std::size_t i = 0; i < k.rows(); ++i) {
        for (std::size_t j = 0; j < k.cols(); ++j) out(i, j) = k(i, j) - mean[j];
    }
    return {std::move(out), std::move(mean)};
}

// Adjoint of smooth_k: dK = G − colmean(G) per column.
template <class T>
Matrix<T> smooth_k_backward(const Matrix<T>& g) {
    Vector<T> mean = colmean(g);
    Matrix<T> out(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) out(i, j) = g(i, j) - mean[j];
    }
    return out;
}

}  // namespace sla2
