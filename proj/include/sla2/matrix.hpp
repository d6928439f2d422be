#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sla2/common.hpp"

namespace sla2 {

// Dense row-major matrix. The single carrier type for Q, K, V, score matrices,
// probability matrices and outputs. All reductions over it use a fixed serial
// order per output element, so results are bit-identical across runs and
// thread counts.
template <class T>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (rows_ * cols_ != data_.size()) {
            throw shape_error("Matrix: rows*cols != data length");
        }
        check_finite("Matrix construction");
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    void check_finite(const char* where) const {
        for (const T v : data_) {
            if (!std::isfinite(v)) {
                throw numeric_error(std::string(where) + ": non-finite entry");
            }
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n, T(0));
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
        return m;
    }

    template <class U>
    Matrix<U> cast() const {
        Matrix<U> out(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

template <class T>
class Vector {
public:
    Vector() = default;
    explicit Vector(std::size_t len, T fill = T(0)) : data_(len, fill) {}
    explicit Vector(std::vector<T> data) : data_(std::move(data)) {}

    std::size_t size() const { return data_.size(); }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    void check_finite(const char* where) const {
        for (const T v : data_) {
            if (!std::isfinite(v)) {
                throw numeric_error(std::string(where) + ": non-finite entry");
            }
        }
    }

private:
    std::vector<T> data_;
};

// a * b, or a * b^T when transpose_b is set. Accumulation over the inner index is
// always lowest-to-highest, regardless of loop tiling or thread count.
template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b, bool transpose_b = false) {
    const std::size_t inner = transpose_b ? b.cols() : b.rows();
    const std::size_t n_out = transpose_b ? b.rows() : b.cols();
    if (a.cols() != inner) {
        throw shape_error("matmul: inner dimensions disagree (" + std::to_string(a.cols()) +
                          " vs " + std::to_string(inner) + ")");
    }
    Matrix<T> out(a.rows(), n_out, T(0));
    if (transpose_b) {
        parallel_for(a.rows(), [&](std::size_t i) {
            const T* arow = a.data().data() + i * a.cols();
            T* orow = out.data().data() + i * n_out;
            for (std::size_t j = 0; j < n_out; ++j) {
                const T* brow = b.data().data() + j * b.cols();
                T acc = T(0);
                for (std::size_t k = 0; k < inner; ++k) acc += arow[k] * brow[k];
                orow[j] = acc;
            }
        });
    } else {
        // i-k-j order: contiguous streaming over b and out; per-element accumulation
        // still proceeds in increasing k.
        parallel_for(a.rows(), [&](std::size_t i) {
            const T* arow = a.data().data() + i * a.cols();
            T* orow = out.data().data() + i * n_out;
            for (std::size_t k = 0; k < inner; ++k) {
                const T aik = arow[k];
                const T* brow = b.data().data() + k * n_out;
                for (std::size_t j = 0; j < n_out; ++j) orow[j] += aik * brow[j];
            }
        });
    }
    return out;
}

// Row-wise softmax with max subtraction.
template <class T>
Matrix<T> row_softmax(const Matrix<T>& s) {
    Matrix<T> out(s.rows(), s.cols());
    parallel_for(s.rows(), [&](std::size_t i) {
        const auto in = s.row(i);
        auto o = out.row(i);
        T m = in[0];
        for (std::size_t j = 1; j < in.size(); ++j) m = std::max(m, in[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < in.size(); ++j) {
            o[j] = std::exp(in[j] - m);
            sum += o[j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < in.size(); ++j) o[j] *= inv;
    });
    return out;
}

// Backward of row_softmax: given the forward output p and upstream dp,
// dx = p ⊙ (dp − rowdot(dp, p)).
template <class T>
Matrix<T> row_softmax_backward(const Matrix<T>& dp, const Matrix<T>& p) {
    if (!dp.same_shape(p)) throw shape_error("row_softmax_backward: shape mismatch");
    Matrix<T> dx(p.rows(), p.cols());
    for (std::size_t i = 0; i < p.rows(); ++i) {
        T dot = T(0);
        for (std::size_t j = 0; j < p.cols(); ++j) dot += dp(i, j) * p(i, j);
        for (std::size_t j = 0; j < p.cols(); ++j) dx(i, j) = p(i, j) * (dp(i, j) - dot);
    }
    return dx;
}

// Mean over groups of `block` consecutive rows. Accumulates in a wider type so
// that pooling a block of identical rows returns that row bit-exactly (the sum
// of up to 2048 equal values fits the wide mantissa without rounding).
template <class T>
Matrix<T> mean_pool(const Matrix<T>& x, std::size_t block) {
    if (block == 0 || x.rows() % block != 0) {
        throw shape_error("mean_pool: rows (" + std::to_string(x.rows()) +
                          ") not divisible by block (" + std::to_string(block) + ")");
    }
    using Acc = std::conditional_t<std::is_same_v<T, double>, long double, double>;
    const std::size_t out_rows = x.rows() / block;
    Matrix<T> out(out_rows, x.cols());
    std::vector<Acc> acc(x.cols());
    for (std::size_t g = 0; g < out_rows; ++g) {
        std::fill(acc.begin(), acc.end(), Acc(0));
        for (std::size_t r = 0; r < block; ++r) {
            const auto in = x.row(g * block + r);
            for (std::size_t c = 0; c < x.cols(); ++c) acc[c] += static_cast<Acc>(in[c]);
        }
        for (std::size_t c = 0; c < x.cols(); ++c) {
            out(g, c) = static_cast<T>(acc[c] / static_cast<Acc>(block));
        }
    }
    return out;
}

// Adjoint of mean_pool: spreads each pooled-row gradient evenly over its group.
template <class T>
Matrix<T> mean_pool_backward(const Matrix<T>& dpooled, std::size_t block) {
    Matrix<T> dx(dpooled.rows() * block, dpooled.cols());
    const T inv = T(1) / static_cast<T>(block);
    for (std::size_t g = 0; g < dpooled.rows(); ++g) {
        for (std::size_t r = 0; r < block; ++r) {
            for (std::size_t c = 0; c < dpooled.cols(); ++c) {
                dx(g * block + r, c) = dpooled(g, c) * inv;
            }
        }
    }
    return dx;
}

// Repeats each row of x `block` times (nearest-neighbor expansion along rows).
template <class T>
Matrix<T> expand_rows(const Matrix<T>& x, std::size_t block) {
    Matrix<T> out(x.rows() * block, x.cols());
    for (std::size_t g = 0; g < x.rows(); ++g) {
        for (std::size_t r = 0; r < block; ++r) {
            for (std::size_t c = 0; c < x.cols(); ++c) out(g * block + r, c) = x(g, c);
        }
    }
    return out;
}

template <class T>
Vector<T> rowsum(const Matrix<T>& x) {
    Vector<T> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < x.cols(); ++j) acc += x(i, j);
        out[i] = acc;
    }
    return out;
}

template <class T>
Vector<T> colmean(const Matrix<T>& x) {
    Vector<T> out(x.cols(), T(0));
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x(i, j);
    }
    const T inv = T(1) / static_cast<T>(x.rows());
    for (std::size_t j = 0; j < x.cols(); ++j) out[j] *= inv;
    return out;
}

// ---- small elementwise helpers used throughout ----

template <class T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
    if (!a.same_shape(b)) throw shape_error("add: shape mismatch");
    Matrix<T> out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

template <class T>
Matrix<T> sub(const Matrix<T>& a, const Matrix<T>& b) {
    if (!a.same_shape(b)) throw shape_error("sub: shape mismatch");
    Matrix<T> out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

template <class T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
    if (!a.same_shape(b)) throw shape_error("hadamard: shape mismatch");
    Matrix<T> out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

template <class T>
Matrix<T> scale(const Matrix<T>& a, T s) {
    Matrix<T> out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
    return out;
}

template <class T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

template <class T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
    if (!a.same_shape(b)) throw shape_error("max_abs_diff: shape mismatch");
    T m = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    }
    return m;
}

template <class T>
T max_abs(const Matrix<T>& a) {
    T m = T(0);
    for (const T v : a.data()) m = std::max(m, std::abs(v));
    return m;
}

}  // namespace sla2
