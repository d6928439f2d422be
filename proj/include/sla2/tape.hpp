#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "sla2/attention.hpp"
#include "sla2/matrix.hpp"

namespace sla2::ad {

// Reverse-mode tape over Matrix<double>. Ops append nodes in SSA style; the
// backward sweep visits nodes in reverse creation order (which is a reverse
// topological order by construction) and accumulates into parent gradients,
// so a leaf used k times receives exactly k accumulations.
class Tape {
public:
    struct Var {
        std::size_t id = static_cast<std::size_t>(-1);
        bool valid() const { return id != static_cast<std::size_t>(-1); }
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Matrix<double> value, bool requires_grad = true) {
        return push(std::move(value), requires_grad, {});
    }

    const Matrix<double>& value(Var v) const { return nodes_[v.id].value; }
    double scalar(Var v) const { return nodes_[v.id].value(0, 0); }
    const Matrix<double>& grad(Var v) const { return nodes_[v.id].grad; }

    Var matmul(Var a, Var b, bool transpose_b = false) {
        Matrix<double> out = sla2::matmul(value(a), value(b), transpose_b);
        return push(std::move(out), true, [this, a, b, transpose_b](const Matrix<double>& g) {
            if (transpose_b) {
                accumulate(a, sla2::matmul(g, value(b)));
                accumulate(b, sla2::matmul(transpose(g), value(a)));
            } else {
                accumulate(a, sla2::matmul(g, value(b), true));
                accumulate(b, sla2::matmul(transpose(value(a)), g));
            }
        });
    }

    Var add(Var a, Var b) {
        return push(sla2::add(value(a), value(b)), true, [this, a, b](const Matrix<double>& g) {
            accumulate(a, g);
            accumulate(b, g);
        });
    }

    Var sub(Var a, Var b) {
        return push(sla2::sub(value(a), value(b)), true, [this, a, b](const Matrix<double>& g) {
            accumulate(a, g);
            accumulate(b, sla2::scale(g, -1.0));
        });
    }

    Var hadamard(Var a, Var b) {
        return push(sla2::hadamard(value(a), value(b)), true,
                    [this, a, b](const Matrix<double>& g) {
                        accumulate(a, sla2::hadamard(g, value(b)));
                        accumulate(b, sla2::hadamard(g, value(a)));
                    });
    }

    Var scale(Var a, double s) {
        return push(sla2::scale(value(a), s), true, [this, a, s](const Matrix<double>& g) {
            accumulate(a, sla2::scale(g, s));
        });
    }

    Var row_softmax(Var a) {
        Matrix<double> out = sla2::row_softmax(value(a));
        const std::size_t id_out = nodes_.size();
        return push(std::move(out), true, [this, a, id_out](const Matrix<double>& g) {
            accumulate(a, row_softmax_backward(g, nodes_[id_out].value));
        });
    }

    Var mean_pool(Var a, std::size_t block) {
        return push(sla2::mean_pool(value(a), block), true,
                    [this, a, block](const Matrix<double>& g) {
                        accumulate(a, mean_pool_backward(g, block));
                    });
    }

    // x + 1·v, v a 1×cols row vector.
    Var add_row_broadcast(Var x, Var v) {
        const Matrix<double>& xv = value(x);
        const Matrix<double>& vv = value(v);
        if (vv.rows() != 1 || vv.cols() != xv.cols()) {
            throw shape_error("add_row_broadcast: v must be 1×cols(x)");
        }
        Matrix<double> out = xv;
        for (std::size_t r = 0; r < out.rows(); ++r)
            for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += vv(0, c);
        return push(std::move(out), true, [this, x, v](const Matrix<double>& g) {
            accumulate(x, g);
            Matrix<double> gv(1, g.cols(), 0.0);
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) gv(0, c) += g(r, c);
            accumulate(v, gv);
        });
    }

    Var affine(Var x, Var w, Var b) { return add_row_broadcast(matmul(x, w), b); }

    // Per-row layer norm over features with learnable gain/bias (1×cols each).
    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
        const Matrix<double>& xv = value(x);
        const std::size_t rows = xv.rows(), cols = xv.cols();
        Matrix<double> xhat(rows, cols);
        std::vector<double> inv_sigma(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            double mu = 0.0;
            for (std::size_t c = 0; c < cols; ++c) mu += xv(r, c);
            mu /= static_cast<double>(cols);
            double var = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                const double dxc = xv(r, c) - mu;
                var += dxc * dxc;
            }
            var /= static_cast<double>(cols);
            inv_sigma[r] = 1.0 / std::sqrt(var + eps);
            for (std::size_t c = 0; c < cols; ++c) xhat(r, c) = (xv(r, c) - mu) * inv_sigma[r];
        }
        const Matrix<double>& gv = value(gain);
        const Matrix<double>& bv = value(bias);
        Matrix<double> out(rows, cols);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out(r, c) = gv(0, c) * xhat(r, c) + bv(0, c);
        return push(std::move(out), true,
                    [this, x, gain, bias, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](
                        const Matrix<double>& g) {
                        const Matrix<double>& gv = value(gain);
                        const std::size_t rows = g.rows(), cols = g.cols();
                        Matrix<double> dgain(1, cols, 0.0), dbias(1, cols, 0.0), dx(rows, cols);
                        for (std::size_t r = 0; r < rows; ++r) {
                            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                            for (std::size_t c = 0; c < cols; ++c) {
                                const double dxhat = g(r, c) * gv(0, c);
                                dgain(0, c) += g(r, c) * xhat(r, c);
                                dbias(0, c) += g(r, c);
                                mean_dxhat += dxhat;
                                mean_dxhat_xhat += dxhat * xhat(r, c);
                            }
                            mean_dxhat /= static_cast<double>(cols);
                            mean_dxhat_xhat /= static_cast<double>(cols);
                            for (std::size_t c = 0; c < cols; ++c) {
                                const double dxhat = g(r, c) * gv(0, c);
                                dx(r, c) = (dxhat - mean_dxhat - xhat(r, c) * mean_dxhat_xhat) *
                                           inv_sigma[r];
                            }
                        }
                        accumulate(x, dx);
                        accumulate(gain, dgain);
                        accumulate(bias, dbias);
                    });
    }

    Var gelu(Var x) {
        const Matrix<double>& xv = value(x);
        Matrix<double> out(xv.rows(), xv.cols());
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double v = xv.data()[i];
            out.data()[i] = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
        }
        return push(std::move(out), true, [this, x](const Matrix<double>& g) {
            const Matrix<double>& xv = value(x);
            Matrix<double> dx(xv.rows(), xv.cols());
            constexpr double inv_sqrt_2pi = 0.3989422804014327;
            for (std::size_t i = 0; i < xv.size(); ++i) {
                const double v = xv.data()[i];
                const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                dx.data()[i] = g.data()[i] * (cdf + v * pdf);
            }
            accumulate(x, dx);
        });
    }

    Var slice_cols(Var x, std::size_t c0, std::size_t c1) {
        const Matrix<double>& xv = value(x);
        Matrix<double> out(xv.rows(), c1 - c0);
        for (std::size_t r = 0; r < xv.rows(); ++r)
            for (std::size_t c = c0; c < c1; ++c) out(r, c - c0) = xv(r, c);
        return push(std::move(out), true, [this, x, c0, c1](const Matrix<double>& g) {
            Matrix<double> dx(value(x).rows(), value(x).cols(), 0.0);
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = c0; c < c1; ++c) dx(r, c) = g(r, c - c0);
            accumulate(x, dx);
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        std::size_t cols = 0;
        const std::size_t rows = value(parts.front()).rows();
        for (const Var p : parts) cols += value(p).cols();
        Matrix<double> out(rows, cols);
        std::size_t offset = 0;
        for (const Var p : parts) {
            const Matrix<double>& pv = value(p);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < pv.cols(); ++c) out(r, offset + c) = pv(r, c);
            offset += pv.cols();
        }
        return push(std::move(out), true, [this, parts](const Matrix<double>& g) {
            std::size_t offset = 0;
            for (const Var p : parts) {
                const std::size_t pc = value(p).cols();
                Matrix<double> dp(g.rows(), pc);
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < pc; ++c) dp(r, c) = g(r, offset + c);
                accumulate(p, dp);
                offset += pc;
            }
        });
    }

    // mean((x − target)²) as a 1×1 node.
    Var mse_against(Var x, Matrix<double> target) {
        const Matrix<double>& xv = value(x);
        if (!xv.same_shape(target)) throw shape_error("mse_against: shape mismatch");
        double acc = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double diff = xv.data()[i] - target.data()[i];
            acc += diff * diff;
        }
        Matrix<double> out(1, 1, acc / static_cast<double>(xv.size()));
        return push(std::move(out), true,
                    [this, x, target = std::move(target)](const Matrix<double>& g) {
                        const Matrix<double>& xv = value(x);
                        const double s = 2.0 * g(0, 0) / static_cast<double>(xv.size());
                        Matrix<double> dx(xv.rows(), xv.cols());
                        for (std::size_t i = 0; i < xv.size(); ++i) {
                            dx.data()[i] = s * (xv.data()[i] - target.data()[i]);
                        }
                        accumulate(x, dx);
                    });
    }

    // Σ weights ⊙ x as a 1×1 node; handy for gradient-check scalarization.
    Var weighted_sum(Var x, Matrix<double> weights) {
        const Matrix<double>& xv = value(x);
        if (!xv.same_shape(weights)) throw shape_error("weighted_sum: shape mismatch");
        double acc = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) acc += xv.data()[i] * weights.data()[i];
        Matrix<double> out(1, 1, acc);
        return push(std::move(out), true,
                    [this, x, weights = std::move(weights)](const Matrix<double>& g) {
                        accumulate(x, sla2::scale(weights, g(0, 0)));
                    });
    }

    // Hard-routed SLA2 attention as a single custom node backed by the manual
    // backward. The router projections are compile-time constants of the node:
    // hard Top-k blocks gradient flow into them by construction.
    Var sla2_attention(Var q, Var k, Var v, Var rho_col, const RouterParams<double>& router,
                       std::size_t bq, std::size_t bk, double k_percent,
                       const QuantConfig* quant = nullptr, bool smooth = true) {
        AttentionInputs<double> inputs{value(q), value(k), value(v), bq, bk};
        const Matrix<double>& rho_m = value(rho_col);
        MixRatio<double> mix{Vector<double>(std::vector<double>(rho_m.data()))};
        Matrix<double> ktilde = smooth ? smooth_k(inputs.k).first : inputs.k;
        BlockMask mask = hard_topk(block_scores(inputs.q, ktilde, router, bq, bk), k_percent);
        auto [out, saved] = sla2_forward_blockwise(inputs, Routing<double>{mask}, mix,
                                                   quant, smooth);
        return push(std::move(out), true,
                    [this, q, k, v, rho_col, bq, bk, mix, saved = std::move(saved)](
                        const Matrix<double>& g) {
                        AttentionInputs<double> inputs{value(q), value(k), value(v), bq, bk};
                        SLA2Gradients<double> grads = sla2_backward(saved, inputs, mix, g);
                        accumulate(q, grads.dq);
                        accumulate(k, grads.dk);
                        accumulate(v, grads.dv);
                        Matrix<double> drho(grads.drho.size(), 1);
                        for (std::size_t i = 0; i < grads.drho.size(); ++i)
                            drho(i, 0) = grads.drho[i];
                        accumulate(rho_col, drho);
                    });
    }

    // Dense full attention composed from primitives.
    Var full_attention(Var q, Var k, Var v) {
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(value(q).cols()));
        Var p = row_softmax(scale(matmul(q, k, true), inv_sqrt_d));
        return matmul(p, v);
    }

    // Reverse sweep from a 1×1 root.
    void backward(Var root) {
        const Matrix<double>& rv = value(root);
        if (rv.rows() != 1 || rv.cols() != 1) {
            throw shape_error("Tape::backward: root must be scalar (1×1)");
        }
        for (auto& node : nodes_) {
            node.grad = Matrix<double>(node.value.rows(), node.value.cols(), 0.0);
        }
        nodes_[root.id].grad(0, 0) = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (nodes_[i].back) nodes_[i].back(nodes_[i].grad);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix<double> value;
        Matrix<double> grad;
        bool requires_grad = true;
        std::function<void(const Matrix<double>&)> back;
    };

    Var push(Matrix<double> value, bool requires_grad,
             std::function<void(const Matrix<double>&)> back) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(back)});
        return Var{nodes_.size() - 1};
    }

    void accumulate(Var v, const Matrix<double>& g) {
        Matrix<double>& dst = nodes_[v.id].grad;
        for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += g.data()[i];
    }

    std::vector<Node> nodes_;
};

}  // namespace sla2::ad
