#pragma once

// Matrix-level reverse-mode tape.
//
// The tape is generic over its matrix algebra: `Mat` gives ordinary reverse
// mode (gradients), `DualMat` carries a directional tangent through every
// value, so running the reverse sweep over a dual tape differentiates the
// gradient itself in that direction (forward-over-reverse Hessian-vector
// products). Backward rules are written once, in terms of the algebra below.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace metactl::ad {

using Mat = Eigen::MatrixXd;

/// Value with a tangent. An empty tangent stands for an exact zero, which
/// skips the tangent half of every product involving constants.
struct DualMat {
    Mat v;
    Mat t;

    bool has_tangent() const { return t.size() != 0; }
};

namespace alg {

// ---- plain algebra -------------------------------------------------------

inline Eigen::Index rows(const Mat& a) { return a.rows(); }
inline Eigen::Index cols(const Mat& a) { return a.cols(); }
inline const Mat& primal(const Mat& a) { return a; }
inline Mat lift(const Mat& a, const Mat*) { return a; }
inline Mat matmul(const Mat& a, const Mat& b) { return a * b; }
inline Mat matmul_tn(const Mat& a, const Mat& b) { return a.transpose() * b; }
inline Mat matmul_nt(const Mat& a, const Mat& b) { return a * b.transpose(); }
inline Mat add(const Mat& a, const Mat& b) { return a + b; }
inline Mat sub(const Mat& a, const Mat& b) { return a - b; }
inline Mat neg(const Mat& a) { return -a; }
inline Mat scaled(const Mat& a, double s) { return a * s; }
inline Mat hadamard(const Mat& a, const Mat& b) { return a.cwiseProduct(b); }
inline Mat tanh_of(const Mat& a) { return a.array().tanh().matrix(); }
inline Mat tanh_grad_from_output(const Mat& y) { return (1.0 - y.array().square()).matrix(); }
inline Mat add_col(const Mat& a, const Mat& c) { return a.colwise() + c.col(0); }
inline Mat row_sums(const Mat& a) { return a.rowwise().sum(); }
inline Mat sum_all(const Mat& a) { return Mat::Constant(1, 1, a.sum()); }
inline Mat squared_norm(const Mat& a) { return Mat::Constant(1, 1, a.squaredNorm()); }
inline Mat broadcast(const Mat& s11, Eigen::Index r, Eigen::Index c) {
    return Mat::Constant(r, c, s11(0, 0));
}
inline Mat scale_by(const Mat& a, const Mat& s11) { return a * s11(0, 0); }
inline Mat segment_as(const Mat& vec, Eigen::Index offset, Eigen::Index r, Eigen::Index c) {
    return Eigen::Map<const Mat>(vec.data() + offset, r, c);
}
inline void add_into_segment(Mat& vec, Eigen::Index offset, const Mat& block) {
    Eigen::Map<Eigen::VectorXd>(vec.data() + offset, block.size()) +=
        Eigen::Map<const Eigen::VectorXd>(block.data(), block.size());
}
inline Mat block_of(const Mat& a, Eigen::Index r0, Eigen::Index c0, Eigen::Index r, Eigen::Index c) {
    return a.block(r0, c0, r, c);
}
inline void add_into_block(Mat& dst, Eigen::Index r0, Eigen::Index c0, const Mat& src) {
    dst.block(r0, c0, src.rows(), src.cols()) += src;
}
inline Mat zeros(const Mat&, Eigen::Index r, Eigen::Index c) { return Mat::Zero(r, c); }
inline void accumulate(Mat& dst, const Mat& src) {
    if (dst.size() == 0) {
        dst = src;
    } else {
        dst += src;
    }
}
inline bool all_finite(const Mat& a) { return a.allFinite(); }

// ---- dual algebra --------------------------------------------------------

inline Eigen::Index rows(const DualMat& a) { return a.v.rows(); }
inline Eigen::Index cols(const DualMat& a) { return a.v.cols(); }
inline const Mat& primal(const DualMat& a) { return a.v; }
inline DualMat lift(const Mat& a, const DualMat*) { return {a, Mat()}; }

namespace detail {
// t_a * b + a * t_b with either tangent possibly zero.
template <class F>
inline Mat product_tangent(const DualMat& a, const DualMat& b, F&& op) {
    if (a.has_tangent() && b.has_tangent()) {
        return op(a.t, b.v) + op(a.v, b.t);
    }
    if (a.has_tangent()) {
        return op(a.t, b.v);
    }
    if (b.has_tangent()) {
        return op(a.v, b.t);
    }
    return Mat();
}
inline Mat sum_tangent(const DualMat& a, const DualMat& b, double sign_b) {
    if (a.has_tangent() && b.has_tangent()) {
        return a.t + sign_b * b.t;
    }
    if (a.has_tangent()) {
        return a.t;
    }
    if (b.has_tangent()) {
        return sign_b * b.t;
    }
    return Mat();
}
}  // namespace detail

inline DualMat matmul(const DualMat& a, const DualMat& b) {
    return {a.v * b.v, detail::product_tangent(a, b, [](const Mat& x, const Mat& y) { return Mat(x * y); })};
}
inline DualMat matmul_tn(const DualMat& a, const DualMat& b) {
    return {a.v.transpose() * b.v,
            detail::product_tangent(a, b, [](const Mat& x, const Mat& y) { return Mat(x.transpose() * y); })};
}
inline DualMat matmul_nt(const DualMat& a, const DualMat& b) {
    return {a.v * b.v.transpose(),
            detail::product_tangent(a, b, [](const Mat& x, const Mat& y) { return Mat(x * y.transpose()); })};
}
inline DualMat add(const DualMat& a, const DualMat& b) { return {a.v + b.v, detail::sum_tangent(a, b, 1.0)}; }
inline DualMat sub(const DualMat& a, const DualMat& b) { return {a.v - b.v, detail::sum_tangent(a, b, -1.0)}; }
inline DualMat neg(const DualMat& a) { return {-a.v, a.has_tangent() ? Mat(-a.t) : Mat()}; }
inline DualMat scaled(const DualMat& a, double s) { return {a.v * s, a.has_tangent() ? Mat(a.t * s) : Mat()}; }
inline DualMat hadamard(const DualMat& a, const DualMat& b) {
    return {a.v.cwiseProduct(b.v),
            detail::product_tangent(a, b, [](const Mat& x, const Mat& y) { return Mat(x.cwiseProduct(y)); })};
}
inline DualMat tanh_of(const DualMat& a) {
    Mat y = a.v.array().tanh().matrix();
    Mat t;
    if (a.has_tangent()) {
        t = ((1.0 - y.array().square()) * a.t.array()).matrix();
    }
    return {std::move(y), std::move(t)};
}
inline DualMat tanh_grad_from_output(const DualMat& y) {
    Mat t;
    if (y.has_tangent()) {
        t = (-2.0 * y.v.array() * y.t.array()).matrix();
    }
    return {(1.0 - y.v.array().square()).matrix(), std::move(t)};
}
inline DualMat add_col(const DualMat& a, const DualMat& c) {
    Mat t;
    if (a.has_tangent() && c.has_tangent()) {
        t = a.t.colwise() + c.t.col(0);
    } else if (a.has_tangent()) {
        t = a.t;
    } else if (c.has_tangent()) {
        t = c.t.col(0).replicate(1, a.v.cols());
    }
    return {a.v.colwise() + c.v.col(0), std::move(t)};
}
inline DualMat row_sums(const DualMat& a) {
    return {a.v.rowwise().sum(), a.has_tangent() ? Mat(a.t.rowwise().sum()) : Mat()};
}
inline DualMat sum_all(const DualMat& a) {
    return {Mat::Constant(1, 1, a.v.sum()), a.has_tangent() ? Mat(Mat::Constant(1, 1, a.t.sum())) : Mat()};
}
inline DualMat squared_norm(const DualMat& a) {
    Mat t;
    if (a.has_tangent()) {
        t = Mat::Constant(1, 1, 2.0 * a.v.cwiseProduct(a.t).sum());
    }
    return {Mat::Constant(1, 1, a.v.squaredNorm()), std::move(t)};
}
inline DualMat broadcast(const DualMat& s11, Eigen::Index r, Eigen::Index c) {
    return {Mat::Constant(r, c, s11.v(0, 0)), s11.has_tangent() ? Mat(Mat::Constant(r, c, s11.t(0, 0))) : Mat()};
}
inline DualMat scale_by(const DualMat& a, const DualMat& s11) {
    const double s = s11.v(0, 0);
    Mat t;
    if (a.has_tangent() && s11.has_tangent()) {
        t = a.t * s + a.v * s11.t(0, 0);
    } else if (a.has_tangent()) {
        t = a.t * s;
    } else if (s11.has_tangent()) {
        t = a.v * s11.t(0, 0);
    }
    return {a.v * s, std::move(t)};
}
inline DualMat segment_as(const DualMat& vec, Eigen::Index offset, Eigen::Index r, Eigen::Index c) {
    return {segment_as(vec.v, offset, r, c), vec.has_tangent() ? segment_as(vec.t, offset, r, c) : Mat()};
}
inline void add_into_segment(DualMat& vec, Eigen::Index offset, const DualMat& block) {
    add_into_segment(vec.v, offset, block.v);
    if (block.has_tangent()) {
        if (!vec.has_tangent()) {
            vec.t = Mat::Zero(vec.v.rows(), vec.v.cols());
        }
        add_into_segment(vec.t, offset, block.t);
    }
}
inline DualMat block_of(const DualMat& a, Eigen::Index r0, Eigen::Index c0, Eigen::Index r, Eigen::Index c) {
    return {a.v.block(r0, c0, r, c), a.has_tangent() ? Mat(a.t.block(r0, c0, r, c)) : Mat()};
}
inline void add_into_block(DualMat& dst, Eigen::Index r0, Eigen::Index c0, const DualMat& src) {
    add_into_block(dst.v, r0, c0, src.v);
    if (src.has_tangent()) {
        if (!dst.has_tangent()) {
            dst.t = Mat::Zero(dst.v.rows(), dst.v.cols());
        }
        add_into_block(dst.t, r0, c0, src.t);
    }
}
inline DualMat zeros(const DualMat&, Eigen::Index r, Eigen::Index c) { return {Mat::Zero(r, c), Mat()}; }
inline void accumulate(DualMat& dst, const DualMat& src) {
    if (dst.v.size() == 0) {
        dst = src;
        return;
    }
    dst.v += src.v;
    if (src.has_tangent()) {
        if (dst.has_tangent()) {
            dst.t += src.t;
        } else {
            dst.t = src.t;
        }
    }
}
inline bool all_finite(const DualMat& a) { return a.v.allFinite() && (!a.has_tangent() || a.t.allFinite()); }

}  // namespace alg

/// Handle to a tape node.
struct Var {
    std::size_t id = 0;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
};

template <class M>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable leaf.
    Var variable(M value) { return push(std::move(value), true, {}); }

    /// Data that no gradient flows into.
    Var constant(const Mat& value) { return push(alg::lift(value, static_cast<const M*>(nullptr)), false, {}); }

    const M& value(Var x) const { return values_[x.id]; }
    const Mat& primal(Var x) const { return alg::primal(values_[x.id]); }
    double scalar(Var x) const { return alg::primal(values_[x.id])(0, 0); }
    std::size_t size() const { return values_.size(); }

    /// Adjoint after `backward`; zeros when the node was not reached.
    M adjoint(Var x) const {
        const M& a = adjoints_.at(x.id);
        if (alg::rows(a) == 0 && alg::cols(a) == 0) {
            return alg::zeros(values_[x.id], x.rows, x.cols);
        }
        return a;
    }

    /// Reverse sweep from a 1x1 output.
    void backward(Var out) {
        if (out.rows != 1 || out.cols != 1) {
            throw std::invalid_argument("backward requires a scalar (1x1) output");
        }
        adjoints_.assign(values_.size(), M{});
        adjoints_[out.id] = alg::lift(Mat::Ones(1, 1), static_cast<const M*>(nullptr));
        for (std::size_t i = out.id + 1; i-- > 0;) {
            if (!needs_grad_[i] || !backward_[i]) {
                continue;
            }
            if (alg::rows(adjoints_[i]) == 0) {
                continue;
            }
            backward_[i](i);
        }
    }

    // ---- operations ------------------------------------------------------

    Var matmul(Var a, Var b) {
        check(a.cols == b.rows, "matmul: inner dimensions differ");
        return push(alg::matmul(value(a), value(b)), any(a, b), [this, a, b](std::size_t self) {
            const M& g = adjoints_[self];
            if (needs_grad_[a.id]) {
                alg::accumulate(adjoints_[a.id], alg::matmul_nt(g, values_[b.id]));
            }
            if (needs_grad_[b.id]) {
                alg::accumulate(adjoints_[b.id], alg::matmul_tn(values_[a.id], g));
            }
        });
    }

    Var add(Var a, Var b) {
        check(a.rows == b.rows && a.cols == b.cols, "add: shapes differ");
        return push(alg::add(value(a), value(b)), any(a, b), [this, a, b](std::size_t self) {
            pass(a, adjoints_[self]);
            pass(b, adjoints_[self]);
        });
    }

    Var sub(Var a, Var b) {
        check(a.rows == b.rows && a.cols == b.cols, "sub: shapes differ");
        return push(alg::sub(value(a), value(b)), any(a, b), [this, a, b](std::size_t self) {
            pass(a, adjoints_[self]);
            if (needs_grad_[b.id]) {
                alg::accumulate(adjoints_[b.id], alg::neg(adjoints_[self]));
            }
        });
    }

    Var scale(Var a, double s) {
        return push(alg::scaled(value(a), s), needs_grad_[a.id], [this, a, s](std::size_t self) {
            alg::accumulate(adjoints_[a.id], alg::scaled(adjoints_[self], s));
        });
    }

    Var hadamard(Var a, Var b) {
        check(a.rows == b.rows && a.cols == b.cols, "hadamard: shapes differ");
        return push(alg::hadamard(value(a), value(b)), any(a, b), [this, a, b](std::size_t self) {
            const M& g = adjoints_[self];
            if (needs_grad_[a.id]) {
                alg::accumulate(adjoints_[a.id], alg::hadamard(g, values_[b.id]));
            }
            if (needs_grad_[b.id]) {
                alg::accumulate(adjoints_[b.id], alg::hadamard(g, values_[a.id]));
            }
        });
    }

    Var tanh(Var a) {
        return push(alg::tanh_of(value(a)), needs_grad_[a.id], [this, a](std::size_t self) {
            alg::accumulate(adjoints_[a.id],
                            alg::hadamard(adjoints_[self], alg::tanh_grad_from_output(values_[self])));
        });
    }

    /// a (r x n) plus column vector c (r x 1) added to every column.
    Var add_col(Var a, Var c) {
        check(c.cols == 1 && c.rows == a.rows, "add_col: bias must be a column of matching height");
        return push(alg::add_col(value(a), value(c)), any(a, c), [this, a, c](std::size_t self) {
            const M& g = adjoints_[self];
            pass(a, g);
            if (needs_grad_[c.id]) {
                alg::accumulate(adjoints_[c.id], alg::row_sums(g));
            }
        });
    }

    Var sum(Var a) {
        return push(alg::sum_all(value(a)), needs_grad_[a.id], [this, a](std::size_t self) {
            alg::accumulate(adjoints_[a.id], alg::broadcast(adjoints_[self], a.rows, a.cols));
        });
    }

    Var squared_norm(Var a) {
        return push(alg::squared_norm(value(a)), needs_grad_[a.id], [this, a](std::size_t self) {
            alg::accumulate(adjoints_[a.id], alg::scaled(alg::scale_by(values_[a.id], adjoints_[self]), 2.0));
        });
    }

    /// Column-major reshape of `count = rows*cols` entries of a column vector
    /// starting at `offset`.
    Var segment(Var vec, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
        check(vec.cols == 1, "segment: source must be a column vector");
        check(offset >= 0 && offset + rows * cols <= vec.rows, "segment: out of range");
        return push(alg::segment_as(value(vec), offset, rows, cols), needs_grad_[vec.id],
                    [this, vec, offset](std::size_t self) {
                        M& dst = adjoints_[vec.id];
                        if (alg::rows(dst) == 0) {
                            dst = alg::zeros(values_[vec.id], vec.rows, vec.cols);
                        }
                        alg::add_into_segment(dst, offset, adjoints_[self]);
                    });
    }

    Var block(Var a, Eigen::Index r0, Eigen::Index c0, Eigen::Index rows, Eigen::Index cols) {
        check(r0 >= 0 && c0 >= 0 && r0 + rows <= a.rows && c0 + cols <= a.cols, "block: out of range");
        return push(alg::block_of(value(a), r0, c0, rows, cols), needs_grad_[a.id],
                    [this, a, r0, c0](std::size_t self) {
                        M& dst = adjoints_[a.id];
                        if (alg::rows(dst) == 0) {
                            dst = alg::zeros(values_[a.id], a.rows, a.cols);
                        }
                        alg::add_into_block(dst, r0, c0, adjoints_[self]);
                    });
    }

    /// Scalar (1x1) times matrix.
    Var scale_by(Var a, Var s11) {
        check(s11.rows == 1 && s11.cols == 1, "scale_by: scale must be 1x1");
        return push(alg::scale_by(value(a), value(s11)), any(a, s11), [this, a, s11](std::size_t self) {
            const M& g = adjoints_[self];
            if (needs_grad_[a.id]) {
                alg::accumulate(adjoints_[a.id], alg::scale_by(g, values_[s11.id]));
            }
            if (needs_grad_[s11.id]) {
                alg::accumulate(adjoints_[s11.id], alg::sum_all(alg::hadamard(g, values_[a.id])));
            }
        });
    }

private:
    using Backward = std::function<void(std::size_t)>;

    Var push(M value, bool needs_grad, Backward bw) {
        Var v{values_.size(), alg::rows(value), alg::cols(value)};
        values_.push_back(std::move(value));
        needs_grad_.push_back(needs_grad);
        backward_.push_back(needs_grad ? std::move(bw) : Backward{});
        return v;
    }

    bool any(Var a, Var b) const { return needs_grad_[a.id] || needs_grad_[b.id]; }

    void pass(Var x, const M& g) {
        if (needs_grad_[x.id]) {
            alg::accumulate(adjoints_[x.id], g);
        }
    }

    static void check(bool ok, const char* what) {
        if (!ok) {
            throw std::invalid_argument(what);
        }
    }

    std::vector<M> values_;
    std::vector<bool> needs_grad_;
    std::vector<Backward> backward_;
    std::vector<M> adjoints_;
};

}  // namespace metactl::ad
