#include "metactl/mpc.hpp"

#include "metactl/errors.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <cmath>
#include <limits>

namespace metactl {

double dare_residual(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::MatrixXd& q,
                     const Eigen::MatrixXd& r, const Eigen::MatrixXd& p) {
    const Eigen::MatrixXd bp = b.transpose() * p;
    const Eigen::MatrixXd gain = (r + bp * b).ldlt().solve(bp * a);
    const Eigen::MatrixXd next = a.transpose() * p * a - a.transpose() * p * b * gain + q;
    return (p - next).cwiseAbs().maxCoeff();
}

Eigen::MatrixXd solve_dare(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::MatrixXd& q,
                           const Eigen::MatrixXd& r, double tol, int max_iter) {
    const Eigen::Index n = a.rows();
    if (a.cols() != n || b.rows() != n || q.rows() != n || q.cols() != n || r.rows() != b.cols() ||
        r.cols() != b.cols()) {
        throw ContractError("solve_dare: inconsistent matrix sizes");
    }
    Eigen::LLT<Eigen::MatrixXd> r_chol(r);
    if (r_chol.info() != Eigen::Success) {
        throw ContractError("solve_dare: R must be positive definite");
    }
    Eigen::MatrixXd p = q;
    double res = std::numeric_limits<double>::infinity();
    for (int it = 0; it < max_iter; ++it) {
        const Eigen::MatrixXd bp = b.transpose() * p;
        const Eigen::MatrixXd gain = (r + bp * b).ldlt().solve(bp * a);
        Eigen::MatrixXd next = a.transpose() * p * a - a.transpose() * p * b * gain + q;
        next = 0.5 * (next + next.transpose());
        if (!next.allFinite()) {
            throw SolverError("solve_dare: iterate became non-finite", it, res);
        }
        res = (next - p).cwiseAbs().maxCoeff();
        p = std::move(next);
        if (res <= tol) {
            return p;
        }
    }
    throw SolverError("solve_dare: no convergence", max_iter, res);
}

void MpcConfig::validate() const {
    const Eigen::Index m = q.rows();
    const Eigen::Index p = r.rows();
    if (horizon < 1) throw ContractError("MPC horizon must be at least 1");
    if (q.cols() != m || r.cols() != p || m == 0 || p == 0) throw ContractError("MPC weights must be square");
    if (u_min.size() != p || u_max.size() != p || (u_min.array() > u_max.array()).any()) {
        throw ContractError("MPC input box does not match the input weight");
    }
    if (Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(q).eigenvalues().minCoeff() < -1e-12) {
        throw ContractError("MPC output weight must be positive semidefinite");
    }
    if (Eigen::LLT<Eigen::MatrixXd>(r).info() != Eigen::Success) {
        throw ContractError("MPC input-rate weight must be positive definite");
    }
    if ((y_min && y_min->size() != m) || (y_max && y_max->size() != m)) {
        throw ContractError("MPC output box does not match the output weight");
    }
    if (max_iter < 1 || !(tol > 0.0)) throw ContractError("MPC solver settings must be positive");
}

namespace {

/// Condensed form: outputs Y = phi_s0 + gamma U, rates DU - d0.
struct Condensed {
    Eigen::Index n_u = 0;
    Eigen::Index n_y = 0;
    Eigen::MatrixXd gamma;
    Eigen::VectorXd free_response;  ///< phi s0 - Yref
    Eigen::MatrixXd weight;         ///< block diag(Q, ..., Q, P)
    Eigen::MatrixXd diff;
    Eigen::VectorXd d0;
    Eigen::MatrixXd rate_weight;
    Eigen::MatrixXd hessian;  ///< of the quadratic part
    Eigen::VectorXd linear;
    double constant = 0.0;
    double penalty = 0.0;
    Eigen::VectorXd y_lo;  ///< stacked soft box, +-inf where absent
    Eigen::VectorXd y_hi;
    bool soft = false;
    Eigen::VectorXd u_lo;
    Eigen::VectorXd u_hi;
    double lipschitz = 0.0;
};

Condensed condense(const MpcProblem& pr, const MpcConfig& cfg) {
    cfg.validate();
    const Eigen::Index n = pr.a.rows();
    const Eigen::Index p = cfg.r.rows();
    const Eigen::Index m = cfg.q.rows();
    const auto nh = static_cast<Eigen::Index>(cfg.horizon);
    if (pr.a.cols() != n || pr.b.rows() != n || pr.b.cols() != p || pr.c.rows() != m || pr.c.cols() != n ||
        pr.s0.size() != n || pr.u_prev.size() != p || pr.terminal.rows() != m || pr.terminal.cols() != m) {
        throw ContractError("solve_mpc: problem dimensions are inconsistent with the configuration");
    }
    if (pr.reference.size() != cfg.horizon + 1) {
        throw ContractError("solve_mpc: reference must hold N+1 samples");
    }
    if (!pr.a.allFinite() || !pr.b.allFinite() || !pr.s0.allFinite()) {
        throw ContractError("solve_mpc: model or state is not finite");
    }
    Condensed c;
    c.n_u = nh * p;
    c.n_y = nh * m;
    c.gamma = Eigen::MatrixXd::Zero(c.n_y, c.n_u);
    c.free_response.resize(c.n_y);
    // ca[k] = C A^k
    std::vector<Eigen::MatrixXd> ca(static_cast<std::size_t>(nh) + 1);
    ca[0] = pr.c;
    for (Eigen::Index k = 1; k <= nh; ++k) ca[static_cast<std::size_t>(k)] = ca[static_cast<std::size_t>(k - 1)] * pr.a;
    for (Eigen::Index k = 1; k <= nh; ++k) {
        const auto& ref = pr.reference[static_cast<std::size_t>(k)];
        if (ref.size() != m || !ref.allFinite()) throw ContractError("solve_mpc: bad reference sample");
        c.free_response.segment((k - 1) * m, m) = ca[static_cast<std::size_t>(k)] * pr.s0 - ref;
        for (Eigen::Index j = 1; j <= k; ++j) {
            c.gamma.block((k - 1) * m, (j - 1) * p, m, p) = ca[static_cast<std::size_t>(k - j)] * pr.b;
        }
    }
    c.weight = Eigen::MatrixXd::Zero(c.n_y, c.n_y);
    for (Eigen::Index k = 0; k < nh; ++k) {
        c.weight.block(k * m, k * m, m, m) = k + 1 == nh ? pr.terminal : cfg.q;
    }
    c.diff = Eigen::MatrixXd::Identity(c.n_u, c.n_u);
    for (Eigen::Index k = 1; k < nh; ++k) c.diff.block(k * p, (k - 1) * p, p, p) = -Eigen::MatrixXd::Identity(p, p);
    c.d0 = Eigen::VectorXd::Zero(c.n_u);
    c.d0.head(p) = pr.u_prev;
    c.rate_weight = Eigen::MatrixXd::Zero(c.n_u, c.n_u);
    for (Eigen::Index k = 0; k < nh; ++k) c.rate_weight.block(k * p, k * p, p, p) = cfg.r;

    const Eigen::MatrixXd wg = c.weight * c.gamma;
    const Eigen::MatrixXd rd = c.rate_weight * c.diff;
    c.hessian = 2.0 * (c.gamma.transpose() * wg + c.diff.transpose() * rd);
    c.hessian = 0.5 * (c.hessian + c.hessian.transpose());
    c.linear = 2.0 * (wg.transpose() * c.free_response - rd.transpose() * c.d0);
    c.constant = c.free_response.dot(c.weight * c.free_response) + c.d0.dot(c.rate_weight * c.d0);

    c.soft = cfg.y_min.has_value() || cfg.y_max.has_value();
    const double inf = std::numeric_limits<double>::infinity();
    c.y_lo = Eigen::VectorXd::Constant(c.n_y, -inf);
    c.y_hi = Eigen::VectorXd::Constant(c.n_y, inf);
    for (Eigen::Index k = 0; k < nh; ++k) {
        if (cfg.y_min) c.y_lo.segment(k * m, m) = *cfg.y_min;
        if (cfg.y_max) c.y_hi.segment(k * m, m) = *cfg.y_max;
    }
    const double q_norm = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(cfg.q).eigenvalues().cwiseAbs().maxCoeff();
    c.penalty = c.soft ? 1e3 * q_norm : 0.0;

    c.u_lo.resize(c.n_u);
    c.u_hi.resize(c.n_u);
    for (Eigen::Index k = 0; k < nh; ++k) {
        c.u_lo.segment(k * p, p) = cfg.u_min;
        c.u_hi.segment(k * p, p) = cfg.u_max;
    }
    Eigen::MatrixXd curvature = c.hessian;
    if (c.soft) curvature += 2.0 * c.penalty * c.gamma.transpose() * c.gamma;
    c.lipschitz = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(curvature).eigenvalues().maxCoeff();
    return c;
}

class Objective {
public:
    Objective(const Condensed& c, const MpcProblem& pr, const MpcConfig& cfg) : c_(c) {
        if (c.soft) {
            // absolute predicted outputs are Y = free_response + Yref + gamma U
            yref_.resize(c.n_y);
            const auto m = cfg.q.rows();
            for (std::size_t k = 1; k <= cfg.horizon; ++k) {
                yref_.segment(static_cast<Eigen::Index>(k - 1) * m, m) = pr.reference[k];
            }
        }
    }

    double value(const Eigen::VectorXd& u) const {
        double v = 0.5 * u.dot(c_.hessian * u) + c_.linear.dot(u) + c_.constant;
        if (c_.soft) v += c_.penalty * excess(u).squaredNorm();
        return v;
    }

    Eigen::VectorXd grad(const Eigen::VectorXd& u) const {
        Eigen::VectorXd g = c_.hessian * u + c_.linear;
        if (c_.soft) g += 2.0 * c_.penalty * c_.gamma.transpose() * excess(u);
        return g;
    }

    /// Newton step on the variables not held at a bound, using the local
    /// quadratic model (penalty terms of currently violated outputs included).
    Eigen::VectorXd newton_polish(const Eigen::VectorXd& u) const {
        const Eigen::VectorXd g = grad(u);
        Eigen::MatrixXd h = c_.hessian;
        if (c_.soft) {
            const Eigen::VectorXd y = c_.free_response + yref_ + c_.gamma * u;
            for (Eigen::Index i = 0; i < y.size(); ++i) {
                if (y(i) > c_.y_hi(i) || y(i) < c_.y_lo(i)) {
                    h += 2.0 * c_.penalty * c_.gamma.row(i).transpose() * c_.gamma.row(i);
                }
            }
        }
        std::vector<Eigen::Index> free;
        for (Eigen::Index i = 0; i < u.size(); ++i) {
            const bool at_lo = u(i) <= c_.u_lo(i) && g(i) > 0.0;
            const bool at_hi = u(i) >= c_.u_hi(i) && g(i) < 0.0;
            if (!at_lo && !at_hi) free.push_back(i);
        }
        Eigen::VectorXd out = u;
        if (free.empty()) return out;
        const auto nf = static_cast<Eigen::Index>(free.size());
        Eigen::MatrixXd hf(nf, nf);
        Eigen::VectorXd gf(nf);
        for (Eigen::Index i = 0; i < nf; ++i) {
            gf(i) = g(free[static_cast<std::size_t>(i)]);
            for (Eigen::Index j = 0; j < nf; ++j) hf(i, j) = h(free[static_cast<std::size_t>(i)], free[static_cast<std::size_t>(j)]);
        }
        const Eigen::VectorXd d = hf.llt().solve(-gf);
        for (Eigen::Index i = 0; i < nf; ++i) out(free[static_cast<std::size_t>(i)]) += d(i);
        return out.cwiseMax(c_.u_lo).cwiseMin(c_.u_hi);
    }

private:
    Eigen::VectorXd excess(const Eigen::VectorXd& u) const {
        const Eigen::VectorXd y = c_.free_response + yref_ + c_.gamma * u;
        return (y - c_.y_hi).cwiseMax(0.0) - (c_.y_lo - y).cwiseMax(0.0);
    }

    const Condensed& c_;
    Eigen::VectorXd yref_;
};

Eigen::VectorXd project(const Condensed& c, const Eigen::VectorXd& u) { return u.cwiseMax(c.u_lo).cwiseMin(c.u_hi); }

double kkt(const Condensed& c, const Objective& f, const Eigen::VectorXd& u) {
    return (u - project(c, u - f.grad(u) / c.lipschitz)).cwiseAbs().maxCoeff();
}

std::vector<Eigen::VectorXd> unstack(const Eigen::VectorXd& u, Eigen::Index p) {
    std::vector<Eigen::VectorXd> out;
    for (Eigen::Index k = 0; k < u.size() / p; ++k) out.push_back(u.segment(k * p, p));
    return out;
}

}  // namespace

double mpc_objective(const MpcProblem& problem, const MpcConfig& config, const std::vector<Eigen::VectorXd>& inputs) {
    Condensed c = condense(problem, config);
    Objective f(c, problem, config);
    Eigen::VectorXd u(c.n_u);
    const Eigen::Index p = config.r.rows();
    if (inputs.size() != config.horizon) throw ContractError("mpc_objective: need N inputs");
    for (std::size_t k = 0; k < inputs.size(); ++k) u.segment(static_cast<Eigen::Index>(k) * p, p) = inputs[k];
    return f.value(u);
}

MpcSolution solve_mpc(const MpcProblem& problem, const MpcConfig& config) {
    const Condensed c = condense(problem, config);
    const Objective f(c, problem, config);
    const Eigen::Index p = config.r.rows();
    MpcSolution sol;

    const Eigen::VectorXd unconstrained = c.hessian.llt().solve(-c.linear);
    if (!unconstrained.allFinite()) {
        throw SolverError("solve_mpc: unconstrained solve is not finite", 0, std::numeric_limits<double>::infinity());
    }
    const bool inside = (unconstrained.array() >= c.u_lo.array()).all() && (unconstrained.array() <= c.u_hi.array()).all();
    if (inside && !c.soft) {
        sol.inputs = unstack(unconstrained, p);
        sol.objective = f.value(unconstrained);
        sol.objective_trace.push_back(sol.objective);
        sol.kkt_residual = kkt(c, f, unconstrained);
        sol.converged = true;
        return sol;
    }

    // monotone FISTA with box projection; a projected Newton step on the
    // current active set is tried periodically to finish off exactly
    const double step = 1.0 / c.lipschitz;
    Eigen::VectorXd x = project(c, unconstrained);
    Eigen::VectorXd x_prev = x;
    Eigen::VectorXd y = x;
    double fx = f.value(x);
    double t = 1.0;
    sol.objective_trace.push_back(fx);
    double res = kkt(c, f, x);
    int it = 0;
    while (res > config.tol && it < config.max_iter) {
        if (it % 10 == 0) {
            const Eigen::VectorXd xn = f.newton_polish(x);
            const double fn = f.value(xn);
            if (xn.allFinite() && fn <= fx) {
                x = xn;
                x_prev = x;
                y = x;
                t = 1.0;
                fx = fn;
                res = kkt(c, f, x);
                if (res <= config.tol) break;
            }
        }
        ++it;
        const Eigen::VectorXd z = project(c, y - step * f.grad(y));
        const double fz = f.value(z);
        if (!std::isfinite(fz) || !z.allFinite()) {
            throw SolverError("solve_mpc: projected gradient iterate is not finite", it, res);
        }
        x_prev = x;
        if (fz <= fx) {
            x = z;
            fx = fz;
        }
        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        y = x + (t / t_next) * (z - x) + ((t - 1.0) / t_next) * (x - x_prev);
        t = t_next;
        sol.objective_trace.push_back(fx);
        res = kkt(c, f, x);
    }
    sol.inputs = unstack(x, p);
    sol.objective = fx;
    sol.kkt_residual = res;
    sol.iterations = it;
    sol.converged = res <= config.tol;
    return sol;
}

TerminalWeight terminal_weight(const Eigen::MatrixXd& a_z, const Eigen::MatrixXd& b_z, const Eigen::MatrixXd& c_z,
                               const Eigen::MatrixXd& q, const Eigen::MatrixXd& r) {
    TerminalWeight tw{q, true};
    try {
        const Eigen::MatrixXd qz = c_z.transpose() * q * c_z;
        const Eigen::MatrixXd pz = solve_dare(a_z, b_z, qz, r, 1e-9, 20000);
        const Eigen::MatrixXd pinv = c_z.completeOrthogonalDecomposition().pseudoInverse();
        Eigen::MatrixXd py = pinv.transpose() * pz * pinv;
        py = 0.5 * (py + py.transpose());
        const double scale = std::max(q.norm(), 1e-12);
        if (py.allFinite() && py.norm() <= 1e6 * scale &&
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(py).eigenvalues().minCoeff() >= -1e-9 * py.norm()) {
            tw.p = py;
            tw.fallback = false;
        }
    } catch (const SolverError&) {
    }
    return tw;
}

MpcController::MpcController(Nssm model, ParamVector params, MpcConfig config)
    : model_(std::move(model)), params_(std::move(params)), config_(std::move(config)) {
    config_.validate();
    if (static_cast<std::size_t>(params_.size()) != model_.num_params()) {
        throw ContractError("MpcController: parameters do not match the model");
    }
    if (static_cast<std::size_t>(config_.q.rows()) != model_.config().output_dim ||
        static_cast<std::size_t>(config_.r.rows()) != model_.config().input_dim) {
        throw ContractError("MpcController: weights do not match the model's signal sizes");
    }
    const Eigen::MatrixXd az = model_.a_z(params_);
    const Eigen::MatrixXd bz = model_.b_z(params_);
    const Eigen::MatrixXd cz = model_.c_z(params_);
    compact_ = compact_model(az, bz, cz);
    const Eigen::Index nz = az.rows();
    const Eigen::Index m = cz.rows();
    c_out_ = Eigen::MatrixXd::Zero(m, nz + m);
    c_out_.rightCols(m) = Eigen::MatrixXd::Identity(m, m);
    terminal_ = terminal_weight(az, bz, cz, config_.q, config_.r);
    reset();
}

Eigen::VectorXd MpcController::step(const Trajectory& history, const std::vector<Eigen::VectorXd>& reference) {
    if (history.size() < model_.config().history) {
        throw ContractError("MpcController: history shorter than the encoder window");
    }
    const Eigen::VectorXd z = model_.encode(params_, model_.history_vector(history, history.size() - 1));
    MpcProblem pr;
    pr.a = compact_.a;
    pr.b = compact_.b;
    pr.c = c_out_;
    pr.s0.resize(compact_.a.rows());
    pr.s0 << z, model_.c_z(params_) * z;
    pr.reference = reference;
    pr.u_prev = u_prev_;
    pr.terminal = terminal_.p;
    last_ = solve_mpc(pr, config_);
    u_prev_ = last_.inputs.front();
    return u_prev_;
}

}  // namespace metactl
