#include "metactl/meta.hpp"

#include "metactl/dataio.hpp"
#include "metactl/errors.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace metactl {

void MetaConfig::validate() const {
    auto positive = [](double x, const char* name) {
        if (!(x > 0.0) || !std::isfinite(x)) {
            throw ContractError(std::string("MetaConfig: ") + name + " must be positive");
        }
    };
    positive(reg_strength, "reg_strength");
    positive(beta_out, "beta_out");
    positive(cg_tol, "cg_tol");
    positive(converge_tol, "converge_tol");
    if (beta_in) positive(*beta_in, "beta_in");
    if (inner_steps == 0 || batch_size == 0 || cg_iters == 0 || converge_window == 0 || ring_capacity == 0) {
        throw ContractError("MetaConfig: step counts, batch size and windows must be at least 1");
    }
    if (k_adapt >= k_train && k_train > 0) {
        throw ContractError("MetaConfig: k_adapt must be smaller than k_train");
    }
    if (!(train_ratio > 0.0 && train_ratio < 1.0)) {
        throw ContractError("MetaConfig: train_ratio must lie in (0, 1)");
    }
}

const char* variant_name(MetaVariant v) { return v == MetaVariant::Imaml ? "imaml" : "maml"; }

double estimate_curvature(const ScalarLossFn& f, const ParamVector& psi, std::size_t iters, Rng& rng) {
    std::normal_distribution<double> normal;
    ParamVector v(psi.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = normal(rng);
    v.normalize();
    double lambda = 0.0;
    for (std::size_t k = 0; k < std::max<std::size_t>(iters, 1); ++k) {
        ParamVector hv = hvp(f, psi, v);
        lambda = hv.norm();
        if (lambda == 0.0) return 0.0;
        v = hv / lambda;
    }
    return lambda;
}

double inner_step_size(const ScalarLossFn& train, const ParamVector& omega, double gamma, const MetaConfig& config,
                       Rng& rng) {
    if (config.beta_in) return *config.beta_in;
    const double l = estimate_curvature(train, omega, config.power_iters, rng);
    const double denom = l + gamma;
    return denom > 1e-12 ? 1.0 / denom : 1.0;
}

ParamVector inner_adapt(const ScalarLossFn& train, const ParamVector& omega, double gamma, double beta_in,
                        std::size_t steps, const StepCallback& on_step) {
    ParamVector psi = omega;
    if (on_step) on_step(0, psi);
    for (std::size_t k = 0; k < steps; ++k) {
        ScalarLossFn::ValueGrad vg;
        try {
            vg = train.value_and_grad(psi);
        } catch (const NonFiniteError& e) {
            throw NonFiniteError(std::string("inner adaptation: ") + e.what(), e.offending_value(),
                                 static_cast<std::ptrdiff_t>(k));
        }
        psi -= beta_in * (vg.grad + gamma * (psi - omega));
        if (!psi.allFinite()) {
            throw NonFiniteError("inner adaptation produced non-finite parameters", vg.value,
                                 static_cast<std::ptrdiff_t>(k));
        }
        if (on_step) on_step(k + 1, psi);
    }
    return psi;
}

CgResult cg_solve(const LinearOp& hvp_fn, const ParamVector& p, double gamma, std::size_t iters, double tol) {
    if (!(gamma > 0.0)) throw ContractError("cg_solve: gamma must be positive");
    CgResult out;
    out.x = ParamVector::Zero(p.size());
    const double pnorm = p.norm();
    if (pnorm == 0.0) return out;

    auto apply_q = [&](const ParamVector& v) -> ParamVector {
        ParamVector hv = hvp_fn(v);
        if (hv.size() != v.size()) throw ContractError("cg_solve: operator changed the vector length");
        return v + hv / gamma;
    };

    ParamVector r = p;
    ParamVector d = r;
    double rr = r.squaredNorm();
    for (std::size_t k = 0; k < iters; ++k) {
        ParamVector qd = apply_q(d);
        const double curv = d.dot(qd);
        if (!(curv > 0.0)) {
            std::ostringstream msg;
            msg << "cg_solve: non-positive curvature " << curv / d.squaredNorm()
                << " along a search direction; I + H/gamma is not positive definite "
                   "(regularization strength must exceed the Hessian bound)";
            throw IndefiniteError(msg.str(), curv / d.squaredNorm());
        }
        const double alpha = rr / curv;
        out.x += alpha * d;
        r -= alpha * qd;
        out.iterations = k + 1;
        const double rr_new = r.squaredNorm();
        if (std::sqrt(rr_new) <= tol * pnorm) {
            rr = rr_new;
            break;
        }
        d = r + (rr_new / rr) * d;
        rr = rr_new;
    }
    // true residual, not the recursively updated one
    out.residual = (apply_q(out.x) - p).norm() / pnorm;
    return out;
}

ParamVector implicit_grad(const ScalarLossFn& train, const ScalarLossFn& test, const ParamVector& omega_b,
                          const MetaConfig& config, CgResult* info) {
    ParamVector p = grad(test, omega_b);
    CgResult res = cg_solve([&](const ParamVector& v) { return hvp(train, omega_b, v); }, p, config.reg_strength,
                            config.cg_iters, config.cg_tol);
    ParamVector g = std::move(res.x);
    if (info) {
        info->iterations = res.iterations;
        info->residual = res.residual;
    }
    return g;
}

ParamVector maml_outer_grad(const ScalarLossFn& train, const ScalarLossFn& test, const ParamVector& omega,
                            double beta_in, std::size_t steps) {
    ParamVector psi = inner_adapt(train, omega, 0.0, beta_in, steps);
    return grad(test, psi);
}

ParamVector outer_step(const ParamVector& omega, const std::vector<ParamVector>& grads, double beta_out) {
    if (grads.empty()) throw ContractError("outer_step: no task gradients");
    ParamVector mean = ParamVector::Zero(omega.size());
    for (const auto& g : grads) {
        if (g.size() != omega.size()) {
            throw ContractError("outer_step: gradient length " + std::to_string(g.size()) + " differs from " +
                                std::to_string(omega.size()));
        }
        mean += g;
    }
    mean /= static_cast<double>(grads.size());
    return omega - beta_out * mean;
}

ParamVector meta_adapt(const ScalarLossFn& target, const ParamVector& omega, double gamma, double beta_in,
                       std::size_t steps, const StepCallback& on_step) {
    return inner_adapt(target, omega, gamma, beta_in, steps, on_step);
}

MetaTrainResult meta_train(BaseLearner& learner, const ParamVector& omega0, const MetaConfig& config,
                           MetaVariant variant, Rng& rng, const std::function<void(const MetaLogRow&)>& on_iteration) {
    config.validate();
    if (learner.num_tasks() == 0) throw ContractError("meta_train: empty source dataset");
    MetaTrainResult out;
    out.omega = omega0;
    const auto start = std::chrono::steady_clock::now();
    const double gamma = variant == MetaVariant::Imaml ? config.reg_strength : 0.0;
    const std::size_t n = learner.num_tasks();
    const std::size_t b = std::min(config.batch_size, n);
    std::vector<std::size_t> order(n);

    for (std::size_t k = 0; k < config.k_train; ++k) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = 0; i < b; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, n - 1);
            std::swap(order[i], order[pick(rng)]);
        }
        std::vector<ParamVector> grads;
        grads.reserve(b);
        double outer_loss = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            const std::size_t task = order[i];
            TaskLosses losses = learner.task_losses(task, config.train_ratio, rng);
            const double beta_in = inner_step_size(losses.train, out.omega, gamma, config, rng);
            ParamVector adapted = inner_adapt(losses.train, out.omega, gamma, beta_in, config.inner_steps);
            learner.after_inner(task, adapted);
            outer_loss += losses.test.value(adapted);
            if (variant == MetaVariant::Imaml) {
                grads.push_back(implicit_grad(losses.train, losses.test, adapted, config));
            } else {
                grads.push_back(grad(losses.test, adapted));
            }
            const double progress = config.k_train > 1 ? static_cast<double>(k) / (config.k_train - 1) : 1.0;
            if (!learner.collect(task, adapted, progress, rng)) ++out.skipped_appends;
        }
        outer_loss /= static_cast<double>(b);
        ParamVector mean = ParamVector::Zero(out.omega.size());
        for (const auto& g : grads) mean += g;
        mean /= static_cast<double>(b);
        out.omega = outer_step(out.omega, grads, config.beta_out);
        if (!out.omega.allFinite()) {
            throw NonFiniteError("meta_train: omega became non-finite", outer_loss, static_cast<std::ptrdiff_t>(k));
        }
        MetaLogRow row;
        row.iteration = k + 1;
        row.outer_loss = outer_loss;
        row.grad_norm = mean.norm();
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        out.log.push_back(row);
        if (on_iteration) on_iteration(row);

        // mean of the last window against the one before; single stochastic losses are too noisy
        const std::size_t w = config.converge_window;
        if (out.log.size() >= 2 * w) {
            double now = 0.0, then = 0.0;
            for (std::size_t i = 0; i < w; ++i) {
                now += out.log[out.log.size() - 1 - i].outer_loss;
                then += out.log[out.log.size() - 1 - w - i].outer_loss;
            }
            if (std::abs(now - then) <= config.converge_tol * std::abs(then)) {
                out.converged = true;
                break;
            }
        }
    }
    return out;
}

void write_training_log(const std::filesystem::path& file, const std::vector<MetaLogRow>& rows) {
    std::string s = "iter,outer_loss,grad_norm,wall_seconds\n";
    for (const auto& r : rows) {
        s += std::to_string(r.iteration) + "," + format_real(r.outer_loss) + "," + format_real(r.grad_norm) + "," +
             format_real(r.wall_seconds) + "\n";
    }
    write_file_atomic(file, s);
}

// ---- quadratic probes -----------------------------------------------------

QuadraticLoss QuadraticLoss::dense(Eigen::MatrixXd h, Eigen::VectorXd c) {
    if (h.rows() != h.cols() || h.rows() != c.size()) throw ContractError("QuadraticLoss: shape mismatch");
    return {std::move(h), std::move(c)};
}

QuadraticLoss QuadraticLoss::diagonal(Eigen::VectorXd h, Eigen::VectorXd c) {
    if (h.size() != c.size()) throw ContractError("QuadraticLoss: shape mismatch");
    return {Eigen::MatrixXd(h), std::move(c)};
}

Eigen::MatrixXd QuadraticLoss::dense_hessian() const {
    if (is_diagonal()) return hessian.col(0).asDiagonal();
    return hessian;
}

Eigen::VectorXd QuadraticLoss::eigenvalues() const {
    if (is_diagonal()) {
        Eigen::VectorXd e = hessian.col(0);
        std::sort(e.data(), e.data() + e.size());
        return e;
    }
    return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(hessian, Eigen::EigenvaluesOnly).eigenvalues();
}

ParamVector QuadraticLoss::apply(const ParamVector& v) const {
    if (is_diagonal()) return hessian.col(0).cwiseProduct(v);
    return hessian * v;
}

double QuadraticLoss::value(const ParamVector& psi) const {
    const ParamVector d = psi - center;
    return 0.5 * d.dot(apply(d));
}

ParamVector QuadraticLoss::gradient(const ParamVector& psi) const { return apply(psi - center); }

ScalarLossFn QuadraticLoss::loss() const {
    Smoothness s;
    const Eigen::VectorXd e = eigenvalues();
    s.lipschitz = e.cwiseAbs().maxCoeff();
    s.hessian_bound = s.lipschitz;
    return ScalarLossFn(
        [h = hessian, c = center, diag = is_diagonal()](auto& tape, ad::Var psi) {
            ad::Var d = tape.sub(psi, tape.constant(c));
            ad::Var hd = diag ? tape.hadamard(tape.constant(h), d) : tape.matmul(tape.constant(h), d);
            return tape.scale(tape.sum(tape.hadamard(d, hd)), 0.5);
        },
        s);
}

ParamVector exact_inner_solution(const QuadraticLoss& train, const ParamVector& omega, double gamma) {
    // (H + gamma I) psi = H c + gamma omega
    const ParamVector rhs = train.apply(train.center) + gamma * omega;
    if (train.is_diagonal()) {
        return rhs.cwiseQuotient((train.hessian.col(0).array() + gamma).matrix());
    }
    Eigen::MatrixXd m = train.hessian;
    m.diagonal().array() += gamma;
    return m.partialPivLu().solve(rhs);
}

double bilevel_objective(const std::vector<QuadraticTask>& family, const ParamVector& omega, double gamma) {
    double total = 0.0;
    for (const auto& t : family) total += t.test.value(exact_inner_solution(t.train, omega, gamma));
    return total / static_cast<double>(family.size());
}

TaskLosses QuadraticLearner::task_losses(std::size_t task, double, Rng&) {
    if (task >= tasks_.size()) throw ContractError("QuadraticLearner: task index out of range");
    return {tasks_[task].train.loss(), tasks_[task].test.loss()};
}

ConvergenceProbe probe_rates(const std::vector<QuadraticTask>& family, const ParamVector& omega, double gamma,
                             std::size_t steps) {
    if (family.empty()) throw ContractError("probe_rates: empty task family");
    ConvergenceProbe out;
    out.gamma = gamma;
    for (const auto& t : family) {
        const Eigen::VectorXd e = t.train.eigenvalues();
        out.lipschitz = std::max(out.lipschitz, e.maxCoeff());
        out.hessian_bound = std::max(out.hessian_bound, e.cwiseAbs().maxCoeff());
    }
    out.theoretical_rate = 1.0 - (gamma - out.hessian_bound) / (out.lipschitz + gamma);
    const double beta = 1.0 / (out.lipschitz + gamma);

    for (const auto& t : family) {
        // the CG solve surfaces indefiniteness before any rate is measured
        const ScalarLossFn train = t.train.loss();
        cg_solve([&](const ParamVector& v) { return t.train.apply(v); }, t.test.gradient(omega), gamma, 2 * omega.size(),
                 1e-12);
        out.rho = std::max(out.rho, (omega - t.train.center).norm());
        const ParamVector star = exact_inner_solution(t.train, omega, gamma);
        double prev = (omega - star).norm();
        inner_adapt(train, omega, gamma, beta, steps, [&](std::size_t k, const ParamVector& psi) {
            if (k == 0) return;
            const double dist = (psi - star).norm();
            // ratios below round-off are meaningless
            if (prev > 1e-12 * std::max(1.0, star.norm())) out.inner_ratios.push_back(dist / prev);
            prev = dist;
        });
    }
    for (double r : out.inner_ratios) out.max_inner_ratio = std::max(out.max_inner_ratio, r);
    out.violation = out.max_inner_ratio > 1.1 * out.theoretical_rate;
    return out;
}

SlopeFit fit_outer_rate(const std::vector<double>& grad_norms, std::size_t k_first) {
    SlopeFit fit;
    const std::size_t kmax = grad_norms.size();
    if (k_first < 1 || kmax < 2 * k_first) throw ContractError("fit_outer_rate: need K >= 2 * k_first");
    std::vector<double> running(kmax);
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < kmax; ++j) {
        m = std::min(m, grad_norms[j] * grad_norms[j]);
        running[j] = m;
    }
    const int points = 12;
    const double ratio = std::pow(static_cast<double>(kmax) / static_cast<double>(k_first), 1.0 / (points - 1));
    double prev_k = 0;
    for (int i = 0; i < points; ++i) {
        double k = std::round(static_cast<double>(k_first) * std::pow(ratio, i));
        k = std::min(k, static_cast<double>(kmax));
        if (k == prev_k) continue;
        prev_k = k;
        fit.k.push_back(k);
        fit.min_grad_sq.push_back(running[static_cast<std::size_t>(k) - 1]);
    }
    const auto n = static_cast<double>(fit.k.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < fit.k.size(); ++i) {
        const double x = std::log(fit.k[i]);
        const double y = std::log(fit.min_grad_sq[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    fit.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    return fit;
}

AdaptationProbe probe_adaptation(const QuadraticLoss& target, const ParamVector& omega_inf, double gamma,
                                 std::size_t steps) {
    AdaptationProbe out;
    const Eigen::VectorXd e = target.eigenvalues();
    const double l = e.maxCoeff();
    const double h = e.cwiseAbs().maxCoeff();
    out.rate = 1.0 - (gamma - h) / (l + gamma);
    const double beta = 1.0 / (l + gamma);

    const ParamVector& opt = target.center;
    out.rho = (opt - omega_inf).norm();
    auto regularized = [&](const ParamVector& w) { return target.value(w) + 0.5 * gamma * (w - omega_inf).squaredNorm(); };
    out.bias = regularized(opt) - target.value(opt);
    out.predicted_bias = 0.5 * gamma * out.rho * out.rho;

    const ParamVector reg_star = exact_inner_solution(target, omega_inf, gamma);
    ParamVector last = meta_adapt(target.loss(), omega_inf, gamma, beta, steps, [&](std::size_t k, const ParamVector& w) {
        out.error.push_back((w - reg_star).norm());
        out.predicted.push_back(out.error.front() * std::pow(out.rate, static_cast<double>(k)));
    });
    out.excess_loss = target.value(last) - target.value(opt);
    const double e0 = (omega_inf - reg_star).squaredNorm();
    out.bound = out.predicted_bias + 0.5 * (l + gamma) * std::pow(out.rate, static_cast<double>(steps)) * e0;
    return out;
}

}  // namespace metactl
