#pragma once

#include "metactl/diffnum.hpp"
#include "metactl/rng.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace metactl {

struct MetaConfig {
    double reg_strength = 1.0;      ///< gamma
    std::optional<double> beta_in;  ///< unset: 1 / (L + gamma) with L from power iteration
    double beta_out = 1e-3;
    std::size_t inner_steps = 5;  ///< M
    std::size_t batch_size = 4;   ///< B
    std::size_t k_train = 500;
    std::size_t k_adapt = 100;
    std::size_t cg_iters = 50;
    double cg_tol = 1e-8;
    std::size_t power_iters = 5;
    std::size_t converge_window = 10;
    double converge_tol = 1e-4;
    std::size_t ring_capacity = 50;  ///< collected trajectories kept per task
    double train_ratio = 0.5;

    void validate() const;
};

enum class MetaVariant { Imaml, Maml };

const char* variant_name(MetaVariant v);

/// Magnitude of the dominant Hessian eigenvalue of f at psi (power iteration).
double estimate_curvature(const ScalarLossFn& f, const ParamVector& psi, std::size_t iters, Rng& rng);

/// 1 / (L + gamma), or the configured beta_in.
double inner_step_size(const ScalarLossFn& train, const ParamVector& omega, double gamma, const MetaConfig& config,
                       Rng& rng);

using StepCallback = std::function<void(std::size_t step, const ParamVector& psi)>;

/// `steps` iterations of psi <- psi - beta (grad l(psi) + gamma (psi - omega)) from psi = omega.
/// The callback sees psi after every step (and step 0 before the first).
ParamVector inner_adapt(const ScalarLossFn& train, const ParamVector& omega, double gamma, double beta_in,
                        std::size_t steps, const StepCallback& on_step = {});

using LinearOp = std::function<ParamVector(const ParamVector&)>;

struct CgResult {
    ParamVector x;
    std::size_t iterations = 0;
    double residual = 0.0;  ///< |Q x - P| / |P|
};

/// Solves (I + H / gamma) g = P where `hvp_fn` applies H. Throws IndefiniteError on
/// non-positive curvature along a search direction.
CgResult cg_solve(const LinearOp& hvp_fn, const ParamVector& p, double gamma, std::size_t iters, double tol);

/// (I + hess(train)/gamma)^-1 grad(test), both at omega_b.
ParamVector implicit_grad(const ScalarLossFn& train, const ScalarLossFn& test, const ParamVector& omega_b,
                          const MetaConfig& config, CgResult* info = nullptr);

/// First-order MAML: unregularized inner steps, then the test gradient at the result.
ParamVector maml_outer_grad(const ScalarLossFn& train, const ScalarLossFn& test, const ParamVector& omega,
                            double beta_in, std::size_t steps);

/// omega - beta_out * mean(grads).
ParamVector outer_step(const ParamVector& omega, const std::vector<ParamVector>& grads, double beta_out);

/// Target adaptation anchored at omega; same recursion as inner_adapt.
ParamVector meta_adapt(const ScalarLossFn& target, const ParamVector& omega, double gamma, double beta_in,
                       std::size_t steps, const StepCallback& on_step = {});

struct TaskLosses {
    ScalarLossFn train;
    ScalarLossFn test;
};

/// What the meta loop needs from a model family and its source data.
class BaseLearner {
public:
    virtual ~BaseLearner() = default;

    virtual std::size_t num_tasks() const = 0;
    /// Random train/test split of the task's current data, as losses.
    virtual TaskLosses task_losses(std::size_t task, double train_ratio, Rng& rng) = 0;
    /// Called with the task's adapted parameters before its outer gradient.
    virtual void after_inner(std::size_t /*task*/, const ParamVector& /*adapted*/) {}
    /// Run the exploring controller built from `adapted` on the task's plant and keep
    /// the trajectory. `progress` runs from 0 to 1 over training. False if it diverged.
    virtual bool collect(std::size_t /*task*/, const ParamVector& /*adapted*/, double /*progress*/, Rng& /*rng*/) {
        return true;
    }
};

struct MetaLogRow {
    std::size_t iteration = 0;
    double outer_loss = 0.0;
    double grad_norm = 0.0;
    double wall_seconds = 0.0;
};

struct MetaTrainResult {
    ParamVector omega;
    std::vector<MetaLogRow> log;
    bool converged = false;
    std::size_t skipped_appends = 0;
};

/// Outer loop: sample B tasks, adapt each, take implicit (or first-order) gradients,
/// collect fresh data, step omega. Stops at k_train or when the outer loss settles.
MetaTrainResult meta_train(BaseLearner& learner, const ParamVector& omega0, const MetaConfig& config,
                           MetaVariant variant, Rng& rng,
                           const std::function<void(const MetaLogRow&)>& on_iteration = {});

void write_training_log(const std::filesystem::path& file, const std::vector<MetaLogRow>& rows);

// Quadratic probes

/// 0.5 (psi - center)' H (psi - center). `hessian` is d x d, or d x 1 holding a diagonal.
struct QuadraticLoss {
    Eigen::MatrixXd hessian;
    Eigen::VectorXd center;

    static QuadraticLoss dense(Eigen::MatrixXd h, Eigen::VectorXd c);
    static QuadraticLoss diagonal(Eigen::VectorXd h, Eigen::VectorXd c);

    bool is_diagonal() const { return hessian.cols() == 1 && hessian.rows() != 1; }
    Eigen::Index dim() const { return center.size(); }
    Eigen::MatrixXd dense_hessian() const;
    Eigen::VectorXd eigenvalues() const;

    ParamVector apply(const ParamVector& v) const;
    double value(const ParamVector& psi) const;
    ParamVector gradient(const ParamVector& psi) const;
    ScalarLossFn loss() const;
};

struct QuadraticTask {
    QuadraticLoss train;
    QuadraticLoss test;
};

/// argmin_psi l(psi) + gamma/2 |psi - omega|^2 in closed form.
ParamVector exact_inner_solution(const QuadraticLoss& train, const ParamVector& omega, double gamma);

/// mean_b test_b(exact inner solution of train_b at omega).
double bilevel_objective(const std::vector<QuadraticTask>& family, const ParamVector& omega, double gamma);

class QuadraticLearner : public BaseLearner {
public:
    explicit QuadraticLearner(std::vector<QuadraticTask> tasks) : tasks_(std::move(tasks)) {}

    std::size_t num_tasks() const override { return tasks_.size(); }
    TaskLosses task_losses(std::size_t task, double train_ratio, Rng& rng) override;

private:
    std::vector<QuadraticTask> tasks_;
};

struct ConvergenceProbe {
    double lipschitz = 0.0;      ///< L
    double hessian_bound = 0.0;  ///< H
    double gamma = 0.0;
    double theoretical_rate = 0.0;  ///< 1 - (gamma - H) / (L + gamma)
    std::vector<double> inner_ratios;  ///< per-step distance ratios to the inner optimum
    double max_inner_ratio = 0.0;
    double rho = 0.0;  ///< largest |omega - argmin| over the family
    bool violation = false;  ///< an observed ratio exceeded theory by more than 10%
};

/// Inner-loop contraction on each task's train loss with beta_in = 1/(L + gamma), plus a
/// CG solve per task (which surfaces IndefiniteError when gamma does not dominate).
ConvergenceProbe probe_rates(const std::vector<QuadraticTask>& family, const ParamVector& omega, double gamma,
                             std::size_t steps);

struct SlopeFit {
    std::vector<double> k;
    std::vector<double> min_grad_sq;  ///< min_{j<k} |grad|^2
    double slope = 0.0;
};

/// Least-squares slope of log(min_{j<k} g_j^2) against log k on a geometric grid of k.
SlopeFit fit_outer_rate(const std::vector<double>& grad_norms, std::size_t k_first);

struct AdaptationProbe {
    double rho = 0.0;
    double bias = 0.0;            ///< f(omega_opt) - l(omega_opt), f the regularized target loss
    double predicted_bias = 0.0;  ///< gamma rho^2 / 2
    double rate = 0.0;            ///< 1 - (gamma - H) / (L + gamma)
    std::vector<double> error;      ///< |omega_k - omega_reg| for k = 0..steps
    std::vector<double> predicted;  ///< error[0] * rate^k
    double excess_loss = 0.0;       ///< l(omega_K) - l(omega_opt)
    double bound = 0.0;             ///< bias bound plus optimization error term
};

/// Adaptation on a quadratic target from omega_inf with beta_in = 1/(L + gamma).
/// omega_opt is the target centre; the bias terms are meaningful for a convex target.
AdaptationProbe probe_adaptation(const QuadraticLoss& target, const ParamVector& omega_inf, double gamma,
                                 std::size_t steps);

}  // namespace metactl
