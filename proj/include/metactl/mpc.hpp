#pragma once

#include "metactl/dataio.hpp"
#include "metactl/nssm.hpp"

#include <Eigen/Dense>

#include <optional>
#include <vector>

namespace metactl {

/// Fixed-point iteration P <- A'PA - A'PB (R + B'PB)^-1 B'PA + Q from P = Q.
/// Throws SolverError if the Riccati residual is not below `tol` (max-abs)
/// within `max_iter` iterations, or the iterate stops being finite.
Eigen::MatrixXd solve_dare(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::MatrixXd& q,
                           const Eigen::MatrixXd& r, double tol = 1e-10, int max_iter = 100000);

double dare_residual(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::MatrixXd& q,
                     const Eigen::MatrixXd& r, const Eigen::MatrixXd& p);

struct MpcConfig {
    std::size_t horizon = 10;  ///< N
    Eigen::MatrixXd q;         ///< output weight (m x m), PSD
    Eigen::MatrixXd r;         ///< input-rate weight (p x p), PD
    Eigen::VectorXd u_min;
    Eigen::VectorXd u_max;
    /// Optional soft output box, penalized with weight 1e3 |Q|.
    std::optional<Eigen::VectorXd> y_min;
    std::optional<Eigen::VectorXd> y_max;
    int max_iter = 500;
    double tol = 1e-8;

    void validate() const;
};

/// One instance of the tracking problem on a linear model
/// s_{k+1} = A s_k + B u_{k+1}, y_k = C s_k.
struct MpcProblem {
    Eigen::MatrixXd a;
    Eigen::MatrixXd b;
    Eigen::MatrixXd c;
    Eigen::VectorXd s0;
    std::vector<Eigen::VectorXd> reference;  ///< y_ref for k = 0..N
    Eigen::VectorXd u_prev;
    Eigen::MatrixXd terminal;  ///< P, weight on the k = N output error
};

struct MpcSolution {
    std::vector<Eigen::VectorXd> inputs;  ///< u_1..u_N
    double objective = 0.0;
    std::vector<double> objective_trace;  ///< per solver iteration, non-increasing
    double kkt_residual = 0.0;            ///< |U - proj(U - grad/L)|_inf
    int iterations = 0;
    bool converged = false;
};

/// Minimize sum_{k=1..N} du_k' R du_k + sum_{k=1..N-1} e_k' Q e_k + e_N' P e_N
/// (e_k = y_k - ref_k, du_1 = u_1 - u_prev) over the input box. The
/// unconstrained minimizer is used when it is feasible; otherwise monotone
/// projected fast gradient. Throws SolverError if iterates become non-finite.
MpcSolution solve_mpc(const MpcProblem& problem, const MpcConfig& config);

/// Objective value of a given input sequence (for checking).
double mpc_objective(const MpcProblem& problem, const MpcConfig& config, const std::vector<Eigen::VectorXd>& inputs);

/// Terminal weight in output space: DARE on (A_z, B_z, C_z'QC_z, R) lifted by
/// pinv(C_z). Falls back to Q, with `fallback` set, when that fails.
struct TerminalWeight {
    Eigen::MatrixXd p;
    bool fallback = false;
};
TerminalWeight terminal_weight(const Eigen::MatrixXd& a_z, const Eigen::MatrixXd& b_z, const Eigen::MatrixXd& c_z,
                               const Eigen::MatrixXd& q, const Eigen::MatrixXd& r);

/// Receding-horizon controller around an NSSM.
class MpcController {
public:
    MpcController(Nssm model, ParamVector params, MpcConfig config);

    /// Encode the last H rows of `history`, solve, return u_{t+1}, and
    /// remember it as the previous input. `reference` holds N+1 samples
    /// starting at the current row.
    Eigen::VectorXd step(const Trajectory& history, const std::vector<Eigen::VectorXd>& reference);

    /// Overwrite the remembered previous input (when something else drove the plant).
    void set_previous_input(const Eigen::VectorXd& u) { u_prev_ = u; }
    void reset() { u_prev_ = Eigen::VectorXd::Zero(config_.u_min.size()); }

    const Eigen::VectorXd& previous_input() const { return u_prev_; }
    bool terminal_fallback() const { return terminal_.fallback; }
    const MpcSolution& last_solution() const { return last_; }
    const MpcConfig& config() const { return config_; }
    const Nssm& model() const { return model_; }

private:
    Nssm model_;
    ParamVector params_;
    MpcConfig config_;
    CompactModel compact_;
    Eigen::MatrixXd c_out_;
    TerminalWeight terminal_;
    Eigen::VectorXd u_prev_;
    MpcSolution last_;
};

}  // namespace metactl
