#pragma once

#include "metactl/checkpoint.hpp"
#include "metactl/dataio.hpp"
#include "metactl/diffnum.hpp"
#include "metactl/mlp.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <vector>

namespace metactl {

struct DqnConfig {
    double discount = 0.9;
    double polyak = 0.9;  ///< beta in [0.5, 1)
    std::vector<Eigen::VectorXd> action_grid;
    Eigen::MatrixXd q;  ///< output-error weight (m x m)
    Eigen::MatrixXd r;  ///< input-rate weight (p x p)
    std::size_t stack_len = 1;
    double epsilon_start = 0.3;
    double epsilon_end = 0.02;
    double epsilon_adapt = 0.05;
    Eigen::MatrixXd sigma;  ///< exploration covariance (p x p)
    Eigen::VectorXd u_min;
    Eigen::VectorXd u_max;
    std::vector<std::size_t> hidden{128, 128, 128};

    std::size_t output_dim() const { return static_cast<std::size_t>(q.rows()); }
    std::size_t input_dim() const { return static_cast<std::size_t>(r.rows()); }
    /// [y_stack - ref; u_prev]
    std::size_t observation_dim() const { return output_dim() * stack_len + input_dim(); }

    void validate() const;

    /// Uniform grid of `points_per_axis` values per input inside the box
    /// (Cartesian product over input axes, first axis varying fastest).
    static std::vector<Eigen::VectorXd> uniform_grid(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
                                                     std::size_t points_per_axis);
    /// Defaults for a plant with the given box: Sigma = diag((u_max/2)^2).
    static DqnConfig with_box(const Eigen::VectorXd& u_min, const Eigen::VectorXd& u_max, std::size_t output_dim,
                              std::size_t points_per_axis, std::size_t stack_len);
};

/// (y - ybar)' Q (y - ybar) + du' R du with du = u - u_prev.
double stage_cost(const Eigen::VectorXd& y, const Eigen::VectorXd& ybar, const Eigen::VectorXd& u,
                  const Eigen::VectorXd& u_prev, const Eigen::MatrixXd& q, const Eigen::MatrixXd& r);

/// [y_stack - tile(ref); u_prev].
Eigen::VectorXd observation(const Eigen::VectorXd& y_stack, const Eigen::VectorXd& ref, const Eigen::VectorXd& u_prev);

/// Q(obs, u): an MLP on concat(obs, u) with a scalar output.
class QNetwork {
public:
    QNetwork() = default;
    QNetwork(std::size_t observation_dim, std::size_t action_dim, std::vector<std::size_t> hidden);
    explicit QNetwork(Mlp net, std::size_t action_dim);

    const Mlp& mlp() const { return net_; }
    std::size_t observation_dim() const { return net_.input_dim() - action_dim_; }
    std::size_t action_dim() const { return action_dim_; }
    std::size_t num_params() const { return net_.num_params(); }

    ParamVector init(Rng& rng) const;

    /// Fixed per-input factors applied to concat(obs, u) before the first layer (default ones).
    void set_input_scale(Eigen::VectorXd scale);
    const Eigen::VectorXd& input_scale() const { return input_scale_; }
    Eigen::MatrixXd network_input(const Eigen::MatrixXd& x) const;

    double value(const ParamVector& params, const Eigen::VectorXd& obs, const Eigen::VectorXd& u) const;
    /// Q at one observation for every grid action.
    Eigen::RowVectorXd grid_values(const ParamVector& params, const Eigen::VectorXd& obs,
                                   const std::vector<Eigen::VectorXd>& grid) const;
    /// Grid minimum of Q for each column of `observations`.
    Eigen::RowVectorXd grid_minimum(const ParamVector& params, const Eigen::MatrixXd& observations,
                                    const std::vector<Eigen::VectorXd>& grid) const;

    nlohmann::json header() const;
    static QNetwork from_header(const nlohmann::json& h);

private:
    Mlp net_;
    std::size_t action_dim_ = 0;
    Eigen::VectorXd input_scale_;
};

/// Index of the grid action with the smallest Q; ties go to the lowest index.
std::size_t greedy_index(const QNetwork& net, const ParamVector& params, const Eigen::VectorXd& obs,
                         const std::vector<Eigen::VectorXd>& grid);
Eigen::VectorXd greedy_action(const QNetwork& net, const ParamVector& params, const Eigen::VectorXd& obs,
                              const std::vector<Eigen::VectorXd>& grid);

/// c(y', u) + discount * min_u' Q(obs', u' | target).
double bellman_target(const QNetwork& net, const ParamVector& target_params, const Transition& tr,
                      const DqnConfig& config);

/// Network inputs and frozen Bellman targets of a batch of transitions.
struct DqnBatch {
    Eigen::MatrixXd inputs;      ///< scaled concat(obs, u) per column
    Eigen::RowVectorXd targets;  ///< Q-tilde per column

    std::size_t size() const { return static_cast<std::size_t>(inputs.cols()); }
};

DqnBatch make_dqn_batch(const QNetwork& net, const ParamVector& target_params, const std::vector<Transition>& batch,
                        const DqnConfig& config);

/// 1/2 sum_i (Q-tilde_i - Q_i)^2.
double loss_dqn(const QNetwork& net, const ParamVector& params, const DqnBatch& batch);
ScalarLossFn make_dqn_loss(const QNetwork& net, DqnBatch batch);

/// beta * target + (1 - beta) * params.
ParamVector polyak_update(const ParamVector& target, const ParamVector& params, double beta);

/// N(0, Sigma) projected onto the input box.
Eigen::VectorXd exploration_draw(const DqnConfig& config, Rng& rng);

/// Greedy with probability 1 - epsilon, otherwise an exploration draw.
Eigen::VectorXd epsilon_greedy(const QNetwork& net, const ParamVector& params, const Eigen::VectorXd& obs,
                               const DqnConfig& config, double epsilon, Rng& rng, bool* explored = nullptr);

/// Linear decay from epsilon_start to epsilon_end over `total` iterations.
double epsilon_schedule(const DqnConfig& config, std::size_t iteration, std::size_t total);

void save_qnet(const std::filesystem::path& dir, const QNetwork& net, const ParamVector& params);
std::pair<QNetwork, ParamVector> load_qnet(const std::filesystem::path& dir);

}  // namespace metactl
