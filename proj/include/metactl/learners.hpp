#pragma once

#include "metactl/dataio.hpp"
#include "metactl/dqn.hpp"
#include "metactl/meta.hpp"
#include "metactl/mpc.hpp"
#include "metactl/nssm.hpp"
#include "metactl/plants.hpp"

#include <deque>
#include <memory>
#include <vector>

namespace metactl {

/// How a learner gathers fresh closed-loop data during meta-training.
struct CollectOptions {
    std::size_t steps = 0;  ///< rows per collected trajectory; 0 turns collection off
    double epsilon = 0.2;   ///< exploration probability (NSSM; the DQN uses its schedule)
    Eigen::MatrixXd sigma;  ///< exploration covariance, p x p
    ReferenceFn reference;
    std::function<Eigen::VectorXd(Rng&)> initial_state;
};

/// N(0, sigma) draw clipped to the plant's input box.
Eigen::VectorXd gaussian_input(const Eigen::MatrixXd& sigma, const Plant& plant, Rng& rng);

/// References r_t .. r_{t+n-1}.
std::vector<Eigen::VectorXd> reference_segment(const ReferenceFn& ref, std::size_t t, std::size_t n);

/// Receding-horizon MPC on the latest history. Rows before the encoder has H of them
/// keep the previous input. With `explore`, each decision is replaced by a Gaussian
/// draw with probability epsilon.
Controller mpc_policy(std::shared_ptr<MpcController> ctrl, ReferenceFn reference, const Plant& plant,
                      double epsilon = 0.0, Eigen::MatrixXd sigma = {}, std::shared_ptr<Rng> rng = nullptr);

/// Outputs of the last `stack_len` rows ending at `t`, newest first (row 0 repeats before the start).
Eigen::VectorXd stacked_outputs(const Trajectory& traj, std::size_t t, std::size_t stack_len);

/// Greedy (epsilon = 0) or epsilon-greedy action from the Q-network at the latest row.
Controller dqn_policy(const QNetwork& net, ParamVector params, const DqnConfig& config, ReferenceFn reference,
                      double epsilon = 0.0, std::shared_ptr<Rng> rng = nullptr);

/// Source tasks with ring buffers for trajectories collected during meta-training.
class TaskPool {
public:
    TaskPool(const SourceDataset& sources, std::size_t ring_capacity);

    std::size_t size() const { return tasks_.size(); }
    const TaskData& task(std::size_t i) const { return tasks_[i].view; }
    std::size_t version(std::size_t i) const { return tasks_[i].version; }
    std::size_t collected(std::size_t i) const { return tasks_[i].ring.size(); }
    void append(std::size_t i, Trajectory traj);

private:
    struct Entry {
        std::vector<TrajectoryPtr> base;
        std::deque<TrajectoryPtr> ring;
        TaskData view;
        std::size_t version = 0;
    };
    std::vector<Entry> tasks_;
    std::size_t capacity_;
};

class NssmLearner : public BaseLearner {
public:
    struct Options {
        std::size_t windows_per_batch = 64;  ///< per split
        std::size_t ring_capacity = 50;
        CollectOptions collect;
        MpcConfig mpc;
    };

    NssmLearner(Nssm model, const SourceDataset& sources, std::vector<Plant> plants, Options options);

    std::size_t num_tasks() const override { return pool_.size(); }
    TaskLosses task_losses(std::size_t task, double train_ratio, Rng& rng) override;
    bool collect(std::size_t task, const ParamVector& adapted, double progress, Rng& rng) override;

    const TaskPool& pool() const { return pool_; }

private:
    const std::vector<Window>& windows(std::size_t task);

    Nssm model_;
    TaskPool pool_;
    std::vector<Plant> plants_;
    Options options_;
    std::vector<std::vector<Window>> windows_;
    std::vector<std::size_t> window_version_;
};

/// Loss over every window of a dataset (target adaptation).
ScalarLossFn nssm_dataset_loss(const Nssm& model, const TaskData& task);

class DqnLearner : public BaseLearner {
public:
    struct Options {
        std::size_t transitions_per_batch = 64;  ///< per split
        std::size_t ring_capacity = 50;
        CollectOptions collect;
        /// When non-empty each sampled transition gets a reference drawn from here
        /// (held over the step); otherwise recorded references are used.
        std::vector<Eigen::VectorXd> goals;
    };

    DqnLearner(QNetwork net, DqnConfig config, const SourceDataset& sources, std::vector<Plant> plants,
               const ParamVector& omega0, Options options);

    std::size_t num_tasks() const override { return pool_.size(); }
    TaskLosses task_losses(std::size_t task, double train_ratio, Rng& rng) override;
    void after_inner(std::size_t task, const ParamVector& adapted) override;
    bool collect(std::size_t task, const ParamVector& adapted, double progress, Rng& rng) override;

    const ParamVector& target_params(std::size_t task) const { return targets_[task]; }
    const TaskPool& pool() const { return pool_; }

private:
    const std::vector<Transition>& transitions(std::size_t task);

    QNetwork net_;
    DqnConfig config_;
    TaskPool pool_;
    std::vector<Plant> plants_;
    Options options_;
    std::vector<ParamVector> targets_;
    std::vector<std::vector<Transition>> transitions_;
    std::vector<std::size_t> transition_version_;
};

/// Transitions of every trajectory in a dataset, optionally relabelled with goals.
std::vector<Transition> dataset_transitions(const TaskData& task, std::size_t stack_len);

/// Random subset of at most n items (order randomized).
template <class T>
std::vector<T> sample_without_replacement(const std::vector<T>& items, std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(items.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::size_t k = std::min(n, items.size());
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    std::vector<T> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back(items[idx[i]]);
    return out;
}

}  // namespace metactl
