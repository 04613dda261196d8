#include "metactl/learners.hpp"

#include "metactl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace metactl {

Eigen::VectorXd gaussian_input(const Eigen::MatrixXd& sigma, const Plant& plant, Rng& rng) {
    std::normal_distribution<double> n01;
    Eigen::VectorXd z(sigma.rows());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = n01(rng);
    const Eigen::MatrixXd l = Eigen::LLT<Eigen::MatrixXd>(sigma).matrixL();
    return plant.clamp_input(l * z);
}

std::vector<Eigen::VectorXd> reference_segment(const ReferenceFn& ref, std::size_t t, std::size_t n) {
    std::vector<Eigen::VectorXd> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) out.push_back(ref(t + k));
    return out;
}

Controller mpc_policy(std::shared_ptr<MpcController> ctrl, ReferenceFn reference, const Plant& plant, double epsilon,
                      Eigen::MatrixXd sigma, std::shared_ptr<Rng> rng) {
    if (epsilon > 0.0 && (!rng || sigma.size() == 0)) {
        throw ContractError("mpc_policy: exploration needs a generator and a covariance");
    }
    return [ctrl, reference = std::move(reference), plant, epsilon, sigma = std::move(sigma),
            rng](const Trajectory& history) -> Eigen::VectorXd {
        const Eigen::VectorXd& last = history.inputs.back();
        if (epsilon > 0.0) {
            const bool explore = std::uniform_real_distribution<double>(0.0, 1.0)(*rng) < epsilon;
            if (explore) return gaussian_input(sigma, plant, *rng);
        }
        // the encoder needs H rows
        if (history.size() < ctrl->model().config().history) return last;
        const std::size_t t = history.size() - 1;
        ctrl->set_previous_input(last);
        return ctrl->step(history, reference_segment(reference, t, ctrl->config().horizon + 1));
    };
}

Eigen::VectorXd stacked_outputs(const Trajectory& traj, std::size_t t, std::size_t stack_len) {
    const auto m = static_cast<Eigen::Index>(traj.output_dim());
    Eigen::VectorXd y(m * static_cast<Eigen::Index>(stack_len));
    for (std::size_t k = 0; k < stack_len; ++k) {
        const std::size_t row = t >= k ? t - k : 0;
        y.segment(static_cast<Eigen::Index>(k) * m, m) = traj.outputs[row];
    }
    return y;
}

Controller dqn_policy(const QNetwork& net, ParamVector params, const DqnConfig& config, ReferenceFn reference,
                      double epsilon, std::shared_ptr<Rng> rng) {
    if (epsilon > 0.0 && !rng) throw ContractError("dqn_policy: exploration needs a generator");
    return [net, params = std::move(params), config, reference = std::move(reference), epsilon,
            rng](const Trajectory& history) -> Eigen::VectorXd {
        const std::size_t t = history.size() - 1;
        const Eigen::VectorXd obs =
            observation(stacked_outputs(history, t, config.stack_len), reference(t), history.inputs.back());
        if (epsilon > 0.0) return epsilon_greedy(net, params, obs, config, epsilon, *rng);
        return greedy_action(net, params, obs, config.action_grid);
    };
}

// ---- task pool ------------------------------------------------------------

TaskPool::TaskPool(const SourceDataset& sources, std::size_t ring_capacity) : capacity_(ring_capacity) {
    if (ring_capacity == 0) throw ContractError("TaskPool: ring capacity must be at least 1");
    for (const auto& t : sources.tasks) {
        Entry e;
        e.base = t.trajectories;
        e.view = t;
        tasks_.push_back(std::move(e));
    }
}

void TaskPool::append(std::size_t i, Trajectory traj) {
    Entry& e = tasks_.at(i);
    if (e.view.dt != 0.0 && traj.dt != e.view.dt) {
        throw DatasetError(DatasetError::Kind::DtMismatch, "TaskPool: collected trajectory has a different dt");
    }
    e.ring.push_back(std::make_shared<const Trajectory>(std::move(traj)));
    if (e.ring.size() > capacity_) e.ring.pop_front();
    e.view.trajectories = e.base;
    e.view.trajectories.insert(e.view.trajectories.end(), e.ring.begin(), e.ring.end());
    ++e.version;
}

// ---- NSSM -----------------------------------------------------------------

NssmLearner::NssmLearner(Nssm model, const SourceDataset& sources, std::vector<Plant> plants, Options options)
    : model_(std::move(model)),
      pool_(sources, options.ring_capacity),
      plants_(std::move(plants)),
      options_(std::move(options)),
      windows_(pool_.size()),
      window_version_(pool_.size(), static_cast<std::size_t>(-1)) {
    if (options_.collect.steps > 0 && plants_.size() != pool_.size()) {
        throw ContractError("NssmLearner: collection needs one plant per task");
    }
}

const std::vector<Window>& NssmLearner::windows(std::size_t task) {
    if (window_version_[task] != pool_.version(task)) {
        windows_[task] = make_windows(pool_.task(task), model_.config().history, model_.config().horizon);
        window_version_[task] = pool_.version(task);
    }
    return windows_[task];
}

TaskLosses NssmLearner::task_losses(std::size_t task, double train_ratio, Rng& rng) {
    const auto& all = windows(task);
    if (all.size() < 2) throw ContractError("NssmLearner: task " + pool_.task(task).id + " has fewer than two windows");
    auto [train, test] = partition(all, train_ratio, rng);
    const std::size_t w = options_.windows_per_batch;
    if (train.size() > w) train.resize(w);
    if (test.size() > w) test.resize(w);
    const TaskData& data = pool_.task(task);
    return {make_ssm_loss(model_, model_.make_batch(data, train)), make_ssm_loss(model_, model_.make_batch(data, test))};
}

bool NssmLearner::collect(std::size_t task, const ParamVector& adapted, double, Rng& rng) {
    const CollectOptions& c = options_.collect;
    if (c.steps == 0) return true;
    const Plant& plant = plants_.at(task);
    auto ctrl = std::make_shared<MpcController>(model_, adapted, options_.mpc);
    auto local = std::make_shared<Rng>(rng());
    Controller policy = mpc_policy(ctrl, c.reference, plant, c.epsilon, c.sigma, local);
    const Eigen::VectorXd x0 = c.initial_state(rng);
    SimResult res = simulate(plant, x0, policy, c.reference, c.steps, {}, pool_.task(task).id);
    if (res.diverged || res.trajectory.size() < model_.config().history + model_.config().horizon) {
        std::cerr << "warning: collection on " << pool_.task(task).id << " diverged at row " << res.diverged_at
                  << "; trajectory dropped\n";
        return false;
    }
    pool_.append(task, std::move(res.trajectory));
    return true;
}

ScalarLossFn nssm_dataset_loss(const Nssm& model, const TaskData& task) {
    std::vector<Window> w = make_windows(task, model.config().history, model.config().horizon);
    if (w.empty()) throw ContractError("nssm_dataset_loss: dataset holds no complete window");
    return make_ssm_loss(model, model.make_batch(task, w));
}

// ---- DQN ------------------------------------------------------------------

std::vector<Transition> dataset_transitions(const TaskData& task, std::size_t stack_len) {
    std::vector<Transition> out;
    for (const auto& t : task.trajectories) {
        if (t->size() < stack_len + 1) continue;
        auto part = to_transitions(*t, stack_len);
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

DqnLearner::DqnLearner(QNetwork net, DqnConfig config, const SourceDataset& sources, std::vector<Plant> plants,
                       const ParamVector& omega0, Options options)
    : net_(std::move(net)),
      config_(std::move(config)),
      pool_(sources, options.ring_capacity),
      plants_(std::move(plants)),
      options_(std::move(options)),
      targets_(pool_.size(), omega0),
      transitions_(pool_.size()),
      transition_version_(pool_.size(), static_cast<std::size_t>(-1)) {
    config_.validate();
    if (options_.collect.steps > 0 && plants_.size() != pool_.size()) {
        throw ContractError("DqnLearner: collection needs one plant per task");
    }
}

const std::vector<Transition>& DqnLearner::transitions(std::size_t task) {
    if (transition_version_[task] != pool_.version(task)) {
        transitions_[task] = dataset_transitions(pool_.task(task), config_.stack_len);
        transition_version_[task] = pool_.version(task);
    }
    return transitions_[task];
}

TaskLosses DqnLearner::task_losses(std::size_t task, double train_ratio, Rng& rng) {
    const auto& all = transitions(task);
    if (all.size() < 2) throw ContractError("DqnLearner: task " + pool_.task(task).id + " has fewer than two transitions");
    const std::size_t per_split = options_.transitions_per_batch;
    const auto want = static_cast<std::size_t>(std::ceil(static_cast<double>(per_split) / train_ratio));
    std::vector<Transition> picked = sample_without_replacement(all, std::max<std::size_t>(want, 2), rng);
    if (!options_.goals.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, options_.goals.size() - 1);
        for (auto& tr : picked) {
            tr.ref = options_.goals[pick(rng)];
            tr.ref_next = tr.ref;
        }
    }
    auto [train, test] = partition(picked, train_ratio, rng);
    if (train.size() > per_split) train.resize(per_split);
    if (test.size() > per_split) test.resize(per_split);
    const ParamVector& target = targets_[task];
    return {make_dqn_loss(net_, make_dqn_batch(net_, target, train, config_)),
            make_dqn_loss(net_, make_dqn_batch(net_, target, test, config_))};
}

void DqnLearner::after_inner(std::size_t task, const ParamVector& adapted) {
    targets_[task] = polyak_update(targets_[task], adapted, config_.polyak);
}

bool DqnLearner::collect(std::size_t task, const ParamVector& adapted, double progress, Rng& rng) {
    const CollectOptions& c = options_.collect;
    if (c.steps == 0) return true;
    const Plant& plant = plants_.at(task);
    const double eps = config_.epsilon_start + std::clamp(progress, 0.0, 1.0) * (config_.epsilon_end - config_.epsilon_start);
    auto local = std::make_shared<Rng>(rng());
    Controller policy = dqn_policy(net_, adapted, config_, c.reference, eps, local);
    SimResult res = simulate(plant, c.initial_state(rng), policy, c.reference, c.steps, {}, pool_.task(task).id);
    if (res.diverged || res.trajectory.size() < config_.stack_len + 1) {
        std::cerr << "warning: collection on " << pool_.task(task).id << " diverged at row " << res.diverged_at
                  << "; trajectory dropped\n";
        return false;
    }
    pool_.append(task, std::move(res.trajectory));
    return true;
}

}  // namespace metactl
