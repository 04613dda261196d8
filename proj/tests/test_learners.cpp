#include "doctest.h"

#include "metactl/errors.hpp"
#include "metactl/learners.hpp"

using namespace metactl;

namespace {

Eigen::VectorXd v1(double x) { return Eigen::VectorXd::Constant(1, x); }

// u_t = t, y_t = (t, -t)
Trajectory ramp(std::size_t rows, double dt = 0.05) {
    Trajectory t;
    t.dt = dt;
    for (std::size_t i = 0; i < rows; ++i) {
        const double x = static_cast<double>(i);
        t.push(v1(x), Eigen::Vector2d(x, -x));
    }
    return t;
}

SourceDataset ramp_sources(std::size_t tasks, std::size_t rows) {
    SourceDataset ds;
    for (std::size_t k = 0; k < tasks; ++k) {
        TaskData d;
        d.id = "task" + std::to_string(k);
        d.dt = 0.05;
        d.trajectories.push_back(std::make_shared<const Trajectory>(ramp(rows)));
        ds.tasks.push_back(d);
    }
    return ds;
}

Plant vdp(double theta) { return Plant(PlantSpec::van_der_pol(), VanDerPolParams{theta}); }

NssmConfig small_nssm() {
    NssmConfig c;
    c.history = 3;
    c.latent = 2;
    c.horizon = 4;
    c.hidden = {8};
    return c;
}

MpcConfig vdp_mpc() {
    const PlantSpec s = PlantSpec::van_der_pol();
    MpcConfig c;
    c.horizon = 5;
    c.q = Eigen::Matrix2d::Identity();
    c.r = Eigen::MatrixXd::Constant(1, 1, 0.1);
    c.u_min = s.u_min;
    c.u_max = s.u_max;
    return c;
}

}  // namespace

TEST_CASE("reference segment and stacked outputs") {
    ReferenceFn ref = [](std::size_t t) { return v1(static_cast<double>(t)); };
    auto seg = reference_segment(ref, 4, 3);
    REQUIRE(seg.size() == 3);
    CHECK(seg[0](0) == 4.0);
    CHECK(seg[2](0) == 6.0);

    Trajectory t = ramp(5);
    Eigen::VectorXd s = stacked_outputs(t, 3, 2);
    CHECK(s == (Eigen::VectorXd(4) << 3, -3, 2, -2).finished());
    // before the start the first row repeats
    CHECK(stacked_outputs(t, 0, 2) == Eigen::VectorXd::Zero(4));
}

TEST_CASE("gaussian input stays inside the box") {
    Plant p = vdp(1.0);
    Rng rng(1);
    Eigen::MatrixXd sigma = Eigen::MatrixXd::Constant(1, 1, 100.0);
    bool hit = false;
    for (int i = 0; i < 200; ++i) {
        Eigen::VectorXd u = gaussian_input(sigma, p, rng);
        CHECK(u(0) <= p.spec().u_max(0));
        CHECK(u(0) >= p.spec().u_min(0));
        hit = hit || u(0) == p.spec().u_max(0);
    }
    CHECK(hit);
}

TEST_CASE("task pool keeps the newest collected trajectories") {
    TaskPool pool(ramp_sources(2, 10), 3);
    CHECK(pool.size() == 2);
    CHECK(pool.task(0).trajectories.size() == 1);
    const std::size_t v0 = pool.version(0);
    for (std::size_t i = 0; i < 5; ++i) pool.append(0, ramp(4 + i));
    CHECK(pool.collected(0) == 3);
    CHECK(pool.version(0) == v0 + 5);
    const auto& trajs = pool.task(0).trajectories;
    REQUIRE(trajs.size() == 4);
    CHECK(trajs[0]->size() == 10);
    CHECK(trajs[1]->size() == 6);
    CHECK(trajs[3]->size() == 8);
    // the other task is untouched
    CHECK(pool.task(1).trajectories.size() == 1);
    CHECK(pool.collected(1) == 0);

    CHECK_THROWS_AS(pool.append(1, ramp(5, 0.1)), DatasetError);
    CHECK_THROWS_AS(TaskPool(ramp_sources(1, 5), 0), ContractError);
}

TEST_CASE("sampling without replacement") {
    std::vector<int> items{0, 1, 2, 3, 4, 5, 6, 7};
    Rng rng(2);
    auto s = sample_without_replacement(items, 5, rng);
    CHECK(s.size() == 5);
    std::sort(s.begin(), s.end());
    CHECK(std::adjacent_find(s.begin(), s.end()) == s.end());
    CHECK(sample_without_replacement(items, 20, rng).size() == items.size());
}

TEST_CASE("nssm learner batches") {
    Nssm model(small_nssm());
    NssmLearner::Options opt;
    opt.windows_per_batch = 5;
    NssmLearner learner(model, ramp_sources(3, 40), {}, opt);
    CHECK(learner.num_tasks() == 3);
    Rng rng(3);
    const ParamVector w = model.init(rng);
    TaskLosses l = learner.task_losses(1, 0.5, rng);
    CHECK(std::isfinite(l.train.value(w)));
    CHECK(std::isfinite(l.test.value(w)));
    // too short for two windows
    NssmLearner tiny(model, ramp_sources(1, 7), {}, opt);
    CHECK_THROWS_AS(tiny.task_losses(0, 0.5, rng), ContractError);
    // collection is off by default
    CHECK(learner.collect(0, w, 0.0, rng));
    CHECK(learner.pool().collected(0) == 0);
}

TEST_CASE("nssm learner collects closed-loop data") {
    Nssm model(small_nssm());
    NssmLearner::Options opt;
    opt.collect.steps = 30;
    opt.collect.epsilon = 0.3;
    opt.collect.sigma = Eigen::MatrixXd::Constant(1, 1, 0.25);
    opt.collect.reference = [](std::size_t) { return Eigen::Vector2d(0.5, 0.0); };
    opt.collect.initial_state = [](Rng&) { return Eigen::Vector2d(1.0, 0.0); };
    opt.mpc = vdp_mpc();
    NssmLearner learner(model, ramp_sources(2, 20), {vdp(1.0), vdp(0.5)}, opt);
    Rng rng(4);
    const ParamVector w = model.init(rng);
    CHECK(learner.collect(1, w, 0.5, rng));
    CHECK(learner.pool().collected(1) == 1);
    const auto& traj = *learner.pool().task(1).trajectories.back();
    CHECK(traj.size() == 30);
    CHECK(traj.has_reference());
    CHECK_THROWS_AS(NssmLearner(model, ramp_sources(2, 20), {vdp(1.0)}, opt), ContractError);
}

TEST_CASE("mpc policy holds the previous input until the encoder is full") {
    Nssm model(small_nssm());
    Rng rng(5);
    auto ctrl = std::make_shared<MpcController>(model, model.init(rng), vdp_mpc());
    Controller c = mpc_policy(ctrl, [](std::size_t) { return Eigen::Vector2d(0.0, 0.0); }, vdp(1.0));
    Trajectory h = ramp(2);
    h.inputs.back() = v1(0.7);
    CHECK(c(h)(0) == 0.7);
    Trajectory full = ramp(3);
    Eigen::VectorXd u = c(full);
    CHECK(u(0) <= vdp_mpc().u_max(0));
    CHECK(u(0) >= vdp_mpc().u_min(0));
    CHECK_THROWS_AS(mpc_policy(ctrl, {}, vdp(1.0), 0.5), ContractError);
}

TEST_CASE("dqn learner relabels, splits and tracks targets") {
    const PlantSpec s = PlantSpec::van_der_pol();
    DqnConfig cfg = DqnConfig::with_box(s.u_min, s.u_max, 2, 5, 1);
    cfg.hidden = {8};
    QNetwork net(cfg.observation_dim(), 1, cfg.hidden);
    Rng rng(6);
    const ParamVector omega = net.init(rng);
    DqnLearner::Options opt;
    opt.transitions_per_batch = 4;
    opt.goals = {Eigen::Vector2d(1.0, 1.0)};
    DqnLearner learner(net, cfg, ramp_sources(2, 30), {}, omega, opt);
    CHECK(learner.target_params(0) == omega);

    TaskLosses l = learner.task_losses(0, 0.5, rng);
    CHECK(std::isfinite(l.train.value(omega)));

    const ParamVector moved = omega + ParamVector::Constant(omega.size(), 0.01);
    learner.after_inner(0, moved);
    CHECK(learner.target_params(0).isApprox(polyak_update(omega, moved, cfg.polyak), 1e-15));
    CHECK(learner.target_params(1) == omega);

    auto trs = dataset_transitions(ramp_sources(1, 30).tasks[0], 1);
    CHECK(trs.size() == 29);
}

TEST_CASE("dqn policy acts greedily without exploration") {
    const PlantSpec s = PlantSpec::van_der_pol();
    DqnConfig cfg = DqnConfig::with_box(s.u_min, s.u_max, 2, 7, 2);
    cfg.hidden = {6};
    QNetwork net(cfg.observation_dim(), 1, cfg.hidden);
    Rng rng(7);
    const ParamVector w = net.init(rng);
    ReferenceFn ref = [](std::size_t) { return Eigen::Vector2d(0.2, 0.0); };
    Controller c = dqn_policy(net, w, cfg, ref);
    Trajectory h = ramp(4);
    const Eigen::VectorXd obs = observation(stacked_outputs(h, 3, 2), ref(3), h.inputs.back());
    CHECK(c(h) == greedy_action(net, w, obs, cfg.action_grid));
    CHECK_THROWS_AS(dqn_policy(net, w, cfg, ref, 0.1), ContractError);
}

TEST_CASE("dqn learner collects with its schedule") {
    const PlantSpec s = PlantSpec::van_der_pol();
    DqnConfig cfg = DqnConfig::with_box(s.u_min, s.u_max, 2, 5, 1);
    cfg.hidden = {8};
    QNetwork net(cfg.observation_dim(), 1, cfg.hidden);
    Rng rng(8);
    const ParamVector omega = net.init(rng);
    DqnLearner::Options opt;
    opt.collect.steps = 25;
    opt.collect.reference = [](std::size_t) { return Eigen::Vector2d(0.0, 0.0); };
    opt.collect.initial_state = [](Rng&) { return Eigen::Vector2d(1.0, 0.0); };
    DqnLearner learner(net, cfg, ramp_sources(1, 30), {vdp(1.0)}, omega, opt);
    CHECK(learner.collect(0, omega, 1.0, rng));
    CHECK(learner.pool().collected(0) == 1);
    CHECK(learner.pool().task(0).trajectories.back()->size() == 25);
    TaskLosses l = learner.task_losses(0, 0.5, rng);
    CHECK(std::isfinite(l.test.value(omega)));
}
