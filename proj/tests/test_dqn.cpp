#include "doctest.h"

#include "metactl/dqn.hpp"
#include "metactl/errors.hpp"

#include <cmath>
#include <filesystem>

using namespace metactl;

namespace {

Eigen::VectorXd v1(double x) { return Eigen::VectorXd::Constant(1, x); }

Eigen::VectorXd randn(Eigen::Index n, Rng& rng) {
    std::normal_distribution<double> d;
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
    return v;
}

DqnConfig scalar_config(std::vector<Eigen::VectorXd> grid) {
    DqnConfig c = DqnConfig::with_box(v1(-5), v1(5), 1, 3, 1);
    c.action_grid = std::move(grid);
    c.q = Eigen::MatrixXd::Constant(1, 1, 1.0);
    c.r = Eigen::MatrixXd::Constant(1, 1, 0.0);
    return c;
}

// obs = [y - ref, u_prev]; Q depends on u only, as a bump with its minimum at u = 0.3
std::pair<QNetwork, ParamVector> bump_network() {
    QNetwork net(Mlp({3, 2, 1}), 1);
    ParamVector p = ParamVector::Zero(static_cast<Eigen::Index>(net.num_params()));
    const double k = 2.0;
    Eigen::Map<Eigen::MatrixXd> w0(p.data() + net.mlp().weight_offset(0), 2, 3);
    Eigen::Map<Eigen::VectorXd> b0(p.data() + net.mlp().bias_offset(0), 2);
    Eigen::Map<Eigen::MatrixXd> w1(p.data() + net.mlp().weight_offset(1), 1, 2);
    w0(0, 2) = k;
    w0(1, 2) = -k;
    b0 << -k * 0.3 - 1.0, k * 0.3 - 1.0;
    w1 << 1.0, 1.0;
    return {net, p};
}

// linear Q = w . [obs; u] + b
std::pair<QNetwork, ParamVector> linear_network(const Eigen::VectorXd& w, double b) {
    QNetwork net(Mlp({static_cast<std::size_t>(w.size()), 1}), 1);
    ParamVector p(w.size() + 1);
    p << w, b;
    return {net, p};
}

Transition scalar_transition(double y, double ref, double u_prev, double u, double y_next, double ref_next) {
    return {v1(y), v1(u_prev), v1(u), v1(y_next), v1(ref), v1(ref_next)};
}

}  // namespace

TEST_CASE("stage cost") {
    Eigen::MatrixXd q = Eigen::MatrixXd::Constant(1, 1, 1.0);
    Eigen::MatrixXd r = Eigen::MatrixXd::Constant(1, 1, 2.0);
    CHECK(stage_cost(v1(0.7), v1(0.7), v1(1.2), v1(1.2), q, r) == 0.0);
    CHECK(stage_cost(v1(4.0), v1(1.0), v1(2.0), v1(1.0), q, r) == 11.0);
    CHECK(stage_cost(v1(-2.0), v1(1.0), v1(2.0), v1(1.0), q, r) == 11.0);
    CHECK_THROWS_AS(stage_cost(v1(0), Eigen::Vector2d(0, 0), v1(0), v1(0), q, r), ContractError);
}

TEST_CASE("observation subtracts the reference from every stacked output") {
    Eigen::VectorXd y(4);
    y << 1, 2, 3, 4;
    Eigen::VectorXd obs = observation(y, Eigen::Vector2d(1, 1), v1(9));
    Eigen::VectorXd expect(5);
    expect << 0, 1, 2, 3, 9;
    CHECK(obs == expect);
}

TEST_CASE("greedy action") {
    auto [net, p] = bump_network();
    Eigen::VectorXd obs = Eigen::Vector2d(0.4, -0.2);
    std::vector<Eigen::VectorXd> grid{v1(0.0), v1(0.25), v1(0.5)};
    // quadratic oracle on the same grid
    std::size_t oracle = 0;
    for (std::size_t j = 1; j < grid.size(); ++j) {
        if (std::pow(grid[j](0) - 0.3, 2) < std::pow(grid[oracle](0) - 0.3, 2)) oracle = j;
    }
    CHECK(greedy_action(net, p, obs, grid)(0) == 0.25);
    CHECK(greedy_index(net, p, obs, grid) == oracle);

    CHECK(greedy_action(net, p, obs, {v1(-4.0)})(0) == -4.0);

    ParamVector flat = ParamVector::Zero(p.size());
    CHECK(greedy_index(net, flat, obs, grid) == 0);

    // shifting the output bias does not move the argmin
    ParamVector shifted = p;
    shifted(static_cast<Eigen::Index>(net.mlp().bias_offset(1))) += 12.5;
    CHECK(greedy_index(net, shifted, obs, grid) == greedy_index(net, p, obs, grid));
}

TEST_CASE("bellman target") {
    // Q_target = 1 - 0.6 u on the grid {0, 1} -> {1.0, 0.4}
    Eigen::VectorXd w(3);
    w << 0.0, 0.0, -0.6;
    auto [net, target] = linear_network(w, 1.0);
    DqnConfig cfg = scalar_config({v1(0.0), v1(1.0)});
    cfg.discount = 0.9;
    Transition tr = scalar_transition(0.0, 0.0, 0.5, 0.5, 1.0, 0.0 + 0.0);
    tr.y_next = v1(std::sqrt(2.0));  // stage cost (y' - ref')^2 = 2
    CHECK(bellman_target(net, target, tr, cfg) == doctest::Approx(2.36).epsilon(1e-14));

    cfg.discount = 0.0;
    CHECK(bellman_target(net, target, tr, cfg) == doctest::Approx(2.0).epsilon(1e-14));
    cfg.discount = 0.9;
    CHECK(bellman_target(net, ParamVector::Zero(target.size()), tr, cfg) == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("dqn loss values") {
    QNetwork net(Mlp({3, 4, 1}), 1);
    ParamVector p = ParamVector::Zero(static_cast<Eigen::Index>(net.num_params()));
    p(static_cast<Eigen::Index>(net.mlp().bias_offset(1))) = 2.0;
    DqnBatch batch{Eigen::MatrixXd::Zero(3, 1), Eigen::RowVectorXd::Constant(1, 2.36)};
    CHECK(loss_dqn(net, p, batch) == doctest::Approx(0.0648).epsilon(1e-12));
    CHECK(make_dqn_loss(net, batch).value(p) == doctest::Approx(0.0648).epsilon(1e-12));
    CHECK_THROWS_AS(make_dqn_batch(net, p, {}, scalar_config({v1(0)})), ContractError);
}

TEST_CASE("bellman-consistent constant network has zero loss") {
    // every transition costs c = 0.25; Q = c / (1 - discount) is a fixed point
    DqnConfig cfg = scalar_config({v1(-1.0), v1(0.0), v1(1.0)});
    cfg.discount = 0.8;
    QNetwork net(Mlp({3, 5, 1}), 1);
    ParamVector p = ParamVector::Zero(static_cast<Eigen::Index>(net.num_params()));
    p(static_cast<Eigen::Index>(net.mlp().bias_offset(1))) = 0.25 / (1.0 - 0.8);
    std::vector<Transition> trs;
    for (int i = 0; i < 6; ++i) trs.push_back(scalar_transition(0.1 * i, 0.0, 0.3, 0.3, 1.0 + 0.5, 1.0));
    DqnBatch batch = make_dqn_batch(net, p, trs, cfg);
    CHECK(loss_dqn(net, p, batch) <= 1e-28);
}

TEST_CASE("dqn gradient with frozen target matches finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        DqnConfig cfg = DqnConfig::with_box(Eigen::Vector2d(-0.3, -0.3), Eigen::Vector2d(0.3, 0.3), 2, 3, 2);
        cfg.hidden = {6, 6};
        QNetwork net(cfg.observation_dim(), cfg.input_dim(), cfg.hidden);
        ParamVector params = net.init(rng);
        ParamVector target = net.init(rng);
        std::vector<Transition> trs;
        for (int i = 0; i < 8; ++i) {
            trs.push_back({randn(4, rng), 0.1 * randn(2, rng), 0.1 * randn(2, rng), randn(4, rng), randn(2, rng),
                           randn(2, rng)});
        }
        DqnBatch batch = make_dqn_batch(net, target, trs, cfg);
        ScalarLossFn f = make_dqn_loss(net, batch);
        GradCheckReport r = check_grad_fd(f, params, 1e-4);
        CHECK_MESSAGE(r.pass, "max rel error " << r.max_rel_error);
        CHECK(f.value(params) >= 0.0);
        CHECK(f.value(params) == doctest::Approx(loss_dqn(net, params, batch)).epsilon(1e-12));
        // targets frozen: they do not depend on params
        DqnBatch again = make_dqn_batch(net, target, trs, cfg);
        CHECK(again.targets == batch.targets);
    }
}

TEST_CASE("polyak update") {
    CHECK(polyak_update(v1(2.0), v1(0.0), 0.5)(0) == 1.0);
    ParamVector w = ParamVector::LinSpaced(4, -1, 2);
    CHECK(polyak_update(w, w, 0.7) == w);
    CHECK_THROWS_AS(polyak_update(w, v1(0), 0.7), ContractError);
    CHECK_THROWS_AS(polyak_update(w, w, 1.0), ContractError);

    const double beta = 0.8;
    ParamVector target = v1(5.0);
    const ParamVector omega = v1(1.0);
    for (int k = 1; k <= 30; ++k) {
        target = polyak_update(target, omega, beta);
        CHECK(target(0) - 1.0 == doctest::Approx(4.0 * std::pow(beta, k)).epsilon(1e-12));
    }
}

TEST_CASE("epsilon greedy") {
    auto [net, p] = bump_network();
    DqnConfig cfg = scalar_config({v1(0.0), v1(0.25), v1(0.5)});
    Eigen::VectorXd obs = Eigen::Vector2d(0.0, 0.0);
    Rng rng(1);
    for (int i = 0; i < 100; ++i) CHECK(epsilon_greedy(net, p, obs, cfg, 0.0, rng)(0) == 0.25);

    const double sigma = std::sqrt(cfg.sigma(0, 0));
    CHECK(sigma == 2.5);
    double mean = 0.0;
    const int n = 10000;
    Rng draws(2);
    for (int i = 0; i < n; ++i) mean += epsilon_greedy(net, p, obs, cfg, 1.0, draws)(0) / n;
    CHECK(std::abs(mean) <= 3.0 * sigma / 100.0);

    Rng a(3), b(3);
    for (int i = 0; i < 50; ++i) CHECK(epsilon_greedy(net, p, obs, cfg, 0.5, a) == epsilon_greedy(net, p, obs, cfg, 0.5, b));
}

TEST_CASE("epsilon schedule decays linearly") {
    DqnConfig cfg = scalar_config({v1(0)});
    CHECK(epsilon_schedule(cfg, 0, 11) == doctest::Approx(0.3));
    CHECK(epsilon_schedule(cfg, 10, 11) == doctest::Approx(0.02));
    CHECK(epsilon_schedule(cfg, 5, 11) == doctest::Approx(0.16));
}

TEST_CASE("uniform grids") {
    auto g = DqnConfig::uniform_grid(v1(-5), v1(5), 21);
    CHECK(g.size() == 21);
    CHECK(g.front()(0) == -5.0);
    CHECK(g[10](0) == 0.0);
    CHECK(g.back()(0) == 5.0);
    auto g2 = DqnConfig::uniform_grid(Eigen::Vector2d(-0.3, -0.3), Eigen::Vector2d(0.3, 0.3), 9);
    CHECK(g2.size() == 81);
    CHECK(g2[1].isApprox(Eigen::Vector2d(-0.225, -0.3), 1e-14));
}

TEST_CASE("q-network checkpoint round-trip") {
    Rng rng(4);
    QNetwork net(5, 2, {8, 8});
    ParamVector p = net.init(rng);
    auto dir = std::filesystem::temp_directory_path() / "metactl_test_qnet";
    std::filesystem::remove_all(dir);
    save_qnet(dir, net, p);
    auto [back, bp] = load_qnet(dir);
    CHECK(bp == p);
    CHECK(back.observation_dim() == 5);
    CHECK(back.action_dim() == 2);
    std::filesystem::remove_all(dir);
}

TEST_CASE("input scale acts as a column scaling of the first layer") {
    Eigen::VectorXd w(4);
    w << 1.0, -2.0, 0.5, 3.0;
    auto [net, p] = linear_network(w, 0.25);
    Eigen::VectorXd s(4);
    s << 10.0, 10.0, 2.0, 2.0;
    QNetwork scaled = net;
    scaled.set_input_scale(s);
    auto [folded, fp] = linear_network(w.cwiseProduct(s), 0.25);
    const Eigen::Vector3d obs(0.1, -0.3, 0.2);
    const Eigen::VectorXd u = v1(-0.7);
    CHECK(scaled.value(p, obs, u) == doctest::Approx(folded.value(fp, obs, u)).epsilon(1e-14));
    CHECK(net.value(p, obs, u) == doctest::Approx(w.dot(Eigen::Vector4d(0.1, -0.3, 0.2, -0.7)) + 0.25).epsilon(1e-14));

    CHECK_THROWS_AS(scaled.set_input_scale(Eigen::VectorXd::Ones(3)), ContractError);
    CHECK_THROWS_AS(scaled.set_input_scale(Eigen::VectorXd::Zero(4)), ContractError);

    // the scale travels with the checkpoint
    auto dir = std::filesystem::temp_directory_path() / "metactl_test_qnet_scale";
    std::filesystem::remove_all(dir);
    save_qnet(dir, scaled, p);
    auto [back, bp] = load_qnet(dir);
    CHECK(back.input_scale() == s);
    CHECK(back.value(bp, obs, u) == scaled.value(p, obs, u));
    std::filesystem::remove_all(dir);
}
