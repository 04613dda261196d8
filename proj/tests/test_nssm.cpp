#include "doctest.h"

#include "metactl/errors.hpp"
#include "metactl/nssm.hpp"

#include <Eigen/Eigenvalues>

#include <filesystem>

using namespace metactl;

namespace {

Eigen::VectorXd randn(Eigen::Index n, Rng& rng) {
    std::normal_distribution<double> d;
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
    return v;
}

Trajectory random_trajectory(std::size_t length, std::size_t p, std::size_t m, Rng& rng) {
    Trajectory t;
    t.dt = 0.1;
    for (std::size_t i = 0; i < length; ++i) {
        t.push(randn(static_cast<Eigen::Index>(p), rng), randn(static_cast<Eigen::Index>(m), rng));
    }
    return t;
}

TaskData single_task(Trajectory t) {
    TaskData task;
    task.id = "t";
    task.dt = t.dt;
    task.trajectories.push_back(std::make_shared<const Trajectory>(std::move(t)));
    return task;
}

void set_block(ParamVector& params, const Nssm& model, const std::string& name, const Eigen::MatrixXd& value) {
    for (const auto& e : model.shape_map()) {
        if (e.name == name) {
            REQUIRE(static_cast<Eigen::Index>(e.rows) == value.rows());
            REQUIRE(static_cast<Eigen::Index>(e.cols) == value.cols());
            Eigen::Map<Eigen::MatrixXd>(params.data() + e.offset, value.rows(), value.cols()) = value;
            return;
        }
    }
    FAIL("no block " << name);
}

}  // namespace

TEST_CASE("zero weights encode to zero") {
    Nssm model;
    ParamVector params = ParamVector::Zero(static_cast<Eigen::Index>(model.num_params()));
    Rng rng(1);
    Eigen::VectorXd hist = randn(static_cast<Eigen::Index>(model.encoder_input_dim()), rng);
    CHECK(model.encode(params, hist).isZero(0.0));
}

TEST_CASE("encoding is reproducible and order sensitive") {
    Nssm model;
    Rng rng(2);
    ParamVector params = model.init(rng);
    Trajectory t = random_trajectory(20, 1, 2, rng);
    Eigen::VectorXd hist = model.history_vector(t, 10);
    CHECK(model.encode(params, hist) == model.encode(params, hist));

    Trajectory reversed = t;
    std::reverse(reversed.inputs.begin() + 3, reversed.inputs.begin() + 11);
    std::reverse(reversed.outputs.begin() + 3, reversed.outputs.begin() + 11);
    Eigen::VectorXd rev = model.history_vector(reversed, 10);
    CHECK((model.encode(params, hist) - model.encode(params, rev)).norm() > 1e-6);

    CHECK_THROWS_AS(model.encode(params, hist.head(5)), ContractError);
    CHECK_THROWS_AS(model.history_vector(t, 6), ContractError);
}

TEST_CASE("history vector is oldest first with [u; y] rows") {
    NssmConfig c;
    c.history = 2;
    c.latent = 2;
    Nssm model(c);
    Trajectory t;
    t.push(Eigen::VectorXd::Constant(1, 1.0), Eigen::Vector2d(2, 3));
    t.push(Eigen::VectorXd::Constant(1, 4.0), Eigen::Vector2d(5, 6));
    t.push(Eigen::VectorXd::Constant(1, 7.0), Eigen::Vector2d(8, 9));
    Eigen::VectorXd expect(6);
    expect << 4, 5, 6, 7, 8, 9;
    CHECK(model.history_vector(t, 2) == expect);
}

TEST_CASE("zero dynamics predict zero") {
    Nssm model;
    Rng rng(3);
    ParamVector params = model.init(rng);
    set_block(params, model, "A_z", Eigen::MatrixXd::Zero(8, 8));
    set_block(params, model, "B_z", Eigen::MatrixXd::Zero(8, 1));
    std::vector<Eigen::VectorXd> us;
    for (int k = 0; k < 16; ++k) us.push_back(randn(1, rng));
    for (const auto& y : model.predict_rollout(params, randn(24, rng), us)) CHECK(y.isZero(0.0));
}

TEST_CASE("scalar hand recursion") {
    NssmConfig c;
    c.history = 1;
    c.latent = 1;
    c.horizon = 2;
    c.hidden = {};
    c.input_dim = 1;
    c.output_dim = 1;
    Nssm model(c);
    ParamVector params = ParamVector::Zero(static_cast<Eigen::Index>(model.num_params()));
    set_block(params, model, "A_z", Eigen::MatrixXd::Constant(1, 1, 0.5));
    set_block(params, model, "B_z", Eigen::MatrixXd::Constant(1, 1, 1.0));
    set_block(params, model, "C_z", Eigen::MatrixXd::Constant(1, 1, 1.0));
    auto y = model.rollout(params, Eigen::VectorXd::Zero(1), {Eigen::VectorXd::Constant(1, 1.0), Eigen::VectorXd::Zero(1)});
    CHECK(y[0](0) == 1.0);
    CHECK(y[1](0) == 0.5);
}

TEST_CASE("rollout reproduces a linear plant when the encoder recovers its state") {
    // x_{k+1} = A x + B u, y = x; a linear encoder that copies the last output
    Eigen::Matrix2d a;
    a << 0.9, 0.2, -0.1, 0.8;
    Eigen::Vector2d b(0.0, 0.5);
    NssmConfig c;
    c.history = 3;
    c.latent = 2;
    c.horizon = 10;
    c.hidden = {};
    Nssm model(c);
    ParamVector params = ParamVector::Zero(static_cast<Eigen::Index>(model.num_params()));
    Eigen::MatrixXd enc = Eigen::MatrixXd::Zero(2, 9);
    enc.block(0, 7, 2, 2) = Eigen::Matrix2d::Identity();
    set_block(params, model, "enc_w0", enc);
    set_block(params, model, "A_z", a);
    set_block(params, model, "B_z", b);
    set_block(params, model, "C_z", Eigen::Matrix2d::Identity());

    Rng rng(4);
    Trajectory t;
    Eigen::VectorXd x = randn(2, rng);
    t.push(Eigen::VectorXd::Zero(1), x);
    for (int k = 0; k < 20; ++k) {
        Eigen::VectorXd u = randn(1, rng);
        x = a * x + b * u;
        t.push(u, x);
    }
    std::vector<Eigen::VectorXd> us(t.inputs.begin() + 6, t.inputs.begin() + 16);
    auto pred = model.predict_rollout(params, model.history_vector(t, 5), us);
    for (std::size_t k = 0; k < pred.size(); ++k) CHECK((pred[k] - t.outputs[6 + k]).norm() <= 1e-12);

    TaskData task = single_task(t);
    CHECK(model.loss(params, model.make_batch(task, make_windows(task, 3, 10))) <= 1e-24);
}

TEST_CASE("loss of a zero predictor") {
    NssmConfig c;
    c.history = 1;
    c.latent = 1;
    c.horizon = 2;
    c.hidden = {};
    c.output_dim = 1;
    Nssm model(c);
    ParamVector params = ParamVector::Zero(static_cast<Eigen::Index>(model.num_params()));
    Trajectory t;
    t.push(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, 0.3));
    t.push(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, 1.0));
    t.push(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, 1.0));
    TaskData task = single_task(t);
    WindowBatch batch = model.make_batch(task, make_windows(task, 1, 2));
    REQUIRE(batch.size() == 1);
    CHECK(model.loss(params, batch) == 1.0);
    CHECK(make_ssm_loss(model, batch).value(params) == 1.0);

    WindowBatch doubled = batch;
    for (auto& y : doubled.future_y) y *= 2.0;
    CHECK(model.loss(params, doubled) == 4.0 * model.loss(params, batch));
    CHECK_THROWS_AS(model.make_batch(task, {}), ContractError);
}

TEST_CASE("loss gradient passes finite differences on small random models") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(100 + seed);
        std::uniform_int_distribution<std::size_t> small(1, 4);
        NssmConfig c;
        c.history = small(rng);
        c.output_dim = 1 + small(rng) % 2;
        c.input_dim = 1 + small(rng) % 2;
        c.latent = std::min(small(rng), c.history * c.output_dim);
        c.horizon = small(rng);
        c.hidden = {5};
        Nssm model(c);
        ParamVector params = model.init(rng);
        params += 0.05 * randn(params.size(), rng);
        TaskData task = single_task(random_trajectory(c.history + c.horizon + 4, c.input_dim, c.output_dim, rng));
        ScalarLossFn f = make_ssm_loss(model, model.make_batch(task, make_windows(task, c.history, c.horizon)));
        GradCheckReport r = check_grad_fd(f, params, 1e-4);
        CHECK_MESSAGE(r.pass, "seed " << seed << " max rel error " << r.max_rel_error);
        CHECK(f.value(params) == doctest::Approx(model.loss(params, model.make_batch(task, make_windows(task, c.history, c.horizon)))).epsilon(1e-12));
        CHECK(f.value(params) >= 0.0);
    }
}

TEST_CASE("rollout is affine in the future inputs") {
    Nssm model;
    Rng rng(5);
    ParamVector params = model.init(rng);
    Eigen::VectorXd z = randn(8, rng);
    std::vector<Eigen::VectorXd> u, v, mix, zero;
    const double alpha = 0.7, beta = -1.3;
    for (int k = 0; k < 16; ++k) {
        u.push_back(randn(1, rng));
        v.push_back(randn(1, rng));
        mix.push_back(alpha * u.back() + beta * v.back());
        zero.push_back(Eigen::VectorXd::Zero(1));
    }
    auto ru = model.rollout(params, z, u);
    auto rv = model.rollout(params, z, v);
    auto rm = model.rollout(params, z, mix);
    auto r0 = model.rollout(params, z, zero);
    for (int k = 0; k < 16; ++k) {
        Eigen::VectorXd expect = alpha * ru[k] + beta * rv[k] - (alpha + beta - 1.0) * r0[k];
        CHECK((rm[k] - expect).norm() <= 1e-10);
    }
}

TEST_CASE("compact model blocks") {
    Eigen::MatrixXd id = Eigen::MatrixXd::Identity(3, 3);
    CompactModel cm = compact_model(id, Eigen::MatrixXd::Ones(3, 1), id);
    Eigen::MatrixXd expect = Eigen::MatrixXd::Zero(6, 6);
    expect.topLeftCorner(3, 3) = id;
    expect.bottomLeftCorner(3, 3) = id;
    CHECK(cm.a == expect);

    CompactModel s = compact_model(Eigen::MatrixXd::Constant(1, 1, 0.4), Eigen::MatrixXd::Constant(1, 1, 2.0),
                                   Eigen::MatrixXd::Constant(1, 1, -3.0));
    Eigen::Matrix2d sa;
    sa << 0.4, 0, -1.2, 0;
    CHECK(s.a.isApprox(sa));
    CHECK(s.b.isApprox(Eigen::Vector2d(2.0, -6.0)));

    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        Eigen::MatrixXd az(4, 4);
        for (Eigen::Index i = 0; i < 16; ++i) az.data()[i] = randn(1, rng)(0);
        Eigen::MatrixXd cz(2, 4);
        for (Eigen::Index i = 0; i < 8; ++i) cz.data()[i] = randn(1, rng)(0);
        CompactModel big = compact_model(az, Eigen::MatrixXd::Ones(4, 1), cz);
        const double rho_z = az.eigenvalues().cwiseAbs().maxCoeff();
        const double rho = big.a.eigenvalues().cwiseAbs().maxCoeff();
        CHECK(rho == doctest::Approx(rho_z).epsilon(1e-9));
    }
}

TEST_CASE("checkpoint round-trip") {
    Nssm model;
    Rng rng(8);
    ParamVector params = model.init(rng);
    auto dir = std::filesystem::temp_directory_path() / "metactl_test_nssm_ckpt";
    std::filesystem::remove_all(dir);
    save_nssm(dir, model, params);
    auto [back, back_params] = load_nssm(dir);
    CHECK(back.num_params() == model.num_params());
    CHECK(back_params == params);
    std::filesystem::remove_all(dir);
}

TEST_CASE("latent size is bounded by the history") {
    NssmConfig c;
    c.history = 2;
    c.latent = 5;
    c.output_dim = 2;
    CHECK_THROWS_AS(Nssm{c}, ContractError);
}
