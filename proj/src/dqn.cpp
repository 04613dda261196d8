#include "metactl/dqn.hpp"

#include "metactl/errors.hpp"

#include <Eigen/Cholesky>

#include <memory>

namespace metactl {

using nlohmann::json;

void DqnConfig::validate() const {
    const auto m = q.rows();
    const auto p = r.rows();
    if (!(discount >= 0.0 && discount < 1.0)) throw ContractError("DQN discount must lie in [0, 1)");
    if (!(polyak >= 0.5 && polyak < 1.0)) throw ContractError("Polyak factor must lie in [0.5, 1)");
    if (m == 0 || q.cols() != m || p == 0 || r.cols() != p) throw ContractError("DQN stage weights must be square");
    if (stack_len == 0) throw ContractError("DQN stack length must be at least 1");
    if (u_min.size() != p || u_max.size() != p) throw ContractError("DQN input box has the wrong size");
    if (sigma.rows() != p || sigma.cols() != p) throw ContractError("exploration covariance has the wrong size");
    if (action_grid.empty()) throw ContractError("DQN action grid is empty");
    for (const auto& a : action_grid) {
        if (a.size() != p || (a.array() < u_min.array() - 1e-12).any() || (a.array() > u_max.array() + 1e-12).any()) {
            throw ContractError("DQN action grid member outside the input box");
        }
    }
    for (double e : {epsilon_start, epsilon_end, epsilon_adapt}) {
        if (!(e >= 0.0 && e <= 1.0)) throw ContractError("exploration probabilities must lie in [0, 1]");
    }
}

std::vector<Eigen::VectorXd> DqnConfig::uniform_grid(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
                                                      std::size_t points_per_axis) {
    if (points_per_axis == 0 || lo.size() != hi.size() || lo.size() == 0) {
        throw ContractError("uniform_grid: bad box or point count");
    }
    const auto p = lo.size();
    std::size_t total = 1;
    for (Eigen::Index i = 0; i < p; ++i) total *= points_per_axis;
    std::vector<Eigen::VectorXd> grid;
    grid.reserve(total);
    for (std::size_t flat = 0; flat < total; ++flat) {
        Eigen::VectorXd u(p);
        std::size_t rest = flat;
        for (Eigen::Index i = 0; i < p; ++i) {
            const std::size_t k = rest % points_per_axis;
            rest /= points_per_axis;
            u(i) = points_per_axis == 1 ? 0.5 * (lo(i) + hi(i))
                                        : lo(i) + (hi(i) - lo(i)) * static_cast<double>(k) /
                                                      static_cast<double>(points_per_axis - 1);
        }
        grid.push_back(std::move(u));
    }
    return grid;
}

DqnConfig DqnConfig::with_box(const Eigen::VectorXd& u_min, const Eigen::VectorXd& u_max, std::size_t output_dim,
                              std::size_t points_per_axis, std::size_t stack_len) {
    DqnConfig c;
    c.u_min = u_min;
    c.u_max = u_max;
    c.q = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(output_dim), static_cast<Eigen::Index>(output_dim));
    c.r = 0.01 * Eigen::MatrixXd::Identity(u_min.size(), u_min.size());
    c.stack_len = stack_len;
    c.action_grid = uniform_grid(u_min, u_max, points_per_axis);
    c.sigma = (0.5 * u_max).array().square().matrix().asDiagonal();
    return c;
}

double stage_cost(const Eigen::VectorXd& y, const Eigen::VectorXd& ybar, const Eigen::VectorXd& u,
                  const Eigen::VectorXd& u_prev, const Eigen::MatrixXd& q, const Eigen::MatrixXd& r) {
    if (y.size() != ybar.size() || y.size() != q.rows() || u.size() != u_prev.size() || u.size() != r.rows()) {
        throw ContractError("stage_cost: dimension mismatch");
    }
    const Eigen::VectorXd e = y - ybar;
    const Eigen::VectorXd du = u - u_prev;
    return e.dot(q * e) + du.dot(r * du);
}

Eigen::VectorXd observation(const Eigen::VectorXd& y_stack, const Eigen::VectorXd& ref, const Eigen::VectorXd& u_prev) {
    const auto m = ref.size();
    if (m == 0 || y_stack.size() % m != 0) {
        throw ContractError("observation: output stack is not a multiple of the reference size");
    }
    Eigen::VectorXd obs(y_stack.size() + u_prev.size());
    for (Eigen::Index k = 0; k < y_stack.size() / m; ++k) obs.segment(k * m, m) = y_stack.segment(k * m, m) - ref;
    obs.tail(u_prev.size()) = u_prev;
    return obs;
}

QNetwork::QNetwork(std::size_t observation_dim, std::size_t action_dim, std::vector<std::size_t> hidden)
    : action_dim_(action_dim) {
    std::vector<std::size_t> sizes{observation_dim + action_dim};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(1);
    net_ = Mlp(sizes);
    input_scale_ = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(observation_dim + action_dim));
}

QNetwork::QNetwork(Mlp net, std::size_t action_dim) : net_(std::move(net)), action_dim_(action_dim) {
    if (net_.output_dim() != 1 || net_.input_dim() <= action_dim_) {
        throw ContractError("QNetwork: network must map (obs, u) to a scalar");
    }
    input_scale_ = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(net_.input_dim()));
}

void QNetwork::set_input_scale(Eigen::VectorXd scale) {
    if (static_cast<std::size_t>(scale.size()) != net_.input_dim() || !(scale.array() > 0.0).all() ||
        !scale.allFinite()) {
        throw ContractError("QNetwork: input scale needs one positive entry per network input");
    }
    input_scale_ = std::move(scale);
}

Eigen::MatrixXd QNetwork::network_input(const Eigen::MatrixXd& x) const { return input_scale_.asDiagonal() * x; }

ParamVector QNetwork::init(Rng& rng) const {
    ParamVector p = ParamVector::Zero(static_cast<Eigen::Index>(num_params()));
    net_.init(p, rng);
    return p;
}

double QNetwork::value(const ParamVector& params, const Eigen::VectorXd& obs, const Eigen::VectorXd& u) const {
    Eigen::VectorXd x(obs.size() + u.size());
    x << obs, u;
    return net_.eval(params, network_input(x))(0, 0);
}

Eigen::RowVectorXd QNetwork::grid_values(const ParamVector& params, const Eigen::VectorXd& obs,
                                         const std::vector<Eigen::VectorXd>& grid) const {
    const auto g = static_cast<Eigen::Index>(grid.size());
    const auto od = obs.size();
    const auto pd = static_cast<Eigen::Index>(action_dim_);
    Eigen::MatrixXd x(od + pd, g);
    for (Eigen::Index j = 0; j < g; ++j) {
        x.col(j).head(od) = obs;
        x.col(j).tail(pd) = grid[static_cast<std::size_t>(j)];
    }
    return net_.eval(params, network_input(x));
}

Eigen::RowVectorXd QNetwork::grid_minimum(const ParamVector& params, const Eigen::MatrixXd& observations,
                                          const std::vector<Eigen::VectorXd>& grid) const {
    const auto g = static_cast<Eigen::Index>(grid.size());
    const auto n = observations.cols();
    const auto od = observations.rows();
    const auto pd = static_cast<Eigen::Index>(action_dim_);
    Eigen::MatrixXd x(od + pd, n * g);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < g; ++j) {
            x.col(i * g + j).head(od) = observations.col(i);
            x.col(i * g + j).tail(pd) = grid[static_cast<std::size_t>(j)];
        }
    }
    const Eigen::MatrixXd q = net_.eval(params, network_input(x));
    Eigen::RowVectorXd out(n);
    for (Eigen::Index i = 0; i < n; ++i) out(i) = q.block(0, i * g, 1, g).minCoeff();
    return out;
}

json QNetwork::header() const {
    return {{"kind", "qnet"},
            {"sizes", net_.sizes()},
            {"action_dim", action_dim_},
            {"input_scale", std::vector<double>(input_scale_.data(), input_scale_.data() + input_scale_.size())},
            {"shapes", [&] {
                 std::vector<ShapeEntry> e;
                 for (std::size_t l = 0; l < net_.num_layers(); ++l) {
                     e.push_back({"w" + std::to_string(l), net_.weight_offset(l), net_.sizes()[l + 1], net_.sizes()[l]});
                     e.push_back({"b" + std::to_string(l), net_.bias_offset(l), net_.sizes()[l + 1], 1});
                 }
                 return shape_map_json(e);
             }()}};
}

QNetwork QNetwork::from_header(const json& h) {
    if (h.value("kind", std::string()) != "qnet") {
        throw DatasetError(DatasetError::Kind::Malformed, "checkpoint is not a Q-network");
    }
    QNetwork net(Mlp(h.at("sizes").get<std::vector<std::size_t>>()), h.at("action_dim").get<std::size_t>());
    if (h.contains("input_scale")) {
        const auto v = h.at("input_scale").get<std::vector<double>>();
        net.set_input_scale(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    return net;
}

std::size_t greedy_index(const QNetwork& net, const ParamVector& params, const Eigen::VectorXd& obs,
                         const std::vector<Eigen::VectorXd>& grid) {
    if (grid.empty()) throw ContractError("greedy_action: empty grid");
    const Eigen::RowVectorXd q = net.grid_values(params, obs, grid);
    std::size_t best = 0;
    for (Eigen::Index j = 1; j < q.size(); ++j) {
        if (q(j) < q(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(j);
    }
    return best;
}

Eigen::VectorXd greedy_action(const QNetwork& net, const ParamVector& params, const Eigen::VectorXd& obs,
                              const std::vector<Eigen::VectorXd>& grid) {
    return grid[greedy_index(net, params, obs, grid)];
}

namespace {

double transition_cost(const Transition& tr, const DqnConfig& config) {
    const auto m = static_cast<Eigen::Index>(config.output_dim());
    return stage_cost(tr.y_next.head(m), tr.ref_next, tr.u, tr.u_prev, config.q, config.r);
}

}  // namespace

double bellman_target(const QNetwork& net, const ParamVector& target_params, const Transition& tr,
                      const DqnConfig& config) {
    const double c = transition_cost(tr, config);
    if (config.discount == 0.0) return c;
    const Eigen::VectorXd next = observation(tr.y_next, tr.ref_next, tr.u);
    return c + config.discount * net.grid_minimum(target_params, next, config.action_grid)(0);
}

DqnBatch make_dqn_batch(const QNetwork& net, const ParamVector& target_params, const std::vector<Transition>& batch,
                        const DqnConfig& config) {
    if (batch.empty()) throw ContractError("loss_dqn: empty batch");
    const auto n = static_cast<Eigen::Index>(batch.size());
    const auto od = static_cast<Eigen::Index>(net.observation_dim());
    const auto pd = static_cast<Eigen::Index>(net.action_dim());
    DqnBatch out;
    out.inputs.resize(od + pd, n);
    Eigen::MatrixXd next(od, n);
    Eigen::RowVectorXd cost(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Transition& tr = batch[static_cast<std::size_t>(i)];
        const Eigen::VectorXd obs = observation(tr.y, tr.ref, tr.u_prev);
        if (obs.size() != od || tr.u.size() != pd) throw ContractError("loss_dqn: transition does not fit the network");
        out.inputs.col(i) << obs, tr.u;
        next.col(i) = observation(tr.y_next, tr.ref_next, tr.u);
        cost(i) = transition_cost(tr, config);
    }
    out.inputs = net.network_input(out.inputs);
    out.targets = cost;
    if (config.discount != 0.0) out.targets += config.discount * net.grid_minimum(target_params, next, config.action_grid);
    return out;
}

double loss_dqn(const QNetwork& net, const ParamVector& params, const DqnBatch& batch) {
    if (batch.size() == 0) throw ContractError("loss_dqn: empty batch");
    return 0.5 * (batch.targets - net.mlp().eval(params, batch.inputs)).squaredNorm();
}

ScalarLossFn make_dqn_loss(const QNetwork& net, DqnBatch batch) {
    if (batch.size() == 0) throw ContractError("loss_dqn: empty batch");
    auto data = std::make_shared<const DqnBatch>(std::move(batch));
    auto mlp = std::make_shared<const Mlp>(net.mlp());
    return ScalarLossFn([data, mlp](auto& tape, ad::Var psi) {
        ad::Var q = mlp->record(tape, psi, tape.constant(data->inputs));
        ad::Var r = tape.sub(tape.constant(data->targets), q);
        return tape.scale(tape.squared_norm(r), 0.5);
    });
}

ParamVector polyak_update(const ParamVector& target, const ParamVector& params, double beta) {
    if (target.size() != params.size()) throw ContractError("polyak_update: length mismatch");
    if (!(beta >= 0.5 && beta < 1.0)) throw ContractError("polyak_update: beta must lie in [0.5, 1)");
    return beta * target + (1.0 - beta) * params;
}

Eigen::VectorXd exploration_draw(const DqnConfig& config, Rng& rng) {
    std::normal_distribution<double> n01;
    Eigen::VectorXd z(config.sigma.rows());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = n01(rng);
    const Eigen::MatrixXd l = Eigen::LLT<Eigen::MatrixXd>(config.sigma).matrixL();
    return (l * z).cwiseMax(config.u_min).cwiseMin(config.u_max);
}

Eigen::VectorXd epsilon_greedy(const QNetwork& net, const ParamVector& params, const Eigen::VectorXd& obs,
                               const DqnConfig& config, double epsilon, Rng& rng, bool* explored) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ContractError("epsilon_greedy: epsilon must lie in [0, 1]");
    // always consume the coin so the stream does not depend on epsilon's value
    const bool explore = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < epsilon;
    if (explored) *explored = explore;
    if (explore) return exploration_draw(config, rng);
    return greedy_action(net, params, obs, config.action_grid);
}

double epsilon_schedule(const DqnConfig& config, std::size_t iteration, std::size_t total) {
    if (total <= 1) return config.epsilon_end;
    const double frac = std::min(1.0, static_cast<double>(iteration) / static_cast<double>(total - 1));
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start);
}

void save_qnet(const std::filesystem::path& dir, const QNetwork& net, const ParamVector& params) {
    if (static_cast<std::size_t>(params.size()) != net.num_params()) {
        throw ContractError("save_qnet: parameter vector does not match the network");
    }
    save_checkpoint(dir, net.header(), params);
}

std::pair<QNetwork, ParamVector> load_qnet(const std::filesystem::path& dir) {
    Checkpoint ck = load_checkpoint(dir);
    QNetwork net = QNetwork::from_header(ck.header);
    if (static_cast<std::size_t>(ck.params.size()) != net.num_params()) {
        throw DatasetError(DatasetError::Kind::Malformed, "Q-network checkpoint size does not match its shape");
    }
    return {std::move(net), std::move(ck.params)};
}

}  // namespace metactl
