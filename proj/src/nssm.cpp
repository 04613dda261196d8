#include "metactl/nssm.hpp"

#include "metactl/errors.hpp"

#include <memory>

namespace metactl {

using nlohmann::json;

namespace {

std::vector<std::size_t> encoder_sizes(const NssmConfig& c) {
    std::vector<std::size_t> s{c.history * (c.input_dim + c.output_dim)};
    s.insert(s.end(), c.hidden.begin(), c.hidden.end());
    s.push_back(c.latent);
    return s;
}

Eigen::MatrixXd block_of(const ParamVector& params, std::size_t offset, std::size_t rows, std::size_t cols) {
    return Eigen::Map<const Eigen::MatrixXd>(params.data() + offset, static_cast<Eigen::Index>(rows),
                                             static_cast<Eigen::Index>(cols));
}

}  // namespace

void NssmConfig::validate() const {
    if (history == 0 || horizon == 0 || latent == 0 || input_dim == 0 || output_dim == 0) {
        throw ContractError("NSSM history, horizon, latent and signal sizes must be positive");
    }
    if (latent > output_dim * history) {
        throw ContractError("NSSM latent size " + std::to_string(latent) + " exceeds output_dim * history = " +
                            std::to_string(output_dim * history));
    }
}

Nssm::Nssm(NssmConfig config) : config_(std::move(config)) {
    config_.validate();
    encoder_ = Mlp(encoder_sizes(config_), 0);
    a_offset_ = encoder_.num_params();
    b_offset_ = a_offset_ + config_.latent * config_.latent;
    c_offset_ = b_offset_ + config_.latent * config_.input_dim;
}

std::vector<ShapeEntry> Nssm::shape_map() const {
    std::vector<ShapeEntry> out;
    for (std::size_t l = 0; l < encoder_.num_layers(); ++l) {
        const auto& s = encoder_.sizes();
        out.push_back({"enc_w" + std::to_string(l), encoder_.weight_offset(l), s[l + 1], s[l]});
        out.push_back({"enc_b" + std::to_string(l), encoder_.bias_offset(l), s[l + 1], 1});
    }
    out.push_back({"A_z", a_offset_, config_.latent, config_.latent});
    out.push_back({"B_z", b_offset_, config_.latent, config_.input_dim});
    out.push_back({"C_z", c_offset_, config_.output_dim, config_.latent});
    return out;
}

ParamVector Nssm::init(Rng& rng) const {
    ParamVector params = ParamVector::Zero(static_cast<Eigen::Index>(num_params()));
    encoder_.init(params, rng);
    const auto nz = static_cast<Eigen::Index>(config_.latent);
    Eigen::Map<Eigen::MatrixXd>(params.data() + a_offset_, nz, nz) = 0.9 * Eigen::MatrixXd::Identity(nz, nz);
    std::uniform_real_distribution<double> small(-0.1, 0.1);
    for (std::size_t i = b_offset_; i < num_params(); ++i) {
        params(static_cast<Eigen::Index>(i)) = small(rng);
    }
    return params;
}

Eigen::MatrixXd Nssm::a_z(const ParamVector& params) const {
    return block_of(params, a_offset_, config_.latent, config_.latent);
}
Eigen::MatrixXd Nssm::b_z(const ParamVector& params) const {
    return block_of(params, b_offset_, config_.latent, config_.input_dim);
}
Eigen::MatrixXd Nssm::c_z(const ParamVector& params) const {
    return block_of(params, c_offset_, config_.output_dim, config_.latent);
}

Eigen::VectorXd Nssm::history_vector(const Trajectory& traj, std::size_t last_row) const {
    const std::size_t h = config_.history;
    if (last_row >= traj.size() || last_row + 1 < h) {
        throw ContractError("history_vector: need " + std::to_string(h) + " rows ending at row " +
                            std::to_string(last_row));
    }
    const auto p = static_cast<Eigen::Index>(config_.input_dim);
    const auto m = static_cast<Eigen::Index>(config_.output_dim);
    if (static_cast<Eigen::Index>(traj.input_dim()) != p || static_cast<Eigen::Index>(traj.output_dim()) != m) {
        throw ContractError("history_vector: trajectory signal sizes do not match the model");
    }
    Eigen::VectorXd v(static_cast<Eigen::Index>(encoder_input_dim()));
    Eigen::Index cursor = 0;
    for (std::size_t r = last_row + 1 - h; r <= last_row; ++r) {
        v.segment(cursor, p) = traj.inputs[r];
        v.segment(cursor + p, m) = traj.outputs[r];
        cursor += p + m;
    }
    return v;
}

Eigen::VectorXd Nssm::encode(const ParamVector& params, const Eigen::VectorXd& history) const {
    if (static_cast<std::size_t>(history.size()) != encoder_input_dim()) {
        throw ContractError("encode: history has " + std::to_string(history.size()) + " entries, expected " +
                            std::to_string(encoder_input_dim()));
    }
    if (static_cast<std::size_t>(params.size()) != num_params()) {
        throw ContractError("encode: parameter vector has the wrong length");
    }
    return encoder_.eval(params, history);
}

std::vector<Eigen::VectorXd> Nssm::rollout(const ParamVector& params, const Eigen::VectorXd& z0,
                                           const std::vector<Eigen::VectorXd>& future_inputs) const {
    const Eigen::MatrixXd a = a_z(params);
    const Eigen::MatrixXd b = b_z(params);
    const Eigen::MatrixXd c = c_z(params);
    std::vector<Eigen::VectorXd> out;
    out.reserve(future_inputs.size());
    Eigen::VectorXd z = z0;
    for (const auto& u : future_inputs) {
        if (static_cast<std::size_t>(u.size()) != config_.input_dim) {
            throw ContractError("rollout: input has the wrong dimension");
        }
        z = a * z + b * u;
        out.push_back(c * z);
    }
    return out;
}

std::vector<Eigen::VectorXd> Nssm::predict_rollout(const ParamVector& params, const Eigen::VectorXd& history,
                                                   const std::vector<Eigen::VectorXd>& future_inputs) const {
    return rollout(params, encode(params, history), future_inputs);
}

WindowBatch Nssm::make_batch(const TaskData& task, const std::vector<Window>& windows) const {
    if (windows.empty()) {
        throw ContractError("make_batch: no windows");
    }
    const auto w = static_cast<Eigen::Index>(windows.size());
    const std::size_t t_len = config_.horizon;
    WindowBatch batch;
    batch.encoder_in.resize(static_cast<Eigen::Index>(encoder_input_dim()), w);
    batch.future_u.assign(t_len, Eigen::MatrixXd(static_cast<Eigen::Index>(config_.input_dim), w));
    batch.future_y.assign(t_len, Eigen::MatrixXd(static_cast<Eigen::Index>(config_.output_dim), w));
    for (Eigen::Index j = 0; j < w; ++j) {
        const Window& win = windows[static_cast<std::size_t>(j)];
        if (win.history != config_.history || win.horizon != t_len) {
            throw ContractError("make_batch: window shape does not match the model");
        }
        const Trajectory& traj = *task.trajectories.at(win.trajectory);
        const std::size_t last = win.start + win.history - 1;
        if (last + t_len >= traj.size()) {
            throw ContractError("make_batch: window runs past the end of its trajectory");
        }
        batch.encoder_in.col(j) = history_vector(traj, last);
        for (std::size_t k = 0; k < t_len; ++k) {
            batch.future_u[k].col(j) = traj.inputs[last + 1 + k];
            batch.future_y[k].col(j) = traj.outputs[last + 1 + k];
        }
    }
    return batch;
}

double Nssm::loss(const ParamVector& params, const WindowBatch& batch) const {
    if (batch.size() == 0) {
        throw ContractError("loss_ssm: empty window batch");
    }
    const Eigen::MatrixXd a = a_z(params);
    const Eigen::MatrixXd b = b_z(params);
    const Eigen::MatrixXd c = c_z(params);
    Eigen::MatrixXd z = encoder_.eval(params, batch.encoder_in);
    double err = 0.0;
    for (std::size_t k = 0; k < batch.future_u.size(); ++k) {
        z = a * z + b * batch.future_u[k];
        err += (c * z - batch.future_y[k]).squaredNorm();
    }
    return err / (static_cast<double>(batch.future_u.size()) * static_cast<double>(batch.size()));
}

json Nssm::header() const {
    return {{"kind", "nssm"},
            {"history", config_.history},
            {"latent", config_.latent},
            {"horizon", config_.horizon},
            {"hidden", config_.hidden},
            {"input_dim", config_.input_dim},
            {"output_dim", config_.output_dim},
            {"shapes", shape_map_json(shape_map())}};
}

Nssm Nssm::from_header(const json& h) {
    if (h.value("kind", std::string()) != "nssm") {
        throw DatasetError(DatasetError::Kind::Malformed, "checkpoint is not an NSSM");
    }
    NssmConfig c;
    c.history = h.at("history").get<std::size_t>();
    c.latent = h.at("latent").get<std::size_t>();
    c.horizon = h.at("horizon").get<std::size_t>();
    c.hidden = h.at("hidden").get<std::vector<std::size_t>>();
    c.input_dim = h.at("input_dim").get<std::size_t>();
    c.output_dim = h.at("output_dim").get<std::size_t>();
    return Nssm(c);
}

ScalarLossFn make_ssm_loss(const Nssm& model, WindowBatch batch) {
    if (batch.size() == 0) {
        throw ContractError("loss_ssm: empty window batch");
    }
    auto shared = std::make_shared<const WindowBatch>(std::move(batch));
    auto net = std::make_shared<const Nssm>(model);
    return ScalarLossFn([net, shared](auto& tape, ad::Var psi) { return net->record_loss(tape, psi, *shared); });
}

CompactModel compact_model(const Eigen::MatrixXd& a_z, const Eigen::MatrixXd& b_z, const Eigen::MatrixXd& c_z) {
    const Eigen::Index nz = a_z.rows();
    const Eigen::Index m = c_z.rows();
    const Eigen::Index p = b_z.cols();
    CompactModel cm;
    cm.a = Eigen::MatrixXd::Zero(nz + m, nz + m);
    cm.a.topLeftCorner(nz, nz) = a_z;
    cm.a.bottomLeftCorner(m, nz) = c_z * a_z;
    cm.b.resize(nz + m, p);
    cm.b.topRows(nz) = b_z;
    cm.b.bottomRows(m) = c_z * b_z;
    return cm;
}

CompactModel compact_model(const Nssm& model, const ParamVector& params) {
    return compact_model(model.a_z(params), model.b_z(params), model.c_z(params));
}

void save_nssm(const std::filesystem::path& dir, const Nssm& model, const ParamVector& params) {
    if (static_cast<std::size_t>(params.size()) != model.num_params()) {
        throw ContractError("save_nssm: parameter vector does not match the model");
    }
    save_checkpoint(dir, model.header(), params);
}

std::pair<Nssm, ParamVector> load_nssm(const std::filesystem::path& dir) {
    Checkpoint ck = load_checkpoint(dir);
    Nssm model = Nssm::from_header(ck.header);
    if (static_cast<std::size_t>(ck.params.size()) != model.num_params()) {
        throw DatasetError(DatasetError::Kind::Malformed, "NSSM checkpoint size does not match its shape");
    }
    return {std::move(model), std::move(ck.params)};
}

}  // namespace metactl
