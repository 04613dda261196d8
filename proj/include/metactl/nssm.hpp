#pragma once

#include "metactl/checkpoint.hpp"
#include "metactl/dataio.hpp"
#include "metactl/diffnum.hpp"
#include "metactl/mlp.hpp"
#include "metactl/tape.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <filesystem>
#include <memory>
#include <vector>

namespace metactl {

struct NssmConfig {
    std::size_t history = 8;   ///< H
    std::size_t latent = 8;    ///< n_z
    std::size_t horizon = 16;  ///< T
    std::vector<std::size_t> hidden{64, 64};
    std::size_t input_dim = 1;   ///< p
    std::size_t output_dim = 2;  ///< m

    /// H, T >= 1 and n_z <= m * H.
    void validate() const;
};

/// Encoder columns and future input/output blocks of a set of windows.
struct WindowBatch {
    Eigen::MatrixXd encoder_in;           ///< H(p+m) x W
    std::vector<Eigen::MatrixXd> future_u;  ///< T blocks of p x W
    std::vector<Eigen::MatrixXd> future_y;  ///< T blocks of m x W

    std::size_t size() const { return static_cast<std::size_t>(encoder_in.cols()); }
};

/// Neural state-space model: z_t = f_enc(last H rows), z_{k+1} = A_z z_k + B_z u_{k+1},
/// y_k = C_z z_k. Parameters are laid out as [encoder | A_z | B_z | C_z].
class Nssm {
public:
    explicit Nssm(NssmConfig config = {});

    const NssmConfig& config() const { return config_; }
    const Mlp& encoder() const { return encoder_; }
    std::size_t num_params() const { return c_offset_ + config_.output_dim * config_.latent; }
    std::size_t encoder_input_dim() const { return config_.history * (config_.input_dim + config_.output_dim); }

    std::vector<ShapeEntry> shape_map() const;

    /// Encoder init, A_z = 0.9 I, small random B_z and C_z.
    ParamVector init(Rng& rng) const;

    Eigen::MatrixXd a_z(const ParamVector& params) const;
    Eigen::MatrixXd b_z(const ParamVector& params) const;
    Eigen::MatrixXd c_z(const ParamVector& params) const;

    /// Rows last-H+1..last of `traj` flattened oldest first, each row as [u; y].
    Eigen::VectorXd history_vector(const Trajectory& traj, std::size_t last_row) const;

    Eigen::VectorXd encode(const ParamVector& params, const Eigen::VectorXd& history) const;

    /// Outputs y_{t+1..t+T} driven by u_{t+1..t+T} from latent z_t.
    std::vector<Eigen::VectorXd> rollout(const ParamVector& params, const Eigen::VectorXd& z,
                                         const std::vector<Eigen::VectorXd>& future_inputs) const;
    std::vector<Eigen::VectorXd> predict_rollout(const ParamVector& params, const Eigen::VectorXd& history,
                                                 const std::vector<Eigen::VectorXd>& future_inputs) const;

    WindowBatch make_batch(const TaskData& task, const std::vector<Window>& windows) const;

    /// Mean over windows of (1/T) sum_k |y_k - yhat_k|^2.
    double loss(const ParamVector& params, const WindowBatch& batch) const;

    template <class M>
    ad::Var record_loss(ad::Tape<M>& tape, ad::Var psi, const WindowBatch& batch) const {
        using ad::Var;
        const auto nz = static_cast<Eigen::Index>(config_.latent);
        const auto p = static_cast<Eigen::Index>(config_.input_dim);
        const auto m = static_cast<Eigen::Index>(config_.output_dim);
        Var a = tape.segment(psi, static_cast<Eigen::Index>(a_offset_), nz, nz);
        Var b = tape.segment(psi, static_cast<Eigen::Index>(b_offset_), nz, p);
        Var c = tape.segment(psi, static_cast<Eigen::Index>(c_offset_), m, nz);
        Var z = encoder_.record(tape, psi, tape.constant(batch.encoder_in));
        Var err;
        for (std::size_t k = 0; k < batch.future_u.size(); ++k) {
            z = tape.add(tape.matmul(a, z), tape.matmul(b, tape.constant(batch.future_u[k])));
            Var e = tape.squared_norm(tape.sub(tape.matmul(c, z), tape.constant(batch.future_y[k])));
            err = k == 0 ? e : tape.add(err, e);
        }
        const double norm = static_cast<double>(batch.future_u.size()) * static_cast<double>(batch.size());
        return tape.scale(err, 1.0 / norm);
    }

    nlohmann::json header() const;
    static Nssm from_header(const nlohmann::json& header);

private:
    NssmConfig config_;
    Mlp encoder_;
    std::size_t a_offset_ = 0;
    std::size_t b_offset_ = 0;
    std::size_t c_offset_ = 0;
};

/// Loss over a fixed window batch, differentiable through the tape.
ScalarLossFn make_ssm_loss(const Nssm& model, WindowBatch batch);

/// Stacked system s = [z; y]: A = [[A_z, 0], [C_z A_z, 0]], B = [B_z; C_z B_z].
struct CompactModel {
    Eigen::MatrixXd a;
    Eigen::MatrixXd b;
};

CompactModel compact_model(const Eigen::MatrixXd& a_z, const Eigen::MatrixXd& b_z, const Eigen::MatrixXd& c_z);
CompactModel compact_model(const Nssm& model, const ParamVector& params);

void save_nssm(const std::filesystem::path& dir, const Nssm& model, const ParamVector& params);
std::pair<Nssm, ParamVector> load_nssm(const std::filesystem::path& dir);

}  // namespace metactl
