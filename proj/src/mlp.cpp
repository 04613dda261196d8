#include "metactl/mlp.hpp"

#include "metactl/errors.hpp"

#include <cmath>

namespace metactl {

Mlp::Mlp(std::vector<std::size_t> sizes, std::size_t offset) : sizes_(std::move(sizes)), offset_(offset) {
    if (sizes_.size() < 2) {
        throw ContractError("Mlp needs at least an input and an output size");
    }
    std::size_t cursor = offset_;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
        if (sizes_[l] == 0 || sizes_[l + 1] == 0) {
            throw ContractError("Mlp layer sizes must be positive");
        }
        weight_offsets_.push_back(cursor);
        cursor += sizes_[l + 1] * sizes_[l] + sizes_[l + 1];
    }
    count_ = cursor - offset_;
}

void Mlp::init(ParamVector& params, Rng& rng) const {
    for (std::size_t l = 0; l < num_layers(); ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
        std::uniform_real_distribution<double> dist(-bound, bound);
        const std::size_t n = sizes_[l + 1] * sizes_[l];
        for (std::size_t i = 0; i < n; ++i) {
            params(static_cast<Eigen::Index>(weight_offset(l) + i)) = dist(rng);
        }
        for (std::size_t i = 0; i < sizes_[l + 1]; ++i) {
            params(static_cast<Eigen::Index>(bias_offset(l) + i)) = 0.0;
        }
    }
}

Eigen::MatrixXd Mlp::eval(const ParamVector& params, const Eigen::MatrixXd& x) const {
    if (static_cast<std::size_t>(x.rows()) != input_dim()) {
        throw ContractError("Mlp::eval: input has wrong height");
    }
    Eigen::MatrixXd h = x;
    for (std::size_t l = 0; l < num_layers(); ++l) {
        const auto out = static_cast<Eigen::Index>(sizes_[l + 1]);
        const auto in = static_cast<Eigen::Index>(sizes_[l]);
        Eigen::Map<const Eigen::MatrixXd> w(params.data() + weight_offset(l), out, in);
        Eigen::Map<const Eigen::VectorXd> b(params.data() + bias_offset(l), out);
        Eigen::MatrixXd next = w * h;
        next.colwise() += b;
        if (l + 1 < num_layers()) {
            next = next.array().tanh().matrix();
        }
        h = std::move(next);
    }
    return h;
}

}  // namespace metactl
