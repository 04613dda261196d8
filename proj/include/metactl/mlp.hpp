#pragma once

#include "metactl/diffnum.hpp"
#include "metactl/rng.hpp"
#include "metactl/tape.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <vector>

namespace metactl {

/// Fully connected tanh network: tanh on every hidden layer, linear output.
///
/// Weights live in a segment of a flat ParamVector starting at `offset`. Per
/// layer the segment holds W (out x in, column-major) followed by b (out).
class Mlp {
public:
    Mlp() = default;
    /// `sizes` = {input, hidden..., output}; at least two entries.
    Mlp(std::vector<std::size_t> sizes, std::size_t offset = 0);

    std::size_t input_dim() const { return sizes_.front(); }
    std::size_t output_dim() const { return sizes_.back(); }
    std::size_t num_layers() const { return sizes_.size() - 1; }
    const std::vector<std::size_t>& sizes() const { return sizes_; }
    std::size_t offset() const { return offset_; }
    std::size_t num_params() const { return count_; }

    std::size_t weight_offset(std::size_t layer) const { return weight_offsets_[layer]; }
    std::size_t bias_offset(std::size_t layer) const { return weight_offsets_[layer] + sizes_[layer + 1] * sizes_[layer]; }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases.
    void init(ParamVector& params, Rng& rng) const;

    /// Columns of `x` are samples.
    Eigen::MatrixXd eval(const ParamVector& params, const Eigen::MatrixXd& x) const;

    template <class M>
    ad::Var record(ad::Tape<M>& tape, ad::Var params, ad::Var x) const {
        ad::Var h = x;
        for (std::size_t l = 0; l < num_layers(); ++l) {
            const auto out = static_cast<Eigen::Index>(sizes_[l + 1]);
            const auto in = static_cast<Eigen::Index>(sizes_[l]);
            ad::Var w = tape.segment(params, static_cast<Eigen::Index>(weight_offset(l)), out, in);
            ad::Var b = tape.segment(params, static_cast<Eigen::Index>(bias_offset(l)), out, 1);
            h = tape.add_col(tape.matmul(w, h), b);
            if (l + 1 < num_layers()) {
                h = tape.tanh(h);
            }
        }
        return h;
    }

private:
    std::vector<std::size_t> sizes_;
    std::size_t offset_ = 0;
    std::size_t count_ = 0;
    std::vector<std::size_t> weight_offsets_;
};

}  // namespace metactl
