#pragma once

#include "metactl/tape.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <type_traits>
#include <vector>

namespace metactl {

/// Flat vector of every trainable weight of a model. Network shape metadata
/// (see Mlp, NssmLayout) maps segments of it to layers.
using ParamVector = Eigen::VectorXd;

bool all_finite(const ParamVector& v);

/// Optional curvature information a loss may declare about itself.
struct Smoothness {
    std::optional<double> lipschitz;       ///< L: gradient Lipschitz constant
    std::optional<double> hessian_bound;   ///< H: bound on the Hessian norm
};

/// A scalar loss over a ParamVector, recorded on a tape so that both the
/// gradient and exact Hessian-vector products are available.
///
/// Construct it from a generic callable `(ad::Tape<M>& tape, ad::Var psi) ->
/// ad::Var` returning a 1x1 node; the callable is instantiated once for the
/// plain algebra and once for the dual algebra.
class ScalarLossFn {
public:
    using RealFn = std::function<ad::Var(ad::Tape<ad::Mat>&, ad::Var)>;
    using DualFn = std::function<ad::Var(ad::Tape<ad::DualMat>&, ad::Var)>;

    ScalarLossFn() = default;

    template <class F>
        requires(!std::is_same_v<std::decay_t<F>, ScalarLossFn>)
    explicit ScalarLossFn(F f, Smoothness smoothness = {})
        : real_(f), dual_(f), smoothness_(smoothness) {}

    double value(const ParamVector& psi) const;

    struct ValueGrad {
        double value;
        ParamVector grad;
    };
    ValueGrad value_and_grad(const ParamVector& psi) const;

    /// Record the loss onto an existing tape (for composing losses).
    ad::Var record(ad::Tape<ad::Mat>& tape, ad::Var psi) const { return real_(tape, psi); }
    ad::Var record(ad::Tape<ad::DualMat>& tape, ad::Var psi) const { return dual_(tape, psi); }

    const Smoothness& smoothness() const { return smoothness_; }
    const RealFn& real_fn() const { return real_; }
    const DualFn& dual_fn() const { return dual_; }
    explicit operator bool() const { return static_cast<bool>(real_); }

private:
    RealFn real_;
    DualFn dual_;
    Smoothness smoothness_;
};

/// Sum of losses; its gradient is the sum of the gradients.
ScalarLossFn sum_losses(std::vector<ScalarLossFn> terms);

/// The identically zero loss.
ScalarLossFn zero_loss();

/// Gradient at psi. Throws NonFiniteError (carrying the loss value) when the
/// loss or gradient is not finite.
ParamVector grad(const ScalarLossFn& f, const ParamVector& psi);

/// Hessian-vector product by forward-over-reverse differentiation; the
/// Hessian is never formed. Throws ContractError on a length mismatch.
ParamVector hvp(const ScalarLossFn& f, const ParamVector& psi, const ParamVector& v);

struct GradCheckReport {
    std::vector<double> analytic;
    std::vector<double> numeric;
    std::vector<double> rel_error;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    bool pass = false;
};

/// Compare `gradient` against central differences of `f` with the given step.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, floor).
GradCheckReport check_grad_fd(const ScalarLossFn& f, const ParamVector& psi, double tol,
                              const std::optional<ParamVector>& gradient = std::nullopt, double step = 1e-5,
                              double floor = 1e-6);

}  // namespace metactl
