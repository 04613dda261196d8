#include "metactl/diffnum.hpp"

#include "metactl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace metactl {

bool all_finite(const ParamVector& v) { return v.allFinite(); }

double ScalarLossFn::value(const ParamVector& psi) const {
    ad::Tape<ad::Mat> tape;
    ad::Var p = tape.constant(psi);
    return tape.scalar(real_(tape, p));
}

ScalarLossFn::ValueGrad ScalarLossFn::value_and_grad(const ParamVector& psi) const {
    ad::Tape<ad::Mat> tape;
    ad::Var p = tape.variable(psi);
    ad::Var out = real_(tape, p);
    const double v = tape.scalar(out);
    if (!std::isfinite(v)) {
        throw NonFiniteError("loss evaluated to a non-finite value", v);
    }
    tape.backward(out);
    ParamVector g = tape.adjoint(p);
    if (!g.allFinite()) {
        throw NonFiniteError("gradient has non-finite entries", v);
    }
    return {v, std::move(g)};
}

ScalarLossFn sum_losses(std::vector<ScalarLossFn> terms) {
    return ScalarLossFn([terms = std::move(terms)](auto& tape, ad::Var psi) {
        if (terms.empty()) {
            return tape.scale(tape.sum(psi), 0.0);
        }
        ad::Var acc = terms.front().record(tape, psi);
        for (std::size_t i = 1; i < terms.size(); ++i) {
            acc = tape.add(acc, terms[i].record(tape, psi));
        }
        return acc;
    });
}

ScalarLossFn zero_loss() {
    return ScalarLossFn([](auto& tape, ad::Var psi) { return tape.scale(tape.sum(psi), 0.0); },
                        Smoothness{0.0, 0.0});
}

ParamVector grad(const ScalarLossFn& f, const ParamVector& psi) { return f.value_and_grad(psi).grad; }

ParamVector hvp(const ScalarLossFn& f, const ParamVector& psi, const ParamVector& v) {
    if (psi.size() != v.size()) {
        throw ContractError("hvp: direction length " + std::to_string(v.size()) + " differs from parameter length " +
                            std::to_string(psi.size()));
    }
    ad::Tape<ad::DualMat> tape;
    ad::Var p = tape.variable(ad::DualMat{psi, v});
    ad::Var out = f.dual_fn()(tape, p);
    const double value = tape.scalar(out);
    if (!std::isfinite(value)) {
        throw NonFiniteError("loss evaluated to a non-finite value", value);
    }
    tape.backward(out);
    ad::DualMat adj = tape.adjoint(p);
    if (!adj.has_tangent()) {
        return ParamVector::Zero(psi.size());
    }
    ParamVector hv = adj.t;
    if (!hv.allFinite()) {
        throw NonFiniteError("Hessian-vector product has non-finite entries", value);
    }
    return hv;
}

GradCheckReport check_grad_fd(const ScalarLossFn& f, const ParamVector& psi, double tol,
                              const std::optional<ParamVector>& gradient, double step, double floor) {
    if (!(tol > 0.0)) {
        throw ContractError("check_grad_fd: tol must be positive");
    }
    const ParamVector g = gradient ? *gradient : grad(f, psi);
    GradCheckReport report;
    const auto n = static_cast<std::size_t>(psi.size());
    report.analytic.resize(n);
    report.numeric.resize(n);
    report.rel_error.resize(n);
    ParamVector x = psi;
    for (std::size_t i = 0; i < n; ++i) {
        const auto k = static_cast<Eigen::Index>(i);
        const double orig = x(k);
        x(k) = orig + step;
        const double fp = f.value(x);
        x(k) = orig - step;
        const double fm = f.value(x);
        x(k) = orig;
        const double numeric = (fp - fm) / (2.0 * step);
        const double scale = std::max({std::abs(g(k)), std::abs(numeric), floor});
        const double rel = std::isfinite(numeric) ? std::abs(g(k) - numeric) / scale
                                                  : std::numeric_limits<double>::infinity();
        report.analytic[i] = g(k);
        report.numeric[i] = numeric;
        report.rel_error[i] = rel;
        if (i == 0 || rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.pass = report.max_rel_error <= tol;
    return report;
}

}  // namespace metactl
