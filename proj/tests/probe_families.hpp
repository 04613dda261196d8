#pragma once

// Quadratic task families shared by the unit tests and the acceptance runner.

#include "metactl/meta.hpp"

#include <cmath>

namespace probes {

using metactl::QuadraticLoss;
using metactl::QuadraticTask;

inline Eigen::MatrixXd random_spd(Eigen::Index n, double lo, double hi, metactl::Rng& rng) {
    std::normal_distribution<double> normal;
    Eigen::MatrixXd g(n, n);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::VectorXd e(n);
    std::uniform_real_distribution<double> u(lo, hi);
    for (Eigen::Index i = 0; i < n; ++i) e(i) = n == 1 ? hi : (i == 0 ? lo : (i == 1 ? hi : u(rng)));
    return q * e.asDiagonal() * q.transpose();
}

inline Eigen::VectorXd randn(Eigen::Index n, metactl::Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal(rng);
    return v;
}

/// Dense SPD train and test quadratics in `dim` parameters.
inline std::vector<QuadraticTask> dense_family(Eigen::Index dim, std::size_t tasks, metactl::Rng& rng) {
    std::vector<QuadraticTask> out;
    for (std::size_t b = 0; b < tasks; ++b) {
        out.push_back({QuadraticLoss::dense(random_spd(dim, 0.5, 2.0, rng), randn(dim, rng)),
                       QuadraticLoss::dense(random_spd(dim, 0.5, 2.0, rng), randn(dim, rng))});
    }
    return out;
}

/// Two tasks whose meta-objective (gamma = 1, unit train curvature) has a Hessian with
/// eigenvalues i/d, i = 1..d, and a gradient of equal weight on every eigenvector at 0.
/// Gradient descent on such a spectrum shows the O(1/K) regime of min |grad|^2.
inline std::vector<QuadraticTask> sublinear_family(Eigen::Index dim) {
    const Eigen::VectorXd mu = Eigen::VectorXd::LinSpaced(dim, 1.0, static_cast<double>(dim)) / static_cast<double>(dim);
    const Eigen::VectorXd test_curv = 4.0 * mu;
    const Eigen::VectorXd base = 0.5 * mu.cwiseInverse();
    std::vector<QuadraticTask> out;
    for (double sign : {1.0, -1.0}) {
        Eigen::VectorXd train_center = Eigen::VectorXd::Constant(dim, 0.1 * sign);
        out.push_back({QuadraticLoss::diagonal(Eigen::VectorXd::Ones(dim), train_center),
                       QuadraticLoss::diagonal(test_curv, base * (1.0 + 0.1 * sign))});
    }
    return out;
}

}  // namespace probes
