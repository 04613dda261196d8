#include "metactl/plants.hpp"

#include "metactl/errors.hpp"

#include <algorithm>
#include <cmath>

namespace metactl {

namespace {

double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

double uniform(Rng& rng, Range r) {
    if (r.hi <= r.lo) {
        return r.lo;
    }
    return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

}  // namespace

void StribeckParams::validate() const {
    if (!(mass > 0.0) || !(stribeck_velocity > 0.0) || !(shape > 0.0)) {
        throw ContractError("friction parameters need m > 0, v_S > 0 and delta_S > 0");
    }
    if (!(coulomb >= 0.0) || !(stiction >= coulomb) || !(viscous >= 0.0)) {
        throw ContractError("friction parameters need F_S >= F_C >= 0 and F_v >= 0");
    }
}

PlantFamily family_of(const PlantParams& p) {
    return std::holds_alternative<VanDerPolParams>(p) ? PlantFamily::VanDerPol : PlantFamily::BallPlate;
}

std::string family_name(PlantFamily f) { return f == PlantFamily::VanDerPol ? "vdp" : "ballplate"; }

Eigen::VectorXd stribeck_force(const Eigen::VectorXd& v, const StribeckParams& p) {
    const double speed = v.norm();
    const double level = p.coulomb + (p.stiction - p.coulomb) * std::exp(-std::pow(speed / p.stribeck_velocity, p.shape));
    Eigen::VectorXd f(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        f(i) = level * sgn(v(i)) + p.viscous * v(i);
    }
    return f;
}

Eigen::VectorXd vdp_derivative(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const VanDerPolParams& p) {
    Eigen::VectorXd d(2);
    d(0) = x(1);
    d(1) = p.damping * x(1) * (1.0 - x(0) * x(0)) - x(0) + u(0);
    return d;
}

Eigen::VectorXd ballplate_derivative(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const StribeckParams& p) {
    const double alpha = u(0);
    const double beta = u(1);
    const Eigen::Vector2d vel(x(1), x(3));
    const Eigen::VectorXd fr = stribeck_force(vel, p);
    Eigen::VectorXd d(4);
    d(0) = x(1);
    d(1) = (5.0 / 7.0) * kGravity * std::sin(beta) * std::cos(alpha) - fr(0) / p.mass;
    d(2) = x(3);
    d(3) = -(5.0 / 7.0) * kGravity * std::sin(alpha) - fr(1) / p.mass;
    return d;
}

Eigen::VectorXd rk4_step(const DerivativeFn& f, const Eigen::VectorXd& x, const Eigen::VectorXd& u, double dt) {
    if (!(dt > 0.0)) {
        throw ContractError("rk4_step: dt must be positive");
    }
    auto checked = [](Eigen::VectorXd v) {
        if (!v.allFinite()) {
            throw SimulationError("integration produced a non-finite state");
        }
        return v;
    };
    const Eigen::VectorXd k1 = checked(f(x, u));
    const Eigen::VectorXd k2 = checked(f(x + 0.5 * dt * k1, u));
    const Eigen::VectorXd k3 = checked(f(x + 0.5 * dt * k2, u));
    const Eigen::VectorXd k4 = checked(f(x + dt * k3, u));
    return checked(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
}

PlantSpec PlantSpec::van_der_pol() {
    PlantSpec s;
    s.family = PlantFamily::VanDerPol;
    s.dt = 0.05;
    s.substeps = 1;
    s.u_min = Eigen::VectorXd::Constant(1, -5.0);
    s.u_max = Eigen::VectorXd::Constant(1, 5.0);
    s.guard = 100.0;
    return s;
}

PlantSpec PlantSpec::ball_plate() {
    PlantSpec s;
    s.family = PlantFamily::BallPlate;
    s.dt = 0.1;
    s.substeps = 5;
    s.u_min = Eigen::VectorXd::Constant(2, -0.3);
    s.u_max = Eigen::VectorXd::Constant(2, 0.3);
    s.half_width = 0.15;
    s.guard = 100.0;
    return s;
}

Plant::Plant(PlantSpec spec, PlantParams params) : spec_(std::move(spec)), params_(std::move(params)) {
    if (family_of(params_) != spec_.family) {
        throw ContractError("plant parameters do not belong to the plant family");
    }
    if (const auto* f = std::get_if<StribeckParams>(&params_)) {
        f->validate();
    }
    const Eigen::Index p = spec_.family == PlantFamily::VanDerPol ? 1 : 2;
    if (spec_.u_min.size() != p || spec_.u_max.size() != p || (spec_.u_min.array() > spec_.u_max.array()).any()) {
        throw ContractError("plant input box has the wrong size or is empty");
    }
    if (!(spec_.dt > 0.0) || spec_.substeps < 1) {
        throw ContractError("plant sample period and substeps must be positive");
    }
}

Eigen::Index Plant::state_dim() const { return spec_.family == PlantFamily::VanDerPol ? 2 : 4; }

Eigen::VectorXd Plant::output(const Eigen::VectorXd& x) const {
    if (spec_.family == PlantFamily::VanDerPol) {
        return x;
    }
    return Eigen::Vector2d(x(0), x(2));
}

Eigen::VectorXd Plant::derivative(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const {
    if (const auto* v = std::get_if<VanDerPolParams>(&params_)) {
        return vdp_derivative(x, u, *v);
    }
    return ballplate_derivative(x, u, std::get<StribeckParams>(params_));
}

Eigen::VectorXd Plant::clamp_input(const Eigen::VectorXd& u) const {
    return u.cwiseMax(spec_.u_min).cwiseMin(spec_.u_max);
}

Eigen::VectorXd Plant::ballplate_substep(const Eigen::VectorXd& x, const Eigen::VectorXd& u, double h) const {
    const auto& fp = std::get<StribeckParams>(params_);
    DerivativeFn f = [&fp](const Eigen::VectorXd& s, const Eigen::VectorXd& in) {
        return ballplate_derivative(s, in, fp);
    };
    Eigen::VectorXd next = rk4_step(f, x, u, h);
    const double drive[2] = {(5.0 / 7.0) * kGravity * std::sin(u(1)) * std::cos(u(0)),
                             -(5.0 / 7.0) * kGravity * std::sin(u(0))};
    const double hold = fp.stiction / fp.mass;
    for (int axis = 0; axis < 2; ++axis) {
        const int pi = 2 * axis;
        const int vi = pi + 1;
        const bool holdable = std::abs(drive[axis]) <= hold;
        if (holdable && x(vi) == 0.0) {
            // static friction keeps a resting ball at rest
            next(pi) = x(pi);
            next(vi) = 0.0;
        } else if (holdable && sgn(next(vi)) != sgn(x(vi))) {
            // friction stops motion but cannot reverse it
            next(vi) = 0.0;
        }
        if (std::abs(next(pi)) > spec_.half_width) {
            next(pi) = std::clamp(next(pi), -spec_.half_width, spec_.half_width);
            next(vi) = 0.0;
        }
    }
    return next;
}

Eigen::VectorXd Plant::step(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const {
    const Eigen::VectorXd uc = clamp_input(u);
    const double h = spec_.dt / spec_.substeps;
    Eigen::VectorXd s = x;
    for (int i = 0; i < spec_.substeps; ++i) {
        if (spec_.family == PlantFamily::BallPlate) {
            s = ballplate_substep(s, uc, h);
        } else {
            s = rk4_step([this](const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return derivative(a, b); }, s,
                         uc, h);
        }
    }
    return s;
}

bool Plant::beyond_guard(const Eigen::VectorXd& x) const { return !x.allFinite() || x.norm() > spec_.guard; }

PlantParams sample_params(const ParamDistribution& dist, Rng& rng) {
    if (const auto* v = std::get_if<VdpDistribution>(&dist)) {
        if (v->stddev <= 0.0) {
            return VanDerPolParams{v->mean};
        }
        return VanDerPolParams{std::normal_distribution<double>(v->mean, v->stddev)(rng)};
    }
    const auto& d = std::get<FrictionDistribution>(dist);
    StribeckParams p;
    p.coulomb = std::max(0.0, uniform(rng, d.coulomb));
    p.stiction = std::max(p.coulomb, uniform(rng, {p.coulomb, p.coulomb + d.stiction_span}));
    p.viscous = std::max(0.0, uniform(rng, d.viscous));
    p.stribeck_velocity = std::max(1e-6, uniform(rng, d.stribeck_velocity));
    p.shape = std::max(1e-6, uniform(rng, d.shape));
    p.mass = std::max(1e-6, d.mass);
    return p;
}

SimResult simulate(const Plant& plant, const Eigen::VectorXd& x0, const Controller& controller,
                   const ReferenceFn& reference, std::size_t length, Eigen::VectorXd u_init, const std::string& tag) {
    if (x0.size() != plant.state_dim()) {
        throw ContractError("simulate: initial state has the wrong dimension");
    }
    SimResult res;
    Trajectory& traj = res.trajectory;
    traj.dt = plant.spec().dt;
    traj.plant_tag = tag;
    if (length == 0) {
        return res;
    }
    if (u_init.size() == 0) {
        u_init = Eigen::VectorXd::Zero(plant.input_dim());
    }
    Eigen::VectorXd x = x0;
    traj.push(plant.clamp_input(u_init), plant.output(x));
    if (reference) traj.references.push_back(reference(0));
    res.states.push_back(x);
    for (std::size_t t = 1; t < length; ++t) {
        const Eigen::VectorXd u = plant.clamp_input(controller(traj));
        Eigen::VectorXd next;
        try {
            next = plant.step(x, u);
        } catch (const SimulationError&) {
            next = Eigen::VectorXd::Constant(x.size(), std::numeric_limits<double>::quiet_NaN());
        }
        if (plant.beyond_guard(next)) {
            res.diverged = true;
            res.diverged_at = t;
            break;
        }
        x = std::move(next);
        traj.push(u, plant.output(x));
        if (reference) traj.references.push_back(reference(t));
        res.states.push_back(x);
    }
    return res;
}

}  // namespace metactl
