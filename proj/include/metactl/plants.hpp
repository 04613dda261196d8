#pragma once

#include "metactl/dataio.hpp"
#include "metactl/rng.hpp"

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <variant>

namespace metactl {

struct VanDerPolParams {
    double damping = 0.0;  ///< theta
};

/// Ball-on-plate with Stribeck friction.
struct StribeckParams {
    double coulomb = 0.0;            ///< F_C [N]
    double stiction = 0.0;           ///< F_S [N]
    double viscous = 0.0;            ///< F_v [N s/m]
    double stribeck_velocity = 0.05; ///< v_S [m/s]
    double shape = 2.0;              ///< delta_S
    double mass = 0.03;              ///< m [kg]

    /// Throws ContractError unless m, v_S, delta_S > 0, F_S >= F_C >= 0, F_v >= 0.
    void validate() const;
};

using PlantParams = std::variant<VanDerPolParams, StribeckParams>;

enum class PlantFamily { VanDerPol, BallPlate };

PlantFamily family_of(const PlantParams& p);
std::string family_name(PlantFamily f);

inline constexpr double kGravity = 9.81;

/// (F_C + (F_S - F_C) exp(-(|v|/v_S)^delta)) sgn(v) + F_v v, componentwise in
/// sgn(v) with sgn(0) = 0. It points along v; the dynamics subtract it.
Eigen::VectorXd stribeck_force(const Eigen::VectorXd& v, const StribeckParams& p);

Eigen::VectorXd vdp_derivative(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const VanDerPolParams& p);

/// State [x, xdot, y, ydot], input [alpha, beta] (plate angles).
Eigen::VectorXd ballplate_derivative(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const StribeckParams& p);

using DerivativeFn = std::function<Eigen::VectorXd(const Eigen::VectorXd& x, const Eigen::VectorXd& u)>;

/// Classical RK4 with u held over the step. Throws SimulationError when an
/// intermediate state is not finite.
Eigen::VectorXd rk4_step(const DerivativeFn& f, const Eigen::VectorXd& x, const Eigen::VectorXd& u, double dt);

/// Structural settings shared by every plant of a family.
struct PlantSpec {
    PlantFamily family = PlantFamily::VanDerPol;
    double dt = 0.05;        ///< sample period
    int substeps = 1;        ///< RK4 steps per sample period
    Eigen::VectorXd u_min;
    Eigen::VectorXd u_max;
    double half_width = 0.15;  ///< plate half-width [m] (ball-plate only)
    double guard = 100.0;      ///< |x| beyond this counts as divergence

    static PlantSpec van_der_pol();
    static PlantSpec ball_plate();
};

class Plant {
public:
    Plant(PlantSpec spec, PlantParams params);

    const PlantSpec& spec() const { return spec_; }
    const PlantParams& params() const { return params_; }
    PlantFamily family() const { return spec_.family; }

    Eigen::Index state_dim() const;
    Eigen::Index input_dim() const { return spec_.u_min.size(); }
    Eigen::Index output_dim() const { return 2; }

    Eigen::VectorXd output(const Eigen::VectorXd& x) const;
    Eigen::VectorXd derivative(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const;
    Eigen::VectorXd clamp_input(const Eigen::VectorXd& u) const;

    /// Advance one sample period. Ball-plate: walls are inelastic and a ball
    /// that friction can hold stays at rest rather than reversing.
    Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const;

    bool beyond_guard(const Eigen::VectorXd& x) const;

private:
    Eigen::VectorXd ballplate_substep(const Eigen::VectorXd& x, const Eigen::VectorXd& u, double h) const;

    PlantSpec spec_;
    PlantParams params_;
};

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

struct VdpDistribution {
    double mean = 0.0;
    double stddev = 1.0;
};

struct FrictionDistribution {
    Range coulomb{0.002, 0.02};
    double stiction_span = 0.01;  ///< F_S ~ U[F_C, F_C + span]
    Range viscous{0.0, 0.05};
    Range stribeck_velocity{0.01, 0.1};
    Range shape{1.0, 2.0};
    double mass = 0.03;
};

using ParamDistribution = std::variant<VdpDistribution, FrictionDistribution>;

/// Fresh draw; friction draws are clamped into the valid region.
PlantParams sample_params(const ParamDistribution& dist, Rng& rng);

/// Decides u_{t+1} from the rows observed so far (rows 0..t).
using Controller = std::function<Eigen::VectorXd(const Trajectory& history)>;
/// Reference sample for row t.
using ReferenceFn = std::function<Eigen::VectorXd(std::size_t t)>;

struct SimResult {
    Trajectory trajectory;
    std::vector<Eigen::VectorXd> states;
    bool diverged = false;
    std::size_t diverged_at = 0;  ///< row that could not be produced
};

/// Closed-loop run producing `length` rows. Row 0 is (u_init, y(x0));
/// the controller is then called once per row. Inputs are clipped to the box.
/// Blow-up truncates the trajectory and sets `diverged`.
SimResult simulate(const Plant& plant, const Eigen::VectorXd& x0, const Controller& controller,
                   const ReferenceFn& reference, std::size_t length, Eigen::VectorXd u_init = {},
                   const std::string& tag = {});

}  // namespace metactl
