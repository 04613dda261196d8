#include "metactl/errors.hpp"
#include "metactl/harness.hpp"

#include <set>

namespace metactl {

namespace {

using nlohmann::json;

// programmatically built documents store small integers as signed
bool non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Object reader that remembers which keys were consumed so leftovers can be rejected.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + " must be an object");
    }

    bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

    Section child(const std::string& key) {
        used_.insert(key);
        return Section(j_.at(key), path_.empty() ? key : path_ + "." + key);
    }

    template <class T>
    T get(const std::string& key, T fallback) {
        used_.insert(key);
        if (!has(key)) return fallback;
        return convert<T>(j_.at(key), key);
    }

    template <class T>
    T require(const std::string& key) {
        used_.insert(key);
        if (!has(key)) throw ConfigError(where() + ": missing '" + key + "'");
        return convert<T>(j_.at(key), key);
    }

    std::optional<double> optional_number(const std::string& key) {
        used_.insert(key);
        if (!has(key)) return std::nullopt;
        return convert<double>(j_.at(key), key);
    }

    void mark(const std::string& key) { used_.insert(key); }

    const json& raw(const std::string& key) {
        used_.insert(key);
        return j_.at(key);
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!used_.count(key)) throw ConfigError(where() + ": unknown key '" + key + "'");
        }
    }

    std::string where() const { return path_.empty() ? "config" : path_; }

private:
    template <class T>
    T convert(const json& v, const std::string& key) const {
        try {
            if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
                if (!non_negative_integer(v)) throw ConfigError("expected a non-negative integer");
            } else if constexpr (std::is_same_v<T, double>) {
                if (!v.is_number()) throw ConfigError("expected a number");
            } else if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw ConfigError("expected true or false");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw ConfigError("expected a string");
            }
            return v.get<T>();
        } catch (const ConfigError& e) {
            throw ConfigError(where() + "." + key + ": " + e.what());
        } catch (const json::exception& e) {
            throw ConfigError(where() + "." + key + ": " + e.what());
        }
    }

    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

Eigen::VectorXd vector_of(const json& v, const std::string& what) {
    if (!v.is_array() || v.empty()) throw ConfigError(what + " must be a non-empty array of numbers");
    Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_number()) throw ConfigError(what + " must be a non-empty array of numbers");
        out(static_cast<Eigen::Index>(i)) = v[i].get<double>();
    }
    return out;
}

// a diagonal given as a list, or one number repeated
Eigen::MatrixXd diagonal_of(Section& s, const std::string& key, Eigen::Index n, double fallback) {
    if (!s.has(key)) {
        s.mark(key);
        return Eigen::MatrixXd::Identity(n, n) * fallback;
    }
    const json& v = s.raw(key);
    const std::string what = s.where() + "." + key;
    if (v.is_number()) return Eigen::MatrixXd::Identity(n, n) * v.get<double>();
    Eigen::VectorXd d = vector_of(v, what);
    if (d.size() != n) throw ConfigError(what + " needs " + std::to_string(n) + " entries");
    return d.asDiagonal();
}

std::vector<std::size_t> sizes_of(const json& v, const std::string& what) {
    if (!v.is_array()) throw ConfigError(what + " must be an array of non-negative integers");
    std::vector<std::size_t> out;
    for (const auto& x : v) {
        if (!non_negative_integer(x)) throw ConfigError(what + " must be an array of non-negative integers");
        out.push_back(x.get<std::size_t>());
    }
    return out;
}

Range range_of(Section& s, const std::string& key, Range fallback) {
    if (!s.has(key)) {
        s.mark(key);
        return fallback;
    }
    Eigen::VectorXd v = vector_of(s.raw(key), s.where() + "." + key);
    if (v.size() != 2 || v(0) > v(1)) throw ConfigError(s.where() + "." + key + " must be [lo, hi] with lo <= hi");
    return {v(0), v(1)};
}

ParamDistribution parse_distribution(Section s, PlantFamily family) {
    ParamDistribution out;
    if (family == PlantFamily::VanDerPol) {
        VdpDistribution d;
        d.mean = s.get("mean", d.mean);
        d.stddev = s.get("stddev", d.stddev);
        if (d.stddev < 0.0) throw ConfigError(s.where() + ".stddev must be >= 0");
        out = d;
    } else {
        FrictionDistribution d;
        d.coulomb = range_of(s, "coulomb", d.coulomb);
        d.stiction_span = s.get("stiction_span", d.stiction_span);
        d.viscous = range_of(s, "viscous", d.viscous);
        d.stribeck_velocity = range_of(s, "stribeck_velocity", d.stribeck_velocity);
        d.shape = range_of(s, "shape", d.shape);
        d.mass = s.get("mass", d.mass);
        if (d.coulomb.lo < 0.0 || d.stiction_span < 0.0 || d.viscous.lo < 0.0 || d.stribeck_velocity.lo <= 0.0 ||
            d.shape.lo <= 0.0 || d.mass <= 0.0) {
            throw ConfigError(s.where() + ": friction ranges must be non-negative (v_S, delta_S, m positive)");
        }
        out = d;
    }
    s.finish();
    return out;
}

template <class Fn>
void wrap_contract(const std::string& what, Fn&& fn) {
    try {
        fn();
    } catch (const ContractError& e) {
        throw ConfigError(what + ": " + e.what());
    }
}

}  // namespace

PlantSpec ExperimentConfig::plant_spec() const {
    return family == PlantFamily::VanDerPol ? PlantSpec::van_der_pol() : PlantSpec::ball_plate();
}

Eigen::MatrixXd ExperimentConfig::cost_q() const { return uses_dqn() ? dqn.config.q : mpc.q; }
Eigen::MatrixXd ExperimentConfig::cost_r() const { return uses_dqn() ? dqn.config.r : mpc.r; }

nlohmann::json params_to_json(const PlantParams& p) {
    if (const auto* v = std::get_if<VanDerPolParams>(&p)) return {{"damping", v->damping}};
    const auto& s = std::get<StribeckParams>(p);
    return {{"coulomb", s.coulomb}, {"stiction", s.stiction}, {"viscous", s.viscous},
            {"stribeck_velocity", s.stribeck_velocity}, {"shape", s.shape}, {"mass", s.mass}};
}

PlantParams params_from_json(const nlohmann::json& j, PlantFamily family) {
    Section s(j, "params");
    PlantParams out;
    if (family == PlantFamily::VanDerPol) {
        out = VanDerPolParams{s.require<double>("damping")};
    } else {
        StribeckParams p;
        p.coulomb = s.require<double>("coulomb");
        p.stiction = s.require<double>("stiction");
        p.viscous = s.require<double>("viscous");
        p.stribeck_velocity = s.get("stribeck_velocity", p.stribeck_velocity);
        p.shape = s.get("shape", p.shape);
        p.mass = s.get("mass", p.mass);
        wrap_contract("params", [&] { p.validate(); });
        out = p;
    }
    s.finish();
    return out;
}

ExperimentConfig parse_config(const nlohmann::json& j) {
    ExperimentConfig c;
    Section root(j, "");
    c.seed = root.require<std::uint64_t>("seed");

    {
        Section plant = root.child("plant");
        const auto family = plant.require<std::string>("family");
        if (family == "van_der_pol") {
            c.family = PlantFamily::VanDerPol;
        } else if (family == "ball_plate") {
            c.family = PlantFamily::BallPlate;
        } else {
            throw ConfigError("plant.family must be van_der_pol or ball_plate");
        }
        if (plant.has("distribution")) {
            c.distribution = parse_distribution(plant.child("distribution"), c.family);
        } else {
            plant.mark("distribution");
            c.distribution = c.family == PlantFamily::VanDerPol ? ParamDistribution{VdpDistribution{}}
                                                                 : ParamDistribution{FrictionDistribution{}};
        }
        plant.finish();
    }
    const PlantSpec spec = c.plant_spec();
    const auto p = spec.u_min.size();
    const Eigen::Index m = 2;

    if (root.has("sources")) {
        Section s = root.child("sources");
        c.num_sources = s.get("count", c.num_sources);
        c.source_length = s.get("length", c.source_length);
        s.finish();
    }
    if (c.num_sources == 0) throw ConfigError("sources.count must be at least 1");

    if (root.has("target")) {
        Section s = root.child("target");
        c.target_length = s.get("length", c.target_length);
        if (s.has("params")) c.target_params = params_from_json(s.raw("params"), c.family);
        s.finish();
    }

    c.learner = root.get<std::string>("learner", c.learner);
    if (c.learner != "nssm-mpc" && c.learner != "dqn") throw ConfigError("learner must be nssm-mpc or dqn");

    if (root.has("meta")) {
        Section s = root.child("meta");
        MetaConfig& mc = c.meta;
        mc.reg_strength = s.get("reg_strength", mc.reg_strength);
        mc.beta_in = s.optional_number("beta_in");
        mc.beta_out = s.get("beta_out", mc.beta_out);
        mc.inner_steps = s.get("inner_steps", mc.inner_steps);
        mc.batch_size = s.get("batch_size", mc.batch_size);
        mc.k_train = s.get("k_train", mc.k_train);
        mc.k_adapt = s.get("k_adapt", mc.k_adapt);
        mc.cg_iters = s.get("cg_iters", mc.cg_iters);
        mc.cg_tol = s.get("cg_tol", mc.cg_tol);
        mc.power_iters = s.get("power_iters", mc.power_iters);
        mc.converge_window = s.get("converge_window", mc.converge_window);
        mc.converge_tol = s.get("converge_tol", mc.converge_tol);
        mc.ring_capacity = s.get("ring_capacity", mc.ring_capacity);
        mc.train_ratio = s.get("train_ratio", mc.train_ratio);
        s.finish();
    }
    wrap_contract("meta", [&] { c.meta.validate(); });

    if (root.has("nssm")) {
        Section s = root.child("nssm");
        c.nssm.history = s.get("history", c.nssm.history);
        c.nssm.latent = s.get("latent", c.nssm.latent);
        c.nssm.horizon = s.get("horizon", c.nssm.horizon);
        if (s.has("hidden")) c.nssm.hidden = sizes_of(s.raw("hidden"), "nssm.hidden");
        s.finish();
    }
    c.nssm.input_dim = static_cast<std::size_t>(p);
    c.nssm.output_dim = static_cast<std::size_t>(m);
    wrap_contract("nssm", [&] { c.nssm.validate(); });

    {
        c.mpc.q = Eigen::MatrixXd::Identity(m, m);
        c.mpc.r = 0.1 * Eigen::MatrixXd::Identity(p, p);
        if (root.has("mpc")) {
            Section s = root.child("mpc");
            c.mpc.horizon = s.get("horizon", c.mpc.horizon);
            c.mpc.q = diagonal_of(s, "q", m, 1.0);
            c.mpc.r = diagonal_of(s, "r", p, 0.1);
            if (s.has("y_min")) c.mpc.y_min = vector_of(s.raw("y_min"), "mpc.y_min");
            if (s.has("y_max")) c.mpc.y_max = vector_of(s.raw("y_max"), "mpc.y_max");
            s.mark("y_min");
            s.mark("y_max");
            c.mpc.max_iter = static_cast<int>(s.get<std::size_t>("max_iter", static_cast<std::size_t>(c.mpc.max_iter)));
            c.mpc.tol = s.get("tol", c.mpc.tol);
            s.finish();
        }
        c.mpc.u_min = spec.u_min;
        c.mpc.u_max = spec.u_max;
        wrap_contract("mpc", [&] { c.mpc.validate(); });
    }

    {
        std::size_t stack = c.family == PlantFamily::BallPlate ? 2 : 1;
        c.dqn.output_scale = c.family == PlantFamily::BallPlate ? 0.1 : 1.0;
        DqnConfig d;
        d.q = Eigen::MatrixXd::Identity(m, m);
        d.r = 0.01 * Eigen::MatrixXd::Identity(p, p);
        std::optional<Eigen::MatrixXd> sigma;
        if (root.has("dqn")) {
            Section s = root.child("dqn");
            c.dqn.grid_points = s.get("grid_points", c.dqn.grid_points);
            c.dqn.output_scale = s.get("output_scale", c.dqn.output_scale);
            stack = s.get("stack_len", stack);
            d.discount = s.get("discount", d.discount);
            d.polyak = s.get("polyak", d.polyak);
            d.q = diagonal_of(s, "q", m, 1.0);
            d.r = diagonal_of(s, "r", p, 0.01);
            d.epsilon_start = s.get("epsilon_start", d.epsilon_start);
            d.epsilon_end = s.get("epsilon_end", d.epsilon_end);
            d.epsilon_adapt = s.get("epsilon_adapt", d.epsilon_adapt);
            if (s.has("hidden")) d.hidden = sizes_of(s.raw("hidden"), "dqn.hidden");
            if (s.has("sigma")) sigma = diagonal_of(s, "sigma", p, 0.0);
            s.mark("sigma");
            s.finish();
        }
        if (c.dqn.grid_points < 1) throw ConfigError("dqn.grid_points must be at least 1");
        if (!(c.dqn.output_scale > 0.0)) throw ConfigError("dqn.output_scale must be positive");
        DqnConfig full = DqnConfig::with_box(spec.u_min, spec.u_max, static_cast<std::size_t>(m), c.dqn.grid_points, stack);
        full.discount = d.discount;
        full.polyak = d.polyak;
        full.q = d.q;
        full.r = d.r;
        full.epsilon_start = d.epsilon_start;
        full.epsilon_end = d.epsilon_end;
        full.epsilon_adapt = d.epsilon_adapt;
        full.hidden = d.hidden;
        if (sigma) full.sigma = *sigma;
        c.dqn.config = full;
        wrap_contract("dqn", [&] { c.dqn.config.validate(); });
    }

    if (root.has("training")) {
        Section s = root.child("training");
        c.training.windows_per_batch = s.get("windows_per_batch", c.training.windows_per_batch);
        c.training.transitions_per_batch = s.get("transitions_per_batch", c.training.transitions_per_batch);
        c.training.collect_steps = s.get("collect_steps", c.training.collect_steps);
        c.training.collect_epsilon = s.get("collect_epsilon", c.training.collect_epsilon);
        s.finish();
        if (c.training.windows_per_batch == 0 || c.training.transitions_per_batch == 0) {
            throw ConfigError("training batch sizes must be at least 1");
        }
        if (c.training.collect_epsilon < 0.0 || c.training.collect_epsilon > 1.0) {
            throw ConfigError("training.collect_epsilon must lie in [0, 1]");
        }
    }

    c.reference.kind = c.family == PlantFamily::VanDerPol ? "circle" : "square";
    if (root.has("reference")) {
        Section s = root.child("reference");
        c.reference.kind = s.get("kind", c.reference.kind);
        c.reference.radius = s.get("radius", c.reference.radius);
        c.reference.period = s.get("period", c.reference.period);
        c.reference.side = s.get("side", c.reference.side);
        c.reference.dwell = s.get("dwell", c.reference.dwell);
        s.finish();
    }
    if (c.reference.kind != "circle" && c.reference.kind != "square") {
        throw ConfigError("reference.kind must be circle or square");
    }
    if (c.reference.period <= 0.0 || c.reference.dwell <= 0.0 || c.reference.radius < 0.0 || c.reference.side < 0.0) {
        throw ConfigError("reference: period and dwell must be positive, radius and side non-negative");
    }

    if (root.has("episode")) {
        Section s = root.child("episode");
        c.episode_steps = s.get("steps", c.episode_steps);
        s.finish();
    }
    if (c.episode_steps < 2) throw ConfigError("episode.steps must be at least 2");

    if (root.has("adapt")) {
        Section s = root.child("adapt");
        if (s.has("steps")) c.adapt_steps = sizes_of(s.raw("steps"), "adapt.steps");
        s.mark("steps");
        if (s.has("variants")) {
            c.variants.clear();
            const json& v = s.raw("variants");
            if (!v.is_array()) throw ConfigError("adapt.variants must be an array of names");
            for (const auto& x : v) {
                if (!x.is_string()) throw ConfigError("adapt.variants must be an array of names");
                c.variants.push_back(x.get<std::string>());
            }
        }
        s.mark("variants");
        s.finish();
    }
    if (c.adapt_steps.empty()) throw ConfigError("adapt.steps must not be empty");
    for (const auto& v : c.variants) parse_variant(v);

    if (root.has("sim2sim")) {
        Section s = root.child("sim2sim");
        c.sim2sim.duration = s.get("duration", c.sim2sim.duration);
        c.sim2sim.update_every = s.get("update_every", c.sim2sim.update_every);
        c.sim2sim.batch = s.get("batch", c.sim2sim.batch);
        c.sim2sim.learning_rate = s.optional_number("learning_rate");
        if (s.has("intermezzo")) {
            Section im = s.child("intermezzo");
            c.sim2sim.intermezzo.enabled = im.get("enabled", c.sim2sim.intermezzo.enabled);
            c.sim2sim.intermezzo.period = im.get("period", c.sim2sim.intermezzo.period);
            c.sim2sim.intermezzo.duration = im.get("duration", c.sim2sim.intermezzo.duration);
            im.finish();
        }
        s.mark("intermezzo");
        s.finish();
        if (c.sim2sim.duration <= 0.0 || c.sim2sim.update_every == 0 || c.sim2sim.batch == 0 ||
            c.sim2sim.intermezzo.period <= 0.0 || c.sim2sim.intermezzo.duration < 0.0) {
            throw ConfigError("sim2sim: duration, update_every, batch and intermezzo period must be positive");
        }
    }
    root.finish();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
    std::string text;
    try {
        text = read_file(file);
    } catch (const std::exception& e) {
        throw ConfigError("cannot read config " + file.string() + ": " + e.what());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + file.string() + " is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

}  // namespace metactl
