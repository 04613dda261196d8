#include "metactl/harness.hpp"

#include "metactl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

namespace metactl {

namespace {

// seed streams
constexpr std::uint64_t kSources = 1;
constexpr std::uint64_t kTarget = 2;
constexpr std::uint64_t kInit = 3;
constexpr std::uint64_t kTrain = 4;
constexpr std::uint64_t kAdapt = 5;
constexpr std::uint64_t kOnline = 6;

constexpr int kMaxRetries = 5;

std::size_t rows_for(double seconds, double dt) { return static_cast<std::size_t>(std::llround(seconds / dt)); }

Eigen::VectorXd random_initial_state(PlantFamily family, Rng& rng) {
    if (family == PlantFamily::VanDerPol) {
        std::uniform_real_distribution<double> u(-2.0, 2.0);
        return Eigen::Vector2d(u(rng), u(rng));
    }
    std::uniform_real_distribution<double> pos(-0.1, 0.1);
    Eigen::VectorXd x = Eigen::VectorXd::Zero(4);
    x(0) = pos(rng);
    x(2) = pos(rng);
    return x;
}

Eigen::VectorXd episode_initial_state(const ExperimentConfig& cfg) {
    if (cfg.family == PlantFamily::VanDerPol) {
        // on the circle where the reference starts
        return Eigen::Vector2d(cfg.reference.kind == "circle" ? cfg.reference.radius : 0.0, 0.0);
    }
    return Eigen::VectorXd::Zero(4);
}

// Excitation run on a freshly drawn plant; divergence redraws the parameters.
std::pair<Trajectory, PlantParams> excite(const ExperimentConfig& cfg, const std::optional<PlantParams>& fixed,
                                          std::size_t length, const std::string& tag, Rng& rng) {
    const PlantSpec spec = cfg.plant_spec();
    for (int attempt = 0; attempt <= kMaxRetries; ++attempt) {
        PlantParams params = fixed ? *fixed : sample_params(cfg.distribution, rng);
        Plant plant(spec, params);
        const Eigen::VectorXd x0 = random_initial_state(cfg.family, rng);
        auto walk_rng = std::make_shared<Rng>(rng());
        SimResult res = simulate(plant, x0, random_walk_excitation(spec, walk_rng), {}, length, {}, tag);
        if (!res.diverged) return {std::move(res.trajectory), params};
        std::cerr << "warning: excitation of " << tag << " diverged at row " << res.diverged_at << " with "
                  << params_to_json(params).dump() << "; redrawing\n";
        if (fixed) break;
    }
    throw SimulationError("excitation of " + tag + " kept diverging after " + std::to_string(kMaxRetries) +
                          " redraws");
}

std::vector<Eigen::VectorXd> tracking_goals(const ExperimentConfig& cfg) {
    const PlantSpec spec = cfg.plant_spec();
    if (cfg.reference.kind == "square") return square_corners(cfg.reference.side);
    ReferenceFn ref = make_reference(cfg.reference, spec.dt);
    const std::size_t stride = std::max<std::size_t>(1, cfg.episode_steps / 64);
    std::vector<Eigen::VectorXd> goals;
    for (std::size_t t = 0; t < cfg.episode_steps; t += stride) goals.push_back(ref(t));
    return goals;
}

std::vector<Transition> relabel(std::vector<Transition> trs, const std::vector<Eigen::VectorXd>& goals, Rng& rng) {
    if (goals.empty()) return trs;
    std::uniform_int_distribution<std::size_t> pick(0, goals.size() - 1);
    for (auto& tr : trs) {
        tr.ref = goals[pick(rng)];
        tr.ref_next = tr.ref;
    }
    return trs;
}

CollectOptions collect_options(const ExperimentConfig& cfg) {
    const PlantSpec spec = cfg.plant_spec();
    CollectOptions c;
    c.steps = cfg.training.collect_steps;
    c.epsilon = cfg.training.collect_epsilon;
    c.sigma = (0.5 * spec.u_max).array().square().matrix().asDiagonal();
    c.reference = make_reference(cfg.reference, spec.dt);
    const PlantFamily family = cfg.family;
    c.initial_state = [family](Rng& rng) { return random_initial_state(family, rng); };
    return c;
}

std::vector<Plant> source_plants(const ExperimentConfig& cfg, const ExperimentData& data) {
    std::vector<Plant> out;
    for (const auto& p : data.source_params) out.emplace_back(cfg.plant_spec(), p);
    return out;
}

double adapt_rate(const ExperimentConfig& cfg, const ScalarLossFn& loss, const ParamVector& omega, double gamma,
                  Rng& rng) {
    return inner_step_size(loss, omega, gamma, cfg.meta, rng);
}

// Snapshots of one adaptation run at each requested step count.
std::vector<ParamVector> adapt_snapshots(const ExperimentConfig& cfg, Variant variant, const ParamVector& omega,
                                         const TaskData& target, const std::vector<std::size_t>& steps_list) {
    const ModelSetup m = make_model(cfg);
    const double gamma = variant == Variant::Imaml ? cfg.meta.reg_strength : 0.0;
    const std::size_t last = *std::max_element(steps_list.begin(), steps_list.end());
    Rng rng = make_rng(cfg.seed, kAdapt);
    std::vector<ParamVector> at(last + 1);
    auto keep = [&](std::size_t k, const ParamVector& psi) {
        if (std::find(steps_list.begin(), steps_list.end(), k) != steps_list.end()) at[k] = psi;
    };
    try {
        if (!cfg.uses_dqn()) {
            const ScalarLossFn loss = nssm_dataset_loss(m.nssm, target);
            const double beta = last == 0 ? 0.0 : adapt_rate(cfg, loss, omega, gamma, rng);
            meta_adapt(loss, omega, gamma, beta, last, keep);
        } else {
            const auto trs = relabel(dataset_transitions(target, m.dqn.stack_len), tracking_goals(cfg), rng);
            if (trs.empty()) throw ContractError("adaptation: target set holds no transition");
            const ScalarLossFn first = make_dqn_loss(m.qnet, make_dqn_batch(m.qnet, omega, trs, m.dqn));
            const double beta = last == 0 ? 0.0 : adapt_rate(cfg, first, omega, gamma, rng);
            dqn_adapt(m.qnet, m.dqn, omega, trs, gamma, beta, last, keep);
        }
    } catch (const NonFiniteError& e) {
        // later snapshots stay empty and become fully diverged episodes
        std::cerr << "warning: " << variant_label(variant) << " adaptation failed at step " << e.step() << ": "
                  << e.what() << "\n";
    }
    std::vector<ParamVector> out;
    for (std::size_t s : steps_list) out.push_back(at[s]);
    return out;
}

std::string tracking_name(const std::string& variant, std::size_t steps) {
    return "tracking_" + variant + "_" + std::to_string(steps) + ".csv";
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, sep)) out.push_back(cell);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

double parse_real(const std::string& s, const std::filesystem::path& file) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DatasetError(DatasetError::Kind::Malformed, file.string() + ": bad number '" + s + "'");
    }
}

EpisodeRecord read_tracking(const std::filesystem::path& file) {
    const std::string name = file.stem().string();
    const auto cut = name.rfind('_');
    if (name.rfind("tracking_", 0) != 0 || cut == std::string::npos || cut <= 9) {
        throw DatasetError(DatasetError::Kind::Malformed, file.string() + ": not a tracking file name");
    }
    EpisodeRecord ep;
    ep.variant = name.substr(9, cut - 9);
    ep.steps = static_cast<std::size_t>(parse_real(name.substr(cut + 1), file));

    std::istringstream in(read_file(file));
    std::string line;
    if (!std::getline(in, line)) throw DatasetError(DatasetError::Kind::Malformed, file.string() + ": empty");
    const auto header = split(line, ',');
    std::size_t nr = 0, ny = 0, nu = 0;
    bool has_source = false;
    for (const auto& h : header) {
        if (h.rfind("ref_", 0) == 0) ++nr;
        else if (h.rfind("y_", 0) == 0) ++ny;
        else if (h.rfind("u_", 0) == 0) ++nu;
        else if (h == "source") has_source = true;
    }
    if (header.empty() || header[0] != "t" || nr != ny || 1 + nr + ny + nu + (has_source ? 1 : 0) != header.size()) {
        throw DatasetError(DatasetError::Kind::Malformed, file.string() + ": unexpected header");
    }
    Trajectory& traj = ep.trajectory;
    std::vector<double> times;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split(line, ',');
        if (cells.size() != header.size()) throw DatasetError(DatasetError::Kind::Malformed, file.string() + ": ragged row");
        times.push_back(parse_real(cells[0], file));
        Eigen::VectorXd r(static_cast<Eigen::Index>(nr)), y(static_cast<Eigen::Index>(ny)), u(static_cast<Eigen::Index>(nu));
        std::size_t c = 1;
        for (Eigen::Index i = 0; i < r.size(); ++i) r(i) = parse_real(cells[c++], file);
        for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = parse_real(cells[c++], file);
        for (Eigen::Index i = 0; i < u.size(); ++i) u(i) = parse_real(cells[c++], file);
        traj.push(u, y);
        traj.references.push_back(r);
        if (has_source) ep.provenance.push_back(cells[c]);
    }
    if (times.size() >= 2) traj.dt = times[1] - times[0];
    return ep;
}

}  // namespace

// ---- references -----------------------------------------------------------

ReferenceFn make_reference(const ReferenceSpec& spec, double dt) {
    if (spec.kind == "circle") {
        const double w = 2.0 * std::numbers::pi / spec.period;
        const double radius = spec.radius;
        return [w, radius, dt](std::size_t t) {
            const double a = w * static_cast<double>(t) * dt;
            return Eigen::Vector2d(radius * std::cos(a), -radius * std::sin(a)).eval();
        };
    }
    if (spec.kind == "square") {
        const auto corners = square_corners(spec.side);
        const std::size_t dwell = std::max<std::size_t>(1, rows_for(spec.dwell, dt));
        return [corners, dwell](std::size_t t) -> Eigen::VectorXd { return corners[(t / dwell) % corners.size()]; };
    }
    throw ContractError("make_reference: unknown reference kind '" + spec.kind + "'");
}

std::vector<Eigen::VectorXd> square_corners(double side) {
    const double h = side / 2.0;
    return {Eigen::Vector2d(h, h), Eigen::Vector2d(-h, h), Eigen::Vector2d(-h, -h), Eigen::Vector2d(h, -h)};
}

bool intermezzo_active(const IntermezzoSpec& spec, std::size_t row, double dt) {
    if (!spec.enabled) return false;
    const std::size_t period = std::max<std::size_t>(1, rows_for(spec.period, dt));
    const std::size_t duration = rows_for(spec.duration, dt);
    return row >= period && row % period < duration;
}

Eigen::VectorXd intermezzo_input(const Eigen::VectorXd& ref, const PlantSpec& plant) {
    if (plant.family != PlantFamily::BallPlate) throw ContractError("intermezzo_input: ball-plate only");
    auto sgn = [](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); };
    // alpha accelerates y negatively, beta accelerates x positively
    return Eigen::Vector2d(-plant.u_max(0) * sgn(ref(1)), plant.u_max(1) * sgn(ref(0)));
}

Controller random_walk_excitation(const PlantSpec& plant, std::shared_ptr<Rng> rng) {
    const Eigen::VectorXd step_std = 0.1 * plant.u_max;
    return [plant, rng, step_std](const Trajectory& history) -> Eigen::VectorXd {
        std::normal_distribution<double> n01;
        Eigen::VectorXd u = history.inputs.back();
        for (Eigen::Index i = 0; i < u.size(); ++i) u(i) += step_std(i) * n01(*rng);
        return u.cwiseMax(plant.u_min).cwiseMin(plant.u_max);
    };
}

// ---- data -----------------------------------------------------------------

SourceDataset generate_sources(const ExperimentConfig& cfg, std::vector<PlantParams>* params) {
    Rng rng = make_rng(cfg.seed, kSources);
    SourceDataset ds;
    if (params) params->clear();
    for (std::size_t k = 0; k < cfg.num_sources; ++k) {
        const std::string id = "source_" + std::to_string(k);
        auto [traj, p] = excite(cfg, std::nullopt, cfg.source_length, id, rng);
        TaskData task;
        task.id = id;
        task.dt = traj.dt;
        task.trajectories.push_back(std::make_shared<const Trajectory>(std::move(traj)));
        ds.tasks.push_back(std::move(task));
        if (params) params->push_back(p);
    }
    return ds;
}

TaskData generate_target(const ExperimentConfig& cfg, PlantParams* params) {
    Rng rng = make_rng(cfg.seed, kTarget);
    auto [traj, p] = excite(cfg, cfg.target_params, cfg.target_length, "target", rng);
    TaskData task;
    task.id = "target";
    task.dt = traj.dt;
    task.trajectories.push_back(std::make_shared<const Trajectory>(std::move(traj)));
    if (params) *params = p;
    return task;
}

ExperimentData generate_data(const ExperimentConfig& cfg) {
    ExperimentData d;
    d.sources = generate_sources(cfg, &d.source_params);
    d.target = generate_target(cfg, &d.target_params);
    return d;
}

void save_data(const ExperimentData& data, const std::filesystem::path& dir) {
    save_dataset(data.sources, dir / "sources");
    nlohmann::json sp = nlohmann::json::object();
    for (std::size_t k = 0; k < data.sources.tasks.size(); ++k) {
        sp[data.sources.tasks[k].id] = params_to_json(data.source_params.at(k));
    }
    write_file_atomic(dir / "sources" / "params.json", sp.dump(2) + "\n");
    SourceDataset target;
    target.tasks.push_back(data.target);
    save_dataset(target, dir / "target");
    write_file_atomic(dir / "target" / "params.json",
                      nlohmann::json{{"target", params_to_json(data.target_params)}}.dump(2) + "\n");
}

// ---- training -------------------------------------------------------------

Variant parse_variant(const std::string& s) {
    if (s == "imaml") return Variant::Imaml;
    if (s == "maml") return Variant::Maml;
    if (s == "supervised") return Variant::Supervised;
    throw ConfigError("unknown variant '" + s + "' (imaml, maml, supervised)");
}

std::string variant_label(Variant v) {
    switch (v) {
        case Variant::Imaml: return "imaml";
        case Variant::Maml: return "maml";
        case Variant::Supervised: return "supervised";
    }
    return "?";
}

ModelSetup make_model(const ExperimentConfig& cfg) {
    ModelSetup m{Nssm(cfg.nssm), QNetwork(), cfg.dqn.config, {}};
    Rng rng = make_rng(cfg.seed, kInit);
    if (cfg.uses_dqn()) {
        m.qnet = QNetwork(m.dqn.observation_dim(), m.dqn.input_dim(), m.dqn.hidden);
        const auto y = static_cast<Eigen::Index>(m.dqn.output_dim() * m.dqn.stack_len);
        const Eigen::VectorXd u = m.dqn.u_max.cwiseInverse();
        Eigen::VectorXd scale(y + 2 * u.size());
        scale << Eigen::VectorXd::Constant(y, 1.0 / cfg.dqn.output_scale), u, u;
        m.qnet.set_input_scale(scale);
        m.init = m.qnet.init(rng);
    } else {
        m.init = m.nssm.init(rng);
    }
    return m;
}

TrainedVariant run_metatrain(const ExperimentConfig& cfg, const ExperimentData& data, Variant variant,
                             const ProgressFn& progress) {
    const ModelSetup m = make_model(cfg);
    TrainedVariant out;
    out.variant = variant;
    if (variant == Variant::Supervised) {
        out.omega = m.init;
        return out;
    }
    Rng rng = make_rng(cfg.seed, kTrain);
    const MetaVariant mv = variant == Variant::Imaml ? MetaVariant::Imaml : MetaVariant::Maml;
    std::vector<Plant> plants = cfg.training.collect_steps > 0 ? source_plants(cfg, data) : std::vector<Plant>{};
    const std::string label = variant_label(variant);
    auto report = [&](const MetaLogRow& row) {
        if (!progress) return;
        if (row.iteration == 1 || row.iteration % 50 == 0 || row.iteration == cfg.meta.k_train) {
            std::ostringstream msg;
            msg << label << " iter " << row.iteration << " outer_loss " << row.outer_loss << " grad_norm "
                << row.grad_norm << " (" << row.wall_seconds << " s)";
            progress(msg.str());
        }
    };
    MetaTrainResult res;
    if (cfg.uses_dqn()) {
        DqnLearner::Options opt;
        opt.transitions_per_batch = cfg.training.transitions_per_batch;
        opt.ring_capacity = cfg.meta.ring_capacity;
        opt.collect = collect_options(cfg);
        opt.goals = tracking_goals(cfg);
        DqnLearner learner(m.qnet, m.dqn, data.sources, std::move(plants), m.init, opt);
        res = meta_train(learner, m.init, cfg.meta, mv, rng, report);
    } else {
        NssmLearner::Options opt;
        opt.windows_per_batch = cfg.training.windows_per_batch;
        opt.ring_capacity = cfg.meta.ring_capacity;
        opt.collect = collect_options(cfg);
        opt.mpc = cfg.mpc;
        NssmLearner learner(m.nssm, data.sources, std::move(plants), opt);
        res = meta_train(learner, m.init, cfg.meta, mv, rng, report);
    }
    if (res.skipped_appends > 0) {
        std::cerr << "warning: " << res.skipped_appends << " collected trajectories diverged and were dropped\n";
    }
    out.omega = std::move(res.omega);
    out.log = std::move(res.log);
    return out;
}

void save_trained(const ExperimentConfig& cfg, const TrainedVariant& t, const std::filesystem::path& dir) {
    const ModelSetup m = make_model(cfg);
    const std::filesystem::path ck = dir / "checkpoints" / variant_label(t.variant);
    if (cfg.uses_dqn()) {
        save_qnet(ck, m.qnet, t.omega);
    } else {
        save_nssm(ck, m.nssm, t.omega);
    }
    std::filesystem::create_directories(dir / "logs");
    write_training_log(dir / "logs" / (variant_label(t.variant) + ".csv"), t.log);
}

ParamVector load_trained(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint_dir) {
    const ModelSetup m = make_model(cfg);
    ParamVector p = cfg.uses_dqn() ? load_qnet(checkpoint_dir).second : load_nssm(checkpoint_dir).second;
    if (p.size() != m.init.size()) {
        throw ConfigError("checkpoint " + checkpoint_dir.string() + " holds " + std::to_string(p.size()) +
                          " parameters; the configured model has " + std::to_string(m.init.size()));
    }
    return p;
}

ParamVector adapt_to_target(const ExperimentConfig& cfg, Variant variant, const ParamVector& omega,
                            const TaskData& target, std::size_t steps) {
    return adapt_snapshots(cfg, variant, omega, target, {steps}).front();
}

ParamVector dqn_adapt(const QNetwork& net, const DqnConfig& config, const ParamVector& omega,
                      const std::vector<Transition>& transitions, double gamma, double beta, std::size_t steps,
                      const StepCallback& on_step) {
    ParamVector psi = omega, tgt = omega;
    if (on_step) on_step(0, psi);
    for (std::size_t k = 1; k <= steps; ++k) {
        const ScalarLossFn loss = make_dqn_loss(net, make_dqn_batch(net, tgt, transitions, config));
        psi -= beta * (grad(loss, psi) + gamma * (psi - omega));
        if (!psi.allFinite()) throw NonFiniteError("dqn adaptation diverged", 0.0, static_cast<std::ptrdiff_t>(k));
        tgt = polyak_update(tgt, psi, config.polyak);
        if (on_step) on_step(k, psi);
    }
    return psi;
}

// ---- episodes and metrics -------------------------------------------------

EpisodeRecord run_episode(const ExperimentConfig& cfg, const Plant& plant, const std::string& variant,
                          std::size_t steps, const ParamVector& params) {
    const ModelSetup m = make_model(cfg);
    const ReferenceFn ref = make_reference(cfg.reference, plant.spec().dt);
    Controller ctrl;
    if (cfg.uses_dqn()) {
        ctrl = dqn_policy(m.qnet, params, m.dqn, ref);
    } else {
        ctrl = mpc_policy(std::make_shared<MpcController>(m.nssm, params, cfg.mpc), ref, plant);
    }
    SimResult res = simulate(plant, episode_initial_state(cfg), ctrl, ref, cfg.episode_steps, {}, variant);
    EpisodeRecord ep;
    ep.variant = variant;
    ep.steps = steps;
    ep.trajectory = std::move(res.trajectory);
    ep.expected_rows = cfg.episode_steps;
    return ep;
}

double tracking_mse(const Trajectory& traj, std::size_t expected_rows, double guard) {
    if (expected_rows == 0) throw ContractError("tracking_mse: empty episode");
    if (traj.size() > expected_rows || traj.references.size() != traj.size()) {
        throw ContractError("tracking_mse: trajectory rows and references disagree");
    }
    const double m = traj.empty() ? 2.0 : static_cast<double>(traj.output_dim());
    double sum = 0.0;
    for (std::size_t t = 0; t < traj.size(); ++t) sum += (traj.outputs[t] - traj.references[t]).squaredNorm();
    sum += static_cast<double>(expected_rows - traj.size()) * m * guard * guard;
    return sum / (static_cast<double>(expected_rows) * m);
}

double mean_stage_cost(const Trajectory& traj, std::size_t expected_rows, double guard, const Eigen::MatrixXd& q,
                       const Eigen::MatrixXd& r) {
    if (expected_rows < 2) throw ContractError("mean_stage_cost: needs at least two rows");
    if (traj.size() > expected_rows || traj.references.size() != traj.size()) {
        throw ContractError("mean_stage_cost: trajectory rows and references disagree");
    }
    double sum = 0.0;
    for (std::size_t t = 1; t < traj.size(); ++t) {
        sum += stage_cost(traj.outputs[t], traj.references[t], traj.inputs[t], traj.inputs[t - 1], q, r);
    }
    const std::size_t present = std::max<std::size_t>(traj.size(), 1);
    sum += static_cast<double>(expected_rows - present) * guard * guard * q.trace();
    return sum / static_cast<double>(expected_rows - 1);
}

std::vector<SummaryRow> summarize(const std::vector<EpisodeRecord>& episodes, double guard, const Eigen::MatrixXd& q,
                                  const Eigen::MatrixXd& r) {
    std::vector<SummaryRow> out;
    for (const auto& ep : episodes) {
        SummaryRow row;
        row.variant = ep.variant;
        row.steps = ep.steps;
        row.mse = tracking_mse(ep.trajectory, ep.expected_rows, guard);
        row.mean_cost = mean_stage_cost(ep.trajectory, ep.expected_rows, guard, q, r);
        row.diverged = ep.trajectory.size() < ep.expected_rows;
        out.push_back(row);
    }
    return out;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::string s = "variant,steps,mse,mean_cost,diverged\n";
    for (const auto& r : rows) {
        s += r.variant + "," + std::to_string(r.steps) + "," + format_real(r.mse) + "," + format_real(r.mean_cost) + "," +
             (r.diverged ? "1" : "0") + "\n";
    }
    return s;
}

void emit_plotdata(const MetricsReport& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_file_atomic(dir / "summary.csv", summary_csv(report.summary));
    for (const auto& ep : report.episodes) {
        const Trajectory& tr = ep.trajectory;
        const std::size_t m = tr.empty() ? 2 : tr.output_dim();
        const std::size_t p = tr.empty() ? 1 : tr.input_dim();
        std::string s = "t";
        for (std::size_t i = 0; i < m; ++i) s += ",ref_" + std::to_string(i);
        for (std::size_t i = 0; i < m; ++i) s += ",y_" + std::to_string(i);
        for (std::size_t i = 0; i < p; ++i) s += ",u_" + std::to_string(i);
        const bool tagged = !ep.provenance.empty();
        if (tagged) s += ",source";
        s += "\n";
        for (std::size_t t = 0; t < tr.size(); ++t) {
            s += format_real(static_cast<double>(t) * report.dt);
            for (Eigen::Index i = 0; i < tr.references[t].size(); ++i) s += "," + format_real(tr.references[t](i));
            for (Eigen::Index i = 0; i < tr.outputs[t].size(); ++i) s += "," + format_real(tr.outputs[t](i));
            for (Eigen::Index i = 0; i < tr.inputs[t].size(); ++i) s += "," + format_real(tr.inputs[t](i));
            if (tagged) s += "," + ep.provenance.at(t);
            s += "\n";
        }
        write_file_atomic(dir / tracking_name(ep.variant, ep.steps), s);
    }
}

MetricsReport load_report(const std::filesystem::path& dir, std::size_t expected_rows, double guard,
                          const Eigen::MatrixXd& q, const Eigen::MatrixXd& r) {
    // summary.csv fixes the episode order
    std::istringstream in(read_file(dir / "summary.csv"));
    std::string line;
    std::getline(in, line);
    MetricsReport rep;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split(line, ',');
        if (cells.size() != 5) throw DatasetError(DatasetError::Kind::Malformed, "summary.csv: ragged row");
        const auto steps = static_cast<std::size_t>(parse_real(cells[1], dir / "summary.csv"));
        EpisodeRecord ep = read_tracking(dir / tracking_name(cells[0], steps));
        ep.expected_rows = expected_rows;
        if (rep.dt == 0.0) rep.dt = ep.trajectory.dt;
        rep.episodes.push_back(std::move(ep));
    }
    rep.summary = summarize(rep.episodes, guard, q, r);
    return rep;
}

// ---- experiments ----------------------------------------------------------

MetricsReport run_adapt_sweep(const ExperimentConfig& cfg, const ExperimentData& data, const TrainedVariant& trained,
                              const std::vector<std::size_t>& steps_list) {
    const PlantSpec spec = cfg.plant_spec();
    const Plant plant(spec, data.target_params);
    MetricsReport rep;
    rep.dt = spec.dt;
    const std::string label = variant_label(trained.variant);
    const std::vector<ParamVector> adapted = adapt_snapshots(cfg, trained.variant, trained.omega, data.target, steps_list);
    for (std::size_t i = 0; i < steps_list.size(); ++i) {
        if (adapted[i].size() == 0) {
            EpisodeRecord ep;
            ep.variant = label;
            ep.steps = steps_list[i];
            ep.expected_rows = cfg.episode_steps;
            rep.episodes.push_back(std::move(ep));
            continue;
        }
        rep.episodes.push_back(run_episode(cfg, plant, label, steps_list[i], adapted[i]));
    }
    rep.summary = summarize(rep.episodes, spec.guard, cfg.cost_q(), cfg.cost_r());
    return rep;
}

MetricsReport run_compare(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out,
                          const ProgressFn& progress) {
    const ExperimentData data = generate_data(cfg);
    if (out) save_data(data, *out);
    MetricsReport rep;
    rep.dt = cfg.plant_spec().dt;
    for (const auto& name : cfg.variants) {
        const TrainedVariant trained = run_metatrain(cfg, data, parse_variant(name), progress);
        if (out) save_trained(cfg, trained, *out);
        MetricsReport part = run_adapt_sweep(cfg, data, trained, cfg.adapt_steps);
        if (progress) {
            for (const auto& row : summarize(part.episodes, cfg.plant_spec().guard, cfg.cost_q(), cfg.cost_r())) {
                progress(row.variant + " steps " + std::to_string(row.steps) + " mse " + format_real(row.mse) +
                         (row.diverged ? " (diverged)" : ""));
            }
        }
        for (auto& ep : part.episodes) rep.episodes.push_back(std::move(ep));
    }
    rep.summary = summarize(rep.episodes, cfg.plant_spec().guard, cfg.cost_q(), cfg.cost_r());
    if (out) emit_plotdata(rep, *out);
    return rep;
}

OnlineResult run_online(const ExperimentConfig& cfg, const Plant& plant, const std::string& label,
                        const ParamVector& omega, double gamma, std::uint64_t stream) {
    if (!cfg.uses_dqn()) throw ConfigError("sim2sim needs learner = dqn");
    const ModelSetup m = make_model(cfg);
    const DqnConfig& dq = m.dqn;
    const double dt = plant.spec().dt;
    const std::size_t rows = rows_for(cfg.sim2sim.duration, dt) + 1;
    const ReferenceFn ref = make_reference(cfg.reference, dt);
    auto rng = std::make_shared<Rng>(derive_seed(cfg.seed, stream));

    ParamVector psi = omega, tgt = omega;
    std::vector<Transition> buffer;
    std::vector<std::string> provenance{"policy"};
    std::optional<double> beta = cfg.sim2sim.learning_rate;
    std::size_t updates = 0;
    const std::size_t s = dq.stack_len;

    Controller ctrl = [&](const Trajectory& h) -> Eigen::VectorXd {
        const std::size_t t = h.size() - 1;
        if (t >= 1) {
            Transition tr;
            tr.y = stacked_outputs(h, t - 1, s);
            tr.u_prev = h.inputs[t - 1];
            tr.u = h.inputs[t];
            tr.y_next = stacked_outputs(h, t, s);
            tr.ref = ref(t - 1);
            tr.ref_next = ref(t);
            buffer.push_back(std::move(tr));
        }
        if (buffer.size() >= cfg.sim2sim.batch && t % cfg.sim2sim.update_every == 0) {
            const auto batch = sample_without_replacement(buffer, cfg.sim2sim.batch, *rng);
            const ScalarLossFn loss = make_dqn_loss(m.qnet, make_dqn_batch(m.qnet, tgt, batch, dq));
            if (!beta) beta = 1.0 / (estimate_curvature(loss, psi, cfg.meta.power_iters, *rng) + gamma);
            psi -= *beta * (grad(loss, psi) + gamma * (psi - omega));
            if (!psi.allFinite()) throw NonFiniteError("online adaptation diverged", 0.0, static_cast<std::ptrdiff_t>(t));
            tgt = polyak_update(tgt, psi, dq.polyak);
            ++updates;
        }
        if (intermezzo_active(cfg.sim2sim.intermezzo, t + 1, dt)) {
            provenance.push_back("intermezzo");
            return intermezzo_input(ref(t + 1), plant.spec());
        }
        const Eigen::VectorXd obs = observation(stacked_outputs(h, t, s), ref(t), h.inputs.back());
        bool explored = false;
        Eigen::VectorXd u = epsilon_greedy(m.qnet, psi, obs, dq, dq.epsilon_adapt, *rng, &explored);
        provenance.push_back(explored ? "explore" : "policy");
        return u;
    };
    SimResult res = simulate(plant, episode_initial_state(cfg), ctrl, ref, rows, {}, label);
    OnlineResult out;
    out.updates = updates;
    out.episode.variant = label;
    out.episode.steps = updates;
    out.episode.trajectory = std::move(res.trajectory);
    provenance.resize(out.episode.trajectory.size());
    out.episode.provenance = std::move(provenance);
    out.episode.expected_rows = rows;
    return out;
}

MetricsReport run_sim2sim(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out,
                          const ProgressFn& progress) {
    if (!cfg.uses_dqn()) throw ConfigError("sim2sim needs learner = dqn");
    const ExperimentData data = generate_data(cfg);
    if (out) save_data(data, *out);
    const ModelSetup m = make_model(cfg);
    const TrainedVariant pre = run_metatrain(cfg, data, Variant::Imaml, progress);
    if (out) save_trained(cfg, pre, *out);
    const Plant plant(cfg.plant_spec(), data.target_params);

    MetricsReport rep;
    rep.dt = cfg.plant_spec().dt;
    rep.episodes.push_back(run_online(cfg, plant, "pretrained", pre.omega, cfg.meta.reg_strength, kOnline).episode);
    rep.episodes.push_back(run_online(cfg, plant, "scratch", m.init, 0.0, kOnline).episode);
    rep.summary = summarize(rep.episodes, cfg.plant_spec().guard, cfg.cost_q(), cfg.cost_r());
    if (progress) {
        for (const auto& row : rep.summary) progress(row.variant + " mean_cost " + format_real(row.mean_cost));
    }
    if (out) {
        emit_plotdata(rep, *out);
        const nlohmann::json info{{"intermezzo", cfg.sim2sim.intermezzo.enabled},
                                  {"intermezzo_period", cfg.sim2sim.intermezzo.period},
                                  {"intermezzo_duration", cfg.sim2sim.intermezzo.duration},
                                  {"target", params_to_json(data.target_params)}};
        write_file_atomic(*out / "sim2sim.json", info.dump(2) + "\n");
    }
    return rep;
}

}  // namespace metactl
