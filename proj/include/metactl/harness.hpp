#pragma once

#include "metactl/dataio.hpp"
#include "metactl/dqn.hpp"
#include "metactl/learners.hpp"
#include "metactl/meta.hpp"
#include "metactl/mpc.hpp"
#include "metactl/nssm.hpp"
#include "metactl/plants.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace metactl {

// ---- references and exploration overrides ---------------------------------

struct ReferenceSpec {
    std::string kind = "circle";  ///< circle | square
    double radius = 1.0;
    double period = 20.0;  ///< seconds per revolution
    double side = 0.1;
    double dwell = 10.0;  ///< seconds per corner
};

/// Circle: radius * [cos, -sin] of 2 pi t dt / period. Square: centred corners
/// (+,+), (-,+), (-,-), (+,-) in that order, `dwell` seconds each, repeating.
ReferenceFn make_reference(const ReferenceSpec& spec, double dt);

/// Corners of the square reference in visiting order.
std::vector<Eigen::VectorXd> square_corners(double side);

struct IntermezzoSpec {
    bool enabled = true;
    double period = 10.0;   ///< seconds between overrides
    double duration = 0.5;  ///< seconds per override
};

/// True on rows [k P, k P + D) for k >= 1, with P and D rounded to whole rows.
bool intermezzo_active(const IntermezzoSpec& spec, std::size_t row, double dt);

/// Plate tilt pushing the ball toward the quadrant of `ref` at full deflection.
Eigen::VectorXd intermezzo_input(const Eigen::VectorXd& ref, const PlantSpec& plant);

/// Zero-mean random walk, step std 0.1 u_max, clipped to the input box.
Controller random_walk_excitation(const PlantSpec& plant, std::shared_ptr<Rng> rng);

// ---- configuration --------------------------------------------------------

struct TrainingSpec {
    std::size_t windows_per_batch = 64;
    std::size_t transitions_per_batch = 64;
    std::size_t collect_steps = 0;
    double collect_epsilon = 0.2;
};

struct DqnSpec {
    DqnConfig config;  ///< box, Sigma and grid are filled from the plant
    std::size_t grid_points = 5;
    /// Typical output magnitude; network inputs are y / output_scale and u / u_max.
    double output_scale = 1.0;
};

struct Sim2SimSpec {
    double duration = 150.0;  ///< seconds
    IntermezzoSpec intermezzo;
    std::size_t update_every = 1;
    std::size_t batch = 32;
    std::optional<double> learning_rate;  ///< unset: 1 / (L + gamma) from the first batch
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    PlantFamily family = PlantFamily::VanDerPol;
    ParamDistribution distribution = VdpDistribution{};
    std::size_t num_sources = 10;
    std::size_t source_length = 2000;
    std::size_t target_length = 300;
    std::optional<PlantParams> target_params;
    std::string learner = "nssm-mpc";  ///< nssm-mpc | dqn
    MetaConfig meta;
    NssmConfig nssm;
    MpcConfig mpc;
    DqnSpec dqn;
    TrainingSpec training;
    ReferenceSpec reference;
    std::size_t episode_steps = 252;
    std::vector<std::size_t> adapt_steps{0, 10, 100, 3000};
    std::vector<std::string> variants{"imaml", "maml", "supervised"};
    Sim2SimSpec sim2sim;

    PlantSpec plant_spec() const;
    bool uses_dqn() const { return learner == "dqn"; }
    /// Stage weights used for the mean-cost metric.
    Eigen::MatrixXd cost_q() const;
    Eigen::MatrixXd cost_r() const;
};

/// Throws ConfigError on unknown keys, wrong types or invalid values.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& file);

nlohmann::json params_to_json(const PlantParams& p);
PlantParams params_from_json(const nlohmann::json& j, PlantFamily family);

// ---- data -----------------------------------------------------------------

struct ExperimentData {
    SourceDataset sources;
    std::vector<PlantParams> source_params;
    TaskData target;
    PlantParams target_params;
};

/// N_s excitation runs, one per sampled plant; a diverging run redraws theta (5 retries).
SourceDataset generate_sources(const ExperimentConfig& cfg, std::vector<PlantParams>* params = nullptr);

/// Target plant from its own seed stream (or the configured parameters) and one
/// excitation run of the target length.
TaskData generate_target(const ExperimentConfig& cfg, PlantParams* params = nullptr);

ExperimentData generate_data(const ExperimentConfig& cfg);

/// sources/ and target/ dataset directories, each with params.json.
void save_data(const ExperimentData& data, const std::filesystem::path& dir);

// ---- training and adaptation ----------------------------------------------

enum class Variant { Imaml, Maml, Supervised };
Variant parse_variant(const std::string& s);
std::string variant_label(Variant v);

struct ModelSetup {
    Nssm nssm;
    QNetwork qnet;
    DqnConfig dqn;
    ParamVector init;  ///< shared initial point of every variant
};

ModelSetup make_model(const ExperimentConfig& cfg);

struct TrainedVariant {
    Variant variant = Variant::Imaml;
    ParamVector omega;
    std::vector<MetaLogRow> log;
};

/// Free-text progress messages from long runs.
using ProgressFn = std::function<void(const std::string&)>;

/// Meta-train one variant; supervised returns the random initial point.
TrainedVariant run_metatrain(const ExperimentConfig& cfg, const ExperimentData& data, Variant variant,
                             const ProgressFn& progress = {});

/// Checkpoint under dir/checkpoints/<variant>, log at dir/logs/<variant>.csv.
void save_trained(const ExperimentConfig& cfg, const TrainedVariant& t, const std::filesystem::path& dir);
ParamVector load_trained(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint_dir);

/// Adaptation anchored at omega (gamma for iMAML, 0 otherwise) on the target set.
ParamVector adapt_to_target(const ExperimentConfig& cfg, Variant variant, const ParamVector& omega,
                            const TaskData& target, std::size_t steps);

/// Offline DQN adaptation: gradient steps on the Bellman loss of `transitions`
/// with a Polyak-tracked target, anchored at omega with strength gamma.
ParamVector dqn_adapt(const QNetwork& net, const DqnConfig& config, const ParamVector& omega,
                      const std::vector<Transition>& transitions, double gamma, double beta, std::size_t steps,
                      const StepCallback& on_step = {});

// ---- episodes and metrics -------------------------------------------------

struct EpisodeRecord {
    std::string variant;
    std::size_t steps = 0;  ///< adaptation steps (online updates for sim2sim)
    Trajectory trajectory;
    std::vector<std::string> provenance;  ///< per row: policy | explore | intermezzo (may be empty)
    std::size_t expected_rows = 0;
};

/// Closed-loop reference tracking on `plant` with the controller built from params.
EpisodeRecord run_episode(const ExperimentConfig& cfg, const Plant& plant, const std::string& variant,
                          std::size_t steps, const ParamVector& params);

struct SummaryRow {
    std::string variant;
    std::size_t steps = 0;
    double mse = 0.0;
    double mean_cost = 0.0;
    bool diverged = false;
};

struct MetricsReport {
    std::vector<EpisodeRecord> episodes;
    std::vector<SummaryRow> summary;
    double dt = 0.0;
};

/// Mean over rows and output entries of (y - r)^2. Rows lost to divergence count guard^2 per entry.
double tracking_mse(const Trajectory& traj, std::size_t expected_rows, double guard);
/// Mean stage cost over rows 1.. ; lost rows cost guard^2 tr(Q).
double mean_stage_cost(const Trajectory& traj, std::size_t expected_rows, double guard, const Eigen::MatrixXd& q,
                       const Eigen::MatrixXd& r);

/// Summary rows from the stored episodes.
std::vector<SummaryRow> summarize(const std::vector<EpisodeRecord>& episodes, double guard, const Eigen::MatrixXd& q,
                                  const Eigen::MatrixXd& r);

/// summary.csv plus tracking_<variant>_<steps>.csv per episode.
void emit_plotdata(const MetricsReport& report, const std::filesystem::path& dir);

std::string summary_csv(const std::vector<SummaryRow>& rows);

/// Episodes read back from tracking files in `dir`, with the summary recomputed.
MetricsReport load_report(const std::filesystem::path& dir, std::size_t expected_rows, double guard,
                          const Eigen::MatrixXd& q, const Eigen::MatrixXd& r);

// ---- experiments ----------------------------------------------------------

/// One trained variant, episodes after each adaptation step count.
MetricsReport run_adapt_sweep(const ExperimentConfig& cfg, const ExperimentData& data, const TrainedVariant& trained,
                              const std::vector<std::size_t>& steps_list);

/// Every configured variant trained under the same seed and budget, compared at
/// each adaptation step count. Artifacts land under `out` when given.
MetricsReport run_compare(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out = {},
                          const ProgressFn& progress = {});

struct OnlineResult {
    EpisodeRecord episode;
    std::size_t updates = 0;
};

/// Online DQN on the target plant for the sim2sim duration: epsilon-greedy with the
/// adaptation epsilon, scripted intermezzos, one regularized gradient step plus a
/// Polyak update every `update_every` rows on a replay batch.
OnlineResult run_online(const ExperimentConfig& cfg, const Plant& plant, const std::string& label,
                        const ParamVector& omega, double gamma, std::uint64_t stream);

/// Pretrained (iMAML on the sources) against scratch on the held-out target plant.
MetricsReport run_sim2sim(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out = {},
                          const ProgressFn& progress = {});

}  // namespace metactl
