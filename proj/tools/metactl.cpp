// metactl: dataset generation, meta-training, adaptation and closed-loop experiments.

#include "metactl/errors.hpp"
#include "metactl/harness.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>

using namespace metactl;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kDiverged = 2;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("-c,--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "override the config seed");
    cmd->add_option("-o,--out", c.out, "artifact directory")->capture_default_str();
    cmd->add_flag("-q,--quiet", c.quiet, "no progress messages");
}

ExperimentConfig load(const Common& c) {
    ExperimentConfig cfg = load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    return cfg;
}

ProgressFn printer(const Common& c) {
    if (c.quiet) return {};
    const auto start = std::chrono::steady_clock::now();
    return [start](const std::string& msg) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::cerr << "[" << static_cast<long>(s) << "s] " << msg << "\n";
    };
}

void print_summary(const MetricsReport& rep) { std::cout << summary_csv(rep.summary); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"meta-learned controllers on parametric plants"};
    app.require_subcommand(1);

    Common gen_c, train_c, adapt_c, control_c, compare_c, s2s_c;

    auto* gen = app.add_subcommand("gen", "generate source and target datasets");
    add_common(gen, gen_c);

    auto* train = app.add_subcommand("metatrain", "meta-train one variant and write its checkpoint");
    add_common(train, train_c);
    std::string train_variant = "imaml";
    train->add_option("--variant", train_variant, "imaml | maml | supervised")->capture_default_str();

    auto* adapt = app.add_subcommand("adapt", "adaptation sweep of a checkpoint on the target plant");
    add_common(adapt, adapt_c);
    std::string adapt_variant = "imaml";
    std::string adapt_ckpt;
    std::vector<std::size_t> adapt_steps;
    adapt->add_option("--variant", adapt_variant, "adaptation rule to apply")->capture_default_str();
    adapt->add_option("--checkpoint", adapt_ckpt, "checkpoint directory (default <out>/checkpoints/<variant>)");
    adapt->add_option("--steps", adapt_steps, "adaptation step counts (default from config)");

    auto* control = app.add_subcommand("control", "one closed-loop episode after adaptation");
    add_common(control, control_c);
    std::string control_variant = "imaml";
    std::string control_ckpt;
    std::optional<std::size_t> control_steps;
    control->add_option("--variant", control_variant, "adaptation rule to apply")->capture_default_str();
    control->add_option("--checkpoint", control_ckpt, "checkpoint directory (default <out>/checkpoints/<variant>)");
    control->add_option("--steps", control_steps, "adaptation steps (default meta.k_adapt)");

    auto* compare = app.add_subcommand("compare", "train every variant and compare them on the target");
    add_common(compare, compare_c);

    auto* s2s = app.add_subcommand("sim2sim", "pretrained against scratch DQN on a held-out plant");
    add_common(s2s, s2s_c);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (gen->parsed()) {
            const ExperimentConfig cfg = load(gen_c);
            const ExperimentData data = generate_data(cfg);
            save_data(data, gen_c.out);
            std::cout << data.sources.num_tasks() << " source tasks and one target written to " << gen_c.out << "\n";
        } else if (train->parsed()) {
            const ExperimentConfig cfg = load(train_c);
            const Variant v = parse_variant(train_variant);
            const ExperimentData data = generate_data(cfg);
            const TrainedVariant t = run_metatrain(cfg, data, v, printer(train_c));
            save_trained(cfg, t, train_c.out);
            std::cout << variant_label(v) << ": " << t.log.size() << " outer iterations";
            if (!t.log.empty()) std::cout << ", final outer loss " << format_real(t.log.back().outer_loss);
            std::cout << "\n";
        } else if (adapt->parsed()) {
            const ExperimentConfig cfg = load(adapt_c);
            const Variant v = parse_variant(adapt_variant);
            const std::filesystem::path ck =
                adapt_ckpt.empty() ? std::filesystem::path(adapt_c.out) / "checkpoints" / variant_label(v) : std::filesystem::path(adapt_ckpt);
            TrainedVariant t{v, load_trained(cfg, ck), {}};
            const ExperimentData data = generate_data(cfg);
            const MetricsReport rep = run_adapt_sweep(cfg, data, t, adapt_steps.empty() ? cfg.adapt_steps : adapt_steps);
            emit_plotdata(rep, adapt_c.out);
            print_summary(rep);
        } else if (control->parsed()) {
            const ExperimentConfig cfg = load(control_c);
            const Variant v = parse_variant(control_variant);
            const std::filesystem::path ck = control_ckpt.empty()
                                                 ? std::filesystem::path(control_c.out) / "checkpoints" / variant_label(v)
                                                 : std::filesystem::path(control_ckpt);
            TrainedVariant t{v, load_trained(cfg, ck), {}};
            const ExperimentData data = generate_data(cfg);
            const MetricsReport rep = run_adapt_sweep(cfg, data, t, {control_steps.value_or(cfg.meta.k_adapt)});
            emit_plotdata(rep, control_c.out);
            print_summary(rep);
        } else if (compare->parsed()) {
            const ExperimentConfig cfg = load(compare_c);
            print_summary(run_compare(cfg, std::filesystem::path(compare_c.out), printer(compare_c)));
        } else if (s2s->parsed()) {
            const ExperimentConfig cfg = load(s2s_c);
            print_summary(run_sim2sim(cfg, std::filesystem::path(s2s_c.out), printer(s2s_c)));
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const ContractError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const DatasetError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kConfigError;
    } catch (const SimulationError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return kDiverged;
    } catch (const NonFiniteError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return kDiverged;
    } catch (const IndefiniteError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return kDiverged;
    } catch (const SolverError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return kDiverged;
    }
    return kOk;
}
