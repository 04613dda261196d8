// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance --configs <dir> --cli <metactl binary> --work <scratch dir> [--only 1,2,...]

#include "metactl/dqn.hpp"
#include "metactl/errors.hpp"
#include "metactl/harness.hpp"
#include "metactl/meta.hpp"
#include "metactl/mpc.hpp"
#include "metactl/nssm.hpp"
#include "probe_families.hpp"

#include <CLI11.hpp>
#include <Eigen/Eigenvalues>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

using namespace metactl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Options {
    fs::path configs;
    fs::path cli;
    fs::path work;
};

std::string fmt(double x) {
    std::ostringstream s;
    s << std::setprecision(4) << x;
    return s.str();
}

// ---- 1: implicit gradient against central differences of the exact bi-level objective

ParamVector bilevel_fd(const std::vector<QuadraticTask>& family, const ParamVector& omega, double gamma, double h) {
    ParamVector g(omega.size());
    for (Eigen::Index i = 0; i < omega.size(); ++i) {
        ParamVector p = omega, m = omega;
        p(i) += h;
        m(i) -= h;
        g(i) = (bilevel_objective(family, p, gamma) - bilevel_objective(family, m, gamma)) / (2 * h);
    }
    return g;
}

Outcome implicit_gradient(const Options&) {
    double worst = 0.0;
    const int instances = 20;
    for (std::uint64_t seed = 0; seed < instances; ++seed) {
        Rng rng(1000 + seed);
        auto family = probes::dense_family(5, 3, rng);
        const ParamVector omega = probes::randn(5, rng);
        MetaConfig cfg;
        cfg.reg_strength = 0.5 + static_cast<double>(seed % 4);
        cfg.cg_tol = 1e-12;
        ParamVector g = ParamVector::Zero(5);
        for (const auto& t : family) {
            const ParamVector star = exact_inner_solution(t.train, omega, cfg.reg_strength);
            g += implicit_grad(t.train.loss(), t.test.loss(), star, cfg);
        }
        g /= static_cast<double>(family.size());
        const ParamVector fd = bilevel_fd(family, omega, cfg.reg_strength, 1e-5);
        worst = std::max(worst, (g - fd).norm() / fd.norm());
    }
    return {worst <= 1e-4, std::to_string(instances) + " families, max rel error " + fmt(worst) + " (tol 1e-4)"};
}

// ---- 2: CG against a dense Cholesky solve

Outcome cg_oracle(const Options&) {
    double worst_res = 0.0, worst_diff = 0.0;
    Rng rng(2);
    int systems = 0;
    for (Eigen::Index n : {1, 2, 3, 5, 8, 10, 16, 25, 32, 40, 50}) {
        for (int rep = 0; rep < 3; ++rep) {
            Eigen::MatrixXd h = probes::random_spd(n, 0.0, 3.0, rng);
            const double gamma = 0.5 + rep;
            const ParamVector p = probes::randn(n, rng);
            const CgResult r = cg_solve([&](const ParamVector& v) { return ParamVector(h * v); }, p, gamma,
                                        static_cast<std::size_t>(2 * n), 1e-12);
            const Eigen::MatrixXd q = Eigen::MatrixXd::Identity(n, n) + h / gamma;
            const ParamVector direct = q.llt().solve(p);
            worst_res = std::max(worst_res, (q * r.x - p).norm() / p.norm());
            worst_diff = std::max(worst_diff, (r.x - direct).norm() / direct.norm());
            ++systems;
        }
    }
    return {worst_res <= 1e-8 && worst_diff <= 1e-8,
            std::to_string(systems) + " systems up to 50x50, max rel residual " + fmt(worst_res) +
                ", max rel diff to dense " + fmt(worst_diff) + " (tol 1e-8)"};
}

// ---- 3: inner contraction and the outer 1/K regime

Outcome rate_check(const Options&) {
    double worst_excess = -1.0;
    bool violation = false;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(300 + seed);
        std::vector<QuadraticTask> family;
        for (int b = 0; b < 4; ++b) {
            family.push_back({QuadraticLoss::dense(probes::random_spd(6, 0.5, 2.0, rng), probes::randn(6, rng)),
                              QuadraticLoss::dense(probes::random_spd(6, 0.5, 2.0, rng), probes::randn(6, rng))});
        }
        const double gamma = 3.0 + static_cast<double>(seed % 3);
        const ConvergenceProbe p = probe_rates(family, probes::randn(6, rng), gamma, 30);
        worst_excess = std::max(worst_excess, p.max_inner_ratio - p.theoretical_rate);
        violation = violation || p.violation;
    }

    QuadraticLearner learner(probes::sublinear_family(1000));
    MetaConfig cfg;
    cfg.beta_out = 0.1;
    cfg.k_train = 500;
    cfg.batch_size = 2;
    cfg.converge_tol = 1e-300;
    Rng rng(5);
    const MetaTrainResult r = meta_train(learner, ParamVector::Zero(1000), cfg, MetaVariant::Imaml, rng);
    std::vector<double> norms;
    for (const auto& row : r.log) norms.push_back(row.grad_norm);
    const SlopeFit fit = fit_outer_rate(norms, 20);

    const bool inner_ok = worst_excess <= 0.05 && !violation;
    const bool outer_ok = r.log.size() == 500 && std::abs(fit.slope + 1.0) <= 0.2;
    return {inner_ok && outer_ok, "max inner ratio - theory " + fmt(worst_excess) + " (<= 0.05), outer slope " +
                                      fmt(fit.slope) + " over K = " + std::to_string(r.log.size()) + " (-1 +- 0.2)"};
}

// ---- 4: regularization bias and adaptation error decay

Outcome bias_check(const Options&) {
    double worst_bias = 0.0, worst_up = 0.0, worst_tail = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(400 + seed);
        std::uniform_real_distribution<double> u(0.5, 2.5);
        const double h = u(rng);
        const double gamma = h + 1.0;
        // eigenvalues span [-h, h]; the -h mode is the slowest under beta = 1 / (h + gamma)
        Eigen::VectorXd eig(5);
        eig << -h, h, u(rng) - 1.5, 0.3 * h, -0.5 * h;
        const Eigen::VectorXd center = probes::randn(5, rng);
        const ParamVector omega_inf = center + probes::randn(5, rng, 1.0 + static_cast<double>(seed));
        // stop while the error is well above round-off
        const double rate = 2.0 * h / (h + gamma);
        const auto steps = static_cast<std::size_t>(std::min(60.0, std::log(1e-8) / std::log(rate)));
        const AdaptationProbe a = probe_adaptation(QuadraticLoss::diagonal(eig, center), omega_inf, gamma, steps);
        worst_bias = std::max(worst_bias, std::abs(a.bias - a.predicted_bias));
        for (std::size_t k = 0; k < a.error.size(); ++k) worst_up = std::max(worst_up, a.error[k] / a.predicted[k]);
        const std::size_t k = a.error.size() - 1;
        worst_tail = std::max(worst_tail, std::abs(a.error[k] / a.error[k - 1] / a.rate - 1.0));

        // dense convex shift as well
        const Eigen::MatrixXd hd = probes::random_spd(5, 0.5, 2.0, rng);
        const AdaptationProbe c = probe_adaptation(QuadraticLoss::dense(hd, center), omega_inf, 3.0, 20);
        worst_bias = std::max(worst_bias, std::abs(c.bias - c.predicted_bias));
        for (std::size_t j = 0; j < c.error.size(); ++j) worst_up = std::max(worst_up, c.error[j] / c.predicted[j]);
    }
    const bool ok = worst_bias <= 1e-8 && worst_up <= 2.0 && worst_tail <= 0.5;
    return {ok, "max |bias - gamma rho^2/2| " + fmt(worst_bias) + " (<= 1e-8), max error / predicted " + fmt(worst_up) +
                    " (<= 2), tail rate off by " + fmt(100.0 * worst_tail) + "%"};
}

// ---- 5: DARE closed forms and residuals

Outcome dare_check(const Options&) {
    auto s = [](double x) { return Eigen::MatrixXd::Constant(1, 1, x); };
    const double p1 = solve_dare(s(0.5), s(0.0), s(1.0), s(1.0), 1e-12)(0, 0);
    const double p2 = solve_dare(s(1.0), s(1.0), s(1.0), s(1.0), 1e-12)(0, 0);
    const double e1 = std::abs(p1 - 4.0 / 3.0), e2 = std::abs(p2 - (1.0 + std::sqrt(5.0)) / 2.0);

    double worst = 0.0;
    const int systems = 20;
    for (std::uint64_t seed = 0; seed < systems; ++seed) {
        Rng rng(500 + seed);
        std::normal_distribution<double> d;
        const Eigen::Index n = 2 + static_cast<Eigen::Index>(seed % 4);
        const Eigen::Index p = 1 + static_cast<Eigen::Index>(seed % 2);
        Eigen::MatrixXd a(n, n), b(n, p), lq(n, n);
        for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = d(rng);
        for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = d(rng);
        for (Eigen::Index i = 0; i < lq.size(); ++i) lq.data()[i] = d(rng);
        // spectral radius between 0.5 and 1.2: some open-loop unstable, stabilizable through a generic B
        a *= (0.5 + 0.7 * static_cast<double>(seed) / systems) / a.eigenvalues().cwiseAbs().maxCoeff();
        const Eigen::MatrixXd q = lq * lq.transpose() + 1e-3 * Eigen::MatrixXd::Identity(n, n);
        const Eigen::MatrixXd r = Eigen::MatrixXd::Identity(p, p);
        const Eigen::MatrixXd sol = solve_dare(a, b, q, r, 1e-11);
        worst = std::max(worst, dare_residual(a, b, q, r, sol));
    }
    const bool ok = e1 <= 1e-9 && e2 <= 1e-9 && worst <= 1e-9;
    return {ok, "closed-form errors " + fmt(e1) + ", " + fmt(e2) + "; " + std::to_string(systems) +
                    " random systems, max residual " + fmt(worst) + " (tol 1e-9)"};
}

// ---- 6: Van der Pol comparison

const SummaryRow* find_row(const MetricsReport& rep, const std::string& variant, std::size_t steps) {
    for (const auto& row : rep.summary) {
        if (row.variant == variant && row.steps == steps) return &row;
    }
    return nullptr;
}

Outcome vdp_compare(const Options& opt) {
    const ExperimentConfig cfg = load_config(opt.configs / "vdp_compare.json");
    const MetricsReport rep = run_compare(cfg, opt.work / "vdp_compare");
    const SummaryRow* im = find_row(rep, "imaml", 100);
    const SummaryRow* ma = find_row(rep, "maml", 100);
    const SummaryRow* su = find_row(rep, "supervised", 100);
    if (!im || !ma || !su) return {false, "summary lacks a 100-step row for some variant"};
    const bool ok = im->mse <= ma->mse && ma->mse <= su->mse && im->mse <= 0.5 * su->mse;
    return {ok, "MSE at 100 steps: imaml " + fmt(im->mse) + ", maml " + fmt(ma->mse) + ", supervised " +
                    fmt(su->mse) + " (imaml/supervised " + fmt(im->mse / su->mse) + ", need <= 0.5)"};
}

// ---- 7: sim-to-sim ball and plate

Outcome ballplate_sim2sim(const Options& opt) {
    const ExperimentConfig cfg = load_config(opt.configs / "ballplate_sim2sim.json");
    const MetricsReport rep = run_sim2sim(cfg, opt.work / "ballplate_sim2sim");
    double pre = -1.0, scratch = -1.0;
    for (const auto& row : rep.summary) {
        if (row.variant == "pretrained") pre = row.mean_cost;
        if (row.variant == "scratch") scratch = row.mean_cost;
    }
    if (pre < 0.0 || scratch <= 0.0) return {false, "summary lacks the pretrained or scratch row"};
    const double reduction = 1.0 - pre / scratch;
    return {reduction >= 0.5, "mean stage cost pretrained " + fmt(pre) + ", scratch " + fmt(scratch) + ", reduction " +
                                  fmt(100.0 * reduction) + "% (need >= 50%)"};
}

// ---- 8: loss gradients against finite differences

Trajectory random_trajectory(std::size_t length, std::size_t p, std::size_t m, Rng& rng) {
    Trajectory t;
    t.dt = 0.1;
    for (std::size_t i = 0; i < length; ++i) {
        t.push(probes::randn(static_cast<Eigen::Index>(p), rng), probes::randn(static_cast<Eigen::Index>(m), rng));
    }
    return t;
}

Outcome gradient_suites(const Options&) {
    const int instances = 25;
    int ssm_pass = 0, dqn_pass = 0;
    double ssm_worst = 0.0, dqn_worst = 0.0;
    for (std::uint64_t seed = 0; seed < instances; ++seed) {
        Rng rng(800 + seed);
        std::uniform_int_distribution<std::size_t> small(1, 4);
        NssmConfig c;
        c.history = small(rng);
        c.output_dim = 1 + small(rng) % 2;
        c.input_dim = 1 + small(rng) % 2;
        c.latent = std::min(small(rng), c.history * c.output_dim);
        c.horizon = small(rng);
        c.hidden = {5};
        Nssm model(c);
        ParamVector params = model.init(rng);
        params += 0.05 * probes::randn(params.size(), rng);
        TaskData task;
        task.id = "t";
        task.dt = 0.1;
        task.trajectories.push_back(std::make_shared<const Trajectory>(
            random_trajectory(c.history + c.horizon + 4, c.input_dim, c.output_dim, rng)));
        const ScalarLossFn f = make_ssm_loss(model, model.make_batch(task, make_windows(task, c.history, c.horizon)));
        const GradCheckReport r = check_grad_fd(f, params, 1e-4);
        ssm_pass += r.pass ? 1 : 0;
        ssm_worst = std::max(ssm_worst, r.max_rel_error);
    }
    for (std::uint64_t seed = 0; seed < instances; ++seed) {
        Rng rng(900 + seed);
        const std::size_t m = 1 + seed % 2, p = 1 + (seed / 2) % 2, stack = 1 + seed % 3;
        DqnConfig cfg = DqnConfig::with_box(-0.3 * Eigen::VectorXd::Ones(static_cast<Eigen::Index>(p)),
                                            0.3 * Eigen::VectorXd::Ones(static_cast<Eigen::Index>(p)), m, 3, stack);
        cfg.hidden = {6, 6};
        QNetwork net(cfg.observation_dim(), cfg.input_dim(), cfg.hidden);
        const ParamVector params = net.init(rng);
        const ParamVector target = net.init(rng);
        const auto ms = static_cast<Eigen::Index>(m * stack), me = static_cast<Eigen::Index>(m),
                   pe = static_cast<Eigen::Index>(p);
        std::vector<Transition> trs;
        for (int i = 0; i < 8; ++i) {
            trs.push_back({probes::randn(ms, rng), probes::randn(pe, rng, 0.1), probes::randn(pe, rng, 0.1),
                           probes::randn(ms, rng), probes::randn(me, rng), probes::randn(me, rng)});
        }
        const ScalarLossFn f = make_dqn_loss(net, make_dqn_batch(net, target, trs, cfg));
        const GradCheckReport r = check_grad_fd(f, params, 1e-4);
        dqn_pass += r.pass ? 1 : 0;
        dqn_worst = std::max(dqn_worst, r.max_rel_error);
    }
    const bool ok = ssm_pass == instances && dqn_pass == instances;
    return {ok, "ssm " + std::to_string(ssm_pass) + "/" + std::to_string(instances) + " (max rel " + fmt(ssm_worst) +
                    "), dqn " + std::to_string(dqn_pass) + "/" + std::to_string(instances) + " (max rel " +
                    fmt(dqn_worst) + "), tol 1e-4"};
}

// ---- 9: CLI reruns give byte-identical summaries

std::string slurp(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) return {};
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int run_cli(const Options& opt, const std::string& args, const fs::path& log) {
    const std::string cmd = "\"" + opt.cli.string() + "\" " + args + " -q > \"" + log.string() + "\" 2>&1";
    return std::system(cmd.c_str());
}

Outcome determinism(const Options& opt) {
    const fs::path root = opt.work / "determinism";
    fs::remove_all(root);
    fs::create_directories(root);
    const std::string vdp = "\"" + (opt.configs / "quick_vdp.json").string() + "\"";
    const std::string bp = "\"" + (opt.configs / "quick_ballplate.json").string() + "\"";

    // each experiment writes summary.csv into its own output directory
    struct Experiment {
        std::string name;
        std::vector<std::string> steps;  // CLI invocations, {out} replaced by the run directory
    };
    const std::vector<Experiment> experiments{
        {"compare", {"compare -c " + vdp + " -o {out}"}},
        {"adapt", {"metatrain -c " + vdp + " --variant imaml -o {out}", "adapt -c " + vdp + " --variant imaml -o {out}"}},
        {"control", {"metatrain -c " + vdp + " --variant maml -o {out}", "control -c " + vdp + " --variant maml -o {out}"}},
        {"sim2sim", {"sim2sim -c " + bp + " -o {out}"}},
    };

    std::vector<std::string> failures;
    for (const auto& e : experiments) {
        std::string first;
        for (int run = 0; run < 2; ++run) {
            const fs::path out = root / (e.name + "_" + std::to_string(run));
            for (const auto& step : e.steps) {
                std::string args = step;
                for (std::size_t at; (at = args.find("{out}")) != std::string::npos;) {
                    args.replace(at, 5, "\"" + out.string() + "\"");
                }
                if (run_cli(opt, args, root / (e.name + ".log")) != 0) {
                    failures.push_back(e.name + " (exit status, see " + (root / (e.name + ".log")).string() + ")");
                    break;
                }
            }
            const std::string summary = slurp(out / "summary.csv");
            if (summary.empty()) {
                failures.push_back(e.name + " (no summary.csv)");
                break;
            }
            if (run == 0) {
                first = summary;
            } else if (summary != first) {
                failures.push_back(e.name + " (summaries differ)");
            }
        }
    }
    if (!failures.empty()) {
        std::string msg = "failed:";
        for (const auto& f : failures) msg += " " + f;
        return {false, msg};
    }
    return {true, std::to_string(experiments.size()) + " experiments (compare, adapt, control, sim2sim) rerun, "
                                                       "summary.csv byte-identical"};
}

struct Criterion {
    int id;
    std::string name;
    double budget_s;  // runtime bound from the criterion
    bool strict;      // budget given as a strict bound
    std::function<Outcome(const Options&)> run;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    Options opt;
    std::vector<int> only;
    app.add_option("--configs", opt.configs, "directory holding the experiment configs")->required();
    app.add_option("--cli", opt.cli, "metactl binary")->required();
    app.add_option("--work", opt.work, "scratch directory for artifacts")->required();
    app.add_option("--only", only, "run only these criteria")->delimiter(',');
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(opt.work);

    const double inf = std::numeric_limits<double>::infinity();
    const std::vector<Criterion> criteria{
        {1, "implicit gradient", 1.0, true, implicit_gradient},
        {2, "cg oracle", 1.0, true, cg_oracle},
        {3, "inner and outer rates", 30.0, true, rate_check},
        {4, "regularization bias", 5.0, true, bias_check},
        {5, "dare", 1.0, true, dare_check},
        {6, "van der pol comparison", 600.0, false, vdp_compare},
        {7, "ball-plate sim2sim", 900.0, false, ballplate_sim2sim},
        {8, "gradient suites", 30.0, true, gradient_suites},
        {9, "cli determinism", inf, false, determinism},
    };
    const std::set<int> selected(only.begin(), only.end());

    int failed = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run(opt);
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = c.strict ? s < c.budget_s : s <= c.budget_s;
        std::string timing = fmt(s) + " s";
        if (std::isfinite(c.budget_s)) timing += std::string(c.strict ? " < " : " <= ") + fmt(c.budget_s) + " s";
        if (!in_time) timing += " EXCEEDED";
        const bool pass = o.pass && in_time;
        failed += pass ? 0 : 1;
        std::cout << "criterion " << c.id << " [" << c.name << "]: " << (pass ? "PASS" : "FAIL") << "  " << o.detail
                  << "; runtime " << timing << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
