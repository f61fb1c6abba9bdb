#include "popql/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "popql/svg.hpp"

namespace popql {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
    static const std::vector<std::string> kinds = {"three-state", "eval-sweep", "density",
                                                   "train-sweep", "certify", "solve-dual"};
    if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end())
        throw ModelError("ExperimentConfig: unknown kind '" + kind + "'");
    for (double g : grid)
        if (!(g >= 0.0 && g <= 1.0)) throw ModelError("ExperimentConfig: grid values in [0,1]");
    if (seeds.empty()) throw ModelError("ExperimentConfig: at least one seed required");
    if (!(dither_eps >= 0.0 && dither_eps <= 1.0))
        throw ModelError("ExperimentConfig: dither_eps in [0,1]");
    if (k < 1) throw ModelError("ExperimentConfig: k must be >= 1");
    if (threads < 1) throw ModelError("ExperimentConfig: threads must be >= 1");
    if (format != "csv" && format != "json")
        throw ModelError("ExperimentConfig: format must be csv or json");
}

std::string ExperimentConfig::to_json() const {
    json j;
    j["kind"] = kind;
    j["instance"] = instance;
    j["lake"] = {{"slippery", lake.slippery},
                 {"goal_reward", lake.goal_reward},
                 {"gamma", lake.gamma}};
    j["three_state_eps"] = three_state_eps;
    j["p"] = p;
    j["eta"] = eta;
    j["grid"] = grid;
    j["seeds"] = seeds;
    j["dither_eps"] = dither_eps;
    j["feature_seed"] = feature_seed;
    j["k"] = k;
    j["master_seed"] = master_seed;
    j["out_dir"] = out_dir;
    j["format"] = format;
    j["plots"] = plots;
    j["threads"] = threads;
    j["td_steps"] = td_steps;
    j["lr_q"] = lr_q;
    j["cert_tol"] = cert_tol;
    j["dual"] = {{"rank", dual.rank},         {"lr", dual.lr},
                 {"iterations", dual.iterations}, {"tol", dual.tol},
                 {"init_scale", dual.init_scale}, {"normalize_steps", dual.normalize_steps},
                 {"exp_clamp", dual.exp_clamp}};
    j["train"] = {{"beta", train.beta},
                  {"lr_q", train.lr_q},
                  {"lr_pi", train.lr_pi},
                  {"lr_ab", train.lr_ab},
                  {"lr_g", train.lr_g},
                  {"steps", train.steps},
                  {"batch_size", train.batch_size},
                  {"target_entropy", train.target_entropy},
                  {"autotune_alpha", train.autotune_alpha},
                  {"alpha0", train.alpha0},
                  {"alpha_lr", train.alpha_lr},
                  {"rank", train.rank},
                  {"log_stride", train.log_stride},
                  {"divergence_ceiling", train.divergence_ceiling}};
    return j.dump(2);
}

std::string ExperimentConfig::hash() const {
    // identifies the experiment's defining content; output and runtime knobs
    // (out_dir, format, plots, threads) do not participate
    json j = json::parse(to_json());
    j.erase("out_dir");
    j.erase("format");
    j.erase("plots");
    j.erase("threads");
    return sha1_hex(j.dump(2));
}

ExperimentConfig ExperimentConfig::defaults_for(const std::string& kind) {
    ExperimentConfig cfg;
    cfg.kind = kind;
    cfg.seeds = {1};
    if (kind == "three-state") {
        cfg.grid.clear();
        for (int i = 0; i <= 20; ++i) cfg.grid.push_back(i * 0.05);
        cfg.td_steps = 8000000;
        cfg.dual.lr = 0.05;
        cfg.dual.iterations = 200000;
    } else if (kind == "eval-sweep") {
        cfg.grid = {0.0, 0.25, 0.5, 0.75, 1.0};
        cfg.seeds = {1, 2, 3, 4, 5};
        cfg.td_steps = 2000000;
        cfg.dual.lr = 0.02;
        cfg.dual.iterations = 120000;
        cfg.dual.tol = 1e-8;
    } else if (kind == "density") {
        cfg.eta = 0.0;
        cfg.dual.lr = 0.02;
        cfg.dual.iterations = 150000;
        cfg.dual.tol = 1e-9;
    } else if (kind == "train-sweep") {
        cfg.grid = {0.0, 0.25, 0.5, 0.75, 1.0};
        cfg.seeds = {1, 2, 3, 4, 5};
        cfg.threads = 2;
        cfg.train.steps = 1600000;
        cfg.train.lr_ab = 0.01;
        cfg.train.lr_pi = 3e-4;
        cfg.train.log_stride = 40000;
    } else if (kind == "certify" || kind == "solve-dual") {
        cfg.dual.lr = 0.05;
        cfg.dual.iterations = 200000;
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ModelError("ExperimentConfig: invalid JSON");
    ExperimentConfig cfg = defaults_for(j.value("kind", std::string("three-state")));
    try {
        if (j.contains("lake")) {
            const auto& l = j["lake"];
            cfg.lake.slippery = l.value("slippery", cfg.lake.slippery);
            cfg.lake.goal_reward = l.value("goal_reward", cfg.lake.goal_reward);
            cfg.lake.gamma = l.value("gamma", cfg.lake.gamma);
        }
        cfg.instance = j.value("instance", cfg.instance);
        cfg.three_state_eps = j.value("three_state_eps", cfg.three_state_eps);
        cfg.p = j.value("p", cfg.p);
        cfg.eta = j.value("eta", cfg.eta);
        if (j.contains("grid")) cfg.grid = j["grid"].get<std::vector<double>>();
        if (j.contains("seeds")) cfg.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
        cfg.dither_eps = j.value("dither_eps", cfg.dither_eps);
        cfg.feature_seed = j.value("feature_seed", cfg.feature_seed);
        cfg.k = j.value("k", cfg.k);
        cfg.master_seed = j.value("master_seed", cfg.master_seed);
        cfg.out_dir = j.value("out_dir", cfg.out_dir);
        cfg.format = j.value("format", cfg.format);
        cfg.plots = j.value("plots", cfg.plots);
        cfg.threads = j.value("threads", cfg.threads);
        cfg.td_steps = j.value("td_steps", cfg.td_steps);
        cfg.lr_q = j.value("lr_q", cfg.lr_q);
        cfg.cert_tol = j.value("cert_tol", cfg.cert_tol);
        if (j.contains("dual")) {
            const auto& d = j["dual"];
            cfg.dual.rank = d.value("rank", cfg.dual.rank);
            cfg.dual.lr = d.value("lr", cfg.dual.lr);
            cfg.dual.iterations = d.value("iterations", cfg.dual.iterations);
            cfg.dual.tol = d.value("tol", cfg.dual.tol);
            cfg.dual.init_scale = d.value("init_scale", cfg.dual.init_scale);
            cfg.dual.normalize_steps = d.value("normalize_steps", cfg.dual.normalize_steps);
            cfg.dual.exp_clamp = d.value("exp_clamp", cfg.dual.exp_clamp);
        }
        if (j.contains("train")) {
            const auto& t = j["train"];
            cfg.train.beta = t.value("beta", cfg.train.beta);
            cfg.train.lr_q = t.value("lr_q", cfg.train.lr_q);
            cfg.train.lr_pi = t.value("lr_pi", cfg.train.lr_pi);
            cfg.train.lr_ab = t.value("lr_ab", cfg.train.lr_ab);
            cfg.train.lr_g = t.value("lr_g", cfg.train.lr_g);
            cfg.train.steps = t.value("steps", cfg.train.steps);
            cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
            cfg.train.target_entropy = t.value("target_entropy", cfg.train.target_entropy);
            cfg.train.autotune_alpha = t.value("autotune_alpha", cfg.train.autotune_alpha);
            cfg.train.alpha0 = t.value("alpha0", cfg.train.alpha0);
            cfg.train.alpha_lr = t.value("alpha_lr", cfg.train.alpha_lr);
            cfg.train.rank = t.value("rank", cfg.train.rank);
            cfg.train.log_stride = t.value("log_stride", cfg.train.log_stride);
            cfg.train.divergence_ceiling =
                t.value("divergence_ceiling", cfg.train.divergence_ceiling);
        }
    } catch (const json::exception& e) {
        throw ModelError(std::string("ExperimentConfig: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ModelError("ExperimentConfig: cannot open config file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return from_json_text(buf.str());
}

// ---------------------------------------------------------------------------
// result table
// ---------------------------------------------------------------------------

void ResultTable::to_csv(std::ostream& out) const {
    out << "grid_value,seed,method";
    for (const auto& c : columns) out << ',' << c;
    out << ",config_hash\n";
    for (const auto& r : rows) {
        out << format_double(r.grid_value) << ',' << r.seed << ',' << r.method;
        for (double v : r.metrics) out << ',' << format_double(v);
        out << ',' << config_hash << '\n';
    }
}

std::optional<double> ResultTable::metric(double grid_value, std::uint64_t seed,
                                          const std::string& method,
                                          const std::string& column) const {
    const auto col = std::find(columns.begin(), columns.end(), column);
    if (col == columns.end()) return std::nullopt;
    const auto idx = static_cast<std::size_t>(col - columns.begin());
    for (const auto& r : rows)
        if (r.seed == seed && r.method == method && std::abs(r.grid_value - grid_value) < 1e-12)
            return r.metrics[idx];
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// dataset construction
// ---------------------------------------------------------------------------

DiscretePolicy dither_policy(const DiscretePolicy& policy, double eps) {
    if (!(eps >= 0.0 && eps <= 1.0)) throw ModelError("dither_policy: eps in [0,1]");
    DiscretePolicy out;
    const int m = policy.actions();
    out.pi = (1.0 - eps) * policy.pi + MatrixXd::Constant(policy.states(), m, eps / m);
    return out;
}

SampleDistribution mix_distributions(const SampleDistribution& mu_data,
                                     const SampleDistribution& mu_eval, double eta) {
    if (!(eta >= 0.0 && eta <= 1.0)) throw ModelError("mix_distributions: eta in [0,1]");
    if (mu_data.weights.size() != mu_eval.weights.size())
        throw ModelError("mix_distributions: shape mismatch");
    SampleDistribution out;
    out.weights = (1.0 - eta) * mu_data.weights + eta * mu_eval.weights;
    return out;
}

SampleDistribution occupancy(const FiniteMDP& mdp, const DiscretePolicy& policy) {
    return stationary_distribution(mdp_to_mrp(mdp, policy).P);
}

SampleDistribution sample_dataset(const FiniteMDP& mdp, const DiscretePolicy& policy,
                                  const SampleDistribution& dist, long num_transitions,
                                  std::uint64_t seed) {
    Rng rng(seed);
    const int N = mdp.pairs();
    std::vector<double> cum(N);
    double acc = 0.0;
    for (int i = 0; i < N; ++i) {
        acc += dist.weights(i);
        cum[i] = acc;
    }
    std::vector<double> counts(N, 0.0);
    SampleDistribution out;
    for (long t = 0; t < num_transitions; ++t) {
        const double z = rng.uniform() * acc;
        int x = static_cast<int>(std::lower_bound(cum.begin(), cum.end(), z) - cum.begin());
        if (x >= N) x = N - 1;
        const int s = x / mdp.m, a = x % mdp.m;
        double zz = rng.uniform(), accp = 0.0;
        int s2 = mdp.n - 1;
        for (int j = 0; j < mdp.n; ++j) {
            accp += mdp.P(x, j);
            if (zz <= accp) {
                s2 = j;
                break;
            }
        }
        counts[x] += 1.0;
        out.dataset.push_back({s, a, s2, mdp.R(x), 1.0});
        (void)policy;
    }
    out.weights = VectorXd::Zero(N);
    for (int i = 0; i < N; ++i) out.weights(i) = counts[i] / static_cast<double>(num_transitions);
    return out;
}

// ---------------------------------------------------------------------------
// sweep helpers
// ---------------------------------------------------------------------------

namespace {

void parallel_cells(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::size_t chunk = (count + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const std::size_t lo = t * chunk, hi = std::min(count, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&, lo, hi] {
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

double kl_divergence(const VectorXd& q, const VectorXd& mu) {
    double kl = 0.0;
    for (int i = 0; i < q.size(); ++i) {
        if (q(i) <= 0.0) continue;
        if (mu(i) <= 0.0) return std::numeric_limits<double>::infinity();
        kl += q(i) * std::log(q(i) / mu(i));
    }
    return kl;
}

std::string now_iso8601() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
    return buf;
}

struct LakeSetup {
    FrozenLake lake;
    DiscretePolicy pi_eval;
    DiscretePolicy pi_data;
    SampleDistribution mu_eval;
    SampleDistribution mu_data;
    VectorXd q_eval;     // exact Q of the evaluation policy
    FiniteMRP chain;     // reduction under the evaluation policy
};

LakeSetup build_lake_setup(const ExperimentConfig& cfg) {
    LakeSetup s;
    s.lake = build_frozen_lake(cfg.lake);
    s.pi_eval = dither_policy(value_iteration(s.lake.mdp).policy, cfg.dither_eps);
    s.pi_data = dither_policy(frozen_lake_route_policy(), cfg.dither_eps);
    s.mu_eval = occupancy(s.lake.mdp, s.pi_eval);
    s.mu_data = occupancy(s.lake.mdp, s.pi_data);
    s.chain = mdp_to_mrp(s.lake.mdp, s.pi_eval);
    s.q_eval = exact_value(s.chain);
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// three-state sweep
// ---------------------------------------------------------------------------

ThreeStateSweepResult run_three_state_sweep(const ExperimentConfig& config) {
    const ThreeStateInstance inst = build_three_state(config.three_state_eps);
    const long steps = config.td_steps > 0 ? config.td_steps : 8000000;

    ThreeStateSweepResult result;
    result.table.config_hash = config.hash();
    result.table.columns = {"lambda_min", "satisfied", "error",      "diverged",
                            "kl",         "max_u_dev", "lambda_min_q"};
    const double nan = std::numeric_limits<double>::quiet_NaN();

    struct Cell {
        std::vector<ResultRow> rows;
    };
    std::vector<Cell> cells(config.grid.size());

    parallel_cells(config.grid.size(), config.threads, [&](std::size_t i) {
        const double p = config.grid[i];
        const SampleDistribution mu = three_state_family(p);
        const CertificateReport cert = certify(inst.mrp, inst.basis, mu, config.cert_tol);

        TDConfig td;
        td.steps = steps;
        td.lr = config.lr_q;
        td.record_stride = std::max<long>(1, steps / 50);
        td.reference = inst.target_value;

        double lstd_error = nan;
        try {
            const VectorXd w = lstd_fixed_point(inst.mrp, inst.basis.Phi, mu.weights);
            lstd_error = approx_error(inst.basis.Phi, w, inst.target_value, mu.weights);
        } catch (const IllConditionedError&) {
        }

        const VectorXd ones = VectorXd::Ones(3);
        const TDTrace vanilla = run_td(inst.mrp, inst.basis, mu.weights, ones, td);

        DualConfig dc = config.dual;
        dc.seed = derive_seed(config.master_seed, i);
        const DualSolveReport dual = solve_dual(inst.mrp, inst.basis, mu.weights, dc);
        const TDTrace pop = run_td(inst.mrp, inst.basis, mu.weights, dual.reweighting.u, td);
        double max_u_dev = 0.0;  // off-support weights are arbitrary, skip them
        for (int x = 0; x < mu.weights.size(); ++x)
            if (mu.weights(x) > 0.0)
                max_u_dev = std::max(max_u_dev, std::abs(dual.reweighting.u(x) - 1.0));

        Cell& cell = cells[i];
        cell.rows.push_back({p, config.master_seed, "certificate",
                             {cert.lambda_min, cert.satisfied ? 1.0 : 0.0, nan, nan, nan, nan, nan}});
        cell.rows.push_back({p, config.master_seed, "lstd",
                             {cert.lambda_min, cert.satisfied ? 1.0 : 0.0, lstd_error, nan, nan,
                              nan, nan}});
        cell.rows.push_back({p, config.master_seed, "vanilla-td",
                             {cert.lambda_min, cert.satisfied ? 1.0 : 0.0, vanilla.final_error,
                              vanilla.diverged ? 1.0 : 0.0, nan, nan, nan}});
        cell.rows.push_back({p, config.master_seed, "popql-td",
                             {cert.lambda_min, cert.satisfied ? 1.0 : 0.0, pop.final_error,
                              pop.diverged ? 1.0 : 0.0, dual.reweighting.kl, max_u_dev,
                              dual.lambda_min_q}});
    });
    for (auto& c : cells)
        for (auto& r : c.rows) result.table.rows.push_back(std::move(r));

    // bisect the certificate crossing lambda_min(p) = 0
    auto lam = [&](double p) {
        return certify(inst.mrp, inst.basis, three_state_family(p), config.cert_tol).lambda_min;
    };
    double lo = 0.0, hi = 1.0;
    if (lam(lo) < 0.0 || lam(hi) >= 0.0) {
        result.p_star = std::numeric_limits<double>::quiet_NaN();
    } else {
        while (hi - lo > 1e-4) {
            const double mid = 0.5 * (lo + hi);
            (lam(mid) >= 0.0 ? lo : hi) = mid;
        }
        result.p_star = 0.5 * (lo + hi);
    }

    json summary;
    summary["experiment"] = "three-state";
    summary["p_star"] = result.p_star;
    summary["cert_tol"] = config.cert_tol;
    summary["td_steps"] = steps;
    summary["lr_q"] = config.lr_q;
    summary["config_hash"] = result.table.config_hash;
    summary["generated_at"] = now_iso8601();
    result.summary_json = summary.dump(2);
    return result;
}

// ---------------------------------------------------------------------------
// frozen lake evaluation sweep
// ---------------------------------------------------------------------------

EvalSweepResult run_eval_sweep(const ExperimentConfig& config) {
    const LakeSetup setup = build_lake_setup(config);
    const long steps = config.td_steps > 0 ? config.td_steps : 2000000;
    const int N = setup.lake.mdp.pairs();

    EvalSweepResult result;
    result.table.config_hash = config.hash();
    result.table.columns = {"error", "diverged", "lambda_min", "kl", "lambda_min_q",
                            "dual_grad_norm"};
    const double nan = std::numeric_limits<double>::quiet_NaN();

    struct Cell {
        std::vector<ResultRow> rows;
    };
    const std::size_t n_cells = config.grid.size() * config.seeds.size();
    std::vector<Cell> cells(n_cells);

    parallel_cells(n_cells, config.threads, [&](std::size_t idx) {
        const double eta = config.grid[idx / config.seeds.size()];
        const std::uint64_t seed = config.seeds[idx % config.seeds.size()];
        const FeatureMap map = random_unit_features(seed, N, config.k, setup.lake.mdp.m);
        const SampleDistribution mu = mix_distributions(setup.mu_data, setup.mu_eval, eta);
        const CertificateReport cert = certify(setup.chain, map, mu, config.cert_tol);

        TDConfig td;
        td.steps = steps;
        td.lr = config.lr_q;
        td.record_stride = std::max<long>(1, steps / 40);
        td.reference = setup.q_eval;

        const TDTrace vanilla = run_td(setup.chain, map, mu.weights, VectorXd::Ones(N), td);

        DualConfig dc = config.dual;
        dc.seed = derive_seed(config.master_seed, idx);
        const DualSolveReport dual = solve_dual(setup.chain, map, mu.weights, dc);
        const TDTrace pop = run_td(setup.chain, map, mu.weights, dual.reweighting.u, td);

        Cell& cell = cells[idx];
        cell.rows.push_back({eta, seed, "vanilla",
                             {vanilla.final_error, vanilla.diverged ? 1.0 : 0.0, cert.lambda_min,
                              nan, nan, nan}});
        cell.rows.push_back({eta, seed, "popql",
                             {pop.final_error, pop.diverged ? 1.0 : 0.0, cert.lambda_min,
                              dual.reweighting.kl, dual.lambda_min_q, dual.final_grad_norm}});
    });
    for (auto& c : cells)
        for (auto& r : c.rows) result.table.rows.push_back(std::move(r));

    json summary;
    summary["experiment"] = "eval-sweep";
    summary["cert_shading_threshold"] = -config.cert_tol;
    summary["td_steps"] = steps;
    summary["lr_q"] = config.lr_q;
    json per_eta = json::array();
    for (double eta : config.grid) {
        double mean_v = 0, mean_p = 0, lam = 0;
        int div_v = 0, div_p = 0;
        for (std::uint64_t seed : config.seeds) {
            mean_v += *result.table.metric(eta, seed, "vanilla", "error");
            mean_p += *result.table.metric(eta, seed, "popql", "error");
            lam += *result.table.metric(eta, seed, "vanilla", "lambda_min");
            div_v += *result.table.metric(eta, seed, "vanilla", "diverged") > 0.5;
            div_p += *result.table.metric(eta, seed, "popql", "diverged") > 0.5;
        }
        const double ns = static_cast<double>(config.seeds.size());
        per_eta.push_back({{"eta", eta},
                           {"vanilla_mean_error", mean_v / ns},
                           {"popql_mean_error", mean_p / ns},
                           {"mean_lambda_min", lam / ns},
                           {"vanilla_diverged", div_v},
                           {"popql_diverged", div_p}});
    }
    summary["per_eta"] = std::move(per_eta);
    // trend of the certificate margin across the mixture grid
    int inversions = 0;
    {
        std::vector<double> lam_means;
        for (double eta : config.grid) {
            double lam = 0;
            for (std::uint64_t seed : config.seeds)
                lam += *result.table.metric(eta, seed, "vanilla", "lambda_min");
            lam_means.push_back(lam / static_cast<double>(config.seeds.size()));
        }
        for (std::size_t i = 1; i < lam_means.size(); ++i)
            if (lam_means[i] < lam_means[i - 1]) ++inversions;
    }
    summary["lambda_min_inversions"] = inversions;
    summary["config_hash"] = result.table.config_hash;
    summary["generated_at"] = now_iso8601();
    result.summary_json = summary.dump(2);
    return result;
}

// ---------------------------------------------------------------------------
// density export
// ---------------------------------------------------------------------------

DensityResult run_density_export(const ExperimentConfig& config) {
    const LakeSetup setup = build_lake_setup(config);
    const int N = setup.lake.mdp.pairs(), m = setup.lake.mdp.m;
    const FeatureMap map = random_unit_features(config.feature_seed, N, config.k, m);
    const SampleDistribution mu = mix_distributions(setup.mu_data, setup.mu_eval, config.eta);

    DualConfig dc = config.dual;
    dc.seed = derive_seed(config.master_seed, 0);
    const DualSolveReport dual = solve_dual(setup.chain, map, mu.weights, dc);

    auto state_grid = [&](const VectorXd& weights) {
        MatrixXd grid = MatrixXd::Zero(4, 4);
        for (int s = 0; s < setup.lake.mdp.n; ++s) {
            double w = 0.0;
            for (int a = 0; a < m; ++a) w += weights(s * m + a);
            grid(s / 4, s % 4) = w;
        }
        return grid;
    };

    DensityResult result;
    result.off_policy = state_grid(mu.weights);
    result.projected = state_grid(dual.reweighting.q.weights);
    result.on_policy = state_grid(setup.mu_eval.weights);
    result.kl_q_mu = dual.reweighting.kl;
    result.kl_nu_mu = kl_divergence(setup.mu_eval.weights, mu.weights);
    result.q_certificate = certify(setup.chain, map, dual.reweighting.q, config.cert_tol);

    json summary;
    summary["experiment"] = "density";
    summary["eta"] = config.eta;
    summary["kl_q_mu"] = result.kl_q_mu;
    summary["kl_nu_mu"] = result.kl_nu_mu;
    summary["q_lambda_min"] = result.q_certificate.lambda_min;
    summary["q_satisfied"] = result.q_certificate.satisfied;
    summary["dual_grad_norm"] = dual.final_grad_norm;
    summary["config_hash"] = config.hash();
    summary["generated_at"] = now_iso8601();
    result.summary_json = summary.dump(2);
    return result;
}

// ---------------------------------------------------------------------------
// training sweep
// ---------------------------------------------------------------------------

TrainSweepResult run_train_sweep(const ExperimentConfig& config) {
    const LakeSetup setup = build_lake_setup(config);
    const int N = setup.lake.mdp.pairs(), m = setup.lake.mdp.m, n = setup.lake.mdp.n;

    TrainSweepResult result;
    result.table.config_hash = config.hash();
    result.table.columns = {"return_normalized", "diverged",      "kl_final",
                            "entropy_final",     "lambda_min_q",  "u_invariant_ok"};
    const double nan = std::numeric_limits<double>::quiet_NaN();

    struct Cell {
        std::vector<ResultRow> rows;
        std::vector<std::pair<std::string, std::string>> artifacts;
    };
    const std::size_t n_cells = config.grid.size() * config.seeds.size();
    std::vector<Cell> cells(n_cells);

    parallel_cells(n_cells, config.threads, [&](std::size_t idx) {
        const double eta = config.grid[idx / config.seeds.size()];
        const std::uint64_t seed = config.seeds[idx % config.seeds.size()];
        const FeatureMap map = random_unit_features(seed, N, config.k, m);
        const SampleDistribution mu = mix_distributions(setup.mu_data, setup.mu_eval, eta);

        auto train_with = [&](bool freeze, double beta) {
            TrainConfig tc = config.train;
            tc.seed = derive_seed(config.master_seed, idx);
            tc.freeze_dual = freeze;
            tc.beta = beta;
            return train_popql(setup.lake.mdp, map, mu, tc);
        };

        const TrainResult pop = train_with(false, config.train.beta);
        const TrainResult fitted = train_with(true, 0.0);

        const std::string tag = "eta" + format_double(eta) + "_seed" + std::to_string(seed);
        std::ostringstream log_csv;
        pop.log_to_csv(log_csv);
        cells[idx].artifacts.emplace_back("logs/popql_" + tag + ".csv", log_csv.str());
        cells[idx].artifacts.emplace_back("logs/popql_" + tag + "_bundle.json",
                                          pop.bundle_json());
        const DiscretePolicy bc = behavior_cloning(n, m, mu);
        const double bc_return = evaluate_policy(setup.lake.mdp, bc);

        auto u_ok = [](const TrainResult& r) {
            for (const auto& row : r.log)
                if (row.max_u_invariant_gap > 1e-8 || row.q_sum_gap > 1e-10 ||
                    !row.u_is_one_when_zero_dual)
                    return 0.0;
            return 1.0;
        };
        const TrainLogRow& last_pop = pop.log.back();
        const TrainLogRow& last_fit = fitted.log.back();

        Cell& cell = cells[idx];
        cell.rows.push_back({eta, seed, "popql",
                             {pop.final_return_normalized, pop.diverged ? 1.0 : 0.0, last_pop.kl,
                              last_pop.entropy, last_pop.lambda_min, u_ok(pop)}});
        cell.rows.push_back({eta, seed, "fitted-q",
                             {fitted.final_return_normalized, fitted.diverged ? 1.0 : 0.0,
                              last_fit.kl, last_fit.entropy, last_fit.lambda_min, u_ok(fitted)}});
        cell.rows.push_back({eta, seed, "bc", {bc_return, 0.0, nan, nan, nan, nan}});
    });
    for (auto& c : cells) {
        for (auto& r : c.rows) result.table.rows.push_back(std::move(r));
        for (auto& a : c.artifacts) result.artifacts.push_back(std::move(a));
    }

    json per_eta = json::array();
    for (double eta : config.grid) {
        json entry;
        entry["eta"] = eta;
        static const std::vector<std::string> kMethods = {"popql", "fitted-q", "bc"};
        for (const std::string& method : kMethods) {
            double sum = 0, sq = 0;
            int divs = 0;
            const double ns = static_cast<double>(config.seeds.size());
            for (std::uint64_t seed : config.seeds) {
                const double r = *result.table.metric(eta, seed, method, "return_normalized");
                sum += r;
                sq += r * r;
                if (method != "bc")
                    divs += *result.table.metric(eta, seed, method, "diverged") > 0.5;
            }
            const double mean = sum / ns;
            const double var = std::max(0.0, sq / ns - mean * mean);
            const double stderr_mean = ns > 1 ? std::sqrt(var / (ns - 1)) : 0.0;
            entry[method] = {{"mean", mean}, {"stderr", stderr_mean}, {"diverged", divs}};
        }
        per_eta.push_back(std::move(entry));
    }
    json summary;
    summary["experiment"] = "train-sweep";
    summary["per_eta"] = std::move(per_eta);
    summary["beta"] = config.train.beta;
    summary["steps"] = config.train.steps;
    summary["config_hash"] = result.table.config_hash;
    summary["generated_at"] = now_iso8601();
    result.summary_json = summary.dump(2);
    return result;
}

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

namespace {

void write_text(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ModelError("cannot write " + path.string());
    out << content;
}

void write_table(const ExperimentConfig& cfg, const ResultTable& table) {
    const fs::path dir(cfg.out_dir);
    if (cfg.format == "csv") {
        std::ostringstream buf;
        table.to_csv(buf);
        write_text(dir / "sweep.csv", buf.str());
    } else {
        json rows = json::array();
        for (const auto& r : table.rows) {
            json row;
            row["grid_value"] = r.grid_value;
            row["seed"] = r.seed;
            row["method"] = r.method;
            for (std::size_t i = 0; i < table.columns.size(); ++i)
                row[table.columns[i]] = r.metrics[i];
            rows.push_back(std::move(row));
        }
        write_text(dir / "sweep.json", rows.dump(2));
    }
}

// mean of a metric across seeds, per grid value
std::vector<double> metric_means(const ExperimentConfig& cfg, const ResultTable& t,
                                 const std::string& method, const std::string& column) {
    std::vector<double> out;
    for (double g : cfg.grid) {
        double sum = 0;
        for (auto s : cfg.seeds) sum += t.metric(g, s, method, column).value_or(0.0);
        out.push_back(sum / static_cast<double>(cfg.seeds.size()));
    }
    return out;
}

int run_experiment(const ExperimentConfig& cfg, std::ostream& out) {
    const fs::path dir(cfg.out_dir);
    if (cfg.kind == "three-state") {
        const auto result = run_three_state_sweep(cfg);
        write_table(cfg, result.table);
        write_text(dir / "summary.json", result.summary_json);
        if (cfg.plots) {
            std::vector<SvgSeries> series;
            SvgSeries v{"vanilla TD", cfg.grid, metric_means(cfg, result.table, "vanilla-td", "error"),
                        "#d62728", true};
            SvgSeries p{"reweighted TD", cfg.grid,
                        metric_means(cfg, result.table, "popql-td", "error"), "#1f77b4", true};
            write_text(dir / "error_vs_p.svg",
                       svg_line_chart("final TD error vs sampling parameter p", "p",
                                      "log10 mu-weighted error", {v, p}, true));
            SvgSeries lam{"lambda_min", cfg.grid,
                          metric_means(cfg, result.table, "certificate", "lambda_min"), "#2ca02c",
                          false};
            write_text(dir / "lambda_vs_p.svg",
                       svg_line_chart("certificate margin vs p", "p", "lambda_min(E[F])", {lam}));
        }
        out << "three-state sweep: " << cfg.grid.size() << " cells, p* = "
            << format_double(result.p_star) << " -> " << cfg.out_dir << "\n";
    } else if (cfg.kind == "eval-sweep") {
        const auto result = run_eval_sweep(cfg);
        write_table(cfg, result.table);
        write_text(dir / "summary.json", result.summary_json);
        if (cfg.plots) {
            SvgSeries v{"vanilla", cfg.grid, metric_means(cfg, result.table, "vanilla", "error"),
                        "#d62728", true};
            SvgSeries p{"popql", cfg.grid, metric_means(cfg, result.table, "popql", "error"),
                        "#1f77b4", true};
            write_text(dir / "error_vs_eta.svg",
                       svg_line_chart("Q evaluation error vs dataset mixture", "eta",
                                      "log10 mu-weighted error", {v, p}, true));
        }
        out << "eval-sweep: " << cfg.grid.size() * cfg.seeds.size() << " cells -> " << cfg.out_dir
            << "\n";
    } else if (cfg.kind == "density") {
        const auto result = run_density_export(cfg);
        auto grid_csv = [](const MatrixXd& g) {
            std::ostringstream buf;
            for (int r = 0; r < g.rows(); ++r) {
                for (int c = 0; c < g.cols(); ++c)
                    buf << (c ? "," : "") << format_double(g(r, c));
                buf << '\n';
            }
            return buf.str();
        };
        write_text(dir / "density_offpolicy.csv", grid_csv(result.off_policy));
        write_text(dir / "density_projected.csv", grid_csv(result.projected));
        write_text(dir / "density_onpolicy.csv", grid_csv(result.on_policy));
        write_text(dir / "summary.json", result.summary_json);
        if (cfg.plots) {
            write_text(dir / "density_offpolicy.svg",
                       svg_heatmap("off-policy occupancy", result.off_policy));
            write_text(dir / "density_projected.svg",
                       svg_heatmap("projected occupancy", result.projected));
            write_text(dir / "density_onpolicy.svg",
                       svg_heatmap("on-policy occupancy", result.on_policy));
        }
        out << "density: KL(q*||mu) = " << format_double(result.kl_q_mu)
            << ", KL(nu||mu) = " << format_double(result.kl_nu_mu) << " -> " << cfg.out_dir
            << "\n";
    } else if (cfg.kind == "train-sweep") {
        const auto result = run_train_sweep(cfg);
        write_table(cfg, result.table);
        write_text(dir / "summary.json", result.summary_json);
        for (const auto& [name, content] : result.artifacts) write_text(dir / name, content);
        if (cfg.plots) {
            SvgSeries a{"popql", cfg.grid,
                        metric_means(cfg, result.table, "popql", "return_normalized"), "#1f77b4"};
            SvgSeries b{"fitted-q", cfg.grid,
                        metric_means(cfg, result.table, "fitted-q", "return_normalized"),
                        "#d62728"};
            SvgSeries c{"behavior cloning", cfg.grid,
                        metric_means(cfg, result.table, "bc", "return_normalized"), "#2ca02c"};
            write_text(dir / "return_vs_eta.svg",
                       svg_line_chart("normalized return vs dataset mixture", "eta",
                                      "normalized return", {a, b, c}));
        }
        out << "train-sweep: " << cfg.grid.size() * cfg.seeds.size() << " cells -> " << cfg.out_dir
            << "\n";
    } else if (cfg.kind == "certify" || cfg.kind == "solve-dual") {
        // single-instance commands on the three-state family or the lake
        FiniteMRP chain;
        FeatureMap map;
        VectorXd mu;
        if (cfg.instance == "frozen-lake") {
            const LakeSetup setup = build_lake_setup(cfg);
            chain = setup.chain;
            map = random_unit_features(cfg.feature_seed, setup.lake.mdp.pairs(), cfg.k,
                                       setup.lake.mdp.m);
            mu = mix_distributions(setup.mu_data, setup.mu_eval, cfg.eta).weights;
        } else {
            const ThreeStateInstance inst = build_three_state(cfg.three_state_eps);
            chain = inst.mrp;
            map = inst.basis;
            mu = three_state_family(cfg.p).weights;
        }
        if (cfg.kind == "certify") {
            SampleDistribution dist;
            dist.weights = mu;
            const CertificateReport report = certify(chain, map, dist, cfg.cert_tol);
            write_text(dir / "certificate.json", report.to_json());
            write_text(dir / "certificate.csv",
                       CertificateReport::csv_header() + "\n" + report.csv_row() + "\n");
            out << "certify: lambda_min = " << format_double(report.lambda_min)
                << (report.satisfied ? " (satisfied)" : " (violated)") << " -> " << cfg.out_dir
                << "\n";
        } else {
            DualConfig dc = cfg.dual;
            dc.seed = derive_seed(cfg.master_seed, 0);
            const DualSolveReport report = solve_dual(chain, map, mu, dc);
            write_text(dir / "dual.json", report.dual.to_json());
            write_text(dir / "reweighting.csv", report.reweighting.csv());
            json j;
            j["objective"] = report.objective;
            j["kl"] = report.reweighting.kl;
            j["lambda_min_q"] = report.lambda_min_q;
            j["grad_norm"] = report.final_grad_norm;
            j["converged"] = report.converged;
            j["iterations_run"] = report.iterations_run;
            j["config_hash"] = cfg.hash();
            j["generated_at"] = now_iso8601();
            write_text(dir / "summary.json", j.dump(2));
            out << "solve-dual: KL = " << format_double(report.reweighting.kl)
                << ", lambda_min(q) = " << format_double(report.lambda_min_q) << " -> "
                << cfg.out_dir << "\n";
        }
    }
    return 0;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"projected off-policy Q-learning toolkit"};
    app.require_subcommand(1);

    struct Shared {
        std::string config_path, out_dir, format, plots, instance;
        std::int64_t seed = -1;
        std::int64_t steps = -1;
        int k = -1;
        double p = -1.0, eta = -1.0;
        std::vector<double> grid;
        std::vector<std::uint64_t> seeds;
    } shared;

    const std::vector<std::pair<std::string, std::string>> kinds = {
        {"certify", "contraction certificate of one sampling distribution"},
        {"three-state", "sweep of the three-state chain over sampling parameters"},
        {"eval-sweep", "off-policy evaluation sweep on Frozen Lake"},
        {"density", "occupancy heatmap export (off-policy, projected, on-policy)"},
        {"train-sweep", "offline policy optimization sweep on Frozen Lake"},
        {"solve-dual", "low-rank dual solve and reweighting for one distribution"}};

    for (const auto& [name, desc] : kinds) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", shared.config_path, "JSON config file");
        sub->add_option("--out", shared.out_dir, "output directory");
        sub->add_option("--seed", shared.seed, "master seed");
        sub->add_option("--format", shared.format, "csv or json")
            ->check(CLI::IsMember({"csv", "json"}));
        sub->add_option("--plots", shared.plots, "on or off")->check(CLI::IsMember({"on", "off"}));
        sub->add_option("--steps", shared.steps, "TD / training step budget");
        sub->add_option("--k", shared.k, "feature dimension");
        sub->add_option("--p", shared.p, "three-state sampling parameter");
        sub->add_option("--eta", shared.eta, "dataset mixture fraction");
        sub->add_option("--instance", shared.instance, "three-state or frozen-lake")
            ->check(CLI::IsMember({"three-state", "frozen-lake"}));
        sub->add_option("--grid", shared.grid, "sweep grid values");
        sub->add_option("--seeds", shared.seeds, "sweep seeds");
    }

    std::vector<const char*> argv;
    argv.push_back("popql");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        const std::string kind = app.get_subcommands().front()->get_name();
        ExperimentConfig cfg = shared.config_path.empty()
                                   ? ExperimentConfig::defaults_for(kind)
                                   : ExperimentConfig::from_json_file(shared.config_path);
        cfg.kind = kind;
        if (!shared.out_dir.empty()) cfg.out_dir = shared.out_dir;
        if (!shared.format.empty()) cfg.format = shared.format;
        if (!shared.plots.empty()) cfg.plots = shared.plots == "on";
        if (shared.seed >= 0) cfg.master_seed = static_cast<std::uint64_t>(shared.seed);
        if (shared.steps >= 0) {
            cfg.td_steps = shared.steps;
            cfg.train.steps = shared.steps;
        }
        if (shared.k > 0) cfg.k = shared.k;
        if (shared.p >= 0.0) cfg.p = shared.p;
        if (shared.eta >= 0.0) cfg.eta = shared.eta;
        if (!shared.instance.empty()) cfg.instance = shared.instance;
        if (!shared.grid.empty()) cfg.grid = shared.grid;
        if (!shared.seeds.empty()) cfg.seeds = shared.seeds;
        cfg.validate();
        return run_experiment(cfg, out);
    } catch (const ModelError& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        err << "failure: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace popql
