// Acceptance suite: runs each release criterion at its stated tolerance and
// prints one PASS/FAIL line per criterion. Exits nonzero if any fail.

#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "popql/harness.hpp"

using namespace popql;

namespace {

struct Outcome {
    int id;
    std::string label;
    bool pass;
    std::string detail;
    double seconds;
};

std::vector<Outcome> g_outcomes;

class Timer {
public:
    Timer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

void report(int id, const std::string& label, bool pass, const std::string& detail,
            double seconds) {
    g_outcomes.push_back({id, label, pass, detail, seconds});
    std::printf("[%s] %2d. %s — %s (%.1fs)\n", pass ? "PASS" : "FAIL", id, label.c_str(),
                detail.c_str(), seconds);
    std::fflush(stdout);
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list args;
    va_start(args, f);
    std::vsnprintf(buf, sizeof(buf), f, args);
    va_end(args);
    return buf;
}

VectorXd random_simplex(std::uint64_t seed, int n) {
    Rng rng(seed);
    VectorXd w(n);
    for (int i = 0; i < n; ++i) w(i) = 0.05 + rng.uniform();
    return w / w.sum();
}

// ---------------------------------------------------------------------------

void criterion_1_three_state_reproduction() {
    Timer timer;
    const ThreeStateInstance inst = build_three_state();
    const VectorXd ones = VectorXd::Ones(3);

    // vanilla TD, pinned budget: 1e5 exact-mode steps at lr = 1e-3
    TDConfig vanilla_cfg;
    vanilla_cfg.steps = 100000;
    vanilla_cfg.lr = 1e-3;
    vanilla_cfg.reference = inst.target_value;
    const TDTrace vanilla =
        run_td(inst.mrp, inst.basis, three_state_family(0.8).weights, ones, vanilla_cfg);

    // reweighted TD with the solved dual, generous step budget
    DualConfig dual_cfg;
    dual_cfg.seed = 11;
    dual_cfg.iterations = 200000;
    const DualSolveReport dual =
        solve_dual(inst.mrp, inst.basis, three_state_family(0.8).weights, dual_cfg);
    TDConfig pop_cfg = vanilla_cfg;
    pop_cfg.steps = 4000000;
    const TDTrace pop =
        run_td(inst.mrp, inst.basis, three_state_family(0.8).weights, dual.reweighting.u, pop_cfg);

    const VectorXd mu_on = three_state_family(0.5).weights;
    const VectorXd w_on = lstd_fixed_point(inst.mrp, inst.basis.Phi, mu_on);
    const double lstd_on_error = approx_error(inst.basis.Phi, w_on, inst.target_value, mu_on);

    const bool pop_ok = !pop.diverged && pop.final_error <= 10.0 * lstd_on_error;
    const double secs = timer.seconds();
    const bool pass = vanilla.diverged && pop_ok && secs < 30.0;
    report(1, "three-state reproduction", pass,
           fmt("vanilla diverged within 1e5 steps: %s; reweighted error %.3g <= 10x on-policy "
               "LSTD %.3g: %s",
               vanilla.diverged ? "yes" : "NO", pop.final_error, 10.0 * lstd_on_error,
               pop_ok ? "yes" : "NO"),
           secs);

    if (!vanilla.diverged) {
        // supporting evidence: the flag does trip at this lr, far beyond the
        // pinned step budget (the unstable mode grows at |lambda| ~ 2.2e-3)
        TDConfig extended = vanilla_cfg;
        extended.steps = 10000000;
        extended.record_stride = 1000000;
        const TDTrace long_run =
            run_td(inst.mrp, inst.basis, three_state_family(0.8).weights, ones, extended);
        std::printf("       [info] with the same lr the vanilla flag trips at step %ld "
                    "(budget pinned at 1e5)\n",
                    long_run.steps_run);
    }
}

double criterion_2_certificate_crossing() {
    Timer timer;
    const ThreeStateInstance inst = build_three_state();
    auto lam = [&](double p) {
        return certify(inst.mrp, inst.basis, three_state_family(p)).lambda_min;
    };
    double lo = 0.0, hi = 1.0;
    while (hi - lo > 1e-4) {
        const double mid = 0.5 * (lo + hi);
        (lam(mid) >= 0.0 ? lo : hi) = mid;
    }
    const double p_star = 0.5 * (lo + hi);
    const bool pass = p_star >= 0.45 && p_star <= 0.60;
    report(2, "certificate crossing p*", pass, fmt("p* = %.4f in [0.45, 0.60]", p_star),
           timer.seconds());
    return p_star;
}

void criterion_3_agreement_below_crossing(double p_star) {
    Timer timer;
    const ThreeStateInstance inst = build_three_state();
    const VectorXd ones = VectorXd::Ones(3);
    bool pass = true;
    std::string worst = "all points agree";
    double worst_gap = 0.0, worst_udev = 0.0;
    int cells = 0;
    for (int i = 0; i <= 20; ++i) {
        const double p = 0.05 * i;
        if (p > p_star - 0.02) continue;
        ++cells;
        const VectorXd mu = three_state_family(p).weights;

        DualConfig dual_cfg;
        dual_cfg.seed = 100 + i;
        dual_cfg.iterations = 200000;
        const DualSolveReport dual = solve_dual(inst.mrp, inst.basis, mu, dual_cfg);
        double u_dev = 0.0;  // reweighting is only meaningful on the support
        for (int x = 0; x < 3; ++x)
            if (mu(x) > 0.0) u_dev = std::max(u_dev, std::abs(dual.reweighting.u(x) - 1.0));

        TDConfig td_cfg;
        td_cfg.steps = 4000000;
        td_cfg.lr = 1e-3;
        td_cfg.reference = inst.target_value;
        const TDTrace vanilla = run_td(inst.mrp, inst.basis, mu, ones, td_cfg);
        const TDTrace pop = run_td(inst.mrp, inst.basis, mu, dual.reweighting.u, td_cfg);
        const double gap = std::abs(vanilla.final_error - pop.final_error);
        worst_gap = std::max(worst_gap, gap);
        worst_udev = std::max(worst_udev, u_dev);
        if (gap > 1e-4 || u_dev > 1e-2) {
            pass = false;
            worst = fmt("p = %.2f: error gap %.2e, max|u-1| %.2e", p, gap, u_dev);
        }
    }
    report(3, "identical solutions in the certified regime", pass,
           fmt("%d grid points below p*-0.02; worst error gap %.2e, worst max|u-1| %.2e", cells,
               worst_gap, worst_udev),
           timer.seconds());
}

EvalSweepResult criterion_4_eval_sweep() {
    Timer timer;
    ExperimentConfig cfg = ExperimentConfig::defaults_for("eval-sweep");
    cfg.threads = 2;
    const EvalSweepResult result = run_eval_sweep(cfg);

    int diverged_at_zero = 0;
    bool pop_bounded = true;
    bool lambda_column = true;
    for (std::uint64_t seed : cfg.seeds) {
        if (*result.table.metric(0.0, seed, "vanilla", "diverged") > 0.5) ++diverged_at_zero;
        const double e0 = *result.table.metric(0.0, seed, "popql", "error");
        const double e1 = *result.table.metric(1.0, seed, "popql", "error");
        if (!(e0 <= 10.0 * e1)) pop_bounded = false;
        for (double eta : cfg.grid)
            if (!std::isfinite(*result.table.metric(eta, seed, "vanilla", "lambda_min")))
                lambda_column = false;
    }
    // trend of the mean certificate margin across the grid (diagnostic)
    int inversions = 0;
    {
        double prev = 0.0;
        bool first = true;
        for (double eta : cfg.grid) {
            double lam = 0;
            for (std::uint64_t seed : cfg.seeds)
                lam += *result.table.metric(eta, seed, "vanilla", "lambda_min");
            lam /= static_cast<double>(cfg.seeds.size());
            if (!first && lam < prev) ++inversions;
            prev = lam;
            first = false;
        }
    }
    const double secs = timer.seconds();
    const bool pass =
        diverged_at_zero >= 4 && pop_bounded && lambda_column && secs < 600.0;
    report(4, "frozen-lake evaluation sweep", pass,
           fmt("vanilla diverged at eta=0 on %d/5 seeds (need >=4); reweighted error bounded by "
               "10x its on-policy level: %s; lambda_min column: %s (trend inversions: %d)",
               diverged_at_zero, pop_bounded ? "yes" : "NO", lambda_column ? "yes" : "NO",
               inversions),
           secs);
    return result;
}

void criterion_5_dual_vs_oracle() {
    Timer timer;
    const ThreeStateInstance inst = build_three_state();
    const VectorXd mu = three_state_family(0.8).weights;
    DualConfig cfg;
    cfg.seed = 7;
    cfg.iterations = 200000;
    const DualSolveReport dual = solve_dual(inst.mrp, inst.basis, mu, cfg);
    const double oracle = oracles::simplex_projection_kl(inst.mrp, inst.basis.Phi, mu);
    const double gap = std::abs(dual.reweighting.kl - oracle);
    const bool pass = gap <= 1e-3 && dual.lambda_min_q >= -0.005;
    report(5, "dual KL matches the simplex oracle", pass,
           fmt("KL = %.6f vs oracle %.6f (|gap| = %.2e <= 1e-3); lambda_min(q) = %.2e >= -5e-3",
               dual.reweighting.kl, oracle, gap, dual.lambda_min_q),
           timer.seconds());
}

void criterion_6_gradient_suites() {
    Timer timer;
    int dual_ok = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 3 + trial % 5, k = 2 + trial % 4, r = 1 + trial % 4;
        const FiniteMDP mdp = random_mdp(9000 + trial, n, 1, 0.9);
        const FiniteMRP chain = mdp_to_mrp(mdp, uniform_policy(n, 1));
        const FeatureMap map = random_unit_features(9100 + trial, n, k);
        const VectorXd mu = random_simplex(9200 + trial, n);
        const DualState d = init_dual(9300 + trial, k, r, 0.4);
        const DualGradient g = dual_gradient(chain, map.Phi, mu, d.A, d.B);
        const MatrixXd fd_a = oracles::central_difference(
            [&](const MatrixXd& a) { return dual_objective(chain, map.Phi, mu, a, d.B).value; },
            d.A);
        const MatrixXd fd_b = oracles::central_difference(
            [&](const MatrixXd& b) { return dual_objective(chain, map.Phi, mu, d.A, b).value; },
            d.B);
        const double denom = std::max(1e-12, std::sqrt(fd_a.squaredNorm() + fd_b.squaredNorm()));
        const double err = std::sqrt((g.dA - fd_a).squaredNorm() + (g.dB - fd_b).squaredNorm());
        if (err / denom <= 1e-5) ++dual_ok;
    }

    int policy_ok = 0;
    for (int trial = 0; trial < 30; ++trial) {
        const FiniteMDP mdp = random_mdp(9400 + trial, 4 + trial % 3, 2 + trial % 2, 0.9);
        const int n = mdp.n, m = mdp.m;
        const FeatureMap map = random_unit_features(9500 + trial, n * m, 4, m);
        SampleDistribution mu;
        mu.weights = random_simplex(9600 + trial, n * m);
        Rng rng(9700 + trial);
        SoftmaxPolicy actor;
        actor.logits = MatrixXd(n, m);
        for (int s = 0; s < n; ++s)
            for (int a = 0; a < m; ++a) actor.logits(s, a) = rng.uniform(-1, 1);
        actor.alpha = 0.2 + 0.1 * (trial % 4);
        const DualState dual = init_dual(9800 + trial, 4, 2, 0.4);
        VectorXd w(4);
        for (int i = 0; i < 4; ++i) w(i) = rng.uniform(-1, 1);
        const double beta = 0.2 + 0.3 * (trial % 3);
        const MatrixXd grad = policy_gradient(mdp, map, actor, dual, mu, w, beta);
        const MatrixXd fd = oracles::central_difference(
            [&](const MatrixXd& logits) {
                SoftmaxPolicy probe = actor;
                probe.logits = logits;
                return policy_objective(mdp, map, probe, dual, mu, w, beta);
            },
            actor.logits);
        if ((grad - fd).norm() / std::max(1e-12, fd.norm()) <= 1e-5) ++policy_ok;
    }

    const bool pass = dual_ok == 50 && policy_ok == 30;
    report(6, "gradient finite-difference suites", pass,
           fmt("dual gradients %d/50 within 1e-5; policy gradients %d/30 within 1e-5", dual_ok,
               policy_ok),
           timer.seconds());
}

void criterion_7_certificate_properties() {
    Timer timer;
    int positivity_ok = 0, agreement_ok = 0, degenerate = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 3 + trial % 6, m = 1 + trial % 3;
        const FiniteMDP mdp = random_mdp(10000 + trial, n, m, 1.0);
        const DiscretePolicy pi = random_policy(10100 + trial, n, m);
        const FiniteMRP chain = mdp_to_mrp(mdp, pi);
        const FeatureMap map = random_unit_features(10200 + trial, n * m, 2 + trial % 4, m);
        const SampleDistribution nu = stationary_distribution(chain.P);
        if (lambda_min_of(expected_f(chain, map.Phi, nu.weights)) >= -1e-8) ++positivity_ok;

        SampleDistribution mu;
        mu.weights = random_simplex(10300 + trial, n * m);
        const SchurReport schur = schur_equivalence_check(chain, map, mu);
        if (schur.degenerate)
            ++degenerate;
        else if (schur.agree)
            ++agreement_ok;
    }
    const bool pass = positivity_ok == 100 && agreement_ok + degenerate == 100;
    report(7, "certificate property suites", pass,
           fmt("on-policy positivity %d/100; Schur/LMI agreement %d/%d non-degenerate",
               positivity_ok, agreement_ok, 100 - degenerate),
           timer.seconds());
}

void criterion_8_lemma1() {
    Timer timer;
    int tested = 0, holds = 0;
    for (int trial = 0; tested < 50 && trial < 500; ++trial) {
        const int n = 4 + trial % 4, m = 1 + trial % 3;
        const FiniteMDP mdp = random_mdp(11000 + trial, n, m, 1.0);
        const DiscretePolicy pi = random_policy(11100 + trial, n, m);
        const FiniteMRP chain = mdp_to_mrp(mdp, pi);
        const VectorXd nu = stationary_distribution(chain.P).weights;
        Rng rng(11200 + trial);
        VectorXd mu_w(n * m);
        for (int i = 0; i < n * m; ++i) mu_w(i) = nu(i) * (1.0 + 0.5 * (rng.uniform() - 0.5));
        mu_w /= mu_w.sum();
        SampleDistribution mu;
        mu.weights = mu_w;
        const FeatureMap map = random_unit_features(11300 + trial, n * m, 2 + trial % 4, m);
        Lemma1Report rep;
        try {
            rep = lemma1_bound(mdp, pi, map, mu);
        } catch (const NumericError&) {
            continue;
        }
        if (!rep.certificate_satisfied) continue;
        ++tested;
        if (rep.holds) ++holds;
    }
    const bool pass = tested == 50 && holds == 50;
    report(8, "fixed-point error bound", pass,
           fmt("squared-error bound held on %d/%d certificate-satisfying instances", holds, tested),
           timer.seconds());
}

TrainSweepResult criterion_9_train_sweep() {
    Timer timer;
    ExperimentConfig cfg = ExperimentConfig::defaults_for("train-sweep");
    cfg.threads = 2;
    const TrainSweepResult result = run_train_sweep(cfg);

    bool returns_ok = true, no_divergence = true;
    std::string detail;
    for (double eta : cfg.grid) {
        double pop_sum = 0, pop_sq = 0, bc_sum = 0, bc_sq = 0;
        const double ns = static_cast<double>(cfg.seeds.size());
        for (std::uint64_t seed : cfg.seeds) {
            const double rp = *result.table.metric(eta, seed, "popql", "return_normalized");
            const double rb = *result.table.metric(eta, seed, "bc", "return_normalized");
            pop_sum += rp;
            pop_sq += rp * rp;
            bc_sum += rb;
            bc_sq += rb * rb;
            if (*result.table.metric(eta, seed, "popql", "diverged") > 0.5) no_divergence = false;
        }
        const double pop_mean = pop_sum / ns, bc_mean = bc_sum / ns;
        const double pop_se =
            std::sqrt(std::max(0.0, pop_sq / ns - pop_mean * pop_mean) / (ns - 1));
        const double bc_se = std::sqrt(std::max(0.0, bc_sq / ns - bc_mean * bc_mean) / (ns - 1));
        const double se = std::sqrt(pop_se * pop_se + bc_se * bc_se);
        if (!(pop_mean >= bc_mean - se)) {
            returns_ok = false;
            detail = fmt("eta = %.2f: popql %.3f < bc %.3f - se %.3f", eta, pop_mean, bc_mean, se);
        }
    }
    const double secs = timer.seconds();
    const bool pass = returns_ok && no_divergence && secs < 1800.0;
    report(9, "frozen-lake training sweep", pass,
           returns_ok && no_divergence
               ? fmt("popql mean >= bc mean - 1se at all %zu grid points; no divergence flags",
                     cfg.grid.size())
               : (returns_ok ? "a popql run set the divergence flag" : detail),
           secs);
    return result;
}

void criterion_10_reweighting_invariants(const TrainSweepResult& sweep) {
    Timer timer;
    bool ok = true;
    int cells = 0;
    for (const auto& row : sweep.table.rows) {
        if (row.method != "popql" && row.method != "fitted-q") continue;
        ++cells;
        const auto col =
            std::find(sweep.table.columns.begin(), sweep.table.columns.end(), "u_invariant_ok");
        if (row.metrics[col - sweep.table.columns.begin()] != 1.0) ok = false;
    }
    report(10, "reweighting invariants at every logged step", ok,
           fmt("E_mu[u] = 1 (1e-8), sum q = 1 (1e-10), u = 1 under the zero dual across %d runs",
               cells),
           timer.seconds());
}

void criterion_11_determinism() {
    Timer timer;
    bool pass = true;
    std::string detail = "three-state, eval and train cells reran bit-identically";

    {
        ExperimentConfig cfg = ExperimentConfig::defaults_for("three-state");
        cfg.grid = {0.5, 0.8};
        cfg.td_steps = 500000;
        std::ostringstream a, b;
        run_three_state_sweep(cfg).table.to_csv(a);
        run_three_state_sweep(cfg).table.to_csv(b);
        if (a.str() != b.str()) {
            pass = false;
            detail = "three-state rerun differs";
        }
    }
    {
        ExperimentConfig cfg = ExperimentConfig::defaults_for("eval-sweep");
        cfg.grid = {0.0};
        cfg.seeds = {1};
        cfg.td_steps = 300000;
        cfg.dual.iterations = 30000;
        std::ostringstream a, b;
        run_eval_sweep(cfg).table.to_csv(a);
        run_eval_sweep(cfg).table.to_csv(b);
        if (a.str() != b.str()) {
            pass = false;
            detail = "eval-sweep rerun differs";
        }
    }
    {
        ExperimentConfig cfg = ExperimentConfig::defaults_for("train-sweep");
        cfg.grid = {1.0};
        cfg.seeds = {1};
        cfg.train.steps = 100000;
        cfg.train.log_stride = 20000;
        std::ostringstream a, b;
        run_train_sweep(cfg).table.to_csv(a);
        run_train_sweep(cfg).table.to_csv(b);
        if (a.str() != b.str()) {
            pass = false;
            detail = "train-sweep rerun differs";
        }
    }
    report(11, "determinism of acceptance experiments", pass, detail, timer.seconds());
}

}  // namespace

int main() {
    std::printf("acceptance: projected off-policy Q-learning, desk-scale criteria\n");
    criterion_1_three_state_reproduction();
    const double p_star = criterion_2_certificate_crossing();
    criterion_3_agreement_below_crossing(p_star);
    criterion_4_eval_sweep();
    criterion_5_dual_vs_oracle();
    criterion_6_gradient_suites();
    criterion_7_certificate_properties();
    criterion_8_lemma1();
    const TrainSweepResult sweep = criterion_9_train_sweep();
    criterion_10_reweighting_invariants(sweep);
    criterion_11_determinism();

    int passed = 0;
    for (const auto& o : g_outcomes) passed += o.pass;
    std::printf("acceptance: %d/%zu criteria passed\n", passed, g_outcomes.size());
    return passed == static_cast<int>(g_outcomes.size()) ? 0 : 1;
}
