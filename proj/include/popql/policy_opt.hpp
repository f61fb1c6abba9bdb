#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "popql/dual.hpp"
#include "popql/features.hpp"
#include "popql/markov.hpp"

namespace popql {

/// Discrete softmax actor (temperature 1) with entropy coefficient alpha,
/// optionally auto-tuned toward a target mean entropy.
struct SoftmaxPolicy {
    MatrixXd logits;  // n x m
    double alpha = 0.2;
    double target_entropy = 0.5;
    bool autotune = true;

    DiscretePolicy policy() const;
};

DiscretePolicy greedy_from_logits(const MatrixXd& logits);  // ties to lowest action index

struct TrainConfig {
    double beta = 0.5;
    double lr_q = 1e-3;
    double lr_pi = 1e-4;
    double lr_ab = 1e-3;
    double lr_g = -1.0;  // < 0 means 10 * lr_ab
    long steps = 100000;
    int batch_size = 0;  // 0 = exact expectation mode
    std::uint64_t seed = 1;
    double target_entropy = 0.5;
    bool autotune_alpha = true;
    double alpha0 = 0.2;
    double alpha_lr = 1e-3;
    // anti-windup band for the entropy coefficient; the dual ascent saturates
    // here instead of accumulating while the slow actor catches up
    double alpha_min = -3.0;
    double alpha_max = 8.0;
    int rank = 4;
    double dual_init_scale = 1e-3;
    double exp_clamp = 50.0;
    double divergence_ceiling = 1e6;
    long log_stride = 1000;
    bool freeze_dual = false;  // keeps A = B = 0, u == 1 (fitted-Q ablation)

    void validate() const;
};

struct TrainLogRow {
    long step = 0;
    double q_loss = 0.0;
    double dual_objective = 0.0;
    double lambda_min = 0.0;
    double kl = 0.0;
    double entropy = 0.0;
    double alpha = 0.0;
    double return_normalized = 0.0;
    double max_u_invariant_gap = 0.0;  // |E_mu[u] - 1|
    double q_sum_gap = 0.0;            // |sum q - 1|
    bool u_is_one_when_zero_dual = true;
};

struct TrainResult {
    SoftmaxPolicy actor;
    LinearValue value;
    DualState dual;
    std::vector<TrainLogRow> log;
    bool diverged = false;
    long steps_run = 0;
    DiscretePolicy greedy;
    double final_return_normalized = 0.0;

    void log_to_csv(std::ostream& out) const;
    std::string bundle_json() const;  // final actor/value/dual artifacts
};

/// Actor surrogate objective
///   J = E_mu[Q_w] + alpha E_muS[H(pi)] + beta log E_mu[exp(h)]
/// where h couples the policy to the dual factors through the resampled
/// next-action expectation. policy_gradient is its exact gradient in the
/// logits; the beta term contributes 2 beta E_q[grad E_pi <y_B, y_A'>].
double policy_objective(const FiniteMDP& mdp, const FeatureMap& map, const SoftmaxPolicy& actor,
                        const DualState& dual, const SampleDistribution& mu, const VectorXd& w,
                        double beta, double clamp = 50.0);
MatrixXd policy_gradient(const FiniteMDP& mdp, const FeatureMap& map, const SoftmaxPolicy& actor,
                         const DualState& dual, const SampleDistribution& mu, const VectorXd& w,
                         double beta, double clamp = 50.0);

/// Full joint training loop: per step, in order, dual factors -> g -> u-weighted
/// Q regression -> policy (entropy-regularized, beta-coupled) -> alpha.
TrainResult train_popql(const FiniteMDP& mdp, const FeatureMap& map, const SampleDistribution& mu,
                        const TrainConfig& config);

/// pi(a|s) = empirical action frequency at s; unvisited states get uniform.
DiscretePolicy behavior_cloning(int n, int m, const SampleDistribution& data);

struct EvalAnchors {
    double j_opt = 0.0;      // start-weighted optimal value
    double j_uniform = 0.0;  // start-weighted uniform-policy value
};

EvalAnchors eval_anchors(const FiniteMDP& mdp);

/// Exact start-weighted discounted return of a policy.
double policy_return(const FiniteMDP& mdp, const DiscretePolicy& policy);

/// Return normalized against the exact optimal policy (1.0) and the
/// uniform-random policy (0.0).
double evaluate_policy(const FiniteMDP& mdp, const DiscretePolicy& policy);
double evaluate_policy(const FiniteMDP& mdp, const DiscretePolicy& policy,
                       const EvalAnchors& anchors);

}  // namespace popql
