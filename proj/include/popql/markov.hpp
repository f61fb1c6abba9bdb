#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "popql/util.hpp"

namespace popql {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Tolerances used when validating model invariants.
constexpr double kRowSumTol = 1e-12;
constexpr double kDistributionTol = 1e-10;

/// Finite Markov reward process: row-stochastic transition matrix P (n x n),
/// reward vector R (n) and discount gamma in [0, 1).
struct FiniteMRP {
    MatrixXd P;
    VectorXd R;
    double gamma = 0.0;

    int n() const { return static_cast<int>(P.rows()); }
    void validate() const;
};

/// Finite Markov decision process. Transitions are stored flat: row s*m + a of
/// P is the next-state distribution for taking action a in state s. Rewards
/// are indexed the same way. This flat (s, a) ordering is used everywhere in
/// the library and in all serialized files.
struct FiniteMDP {
    int n = 0;
    int m = 0;
    MatrixXd P;      // (n*m) x n
    VectorXd R;      // n*m
    double gamma = 0.0;
    VectorXd start;  // n

    int pairs() const { return n * m; }
    int flat(int s, int a) const { return s * m + a; }
    void validate() const;
};

/// Row s is the action distribution pi(.|s).
struct DiscretePolicy {
    MatrixXd pi;  // n x m

    int states() const { return static_cast<int>(pi.rows()); }
    int actions() const { return static_cast<int>(pi.cols()); }
    void validate() const;
};

struct TransitionRecord {
    int state = 0;
    int action = 0;
    int next_state = 0;
    double reward = 0.0;
    double count = 1.0;
};

/// Probability vector over chain states (n for an MRP, n*m flat state-action
/// pairs for an MDP), optionally backed by a transition dataset whose
/// empirical (state, action) frequencies must match the weights.
struct SampleDistribution {
    VectorXd weights;
    std::vector<TransitionRecord> dataset;

    bool has_dataset() const { return !dataset.empty(); }
    // num_actions = 1 treats records as chain-state indexed (MRP mode).
    void validate(int num_actions = 1) const;
};

SampleDistribution point_mass(int n, int index);
SampleDistribution uniform_distribution(int n);

/// Solves V = R + gamma P V exactly. Throws SingularSystemError if the linear
/// solve fails or leaves a Bellman residual above 1e-9.
VectorXd exact_value(const FiniteMRP& mrp);

/// Reduction of (MDP, policy) to the chain over X = S x A with kernel
/// P((s,a) -> (s',a')) = p(s'|s,a) pi(a'|s').
FiniteMRP mdp_to_mrp(const FiniteMDP& mdp, const DiscretePolicy& policy);

/// Q-values of a fixed policy, computed on the reduced chain.
VectorXd exact_q(const FiniteMDP& mdp, const DiscretePolicy& policy);

/// Stationary distribution of a row-stochastic matrix. Direct null-space
/// solve with a damped power-iteration fallback. Throws NonErgodicError when
/// the chain has more than one closed communicating class.
SampleDistribution stationary_distribution(const MatrixXd& P);

/// Seeded generator of valid MDP instances for property tests. sparsity in
/// (0, 1] controls the fraction of states reachable from each (s, a).
FiniteMDP random_mdp(std::uint64_t seed, int n, int m, double sparsity, double gamma = 0.9);

DiscretePolicy uniform_policy(int n, int m);
DiscretePolicy random_policy(std::uint64_t seed, int n, int m);

struct ValueIterationResult {
    VectorXd v;              // optimal state values
    DiscretePolicy policy;   // greedy deterministic policy, ties to lowest action
    long iterations = 0;
    double residual = 0.0;
};

ValueIterationResult value_iteration(const FiniteMDP& mdp, double tol = 1e-12,
                                     long max_iter = 1000000);

// JSON serialization. Loaders validate invariants on read and throw
// ModelError on violations.
std::string to_json(const FiniteMRP& mrp);
std::string to_json(const FiniteMDP& mdp, const std::string& layout = "");
FiniteMRP mrp_from_json(const std::string& text);
FiniteMDP mdp_from_json(const std::string& text, std::string* layout = nullptr);

}  // namespace popql
