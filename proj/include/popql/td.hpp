#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "popql/features.hpp"
#include "popql/markov.hpp"

namespace popql {

struct LinearValue {
    VectorXd w;
};

/// One sampled chain transition (flat indices); for MDPs the next index
/// already encodes the policy-drawn next action.
struct ChainTransition {
    int x = 0;
    double reward = 0.0;
    int x_next = 0;
};

struct TDConfig {
    long steps = 100000;
    double lr = 1e-3;
    double divergence_ceiling = 1e6;  // on ||w||_2 and on the recorded error
    long record_stride = 1000;
    int batch_size = 0;  // 0 = exact expectation mode
    std::uint64_t seed = 0;
    VectorXd reference;  // exact value/Q vector used for the error column
};

struct TDRecord {
    long step = 0;
    double w_norm = 0.0;
    double residual = 0.0;  // weighted Bellman residual under mu.u
    double error = 0.0;     // mu-weighted RMSE against the reference
    bool diverged = false;
};

struct TDTrace {
    std::vector<TDRecord> records;
    VectorXd final_w;
    bool diverged = false;
    long steps_run = 0;
    double final_error = 0.0;
    double final_residual = 0.0;
    // config echo
    double lr = 0.0;
    long steps = 0;
    std::string weighting;  // "vanilla" or "reweighted"

    void to_csv(std::ostream& out) const;
    std::string summary_json() const;
};

/// Solution of Phi^T D_mu (Phi - gamma P Phi) w = Phi^T D_mu R. Throws
/// IllConditionedError when the system's condition estimate exceeds the
/// threshold.
VectorXd lstd_fixed_point(const FiniteMRP& chain, const MatrixXd& Phi, const VectorXd& mu,
                          double cond_threshold = 1e12);
VectorXd lstd_fixed_point(const FiniteMRP& chain, const FeatureMap& map,
                          const SampleDistribution& mu, double cond_threshold = 1e12);
VectorXd lstd_fixed_point(const FiniteMDP& mdp, const DiscretePolicy& policy,
                          const FeatureMap& map, const SampleDistribution& mu,
                          double cond_threshold = 1e12);

/// One exact-expectation TD step:
///   w' = w - lr E_mu[u(x) (phi(x)^T w - r(x) - gamma E[phi(x')^T] w) phi(x)].
VectorXd td_step(const FiniteMRP& chain, const MatrixXd& Phi, const VectorXd& mu,
                 const VectorXd& u, const VectorXd& w, double lr);
VectorXd td_step(const FiniteMRP& chain, const FeatureMap& map, const VectorXd& mu,
                 const VectorXd& u, const VectorXd& w, double lr);

/// Minibatch TD step over sampled transitions with per-sample weights.
VectorXd td_step(const MatrixXd& Phi, double gamma, std::span<const ChainTransition> batch,
                 const VectorXd& u_batch, const VectorXd& w, double lr);

TDTrace run_td(const FiniteMRP& chain, const FeatureMap& map, const VectorXd& mu,
               const VectorXd& u, const TDConfig& config);
TDTrace run_td(const FiniteMDP& mdp, const DiscretePolicy& policy, const FeatureMap& map,
               const SampleDistribution& mu, const VectorXd& u, const TDConfig& config);

/// dist-weighted root-mean-squared error between Phi w and the reference.
double approx_error(const MatrixXd& Phi, const VectorXd& w, const VectorXd& reference,
                    const VectorXd& dist);
double approx_error_uniform(const MatrixXd& Phi, const VectorXd& w, const VectorXd& reference);

}  // namespace popql
