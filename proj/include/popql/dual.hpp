#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "popql/features.hpp"
#include "popql/markov.hpp"
#include "popql/td.hpp"

namespace popql {

/// Low-rank Lagrange factors of the I-projection dual. The dual matrix is
/// Z = [A; B][A; B]^T, positive semidefinite by construction for any A, B.
/// g stores the spectrally normalized successor inner products
/// E[<B^T phi, A^T phi'>] / (||A||_2 ||B||_2), one entry per chain state.
struct DualState {
    MatrixXd A;  // k x r
    MatrixXd B;  // k x r
    int rank = 4;
    VectorXd g;
    double norm_a = 0.0;
    double norm_b = 0.0;
    bool spectral_normalized = true;
    double lr_ab = 1e-3;
    double lr_g = 1e-2;

    bool is_zero() const { return A.isZero(0.0) && B.isZero(0.0); }
    std::string to_json() const;
};

DualState zero_dual(int k, int rank);
DualState init_dual(std::uint64_t seed, int k, int rank, double scale = 1e-3);

/// Exponential-tilt reweighting of mu: u >= 0 with E_mu[u] = 1, q = u . mu,
/// kl = KL(q || mu).
struct ReweightingResult {
    VectorXd u;
    SampleDistribution q;
    double kl = 0.0;
    bool saturated = false;

    std::string csv() const;  // flat index, u, q
};

struct DualConfig {
    int rank = 4;
    double lr = 0.05;
    long iterations = 200000;
    double tol = 1e-10;          // on the normalized gradient norm
    std::uint64_t seed = 1;
    double init_scale = 1e-3;
    bool normalize_steps = true;  // divide the gradient by E_mu[u] each step
    double exp_clamp = 50.0;
};

struct DualSolveReport {
    DualState dual;
    ReweightingResult reweighting;
    double final_grad_norm = 0.0;
    bool converged = false;
    long iterations_run = 0;
    double objective = 0.0;     // E_mu[exp(tr Z^T F)]
    double lambda_min_q = 0.0;  // certificate margin of the reweighted distribution
    bool saturated = false;
};

/// Spectral norm via power iteration on M^T M, tolerance 1e-10.
double spectral_norm(const MatrixXd& m, double tol = 1e-10);

/// Exponent guard: exp(t) for t <= clamp, continued linearly (C^1) above so
/// early optimization steps cannot overflow; callers receive a saturation
/// flag whenever the linear branch is hit.
double exp_clamped(double t, double clamp, bool* saturated);
double exp_clamped_derivative(double t, double clamp);

struct DualTerms {
    VectorXd y_a;       // A^T phi(x)
    VectorXd y_b;       // B^T phi(x)
    VectorXd y_a_next;  // A^T phi(x')
};

DualTerms dual_terms(const FeatureMap& map, const DualState& dual, int x, int x_next);
DualTerms dual_terms(const FiniteMDP& mdp, const FeatureMap& map, const DualState& dual, int s,
                     int a, int s_next, int a_next);

/// Exact successor expectation E_{x'}[<y_B, y_A'>] for one chain state;
/// divided by ||A||_2 ||B||_2 when the dual uses spectral normalization
/// (returns 0 by convention if either norm vanishes).
double exact_g(const FiniteMRP& chain, const FeatureMap& map, const DualState& dual, int x);

struct DualValue {
    double value = 0.0;
    bool saturated = false;
};

/// E_mu[exp(||y_A||^2 + ||y_B||^2 + 2 E_{x'}[<y_B, y_A'>])], the dual
/// objective in the factor parametrization.
DualValue dual_objective(const FiniteMRP& chain, const MatrixXd& Phi, const VectorXd& mu,
                         const MatrixXd& A, const MatrixXd& B, double clamp = 50.0);
DualValue dual_objective(const FiniteMRP& chain, const FeatureMap& map, const VectorXd& mu,
                         const DualState& dual, double clamp = 50.0);

struct DualGradient {
    MatrixXd dA;
    MatrixXd dB;
    bool saturated = false;
};

DualGradient dual_gradient(const FiniteMRP& chain, const MatrixXd& Phi, const VectorXd& mu,
                           const MatrixXd& A, const MatrixXd& B, double clamp = 50.0);
DualGradient dual_gradient(const FiniteMRP& chain, const FeatureMap& map, const VectorXd& mu,
                           const DualState& dual, double clamp = 50.0);

/// Gradient descent on the dual objective from a small seeded initialization.
/// Non-convergence is reported through the final gradient norm, not thrown.
DualSolveReport solve_dual(const FiniteMRP& chain, const FeatureMap& map, const VectorXd& mu,
                           const DualConfig& config = {});
DualSolveReport solve_dual(const FiniteMDP& mdp, const DiscretePolicy& policy,
                           const FeatureMap& map, const SampleDistribution& mu,
                           const DualConfig& config = {});

/// Reweighting induced by the current factors, with the exact g.
ReweightingResult reweighting(const FiniteMRP& chain, const FeatureMap& map,
                              const DualState& dual, const VectorXd& mu, double clamp = 50.0);
/// Reweighting using the stored g-table (sampled-mode path).
ReweightingResult reweighting_from_table(const FeatureMap& map, const DualState& dual,
                                         const VectorXd& mu, double clamp = 50.0);

/// One two-time-scale minibatch step: compute batch-normalized weights u from
/// the g-table, update A and B with the u-weighted factor gradients, then
/// regress the g-table toward the spectrally normalized targets. Refreshes
/// the cached spectral norms and returns the batch-normalized weights used.
VectorXd stochastic_dual_step(DualState& dual, const FeatureMap& map,
                              std::span<const ChainTransition> batch, double lr_ab, double lr_g,
                              double clamp = 50.0);

}  // namespace popql
