#pragma once

#include <optional>
#include <string>

#include "popql/features.hpp"
#include "popql/markov.hpp"

namespace popql {

/// Result of checking the contraction-mapping LMI E_mu[F] >= 0 at tolerance
/// tol (satisfied iff lambda_min >= -tol). delta and bound_factor carry the
/// Lemma-1 ingredients (1 + gamma sqrt(delta)) / (1 - gamma) when a stationary
/// distribution is computable and shares support with mu; otherwise absent.
struct CertificateReport {
    MatrixXd expected_F;
    double lambda_min = 0.0;
    double tol = 0.0;
    bool satisfied = false;
    std::optional<double> delta;
    std::optional<double> bound_factor;
    bool unit_norm_features = true;

    std::string to_json() const;
    static std::string csv_header();
    std::string csv_row() const;
};

/// F(x) for one chain state: the exact successor expectation of the 2x2 block
/// matrix [[phi phi^T, phi phi'^T], [phi' phi^T, phi phi^T]]; both diagonal
/// blocks are phi(x) phi(x)^T.
MatrixXd f_matrix(const FiniteMRP& chain, const FeatureMap& map, int state);
MatrixXd f_matrix(const FiniteMDP& mdp, const DiscretePolicy& policy, const FeatureMap& map,
                  int s, int a);

MatrixXd expected_f(const FiniteMRP& chain, const MatrixXd& Phi, const VectorXd& weights);
MatrixXd expected_f(const FiniteMRP& chain, const FeatureMap& map, const SampleDistribution& dist);
MatrixXd expected_f(const FiniteMDP& mdp, const DiscretePolicy& policy, const FeatureMap& map,
                    const SampleDistribution& dist);

double lambda_min_of(const MatrixXd& symmetric);

CertificateReport certify(const FiniteMRP& chain, const FeatureMap& map,
                          const SampleDistribution& dist, double tol = 0.005);
CertificateReport certify(const FiniteMDP& mdp, const DiscretePolicy& policy,
                          const FeatureMap& map, const SampleDistribution& dist,
                          double tol = 0.005);

/// Worst-case bidirectional density-ratio product
/// max_x nu(x)/mu(x) * max_x mu(x)/nu(x), restricted to entries above 1e-12.
/// Throws UnboundedDeltaError on support mismatch.
double delta_mismatch(const VectorXd& nu, const VectorXd& mu);

/// Agreement check between the 2k x 2k LMI form and the Schur-complement form
/// M^T C^{-1} M - C <= 0 with C = Phi^T D Phi, M = Phi^T D P Phi. degenerate
/// is set (and the verdicts left unset) when C is singular at tolerance.
struct SchurReport {
    bool degenerate = false;
    bool agree = false;
    bool lmi_satisfied = false;
    bool schur_satisfied = false;
    double lmi_lambda_min = 0.0;
    double schur_max_eig = 0.0;
    double weight_matrix_min_eig = 0.0;
};

SchurReport schur_equivalence_check(const FiniteMRP& chain, const FeatureMap& map,
                                    const SampleDistribution& dist);

/// Empirical check of the fixed-point error bound: with w* the projected
/// fixed point under mu and Q the exact action values,
///   E_mu[(phi^T w* - Q)^2] <= (1 + gamma sqrt(delta)) / (1 - gamma)
///                             * min_w E_mu[(phi^T w - Q)^2].
struct Lemma1Report {
    double delta = 0.0;
    double bound_factor = 0.0;
    double fixed_point_sq_error = 0.0;
    double best_sq_error = 0.0;
    double realized_ratio = 0.0;
    bool certificate_satisfied = false;
    bool holds = false;
};

Lemma1Report lemma1_bound(const FiniteMDP& mdp, const DiscretePolicy& policy,
                          const FeatureMap& map, const SampleDistribution& mu,
                          const std::optional<SampleDistribution>& nu = std::nullopt,
                          double tol = 0.005);

}  // namespace popql
