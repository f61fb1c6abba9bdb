#include "popql/certificate.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "popql/td.hpp"

namespace popql {

using nlohmann::json;

MatrixXd f_matrix(const FiniteMRP& chain, const FeatureMap& map, int state) {
    if (state < 0 || state >= chain.n()) throw std::out_of_range("f_matrix: state out of range");
    const int k = map.k;
    const Eigen::RowVectorXd phi = map.Phi.row(state);
    const Eigen::RowVectorXd phi_next = chain.P.row(state) * map.Phi;  // E[phi']
    MatrixXd F(2 * k, 2 * k);
    F.topLeftCorner(k, k) = phi.transpose() * phi;
    F.topRightCorner(k, k) = phi.transpose() * phi_next;
    F.bottomLeftCorner(k, k) = phi_next.transpose() * phi;
    F.bottomRightCorner(k, k) = phi.transpose() * phi;
    return F;
}

MatrixXd f_matrix(const FiniteMDP& mdp, const DiscretePolicy& policy, const FeatureMap& map,
                  int s, int a) {
    if (s < 0 || s >= mdp.n || a < 0 || a >= mdp.m)
        throw std::out_of_range("f_matrix: state-action out of range");
    return f_matrix(mdp_to_mrp(mdp, policy), map, mdp.flat(s, a));
}

MatrixXd expected_f(const FiniteMRP& chain, const MatrixXd& Phi, const VectorXd& weights) {
    if (weights.size() != chain.n()) throw ModelError("expected_f: dimension mismatch");
    if (Phi.rows() != chain.n()) throw ModelError("expected_f: feature count mismatch");
    const int k = static_cast<int>(Phi.cols());
    const MatrixXd DPhi = weights.asDiagonal() * Phi;
    const MatrixXd C = Phi.transpose() * DPhi;             // E[phi phi^T]
    const MatrixXd M = DPhi.transpose() * (chain.P * Phi); // E[phi E[phi']^T]
    MatrixXd E(2 * k, 2 * k);
    E.topLeftCorner(k, k) = C;
    E.topRightCorner(k, k) = M;
    E.bottomLeftCorner(k, k) = M.transpose();
    E.bottomRightCorner(k, k) = C;
    return 0.5 * (E + E.transpose());
}

MatrixXd expected_f(const FiniteMRP& chain, const FeatureMap& map,
                    const SampleDistribution& dist) {
    return expected_f(chain, map.Phi, dist.weights);
}

MatrixXd expected_f(const FiniteMDP& mdp, const DiscretePolicy& policy, const FeatureMap& map,
                    const SampleDistribution& dist) {
    return expected_f(mdp_to_mrp(mdp, policy), map.Phi, dist.weights);
}

double lambda_min_of(const MatrixXd& symmetric) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetric, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw NumericError("lambda_min_of: eigen-solver failed");
    return es.eigenvalues().minCoeff();
}

namespace {

CertificateReport certify_chain(const FiniteMRP& chain, const FeatureMap& map,
                                const VectorXd& mu, double tol) {
    if (tol < 0.0) throw ModelError("certify: tol must be >= 0");
    CertificateReport report;
    report.expected_F = expected_f(chain, map.Phi, mu);
    report.lambda_min = lambda_min_of(report.expected_F);
    report.tol = tol;
    report.satisfied = report.lambda_min >= -tol;
    report.unit_norm_features = map.unit_norm;
    try {
        SampleDistribution nu = stationary_distribution(chain.P);
        report.delta = delta_mismatch(nu.weights, mu);
        report.bound_factor = (1.0 + chain.gamma * std::sqrt(*report.delta)) / (1.0 - chain.gamma);
    } catch (const NonErgodicError&) {
    } catch (const UnboundedDeltaError&) {
    }
    return report;
}

}  // namespace

CertificateReport certify(const FiniteMRP& chain, const FeatureMap& map,
                          const SampleDistribution& dist, double tol) {
    return certify_chain(chain, map, dist.weights, tol);
}

CertificateReport certify(const FiniteMDP& mdp, const DiscretePolicy& policy,
                          const FeatureMap& map, const SampleDistribution& dist, double tol) {
    return certify_chain(mdp_to_mrp(mdp, policy), map, dist.weights, tol);
}

double delta_mismatch(const VectorXd& nu, const VectorXd& mu) {
    if (nu.size() != mu.size()) throw ModelError("delta_mismatch: size mismatch");
    constexpr double kSupportTol = 1e-12;
    double max_nu_over_mu = 0.0, max_mu_over_nu = 0.0;
    for (int i = 0; i < nu.size(); ++i) {
        const bool in_nu = nu(i) > kSupportTol, in_mu = mu(i) > kSupportTol;
        if (in_nu != in_mu)
            throw UnboundedDeltaError("delta_mismatch: support mismatch at index " +
                                      std::to_string(i));
        if (!in_nu) continue;
        max_nu_over_mu = std::max(max_nu_over_mu, nu(i) / mu(i));
        max_mu_over_nu = std::max(max_mu_over_nu, mu(i) / nu(i));
    }
    if (max_nu_over_mu == 0.0) throw UnboundedDeltaError("delta_mismatch: empty common support");
    return max_nu_over_mu * max_mu_over_nu;
}

SchurReport schur_equivalence_check(const FiniteMRP& chain, const FeatureMap& map,
                                    const SampleDistribution& dist) {
    SchurReport report;
    const MatrixXd& Phi = map.Phi;
    const VectorXd& mu = dist.weights;
    const MatrixXd DPhi = mu.asDiagonal() * Phi;
    const MatrixXd C = Phi.transpose() * DPhi;
    const MatrixXd M = DPhi.transpose() * (chain.P * Phi);

    Eigen::SelfAdjointEigenSolver<MatrixXd> esC(0.5 * (C + C.transpose()));
    if (esC.info() != Eigen::Success) throw NumericError("schur_equivalence_check: eigen failure");
    report.weight_matrix_min_eig = esC.eigenvalues().minCoeff();
    const double scale = std::max(1.0, esC.eigenvalues().maxCoeff());
    if (report.weight_matrix_min_eig <= 1e-12 * scale) {
        report.degenerate = true;
        return report;
    }

    const MatrixXd schur_lhs = M.transpose() * C.ldlt().solve(M) - C;
    report.schur_max_eig = -lambda_min_of(-0.5 * (schur_lhs + schur_lhs.transpose()));
    report.lmi_lambda_min = lambda_min_of(expected_f(chain, Phi, mu));

    const double tol = 1e-9 * scale;
    report.schur_satisfied = report.schur_max_eig <= tol;
    report.lmi_satisfied = report.lmi_lambda_min >= -tol;
    report.agree = report.schur_satisfied == report.lmi_satisfied;
    return report;
}

Lemma1Report lemma1_bound(const FiniteMDP& mdp, const DiscretePolicy& policy,
                          const FeatureMap& map, const SampleDistribution& mu,
                          const std::optional<SampleDistribution>& nu, double tol) {
    const FiniteMRP chain = mdp_to_mrp(mdp, policy);
    const VectorXd q_exact = exact_value(chain);
    const VectorXd nu_w = nu ? nu->weights : stationary_distribution(chain.P).weights;

    Lemma1Report report;
    report.delta = delta_mismatch(nu_w, mu.weights);
    report.bound_factor = (1.0 + chain.gamma * std::sqrt(report.delta)) / (1.0 - chain.gamma);
    report.certificate_satisfied = certify(chain, map, mu, tol).satisfied;

    const VectorXd w_star = lstd_fixed_point(chain, map.Phi, mu.weights);
    const VectorXd err_star = map.Phi * w_star - q_exact;
    report.fixed_point_sq_error = err_star.cwiseAbs2().dot(mu.weights);

    // best achievable mu-weighted squared error (weighted least squares)
    const MatrixXd DPhi = mu.weights.asDiagonal() * map.Phi;
    const MatrixXd C = map.Phi.transpose() * DPhi;
    const VectorXd w_best =
        C.completeOrthogonalDecomposition().solve(DPhi.transpose() * q_exact);
    const VectorXd err_best = map.Phi * w_best - q_exact;
    report.best_sq_error = err_best.cwiseAbs2().dot(mu.weights);

    report.realized_ratio = report.best_sq_error > 0.0
                                ? report.fixed_point_sq_error / report.best_sq_error
                                : (report.fixed_point_sq_error > 0 ? std::numeric_limits<double>::infinity() : 1.0);
    report.holds = report.fixed_point_sq_error <=
                   report.bound_factor * report.best_sq_error + 1e-12 * (1.0 + report.best_sq_error);
    return report;
}

std::string CertificateReport::to_json() const {
    json j;
    j["lambda_min"] = lambda_min;
    j["tol"] = tol;
    j["satisfied"] = satisfied;
    if (delta) j["delta"] = *delta;
    if (bound_factor) j["bound_factor"] = *bound_factor;
    j["unit_norm_features"] = unit_norm_features;
    return j.dump(2);
}

std::string CertificateReport::csv_header() {
    return "lambda_min,tol,satisfied,delta,bound_factor";
}

std::string CertificateReport::csv_row() const {
    std::ostringstream out;
    out << format_double(lambda_min) << ',' << format_double(tol) << ',' << (satisfied ? 1 : 0)
        << ',' << (delta ? format_double(*delta) : "") << ','
        << (bound_factor ? format_double(*bound_factor) : "");
    return out.str();
}

}  // namespace popql
