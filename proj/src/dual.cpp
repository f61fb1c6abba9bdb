#include "popql/dual.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "popql/certificate.hpp"

namespace popql {

using nlohmann::json;

double spectral_norm(const MatrixXd& m, double tol) {
    if (m.size() == 0 || m.isZero(0.0)) return 0.0;
    const MatrixXd gram = m.transpose() * m;  // r x r
    const int r = static_cast<int>(gram.rows());
    VectorXd v = VectorXd::Constant(r, 1.0 / std::sqrt(static_cast<double>(r)));
    // deterministic tie-breaking perturbation
    for (int i = 0; i < r; ++i) v(i) += 1e-3 * static_cast<double>(i + 1) / r;
    v.normalize();
    VectorXd next(r);
    double lambda = 0.0;
    for (int it = 0; it < 10000; ++it) {
        next.noalias() = gram * v;
        const double nn = next.norm();
        if (nn == 0.0) return 0.0;
        next /= nn;
        v.noalias() = gram * next;
        const double lambda_next = next.dot(v);
        v.swap(next);
        if (std::abs(lambda_next - lambda) <= tol * std::max(1.0, std::abs(lambda_next))) {
            lambda = lambda_next;
            break;
        }
        lambda = lambda_next;
    }
    return std::sqrt(std::max(0.0, lambda));
}

double exp_clamped(double t, double clamp, bool* saturated) {
    if (t <= clamp) return std::exp(t);
    if (saturated) *saturated = true;
    return std::exp(clamp) * (1.0 + (t - clamp));
}

double exp_clamped_derivative(double t, double clamp) {
    return t <= clamp ? std::exp(t) : std::exp(clamp);
}

DualState zero_dual(int k, int rank) {
    DualState d;
    d.A = MatrixXd::Zero(k, rank);
    d.B = MatrixXd::Zero(k, rank);
    d.rank = rank;
    return d;
}

DualState init_dual(std::uint64_t seed, int k, int rank, double scale) {
    Rng rng(seed);
    DualState d = zero_dual(k, rank);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < rank; ++j) d.A(i, j) = rng.uniform(-scale, scale);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < rank; ++j) d.B(i, j) = rng.uniform(-scale, scale);
    d.norm_a = spectral_norm(d.A);
    d.norm_b = spectral_norm(d.B);
    return d;
}

DualTerms dual_terms(const FeatureMap& map, const DualState& dual, int x, int x_next) {
    DualTerms t;
    t.y_a = dual.A.transpose() * map.row(x).transpose();
    t.y_b = dual.B.transpose() * map.row(x).transpose();
    t.y_a_next = dual.A.transpose() * map.row(x_next).transpose();
    return t;
}

DualTerms dual_terms(const FiniteMDP& mdp, const FeatureMap& map, const DualState& dual, int s,
                     int a, int s_next, int a_next) {
    return dual_terms(map, dual, mdp.flat(s, a), mdp.flat(s_next, a_next));
}

double exact_g(const FiniteMRP& chain, const FeatureMap& map, const DualState& dual, int x) {
    const VectorXd y_b = dual.B.transpose() * map.row(x).transpose();
    const Eigen::RowVectorXd phi_next = chain.P.row(x) * map.Phi;  // E[phi' | x]
    const double raw = y_b.dot(dual.A.transpose() * phi_next.transpose());
    if (!dual.spectral_normalized) return raw;
    const double na = spectral_norm(dual.A), nb = spectral_norm(dual.B);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return raw / (na * nb);
}

namespace {

// h(x) = ||y_A||^2 + ||y_B||^2 + 2 E_{x'}[<y_B, y_A'>], vectorized over the
// chain. PPhi is the precomputed P * Phi.
VectorXd dual_exponents(const MatrixXd& Phi, const MatrixXd& PPhi, const MatrixXd& A,
                        const MatrixXd& B) {
    const MatrixXd YA = Phi * A;
    const MatrixXd YB = Phi * B;
    const MatrixXd GA = PPhi * A;  // E[y_A' | x]
    return YA.rowwise().squaredNorm() + YB.rowwise().squaredNorm() +
           2.0 * (YB.cwiseProduct(GA)).rowwise().sum();
}

}  // namespace

DualValue dual_objective(const FiniteMRP& chain, const MatrixXd& Phi, const VectorXd& mu,
                         const MatrixXd& A, const MatrixXd& B, double clamp) {
    const VectorXd h = dual_exponents(Phi, chain.P * Phi, A, B);
    DualValue out;
    for (int x = 0; x < h.size(); ++x) out.value += mu(x) * exp_clamped(h(x), clamp, &out.saturated);
    return out;
}

DualValue dual_objective(const FiniteMRP& chain, const FeatureMap& map, const VectorXd& mu,
                         const DualState& dual, double clamp) {
    return dual_objective(chain, map.Phi, mu, dual.A, dual.B, clamp);
}

DualGradient dual_gradient(const FiniteMRP& chain, const MatrixXd& Phi, const VectorXd& mu,
                           const MatrixXd& A, const MatrixXd& B, double clamp) {
    const MatrixXd PPhi = chain.P * Phi;
    const MatrixXd YA = Phi * A;
    const MatrixXd YB = Phi * B;
    const MatrixXd GA = PPhi * A;
    const VectorXd h = YA.rowwise().squaredNorm() + YB.rowwise().squaredNorm() +
                       2.0 * (YB.cwiseProduct(GA)).rowwise().sum();

    DualGradient out;
    VectorXd wts(h.size());
    for (int x = 0; x < h.size(); ++x) {
        if (h(x) > clamp) out.saturated = true;
        wts(x) = mu(x) * exp_clamped_derivative(h(x), clamp);
    }
    // dJ/dA = 2 Phi^T W Phi A + 2 (P Phi)^T W Phi B
    // dJ/dB = 2 Phi^T W (Phi B + (P Phi) A)
    out.dA = 2.0 * (Phi.transpose() * (wts.asDiagonal() * YA) +
                    PPhi.transpose() * (wts.asDiagonal() * YB));
    out.dB = 2.0 * (Phi.transpose() * (wts.asDiagonal() * (YB + GA)));
    return out;
}

DualGradient dual_gradient(const FiniteMRP& chain, const FeatureMap& map, const VectorXd& mu,
                           const DualState& dual, double clamp) {
    return dual_gradient(chain, map.Phi, mu, dual.A, dual.B, clamp);
}

namespace {

ReweightingResult reweighting_from_exponents(const VectorXd& h, const VectorXd& mu, double clamp) {
    ReweightingResult out;
    // normalization cancels any common offset, so shift by the largest
    // exponent carried by the support; this keeps the mean away from
    // underflow when an unbounded dual drives all support exponents far
    // negative
    double shift = 0.0;
    bool any = false;
    for (int x = 0; x < h.size(); ++x)
        if (mu(x) > 0.0 && (!any || h(x) > shift)) {
            shift = h(x);
            any = true;
        }
    VectorXd u_raw(h.size());
    for (int x = 0; x < h.size(); ++x) u_raw(x) = exp_clamped(h(x) - shift, clamp, &out.saturated);
    const double mass = mu.sum();
    const double mean_u = mu.dot(u_raw);
    out.u = u_raw * (mass / mean_u);
    out.q.weights = mu.cwiseProduct(out.u);
    out.kl = 0.0;
    for (int x = 0; x < h.size(); ++x)
        if (out.q.weights(x) > 0.0) out.kl += out.q.weights(x) * std::log(out.u(x));
    return out;
}

}  // namespace

ReweightingResult reweighting(const FiniteMRP& chain, const FeatureMap& map,
                              const DualState& dual, const VectorXd& mu, double clamp) {
    const VectorXd h = dual_exponents(map.Phi, chain.P * map.Phi, dual.A, dual.B);
    return reweighting_from_exponents(h, mu, clamp);
}

ReweightingResult reweighting_from_table(const FeatureMap& map, const DualState& dual,
                                         const VectorXd& mu, double clamp) {
    const MatrixXd YA = map.Phi * dual.A;
    const MatrixXd YB = map.Phi * dual.B;
    const double scale = dual.spectral_normalized ? dual.norm_a * dual.norm_b : 1.0;
    const VectorXd h = YA.rowwise().squaredNorm() + YB.rowwise().squaredNorm() +
                       2.0 * scale * dual.g;
    return reweighting_from_exponents(h, mu, clamp);
}

DualSolveReport solve_dual(const FiniteMRP& chain, const FeatureMap& map, const VectorXd& mu,
                           const DualConfig& config) {
    const MatrixXd& Phi = map.Phi;
    const int k = static_cast<int>(Phi.cols());
    const MatrixXd PPhi = chain.P * Phi;

    DualSolveReport report;
    DualState dual = init_dual(config.seed, k, config.rank, config.init_scale);
    dual.lr_ab = config.lr;

    MatrixXd A = dual.A, B = dual.B;
    MatrixXd A_prev = A, B_prev = B;
    long it = 0;
    double grad_norm = std::numeric_limits<double>::infinity();
    for (; it < config.iterations; ++it) {
        const MatrixXd YA = Phi * A;
        const MatrixXd YB = Phi * B;
        const MatrixXd GA = PPhi * A;
        const VectorXd h = YA.rowwise().squaredNorm() + YB.rowwise().squaredNorm() +
                           2.0 * (YB.cwiseProduct(GA)).rowwise().sum();
        // an infeasible primal makes the dual unbounded; once the exponents
        // are this far past the clamp the tilt has saturated, so keep the
        // previous iterate and report non-convergence via the gradient norm
        if (!h.allFinite() || h.cwiseAbs().maxCoeff() > 500.0) {
            A = A_prev;
            B = B_prev;
            grad_norm = std::numeric_limits<double>::infinity();
            break;
        }
        VectorXd wts(h.size());
        double objective = 0.0;
        for (int x = 0; x < h.size(); ++x) {
            objective += mu(x) * exp_clamped(h(x), config.exp_clamp, &report.saturated);
            wts(x) = mu(x) * exp_clamped_derivative(h(x), config.exp_clamp);
        }
        MatrixXd dA = 2.0 * (Phi.transpose() * (wts.asDiagonal() * YA) +
                             PPhi.transpose() * (wts.asDiagonal() * YB));
        MatrixXd dB = 2.0 * (Phi.transpose() * (wts.asDiagonal() * (YB + GA)));
        if (config.normalize_steps && objective > 0.0) {
            dA /= objective;  // gradient of log E_mu[exp(.)]
            dB /= objective;
        }
        grad_norm = std::sqrt(dA.squaredNorm() + dB.squaredNorm());
        if (grad_norm <= config.tol) break;
        A_prev = A;
        B_prev = B;
        A -= config.lr * dA;
        B -= config.lr * dB;
    }

    {
        DualGradient final_grad = dual_gradient(chain, Phi, mu, A, B, config.exp_clamp);
        const double obj = dual_objective(chain, Phi, mu, A, B, config.exp_clamp).value;
        if (config.normalize_steps && obj > 0.0) {
            final_grad.dA /= obj;
            final_grad.dB /= obj;
        }
        grad_norm = std::sqrt(final_grad.dA.squaredNorm() + final_grad.dB.squaredNorm());
    }

    dual.A = A;
    dual.B = B;
    dual.norm_a = spectral_norm(A);
    dual.norm_b = spectral_norm(B);
    // store the normalized g-table for the sampled-mode consumers
    const MatrixXd GA = PPhi * A;
    const MatrixXd YB = Phi * B;
    const double scale = dual.norm_a * dual.norm_b;
    dual.g = (YB.cwiseProduct(GA)).rowwise().sum();
    if (scale > 0.0) dual.g /= scale;

    report.iterations_run = it;
    report.final_grad_norm = grad_norm;
    report.converged = grad_norm <= config.tol;
    report.reweighting = reweighting(chain, map, dual, mu, config.exp_clamp);
    report.saturated = report.saturated || report.reweighting.saturated;
    report.objective = dual_objective(chain, Phi, mu, A, B, config.exp_clamp).value;
    report.lambda_min_q = lambda_min_of(expected_f(chain, Phi, report.reweighting.q.weights));
    report.dual = std::move(dual);
    return report;
}

DualSolveReport solve_dual(const FiniteMDP& mdp, const DiscretePolicy& policy,
                           const FeatureMap& map, const SampleDistribution& mu,
                           const DualConfig& config) {
    return solve_dual(mdp_to_mrp(mdp, policy), map, mu.weights, config);
}

VectorXd stochastic_dual_step(DualState& dual, const FeatureMap& map,
                              std::span<const ChainTransition> batch, double lr_ab, double lr_g,
                              double clamp) {
    if (batch.empty()) throw ModelError("stochastic_dual_step: empty minibatch");
    if (dual.g.size() != map.count()) {
        VectorXd g = VectorXd::Zero(map.count());
        if (dual.g.size() != 0) throw ModelError("stochastic_dual_step: g-table size mismatch");
        dual.g = g;
    }
    dual.norm_a = spectral_norm(dual.A);
    dual.norm_b = spectral_norm(dual.B);
    const double scale = dual.spectral_normalized ? dual.norm_a * dual.norm_b : 1.0;

    const int mb = static_cast<int>(batch.size());
    VectorXd u_raw(mb);
    MatrixXd YA(mb, dual.rank), YB(mb, dual.rank), YAn(mb, dual.rank);
    bool saturated = false;
    for (int i = 0; i < mb; ++i) {
        const auto& t = batch[i];
        YA.row(i) = map.row(t.x) * dual.A;
        YB.row(i) = map.row(t.x) * dual.B;
        YAn.row(i) = map.row(t.x_next) * dual.A;
        const double h = YA.row(i).squaredNorm() + YB.row(i).squaredNorm() +
                         2.0 * scale * dual.g(t.x);
        u_raw(i) = exp_clamped(h, clamp, &saturated);
    }
    const double u_bar = u_raw.mean();
    const VectorXd u_hat = u_raw / u_bar;

    MatrixXd dA = MatrixXd::Zero(dual.A.rows(), dual.rank);
    MatrixXd dB = MatrixXd::Zero(dual.B.rows(), dual.rank);
    for (int i = 0; i < mb; ++i) {
        const auto& t = batch[i];
        const VectorXd phi = map.row(t.x).transpose();
        const VectorXd phi_next = map.row(t.x_next).transpose();
        dA += u_hat(i) * 2.0 * (phi * YA.row(i) + phi_next * YB.row(i));
        dB += u_hat(i) * 2.0 * (phi * (YB.row(i) + YAn.row(i)));
    }
    dA /= mb;
    dB /= mb;
    dual.A -= lr_ab * dA;
    dual.B -= lr_ab * dB;

    // g-table regression toward the normalized targets, after the factor step
    for (int i = 0; i < mb; ++i) {
        const auto& t = batch[i];
        const double target = scale > 0.0 ? YB.row(i).dot(YAn.row(i)) / scale : 0.0;
        dual.g(t.x) -= lr_g * 2.0 * (dual.g(t.x) - target);
    }
    dual.norm_a = spectral_norm(dual.A);
    dual.norm_b = spectral_norm(dual.B);
    return u_hat;
}

std::string DualState::to_json() const {
    json j;
    auto mat = [](const MatrixXd& m) {
        json rows = json::array();
        for (int i = 0; i < m.rows(); ++i) {
            json row = json::array();
            for (int c = 0; c < m.cols(); ++c) row.push_back(m(i, c));
            rows.push_back(std::move(row));
        }
        return rows;
    };
    j["A"] = mat(A);
    j["B"] = mat(B);
    j["rank"] = rank;
    json g_arr = json::array();
    for (int i = 0; i < g.size(); ++i) g_arr.push_back(g(i));
    j["g"] = std::move(g_arr);
    j["norm_a"] = norm_a;
    j["norm_b"] = norm_b;
    j["spectral_normalized"] = spectral_normalized;
    j["lr_ab"] = lr_ab;
    j["lr_g"] = lr_g;
    return j.dump(2);
}

std::string ReweightingResult::csv() const {
    std::ostringstream out;
    out << "index,u,q\n";
    for (int i = 0; i < u.size(); ++i)
        out << i << ',' << format_double(u(i)) << ',' << format_double(q.weights(i)) << '\n';
    return out.str();
}

}  // namespace popql
