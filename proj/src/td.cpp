#include "popql/td.hpp"

#include <cmath>
#include <ostream>

#include <json.hpp>

namespace popql {

using nlohmann::json;

VectorXd lstd_fixed_point(const FiniteMRP& chain, const MatrixXd& Phi, const VectorXd& mu,
                          double cond_threshold) {
    const MatrixXd DPhi = mu.asDiagonal() * Phi;
    const MatrixXd A = Phi.transpose() * (mu.asDiagonal() * (Phi - chain.gamma * chain.P * Phi));
    const VectorXd b = DPhi.transpose() * chain.R;

    Eigen::JacobiSVD<MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const double smax = svd.singularValues()(0);
    const double smin = svd.singularValues()(svd.singularValues().size() - 1);
    const double cond = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
    if (!(cond < cond_threshold))
        throw IllConditionedError("lstd_fixed_point: condition estimate " + format_double(cond),
                                  cond);
    VectorXd w = svd.solve(b);

    // projected Bellman residual in the mu-weighted norm
    const MatrixXd C = Phi.transpose() * DPhi;
    const VectorXd proj_res = Phi * C.ldlt().solve(b - A * w);
    const double res_norm = std::sqrt(proj_res.cwiseAbs2().dot(mu));
    if (!(res_norm <= 1e-8))
        throw IllConditionedError(
            "lstd_fixed_point: projected residual " + format_double(res_norm), cond);
    return w;
}

VectorXd lstd_fixed_point(const FiniteMRP& chain, const FeatureMap& map,
                          const SampleDistribution& mu, double cond_threshold) {
    return lstd_fixed_point(chain, map.Phi, mu.weights, cond_threshold);
}

VectorXd lstd_fixed_point(const FiniteMDP& mdp, const DiscretePolicy& policy,
                          const FeatureMap& map, const SampleDistribution& mu,
                          double cond_threshold) {
    return lstd_fixed_point(mdp_to_mrp(mdp, policy), map.Phi, mu.weights, cond_threshold);
}

VectorXd td_step(const FiniteMRP& chain, const MatrixXd& Phi, const VectorXd& mu,
                 const VectorXd& u, const VectorXd& w, double lr) {
    const VectorXd v = Phi * w;
    const VectorXd td_residual = v - chain.R - chain.gamma * (chain.P * v);
    return w - lr * (Phi.transpose() * mu.cwiseProduct(u).cwiseProduct(td_residual));
}

VectorXd td_step(const FiniteMRP& chain, const FeatureMap& map, const VectorXd& mu,
                 const VectorXd& u, const VectorXd& w, double lr) {
    return td_step(chain, map.Phi, mu, u, w, lr);
}

VectorXd td_step(const MatrixXd& Phi, double gamma, std::span<const ChainTransition> batch,
                 const VectorXd& u_batch, const VectorXd& w, double lr) {
    if (batch.empty()) throw ModelError("td_step: empty minibatch");
    VectorXd grad = VectorXd::Zero(w.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& t = batch[i];
        const double delta = Phi.row(t.x).dot(w) - t.reward - gamma * Phi.row(t.x_next).dot(w);
        grad += u_batch(static_cast<int>(i)) * delta * Phi.row(t.x).transpose();
    }
    grad /= static_cast<double>(batch.size());
    return w - lr * grad;
}

namespace {

struct ErrorProbe {
    const MatrixXd* Phi;
    const VectorXd* reference;
    const VectorXd* mu;

    double operator()(const VectorXd& w) const {
        if (reference->size() == 0) return 0.0;
        return approx_error(*Phi, w, *reference, *mu);
    }
};

}  // namespace

TDTrace run_td(const FiniteMRP& chain, const FeatureMap& map, const VectorXd& mu,
               const VectorXd& u, const TDConfig& config) {
    const MatrixXd& Phi = map.Phi;
    const int k = static_cast<int>(Phi.cols());
    const VectorXd weights = mu.cwiseProduct(u);

    TDTrace trace;
    trace.lr = config.lr;
    trace.steps = config.steps;
    trace.weighting = (u.array() == 1.0).all() ? "vanilla" : "reweighted";

    VectorXd w = VectorXd::Zero(k);
    ErrorProbe error{&Phi, &config.reference, &mu};

    const double ceiling = config.divergence_ceiling;
    auto residual_of = [&](const VectorXd& wv) {
        const VectorXd v = Phi * wv;
        const VectorXd r = v - chain.R - chain.gamma * (chain.P * v);
        return std::sqrt(r.cwiseAbs2().dot(weights.cwiseMax(0.0)));
    };
    auto record = [&](long step) {
        trace.records.push_back({step, w.norm(), residual_of(w), error(w), trace.diverged});
    };

    long t = 0;
    if (config.batch_size <= 0) {
        // exact mode: the expected update is linear in w, precompute it
        const MatrixXd A = Phi.transpose() * (weights.asDiagonal() * (Phi - chain.gamma * chain.P * Phi));
        const VectorXd b = Phi.transpose() * (weights.asDiagonal() * chain.R);
        record(0);
        for (t = 1; t <= config.steps; ++t) {
            w -= config.lr * (A * w - b);
            const double norm = w.norm();
            if (!std::isfinite(norm) || norm > ceiling) {
                trace.diverged = true;
                record(t);
                break;
            }
            if (t % config.record_stride == 0) {
                const double err = error(w);
                if (err > ceiling) trace.diverged = true;
                record(t);
                if (trace.diverged) break;
            }
        }
    } else {
        Rng rng(config.seed);
        // cumulative distribution over chain states for inverse sampling
        std::vector<double> cum(mu.size());
        double acc = 0.0;
        for (int i = 0; i < mu.size(); ++i) {
            acc += mu(i);
            cum[i] = acc;
        }
        auto sample_index = [&](const double* row, int n, double unit) {
            double a = 0.0;
            for (int i = 0; i < n; ++i) {
                a += row[i];
                if (unit <= a) return i;
            }
            return n - 1;
        };
        std::vector<ChainTransition> batch(config.batch_size);
        VectorXd u_batch(config.batch_size);
        record(0);
        std::vector<double> p_row(chain.n());
        for (t = 1; t <= config.steps; ++t) {
            for (int i = 0; i < config.batch_size; ++i) {
                const double z = rng.uniform() * acc;
                int x = static_cast<int>(std::lower_bound(cum.begin(), cum.end(), z) - cum.begin());
                if (x >= mu.size()) x = static_cast<int>(mu.size()) - 1;
                for (int j = 0; j < chain.n(); ++j) p_row[j] = chain.P(x, j);
                const int x_next = sample_index(p_row.data(), chain.n(), rng.uniform());
                batch[i] = {x, chain.R(x), x_next};
                u_batch(i) = u(x);
            }
            w = td_step(Phi, chain.gamma, batch, u_batch, w, config.lr);
            const double norm = w.norm();
            if (!std::isfinite(norm) || norm > ceiling) {
                trace.diverged = true;
                record(t);
                break;
            }
            if (t % config.record_stride == 0) {
                const double err = error(w);
                if (err > ceiling) trace.diverged = true;
                record(t);
                if (trace.diverged) break;
            }
        }
    }

    trace.steps_run = std::min(t, config.steps);
    trace.final_w = w;
    trace.final_error = error(w);
    trace.final_residual = residual_of(w);
    if (trace.records.empty() || trace.records.back().step != trace.steps_run)
        record(trace.steps_run);
    return trace;
}

TDTrace run_td(const FiniteMDP& mdp, const DiscretePolicy& policy, const FeatureMap& map,
               const SampleDistribution& mu, const VectorXd& u, const TDConfig& config) {
    return run_td(mdp_to_mrp(mdp, policy), map, mu.weights, u, config);
}

double approx_error(const MatrixXd& Phi, const VectorXd& w, const VectorXd& reference,
                    const VectorXd& dist) {
    if (reference.size() != Phi.rows() || dist.size() != Phi.rows())
        throw ModelError("approx_error: shape mismatch");
    const VectorXd diff = Phi * w - reference;
    return std::sqrt(diff.cwiseAbs2().dot(dist));
}

double approx_error_uniform(const MatrixXd& Phi, const VectorXd& w, const VectorXd& reference) {
    return approx_error(Phi, w, reference,
                        VectorXd::Constant(Phi.rows(), 1.0 / static_cast<double>(Phi.rows())));
}

void TDTrace::to_csv(std::ostream& out) const {
    out << "step,error,residual,w_norm,diverged\n";
    for (const auto& r : records)
        out << r.step << ',' << format_double(r.error) << ',' << format_double(r.residual) << ','
            << format_double(r.w_norm) << ',' << (r.diverged ? 1 : 0) << '\n';
}

std::string TDTrace::summary_json() const {
    json j;
    j["diverged"] = diverged;
    j["steps_run"] = steps_run;
    j["final_error"] = final_error;
    j["final_residual"] = final_residual;
    j["final_w_norm"] = final_w.size() ? final_w.norm() : 0.0;
    j["lr"] = lr;
    j["steps"] = steps;
    j["weighting"] = weighting;
    return j.dump(2);
}

}  // namespace popql
