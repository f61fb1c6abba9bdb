#include "popql/policy_opt.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <json.hpp>

#include "popql/certificate.hpp"
#include "popql/td.hpp"

namespace popql {

using nlohmann::json;

namespace {

MatrixXd softmax_rows(const MatrixXd& logits) {
    MatrixXd pi(logits.rows(), logits.cols());
    for (int s = 0; s < logits.rows(); ++s) {
        const double mx = logits.row(s).maxCoeff();
        pi.row(s) = (logits.row(s).array() - mx).exp();
        pi.row(s) /= pi.row(s).sum();
    }
    return pi;
}

VectorXd row_entropies(const MatrixXd& pi) {
    VectorXd h(pi.rows());
    for (int s = 0; s < pi.rows(); ++s) {
        double e = 0.0;
        for (int a = 0; a < pi.cols(); ++a)
            if (pi(s, a) > 0.0) e -= pi(s, a) * std::log(pi(s, a));
        h(s) = e;
    }
    return h;
}

VectorXd state_marginal(const VectorXd& mu, int n, int m) {
    VectorXd muS = VectorXd::Zero(n);
    for (int s = 0; s < n; ++s)
        for (int a = 0; a < m; ++a) muS(s) += mu(s * m + a);
    return muS;
}

// Everything the actor objective and its gradient share for a fixed policy.
struct ActorQuantities {
    MatrixXd pi;      // n x m
    VectorXd muS;     // n
    VectorXd entropy; // n
    VectorXd q_hat;   // N = n*m
    MatrixXd YA, YB;  // N x r
    MatrixXd GA;      // N x r, E[y_A' | x] under pi
    VectorXd h;       // N
    double tilt_mass = 0.0;  // sum_x mu(x) exp(h(x)), clamped
    bool saturated = false;
};

ActorQuantities actor_quantities(const FiniteMDP& mdp, const MatrixXd& Phi,
                                 const MatrixXd& logits, const MatrixXd& A, const MatrixXd& B,
                                 const VectorXd& mu, const VectorXd& w, double clamp) {
    ActorQuantities aq;
    const int n = mdp.n, m = mdp.m;
    aq.pi = softmax_rows(logits);
    aq.muS = state_marginal(mu, n, m);
    aq.entropy = row_entropies(aq.pi);
    aq.q_hat = Phi * w;
    aq.YA = Phi * A;
    aq.YB = Phi * B;
    // policy-averaged next features: YAbar(s') = sum_a' pi(a'|s') YA(s'm+a')
    MatrixXd YAbar = MatrixXd::Zero(n, A.cols());
    for (int s = 0; s < n; ++s)
        for (int a = 0; a < m; ++a) YAbar.row(s) += aq.pi(s, a) * aq.YA.row(s * m + a);
    aq.GA = mdp.P * YAbar;
    aq.h = aq.YA.rowwise().squaredNorm() + aq.YB.rowwise().squaredNorm() +
           2.0 * (aq.YB.cwiseProduct(aq.GA)).rowwise().sum();
    aq.tilt_mass = 0.0;
    for (int x = 0; x < aq.h.size(); ++x)
        aq.tilt_mass += mu(x) * exp_clamped(aq.h(x), clamp, &aq.saturated);
    return aq;
}

}  // namespace

DiscretePolicy SoftmaxPolicy::policy() const {
    DiscretePolicy p;
    p.pi = softmax_rows(logits);
    return p;
}

DiscretePolicy greedy_from_logits(const MatrixXd& logits) {
    DiscretePolicy p;
    p.pi = MatrixXd::Zero(logits.rows(), logits.cols());
    for (int s = 0; s < logits.rows(); ++s) {
        int best = 0;
        for (int a = 1; a < logits.cols(); ++a)
            if (logits(s, a) > logits(s, best)) best = a;
        p.pi(s, best) = 1.0;
    }
    return p;
}

void TrainConfig::validate() const {
    if (beta < 0.0) throw ModelError("TrainConfig: beta must be >= 0");
    if (lr_q <= 0.0 || lr_pi < 0.0 || lr_ab <= 0.0)
        throw ModelError("TrainConfig: learning rates must be positive");
    if (steps < 1) throw ModelError("TrainConfig: steps must be >= 1");
    if (rank < 1) throw ModelError("TrainConfig: rank must be >= 1");
}

double policy_objective(const FiniteMDP& mdp, const FeatureMap& map, const SoftmaxPolicy& actor,
                        const DualState& dual, const SampleDistribution& mu, const VectorXd& w,
                        double beta, double clamp) {
    const ActorQuantities aq =
        actor_quantities(mdp, map.Phi, actor.logits, dual.A, dual.B, mu.weights, w, clamp);
    const int n = mdp.n, m = mdp.m;
    double value = 0.0;
    for (int s = 0; s < n; ++s) {
        double q_mean = 0.0;
        for (int a = 0; a < m; ++a) q_mean += aq.pi(s, a) * aq.q_hat(s * m + a);
        value += aq.muS(s) * (q_mean + actor.alpha * aq.entropy(s));
    }
    value += beta * std::log(aq.tilt_mass);
    return value;
}

MatrixXd policy_gradient(const FiniteMDP& mdp, const FeatureMap& map, const SoftmaxPolicy& actor,
                         const DualState& dual, const SampleDistribution& mu, const VectorXd& w,
                         double beta, double clamp) {
    const int n = mdp.n, m = mdp.m;
    const ActorQuantities aq =
        actor_quantities(mdp, map.Phi, actor.logits, dual.A, dual.B, mu.weights, w, clamp);

    MatrixXd grad = MatrixXd::Zero(n, m);
    // value-improvement and entropy terms, covariance form per state
    for (int s = 0; s < n; ++s) {
        double q_mean = 0.0;
        for (int a = 0; a < m; ++a) q_mean += aq.pi(s, a) * aq.q_hat(s * m + a);
        for (int a = 0; a < m; ++a) {
            const double f = aq.q_hat(s * m + a) +
                             actor.alpha * (aq.pi(s, a) > 0.0 ? -std::log(aq.pi(s, a)) : 0.0);
            const double f_mean = q_mean + actor.alpha * aq.entropy(s);
            grad(s, a) += aq.muS(s) * aq.pi(s, a) * (f - f_mean);
        }
    }

    if (beta != 0.0 && aq.tilt_mass > 0.0) {
        // d/d logits of beta log E_mu[exp(h)] = 2 beta E_q[grad E_pi <y_B, y_A'>]
        VectorXd qx(aq.h.size());
        for (int x = 0; x < aq.h.size(); ++x)
            qx(x) = mu.weights(x) * exp_clamped_derivative(aq.h(x), clamp) / aq.tilt_mass;
        const MatrixXd b_sum = mdp.P.transpose() * (qx.asDiagonal() * aq.YB);  // n x r
        for (int s = 0; s < n; ++s) {
            VectorXd c(m);
            double c_mean = 0.0;
            for (int a = 0; a < m; ++a) {
                c(a) = 2.0 * b_sum.row(s).dot(aq.YA.row(s * m + a));
                c_mean += aq.pi(s, a) * c(a);
            }
            for (int a = 0; a < m; ++a)
                grad(s, a) += beta * aq.pi(s, a) * (c(a) - c_mean);
        }
    }
    return grad;
}

TrainResult train_popql(const FiniteMDP& mdp, const FeatureMap& map, const SampleDistribution& mu,
                        const TrainConfig& config) {
    config.validate();
    const int n = mdp.n, m = mdp.m, N = n * m;
    const int k = map.k;
    if (map.count() != N) throw ModelError("train_popql: feature map does not cover S x A");
    const double lr_g = config.lr_g < 0.0 ? 10.0 * config.lr_ab : config.lr_g;

    TrainResult result;
    result.actor.logits = MatrixXd::Zero(n, m);
    result.actor.alpha = config.alpha0;
    result.actor.target_entropy = config.target_entropy;
    result.actor.autotune = config.autotune_alpha;
    result.value.w = VectorXd::Zero(k);
    result.dual = config.freeze_dual ? zero_dual(k, config.rank)
                                     : init_dual(derive_seed(config.seed, 0xd0a1), k, config.rank,
                                                 config.dual_init_scale);
    result.dual.lr_ab = config.lr_ab;
    result.dual.lr_g = lr_g;
    result.dual.g = VectorXd::Zero(N);

    const EvalAnchors anchors = eval_anchors(mdp);
    const double mass = mu.weights.sum();
    const VectorXd muS = state_marginal(mu.weights, n, m);

    // chain over X = S x A under the current actor, refilled in place
    FiniteMRP chain;
    chain.gamma = mdp.gamma;
    chain.R = mdp.R;
    chain.P = MatrixXd::Zero(N, N);
    auto refill_chain = [&](const DiscretePolicy& pi) {
        chain.P.setZero();
        for (int x = 0; x < N; ++x)
            for (int s2 = 0; s2 < n; ++s2) {
                const double p = mdp.P(x, s2);
                if (p == 0.0) continue;
                for (int a2 = 0; a2 < m; ++a2) chain.P(x, s2 * m + a2) = p * pi.pi(s2, a2);
            }
    };

    Rng rng(derive_seed(config.seed, 0x5afe));
    std::vector<double> cum(N);
    if (config.batch_size > 0) {
        double acc = 0.0;
        for (int i = 0; i < N; ++i) {
            acc += mu.weights(i);
            cum[i] = acc;
        }
    }

    auto log_row = [&](long step, double q_loss, double dual_obj, const VectorXd& u_hat,
                       const VectorXd& q_weights, double kl, double entropy_mean) {
        TrainLogRow row;
        row.step = step;
        row.dual_objective = dual_obj;
        row.kl = kl;
        row.entropy = entropy_mean;
        row.alpha = result.actor.alpha;
        const FiniteMRP log_chain = mdp_to_mrp(mdp, result.actor.policy());
        if (std::isfinite(q_loss)) {
            row.q_loss = q_loss;
        } else {  // recompute the weighted Bellman loss at logging time
            const VectorXd v = map.Phi * result.value.w;
            const VectorXd td_res = v - log_chain.R - log_chain.gamma * (log_chain.P * v);
            row.q_loss = td_res.cwiseAbs2().dot(q_weights);
        }
        row.lambda_min = lambda_min_of(expected_f(log_chain, map.Phi, q_weights));
        row.return_normalized = evaluate_policy(mdp, result.actor.policy(), anchors);
        row.max_u_invariant_gap = std::abs(mu.weights.dot(u_hat) - 1.0);
        row.q_sum_gap = std::abs(q_weights.sum() - 1.0);
        row.u_is_one_when_zero_dual =
            !result.dual.is_zero() || (u_hat.array() == 1.0).all();
        result.log.push_back(row);
    };

    // hot-loop workspaces
    const int r = config.rank;
    MatrixXd YA(N, r), YB(N, r), YAbar(n, r), GA(N, r), lifted(N, r), tmpA(N, r), tmpB(N, r);
    MatrixXd dA(k, r), dB(k, r), back(n, r), pgrad(n, m);
    VectorXd h(N), u_raw(N), wts(N), u_hat(N), q_weights(N), q_hat(N);

    const bool frozen_zero = config.freeze_dual && result.dual.is_zero();

    long t = 0;
    for (t = 1; t <= config.steps; ++t) {
        const DiscretePolicy pi = result.actor.policy();
        refill_chain(pi);

        double q_loss = std::numeric_limits<double>::quiet_NaN();
        double dual_obj = 0.0, kl = 0.0;

        if (config.batch_size <= 0 && frozen_zero) {
            // frozen zero dual: u is identically one, q equals mu
            u_hat.setOnes();
            q_weights = mu.weights;
            dual_obj = mass;
            if (config.lr_pi > 0.0) {
                pgrad.setZero();
                q_hat.noalias() = map.Phi * result.value.w;
                for (int s = 0; s < n; ++s) {
                    double f_mean = 0.0;
                    for (int a = 0; a < m; ++a) {
                        const double p = pi.pi(s, a);
                        f_mean += p * (q_hat(s * m + a) +
                                       result.actor.alpha * (p > 0.0 ? -std::log(p) : 0.0));
                    }
                    for (int a = 0; a < m; ++a) {
                        const double p = pi.pi(s, a);
                        const double f = q_hat(s * m + a) +
                                         result.actor.alpha * (p > 0.0 ? -std::log(p) : 0.0);
                        pgrad(s, a) = muS(s) * p * (f - f_mean);
                    }
                }
            }
            result.value.w = td_step(chain, map, mu.weights, u_hat, result.value.w, config.lr_q);
            if (config.lr_pi > 0.0) result.actor.logits += config.lr_pi * pgrad;
        } else if (config.batch_size <= 0) {
            // ---- exact expectation mode ----
            // All successor expectations route through the (n*m) x n kernel:
            // E[f(s',a') | x] = sum_{s'} P(x,s') sum_{a'} pi(a'|s') f(s',a').
            YA.noalias() = map.Phi * result.dual.A;
            YB.noalias() = map.Phi * result.dual.B;
            YAbar.setZero();
            for (int s = 0; s < n; ++s)
                for (int a = 0; a < m; ++a) YAbar.row(s) += pi.pi(s, a) * YA.row(s * m + a);
            GA.noalias() = mdp.P * YAbar;  // E[y_A' | x]
            h = YA.rowwise().squaredNorm() + YB.rowwise().squaredNorm() +
                2.0 * (YB.cwiseProduct(GA)).rowwise().sum();
            bool saturated = false;
            for (int x = 0; x < N; ++x) u_raw(x) = exp_clamped(h(x), config.exp_clamp, &saturated);
            const double mean_u = mu.weights.dot(u_raw);
            dual_obj = mean_u;
            u_hat = u_raw * (mass / mean_u);
            q_weights = mu.weights.cwiseProduct(u_hat);
            for (int x = 0; x < N; ++x)
                if (q_weights(x) > 0.0) kl += q_weights(x) * std::log(u_hat(x));

            // policy gradient with the pre-update factors, matching the
            // minibatch update order; same math as policy_gradient() but reusing the dual
            // quantities already computed this step
            if (config.lr_pi > 0.0) {
                pgrad.setZero();
                q_hat.noalias() = map.Phi * result.value.w;
                for (int s = 0; s < n; ++s) {
                    double f_mean = 0.0;
                    for (int a = 0; a < m; ++a) {
                        const double p = pi.pi(s, a);
                        f_mean += p * (q_hat(s * m + a) +
                                       result.actor.alpha * (p > 0.0 ? -std::log(p) : 0.0));
                    }
                    for (int a = 0; a < m; ++a) {
                        const double p = pi.pi(s, a);
                        const double f = q_hat(s * m + a) +
                                         result.actor.alpha * (p > 0.0 ? -std::log(p) : 0.0);
                        pgrad(s, a) = muS(s) * p * (f - f_mean);
                    }
                }
                if (config.beta != 0.0 && mean_u > 0.0) {
                    for (int x = 0; x < N; ++x)
                        wts(x) = mu.weights(x) *
                                 exp_clamped_derivative(h(x), config.exp_clamp) / mean_u;
                    tmpB.noalias() = wts.asDiagonal() * YB;
                    back.noalias() = mdp.P.transpose() * tmpB;
                    for (int s = 0; s < n; ++s) {
                        double c_mean = 0.0;
                        double c[16];
                        for (int a = 0; a < m; ++a) {
                            c[a] = 2.0 * back.row(s).dot(YA.row(s * m + a));
                            c_mean += pi.pi(s, a) * c[a];
                        }
                        for (int a = 0; a < m; ++a)
                            pgrad(s, a) += config.beta * pi.pi(s, a) * (c[a] - c_mean);
                    }
                }
            }

            // dual factor step (normalized exact gradient)
            if (!config.freeze_dual) {
                for (int x = 0; x < N; ++x)
                    wts(x) = mu.weights(x) * exp_clamped_derivative(h(x), config.exp_clamp);
                // (P_pi Phi)^T z = Phi^T P_pi^T z, expanded through the kernel
                tmpB.noalias() = wts.asDiagonal() * YB;  // N x r
                back.noalias() = mdp.P.transpose() * tmpB;
                for (int s = 0; s < n; ++s)
                    for (int a = 0; a < m; ++a) lifted.row(s * m + a) = pi.pi(s, a) * back.row(s);
                tmpA.noalias() = wts.asDiagonal() * YA;
                tmpA += lifted;
                dA.noalias() = 2.0 * (map.Phi.transpose() * tmpA);
                tmpB.noalias() = wts.asDiagonal() * (YB + GA);
                dB.noalias() = 2.0 * (map.Phi.transpose() * tmpB);
                // g regression target from the pre-update factors, as in the
                // per-sample update order
                result.dual.g = (YB.cwiseProduct(GA)).rowwise().sum();
                const double scale = result.dual.norm_a * result.dual.norm_b;
                if (scale > 0.0) result.dual.g /= scale;

                result.dual.A -= (config.lr_ab / mean_u) * dA;
                result.dual.B -= (config.lr_ab / mean_u) * dB;
                result.dual.norm_a = spectral_norm(result.dual.A);
                result.dual.norm_b = spectral_norm(result.dual.B);
            }

            // u-weighted Q regression (one exact TD step with weights u)
            result.value.w = td_step(chain, map, mu.weights, u_hat, result.value.w, config.lr_q);

            if (config.lr_pi > 0.0) result.actor.logits += config.lr_pi * pgrad;
        } else {
            // ---- sampled (minibatch) mode ----
            std::vector<ChainTransition> batch(config.batch_size);
            for (int i = 0; i < config.batch_size; ++i) {
                const double z = rng.uniform() * mass;
                int x = static_cast<int>(std::lower_bound(cum.begin(), cum.end(), z) - cum.begin());
                if (x >= N) x = N - 1;
                const int s = x / m;
                const int a = x % m;
                // next state from the model, next action resampled from pi
                double zz = rng.uniform();
                int s2 = mdp.n - 1;
                double accp = 0.0;
                for (int j = 0; j < mdp.n; ++j) {
                    accp += mdp.P(mdp.flat(s, a), j);
                    if (zz <= accp) {
                        s2 = j;
                        break;
                    }
                }
                double za = rng.uniform();
                int a2 = m - 1;
                double acca = 0.0;
                for (int j = 0; j < m; ++j) {
                    acca += pi.pi(s2, j);
                    if (za <= acca) {
                        a2 = j;
                        break;
                    }
                }
                batch[i] = {x, mdp.R(x), s2 * m + a2};
            }
            VectorXd u_batch;
            if (!config.freeze_dual) {
                u_batch = stochastic_dual_step(result.dual, map, batch, config.lr_ab, lr_g,
                                               config.exp_clamp);
            } else {
                u_batch = VectorXd::Ones(config.batch_size);
            }
            dual_obj = u_batch.mean();  // == 1 by construction; kept for the log
            q_loss = 0.0;
            for (int i = 0; i < config.batch_size; ++i) {
                const auto& tr = batch[i];
                const double delta = map.Phi.row(tr.x).dot(result.value.w) - tr.reward -
                                     chain.gamma * map.Phi.row(tr.x_next).dot(result.value.w);
                q_loss += u_batch(i) * delta * delta;
            }
            q_loss /= config.batch_size;
            result.value.w =
                td_step(map.Phi, chain.gamma, batch, u_batch, result.value.w, config.lr_q);

            if (config.lr_pi > 0.0) {
                // batch empirical distribution drives the actor update
                SampleDistribution mu_batch;
                mu_batch.weights = VectorXd::Zero(N);
                for (const auto& tr : batch) mu_batch.weights(tr.x) += 1.0 / config.batch_size;
                const MatrixXd pgrad =
                    policy_gradient(mdp, map, result.actor, result.dual, mu_batch, result.value.w,
                                    config.beta, config.exp_clamp);
                result.actor.logits += config.lr_pi * pgrad;
            }
            const ReweightingResult rw =
                reweighting_from_table(map, result.dual, mu.weights, config.exp_clamp);
            u_hat = rw.u;
            q_weights = rw.q.weights;
            kl = rw.kl;
        }

        // alpha dual ascent toward the target entropy
        const MatrixXd pi_now = softmax_rows(result.actor.logits);
        const double entropy_mean = row_entropies(pi_now).dot(muS) / mass;
        if (config.autotune_alpha) {
            // dual ascent on (target - H); alpha may go negative, which
            // penalizes entropy until the policy reaches the target from above.
            // Saturation at the band edges prevents windup against the slow actor.
            result.actor.alpha += config.alpha_lr * (config.target_entropy - entropy_mean);
            result.actor.alpha =
                std::clamp(result.actor.alpha, config.alpha_min, config.alpha_max);
        }

        const bool finite = result.value.w.allFinite() && result.actor.logits.allFinite() &&
                            result.dual.A.allFinite() && result.dual.B.allFinite();
        if (!finite || result.value.w.norm() > config.divergence_ceiling) {
            result.diverged = true;
            log_row(t, q_loss, dual_obj, u_hat, q_weights, kl, entropy_mean);
            break;
        }
        if (t % config.log_stride == 0 || t == config.steps)
            log_row(t, q_loss, dual_obj, u_hat, q_weights, kl, entropy_mean);
    }

    result.steps_run = std::min(t, config.steps);
    result.greedy = greedy_from_logits(result.actor.logits);
    result.final_return_normalized = evaluate_policy(mdp, result.actor.policy(), anchors);
    return result;
}

DiscretePolicy behavior_cloning(int n, int m, const SampleDistribution& data) {
    DiscretePolicy policy;
    policy.pi = MatrixXd::Zero(n, m);
    VectorXd counts = VectorXd::Zero(n);
    MatrixXd freq = MatrixXd::Zero(n, m);
    if (data.has_dataset()) {
        for (const auto& rec : data.dataset) {
            freq(rec.state, rec.action) += rec.count;
            counts(rec.state) += rec.count;
        }
    } else {
        for (int s = 0; s < n; ++s)
            for (int a = 0; a < m; ++a) {
                freq(s, a) = data.weights(s * m + a);
                counts(s) += data.weights(s * m + a);
            }
    }
    for (int s = 0; s < n; ++s) {
        if (counts(s) > 0.0)
            policy.pi.row(s) = freq.row(s) / counts(s);
        else
            policy.pi.row(s).setConstant(1.0 / m);
    }
    return policy;
}

EvalAnchors eval_anchors(const FiniteMDP& mdp) {
    EvalAnchors anchors;
    anchors.j_opt = mdp.start.dot(value_iteration(mdp).v);
    anchors.j_uniform = policy_return(mdp, uniform_policy(mdp.n, mdp.m));
    return anchors;
}

double policy_return(const FiniteMDP& mdp, const DiscretePolicy& policy) {
    const VectorXd q = exact_q(mdp, policy);
    double ret = 0.0;
    for (int s = 0; s < mdp.n; ++s) {
        double v = 0.0;
        for (int a = 0; a < mdp.m; ++a) v += policy.pi(s, a) * q(mdp.flat(s, a));
        ret += mdp.start(s) * v;
    }
    return ret;
}

double evaluate_policy(const FiniteMDP& mdp, const DiscretePolicy& policy,
                       const EvalAnchors& anchors) {
    const double denom = anchors.j_opt - anchors.j_uniform;
    if (std::abs(denom) < 1e-12)
        throw NumericError("evaluate_policy: degenerate normalization anchors");
    return (policy_return(mdp, policy) - anchors.j_uniform) / denom;
}

double evaluate_policy(const FiniteMDP& mdp, const DiscretePolicy& policy) {
    return evaluate_policy(mdp, policy, eval_anchors(mdp));
}

void TrainResult::log_to_csv(std::ostream& out) const {
    out << "step,q_loss,dual_objective,lambda_min,kl,entropy,alpha,return_normalized\n";
    for (const auto& r : log)
        out << r.step << ',' << format_double(r.q_loss) << ',' << format_double(r.dual_objective)
            << ',' << format_double(r.lambda_min) << ',' << format_double(r.kl) << ','
            << format_double(r.entropy) << ',' << format_double(r.alpha) << ','
            << format_double(r.return_normalized) << '\n';
}

std::string TrainResult::bundle_json() const {
    json j;
    json logits = json::array();
    for (int s = 0; s < actor.logits.rows(); ++s) {
        json row = json::array();
        for (int a = 0; a < actor.logits.cols(); ++a) row.push_back(actor.logits(s, a));
        logits.push_back(std::move(row));
    }
    j["logits"] = std::move(logits);
    j["alpha"] = actor.alpha;
    json wj = json::array();
    for (int i = 0; i < value.w.size(); ++i) wj.push_back(value.w(i));
    j["w"] = std::move(wj);
    j["dual"] = json::parse(dual.to_json());
    j["diverged"] = diverged;
    j["steps_run"] = steps_run;
    j["final_return_normalized"] = final_return_normalized;
    return j.dump(2);
}

}  // namespace popql
