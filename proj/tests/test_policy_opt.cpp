#include <doctest.h>

#include "oracles.hpp"
#include "popql/envs.hpp"
#include "popql/harness.hpp"
#include "popql/policy_opt.hpp"
#include "popql/td.hpp"

using namespace popql;

namespace {

struct LakeFixture {
    FrozenLake lake = build_frozen_lake();
    DiscretePolicy pi_eval = dither_policy(value_iteration(lake.mdp).policy, 0.2);
    DiscretePolicy pi_data = dither_policy(frozen_lake_route_policy(), 0.2);
    SampleDistribution mu_eval = occupancy(lake.mdp, pi_eval);
    SampleDistribution mu_data = occupancy(lake.mdp, pi_data);
};

SoftmaxPolicy random_actor(std::uint64_t seed, int n, int m, double alpha) {
    Rng rng(seed);
    SoftmaxPolicy actor;
    actor.logits = MatrixXd(n, m);
    for (int s = 0; s < n; ++s)
        for (int a = 0; a < m; ++a) actor.logits(s, a) = rng.uniform(-1.0, 1.0);
    actor.alpha = alpha;
    return actor;
}

}  // namespace

TEST_SUITE("policy_opt") {

TEST_CASE("greedy extraction breaks ties toward the lowest action") {
    MatrixXd logits(2, 3);
    logits << 1.0, 1.0, 0.5, 0.2, 0.9, 0.9;
    const DiscretePolicy greedy = greedy_from_logits(logits);
    CHECK(greedy.pi(0, 0) == 1.0);
    CHECK(greedy.pi(1, 1) == 1.0);
}

TEST_CASE("policy gradient") {
    const FiniteMDP mdp = random_mdp(11, 5, 3, 0.8);
    const FeatureMap map = random_unit_features(12, 15, 6, 3);
    SampleDistribution mu;
    {
        Rng rng(13);
        VectorXd w(15);
        for (int i = 0; i < 15; ++i) w(i) = 0.05 + rng.uniform();
        mu.weights = w / w.sum();
    }
    Rng rng(14);
    VectorXd w(6);
    for (int i = 0; i < 6; ++i) w(i) = rng.uniform(-1, 1);

    SUBCASE("with beta = 0 and alpha = 0 it is the value-improvement direction") {
        SoftmaxPolicy actor = random_actor(15, 5, 3, 0.0);
        const DualState dual = zero_dual(6, 4);
        const MatrixXd grad = policy_gradient(mdp, map, actor, dual, mu, w, 0.0);
        const VectorXd q_hat = map.Phi * w;
        const DiscretePolicy pi = actor.policy();
        for (int s = 0; s < 5; ++s) {
            int best = 0;
            for (int a = 1; a < 3; ++a)
                if (q_hat(s * 3 + a) > q_hat(s * 3 + best)) best = a;
            // raising the logit of the argmax-Q action cannot reduce the objective
            CHECK(grad(s, best) >= -1e-14);
        }
        (void)pi;
    }

    SUBCASE("with constant Q the gradient is the entropy ascent direction") {
        SoftmaxPolicy actor = random_actor(16, 5, 3, 0.7);
        const DualState dual = zero_dual(6, 4);
        VectorXd w_const = VectorXd::Zero(6);  // Q identically zero
        const MatrixXd grad = policy_gradient(mdp, map, actor, dual, mu, w_const, 0.0);
        const DiscretePolicy pi = actor.policy();
        VectorXd muS = VectorXd::Zero(5);
        for (int s = 0; s < 5; ++s)
            for (int a = 0; a < 3; ++a) muS(s) += mu.weights(s * 3 + a);
        for (int s = 0; s < 5; ++s) {
            double entropy = 0.0;
            for (int a = 0; a < 3; ++a) entropy -= pi.pi(s, a) * std::log(pi.pi(s, a));
            for (int a = 0; a < 3; ++a) {
                const double expected =
                    muS(s) * pi.pi(s, a) * 0.7 * (-std::log(pi.pi(s, a)) - entropy);
                CHECK(grad(s, a) == doctest::Approx(expected).epsilon(1e-10));
            }
        }
    }

    SUBCASE("matches central finite differences on the logits") {
        for (int trial = 0; trial < 10; ++trial) {
            const FiniteMDP inst = random_mdp(8000 + trial, 4 + trial % 3, 2 + trial % 2, 0.9);
            const int n = inst.n, m = inst.m;
            const FeatureMap fmap = random_unit_features(8100 + trial, n * m, 4, m);
            SampleDistribution dist;
            {
                Rng r2(8200 + trial);
                VectorXd v(n * m);
                for (int i = 0; i < n * m; ++i) v(i) = 0.05 + r2.uniform();
                dist.weights = v / v.sum();
            }
            SoftmaxPolicy actor = random_actor(8300 + trial, n, m, 0.3 + 0.1 * trial);
            const DualState dual = init_dual(8400 + trial, 4, 2, 0.4);
            Rng r3(8500 + trial);
            VectorXd wv(4);
            for (int i = 0; i < 4; ++i) wv(i) = r3.uniform(-1, 1);
            const double beta = 0.25 * (1 + trial % 3);

            const MatrixXd grad = policy_gradient(inst, fmap, actor, dual, dist, wv, beta);
            const MatrixXd fd = oracles::central_difference(
                [&](const MatrixXd& logits) {
                    SoftmaxPolicy probe = actor;
                    probe.logits = logits;
                    return policy_objective(inst, fmap, probe, dual, dist, wv, beta);
                },
                actor.logits);
            const double rel = (grad - fd).norm() / std::max(1e-12, fd.norm());
            CHECK(rel <= 1e-5);
        }
    }
}

TEST_CASE("behavior cloning") {
    SUBCASE("recovers a deterministic policy from full-coverage data") {
        const int n = 4, m = 3;
        SampleDistribution data;
        data.weights = VectorXd::Zero(n * m);
        for (int s = 0; s < n; ++s) data.weights(s * m + (s % m)) = 1.0 / n;
        const DiscretePolicy cloned = behavior_cloning(n, m, data);
        for (int s = 0; s < n; ++s) CHECK(cloned.pi(s, s % m) == 1.0);
    }

    SUBCASE("an unvisited state falls back to uniform") {
        SampleDistribution data;
        data.weights = VectorXd::Zero(4);
        data.weights(0) = 0.6;
        data.weights(1) = 0.4;  // state 1 never visited
        const DiscretePolicy cloned = behavior_cloning(2, 2, data);
        CHECK(cloned.pi(1, 0) == doctest::Approx(0.5));
        CHECK(cloned.pi(1, 1) == doctest::Approx(0.5));
    }

    SUBCASE("dithered occupancies reproduce the dithered action frequencies") {
        const LakeFixture fix;
        const DiscretePolicy cloned = behavior_cloning(16, 4, fix.mu_data);
        // pi(a|s) = mu(s,a)/muS(s) equals the dithered route policy exactly
        for (int s = 0; s < 16; ++s)
            for (int a = 0; a < 4; ++a)
                CHECK(cloned.pi(s, a) == doctest::Approx(fix.pi_data.pi(s, a)).epsilon(1e-8));
        // chosen action mass under 0.2 dithering with 4 actions
        CHECK(fix.pi_data.pi(0, 1) == doctest::Approx(0.85).epsilon(1e-12));
    }
}

TEST_CASE("policy evaluation anchors") {
    const LakeFixture fix;
    const ValueIterationResult vi = value_iteration(fix.lake.mdp);
    CHECK(evaluate_policy(fix.lake.mdp, vi.policy) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(evaluate_policy(fix.lake.mdp, uniform_policy(16, 4)) ==
          doctest::Approx(0.0).epsilon(1e-9));
    const double dithered = evaluate_policy(fix.lake.mdp, fix.pi_eval);
    CHECK(dithered > 0.0);
    CHECK(dithered < 1.0);
}

TEST_CASE("train loop mechanics") {
    const LakeFixture fix;
    const FeatureMap map = random_unit_features(5, 64, 63, 4);

    SUBCASE("with frozen zero dual and fixed policy, Q steps are td-engine steps bitwise") {
        TrainConfig cfg;
        cfg.steps = 32;
        cfg.lr_pi = 0.0;
        cfg.autotune_alpha = false;
        cfg.freeze_dual = true;
        cfg.beta = 0.0;
        cfg.log_stride = 32;
        const TrainResult run = train_popql(fix.lake.mdp, map, fix.mu_eval, cfg);

        const FiniteMRP chain = mdp_to_mrp(fix.lake.mdp, uniform_policy(16, 4));
        VectorXd w = VectorXd::Zero(63);
        const VectorXd ones = VectorXd::Ones(64);
        for (int t = 0; t < 32; ++t) w = td_step(chain, map, fix.mu_eval.weights, ones, w, cfg.lr_q);
        CHECK((run.value.w - w).lpNorm<Eigen::Infinity>() == 0.0);
    }

    SUBCASE("one joint step applies exactly the standalone policy gradient") {
        TrainConfig cfg;
        cfg.steps = 1;
        cfg.autotune_alpha = false;
        cfg.alpha0 = 0.3;
        cfg.log_stride = 1;
        const TrainResult run = train_popql(fix.lake.mdp, map, fix.mu_eval, cfg);

        SoftmaxPolicy actor0;
        actor0.logits = MatrixXd::Zero(16, 4);
        actor0.alpha = 0.3;
        const DualState dual0 = init_dual(derive_seed(cfg.seed, 0xd0a1), 63, 4, 1e-3);
        const MatrixXd expected =
            cfg.lr_pi * policy_gradient(fix.lake.mdp, map, actor0, dual0, fix.mu_eval,
                                        VectorXd::Zero(63), cfg.beta);
        CHECK((run.actor.logits - expected).lpNorm<Eigen::Infinity>() <= 1e-15);
    }

    SUBCASE("training is deterministic per seed") {
        TrainConfig cfg;
        cfg.steps = 400;
        cfg.log_stride = 100;
        const TrainResult a = train_popql(fix.lake.mdp, map, fix.mu_data, cfg);
        const TrainResult b = train_popql(fix.lake.mdp, map, fix.mu_data, cfg);
        CHECK((a.actor.logits - b.actor.logits).lpNorm<Eigen::Infinity>() == 0.0);
        CHECK((a.value.w - b.value.w).lpNorm<Eigen::Infinity>() == 0.0);
        CHECK(a.final_return_normalized == b.final_return_normalized);
    }

    SUBCASE("reweighting invariants hold at every logged step") {
        TrainConfig cfg;
        cfg.steps = 3000;
        cfg.log_stride = 300;
        cfg.lr_ab = 0.01;
        const TrainResult run = train_popql(fix.lake.mdp, map, fix.mu_data, cfg);
        REQUIRE(run.log.size() >= 10);
        for (const auto& row : run.log) {
            CHECK(row.max_u_invariant_gap <= 1e-8);
            CHECK(row.q_sum_gap <= 1e-10);
            CHECK(row.u_is_one_when_zero_dual);
        }
    }

    SUBCASE("frozen zero dual logs u identically one") {
        TrainConfig cfg;
        cfg.steps = 200;
        cfg.log_stride = 50;
        cfg.freeze_dual = true;
        const TrainResult run = train_popql(fix.lake.mdp, map, fix.mu_data, cfg);
        for (const auto& row : run.log) {
            CHECK(row.u_is_one_when_zero_dual);
            CHECK(row.kl == 0.0);
        }
    }

    SUBCASE("the divergence flag halts the run") {
        TrainConfig cfg;
        cfg.steps = 5000;
        cfg.divergence_ceiling = 1e-12;
        cfg.log_stride = 5000;
        const TrainResult run = train_popql(fix.lake.mdp, map, fix.mu_eval, cfg);
        CHECK(run.diverged);
        CHECK(run.steps_run < cfg.steps);
    }

    SUBCASE("sampled mode runs deterministically") {
        TrainConfig cfg;
        cfg.steps = 300;
        cfg.batch_size = 16;
        cfg.log_stride = 100;
        cfg.lr_ab = 1e-3;
        const TrainResult a = train_popql(fix.lake.mdp, map, fix.mu_eval, cfg);
        const TrainResult b = train_popql(fix.lake.mdp, map, fix.mu_eval, cfg);
        CHECK_FALSE(a.diverged);
        CHECK((a.value.w - b.value.w).lpNorm<Eigen::Infinity>() == 0.0);
        CHECK(a.value.w.allFinite());
        CHECK(a.value.w.norm() > 0.0);
        cfg.seed = 99;
        const TrainResult c = train_popql(fix.lake.mdp, map, fix.mu_eval, cfg);
        CHECK((a.value.w - c.value.w).lpNorm<Eigen::Infinity>() > 0.0);
    }
}

TEST_CASE("entropy auto-tuning settles at the target on a full-length run") {
    const LakeFixture fix;
    const FeatureMap map = random_unit_features(2, 64, 63, 4);
    TrainConfig cfg;  // the training-sweep configuration
    cfg.steps = 1600000;
    cfg.lr_ab = 0.01;
    cfg.lr_pi = 3e-4;
    cfg.log_stride = 40000;
    cfg.seed = 9;
    const TrainResult run = train_popql(fix.lake.mdp, map, fix.mu_eval, cfg);
    REQUIRE_FALSE(run.diverged);

    double mean_tail = 0.0;
    int count = 0;
    for (const auto& row : run.log)
        if (row.step >= static_cast<long>(0.9 * cfg.steps)) {
            mean_tail += row.entropy;
            ++count;
        }
    REQUIRE(count >= 3);
    mean_tail /= count;
    CHECK(std::abs(mean_tail - cfg.target_entropy) <= 0.05);
}

TEST_CASE("a very large beta pins the policy to the data policy") {
    const FrozenLake lake = build_frozen_lake();
    // near-deterministic data policy, lightly dithered for coverage
    const DiscretePolicy pi_data = dither_policy(frozen_lake_route_policy(), 0.05);
    const SampleDistribution mu = occupancy(lake.mdp, pi_data);
    const FeatureMap map = random_unit_features(21, 64, 63, 4);

    auto kl_to_data = [&](const DiscretePolicy& learned) {
        VectorXd muS = VectorXd::Zero(16);
        for (int s = 0; s < 16; ++s)
            for (int a = 0; a < 4; ++a) muS(s) += mu.weights(s * 4 + a);
        double kl = 0.0;
        for (int s = 0; s < 16; ++s)
            for (int a = 0; a < 4; ++a)
                if (learned.pi(s, a) > 0.0)
                    kl += muS(s) * learned.pi(s, a) *
                          std::log(learned.pi(s, a) / pi_data.pi(s, a));
        return kl;
    };

    TrainConfig cfg;
    cfg.steps = 200000;
    cfg.lr_ab = 0.01;
    cfg.log_stride = 50000;
    const TrainResult moderate = train_popql(lake.mdp, map, mu, cfg);
    cfg.beta = 1e6;
    const TrainResult pinned = train_popql(lake.mdp, map, mu, cfg);
    CHECK(kl_to_data(pinned.actor.policy()) < kl_to_data(moderate.actor.policy()));
}

}  // TEST_SUITE
