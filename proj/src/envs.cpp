#include "popql/envs.hpp"

#include <algorithm>

namespace popql {

ThreeStateInstance build_three_state(double eps) {
    ThreeStateInstance inst;
    inst.mrp.P = MatrixXd(3, 3);
    // s1 and s2: 1/4 self, 1/4 to the other, 1/2 to s3; s3: 1/4 to each of
    // s1, s2 and a 1/2 self-loop. All rows coincide.
    inst.mrp.P << 0.25, 0.25, 0.5,
                  0.25, 0.25, 0.5,
                  0.25, 0.25, 0.5;
    inst.mrp.gamma = 0.99;
    inst.target_value = VectorXd(3);
    inst.target_value << 1.0, 1.0, 1.05;
    inst.mrp.R = inst.target_value - inst.mrp.gamma * inst.mrp.P * inst.target_value;
    inst.basis = three_state_basis(eps);
    inst.mrp.validate();
    return inst;
}

SampleDistribution three_state_family(double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw ModelError("three_state_family: p must be in [0,1]");
    SampleDistribution d;
    d.weights = VectorXd(3);
    d.weights << 0.5 * p, 0.5 * p, 1.0 - p;
    return d;
}

namespace {

constexpr int kSize = FrozenLake::kSize;

int cell(int r, int c) { return r * kSize + c; }

// action deltas: up, right, down, left
constexpr int kDr[4] = {-1, 0, 1, 0};
constexpr int kDc[4] = {0, 1, 0, -1};

int move(int s, int a) {
    const int r = s / kSize, c = s % kSize;
    const int nr = r + kDr[a], nc = c + kDc[a];
    if (nr < 0 || nr >= kSize || nc < 0 || nc >= kSize) return s;  // stay in place
    return cell(nr, nc);
}

}  // namespace

FrozenLake build_frozen_lake(const FrozenLakeConfig& config) {
    if (!(config.gamma >= 0.0 && config.gamma < 1.0))
        throw ModelError("build_frozen_lake: gamma must be in [0,1)");
    FrozenLake lake;
    lake.layout = "SFFF/FHFH/FFFH/HFFG";
    lake.start_state = cell(0, 0);
    lake.goal_state = cell(3, 3);
    lake.holes = {cell(1, 1), cell(1, 3), cell(2, 3), cell(3, 0)};

    const int n = kSize * kSize, m = FrozenLake::kActions;
    FiniteMDP mdp;
    mdp.n = n;
    mdp.m = m;
    mdp.gamma = config.gamma;
    mdp.P = MatrixXd::Zero(n * m, n);
    mdp.R = VectorXd::Zero(n * m);
    mdp.start = VectorXd::Zero(n);
    mdp.start(lake.start_state) = 1.0;

    auto is_hole = [&](int s) {
        return std::find(lake.holes.begin(), lake.holes.end(), s) != lake.holes.end();
    };

    for (int s = 0; s < n; ++s) {
        for (int a = 0; a < m; ++a) {
            const int x = mdp.flat(s, a);
            // holes and the goal are visited for one step and then teleport
            // back to the start; the goal pays on its exit step
            if (is_hole(s)) {
                mdp.P(x, lake.start_state) = 1.0;
                continue;
            }
            if (s == lake.goal_state) {
                mdp.P(x, lake.start_state) = 1.0;
                mdp.R(x) = config.goal_reward;
                continue;
            }
            // slippery: intended direction or either perpendicular, 1/3 each
            const std::vector<std::pair<int, double>> moves =
                config.slippery ? std::vector<std::pair<int, double>>{{a, 1.0 / 3.0},
                                                                      {(a + 1) % 4, 1.0 / 3.0},
                                                                      {(a + 3) % 4, 1.0 / 3.0}}
                                : std::vector<std::pair<int, double>>{{a, 1.0}};
            for (const auto& [dir, prob] : moves) mdp.P(x, move(s, dir)) += prob;
        }
    }
    mdp.validate();
    lake.mdp = std::move(mdp);
    return lake;
}

DiscretePolicy frozen_lake_route_policy() {
    const int n = kSize * kSize, m = FrozenLake::kActions;
    DiscretePolicy policy;
    policy.pi = MatrixXd::Zero(n, m);
    for (int s = 0; s < n; ++s) {
        const int c = s % kSize;
        policy.pi(s, c == kSize - 1 ? 2 : 1) = 1.0;  // right, or down in last column
    }
    return policy;
}

}  // namespace popql
