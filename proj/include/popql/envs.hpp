#pragma once

#include <string>
#include <vector>

#include "popql/features.hpp"
#include "popql/markov.hpp"

namespace popql {

/// The three-state chain with target values V = [1, 1, 1.05], discount 0.99
/// and rewards R = (I - gamma P) V, paired with its fixed 3x2 basis.
struct ThreeStateInstance {
    FiniteMRP mrp;
    FeatureMap basis;
    VectorXd target_value;  // [1, 1, 1.05]
};

ThreeStateInstance build_three_state(double eps = 1e-4);

/// Sampling family mu(p) = (p/2, p/2, 1-p); p = 0.5 is the on-policy point.
SampleDistribution three_state_family(double p);

struct FrozenLakeConfig {
    bool slippery = false;
    double goal_reward = 1.0;
    double gamma = 0.95;
};

/// 4x4 Frozen Lake as a continuing task: stepping into a hole or onto the
/// goal teleports back to the start cell (the goal step pays goal_reward),
/// moves off the grid stay in place. Actions: 0=up, 1=right, 2=down, 3=left.
/// Deterministic moves by default; the slippery variant moves to the intended
/// cell or either perpendicular neighbour with probability 1/3 each.
struct FrozenLake {
    FiniteMDP mdp;
    std::string layout;  // "SFFF/FHFH/FFFH/HFFG"
    int start_state = 0;
    int goal_state = 15;
    std::vector<int> holes;

    static constexpr int kSize = 4;
    static constexpr int kActions = 4;
};

FrozenLake build_frozen_lake(const FrozenLakeConfig& config = {});

/// Fixed suboptimal data-collection policy for Frozen Lake: head right along
/// the current row, go down in the last column. An arbitrary route that never
/// reaches the goal; not canonical in any way, just a strongly off-policy
/// source of data.
DiscretePolicy frozen_lake_route_policy();

}  // namespace popql
