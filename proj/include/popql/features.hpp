#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>

#include "popql/util.hpp"

namespace popql {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Linear basis over chain states. Row x of Phi is the feature vector of flat
/// state-action index x (x = s * num_actions + a for MDPs, x = s for MRPs).
/// Rows are unit-norm except for the fixed three-state basis, which is kept
/// exactly as specified and flagged via unit_norm = false so certificate
/// consumers can warn that the unit-norm assumption does not apply.
struct FeatureMap {
    MatrixXd Phi;
    int k = 0;
    std::uint64_t seed = 0;
    double eps_basis = 0.0;
    bool unit_norm = true;
    int num_actions = 1;

    int count() const { return static_cast<int>(Phi.rows()); }

    Eigen::RowVectorXd row(int x) const {
        if (x < 0 || x >= Phi.rows())
            throw std::out_of_range("FeatureMap: index " + std::to_string(x) + " out of range");
        return Phi.row(x);
    }

    /// phi(s, a) under the flat s*num_actions + a indexing.
    VectorXd features(int s, int a) const {
        if (a < 0 || a >= num_actions) throw std::out_of_range("FeatureMap: bad action index");
        return row(s * num_actions + a).transpose();
    }

    void validate() const;
};

/// Rows drawn entrywise from U[0,1) and normalized to unit length;
/// deterministic per seed.
FeatureMap random_unit_features(std::uint64_t seed, int count, int k, int num_actions = 1);

/// The fixed 3x2 basis [[1,0],[0,-1],[(1.05+eps)/2, -(1.05+eps)/2]] with
/// representation-error parameter eps. Rows are intentionally not normalized.
FeatureMap three_state_basis(double eps);

std::string to_json(const FeatureMap& map);
FeatureMap feature_map_from_json(const std::string& text);

}  // namespace popql
