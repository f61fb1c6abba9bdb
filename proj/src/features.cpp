#include "popql/features.hpp"

#include <cmath>

#include <json.hpp>

namespace popql {

using nlohmann::json;

void FeatureMap::validate() const {
    if (k < 1) throw ModelError("FeatureMap: k must be >= 1");
    if (Phi.cols() != k) throw ModelError("FeatureMap: Phi width does not match k");
    if (!Phi.allFinite()) throw ModelError("FeatureMap: non-finite entry");
    if (unit_norm) {
        for (int i = 0; i < Phi.rows(); ++i)
            if (std::abs(Phi.row(i).norm() - 1.0) > 1e-10)
                throw ModelError("FeatureMap: row " + std::to_string(i) + " is not unit-norm");
    }
}

FeatureMap random_unit_features(std::uint64_t seed, int count, int k, int num_actions) {
    if (k < 1) throw ModelError("random_unit_features: k must be >= 1");
    if (count < 1) throw ModelError("random_unit_features: count must be >= 1");
    Rng rng(seed);
    FeatureMap map;
    map.Phi = MatrixXd(count, k);
    for (int i = 0; i < count; ++i) {
        for (int j = 0; j < k; ++j) map.Phi(i, j) = rng.uniform();
        const double norm = map.Phi.row(i).norm();
        map.Phi.row(i) /= norm;
    }
    map.k = k;
    map.seed = seed;
    map.num_actions = num_actions;
    map.unit_norm = true;
    return map;
}

FeatureMap three_state_basis(double eps) {
    if (eps < 0.0) throw ModelError("three_state_basis: eps must be >= 0");
    const double c = 0.5 * (1.05 + eps);
    FeatureMap map;
    map.Phi = MatrixXd(3, 2);
    map.Phi << 1.0, 0.0, 0.0, -1.0, c, -c;
    map.k = 2;
    map.eps_basis = eps;
    map.unit_norm = false;
    map.num_actions = 1;
    return map;
}

std::string to_json(const FeatureMap& map) {
    json j;
    j["k"] = map.k;
    j["seed"] = map.seed;
    j["eps_basis"] = map.eps_basis;
    j["unit_norm"] = map.unit_norm;
    j["num_actions"] = map.num_actions;
    json rows = json::array();
    for (int i = 0; i < map.Phi.rows(); ++i) {
        json row = json::array();
        for (int c = 0; c < map.Phi.cols(); ++c) row.push_back(map.Phi(i, c));
        rows.push_back(std::move(row));
    }
    j["rows"] = std::move(rows);
    return j.dump(2);
}

FeatureMap feature_map_from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ModelError("feature_map_from_json: invalid JSON");
    FeatureMap map;
    try {
        map.k = j.at("k").get<int>();
        map.seed = j.value("seed", std::uint64_t{0});
        map.eps_basis = j.value("eps_basis", 0.0);
        map.unit_norm = j.value("unit_norm", true);
        map.num_actions = j.value("num_actions", 1);
        const auto& rows = j.at("rows");
        map.Phi = MatrixXd(rows.size(), map.k);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (int c = 0; c < map.k; ++c) map.Phi(static_cast<int>(i), c) = rows[i][c].get<double>();
    } catch (const json::exception& e) {
        throw ModelError(std::string("feature_map_from_json: ") + e.what());
    }
    map.validate();
    return map;
}

}  // namespace popql
