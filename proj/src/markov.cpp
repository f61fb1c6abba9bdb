#include "popql/markov.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

namespace popql {

using nlohmann::json;

namespace {

void check_stochastic_rows(const MatrixXd& P, const char* what) {
    for (int i = 0; i < P.rows(); ++i) {
        double sum = 0.0;
        for (int j = 0; j < P.cols(); ++j) {
            const double v = P(i, j);
            if (!(v >= 0.0) || !std::isfinite(v))
                throw ModelError(std::string(what) + ": negative or non-finite entry in row " +
                                 std::to_string(i));
            sum += v;
        }
        if (std::abs(sum - 1.0) > kRowSumTol)
            throw ModelError(std::string(what) + ": row " + std::to_string(i) +
                             " sums to " + format_double(sum));
    }
}

void check_finite(const VectorXd& v, const char* what) {
    if (!v.allFinite()) throw ModelError(std::string(what) + ": non-finite entry");
}

}  // namespace

void FiniteMRP::validate() const {
    if (P.rows() != P.cols()) throw ModelError("FiniteMRP: P must be square");
    if (R.size() != P.rows()) throw ModelError("FiniteMRP: R size does not match P");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ModelError("FiniteMRP: gamma must be in [0,1)");
    check_stochastic_rows(P, "FiniteMRP");
    check_finite(R, "FiniteMRP reward");
}

void FiniteMDP::validate() const {
    if (n <= 0 || m <= 0) throw ModelError("FiniteMDP: n and m must be positive");
    if (P.rows() != n * m || P.cols() != n) throw ModelError("FiniteMDP: P must be (n*m) x n");
    if (R.size() != n * m) throw ModelError("FiniteMDP: R must have n*m entries");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ModelError("FiniteMDP: gamma must be in [0,1)");
    if (start.size() != n) throw ModelError("FiniteMDP: start must have n entries");
    check_stochastic_rows(P, "FiniteMDP");
    check_finite(R, "FiniteMDP reward");
    double s = start.sum();
    if (start.minCoeff() < 0.0 || std::abs(s - 1.0) > kRowSumTol)
        throw ModelError("FiniteMDP: start is not a distribution");
}

void DiscretePolicy::validate() const {
    check_stochastic_rows(pi, "DiscretePolicy");
}

void SampleDistribution::validate(int num_actions) const {
    if (weights.size() == 0) throw ModelError("SampleDistribution: empty weights");
    double sum = 0.0;
    for (int i = 0; i < weights.size(); ++i) {
        if (!(weights(i) >= 0.0) || !std::isfinite(weights(i)))
            throw ModelError("SampleDistribution: negative or non-finite weight");
        sum += weights(i);
    }
    if (std::abs(sum - 1.0) > kDistributionTol)
        throw ModelError("SampleDistribution: weights sum to " + format_double(sum));
    if (!dataset.empty()) {
        VectorXd freq = VectorXd::Zero(weights.size());
        double total = 0.0;
        for (const auto& rec : dataset) {
            const int x = rec.state * num_actions + rec.action;
            if (x < 0 || x >= weights.size())
                throw ModelError("SampleDistribution: dataset record out of range");
            if (rec.count <= 0.0) throw ModelError("SampleDistribution: non-positive count");
            freq(x) += rec.count;
            total += rec.count;
        }
        freq /= total;
        if ((freq - weights).lpNorm<Eigen::Infinity>() > kDistributionTol)
            throw ModelError("SampleDistribution: dataset frequencies do not match weights");
    }
}

SampleDistribution point_mass(int n, int index) {
    SampleDistribution d;
    d.weights = VectorXd::Zero(n);
    d.weights(index) = 1.0;
    return d;
}

SampleDistribution uniform_distribution(int n) {
    SampleDistribution d;
    d.weights = VectorXd::Constant(n, 1.0 / n);
    return d;
}

VectorXd exact_value(const FiniteMRP& mrp) {
    const int n = mrp.n();
    MatrixXd A = MatrixXd::Identity(n, n) - mrp.gamma * mrp.P;
    Eigen::PartialPivLU<MatrixXd> lu(A);
    VectorXd v = lu.solve(mrp.R);
    if (!v.allFinite()) throw SingularSystemError("exact_value: solve produced non-finite values");
    const double residual = (v - mrp.R - mrp.gamma * mrp.P * v).lpNorm<Eigen::Infinity>();
    if (residual > 1e-9)
        throw SingularSystemError("exact_value: Bellman residual " + format_double(residual));
    return v;
}

FiniteMRP mdp_to_mrp(const FiniteMDP& mdp, const DiscretePolicy& policy) {
    const int n = mdp.n, m = mdp.m, N = n * m;
    FiniteMRP chain;
    chain.P = MatrixXd::Zero(N, N);
    for (int x = 0; x < N; ++x)
        for (int s2 = 0; s2 < n; ++s2) {
            const double p = mdp.P(x, s2);
            if (p == 0.0) continue;
            for (int a2 = 0; a2 < m; ++a2) chain.P(x, s2 * m + a2) = p * policy.pi(s2, a2);
        }
    chain.R = mdp.R;
    chain.gamma = mdp.gamma;
    return chain;
}

VectorXd exact_q(const FiniteMDP& mdp, const DiscretePolicy& policy) {
    return exact_value(mdp_to_mrp(mdp, policy));
}

namespace {

// Closed communicating classes of the directed graph P > 0, via Tarjan SCC.
int count_closed_classes(const MatrixXd& P) {
    const int n = static_cast<int>(P.rows());
    std::vector<std::vector<int>> adj(n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (P(i, j) > 0.0) adj[i].push_back(j);

    std::vector<int> index(n, -1), low(n, 0), comp(n, -1), stack;
    std::vector<bool> on_stack(n, false);
    int next_index = 0, n_comp = 0;

    // iterative Tarjan
    struct Frame { int v; std::size_t child; };
    for (int root = 0; root < n; ++root) {
        if (index[root] != -1) continue;
        std::vector<Frame> frames{{root, 0}};
        index[root] = low[root] = next_index++;
        stack.push_back(root);
        on_stack[root] = true;
        while (!frames.empty()) {
            Frame& f = frames.back();
            if (f.child < adj[f.v].size()) {
                int w = adj[f.v][f.child++];
                if (index[w] == -1) {
                    index[w] = low[w] = next_index++;
                    stack.push_back(w);
                    on_stack[w] = true;
                    frames.push_back({w, 0});
                } else if (on_stack[w]) {
                    low[f.v] = std::min(low[f.v], index[w]);
                }
            } else {
                if (low[f.v] == index[f.v]) {
                    while (true) {
                        int w = stack.back();
                        stack.pop_back();
                        on_stack[w] = false;
                        comp[w] = n_comp;
                        if (w == f.v) break;
                    }
                    ++n_comp;
                }
                int v = f.v;
                frames.pop_back();
                if (!frames.empty()) low[frames.back().v] = std::min(low[frames.back().v], low[v]);
            }
        }
    }

    std::vector<bool> closed(n_comp, true);
    for (int i = 0; i < n; ++i)
        for (int j : adj[i])
            if (comp[j] != comp[i]) closed[comp[i]] = false;
    return static_cast<int>(std::count(closed.begin(), closed.end(), true));
}

}  // namespace

SampleDistribution stationary_distribution(const MatrixXd& P) {
    const int n = static_cast<int>(P.rows());
    if (P.rows() != P.cols()) throw ModelError("stationary_distribution: P must be square");

    const int closed = count_closed_classes(P);
    if (closed != 1)
        throw NonErgodicError("stationary_distribution: " + std::to_string(closed) +
                              " closed communicating classes");

    // Stack (P^T - I) with the normalization row and solve in least squares.
    MatrixXd A(n + 1, n);
    A.topRows(n) = P.transpose() - MatrixXd::Identity(n, n);
    A.bottomRows(1).setOnes();
    VectorXd rhs = VectorXd::Zero(n + 1);
    rhs(n) = 1.0;
    VectorXd nu = A.completeOrthogonalDecomposition().solve(rhs);

    auto clean = [&](VectorXd v) {
        v = v.cwiseMax(0.0);
        const double s = v.sum();
        if (s > 0) v /= s;
        return v;
    };
    nu = clean(nu);

    auto l1_residual = [&](const VectorXd& v) { return (P.transpose() * v - v).lpNorm<1>(); };

    if (!nu.allFinite() || l1_residual(nu) > 1e-10) {
        // damped power iteration; the (P + I)/2 chain shares the stationary
        // distribution and is aperiodic
        VectorXd v = VectorXd::Constant(n, 1.0 / n);
        for (long it = 0; it < 1000000; ++it) {
            VectorXd next = 0.5 * (P.transpose() * v + v);
            next /= next.sum();
            const double change = (next - v).lpNorm<1>();
            v = next;
            if (change < 1e-12) break;
        }
        nu = clean(v);
        if (l1_residual(nu) > 1e-10)
            throw NumericError("stationary_distribution: residual " +
                               format_double(l1_residual(nu)));
    }

    SampleDistribution d;
    d.weights = nu;
    return d;
}

FiniteMDP random_mdp(std::uint64_t seed, int n, int m, double sparsity, double gamma) {
    if (n < 1 || m < 1) throw ModelError("random_mdp: n, m must be >= 1");
    if (!(sparsity > 0.0 && sparsity <= 1.0)) throw ModelError("random_mdp: sparsity in (0,1]");
    Rng rng(seed);
    FiniteMDP mdp;
    mdp.n = n;
    mdp.m = m;
    mdp.gamma = gamma;
    mdp.P = MatrixXd::Zero(n * m, n);
    mdp.R = VectorXd::Zero(n * m);
    const int support = std::max<int>(1, static_cast<int>(std::ceil(sparsity * n)));
    std::vector<int> idx(n);
    for (int x = 0; x < n * m; ++x) {
        std::iota(idx.begin(), idx.end(), 0);
        for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(i + 1)]);
        double total = 0.0;
        for (int i = 0; i < support; ++i) {
            const double w = 0.05 + rng.uniform();
            mdp.P(x, idx[i]) = w;
            total += w;
        }
        mdp.P.row(x) /= total;
        mdp.R(x) = rng.uniform(-1.0, 1.0);
    }
    mdp.start = VectorXd::Constant(n, 1.0 / n);
    return mdp;
}

DiscretePolicy uniform_policy(int n, int m) {
    DiscretePolicy p;
    p.pi = MatrixXd::Constant(n, m, 1.0 / m);
    return p;
}

DiscretePolicy random_policy(std::uint64_t seed, int n, int m) {
    Rng rng(seed);
    DiscretePolicy p;
    p.pi = MatrixXd::Zero(n, m);
    for (int s = 0; s < n; ++s) {
        double total = 0.0;
        for (int a = 0; a < m; ++a) {
            p.pi(s, a) = 0.1 + rng.uniform();
            total += p.pi(s, a);
        }
        p.pi.row(s) /= total;
    }
    return p;
}

ValueIterationResult value_iteration(const FiniteMDP& mdp, double tol, long max_iter) {
    const int n = mdp.n, m = mdp.m;
    VectorXd v = VectorXd::Zero(n);
    ValueIterationResult result;
    double residual = 0.0;
    long it = 0;
    for (; it < max_iter; ++it) {
        VectorXd pv = mdp.P * v;  // over flat (s, a)
        VectorXd next(n);
        for (int s = 0; s < n; ++s) {
            double best = -std::numeric_limits<double>::infinity();
            for (int a = 0; a < m; ++a)
                best = std::max(best, mdp.R(s * m + a) + mdp.gamma * pv(s * m + a));
            next(s) = best;
        }
        residual = (next - v).lpNorm<Eigen::Infinity>();
        v = next;
        if (residual < tol) break;
    }
    result.v = v;
    result.iterations = it + 1;
    result.residual = residual;
    result.policy.pi = MatrixXd::Zero(n, m);
    VectorXd pv = mdp.P * v;
    for (int s = 0; s < n; ++s) {
        int best_a = 0;
        double best = -std::numeric_limits<double>::infinity();
        for (int a = 0; a < m; ++a) {
            const double q = mdp.R(s * m + a) + mdp.gamma * pv(s * m + a);
            if (q > best) {  // strict: ties resolve to the lowest action index
                best = q;
                best_a = a;
            }
        }
        result.policy.pi(s, best_a) = 1.0;
    }
    return result;
}

namespace {

json matrix_to_json(const MatrixXd& m) {
    json rows = json::array();
    for (int i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

json vector_to_json(const VectorXd& v) {
    json arr = json::array();
    for (int i = 0; i < v.size(); ++i) arr.push_back(v(i));
    return arr;
}

MatrixXd matrix_from_json(const json& j) {
    const int rows = static_cast<int>(j.size());
    if (rows == 0) throw ModelError("json: empty matrix");
    const int cols = static_cast<int>(j[0].size());
    MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        if (static_cast<int>(j[i].size()) != cols) throw ModelError("json: ragged matrix");
        for (int c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
    }
    return m;
}

VectorXd vector_from_json(const json& j) {
    VectorXd v(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<int>(i)) = j[i].get<double>();
    return v;
}

}  // namespace

std::string to_json(const FiniteMRP& mrp) {
    json j;
    j["type"] = "mrp";
    j["n"] = mrp.n();
    j["gamma"] = mrp.gamma;
    j["P"] = matrix_to_json(mrp.P);
    j["R"] = vector_to_json(mrp.R);
    return j.dump(2);
}

std::string to_json(const FiniteMDP& mdp, const std::string& layout) {
    json j;
    j["type"] = "mdp";
    j["n"] = mdp.n;
    j["m"] = mdp.m;
    j["gamma"] = mdp.gamma;
    j["P"] = matrix_to_json(mdp.P);
    j["R"] = vector_to_json(mdp.R);
    j["start"] = vector_to_json(mdp.start);
    if (!layout.empty()) j["layout"] = layout;
    return j.dump(2);
}

FiniteMRP mrp_from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ModelError("mrp_from_json: invalid JSON");
    FiniteMRP mrp;
    try {
        mrp.P = matrix_from_json(j.at("P"));
        mrp.R = vector_from_json(j.at("R"));
        mrp.gamma = j.at("gamma").get<double>();
    } catch (const json::exception& e) {
        throw ModelError(std::string("mrp_from_json: ") + e.what());
    }
    mrp.validate();
    return mrp;
}

FiniteMDP mdp_from_json(const std::string& text, std::string* layout) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ModelError("mdp_from_json: invalid JSON");
    FiniteMDP mdp;
    try {
        mdp.n = j.at("n").get<int>();
        mdp.m = j.at("m").get<int>();
        mdp.P = matrix_from_json(j.at("P"));
        mdp.R = vector_from_json(j.at("R"));
        mdp.gamma = j.at("gamma").get<double>();
        mdp.start = vector_from_json(j.at("start"));
        if (layout) *layout = j.value("layout", "");
    } catch (const json::exception& e) {
        throw ModelError(std::string("mdp_from_json: ") + e.what());
    }
    mdp.validate();
    return mdp;
}

}  // namespace popql
