#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "popql/certificate.hpp"
#include "popql/dual.hpp"
#include "popql/envs.hpp"
#include "popql/policy_opt.hpp"
#include "popql/td.hpp"

namespace popql {

/// Declarative description of one experiment run. Serializes to/from JSON;
/// the SHA-1 of the canonical dump is the config content hash referenced by
/// every result row.
struct ExperimentConfig {
    std::string kind;  // three-state | eval-sweep | density | train-sweep | certify | solve-dual

    // environment
    std::string instance = "three-state";  // three-state | frozen-lake (certify / solve-dual)
    FrozenLakeConfig lake;
    double three_state_eps = 1e-4;
    double p = 0.8;    // three-state family parameter for certify / solve-dual
    double eta = 0.0;  // mixture fraction for density / certify on the lake

    std::vector<double> grid;           // p values or eta values
    std::vector<std::uint64_t> seeds;   // feature seeds, one sweep cell per (grid, seed)
    double dither_eps = 0.2;
    std::uint64_t feature_seed = 7;
    int k = 63;
    std::uint64_t master_seed = 1;

    // output
    std::string out_dir = "results";
    std::string format = "csv";  // csv | json
    bool plots = true;
    int threads = 1;

    // stage knobs
    long td_steps = 0;  // 0 = per-experiment default
    double lr_q = 1e-3;
    double cert_tol = 0.005;
    DualConfig dual;
    TrainConfig train;

    void validate() const;
    std::string to_json() const;
    std::string hash() const;
    static ExperimentConfig defaults_for(const std::string& kind);
    static ExperimentConfig from_json_text(const std::string& text);
    static ExperimentConfig from_json_file(const std::string& path);
};

struct ResultRow {
    double grid_value = 0.0;
    std::uint64_t seed = 0;
    std::string method;
    std::vector<double> metrics;  // aligned with ResultTable::columns
};

/// One row per (grid value, seed, method) with a fixed metric column set.
struct ResultTable {
    std::vector<std::string> columns;
    std::vector<ResultRow> rows;
    std::string config_hash;

    void to_csv(std::ostream& out) const;
    std::optional<double> metric(double grid_value, std::uint64_t seed, const std::string& method,
                                 const std::string& column) const;
};

DiscretePolicy dither_policy(const DiscretePolicy& policy, double eps);
SampleDistribution mix_distributions(const SampleDistribution& mu_data,
                                     const SampleDistribution& mu_eval, double eta);

/// Stationary state-action occupancy of a policy on the MDP's induced chain.
SampleDistribution occupancy(const FiniteMDP& mdp, const DiscretePolicy& policy);

/// Draws a finite i.i.d. transition dataset whose records follow dist and the
/// model kernel; empirical weights replace the exact ones.
SampleDistribution sample_dataset(const FiniteMDP& mdp, const DiscretePolicy& policy,
                                  const SampleDistribution& dist, long num_transitions,
                                  std::uint64_t seed);

struct ThreeStateSweepResult {
    ResultTable table;
    double p_star = 0.0;  // certificate crossing, bisected to 1e-4
    std::string summary_json;
};

ThreeStateSweepResult run_three_state_sweep(const ExperimentConfig& config);

struct EvalSweepResult {
    ResultTable table;
    std::string summary_json;
};

EvalSweepResult run_eval_sweep(const ExperimentConfig& config);

struct DensityResult {
    MatrixXd off_policy;  // 4x4 state occupancies
    MatrixXd projected;
    MatrixXd on_policy;
    double kl_q_mu = 0.0;
    double kl_nu_mu = 0.0;
    CertificateReport q_certificate;
    std::string summary_json;
};

DensityResult run_density_export(const ExperimentConfig& config);

struct TrainSweepResult {
    ResultTable table;
    std::string summary_json;
    // per-cell popql training logs and final artifact bundles, keyed by
    // relative file name
    std::vector<std::pair<std::string, std::string>> artifacts;
};

TrainSweepResult run_train_sweep(const ExperimentConfig& config);

/// Runs a subcommand and writes its outputs under config.out_dir. Returns the
/// process exit code: 0 success, 2 configuration error, 3 numeric failure.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace popql
