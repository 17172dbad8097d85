#pragma once

// End-to-end toy experiments built from the library modules: entropy bands,
// training runs with on-disk records, the MLE vs MCL comparison on
// two-state chain mixtures, and checkpoint evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mclseq/config.hpp"
#include "mclseq/metrics.hpp"
#include "mclseq/train.hpp"

namespace mclseq::experiments {

using LogFn = std::function<void(const std::string&)>;

/// Per-token entropy band for K hypotheses on sequences of length T.
struct Band {
  std::size_t hypotheses = 1;
  double h_x = 0.0;  ///< Monte-Carlo H(x), the MLE optimum
  double h_x_std_error = 0.0;
  double lower = 0.0;  ///< H(x) - log K
  double upper = 0.0;  ///< H(x | z); equals H(x) for K = 1
};
Band entropy_band(const markov::MixtureSpec& mix, std::size_t hypotheses, std::size_t length,
                  std::size_t mc_samples, std::uint64_t seed,
                  markov::EntropyEstimator estimator = markov::EntropyEstimator::MixtureMarginal);
/// quantity,value,stderr
void write_band_csv(std::ostream& os, const Band& band);

/// First-token law of the mixture, sum_k w_k pi_k.
std::vector<double> initial_distribution(const markov::MixtureSpec& mix);

/// Writes config.txt and config.sha1 into `dir`.
void write_snapshot(const std::filesystem::path& dir, const config::ExperimentConfig& cfg);

/// Trains `model_config` with `seed` (adapter init and data) and writes
/// run.csv, steps.csv and final.ckpt into `dir` when it is non-empty.
train::RunResult train_and_save(const config::ExperimentConfig& cfg, const model::ModelConfig& model_config,
                                std::uint64_t seed, const std::filesystem::path& dir,
                                const train::ProgressFn& progress = {});

/// The single-hypothesis counterpart of an MCL configuration: same adapter
/// scale and K times the rank, so both hold the same number of parameters.
model::ModelConfig mle_counterpart(const model::ModelConfig& mcl);

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  double seconds = 0.0;
  train::RunRecord mle, mcl;
  double mle_final = 0.0, mcl_final = 0.0;
  markov::TransitionMatrix mle_matrix;
  std::vector<markov::TransitionMatrix> mcl_matrices;
  double mle_pbar_error = 0.0;
  metrics::RecoveryReport mcl_recovery;
};

struct MixtureReport {
  Band mle_band, mcl_band;
  markov::TransitionMatrix pbar;
  std::vector<SeedOutcome> seeds;
  std::vector<Check> checks;
  bool passed() const;
};

/// Trains the MLE and MCL models per seed, recovers their transition
/// matrices and checks band, plateau, separation and recovery tolerances.
/// Writes everything below cfg.output_dir.
MixtureReport reproduce_fig1(const config::ExperimentConfig& cfg, bool parallel_seeds, const LogFn& log = {});

struct EvalReport {
  std::string run_id;
  std::size_t hypotheses = 0;
  double epsilon = 0.0;
  decode::Strategy strategy = decode::Strategy::Greedy;
  metrics::DiversityReport diversity;
  double oracle_nll = 0.0;
  std::vector<double> recovery_errors;
};
EvalReport evaluate_checkpoint(const config::ExperimentConfig& cfg, const model::Model& model,
                               const std::string& run_id);
/// run_id,K,epsilon,strategy,div1,div2,mbleu4,oracle_nll,recovery_err_k...
void write_metrics_csv(std::ostream& os, const EvalReport& report);

}  // namespace mclseq::experiments
