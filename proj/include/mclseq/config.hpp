#pragma once

// Experiment configuration as flat `dotted.key=value` text.
//
//   # comment
//   mixture.weights=0.5,0.5
//   mixture.component.0=0.2,0.8,0.1,0.9
//   train.lr_max=1e-4
//   seeds=0,1,2
//
// Unknown keys are rejected. Serialization writes every key in a fixed order
// so a snapshot reloads to an identical configuration.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mclseq/decode.hpp"
#include "mclseq/markov.hpp"
#include "mclseq/model.hpp"
#include "mclseq/train.hpp"

namespace mclseq::config {

struct BoundsConfig {
  std::size_t mc_samples = 50000;
  markov::EntropyEstimator estimator = markov::EntropyEstimator::MixtureMarginal;
};

struct EvalConfig {
  /// Sequences sampled from the model per hypothesis to estimate its transition matrix.
  std::size_t recovery_samples = 2000;
  /// Held-out sequences for the oracle NLL.
  std::size_t test_size = 4096;
  std::size_t n_candidates = 10;
};

struct ExperimentConfig {
  markov::MixtureSpec mixture;
  model::ModelConfig model;
  train::TrainConfig train;
  decode::DecodeConfig decode;
  BoundsConfig bounds;
  EvalConfig eval;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::filesystem::path output_dir = "runs";

  /// Throws InputError/DomainError when a sub-config is invalid or the parts disagree.
  void validate() const;
};

/// Two-state chain mixtures used by the toy experiments.
markov::MixtureSpec fig1_mixture();
markov::MixtureSpec fig5_mixture();
/// Three chains over three states (forward cycle, backward cycle, sticky),
/// used to compare hypothesis counts.
markov::MixtureSpec three_chain_mixture();

/// Toy-experiment defaults: the fig1 mixture, K=2 r=32 and the reference
/// optimizer settings.
ExperimentConfig default_config();

/// Applies `key=value` lines on top of `base`. `source` names the input in errors.
ExperimentConfig parse(const std::string& text, ExperimentConfig base = default_config(),
                       const std::string& source = "config");
ExperimentConfig load(const std::filesystem::path& path);
/// Applies one assignment, e.g. "train.total_steps=20".
void set_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Mixture file: keys vocab_size, weights, component.N (row-major entries).
markov::MixtureSpec parse_mixture(const std::string& text, const std::string& source = "mixture");
markov::MixtureSpec load_mixture(const std::filesystem::path& path);

std::string to_string(const ExperimentConfig& cfg);

/// Hex SHA-1 of the git blob object holding `content`.
std::string git_blob_hash(const std::string& content);

}  // namespace mclseq::config
