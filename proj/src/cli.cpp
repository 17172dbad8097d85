#include "mclseq/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "mclseq/errors.hpp"
#include "mclseq/experiments.hpp"

namespace mclseq::cli {
namespace {

namespace fs = std::filesystem;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "Configuration file (dotted key=value lines)");
  cmd->add_option("--set", c.overrides, "Override one key, e.g. --set train.total_steps=20");
  cmd->add_option("--out", c.out_dir, "Output directory (default: $MCL_SEQ_OUT, then output_dir)");
}

config::ExperimentConfig resolve(const Common& c) {
  config::ExperimentConfig cfg = c.config_path.empty() ? config::default_config() : config::load(c.config_path);
  std::string text;
  for (const auto& o : c.overrides) text += o + "\n";
  cfg = config::parse(text, cfg, "--set");
  if (!c.out_dir.empty()) {
    cfg.output_dir = c.out_dir;
  } else if (const char* env = std::getenv("MCL_SEQ_OUT"); env && *env) {
    cfg.output_dir = env;
  }
  cfg.validate();
  return cfg;
}

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  return os;
}

int cmd_bounds(const Common& c, bool per_component, std::ostream& out) {
  auto cfg = resolve(c);
  if (per_component) cfg.bounds.estimator = markov::EntropyEstimator::PerComponent;
  const auto band = experiments::entropy_band(cfg.mixture, cfg.model.hypotheses, cfg.train.seq_len,
                                              cfg.bounds.mc_samples, cfg.seeds.front(), cfg.bounds.estimator);
  experiments::write_snapshot(cfg.output_dir, cfg);
  std::ostringstream csv;
  experiments::write_band_csv(csv, band);
  open_out(cfg.output_dir / "bounds.csv") << csv.str();
  out << csv.str();
  return kSuccess;
}

int cmd_train(const Common& c, std::optional<std::uint64_t> seed, bool parallel, std::ostream& out) {
  auto cfg = resolve(c);
  if (seed) cfg.seeds = {*seed};
  experiments::write_snapshot(cfg.output_dir, cfg);
  std::vector<std::string> errors(cfg.seeds.size());
  std::vector<double> finals(cfg.seeds.size());
  auto one = [&](std::size_t i) {
    try {
      const auto res = experiments::train_and_save(cfg, cfg.model, cfg.seeds[i],
                                                   cfg.output_dir / ("seed_" + std::to_string(cfg.seeds[i])));
      finals[i] = res.record.rows.back().val_loss;
    } catch (const DivergenceError& e) {
      errors[i] = e.what();
    }
  };
  if (parallel) {
    std::vector<std::thread> workers;
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) workers.emplace_back(one, i);
    for (auto& w : workers) w.join();
  } else {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) one(i);
  }
  bool diverged = false;
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    if (errors[i].empty()) {
      out << "seed " << cfg.seeds[i] << " final val loss/token " << finals[i] << '\n';
    } else {
      out << "seed " << cfg.seeds[i] << " diverged: " << errors[i] << '\n';
      diverged = true;
    }
  }
  return diverged ? kDivergence : kSuccess;
}

struct DecodeFlags {
  std::string ckpt, output;
  std::optional<std::string> strategy;
  std::optional<std::size_t> beam, groups, topk, n;
  std::optional<double> lambda, topp, typical, rep_penalty, temperature;
  std::optional<std::uint64_t> seed;
};

int cmd_decode(const Common& c, const DecodeFlags& f, std::ostream& out, std::ostream& err) {
  auto cfg = resolve(c);
  auto& d = cfg.decode;
  if (f.strategy) d.strategy = decode::parse_strategy(*f.strategy);
  if (f.beam) d.beam_size = *f.beam;
  if (f.groups) d.dbs_groups = *f.groups;
  if (f.lambda) d.dbs_lambda = *f.lambda;
  if (f.topk) d.top_k = *f.topk;
  if (f.topp) d.top_p = *f.topp;
  if (f.typical) d.typical_tau = *f.typical;
  if (f.rep_penalty) d.repetition_penalty = *f.rep_penalty;
  if (f.temperature) d.temperature = *f.temperature;
  if (f.seed) d.seed = *f.seed;
  d.validate();
  const auto model = model::load_checkpoint(f.ckpt);
  decode::TransformerLM lm(model);
  const std::size_t n = f.n ? *f.n : cfg.eval.n_candidates;
  const auto set = decode::decode_all(lm, n, d);
  std::ostringstream records;
  decode::write_candidates(records, set);
  if (f.output.empty()) {
    out << records.str();
  } else {
    open_out(f.output) << records.str();
  }
  err << "forwards " << set.forwards << " of budget " << set.forward_budget << '\n';
  return kSuccess;
}

int cmd_eval(const Common& c, const std::string& ckpt, std::string run_id, std::ostream& out) {
  const auto cfg = resolve(c);
  const auto model = model::load_checkpoint(ckpt);
  if (run_id.empty()) {
    const fs::path p(ckpt);
    run_id = p.has_parent_path() ? p.parent_path().filename().string() : p.stem().string();
  }
  const auto report = experiments::evaluate_checkpoint(cfg, model, run_id);
  std::ostringstream csv;
  experiments::write_metrics_csv(csv, report);
  open_out(cfg.output_dir / "metrics.csv") << csv.str();
  out << csv.str();
  return kSuccess;
}

int cmd_reproduce(const Common& c, const std::string& variant, bool parallel, std::ostream& out, std::ostream& err) {
  auto cfg = resolve(c);
  if (variant == "fig5") {
    cfg.mixture = config::fig5_mixture();
  } else if (variant != "fig1") {
    throw InputError("reproduce-fig1: --variant must be fig1 or fig5");
  }
  const auto report = experiments::reproduce_fig1(cfg, parallel, [&](const std::string& m) { err << m << std::endl; });
  out << "band per token: lower " << report.mcl_band.lower << " upper " << report.mcl_band.upper << " H(x) "
      << report.mle_band.h_x << '\n';
  for (const auto& ch : report.checks) out << (ch.passed ? "PASS " : "FAIL ") << ch.name << ": " << ch.detail << '\n';
  for (const auto& s : report.seeds) {
    if (s.failed) return kDivergence;
  }
  return report.passed() ? kSuccess : kAcceptanceFailure;
}

}  // namespace

int main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multiple choice learning on Markov chain mixtures", "mclseq"};
  app.require_subcommand(1);

  Common bounds_c, train_c, decode_c, eval_c, repro_c;
  auto* bounds = app.add_subcommand("bounds", "Entropy band of the configured mixture");
  add_common(bounds, bounds_c);
  bool per_component = false;
  bounds->add_flag("--per-component", per_component,
                   "Score each sample against its own component (estimates H(x|z) instead of H(x))");

  auto* train_cmd = app.add_subcommand("train", "Train one model per seed");
  add_common(train_cmd, train_c);
  std::optional<std::uint64_t> train_seed;
  bool train_parallel = false;
  train_cmd->add_option("--seed", train_seed, "Train this seed only");
  train_cmd->add_flag("--parallel-seeds", train_parallel, "Run seeds concurrently");

  auto* decode_cmd = app.add_subcommand("decode", "Decode candidates from a checkpoint");
  add_common(decode_cmd, decode_c);
  DecodeFlags df;
  decode_cmd->add_option("--ckpt", df.ckpt, "Checkpoint file")->required();
  decode_cmd->add_option("--strategy", df.strategy, "greedy, beam, dbs, top_k, top_p or typical");
  decode_cmd->add_option("--beam", df.beam, "Total beam budget B");
  decode_cmd->add_option("--groups", df.groups, "Diverse beam search groups");
  decode_cmd->add_option("--lambda", df.lambda, "Diversity penalty");
  decode_cmd->add_option("--topk", df.topk, "Top-k cutoff");
  decode_cmd->add_option("--topp", df.topp, "Nucleus mass");
  decode_cmd->add_option("--typical", df.typical, "Typical sampling mass");
  decode_cmd->add_option("--rep-penalty", df.rep_penalty, "Repetition penalty");
  decode_cmd->add_option("--temperature", df.temperature, "Softmax temperature");
  decode_cmd->add_option("--n", df.n, "Number of candidates");
  decode_cmd->add_option("--seed", df.seed, "Sampling seed");
  decode_cmd->add_option("--output", df.output, "Write records here instead of stdout");

  auto* eval_cmd = app.add_subcommand("eval", "Oracle NLL, diversity and recovery of a checkpoint");
  add_common(eval_cmd, eval_c);
  std::string eval_ckpt, run_id;
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--run-id", run_id, "Run identifier (default: checkpoint directory name)");

  auto* repro = app.add_subcommand("reproduce-fig1", "MLE vs MCL on a two-chain mixture across seeds");
  add_common(repro, repro_c);
  std::string variant = "fig1";
  bool repro_parallel = false;
  repro->add_option("--variant", variant, "fig1 or fig5 mixture");
  repro->add_flag("--parallel-seeds", repro_parallel, "Run seeds concurrently");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kConfigError;
  }

  try {
    if (*bounds) return cmd_bounds(bounds_c, per_component, out);
    if (*train_cmd) return cmd_train(train_c, train_seed, train_parallel, out);
    if (*decode_cmd) return cmd_decode(decode_c, df, out, err);
    if (*eval_cmd) return cmd_eval(eval_c, eval_ckpt, run_id, out);
    if (*repro) return cmd_reproduce(repro_c, variant, repro_parallel, out, err);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kDivergence;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}

}  // namespace mclseq::cli
