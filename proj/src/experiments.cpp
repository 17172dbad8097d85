#include "mclseq/experiments.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "mclseq/errors.hpp"
#include "mclseq/format.hpp"
#include "mclseq/rng.hpp"

namespace mclseq::experiments {
namespace {

namespace fs = std::filesystem;

// Tolerances of the MLE/MCL comparison.
constexpr double kBandSlackBelow = 0.01;
constexpr double kBandSlackAbove = 0.03;
constexpr double kPlateauTolerance = 0.03;
constexpr double kSeparation = 0.05;
constexpr double kRecoveryTolerance = 0.05;

// Sub-streams of a seed.
constexpr std::uint64_t kBandStream = 100;
constexpr std::uint64_t kRecoveryStream = 11;
constexpr std::uint64_t kTestStream = 12;

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  return os;
}

double final_val(const train::RunRecord& r) { return r.rows.back().val_loss; }

std::vector<markov::TransitionMatrix> recover(const model::Model& m, const config::ExperimentConfig& cfg,
                                              std::uint64_t seed) {
  const auto init = initial_distribution(cfg.mixture);
  std::vector<markov::TransitionMatrix> out;
  for (std::size_t k = 0; k < m.bank.hypotheses; ++k) {
    out.push_back(model::predicted_transition_matrix(m, k, cfg.eval.recovery_samples, cfg.train.seq_len,
                                                     derive_seed(derive_seed(seed, kRecoveryStream), k), init)
                      .matrix);
  }
  return out;
}

void write_matrix_rows(std::ostream& os, const std::string& prefix, const markov::TransitionMatrix& P) {
  for (std::size_t i = 0; i < P.size(); ++i) {
    for (std::size_t j = 0; j < P.size(); ++j) os << prefix << i << ',' << j << ',' << format_double(P(i, j)) << '\n';
  }
}

std::string seed_name(std::uint64_t s) { return "seed_" + std::to_string(s); }

}  // namespace

Band entropy_band(const markov::MixtureSpec& mix, std::size_t hypotheses, std::size_t length, std::size_t mc_samples,
                  std::uint64_t seed, markov::EntropyEstimator estimator) {
  if (hypotheses < 1) throw DomainError("entropy_band: need at least one hypothesis");
  if (length < 2) throw DomainError("entropy_band: length must be at least 2");
  const double per = 1.0 / static_cast<double>(length - 1);
  const auto hx = markov::marginal_entropy_mc(mix, length, mc_samples, seed, estimator);
  Band b;
  b.hypotheses = hypotheses;
  b.h_x = hx.estimate * per;
  b.h_x_std_error = hx.std_error * per;
  if (hypotheses == 1) {
    b.lower = b.upper = b.h_x;
    return b;
  }
  b.lower = b.h_x - std::log(static_cast<double>(hypotheses)) * per;
  b.upper = hypotheses >= mix.num_components() ? markov::conditional_entropy(mix, length) * per : b.h_x;
  const double slack = 3.0 * b.h_x_std_error + 1e-9;
  if (b.lower > b.upper + slack || b.upper > b.h_x + slack) {
    std::ostringstream os;
    os << "entropy_band: ordering violated: lower " << b.lower << ", upper " << b.upper << ", H(x) " << b.h_x;
    throw ConsistencyError(os.str());
  }
  return b;
}

void write_band_csv(std::ostream& os, const Band& b) {
  os << "quantity,value,stderr\n";
  os << "hypotheses," << b.hypotheses << ",0\n";
  os << "h_x_per_token," << format_double(b.h_x) << ',' << format_double(b.h_x_std_error) << '\n';
  os << "lower_per_token," << format_double(b.lower) << ',' << format_double(b.h_x_std_error) << '\n';
  os << "upper_per_token," << format_double(b.upper) << ",0\n";
  os << "ordered," << (b.lower <= b.upper + 3 * b.h_x_std_error + 1e-9 && b.upper <= b.h_x + 3 * b.h_x_std_error + 1e-9)
     << ",0\n";
}

std::vector<double> initial_distribution(const markov::MixtureSpec& mix) {
  std::vector<double> out(mix.vocab_size(), 0.0);
  for (std::size_t k = 0; k < mix.num_components(); ++k) {
    const auto pi = markov::stationary(mix.components[k]);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += mix.weights[k] * pi.probs[i];
  }
  return out;
}

void write_snapshot(const fs::path& dir, const config::ExperimentConfig& cfg) {
  fs::create_directories(dir);
  // The output location is not part of the experiment.
  std::istringstream all(config::to_string(cfg));
  std::string text;
  for (std::string line; std::getline(all, line);) {
    if (line.rfind("output_dir=", 0) != 0) text += line + '\n';
  }
  open_out(dir / "config.txt") << text;
  open_out(dir / "config.sha1") << config::git_blob_hash(text) << '\n';
}

train::RunResult train_and_save(const config::ExperimentConfig& cfg, const model::ModelConfig& model_config,
                                std::uint64_t seed, const fs::path& dir, const train::ProgressFn& progress) {
  train::TrainConfig tc = cfg.train;
  tc.seed = seed;
  if (model_config.hypotheses == 1) tc.epsilon = 0.0;
  auto result = train::run(model::init(model_config, seed), cfg.mixture, tc, progress);
  if (!dir.empty()) {
    fs::create_directories(dir);
    auto run_csv = open_out(dir / "run.csv");
    train::write_run_csv(run_csv, result.record);
    auto steps_csv = open_out(dir / "steps.csv");
    train::write_step_log_csv(steps_csv, result.record);
    model::save_checkpoint(dir / "final.ckpt", result.model);
  }
  return result;
}

model::ModelConfig mle_counterpart(const model::ModelConfig& mcl) {
  model::ModelConfig m = mcl;
  m.hypotheses = 1;
  m.lora_rank = mcl.lora_rank * mcl.hypotheses;
  m.lora_alpha = mcl.lora_scale() * static_cast<double>(m.lora_rank);
  return m;
}

bool MixtureReport::passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

MixtureReport reproduce_fig1(const config::ExperimentConfig& cfg, bool parallel_seeds, const LogFn& log) {
  cfg.validate();
  const fs::path out = cfg.output_dir;
  write_snapshot(out, cfg);
  std::mutex log_mutex;
  auto say = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    log(msg);
  };

  MixtureReport report;
  const std::size_t T = cfg.train.seq_len;
  const std::uint64_t band_seed = derive_seed(cfg.seeds.front(), kBandStream);
  const model::ModelConfig mcl_cfg = cfg.model;
  const model::ModelConfig mle_cfg = mle_counterpart(mcl_cfg);
  report.mcl_band = entropy_band(cfg.mixture, mcl_cfg.hypotheses, T, cfg.bounds.mc_samples, band_seed, cfg.bounds.estimator);
  report.mle_band = entropy_band(cfg.mixture, 1, T, cfg.bounds.mc_samples, band_seed, cfg.bounds.estimator);
  const bool uniform_weights = std::all_of(cfg.mixture.weights.begin(), cfg.mixture.weights.end(), [&](double w) {
    return std::abs(w - cfg.mixture.weights.front()) < 1e-12;
  });
  if (!uniform_weights) throw InputError("reproduce-fig1: the mixture weights must be uniform");
  report.pbar = markov::mle_limit_matrix(cfg.mixture);
  {
    auto os = open_out(out / "bounds.csv");
    write_band_csv(os, report.mcl_band);
    auto refs = open_out(out / "references.csv");
    refs << "name,from,to,value\n";
    for (std::size_t k = 0; k < cfg.mixture.num_components(); ++k) {
      write_matrix_rows(refs, "P" + std::to_string(k) + ",", cfg.mixture.components[k]);
    }
    write_matrix_rows(refs, "Pbar,", report.pbar);
  }

  report.seeds.resize(cfg.seeds.size());
  auto run_seed = [&](std::size_t idx) {
    SeedOutcome& o = report.seeds[idx];
    o.seed = cfg.seeds[idx];
    const fs::path dir = out / seed_name(o.seed);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      for (const bool mcl : {false, true}) {
        const std::string tag = mcl ? "mcl" : "mle";
        auto progress = [&](const train::RunRow& r) {
          if (r.step % 100 == 0) {
            say(seed_name(o.seed) + " " + tag + " step " + std::to_string(r.step) + " val " + format_double(r.val_loss));
          }
        };
        auto res = train_and_save(cfg, mcl ? mcl_cfg : mle_cfg, o.seed, dir / tag, progress);
        auto mats = recover(res.model, cfg, o.seed);
        if (mcl) {
          o.mcl = std::move(res.record);
          o.mcl_final = final_val(o.mcl);
          o.mcl_matrices = std::move(mats);
          o.mcl_recovery = metrics::recovery_error(o.mcl_matrices, cfg.mixture.components);
        } else {
          o.mle = std::move(res.record);
          o.mle_final = final_val(o.mle);
          o.mle_matrix = mats.front();
          o.mle_pbar_error = o.mle_matrix.max_abs_diff(report.pbar);
        }
      }
      auto os = open_out(dir / "matrices.csv");
      os << "model,hypothesis,from,to,value\n";
      write_matrix_rows(os, "mle,0,", o.mle_matrix);
      for (std::size_t k = 0; k < o.mcl_matrices.size(); ++k) {
        write_matrix_rows(os, "mcl," + std::to_string(k) + ",", o.mcl_matrices[k]);
      }
    } catch (const DivergenceError& e) {
      o.failed = true;
      o.error = e.what();
      say(seed_name(o.seed) + " diverged: " + o.error);
    }
    o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  if (parallel_seeds) {
    std::vector<std::thread> workers;
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) workers.emplace_back(run_seed, i);
    for (auto& w : workers) w.join();
  } else {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) run_seed(i);
  }

  const Band& band = report.mcl_band;
  const double lo = band.lower - kBandSlackBelow, hi = band.upper + kBandSlackAbove;
  std::size_t in_band = 0, plateau = 0, separated = 0, mcl_rec = 0, mle_rec = 0, ok = 0;
  std::ostringstream finals, recs;
  for (const auto& o : report.seeds) {
    if (o.failed) continue;
    ++ok;
    in_band += o.mcl_final >= lo && o.mcl_final <= hi;
    plateau += std::abs(o.mle_final - report.mle_band.h_x) <= kPlateauTolerance;
    separated += o.mle_final >= o.mcl_final + kSeparation;
    mcl_rec += o.mcl_recovery.max_error <= kRecoveryTolerance;
    mle_rec += o.mle_pbar_error <= kRecoveryTolerance;
    finals << " " << seed_name(o.seed) << ": mle " << format_double(o.mle_final) << " mcl " << format_double(o.mcl_final)
           << ";";
    recs << " " << seed_name(o.seed) << ": mcl " << format_double(o.mcl_recovery.max_error) << " mle "
         << format_double(o.mle_pbar_error) << ";";
  }
  const std::size_t n = report.seeds.size();
  const std::size_t recovery_needed = (2 * n + 2) / 3;
  auto count = [](std::size_t a, std::size_t b) { return std::to_string(a) + "/" + std::to_string(b); };
  report.checks.push_back({"seeds_completed", ok == n, count(ok, n)});
  report.checks.push_back({"mcl_in_band", in_band == n,
                           count(in_band, n) + " in [" + format_double(lo) + ", " + format_double(hi) + "];" + finals.str()});
  report.checks.push_back({"mle_plateau", plateau == n,
                           count(plateau, n) + " within " + format_double(kPlateauTolerance) + " of H(x) " +
                               format_double(report.mle_band.h_x)});
  report.checks.push_back({"mle_mcl_separation", separated == n,
                           count(separated, n) + " with mle >= mcl + " + format_double(kSeparation)});
  report.checks.push_back({"mcl_recovery", mcl_rec >= recovery_needed,
                           count(mcl_rec, n) + " seeds within " + format_double(kRecoveryTolerance) + ";" + recs.str()});
  report.checks.push_back({"mle_recovery", mle_rec == n, count(mle_rec, n) + " seeds within " +
                                                             format_double(kRecoveryTolerance) + " of Pbar"});

  auto seeds_csv = open_out(out / "seeds.csv");
  seeds_csv << "seed,failed,mle_final,mcl_final,mle_pbar_error,mcl_recovery_error";
  for (std::size_t k = 0; k < mcl_cfg.hypotheses; ++k) seeds_csv << ",assign_" << k;
  seeds_csv << '\n';
  for (const auto& o : report.seeds) {
    seeds_csv << o.seed << ',' << o.failed << ',' << format_double(o.mle_final) << ',' << format_double(o.mcl_final) << ','
              << format_double(o.mle_pbar_error) << ',' << format_double(o.mcl_recovery.max_error);
    for (std::size_t k = 0; k < mcl_cfg.hypotheses; ++k) {
      seeds_csv << ',' << (k < o.mcl_recovery.assignment.size() ? std::to_string(o.mcl_recovery.assignment[k]) : "");
    }
    seeds_csv << '\n';
  }
  auto summary = open_out(out / "summary.csv");
  summary << "check,passed,detail\n";
  for (const auto& c : report.checks) summary << c.name << ',' << c.passed << ",\"" << c.detail << "\"\n";
  auto timing = open_out(out / "timing.txt");
  for (const auto& o : report.seeds) timing << seed_name(o.seed) << " seconds " << o.seconds << '\n';
  return report;
}

EvalReport evaluate_checkpoint(const config::ExperimentConfig& cfg, const model::Model& model, const std::string& run_id) {
  if (model.config.vocab_size != cfg.mixture.vocab_size()) {
    throw InputError("eval: checkpoint vocabulary differs from the configured mixture");
  }
  EvalReport r;
  r.run_id = run_id;
  r.hypotheses = model.bank.hypotheses;
  r.epsilon = cfg.train.epsilon;
  r.strategy = cfg.decode.strategy;
  const std::uint64_t seed = cfg.seeds.front();
  const auto test = markov::sample_batch(cfg.mixture, cfg.eval.test_size, cfg.train.seq_len, derive_seed(seed, kTestStream));
  r.oracle_nll = metrics::oracle_nll(model, test);

  decode::TransformerLM lm(model);
  const std::size_t n = cfg.decode.strategy == decode::Strategy::Greedy ? model.bank.hypotheses : cfg.eval.n_candidates;
  const auto set = decode::decode_all(lm, n, cfg.decode);
  std::vector<metrics::Sequence> seqs;
  for (const auto& c : set.candidates) seqs.push_back(c.tokens);
  r.diversity = metrics::diversity(seqs);

  const auto init = initial_distribution(cfg.mixture);
  std::vector<markov::TransitionMatrix> mats;
  for (std::size_t k = 0; k < model.bank.hypotheses; ++k) {
    mats.push_back(model::predicted_transition_matrix(model, k, cfg.eval.recovery_samples, cfg.train.seq_len,
                                                      derive_seed(derive_seed(seed, kRecoveryStream), k), init)
                       .matrix);
  }
  if (mats.size() <= cfg.mixture.num_components()) {
    r.recovery_errors = metrics::recovery_error(mats, cfg.mixture.components).errors;
  } else {
    for (const auto& m : mats) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& ref : cfg.mixture.components) best = std::min(best, m.max_abs_diff(ref));
      r.recovery_errors.push_back(best);
    }
  }
  return r;
}

void write_metrics_csv(std::ostream& os, const EvalReport& r) {
  os << "run_id,K,epsilon,strategy,div1,div2,mbleu4,oracle_nll";
  for (std::size_t k = 0; k < r.recovery_errors.size(); ++k) os << ",recovery_err_" << k;
  os << '\n';
  os << r.run_id << ',' << r.hypotheses << ',' << format_double(r.epsilon) << ',' << decode::strategy_name(r.strategy)
     << ',' << format_double(r.diversity.div1) << ',' << format_double(r.diversity.div2) << ','
     << (r.diversity.mbleu4 ? format_double(*r.diversity.mbleu4) : std::string()) << ','
     << format_double(r.oracle_nll);
  for (double e : r.recovery_errors) os << ',' << format_double(e);
  os << '\n';
}

}  // namespace mclseq::experiments
