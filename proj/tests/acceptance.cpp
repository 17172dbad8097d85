// Runs every acceptance criterion and prints one PASS/FAIL line for each.
// Exits 0 once all criteria have been evaluated; with --strict, exits 4 if
// any criterion failed.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "mclseq/cli.hpp"
#include "mclseq/config.hpp"
#include "mclseq/decode.hpp"
#include "mclseq/experiments.hpp"
#include "mclseq/format.hpp"
#include "mclseq/metrics.hpp"
#include "model_oracles.hpp"

namespace {

namespace fs = std::filesystem;
using namespace mclseq;
using mclseq::format_double;

struct Outcome {
  std::string id;
  bool passed = false;
};
std::vector<Outcome> g_outcomes;

void report(const std::string& id, const std::string& title, bool passed, const std::string& detail) {
  std::cout << (passed ? "PASS" : "FAIL") << " criterion " << id << " " << title << ": " << detail << std::endl;
  g_outcomes.push_back({id, passed});
}

void log(const std::string& msg) { std::cerr << "[acceptance] " << msg << std::endl; }

const experiments::Check& check(const experiments::MixtureReport& r, const std::string& name) {
  for (const auto& c : r.checks) {
    if (c.name == name) return c;
  }
  throw std::logic_error("missing check " + name);
}

double slowest_seed(const experiments::MixtureReport& r) {
  double s = 0;
  for (const auto& o : r.seeds) s = std::max(s, o.seconds);
  return s;
}

// Criteria 1-4 -----------------------------------------------------------------

constexpr double kSeedBudgetSeconds = 15 * 60;

experiments::MixtureReport run_mixture(const markov::MixtureSpec& mix, const fs::path& out) {
  auto cfg = config::default_config();
  cfg.mixture = mix;
  cfg.output_dir = out;
  return experiments::reproduce_fig1(cfg, false, log);
}

void mixture_criteria(const experiments::MixtureReport& r, const std::string& prefix) {
  const auto& done = check(r, "seeds_completed");
  const auto& band = check(r, "mcl_in_band");
  const double slowest = slowest_seed(r);
  const bool fast = slowest <= kSeedBudgetSeconds;
  report(prefix + "1", "MCL final loss inside the entropy band", done.passed && band.passed && fast,
         "band [" + format_double(r.mcl_band.lower) + ", " + format_double(r.mcl_band.upper) + "] per token; " +
             band.detail + " slowest seed " + format_double(std::round(slowest)) + " s");
  const auto& plateau = check(r, "mle_plateau");
  const auto& sep = check(r, "mle_mcl_separation");
  report(prefix + "2", "MLE plateau at H(x) and separation from MCL", plateau.passed && sep.passed,
         "plateau " + std::string(plateau.passed ? "ok" : "not met") + " (" + plateau.detail + "); separation " +
             std::string(sep.passed ? "ok" : "not met") + " (" + sep.detail + ")");
  const auto& mcl = check(r, "mcl_recovery");
  const auto& mle = check(r, "mle_recovery");
  report(prefix + "3", "Mode recovery (MCL components, MLE average matrix)", mcl.passed && mle.passed,
         mcl.detail + " MLE " + mle.detail);
}

// Criterion 5 and the diversity check ----------------------------------------------

struct SweepResult {
  std::map<std::size_t, double> oracle;
  std::map<std::size_t, model::Model> models;
};

SweepResult hypothesis_sweep(const fs::path& out) {
  auto cfg = config::default_config();
  cfg.mixture = config::three_chain_mixture();
  cfg.model.vocab_size = 3;
  cfg.model.lora_rank = 16;
  cfg.model.lora_alpha = 16;
  cfg.train.val_every = cfg.train.total_steps;
  cfg.output_dir = out;
  const auto test = markov::sample_batch(cfg.mixture, cfg.eval.test_size, cfg.train.seq_len, 9001);
  SweepResult res;
  for (std::size_t K : {1u, 2u, 3u, 5u}) {
    auto mc = cfg.model;
    mc.hypotheses = K;
    log("three-chain mixture, K=" + std::to_string(K));
    auto run = experiments::train_and_save(cfg, mc, 0, out / ("K" + std::to_string(K)));
    res.oracle[K] = metrics::oracle_nll(run.model, test);
    res.models.emplace(K, std::move(run.model));
  }
  return res;
}

void criterion5(const SweepResult& s) {
  const double h_x = experiments::entropy_band(config::three_chain_mixture(), 1, 32, 50000, 5).h_x;
  bool monotone = true;
  std::string detail;
  double prev = 1e300;
  for (const auto& [K, v] : s.oracle) {
    monotone = monotone && v <= prev;
    prev = v;
    detail += "K=" + std::to_string(K) + " " + format_double(v) + "; ";
  }
  const double gain = s.oracle.at(1) - s.oracle.at(3);
  report("5", "Oracle NLL non-increasing in K, K=1 to K=3 gain >= 0.01", monotone && gain >= 0.01,
         detail + "gain " + format_double(gain) + "; H(x) per token " + format_double(h_x));
}

void diversity_check(const SweepResult& s) {
  const decode::TransformerLM mle(s.models.at(1)), mcl(s.models.at(3));
  double mle_sum = 0, mcl_sum = 0;
  bool same_budget = true;
  for (int prompt = 0; prompt < 3; ++prompt) {
    decode::DecodeConfig greedy;
    greedy.prompt = {prompt};
    decode::DecodeConfig beam = greedy;
    beam.strategy = decode::Strategy::Beam;
    beam.beam_size = 3;
    const auto a = decode::decode_all(mcl, 3, greedy);
    const auto b = decode::decode_all(mle, 3, beam);
    same_budget = same_budget && a.forward_budget == b.forward_budget;
    auto seqs = [](const decode::CandidateSet& set) {
      std::vector<metrics::Sequence> out;
      for (const auto& c : set.candidates) out.push_back(c.tokens);
      return out;
    };
    mcl_sum += *metrics::self_bleu(seqs(a));
    mle_sum += *metrics::self_bleu(seqs(b));
  }
  const double mcl_m = mcl_sum / 3, mle_m = mle_sum / 3;
  report("D", "MCL greedy mBLEU-4 below MLE beam by >= 0.1 at equal budget",
         same_budget && mle_m - mcl_m >= 0.1,
         "MCL " + format_double(mcl_m) + " MLE " + format_double(mle_m) + (same_budget ? "" : " (budgets differ)"));
}

// Criterion 6 ----------------------------------------------------------------------------

void criterion6() {
  Rng rng(606);
  double worst = 0;
  const std::vector<model::Site> all{model::Site::Query, model::Site::Key, model::Site::Value,
                                     model::Site::Output, model::Site::FfnUp, model::Site::FfnDown};
  for (int trial = 0; trial < 100; ++trial) {
    model::ModelConfig c;
    c.vocab_size = 2 + rng.below(4);
    c.heads = 1 + rng.below(3);
    c.hidden = c.heads * (4 + rng.below(5));
    c.layers = 1 + rng.below(2);
    c.window = 1 + rng.below(6);
    c.max_len = 12;
    c.lora_rank = 1 + rng.below(6);
    c.lora_alpha = 1.0 + 7.0 * rng.uniform();
    c.hypotheses = 1 + rng.below(5);
    c.adapter_sites.clear();
    for (auto s : all) {
      if (rng.uniform() < 0.6) c.adapter_sites.push_back(s);
    }
    if (c.adapter_sites.empty()) c.adapter_sites.push_back(model::Site::Value);
    auto m = model::init(c, rng.next());
    m.base.for_each([&](const std::string& n, ad::Tensor& t) {
      if (n.find("gain") == std::string::npos && n.find("bias") == std::string::npos) {
        for (auto& v : t.values()) v *= 10;
      }
    });
    testing_util::randomize_adapters(m, rng.next(), 0.2);
    const std::size_t b = 1 + rng.below(3), T = 1 + rng.below(12);
    std::vector<int> tokens(b * T);
    for (auto& t : tokens) t = static_cast<int>(rng.below(c.vocab_size));
    ad::Tape tape;
    const auto base = model::bind(tape, m.base, false);
    const auto bank = model::bind(tape, m.bank, false);
    const auto grouped = model::grouped_forward(c, base, bank, tokens, b, T).value();
    const std::size_t per = b * T * c.vocab_size;
    for (std::size_t k = 0; k < c.hypotheses; ++k) {
      const auto single = model::forward_hypothesis(c, base, bank, k, tokens, b, T).value();
      for (std::size_t i = 0; i < per; ++i) worst = std::max(worst, std::abs(grouped[k * per + i] - single[i]));
    }
  }
  report("6", "Grouped forward equals per-hypothesis forward", worst <= 1e-10,
         "max abs logit difference " + format_double(worst) + " over 100 configurations");
}

// Criterion 7 ----------------------------------------------------------------------------

void criterion7() {
  auto m = model::init(config::default_config().model, 77);
  testing_util::randomize_adapters(m, 78, 0.05);
  Rng rng(79);
  std::vector<int> tokens(2 * 32);
  for (auto& t : tokens) t = static_cast<int>(rng.below(2));
  const auto r = testing_util::model_gradcheck(m, tokens, 2, 32, 200, 80);
  report("7", "Finite-difference gradient check of the full toy model", r.checked >= 200 && r.max_rel_error <= 1e-4,
         std::to_string(r.checked) + " parameters, max relative error " + format_double(r.max_rel_error));
}

// Criterion 8 ----------------------------------------------------------------------------

void criterion8() {
  const auto mix = config::fig1_mixture();
  const std::size_t T = 8;
  std::vector<std::vector<double>> pi;
  for (const auto& P : mix.components) pi.push_back(markov::stationary(P).probs);
  double h_seq = 0, h_first = 0;
  std::vector<double> first(2, 0.0);
  std::vector<double> hz(mix.num_components(), 0.0);
  for (unsigned mask = 0; mask < (1u << T); ++mask) {
    double p = 0;
    for (std::size_t k = 0; k < mix.num_components(); ++k) {
      double pk = pi[k][mask & 1];
      for (std::size_t t = 1; t < T; ++t) pk *= mix.components[k]((mask >> (t - 1)) & 1, (mask >> t) & 1);
      p += mix.weights[k] * pk;
      // Per-component H(x_2..T | x_1, z=k) by enumeration.
      if (pk > 0) {
        double cond = 1.0;
        for (std::size_t t = 1; t < T; ++t) cond *= mix.components[k]((mask >> (t - 1)) & 1, (mask >> t) & 1);
        if (cond > 0) hz[k] -= pk * std::log(cond);
      }
    }
    first[mask & 1] += p;
    if (p > 0) h_seq -= p * std::log(p);
  }
  for (double f : first) h_first -= f * std::log(f);
  const double exact = h_seq - h_first;
  const auto mc = markov::marginal_entropy_mc(mix, T, 50000, 808);
  const double z = std::abs(mc.estimate - exact) / mc.std_error;
  double hz_mix = 0;
  for (std::size_t k = 0; k < hz.size(); ++k) hz_mix += mix.weights[k] * hz[k];
  const double cond_err = std::abs(markov::conditional_entropy(mix, T) - hz_mix);
  report("8", "Entropy oracles by exhaustive enumeration (T=8)", z <= 3 && cond_err <= 1e-10,
         "H(x) exact " + format_double(exact) + " MC " + format_double(mc.estimate) + " (" + format_double(z) +
             " stderr); H(x|z) error " + format_double(cond_err));
}

// Criterion 9 ----------------------------------------------------------------------------

void criterion9() {
  Rng rng(909);
  bool beam_greedy = true, dbs_beam = true, exhaustive = true;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> rows(2, std::vector<double>(2));
    for (auto& r : rows) {
      r[0] = 0.05 + 0.9 * rng.uniform();
      r[1] = 1 - r[0];
    }
    const auto P = markov::TransitionMatrix::from_rows(rows);
    const decode::MarkovChainLM lm({P});
    decode::DecodeConfig c;
    c.max_len = 6;
    c.repetition_penalty = 1.0;
    const auto g = decode::greedy(lm, 0, c);
    const auto b1 = decode::beam(lm, 0, 1, c);
    beam_greedy = beam_greedy && b1[0].tokens == g.tokens && b1[0].score == g.score;
    const auto b4 = decode::beam(lm, 0, 4, c);
    const auto d4 = decode::diverse_beam(lm, 0, 1, 4, 2.0, c);
    for (std::size_t i = 0; i < b4.size(); ++i) dbs_beam = dbs_beam && b4[i].tokens == d4[i].tokens;
    // Exhaustive argmax over the 2^5 continuations.
    double best = -1e300;
    std::vector<int> arg;
    for (int mask = 0; mask < 32; ++mask) {
      std::vector<int> seq{0};
      double s = 0;
      for (int t = 0; t < 5; ++t) {
        const int next = (mask >> (4 - t)) & 1;
        s += std::log(P(static_cast<std::size_t>(seq.back()), static_cast<std::size_t>(next)));
        seq.push_back(next);
      }
      if (s > best + 1e-12) best = s, arg = seq;
    }
    const auto full = decode::beam(lm, 0, 32, c);
    exhaustive = exhaustive && full[0].tokens == arg && std::abs(full[0].score - best) < 1e-12;
  }
  const auto U = markov::TransitionMatrix::from_rows(std::vector<std::vector<double>>(4, std::vector<double>(4, 0.25)));
  const decode::MarkovChainLM uniform({U});
  decode::DecodeConfig c;
  c.strategy = decode::Strategy::TopK;
  c.top_k = 4;
  c.max_len = 2;
  c.repetition_penalty = 1.0;
  const std::size_t n = 100000;
  std::vector<double> freq(4, 0.0);
  for (std::size_t i = 0; i < n; ++i) freq[static_cast<std::size_t>(decode::sample(uniform, 0, c, i).tokens[1])] += 1.0 / n;
  const double se = std::sqrt(0.25 * 0.75 / n);
  double worst = 0;
  for (double f : freq) worst = std::max(worst, std::abs(f - 0.25) / se);
  report("9", "Decoding degeneracies", beam_greedy && dbs_beam && exhaustive && worst <= 3,
         std::string("beam(1)=greedy ") + (beam_greedy ? "yes" : "no") + ", DBS(G=1)=beam " + (dbs_beam ? "yes" : "no") +
             ", beam(32)=exhaustive " + (exhaustive ? "yes" : "no") + ", top-k uniform max deviation " +
             format_double(worst) + " stderr");
}

// Criterion 10 ---------------------------------------------------------------------------

void criterion10() {
  using metrics::Sequence;
  std::vector<std::string> failed;
  auto expect = [&](const std::string& name, double got, double want) {
    if (got != want) failed.push_back(name + " got " + format_double(got));
  };
  const std::vector<Sequence> hand{{0, 1, 0, 1}, {1, 0, 1, 0}};
  expect("div2 hand set", metrics::div_n(hand, 2), 2.0 / 6.0);
  const Sequence s{0, 1, 2, 3, 4, 5};
  expect("div2 identical", metrics::div_n(std::vector<Sequence>(4, s), 2), 5.0 / 20.0);
  expect("div2 unique", metrics::div_n(std::vector<Sequence>{{0, 1, 2}, {3, 4, 5}}, 2), 1.0);
  expect("bleu identical", metrics::bleu(s, std::vector<Sequence>{s}), 1.0);
  expect("bleu disjoint", metrics::bleu(s, std::vector<Sequence>{{6, 7, 8, 9, 10, 11}}), 0.0);
  expect("self-bleu identical", *metrics::self_bleu(std::vector<Sequence>(3, s)), 1.0);
  expect("self-bleu disjoint", *metrics::self_bleu(std::vector<Sequence>{{0, 0, 0, 0}, {1, 1, 1, 1}, {2, 2, 2, 2}}), 0.0);
  const std::vector<Sequence> three{{0, 1, 2, 3, 4}, {0, 1, 2, 5, 6}, {7, 1, 2, 3, 8}};
  const std::vector<Sequence> others{three[1], three[2]};
  const std::size_t matched[] = {4, 3, 2, 0}, total[] = {5, 4, 3, 2};
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto p = metrics::modified_precision(three[0], others, n);
    if (p.matched != matched[n - 1] || p.total != total[n - 1]) failed.push_back("clipped precision n=" + std::to_string(n));
  }
  const Sequence the(7, 0);
  const auto p = metrics::modified_precision(the, std::vector<Sequence>{{0, 1, 2, 0, 3, 4}}, 1);
  if (p.matched != 2 || p.total != 7) failed.push_back("clipped unigram 2/7");
  const std::vector<markov::TransitionMatrix> refs{markov::two_state_matrix(0.2, 0.9), markov::two_state_matrix(0.8, 0.25)};
  const std::vector<markov::TransitionMatrix> swapped{refs[1], refs[0]};
  expect("recovery permuted", metrics::recovery_error(swapped, refs).max_error, 0.0);
  std::string detail = failed.empty() ? "all goldens exact" : "";
  for (const auto& f : failed) detail += f + "; ";
  report("10", "Diversity metric goldens", failed.empty(), detail);
}

// Criterion 11 ---------------------------------------------------------------------------

int cli_run(std::vector<std::string> args) {
  args.insert(args.begin(), "mclseq");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  return cli::main(static_cast<int>(argv.size()), argv.data(), out, err);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void criterion11(const fs::path& root) {
  fs::remove_all(root);
  fs::create_directories(root);
  const auto cfg = root / "tiny.cfg";
  std::ofstream(cfg) << "model.hidden=16\nmodel.layers=1\nmodel.max_len=12\nmodel.lora_rank=4\nmodel.lora_alpha=4\n"
                        "train.batch_size=16\ntrain.total_steps=20\ntrain.val_every=5\ntrain.val_size=64\n"
                        "train.seq_len=12\ntrain.lr_max=0.01\ndecode.max_len=12\nbounds.mc_samples=2000\n"
                        "eval.recovery_samples=100\neval.test_size=64\neval.n_candidates=4\nseeds=0,1\n";
  std::vector<std::string> problems;
  std::size_t compared = 0;
  for (const char* rep : {"a", "b"}) {
    const fs::path out = root / rep;
    const std::vector<std::string> common{"--config", cfg.string(), "--out", out.string()};
    auto with = [&](std::vector<std::string> a) {
      a.insert(a.end(), common.begin(), common.end());
      return a;
    };
    auto run = [&](const std::vector<std::string>& a, bool allow_criteria_fail = false) {
      const int code = cli_run(a);
      if (code != 0 && !(allow_criteria_fail && code == 4)) problems.push_back(a[0] + " exit " + std::to_string(code));
    };
    run(with({"bounds"}));
    run(with({"train"}));
    const auto ckpt = (out / "seed_0" / "final.ckpt").string();
    run(with({"decode", "--ckpt", ckpt, "--strategy", "dbs", "--beam", "4", "--groups", "2", "--lambda", "0.5",
                  "--output", (out / "dbs.tsv").string()}));
    run(with({"decode", "--ckpt", ckpt, "--strategy", "typical", "--n", "6", "--output",
                  (out / "typical.tsv").string()}));
    run(with({"eval", "--ckpt", ckpt, "--run-id", "tiny"}));
    std::vector<std::string> rc{"reproduce-fig1", "--config", cfg.string(), "--out", (out / "repro").string()};
    run(rc, true);
  }
  for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension();
    if (ext != ".csv" && ext != ".tsv" && ext != ".ckpt" && ext != ".sha1") continue;
    const auto rel = fs::relative(entry.path(), root / "a");
    ++compared;
    if (slurp(entry.path()) != slurp(root / "b" / rel)) problems.push_back(rel.string());
  }
  std::string detail = std::to_string(compared) + " files compared";
  for (const auto& p : problems) detail += "; differs: " + p;
  report("11", "Re-runs produce byte-identical outputs", problems.empty() && compared >= 15, detail);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string out = "acceptance_runs";
  if (const char* env = std::getenv("MCL_SEQ_OUT"); env && *env) out = env;
  bool strict = false;
  std::vector<std::string> only;
  app.add_option("--out", out, "Working directory for runs");
  app.add_flag("--strict", strict, "Exit 4 if any criterion fails");
  app.add_option("--only", only, "Run only these groups: fig1, fig5, sweep, unit")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  auto want = [&](const std::string& g) { return only.empty() || std::find(only.begin(), only.end(), g) != only.end(); };
  const fs::path root = out;

  try {
    const auto t0 = std::chrono::steady_clock::now();
    if (want("unit")) {
      criterion6();
      criterion7();
      criterion8();
      criterion9();
      criterion10();
      criterion11(root / "determinism");
    }
    if (want("fig1")) mixture_criteria(run_mixture(config::fig1_mixture(), root / "fig1"), "");
    if (want("fig5")) {
      const auto r = run_mixture(config::fig5_mixture(), root / "fig5");
      bool all = slowest_seed(r) <= kSeedBudgetSeconds;
      std::string detail = "band [" + format_double(r.mcl_band.lower) + ", " + format_double(r.mcl_band.upper) +
                           "], Pbar " + format_double(r.pbar(0, 0)) + "," + format_double(r.pbar(0, 1)) + "/" +
                           format_double(r.pbar(1, 0)) + "," + format_double(r.pbar(1, 1)) + ";";
      for (const auto& c : r.checks) {
        all = all && c.passed;
        detail += " " + c.name + (c.passed ? " ok" : " FAILED") + " (" + c.detail + ")";
      }
      report("4", "Second mixture passes criteria 1-3", all, detail);
    }
    if (want("sweep")) {
      const auto sweep = hypothesis_sweep(root / "sweep");
      criterion5(sweep);
      diversity_check(sweep);
    }
    const double mins = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60;
    log("finished in " + format_double(std::round(mins * 10) / 10) + " min");
  } catch (const std::exception& e) {
    std::cout << "FAIL acceptance aborted: " << e.what() << std::endl;
    return 1;
  }
  std::size_t passed = 0;
  for (const auto& o : g_outcomes) passed += o.passed;
  std::cout << passed << "/" << g_outcomes.size() << " criteria passed" << std::endl;
  return strict && passed != g_outcomes.size() ? 4 : 0;
}
