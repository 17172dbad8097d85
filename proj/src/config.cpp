#include "mclseq/config.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "mclseq/errors.hpp"
#include "mclseq/format.hpp"

namespace mclseq::config {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(trim(item));
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw InputError("config: cannot parse '" + v + "' for " + key);
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) { return parse_number<double>(key, v); }
std::size_t parse_size(const std::string& key, const std::string& v) {
  if (!v.empty() && v.front() == '-') throw InputError("config: " + key + " must be non-negative");
  return parse_number<std::size_t>(key, v);
}
std::uint64_t parse_u64(const std::string& key, const std::string& v) { return parse_number<std::uint64_t>(key, v); }

std::vector<double> parse_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& item : split(v, ',')) out.push_back(parse_double(key, item));
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F&& fmt) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + fmt(xs[i]);
  return s;
}

std::string fmt_size(std::size_t v) { return std::to_string(v); }
std::string fmt_sites(const std::vector<model::Site>& v) { return model::sites_string(v); }
std::vector<model::Site> parse_sites_value(const std::string&, const std::string& v) { return model::parse_sites(v); }

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string& key, const std::string&)> set;
};

#define MCLSEQ_FIELD(member, fmt, parse) \
  Field { [](const ExperimentConfig& c) { return fmt(c.member); }, \
          [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse(k, v); } }

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"model.hidden", MCLSEQ_FIELD(model.hidden, fmt_size, parse_size)},
      {"model.layers", MCLSEQ_FIELD(model.layers, fmt_size, parse_size)},
      {"model.heads", MCLSEQ_FIELD(model.heads, fmt_size, parse_size)},
      {"model.window", MCLSEQ_FIELD(model.window, fmt_size, parse_size)},
      {"model.max_len", MCLSEQ_FIELD(model.max_len, fmt_size, parse_size)},
      {"model.ffn_mult", MCLSEQ_FIELD(model.ffn_mult, fmt_size, parse_size)},
      {"model.lora_rank", MCLSEQ_FIELD(model.lora_rank, fmt_size, parse_size)},
      {"model.lora_alpha", MCLSEQ_FIELD(model.lora_alpha, format_double, parse_double)},
      {"model.lora_dropout", MCLSEQ_FIELD(model.lora_dropout, format_double, parse_double)},
      {"model.hypotheses", MCLSEQ_FIELD(model.hypotheses, fmt_size, parse_size)},
      {"model.adapter_sites", MCLSEQ_FIELD(model.adapter_sites, fmt_sites, parse_sites_value)},
      {"model.base_seed", MCLSEQ_FIELD(model.base_seed, fmt_size, parse_u64)},
      {"train.lr_max", MCLSEQ_FIELD(train.lr_max, format_double, parse_double)},
      {"train.lr_min", MCLSEQ_FIELD(train.lr_min, format_double, parse_double)},
      {"train.weight_decay", MCLSEQ_FIELD(train.weight_decay, format_double, parse_double)},
      {"train.beta1", MCLSEQ_FIELD(train.beta1, format_double, parse_double)},
      {"train.beta2", MCLSEQ_FIELD(train.beta2, format_double, parse_double)},
      {"train.adam_eps", MCLSEQ_FIELD(train.adam_eps, format_double, parse_double)},
      {"train.batch_size", MCLSEQ_FIELD(train.batch_size, fmt_size, parse_size)},
      {"train.total_steps", MCLSEQ_FIELD(train.total_steps, fmt_size, parse_size)},
      {"train.val_every", MCLSEQ_FIELD(train.val_every, fmt_size, parse_size)},
      {"train.val_size", MCLSEQ_FIELD(train.val_size, fmt_size, parse_size)},
      {"train.seq_len", MCLSEQ_FIELD(train.seq_len, fmt_size, parse_size)},
      {"train.epsilon", MCLSEQ_FIELD(train.epsilon, format_double, parse_double)},
      {"train.grad_clip_norm", MCLSEQ_FIELD(train.grad_clip_norm, format_double, parse_double)},
      {"train.warmup_fraction", MCLSEQ_FIELD(train.warmup_fraction, format_double, parse_double)},
      {"train.divergence_factor", MCLSEQ_FIELD(train.divergence_factor, format_double, parse_double)},
      {"decode.strategy",
       Field{[](const ExperimentConfig& c) { return std::string(decode::strategy_name(c.decode.strategy)); },
             [](ExperimentConfig& c, const std::string&, const std::string& v) {
               c.decode.strategy = decode::parse_strategy(v);
             }}},
      {"decode.beam_size", MCLSEQ_FIELD(decode.beam_size, fmt_size, parse_size)},
      {"decode.groups", MCLSEQ_FIELD(decode.dbs_groups, fmt_size, parse_size)},
      {"decode.lambda", MCLSEQ_FIELD(decode.dbs_lambda, format_double, parse_double)},
      {"decode.top_k", MCLSEQ_FIELD(decode.top_k, fmt_size, parse_size)},
      {"decode.top_p", MCLSEQ_FIELD(decode.top_p, format_double, parse_double)},
      {"decode.typical", MCLSEQ_FIELD(decode.typical_tau, format_double, parse_double)},
      {"decode.repetition_penalty", MCLSEQ_FIELD(decode.repetition_penalty, format_double, parse_double)},
      {"decode.temperature", MCLSEQ_FIELD(decode.temperature, format_double, parse_double)},
      {"decode.max_len", MCLSEQ_FIELD(decode.max_len, fmt_size, parse_size)},
      {"decode.prompt",
       Field{[](const ExperimentConfig& c) { return join(c.decode.prompt, [](int t) { return std::to_string(t); }); },
             [](ExperimentConfig& c, const std::string& k, const std::string& v) {
               c.decode.prompt.clear();
               for (const auto& item : split(v, ',')) c.decode.prompt.push_back(parse_number<int>(k, item));
             }}},
      {"decode.eos",
       Field{[](const ExperimentConfig& c) { return c.decode.eos ? std::to_string(*c.decode.eos) : std::string("none"); },
             [](ExperimentConfig& c, const std::string& k, const std::string& v) {
               if (v == "none") {
                 c.decode.eos.reset();
               } else {
                 c.decode.eos = parse_number<int>(k, v);
               }
             }}},
      {"decode.seed", MCLSEQ_FIELD(decode.seed, fmt_size, parse_u64)},
      {"bounds.mc_samples", MCLSEQ_FIELD(bounds.mc_samples, fmt_size, parse_size)},
      {"bounds.estimator",
       Field{[](const ExperimentConfig& c) {
               return std::string(c.bounds.estimator == markov::EntropyEstimator::MixtureMarginal ? "mixture_marginal"
                                                                                                  : "per_component");
             },
             [](ExperimentConfig& c, const std::string& k, const std::string& v) {
               if (v == "mixture_marginal") {
                 c.bounds.estimator = markov::EntropyEstimator::MixtureMarginal;
               } else if (v == "per_component") {
                 c.bounds.estimator = markov::EntropyEstimator::PerComponent;
               } else {
                 throw InputError("config: " + k + " expects mixture_marginal or per_component");
               }
             }}},
      {"eval.recovery_samples", MCLSEQ_FIELD(eval.recovery_samples, fmt_size, parse_size)},
      {"eval.test_size", MCLSEQ_FIELD(eval.test_size, fmt_size, parse_size)},
      {"eval.n_candidates", MCLSEQ_FIELD(eval.n_candidates, fmt_size, parse_size)},
      {"seeds",
       Field{[](const ExperimentConfig& c) { return join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }); },
             [](ExperimentConfig& c, const std::string& k, const std::string& v) {
               c.seeds.clear();
               for (const auto& item : split(v, ',')) c.seeds.push_back(parse_u64(k, item));
             }}},
      {"output_dir",
       Field{[](const ExperimentConfig& c) { return c.output_dir.string(); },
             [](ExperimentConfig& c, const std::string&, const std::string& v) { c.output_dir = v; }}},
  };
  return table;
}

#undef MCLSEQ_FIELD

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// key=value pairs in file order; `#` starts a comment line.
std::vector<std::pair<std::string, std::string>> assignments(const std::string& text, const std::string& source) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream is(text);
  std::string line;
  for (std::size_t no = 1; std::getline(is, line); ++no) {
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InputError(source + ":" + std::to_string(no) + ": expected key=value, got '" + line + "'");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

/// Applies vocab_size / weights / component.N to a mixture under construction.
struct MixtureBuilder {
  std::size_t vocab = 0;
  std::vector<double> weights;
  std::map<std::size_t, std::vector<double>> components;
  bool touched = false;
  bool weights_given = false;

  static MixtureBuilder from(const markov::MixtureSpec& mix) {
    MixtureBuilder b;
    b.vocab = mix.vocab_size();
    b.weights = mix.weights;
    for (std::size_t k = 0; k < mix.components.size(); ++k) b.components[k] = mix.components[k].entries();
    return b;
  }

  bool apply(const std::string& key, const std::string& value) {
    if (key == "vocab_size") {
      vocab = parse_size(key, value);
    } else if (key == "weights") {
      weights = parse_doubles(key, value);
      weights_given = true;
    } else if (key.rfind("component.", 0) == 0) {
      components[parse_size(key, key.substr(10))] = parse_doubles(key, value);
    } else {
      return false;
    }
    touched = true;
    return true;
  }

  markov::MixtureSpec build(const std::string& source) const {
    if (vocab == 0) throw InputError(source + ": mixture needs vocab_size");
    if (components.empty()) throw InputError(source + ": mixture needs at least one component");
    markov::MixtureSpec mix;
    std::size_t expect = 0;
    for (const auto& [idx, entries] : components) {
      if (idx != expect++) throw InputError(source + ": mixture components must be numbered 0..K-1");
      try {
        mix.components.push_back(markov::TransitionMatrix::from_flat(vocab, entries));
      } catch (const std::exception& e) {
        throw InputError(source + ": component." + std::to_string(idx) + ": " + e.what());
      }
    }
    if (weights.empty() || (!weights_given && weights.size() != mix.components.size())) {
      mix.weights.assign(mix.components.size(), 1.0 / static_cast<double>(mix.components.size()));
    } else {
      mix.weights = weights;
    }
    try {
      mix.validate();
    } catch (const std::exception& e) {
      throw InputError(source + ": " + e.what());
    }
    return mix;
  }
};

std::string mixture_text(const markov::MixtureSpec& mix, const std::string& prefix) {
  std::string s;
  s += prefix + "vocab_size=" + std::to_string(mix.vocab_size()) + "\n";
  s += prefix + "weights=" + join(mix.weights, [](double w) { return format_double(w); }) + "\n";
  for (std::size_t k = 0; k < mix.components.size(); ++k) {
    s += prefix + "component." + std::to_string(k) + "=" +
         join(mix.components[k].entries(), [](double v) { return format_double(v); }) + "\n";
  }
  return s;
}

}  // namespace

void ExperimentConfig::validate() const {
  mixture.validate();
  model.validate();
  train.validate();
  decode.validate();
  if (seeds.empty()) throw InputError("config: seeds must not be empty");
  if (mixture.vocab_size() != model.vocab_size) {
    throw InputError("config: mixture vocabulary " + std::to_string(mixture.vocab_size()) +
                     " differs from model vocabulary " + std::to_string(model.vocab_size));
  }
  if (train.seq_len > model.max_len) throw InputError("config: train.seq_len exceeds model.max_len");
  if (decode.max_len > model.max_len) throw InputError("config: decode.max_len exceeds model.max_len");
  if (bounds.mc_samples < 2) throw InputError("config: bounds.mc_samples must be at least 2");
  if (eval.recovery_samples < 1 || eval.test_size < 1 || eval.n_candidates < 1) {
    throw InputError("config: eval sizes must be positive");
  }
}

markov::MixtureSpec fig1_mixture() {
  return markov::MixtureSpec::uniform({markov::two_state_matrix(0.2, 0.9), markov::two_state_matrix(0.8, 0.25)});
}

markov::MixtureSpec fig5_mixture() {
  return markov::MixtureSpec::uniform({markov::two_state_matrix(0.7, 0.8), markov::two_state_matrix(0.8, 0.25)});
}

markov::MixtureSpec three_chain_mixture() {
  using markov::TransitionMatrix;
  return markov::MixtureSpec::uniform({
      TransitionMatrix::from_rows({{0.1, 0.8, 0.1}, {0.1, 0.1, 0.8}, {0.8, 0.1, 0.1}}),
      TransitionMatrix::from_rows({{0.1, 0.1, 0.8}, {0.8, 0.1, 0.1}, {0.1, 0.8, 0.1}}),
      TransitionMatrix::from_rows({{0.8, 0.1, 0.1}, {0.1, 0.8, 0.1}, {0.1, 0.1, 0.8}}),
  });
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.mixture = fig1_mixture();
  c.model.vocab_size = c.mixture.vocab_size();
  return c;
}

void set_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  if (key.rfind("mixture.", 0) == 0) {
    cfg = parse(key + "=" + value, cfg);
    return;
  }
  for (const auto& [name, field] : fields()) {
    if (name == key) {
      try {
        field.set(cfg, key, value);
      } catch (const InputError&) {
        throw;
      } catch (const std::exception& e) {
        throw InputError("config: " + key + ": " + e.what());
      }
      return;
    }
  }
  throw InputError("config: unknown key '" + key + "'");
}

ExperimentConfig parse(const std::string& text, ExperimentConfig base, const std::string& source) {
  auto mix = MixtureBuilder::from(base.mixture);
  for (const auto& [key, value] : assignments(text, source)) {
    if (key == "mixture.file") {
      base.mixture = load_mixture(value);
      mix = MixtureBuilder::from(base.mixture);
    } else if (key.rfind("mixture.", 0) == 0) {
      if (!mix.apply(key.substr(8), value)) throw InputError(source + ": unknown key '" + key + "'");
    } else {
      set_value(base, key, value);
    }
  }
  if (mix.touched) base.mixture = mix.build(source);
  base.model.vocab_size = base.mixture.vocab_size();
  return base;
}

ExperimentConfig load(const std::filesystem::path& path) { return parse(read_file(path), default_config(), path.string()); }

markov::MixtureSpec parse_mixture(const std::string& text, const std::string& source) {
  MixtureBuilder mix;
  for (const auto& [key, value] : assignments(text, source)) {
    if (!mix.apply(key, value)) throw InputError(source + ": unknown mixture key '" + key + "'");
  }
  return mix.build(source);
}

markov::MixtureSpec load_mixture(const std::filesystem::path& path) {
  return parse_mixture(read_file(path), path.string());
}

std::string to_string(const ExperimentConfig& cfg) {
  std::string s = mixture_text(cfg.mixture, "mixture.");
  for (const auto& [name, field] : fields()) s += name + "=" + field.get(cfg) + "\n";
  return s;
}

std::string git_blob_hash(const std::string& content) {
  const std::string object = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(object.data(), object.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw NumericError("git_blob_hash: SHA-1 digest failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

}  // namespace mclseq::config
