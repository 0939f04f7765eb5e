#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "refusal/attack.hpp"
#include "refusal/defenses.hpp"
#include "refusal/model.hpp"
#include "refusal/training.hpp"

namespace refusal::cli {

// Flat INI-style config: [section] headers (model sections carry a name,
// "[model alpha]"), key = value lines, # or ; comments. Parse errors and
// type errors cite path:line.
class ConfigFile {
 public:
  struct Entry {
    std::string value;
    std::size_t line = 0;
    mutable bool used = false;
  };

  static ConfigFile parse_file(const std::string& path) {
    std::ifstream is(path);
    require<ConfigError>(static_cast<bool>(is), "cannot open config file: ", path);
    std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_string(content, path);
  }

  static ConfigFile parse_string(const std::string& content, const std::string& path = "<config>") {
    ConfigFile cfg;
    cfg.path_ = path;
    cfg.raw_ = content;
    std::string section;
    std::size_t lineno = 0;
    std::size_t pos = 0;
    while (pos <= content.size()) {
      const std::size_t eol = content.find('\n', pos);
      std::string line = content.substr(pos, eol == std::string::npos ? eol : eol - pos);
      pos = eol == std::string::npos ? content.size() + 1 : eol + 1;
      ++lineno;
      const std::size_t comment = line.find_first_of("#;");
      if (comment != std::string::npos) line = line.substr(0, comment);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        require<ConfigError>(line.back() == ']', path, ":", lineno,
                             ": section header missing closing ']'");
        section = trim(line.substr(1, line.size() - 2));
        require<ConfigError>(!section.empty(), path, ":", lineno, ": empty section name");
        cfg.sections_[section];  // sections may be empty
        continue;
      }
      const std::size_t eq = line.find('=');
      require<ConfigError>(eq != std::string::npos, path, ":", lineno,
                           ": expected 'key = value', got '", line, "'");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      require<ConfigError>(!key.empty(), path, ":", lineno, ": empty key");
      require<ConfigError>(!section.empty(), path, ":", lineno, ": key '", key,
                           "' appears before any [section]");
      auto [it, inserted] = cfg.sections_[section].emplace(key, Entry{value, lineno});
      require<ConfigError>(inserted, path, ":", lineno, ": duplicate key '", key, "' in [",
                           section, "] (first at line ", it->second.line, ")");
    }
    return cfg;
  }

  const std::string& path() const { return path_; }
  const std::string& raw() const { return raw_; }

  bool has_section(const std::string& s) const { return sections_.count(s) > 0; }

  std::vector<std::string> sections_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, _] : sections_)
      if (name.rfind(prefix, 0) == 0) out.push_back(name);
    return out;
  }

  std::optional<std::string> find(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    if (s == sections_.end()) return std::nullopt;
    auto k = s->second.find(key);
    if (k == s->second.end()) return std::nullopt;
    k->second.used = true;
    return k->second.value;
  }

  std::string get_str(const std::string& section, const std::string& key,
                      const std::string& fallback) const {
    auto v = find(section, key);
    return v ? *v : fallback;
  }

  long get_int(const std::string& section, const std::string& key, long fallback) const {
    auto v = find(section, key);
    if (!v) return fallback;
    try {
      std::size_t used = 0;
      const long out = std::stol(*v, &used);
      require<ConfigError>(used == v->size(), "trailing characters");
      return out;
    } catch (const std::exception&) {
      throw ConfigError(where(section, key) + ": expected an integer, got '" + *v + "'");
    }
  }

  std::uint64_t get_u64(const std::string& section, const std::string& key,
                        std::uint64_t fallback) const {
    auto v = find(section, key);
    if (!v) return fallback;
    try {
      std::size_t used = 0;
      const std::uint64_t out = std::stoull(*v, &used);
      require<ConfigError>(used == v->size(), "trailing characters");
      return out;
    } catch (const std::exception&) {
      throw ConfigError(where(section, key) + ": expected an unsigned integer, got '" + *v + "'");
    }
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    auto v = find(section, key);
    if (!v) return fallback;
    try {
      std::size_t used = 0;
      const double out = std::stod(*v, &used);
      require<ConfigError>(used == v->size(), "trailing characters");
      return out;
    } catch (const std::exception&) {
      throw ConfigError(where(section, key) + ": expected a number, got '" + *v + "'");
    }
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    auto v = find(section, key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw ConfigError(where(section, key) + ": expected a boolean, got '" + *v + "'");
  }

  std::vector<std::string> get_list(const std::string& section, const std::string& key) const {
    auto v = find(section, key);
    std::vector<std::string> out;
    if (!v) return out;
    std::string cur;
    for (char c : *v + ",") {
      if (c == ',') {
        const std::string t = trim(cur);
        if (!t.empty()) out.push_back(t);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    return out;
  }

  std::vector<double> get_double_list(const std::string& section, const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : get_list(section, key)) {
      try {
        out.push_back(std::stod(s));
      } catch (const std::exception&) {
        throw ConfigError(where(section, key) + ": expected numbers, got '" + s + "'");
      }
    }
    return out;
  }

  // Typo guard: every present key must be consumed by a getter.
  void check_all_used() const {
    for (const auto& [section, entries] : sections_)
      for (const auto& [key, entry] : entries)
        require<ConfigError>(entry.used, path_, ":", entry.line, ": unknown key '", key,
                             "' in [", section, "]");
  }

  std::string where(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    if (s != sections_.end()) {
      auto k = s->second.find(key);
      if (k != s->second.end()) return format_msg(path_, ":", k->second.line);
    }
    return path_;
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

  std::map<std::string, std::map<std::string, Entry>> sections_;
  std::string path_;
  std::string raw_;
};

struct ModelSpec {
  std::string id;
  std::uint64_t seed = 0;
  mllm::ProjectorVariant projector = mllm::ProjectorVariant::Ffn2;
};

struct RunConfig {
  // dataset
  std::size_t n_train = 2000;
  std::size_t n_test = 200;
  std::size_t questions_per_scene = 6;
  std::uint64_t dataset_seed = 11;
  // models
  std::vector<ModelSpec> models;
  // training
  train::TrainConfig train;
  // attack
  std::vector<std::string> competing;  // model ids
  bool joint_attack = false;
  attack::ShadowKind shadow_kind = attack::ShadowKind::Exact;
  std::size_t shadow_count = 1;
  std::size_t attack_images = 10;
  attack::AttackConfig attack;
  bool attack_has_step_override = false;
  bool attack_has_iter_override = false;
  // eval
  int trials = 3;
  double temperature = 1.0;
  bool greedy_eval = false;
  int max_new_tokens = 16;
  int rounds = 1;
  std::uint64_t eval_seed = 23;
  // defenses
  std::vector<double> gaussian_sigmas;
  int purify_steps = 1;
  int purify_radius = 1;
  double purify_sigma = 0.01;
  bool purify_enabled = true;
  bool adv_train_enabled = true;
  train::TrainConfig adv_train;
  std::uint64_t split_seed = 47;
  // output
  std::string out_dir = "out";
  int jobs = 2;
  // provenance
  std::string config_hash;

  const ModelSpec& model_spec(const std::string& id) const {
    for (const auto& m : models)
      if (m.id == id) return m;
    throw ConfigError("attack references unknown model id '" + id + "'");
  }
};

inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline RunConfig run_config_from(const ConfigFile& f) {
  RunConfig rc;
  rc.config_hash = fnv1a_hex(f.raw());

  rc.n_train = static_cast<std::size_t>(f.get_int("dataset", "n_train", 2000));
  rc.n_test = static_cast<std::size_t>(f.get_int("dataset", "n_test", 200));
  rc.questions_per_scene =
      static_cast<std::size_t>(f.get_int("dataset", "questions_per_scene", 6));
  rc.dataset_seed = f.get_u64("dataset", "seed", 11);
  require<ConfigError>(rc.n_train > 0 && rc.n_test > 0 && rc.questions_per_scene > 0,
                       "dataset: n_train, n_test and questions_per_scene must be positive");

  for (const auto& section : f.sections_with_prefix("model ")) {
    ModelSpec spec;
    spec.id = section.substr(6);
    require<ConfigError>(!spec.id.empty(), "model section needs a name: [model <id>]");
    spec.seed = f.get_u64(section, "seed", 1);
    spec.projector = mllm::projector_from_name(f.get_str(section, "projector", "ffn2"));
    rc.models.push_back(spec);
  }
  require<ConfigError>(!rc.models.empty(), f.path(), ": at least one [model <id>] is required");

  rc.train.epochs = static_cast<int>(f.get_int("train", "epochs", rc.train.epochs));
  rc.train.batch_size = static_cast<int>(f.get_int("train", "batch_size", rc.train.batch_size));
  rc.train.learning_rate = f.get_double("train", "learning_rate", rc.train.learning_rate);
  rc.train.seed = f.get_u64("train", "seed", 3);
  rc.train.validate();

  rc.competing = f.get_list("attack", "competing");
  if (rc.competing.empty()) rc.competing.push_back(rc.models[0].id);
  for (const auto& id : rc.competing) rc.model_spec(id);  // must resolve
  rc.joint_attack = f.get_bool("attack", "joint", false);
  rc.shadow_kind = attack::shadow_kind_from_name(f.get_str("attack", "shadow", "exact"));
  const std::size_t default_count = rc.shadow_kind == attack::ShadowKind::Exact
                                        ? 1
                                        : (rc.shadow_kind == attack::ShadowKind::Similar ? 10 : 50);
  rc.shadow_count = static_cast<std::size_t>(f.get_int("attack", "shadow_count",
                                                       static_cast<long>(default_count)));
  rc.attack_images = static_cast<std::size_t>(f.get_int("attack", "images", 10));
  const auto optimizer = f.get_str("attack", "optimizer", "bim");
  require<ConfigError>(optimizer == "bim" || optimizer == "pgd",
                       f.where("attack", "optimizer"), ": optimizer must be bim or pgd");
  rc.attack = attack::default_attack_config(rc.shadow_kind,
                                            optimizer == "bim"
                                                ? attack::AttackConfig::Optimizer::BIM
                                                : attack::AttackConfig::Optimizer::PGD);
  rc.attack.epsilon = f.get_double("attack", "epsilon", rc.attack.epsilon);
  if (auto v = f.find("attack", "step_size")) {
    rc.attack.alpha = f.get_double("attack", "step_size", rc.attack.alpha);
    rc.attack_has_step_override = true;
  }
  if (auto v = f.find("attack", "max_iter")) {
    rc.attack.max_iter = static_cast<int>(f.get_int("attack", "max_iter", rc.attack.max_iter));
    rc.attack_has_iter_override = true;
  }
  rc.attack.minibatch = static_cast<int>(f.get_int("attack", "minibatch", rc.attack.minibatch));
  rc.attack.early_stop_threshold =
      f.get_double("attack", "early_stop_threshold", rc.attack.early_stop_threshold);
  rc.attack.early_stop_patience = static_cast<int>(
      f.get_int("attack", "early_stop_patience", rc.attack.early_stop_patience));
  rc.attack.seed = f.get_u64("attack", "seed", 17);
  rc.attack.validate();

  rc.trials = static_cast<int>(f.get_int("eval", "trials", 3));
  rc.temperature = f.get_double("eval", "temperature", 1.0);
  const auto mode = f.get_str("eval", "mode", "sample");
  require<ConfigError>(mode == "sample" || mode == "greedy", f.where("eval", "mode"),
                       ": mode must be sample or greedy");
  rc.greedy_eval = mode == "greedy";
  rc.max_new_tokens = static_cast<int>(f.get_int("eval", "max_new_tokens", 16));
  rc.rounds = static_cast<int>(f.get_int("eval", "rounds", 1));
  rc.eval_seed = f.get_u64("eval", "seed", 23);
  require<ConfigError>(rc.trials >= 1 && rc.rounds >= 1 && rc.max_new_tokens >= 1,
                       "eval: trials, rounds and max_new_tokens must be >= 1");

  rc.gaussian_sigmas = f.get_double_list("defense", "gaussian_sigmas");
  if (rc.gaussian_sigmas.empty()) rc.gaussian_sigmas = {0.0, 0.01, 0.02, 0.05};
  rc.purify_enabled = f.get_bool("defense", "purify", true);
  rc.purify_steps = static_cast<int>(f.get_int("defense", "purify_steps", 1));
  rc.purify_radius = static_cast<int>(f.get_int("defense", "purify_radius", 1));
  rc.purify_sigma = f.get_double("defense", "purify_sigma", 0.01);
  rc.adv_train_enabled = f.get_bool("defense", "adv_train", true);
  rc.adv_train = rc.train;
  rc.adv_train.epochs = static_cast<int>(f.get_int("defense", "adv_epochs", 2));
  rc.adv_train.learning_rate =
      f.get_double("defense", "adv_learning_rate", rc.train.learning_rate);
  rc.adv_train.seed = f.get_u64("defense", "adv_seed", 31);
  rc.adv_train.trainable = train::TrainConfig::Trainable::ProjectorAndDecoder;
  rc.split_seed = f.get_u64("defense", "split_seed", 47);

  rc.out_dir = f.get_str("output", "dir", "out");
  rc.jobs = static_cast<int>(f.get_int("output", "jobs", 2));
  require<ConfigError>(rc.jobs >= 1, "output: jobs must be >= 1");

  f.check_all_used();
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  return run_config_from(ConfigFile::parse_file(path));
}

// --seed N derives every stage seed from one master value.
inline void apply_master_seed(RunConfig& rc, std::uint64_t master) {
  rc.dataset_seed = mix_seed(master, 0x646174ULL);
  rc.train.seed = mix_seed(master, 0x747261ULL);
  rc.attack.seed = mix_seed(master, 0x61746bULL);
  rc.eval_seed = mix_seed(master, 0x65766cULL);
  rc.adv_train.seed = mix_seed(master, 0x616476ULL);
  rc.split_seed = mix_seed(master, 0x73706cULL);
}

}  // namespace refusal::cli
