#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynrep/core/error.hpp"
#include "dynrep/eval/probe_eval.hpp"
#include "dynrep/ssl/pretrain.hpp"

namespace dynrep {

// Dataset generation knobs shared by all three systems; per-system physics
// stays in default_spec.
struct DatasetSection {
  std::vector<std::string> systems{"advdiff", "grayscott", "shearvort"};
  int64_t height = 32;
  int64_t width = 32;
  int64_t frames = 32;
  int64_t pretrain = 512;
  int64_t labeled = 256;
  uint64_t seed = 1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetSection, systems,
                                                height, width, frames,
                                                pretrain, labeled, seed)

// Full experiment tree. The pretrain section is a template: the grid stamps
// method and data shape onto a copy per (method, system) cell.
struct ExperimentConfig {
  DatasetSection dataset;
  std::vector<std::string> methods{"jepa", "mae"};
  PretrainConfig pretrain;
  // Which axis the VICReg variance/covariance statistics run over. "auto"
  // picks per-token for advdiff — its clips are translations of their initial
  // pattern, so pooled statistics admit a translation-invariant solution that
  // carries no parameter signal — and pooled embeddings everywhere else.
  // "pooled" / "per_token" force one choice for every system.
  std::string vicreg_stats = "auto";
  // 50 probe epochs keeps the full desk-scale grid inside an hour of CPU;
  // the standalone ProbeTrainConfig default stays at 100.
  ProbeTrainConfig probe{.epochs = 50};
  std::vector<double> fractions{0.1, 0.5, 1.0};
  std::vector<uint64_t> probe_seeds{1, 2, 3};
  std::string out = "runs";

  void validate() const {
    if (dataset.systems.empty())
      throw Error(ErrCode::value, "config: dataset.systems is empty");
    for (const auto& s : dataset.systems)
      default_spec(s);  // throws on unknown system names
    if (methods.empty())
      throw Error(ErrCode::value, "config: methods is empty");
    for (const auto& m : methods)
      if (m != "jepa" && m != "mae")
        throw Error(ErrCode::usage, "config: unknown method '" + m + "'");
    if (fractions.empty())
      throw Error(ErrCode::value, "config: fractions is empty");
    for (double f : fractions)
      if (!(f > 0.0 && f <= 1.0))
        throw Error(ErrCode::value, "config: fractions must lie in (0, 1]");
    if (probe_seeds.empty())
      throw Error(ErrCode::value, "config: probe_seeds is empty");
    if (out.empty()) throw Error(ErrCode::value, "config: out is empty");
    if (vicreg_stats != "auto" && vicreg_stats != "pooled" &&
        vicreg_stats != "per_token")
      throw Error(ErrCode::value,
                  "config: vicreg_stats must be auto, pooled, or per_token");
    pretrain.validate();
    probe.validate();
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, dataset,
                                                methods, pretrain,
                                                vicreg_stats, probe,
                                                fractions, probe_seeds, out)

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f)
    throw Error(ErrCode::missing, "config file '" + path + "' not found");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const std::exception& e) {
    throw Error(ErrCode::format,
                "config file '" + path + "': " + std::string(e.what()));
  }
  try {
    return j.get<ExperimentConfig>();
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrCode::format,
                "config file '" + path + "': " + std::string(e.what()));
  }
}

namespace detail {

inline std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

inline nlohmann::json parse_env_scalar(const nlohmann::json& tmpl,
                                       const std::string& text,
                                       const std::string& env) {
  try {
    if (tmpl.is_boolean()) {
      if (text == "1" || text == "true" || text == "TRUE") return true;
      if (text == "0" || text == "false" || text == "FALSE") return false;
      throw Error(ErrCode::format, "");
    }
    if (tmpl.is_number_unsigned()) return std::stoull(text);
    if (tmpl.is_number_integer()) return std::stoll(text);
    if (tmpl.is_number_float()) return std::stod(text);
    return text;  // string leaf
  } catch (const std::exception&) {
    throw Error(ErrCode::format,
                env + "='" + text + "' does not parse as the config leaf type");
  }
}

inline void apply_env_node(nlohmann::json& node, const std::string& name) {
  if (node.is_object()) {
    for (auto& [key, value] : node.items())
      apply_env_node(value, name + "_" + upper(key));
    return;
  }
  const char* v = std::getenv(name.c_str());
  if (v == nullptr) return;
  std::string text(v);
  if (node.is_array()) {
    nlohmann::json tmpl = node.empty() ? nlohmann::json("") : node[0];
    nlohmann::json out = nlohmann::json::array();
    size_t start = 0;
    while (start <= text.size()) {
      size_t comma = text.find(',', start);
      std::string item = text.substr(
          start, comma == std::string::npos ? std::string::npos : comma - start);
      out.push_back(parse_env_scalar(tmpl, item, name));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    node = out;
    return;
  }
  node = parse_env_scalar(node, text, name);
}

}  // namespace detail

// Each config leaf maps to one environment variable: the path of keys from
// the root, upper-cased and joined with underscores under the DYNREP prefix
// (e.g. dataset.labeled -> DYNREP_DATASET_LABELED, fractions ->
// DYNREP_FRACTIONS as a comma list).
inline void apply_env_overrides(nlohmann::json& config,
                                const std::string& prefix = "DYNREP") {
  detail::apply_env_node(config, prefix);
}

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// nlohmann objects iterate in sorted key order, so dump() is a canonical
// serialization and the hash is insertion-order independent.
inline uint64_t config_hash(const nlohmann::json& j) { return fnv1a64(j.dump()); }

inline std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dynrep
