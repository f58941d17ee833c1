#include "groundling/config.hpp"

#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <variant>

#include "groundling/errors.hpp"

namespace groundling {
namespace {

struct Field {
  const char* key;
  std::variant<int RunConfig::*, double RunConfig::*, bool RunConfig::*,
               std::uint64_t RunConfig::*, std::string RunConfig::*>
      member;
};

// One row per key. Order here is the emit order.
const std::vector<Field>& field_table() {
  using RC = RunConfig;
  static const std::vector<Field> table = {
      {"data.seed", &RC::data_seed},
      {"data.train_scenes", &RC::train_scenes},
      {"data.heldout_scenes", &RC::heldout_scenes},
      {"data.alias_fraction", &RC::alias_fraction},
      {"data.dir", &RC::data_dir},
      {"model.d_model", &RC::d_model},
      {"model.heads", &RC::heads},
      {"model.lang_layers", &RC::lang_layers},
      {"model.ffn", &RC::ffn},
      {"model.d_rel", &RC::d_rel},
      {"model.d_common", &RC::d_common},
      {"model.post_ln", &RC::post_ln},
      {"train.mask_prob", &RC::mask_prob},
      {"train.ground_tau", &RC::ground_tau},
      {"train.relate_tau", &RC::relate_tau},
      {"train.search_tau", &RC::search_tau},
      {"train.loss_l", &RC::loss_l},
      {"train.loss_v", &RC::loss_v},
      {"train.w_rel", &RC::w_rel},
      {"train.w_obj", &RC::w_obj},
      {"train.w_aux", &RC::w_aux},
      {"train.trainable_top_lang", &RC::trainable_top_lang},
      {"train.cls_in_scores", &RC::cls_in_scores},
      {"train.relation_negatives_in_batch", &RC::relation_negatives_in_batch},
      {"train.precision", &RC::precision},
      {"adam.beta1", &RC::beta1},
      {"adam.beta2", &RC::beta2},
      {"adam.eps", &RC::adam_eps},
      {"adam.weight_decay", &RC::weight_decay},
      {"seed.init", &RC::seed_init},
      {"seed.shuffle", &RC::seed_shuffle},
      {"seed.mask", &RC::seed_mask},
      {"analysis.pool_specials", &RC::pool_specials},
  };
  return table;
}

struct StageField {
  const char* prefix;
  StageConfig RunConfig::* member;
};

const std::vector<StageField>& stage_table() {
  using RC = RunConfig;
  static const std::vector<StageField> table = {
      {"stage.classify", &RC::classify}, {"stage.mask", &RC::mask},
      {"stage.ground", &RC::ground},     {"stage.relate", &RC::relate},
      {"stage.search", &RC::search},
  };
  return table;
}

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("bad integer for " + key + ": '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("bad unsigned integer for " + key + ": '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("bad real for " + key + ": '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "' (use true/false)");
}

std::string format_real(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return buf;
}

void assign(RunConfig& cfg, const Field& f, const std::string& key,
            const std::string& value) {
  if (auto* m = std::get_if<int RunConfig::*>(&f.member))
    cfg.**m = parse_int(key, value);
  else if (auto* m = std::get_if<double RunConfig::*>(&f.member))
    cfg.**m = parse_real(key, value);
  else if (auto* m = std::get_if<bool RunConfig::*>(&f.member))
    cfg.**m = parse_bool(key, value);
  else if (auto* m = std::get_if<std::uint64_t RunConfig::*>(&f.member))
    cfg.**m = parse_u64(key, value);
  else
    cfg.*std::get<std::string RunConfig::*>(f.member) = value;
}

std::string render(const RunConfig& cfg, const Field& f) {
  if (auto* m = std::get_if<int RunConfig::*>(&f.member))
    return std::to_string(cfg.**m);
  if (auto* m = std::get_if<double RunConfig::*>(&f.member))
    return format_real(cfg.**m);
  if (auto* m = std::get_if<bool RunConfig::*>(&f.member))
    return cfg.**m ? "true" : "false";
  if (auto* m = std::get_if<std::uint64_t RunConfig::*>(&f.member))
    return std::to_string(cfg.**m);
  return cfg.*std::get<std::string RunConfig::*>(f.member);
}

bool assign_stage(RunConfig& cfg, const std::string& key,
                  const std::string& value) {
  for (const auto& sf : stage_table()) {
    std::string prefix = std::string(sf.prefix) + ".";
    if (key.rfind(prefix, 0) != 0) continue;
    std::string leaf = key.substr(prefix.size());
    StageConfig& sc = cfg.*sf.member;
    if (leaf == "epochs")
      sc.epochs = parse_int(key, value);
    else if (leaf == "lr")
      sc.lr = parse_real(key, value);
    else if (leaf == "batch")
      sc.batch = parse_int(key, value);
    else
      throw ConfigError("unknown key: " + key);
    return true;
  }
  return false;
}

void validate(const RunConfig& cfg) {
  if (!cfg.post_ln)
    throw ConfigError("model.post_ln = false: no pre-layernorm variant exists");
  if (cfg.precision != "f32" && cfg.precision != "f64")
    throw ConfigError("train.precision must be f32 or f64, got '" +
                      cfg.precision + "'");
  if (cfg.train_scenes < 1 || cfg.heldout_scenes < 1)
    throw ConfigError("scene counts must be positive");
  if (cfg.alias_fraction < 0.0 || cfg.alias_fraction > 1.0)
    throw ConfigError("data.alias_fraction must lie in [0,1]");
  if (cfg.mask_prob < 0.0 || cfg.mask_prob > 1.0)
    throw ConfigError("train.mask_prob must lie in [0,1]");
  if (cfg.d_model < 1 || cfg.heads < 1 || cfg.d_model % cfg.heads != 0)
    throw ConfigError("model.d_model must be a positive multiple of model.heads");
  if (cfg.trainable_top_lang < 0 || cfg.trainable_top_lang > cfg.lang_layers)
    throw ConfigError(
        "train.trainable_top_lang must lie in [0, model.lang_layers]");
  for (const auto& sf : stage_table()) {
    const StageConfig& sc = cfg.*sf.member;
    if (sc.epochs < 0 || sc.batch < 1 || !(sc.lr > 0.0))
      throw ConfigError(std::string(sf.prefix) + " settings out of range");
  }
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) +
                        ": expected 'key = value', got '" + s + "'");
    std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    if (key.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!seen.insert(key).second)
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key " +
                        key);
    bool matched = false;
    for (const auto& f : field_table()) {
      if (key == f.key) {
        assign(cfg, f, key, value);
        matched = true;
        break;
      }
    }
    if (!matched) matched = assign_stage(cfg, key, value);
    if (!matched) throw ConfigError("unknown key: " + key);
  }
  validate(cfg);
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string emit_config(const RunConfig& cfg) {
  validate(cfg);
  std::ostringstream out;
  for (const auto& f : field_table()) out << f.key << " = " << render(cfg, f) << "\n";
  for (const auto& sf : stage_table()) {
    const StageConfig& sc = cfg.*sf.member;
    out << sf.prefix << ".epochs = " << sc.epochs << "\n";
    out << sf.prefix << ".lr = " << format_real(sc.lr) << "\n";
    out << sf.prefix << ".batch = " << sc.batch << "\n";
  }
  return out.str();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : field_table()) keys.push_back(f.key);
  for (const auto& sf : stage_table()) {
    keys.push_back(std::string(sf.prefix) + ".epochs");
    keys.push_back(std::string(sf.prefix) + ".lr");
    keys.push_back(std::string(sf.prefix) + ".batch");
  }
  return keys;
}

}  // namespace groundling
