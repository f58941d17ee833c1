#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace groundling {

// Per-stage optimizer settings.
struct StageConfig {
  int epochs = 1;
  double lr = 1e-3;
  int batch = 16;
};

// Flat key=value run configuration. Unknown keys are rejected on parse and
// the resolved form round-trips through emit() unchanged.
struct RunConfig {
  // data
  std::uint64_t data_seed = 7;
  int train_scenes = 2000;
  int heldout_scenes = 200;
  double alias_fraction = 0.5;
  std::string data_dir = "data";

  // model
  int d_model = 64;
  int heads = 4;
  int lang_layers = 4;
  int ffn = 256;
  int d_rel = 16;
  int d_common = 64;
  // Attention sublayers normalize after the residual. The setting is recorded
  // here so every run's output directory states it; only true is supported.
  bool post_ln = true;

  // stage schedules
  StageConfig classify{15, 1e-3, 16};
  StageConfig mask{30, 1e-3, 16};
  StageConfig ground{12, 1e-3, 16};
  StageConfig relate{15, 1e-3, 16};
  StageConfig search{10, 1e-3, 16};

  // training knobs
  double mask_prob = 0.15;
  double ground_tau = 0.1;
  double relate_tau = 1.0;
  double search_tau = 0.1;
  bool loss_l = true;
  bool loss_v = true;
  double w_rel = 1.0;
  double w_obj = 1.0;
  double w_aux = 1.0;
  int trainable_top_lang = 2;
  bool cls_in_scores = false;
  bool relation_negatives_in_batch = false;
  std::string precision = "f32";

  // optimizer
  double beta1 = 0.95;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;

  // named seeds
  std::uint64_t seed_init = 101;
  std::uint64_t seed_shuffle = 202;
  std::uint64_t seed_mask = 303;

  // analysis
  bool pool_specials = true;
};

// Parses `key = value` lines. Blank lines and lines starting with '#' are
// skipped. Throws ConfigError on unknown keys, duplicate keys, or bad values.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);

// Emits every field as `key = value`, one per line, in table order.
// Reals are printed with nine significant digits.
std::string emit_config(const RunConfig& cfg);

// Keys in table order; used by tests to cross-check parse/emit coverage.
std::vector<std::string> config_keys();

}  // namespace groundling
