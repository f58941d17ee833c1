#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <set>
#include <sstream>
#include <string>

#include "doctest.h"
#include "groundling/config.hpp"
#include "groundling/errors.hpp"

using namespace groundling;

TEST_CASE("defaults survive an emit/parse round trip") {
  RunConfig def;
  std::string text = emit_config(def);
  RunConfig back = parse_config_text(text);
  CHECK(emit_config(back) == text);
  CHECK(back.d_model == 64);
  CHECK(back.beta1 == 0.95);
  CHECK(back.ground_tau == 0.1);
  CHECK(back.precision == "f32");
}

TEST_CASE("every emitted line is a known key") {
  RunConfig def;
  std::string text = emit_config(def);
  auto keys = config_keys();
  std::set<std::string> keyset(keys.begin(), keys.end());
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    auto eq = line.find(" = ");
    REQUIRE(eq != std::string::npos);
    CHECK(keyset.count(line.substr(0, eq)) == 1);
    ++n;
  }
  CHECK(n == int(keys.size()));
}

TEST_CASE("parsing accepts comments, blanks, and overrides") {
  RunConfig cfg = parse_config_text(
      "# comment\n"
      "\n"
      "model.d_model = 32\n"
      "  train.mask_prob=0.25  \n"
      "stage.ground.lr = 5e-4\n"
      "data.dir = /tmp/run\n"
      "train.loss_v = false\n");
  CHECK(cfg.d_model == 32);
  CHECK(cfg.mask_prob == 0.25);
  CHECK(cfg.ground.lr == 5e-4);
  CHECK(cfg.data_dir == "/tmp/run");
  CHECK(cfg.loss_v == false);
  CHECK(cfg.loss_l == true);
}

TEST_CASE("unknown and malformed keys are rejected") {
  CHECK_THROWS_AS(parse_config_text("model.width = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("stage.ground.momentum = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("model.d_model = x\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("train.loss_l = yes\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("no equals sign\n"), ConfigError);
  CHECK_THROWS_AS(
      parse_config_text("model.d_model = 32\nmodel.d_model = 64\n"),
      ConfigError);
}

TEST_CASE("value validation") {
  CHECK_THROWS_AS(parse_config_text("train.precision = f16\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("data.alias_fraction = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("model.d_model = 30\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("train.trainable_top_lang = 9\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("stage.mask.lr = 0\n"), ConfigError);
  CHECK(parse_config_text("train.precision = f64\n").precision == "f64");
}

TEST_CASE("reals emit with nine significant digits") {
  RunConfig cfg;
  cfg.ground_tau = 1.0 / 3.0;
  std::string text = emit_config(cfg);
  CHECK(text.find("train.ground_tau = 0.333333333\n") != std::string::npos);
  CHECK(text.find("adam.beta2 = 0.999\n") != std::string::npos);
  CHECK(text.find("adam.eps = 1e-08\n") != std::string::npos);
}
