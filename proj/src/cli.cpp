#include "groundling/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "groundling/config.hpp"
#include "groundling/dataset_io.hpp"
#include "groundling/errors.hpp"
#include "groundling/pipeline.hpp"
#include "groundling/world.hpp"

namespace groundling {
namespace {

namespace fs = std::filesystem;

void write_resolved_config(const RunConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  write_file_atomic(dir + "/config.resolved", emit_config(cfg));
}

Dataset build_split(const Vocab& vocab, const GenConfig& gc) {
  Dataset ds;
  ds.vocab = vocab;
  ds.scenes = generate_dataset(vocab, gc);
  ds.word_counts = count_words(vocab, ds.scenes);
  return ds;
}

// gen: build train + held-out splits and write them under --out.
int cmd_gen(const RunConfig& cfg, const std::string& out_dir) {
  write_resolved_config(cfg, out_dir);
  Vocab vocab = Vocab::standard();
  Dataset train = build_split(
      vocab, {cfg.data_seed, cfg.train_scenes, cfg.alias_fraction, 0});
  Dataset heldout =
      build_split(vocab, {cfg.data_seed, cfg.heldout_scenes,
                          cfg.alias_fraction, cfg.train_scenes});
  write_dataset(out_dir + "/train", train);
  write_dataset(out_dir + "/heldout", heldout);
  std::printf("gen: wrote %zu train and %zu held-out scenes to %s\n",
              train.scenes.size(), heldout.scenes.size(), out_dir.c_str());
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"groundling: grounded language micro-world trainer"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "Run configuration file");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate the synthetic dataset");
  std::uint64_t gen_seed = 0;
  int gen_n = -1;
  std::string gen_out = "out";
  bool gen_seed_set = false;
  gen->add_option("--seed", gen_seed, "Dataset seed")
      ->each([&](const std::string&) { gen_seed_set = true; });
  gen->add_option("--n", gen_n, "Number of training scenes");
  gen->add_option("--out", gen_out, "Output directory");

  // train
  auto* train = app.add_subcommand("train", "Train one stage");
  std::string stage;
  std::string train_out = "out";
  std::string train_from;
  train->add_option("--stage", stage, "classify|mask|ground|relate|search-heads")
      ->required();
  train->add_option("--out", train_out, "Output directory");
  train->add_option("--from", train_from, "Checkpoint to start from");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_task;
  std::string eval_ckpt;
  std::string eval_out = "out";
  eval->add_option("--task", eval_task, "retrieval|relations|objects")
      ->required();
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint path")->required();
  eval->add_option("--out", eval_out, "Output directory");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Embedding analyses");
  std::string an_task;
  std::string an_ckpt;
  std::string an_baseline;
  std::string an_out = "out";
  analyze->add_option("--task", an_task,
                      "pca|concreteness|norms|silhouette|compose|occlude|frequency")
      ->required();
  analyze->add_option("--checkpoint", an_ckpt, "Checkpoint path")->required();
  analyze->add_option("--baseline", an_baseline,
                      "Second checkpoint for before/after comparisons");
  analyze->add_option("--out", an_out, "Output directory");

  // search
  auto* search = app.add_subcommand("search", "Multimodal image search");
  std::string s_image, s_text, s_db;
  double s_alpha = 0.5;
  int s_topk = 5;
  std::string s_ckpt;
  search->add_option("--image", s_image, "Query image (PPM)");
  search->add_option("--text", s_text, "Query text");
  search->add_option("--alpha", s_alpha, "Blend weight in [0,1]");
  search->add_option("--db", s_db, "Index file")->required();
  search->add_option("--topk", s_topk, "Results to print");
  search->add_option("--checkpoint", s_ckpt, "Checkpoint path")->required();

  // index
  auto* index = app.add_subcommand("index", "Build a search index");
  std::string i_dataset, i_out;
  std::string i_ckpt;
  index->add_option("--dataset", i_dataset, "Dataset directory")->required();
  index->add_option("--out", i_out, "Index file to write")->required();
  index->add_option("--checkpoint", i_ckpt, "Checkpoint path")->required();

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    std::printf("%s", app.help().c_str());
    return 0;
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  }

  try {
    RunConfig cfg =
        config_path.empty() ? RunConfig{} : load_config(config_path);

    if (gen->parsed()) {
      if (gen_seed_set) cfg.data_seed = gen_seed;
      if (gen_n > 0) cfg.train_scenes = gen_n;
      return cmd_gen(cfg, gen_out);
    }
    if (train->parsed()) {
      run_train_stage(cfg, stage, train_from, train_out);
      return 0;
    }
    if (eval->parsed()) {
      run_eval_task(cfg, eval_task, eval_ckpt, eval_out);
      return 0;
    }
    if (analyze->parsed()) {
      run_analyze_task(cfg, an_task, an_ckpt, an_baseline, an_out);
      return 0;
    }
    if (search->parsed()) {
      run_search(cfg, s_ckpt, s_db, s_image, s_text, s_alpha, s_topk);
      return 0;
    }
    if (index->parsed()) {
      run_index(cfg, i_ckpt, i_dataset, i_out);
      return 0;
    }
    std::fprintf(stderr, "usage error: no subcommand\n");
    return 1;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

}  // namespace groundling
