#pragma once

#include <string>

#include "groundling/config.hpp"

namespace groundling {

// Stage drivers. Each writes a checkpoint plus reports under out_dir and
// emits the resolved config there. `from` is the checkpoint to continue
// from; stages past the first require it.
void run_train_stage(const RunConfig& cfg, const std::string& stage,
                     const std::string& from, const std::string& out_dir);

// task: retrieval | relations | objects.
void run_eval_task(const RunConfig& cfg, const std::string& task,
                   const std::string& checkpoint, const std::string& out_dir);

// task: pca | concreteness | norms | silhouette | compose | occlude |
// frequency. baseline optionally names a second checkpoint for
// before/after comparisons.
void run_analyze_task(const RunConfig& cfg, const std::string& task,
                      const std::string& checkpoint,
                      const std::string& baseline, const std::string& out_dir);

void run_search(const RunConfig& cfg, const std::string& checkpoint,
                const std::string& db, const std::string& image_path,
                const std::string& text, double alpha, int topk);

void run_index(const RunConfig& cfg, const std::string& checkpoint,
               const std::string& dataset_dir, const std::string& out_path);

}  // namespace groundling
