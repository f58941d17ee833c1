#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "groundling/tensor.hpp"
#include "groundling/world.hpp"

namespace groundling {

// On-disk layout of a dataset directory:
//   images/{id}.ppm   binary P6, 8-bit
//   scenes.jsonl      one scene record per line
//   vocab.json        word list with metadata and occurrence counts
struct Dataset {
  Vocab vocab;
  std::vector<Scene> scenes;
  std::vector<int64_t> word_counts;  // indexed by token id
};

std::string read_file(const std::string& path);            // throws IoError
void write_file_atomic(const std::string& path, const std::string& bytes);

// 8-bit quantization: byte = round(255 * v); loading divides by 255.
std::vector<uint8_t> ppm_bytes(const Tensor<float>& img);  // img is {3,H,W}
void write_ppm(const std::string& path, const Tensor<float>& img);
Tensor<float> decode_ppm(const std::string& bytes, const std::string& what);
Tensor<float> read_ppm(const std::string& path);

std::string image_path(const std::string& dir, int scene_id);

void write_dataset(const std::string& dir, const Dataset& ds);
// Reads scenes.jsonl and vocab.json; images stay on disk and are loaded per
// scene with read_ppm(image_path(...)).
Dataset read_dataset(const std::string& dir);

}  // namespace groundling
