#pragma once

#include <string>

#include "cmoe/harness_types.hpp"
#include "cmoe/model.hpp"

namespace cmoe {

// Checkpoint directory layout:
//   manifest.json  - list of {name, shape, dtype:"f32", byte_offset}
//   weights.bin    - contiguous little-endian float32 in manifest order
//   config.json    - the model configuration
void save_checkpoint(const std::string& dir, const ModelConfig& cfg, ModelWeights& w);

struct LoadedModel {
  ModelConfig cfg;
  ModelWeights weights;
};
LoadedModel load_checkpoint(const std::string& dir);

// JSON codecs. Parsing rejects unknown or mistyped keys by name.
ModelConfig model_config_from_json_text(const std::string& text);
std::string model_config_to_json_text(const ModelConfig& cfg);
ModelConfig load_model_config(const std::string& path);

TrainConfig train_config_from_json_text(const std::string& text);
std::string train_config_to_json_text(const TrainConfig& cfg);
TrainConfig load_train_config(const std::string& path);

}  // namespace cmoe
