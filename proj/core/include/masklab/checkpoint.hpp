// Checkpoints are a single JSON file: config, step counter, RNG state,
// and every tensor as base64 raw little-endian bytes, so a save/load
// round-trip is bit-exact.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "masklab/model.hpp"

namespace masklab {

struct OptStateBlob {
  int t = 0;  // AdamW step counter
  std::vector<std::pair<std::string, Tensor>> m, v;
};

struct Checkpoint {
  ModelConfig config;
  std::int64_t step = 0;
  std::string rng_state;  // serialized mt19937_64, may be empty
  std::vector<std::pair<std::string, Tensor>> params;
  bool has_opt = false;
  OptStateBlob opt;
};

Checkpoint snapshot(const Model& model, std::int64_t step = 0,
                    const std::string& rng_state = "");

void save_checkpoint(const Checkpoint& ck, const std::string& path);

// Throws std::runtime_error on missing files or malformed content and
// std::invalid_argument on config/shape problems.
Checkpoint load_checkpoint(const std::string& path);

// Fresh model with the checkpointed config and weights.
Model restore_model(const Checkpoint& ck);

// ModelConfig <-> JSON text used inside checkpoints and by the CLI.
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace masklab
