// One run = one config file. The format is flat key-value lines grouped
// into [model], [train], [task], [run] sections; every key has a default,
// unknown keys are errors, and the full round trip
// run_config_from_text(run_config_to_text(cfg)) reproduces cfg.
#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "masklab/model.hpp"
#include "masklab/tasks.hpp"
#include "masklab/training.hpp"

namespace masklab {

struct RunConfig {
  ModelConfig model;  // vocab_size 0 means "derive from the task"
  TrainConfig train;
  TaskSpec task;
  std::string corpus_path;  // char_lm reads training chunks from here
  MaskMode mode = MaskMode::train;
  std::string out_dir = "runs";
  std::uint64_t seed = 0;

  // Fills vocab_size from the task when it is 0 and copies the run seed
  // into the task and train sub-configs.
  void resolve();

  // Sub-config validation plus cross-checks: the task must fit the model
  // context, char_lm needs a corpus, and training only makes sense in
  // train mode (for_training enables that last check).
  void validate(bool for_training = false) const;
};

// section -> key -> raw value. Lines are `key = value`, comments start
// with '#', section headers are `[name]`. Throws std::invalid_argument
// naming the offending line.
using KvSections = std::map<std::string, std::map<std::string, std::string>>;
KvSections parse_kv_text(const std::string& text);

// Defaults overlaid with whatever the text supplies. Unknown sections or
// keys throw; values are parsed strictly (no trailing junk).
RunConfig run_config_from_text(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Sets one key, addressed as "section.key" exactly as written in the
// file format ("model.gamma", "run.seed", ...).
void apply_override(RunConfig& cfg, const std::string& dotted_key,
                    const std::string& value);

// Complete config file text, every key spelled out.
std::string run_config_to_text(const RunConfig& cfg);

}  // namespace masklab
