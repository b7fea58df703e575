// AdamW training loop with warmup/decay scheduling and gradient clipping.
//
// The loop is deterministic for a fixed seed: data draws come from a
// dedicated RNG stream, and every numeric path accumulates in f64, so two
// runs with the same TrainConfig produce bit-identical metric streams
// (wall time excepted, which is why it lives in its own field).
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "masklab/checkpoint.hpp"
#include "masklab/model.hpp"
#include "masklab/tasks.hpp"

namespace masklab {

enum class DecayKind { linear, cosine };

const char* decay_kind_name(DecayKind k);
DecayKind decay_kind_from_name(const std::string& name);

struct TrainConfig {
  double peak_lr = 1e-3;
  double begin_lr = 0.0;
  int warmup_steps = 100;
  int total_steps = 1000;
  DecayKind decay = DecayKind::cosine;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  int batch_size = 8;
  int seq_len = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

// Linear warmup from begin_lr to peak_lr over warmup_steps, then decay to
// zero at total_steps. Continuous at the junction: lr_at(warmup_steps) is
// exactly peak_lr. Steps past total_steps stay at zero.
double lr_at(int step, const TrainConfig& cfg);

// Scales every gradient in place by min(1, max_norm / global_norm) and
// returns that factor. out_norm receives the pre-clip global norm. NaN or
// inf gradients abort with the offending parameter named.
double clip_global_norm(const std::vector<std::pair<std::string, Tensor>>& params,
                        double max_norm, double* out_norm = nullptr);

// Decoupled weight decay: the decay term lr * wd * p is applied outside
// the moment estimates, to every parameter uniformly.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params,
        const TrainConfig& cfg);

  // One update from the gradients currently stored on the parameters.
  // Does not zero them afterwards.
  void step(double lr);

  int t() const { return t_; }

  // Moment estimates in checkpoint form; load_state requires matching
  // parameter names and shapes.
  OptStateBlob state() const;
  void load_state(const OptStateBlob& blob);

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<Tensor> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  int t_ = 0;
};

struct StepMetrics {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

std::string step_metrics_to_json(const StepMetrics& m);

using MetricsSink = std::function<void(const StepMetrics&)>;
// Runs every eval_every steps; returning true stops training early.
using EvalHook = std::function<bool(int step, const Model& model)>;

struct TrainOptions {
  MetricsSink sink;
  EvalHook eval;
  int eval_every = 0;
};

struct TrainResult {
  std::vector<StepMetrics> history;
  int steps_run = 0;
  bool stopped_early = false;
};

// Mean cross-entropy over the scored positions of a fresh batch per step:
// sample, forward, backward, clip, AdamW update. The data RNG is
// derive_seed(cfg.seed, 1), independent of the model-init stream.
TrainResult train_model(Model& model, const SampleFn& sample_fn,
                        const TrainConfig& cfg,
                        const TrainOptions& opts = {});

}  // namespace masklab
