#include "masklab/training.hpp"

#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "masklab/rng.hpp"

namespace masklab {

const char* decay_kind_name(DecayKind k) {
  switch (k) {
    case DecayKind::linear: return "linear";
    case DecayKind::cosine: return "cosine";
  }
  throw std::invalid_argument("decay_kind_name: bad kind");
}

DecayKind decay_kind_from_name(const std::string& name) {
  if (name == "linear") return DecayKind::linear;
  if (name == "cosine") return DecayKind::cosine;
  throw std::invalid_argument("decay_kind_from_name: unknown decay '" + name + "'");
}

void TrainConfig::validate() const {
  if (peak_lr <= 0.0) throw std::invalid_argument("TrainConfig: peak_lr must be > 0");
  if (begin_lr < 0.0) throw std::invalid_argument("TrainConfig: begin_lr must be >= 0");
  if (warmup_steps < 0 || total_steps < 1 || warmup_steps > total_steps) {
    throw std::invalid_argument("TrainConfig: need 0 <= warmup_steps <= total_steps");
  }
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw std::invalid_argument("TrainConfig: betas must lie in [0, 1)");
  }
  if (eps <= 0.0) throw std::invalid_argument("TrainConfig: eps must be > 0");
  if (weight_decay < 0.0) {
    throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  }
  if (clip_norm <= 0.0) throw std::invalid_argument("TrainConfig: clip_norm must be > 0");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (seq_len < 1) throw std::invalid_argument("TrainConfig: seq_len must be >= 1");
}

double lr_at(int step, const TrainConfig& cfg) {
  cfg.validate();
  if (step < 0) throw std::invalid_argument("lr_at: step must be >= 0");
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
    double frac = static_cast<double>(step) / cfg.warmup_steps;
    return cfg.begin_lr + (cfg.peak_lr - cfg.begin_lr) * frac;
  }
  if (step >= cfg.total_steps) return 0.0;
  double span = cfg.total_steps - cfg.warmup_steps;
  double p = (step - cfg.warmup_steps) / span;
  if (cfg.decay == DecayKind::linear) return cfg.peak_lr * (1.0 - p);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * p));
}

double clip_global_norm(const std::vector<std::pair<std::string, Tensor>>& params,
                        double max_norm, double* out_norm) {
  if (max_norm <= 0.0) {
    throw std::invalid_argument("clip_global_norm: max_norm must be > 0");
  }
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    std::int64_t count = p.numel();
    for (std::int64_t i = 0; i < count; ++i) {
      double g = p.grad_at(i);
      if (!std::isfinite(g)) {
        throw std::runtime_error("clip_global_norm: non-finite gradient in '" +
                                 name + "' at index " + std::to_string(i));
      }
      sq += g * g;
    }
  }
  double norm = std::sqrt(sq);
  if (out_norm != nullptr) *out_norm = norm;
  if (norm <= max_norm) return 1.0;
  double factor = max_norm / norm;
  for (const auto& [name, p] : params) {
    (void)name;
    if (!p.has_grad()) continue;
    Tensor t = p;
    std::int64_t count = t.numel();
    for (std::int64_t i = 0; i < count; ++i) {
      t.add_grad(i, (factor - 1.0) * t.grad_at(i));
    }
  }
  return factor;
}

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params,
             const TrainConfig& cfg)
    : params_(std::move(params)),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.eps),
      weight_decay_(cfg.weight_decay) {
  cfg.validate();
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& [name, p] : params_) {
    (void)name;
    m_.push_back(Tensor::zeros(p.shape(), p.dtype()));
    v_.push_back(Tensor::zeros(p.shape(), p.dtype()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, t_);
  double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    const auto& [name, p] = params_[pi];
    Tensor param = p;
    Tensor m = m_[pi];
    Tensor v = v_[pi];
    std::int64_t count = param.numel();
    for (std::int64_t i = 0; i < count; ++i) {
      double g = param.has_grad() ? param.grad_at(i) : 0.0;
      if (!std::isfinite(g)) {
        throw std::runtime_error("AdamW::step: non-finite gradient in '" + name +
                                 "' at index " + std::to_string(i));
      }
      double mi = beta1_ * m.at(i) + (1.0 - beta1_) * g;
      double vi = beta2_ * v.at(i) + (1.0 - beta2_) * g * g;
      m.set(i, mi);
      v.set(i, vi);
      double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
      double value = param.at(i);
      param.set(i, value - lr * (update + weight_decay_ * value));
    }
  }
}

OptStateBlob AdamW::state() const {
  OptStateBlob blob;
  blob.t = t_;
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    blob.m.emplace_back(params_[pi].first, m_[pi]);
    blob.v.emplace_back(params_[pi].first, v_[pi]);
  }
  return blob;
}

void AdamW::load_state(const OptStateBlob& blob) {
  if (blob.m.size() != params_.size() || blob.v.size() != params_.size()) {
    throw std::runtime_error("AdamW::load_state: parameter count mismatch");
  }
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    if (blob.m[pi].first != params_[pi].first ||
        blob.v[pi].first != params_[pi].first) {
      throw std::runtime_error("AdamW::load_state: parameter name mismatch at '" +
                               params_[pi].first + "'");
    }
    if (blob.m[pi].second.shape() != params_[pi].second.shape()) {
      throw std::runtime_error("AdamW::load_state: shape mismatch at '" +
                               params_[pi].first + "'");
    }
    m_[pi].copy_values_from(blob.m[pi].second);
    v_[pi].copy_values_from(blob.v[pi].second);
  }
  t_ = blob.t;
}

std::string step_metrics_to_json(const StepMetrics& m) {
  nlohmann::json j;
  j["step"] = m.step;
  j["loss"] = m.loss;
  j["lr"] = m.lr;
  j["grad_norm"] = m.grad_norm;
  j["wall_ms"] = m.wall_ms;
  return j.dump();
}

TrainResult train_model(Model& model, const SampleFn& sample_fn,
                        const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (!sample_fn) throw std::invalid_argument("train_model: no sample function");
  std::vector<std::pair<std::string, Tensor>> params = model.named_params();
  AdamW adam(params, cfg);
  std::mt19937_64 data_rng(derive_seed(cfg.seed, 1));

  TrainResult result;
  result.history.reserve(static_cast<std::size_t>(cfg.total_steps));
  for (int step = 0; step < cfg.total_steps; ++step) {
    auto t0 = std::chrono::steady_clock::now();
    Graph g;
    Tensor total;
    int count = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      TaskSample s = sample_fn(data_rng);
      s.validate();
      Model::MapLoss ml = model.loss_map(g, s.input, s.target, s.scored);
      total = b == 0 ? ml.sum : g.add(total, ml.sum);
      count += ml.count;
    }
    Tensor loss = g.scale(total, 1.0 / count);
    g.backward(loss);

    double grad_norm = 0.0;
    clip_global_norm(params, cfg.clip_norm, &grad_norm);
    double lr = lr_at(step, cfg);
    adam.step(lr);
    model.zero_all_grads();

    auto t1 = std::chrono::steady_clock::now();
    StepMetrics metrics;
    metrics.step = step;
    metrics.loss = loss.at(0);
    metrics.lr = lr;
    metrics.grad_norm = grad_norm;
    metrics.wall_ms =
        std::chrono::duration_cast<std::chrono::duration<double, std::milli>>(t1 - t0)
            .count();
    if (opts.sink) opts.sink(metrics);
    result.history.push_back(metrics);
    result.steps_run = step + 1;

    if (opts.eval && opts.eval_every > 0 && (step + 1) % opts.eval_every == 0) {
      if (opts.eval(step + 1, model)) {
        result.stopped_early = true;
        break;
      }
    }
  }
  return result;
}

}  // namespace masklab
