// Decoder-only transformer: token embedding, pre-norm residual blocks
// (RMSNorm, masked multi-head attention, SwiGLU FFN), final norm, untied
// output head. No biases, no dropout.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "masklab/attention.hpp"
#include "masklab/masking.hpp"
#include "masklab/position.hpp"
#include "masklab/tensor.hpp"

namespace masklab {

struct ModelConfig {
  int vocab_size = 0;
  int model_dim = 64;
  int n_layers = 2;
  int n_heads = 2;
  int ffn_mult = 4;
  int max_len = 32;  // trained context length N
  PEConfig pe;
  MaskKind mask_kind = MaskKind::stablemask;
  double gamma = 0.5;
  bool headwise_gamma = false;
  Dtype dtype = Dtype::f64;
  double norm_eps = 1e-5;
  double init_std = 0.02;

  int head_dim() const { return model_dim / n_heads; }
  MaskSpec mask_spec(MaskMode mode) const;
  void validate() const;
};

struct LayerWeights {
  Tensor attn_norm;  // model_dim
  MhaWeights mha;
  Tensor ffn_norm;          // model_dim
  Tensor w_gate, w_up;      // model_dim x ffn_dim
  Tensor w_down;            // ffn_dim x model_dim
};

struct ForwardOptions {
  MaskMode mode = MaskMode::train;
  AttnTrace* trace = nullptr;
  // When set, receives a detached f64 copy of the hidden state right
  // after each layer's attention residual (before that layer's FFN).
  std::vector<Tensor>* post_attn_hidden = nullptr;
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // Stable name -> tensor view of every trainable parameter; the order is
  // fixed and doubles as the init draw order.
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  Tensor param(const std::string& name) const;
  void load_params(const std::vector<std::pair<std::string, Tensor>>& params);
  void zero_all_grads() const;
  std::int64_t param_count() const;

  // Logits per position, n x vocab. Train and infer modes require
  // n <= max_len; extrapolate lifts the cap (ape-learn still needs the
  // table to cover n).
  Tensor forward_logits(Graph& g, const std::vector<int>& tokens,
                        const ForwardOptions& opts = {}) const;

  // Mean next-token cross-entropy over the first n-1 positions.
  Tensor loss_lm(Graph& g, const std::vector<int>& tokens) const;

  struct MapLoss {
    Tensor sum;  // weighted cross-entropy sum
    int count = 0;
  };
  // Position-wise mapping loss: target[i] scored where mask[i] != 0.
  MapLoss loss_map(Graph& g, const std::vector<int>& input,
                   const std::vector<int>& target,
                   const std::vector<std::uint8_t>& mask) const;

  // Overwrites layer 0 with the constructive position-recovery weights:
  // all embeddings collapse to e_0, head 0 reads a constant value of one
  // and writes its mask ratio into hidden dim 1 (0-based), other heads'
  // outputs are silenced. After this, post_attn_hidden[0][i][1] == xi_i.
  // Requires stablemask, f64, model_dim >= 2, and pe in {none, rope}.
  void apply_position_probe();

 private:
  void init_weights(std::uint64_t seed);

  ModelConfig cfg_;
  Tensor embed_;      // vocab x dim
  Tensor pos_table_;  // max_len x dim, only for ape-learn
  std::vector<LayerWeights> layers_;
  Tensor final_norm_;
  Tensor lm_head_;  // dim x vocab
};

}  // namespace masklab
