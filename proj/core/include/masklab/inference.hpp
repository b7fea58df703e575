// Incremental decoding with a KV cache.
//
// Each decode step computes one attention row per layer/head against the
// cached keys, with the pseudo suffix collapsed into a single tau logit:
// tau_infer against the trained length while the position is within it,
// tau_extrapolate beyond. The scalar math replays the batch forward's
// operation order, so on an f64 model the logits agree bit for bit with
// forward_logits over the same prefix.
//
// The runtime always computes in f64; f32 models are promoted once at
// construction, so their decode agrees with the batch forward only to
// f32 round-off.
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "masklab/model.hpp"

namespace masklab {

// Per-layer/head key and value rows for the most recent tokens. With a
// window only the last `window` entries are kept; positions_ records each
// entry's absolute 0-based position so RoPE and ALiBi stay anchored.
class KVCache {
 public:
  // window == 0 keeps everything.
  KVCache(int n_layers, int n_heads, int head_dim, int window = 0);

  int layers() const { return layers_; }
  int heads() const { return heads_; }
  int head_dim() const { return head_dim_; }
  int window() const { return window_; }
  // Tokens appended so far (monotonic, unaffected by eviction).
  int seen() const { return seen_; }
  // Entries currently held per head.
  int stored() const { return static_cast<int>(positions_.size()); }
  int position_at(int j) const { return positions_[static_cast<std::size_t>(j)]; }

  const double* k_at(int layer, int head, int j) const;
  const double* v_at(int layer, int head, int j) const;

  // Call order per token: begin_token(position), then exactly one push per
  // (layer, head). begin_token verifies the previous token filled every
  // slot and throws on a corrupted (length-mismatched) cache.
  void begin_token(int position);
  void push(int layer, int head, const std::vector<double>& k,
            const std::vector<double>& v);

 private:
  struct Slot {
    std::vector<double> k, v;  // stored() rows of head_dim each
    int count = 0;             // rows ever pushed, compared against seen_
  };
  Slot& slot(int layer, int head);
  const Slot& slot(int layer, int head) const;

  int layers_, heads_, head_dim_, window_;
  int seen_ = 0;
  std::vector<int> positions_;
  std::vector<Slot> slots_;
};

enum class Sampling { greedy, temperature };

struct DecodeConfig {
  int max_new_tokens = 0;
  Sampling sampling = Sampling::greedy;
  double temperature = 1.0;
  int window = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Weights flattened to f64 once so decode steps are allocation-light.
class DecoderRuntime {
 public:
  explicit DecoderRuntime(const Model& model);

  const ModelConfig& config() const { return cfg_; }
  KVCache make_cache(int window = 0) const;

  // Appends `token` at the cache's next position and returns the logits
  // for the following token.
  std::vector<double> step(KVCache& cache, int token) const;

 private:
  struct HeadW {
    std::vector<double> wq, wk, wv, wo;
  };
  struct LayerW {
    std::vector<double> attn_norm, ffn_norm;
    std::vector<HeadW> heads;
    std::vector<double> w_gate, w_up, w_down;
  };

  ModelConfig cfg_;
  std::vector<double> embed_, pos_table_, final_norm_, lm_head_;
  std::vector<LayerW> layers_;
  std::vector<double> alibi_;
};

// One-shot wrapper over DecoderRuntime for a single step.
std::vector<double> decode_step(const Model& model, KVCache& cache, int token);

int argmax_token(const std::vector<double>& logits);
// Draws from softmax(logits / temperature).
int sample_token(const std::vector<double>& logits, double temperature,
                 std::mt19937_64& rng);

// Feeds the prompt, then decodes max_new_tokens more. Returns prompt +
// continuation. Greedy decoding ignores the seed.
std::vector<int> generate(const Model& model, const std::vector<int>& prompt,
                          const DecodeConfig& cfg);

// Per-token negative log-likelihood of seq[1..] under sliding-window
// decoding with window W (W == 0 keeps the full cache). Entry i is the
// loss of predicting seq[i + 1].
std::vector<double> windowed_ppl(const Model& model, const std::vector<int>& seq,
                                 int W);

}  // namespace masklab
