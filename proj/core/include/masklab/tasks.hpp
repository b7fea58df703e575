// Synthetic data generators and evaluators.
//
// The position tasks feed all-identical (or nearly so) inputs whose targets
// depend only on absolute position, so a model can solve them iff its
// architecture encodes position information that survives softmax.
// softCopyLast is a Markov chain whose mutual-information structure is
// known in closed form, which the disproportional-attention probe needs.
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "masklab/masking.hpp"
#include "masklab/model.hpp"

namespace masklab {

enum class TaskKind { pos_mapping, pos_identify, odd_even, soft_copy_last, char_lm };

const char* task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

struct TaskSample {
  std::vector<int> input;
  std::vector<int> target;
  std::vector<std::uint8_t> scored;  // positions that count toward loss/accuracy

  int length() const { return static_cast<int>(input.size()); }
  // Equal lengths, at least one scored position.
  void validate() const;
};

// Symbol layout: 0 is the filler token, 1..n_max are position values, and
// n_max + 1 is the ABE marker for pos_identify. vocab() covers all of them.
struct TaskSpec {
  TaskKind kind = TaskKind::pos_mapping;
  int min_len = 4;
  int max_len = 32;
  int n_max = 32;
  std::uint64_t seed = 0;

  int vocab() const { return n_max + 2; }
  int abe_token() const { return n_max + 1; }
  void validate() const;
};

// Input of n filler tokens, target 1..n. Deterministic in n.
TaskSample gen_pos_mapping(int n, const TaskSpec& spec = {});

// Filler input with the ABE marker at position k (1-based); the target
// holds k at that position and filler elsewhere. score_all keeps every
// position in the loss; otherwise only position k is scored.
TaskSample gen_pos_identify(int n, int k, const TaskSpec& spec = {},
                            bool score_all = true);

// Input of n filler tokens, target alternates 1,2,1,2,... Deterministic.
TaskSample gen_odd_even(int n, const TaskSpec& spec = {});

// Copy probability for the transition that appends token k+1 to a prefix
// of k tokens: 1 - e^{-k}. The first token (k = 0) is uniform.
double soft_copy_prob(int k);

// Samples x_1..x_n from the softCopyLast chain: each next token repeats
// the previous one with probability soft_copy_prob(k), otherwise it is
// uniform over the whole vocab (which may repeat it by chance). Returned
// as a next-token sample: target[i] = input[i+1], last position unscored.
TaskSample gen_soft_copy_last(int n, int vocab, std::mt19937_64& rng);

// I(X_{<=i}; X_{n+1}) in nats for the softCopyLast chain over `vocab`
// symbols. By the Markov property this equals I(X_i; X_{n+1}); the chain
// from X_i to X_{n+1} composes transitions i..n, each of which is
// c*Id + (1-c)*Uniform, so the composite keeps that form with
// c = prod_{k=i}^{n} soft_copy_prob(k).
double soft_copy_mutual_info(int i, int n, int vocab);

// I(X_{<=i}; X_{n+1}) / I(X_{<=n}; X_{n+1}), the information-justified
// attention share of the first i tokens. Requires 1 <= i <= n, n >= 1.
double mutual_info_ratio(int i, int n, int vocab);

// Splits a plain-text file into fixed-length byte chunks, one next-token
// sample per chunk (within-chunk shift, last position unscored). Bytes are
// the vocab, so any UTF-8 file works unmodified. Empty files throw.
std::vector<TaskSample> ingest_char_corpus(const std::string& path,
                                           int chunk_len = 64);
std::vector<TaskSample> chunk_bytes(const std::vector<int>& bytes,
                                    int chunk_len);

std::vector<int> encode_bytes(const std::string& text);
std::string decode_bytes(const std::vector<int>& tokens);

// Greedy argmax exact-match rate over scored positions, pooled across
// samples. Ties resolve to the lowest token id.
double eval_accuracy(const Model& model, const std::vector<TaskSample>& samples,
                     MaskMode mode = MaskMode::train);

// Mean loss_map cross-entropy per scored position, pooled across samples.
double eval_loss(const Model& model, const std::vector<TaskSample>& samples);

// Prepends k sentinel tokens that absorb attention mass without carrying
// task content. Targets get filler and the new positions are never scored.
TaskSample gen_at_baseline(const TaskSample& sample, int k_tokens,
                           int at_token);

// Draws one training sample per call; n (and k for pos_identify) are drawn
// fresh from spec's ranges. char_lm has no generator here, use a corpus.
using SampleFn = std::function<TaskSample(std::mt19937_64&)>;
SampleFn task_sampler(const TaskSpec& spec);

// Uniform draw over preloaded corpus chunks.
SampleFn corpus_sampler(std::vector<TaskSample> chunks);

// Deterministic held-out set: pos_mapping/odd_even cycle n over the spec
// range, the random tasks draw from rng(seed).
std::vector<TaskSample> make_eval_samples(const TaskSpec& spec, int count,
                                          std::uint64_t seed);

// One JSON object per line; round-trips through task_sample_from_json.
std::string task_sample_to_json(const TaskSample& s);
TaskSample task_sample_from_json(const std::string& line);
void dump_task_samples(const std::vector<TaskSample>& samples,
                       const std::string& path);

}  // namespace masklab
