#include "masklab/inference.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "masklab/masking.hpp"
#include "masklab/position.hpp"
#include "masklab/rng.hpp"

namespace masklab {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Row-vector times matrix, accumulating in ascending inner index like the
// batch matmul kernel so f64 results agree bit for bit.
void vecmat(const std::vector<double>& x, const std::vector<double>& w,
            int rows, int cols, std::vector<double>& out) {
  out.assign(static_cast<std::size_t>(cols), 0.0);
  for (int p = 0; p < rows; ++p) {
    const double xv = x[static_cast<std::size_t>(p)];
    const std::size_t wo = static_cast<std::size_t>(p) * cols;
    for (int j = 0; j < cols; ++j) out[static_cast<std::size_t>(j)] += xv * w[wo + j];
  }
}

void rmsnorm_row(const std::vector<double>& x, const std::vector<double>& w,
                 double eps, std::vector<double>& out) {
  const int d = static_cast<int>(x.size());
  double ms = 0.0;
  for (int j = 0; j < d; ++j) ms += x[static_cast<std::size_t>(j)] * x[static_cast<std::size_t>(j)];
  ms /= d;
  const double r = 1.0 / std::sqrt(ms + eps);
  out.resize(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    out[static_cast<std::size_t>(j)] = x[static_cast<std::size_t>(j)] * r * w[static_cast<std::size_t>(j)];
  }
}

void rotate_row(std::vector<double>& x, int position, double base) {
  const int d = static_cast<int>(x.size());
  const int half = d / 2;
  for (int k = 0; k < half; ++k) {
    const double freq = std::pow(base, -2.0 * k / d);
    const double ang = position * freq;
    const double c = std::cos(ang);
    const double s = std::sin(ang);
    const double x0 = x[static_cast<std::size_t>(2 * k)];
    const double x1 = x[static_cast<std::size_t>(2 * k) + 1];
    x[static_cast<std::size_t>(2 * k)] = c * x0 - s * x1;
    x[static_cast<std::size_t>(2 * k) + 1] = s * x0 + c * x1;
  }
}

double silu_scalar(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace

KVCache::KVCache(int n_layers, int n_heads, int head_dim, int window)
    : layers_(n_layers), heads_(n_heads), head_dim_(head_dim), window_(window) {
  check(n_layers >= 1 && n_heads >= 1 && head_dim >= 1,
        "KVCache: layers, heads, head_dim must be >= 1");
  check(window >= 0, "KVCache: window must be >= 0");
  slots_.resize(static_cast<std::size_t>(layers_) * heads_);
}

KVCache::Slot& KVCache::slot(int layer, int head) {
  check(layer >= 0 && layer < layers_ && head >= 0 && head < heads_,
        "KVCache: layer/head out of range");
  return slots_[static_cast<std::size_t>(layer) * heads_ + head];
}

const KVCache::Slot& KVCache::slot(int layer, int head) const {
  return const_cast<KVCache*>(this)->slot(layer, head);
}

const double* KVCache::k_at(int layer, int head, int j) const {
  const Slot& s = slot(layer, head);
  check(j >= 0 && j < stored(), "KVCache: entry index out of range");
  return s.k.data() + static_cast<std::size_t>(j) * head_dim_;
}

const double* KVCache::v_at(int layer, int head, int j) const {
  const Slot& s = slot(layer, head);
  check(j >= 0 && j < stored(), "KVCache: entry index out of range");
  return s.v.data() + static_cast<std::size_t>(j) * head_dim_;
}

void KVCache::begin_token(int position) {
  check(position >= 0, "KVCache: negative position");
  for (const Slot& s : slots_) {
    if (s.count != seen_) {
      throw std::runtime_error(
          "KVCache: corrupted cache, slot holds " + std::to_string(s.count) +
          " rows after " + std::to_string(seen_) + " tokens");
    }
  }
  if (seen_ > 0 && position != positions_.back() + 1) {
    throw std::runtime_error("KVCache: non-consecutive position " +
                             std::to_string(position));
  }
  positions_.push_back(position);
  ++seen_;
  if (window_ > 0 && static_cast<int>(positions_.size()) > window_) {
    positions_.erase(positions_.begin());
  }
}

void KVCache::push(int layer, int head, const std::vector<double>& k,
                   const std::vector<double>& v) {
  check(static_cast<int>(k.size()) == head_dim_ &&
            static_cast<int>(v.size()) == head_dim_,
        "KVCache: k/v row size mismatch");
  Slot& s = slot(layer, head);
  if (s.count >= seen_) {
    throw std::runtime_error("KVCache: duplicate push for layer " +
                             std::to_string(layer) + " head " +
                             std::to_string(head));
  }
  s.k.insert(s.k.end(), k.begin(), k.end());
  s.v.insert(s.v.end(), v.begin(), v.end());
  ++s.count;
  const std::size_t cap =
      static_cast<std::size_t>(stored()) * static_cast<std::size_t>(head_dim_);
  if (s.k.size() > cap) {
    s.k.erase(s.k.begin(), s.k.end() - static_cast<std::ptrdiff_t>(cap));
    s.v.erase(s.v.begin(), s.v.end() - static_cast<std::ptrdiff_t>(cap));
  }
}

void DecodeConfig::validate() const {
  if (max_new_tokens < 0) {
    throw std::invalid_argument("DecodeConfig: max_new_tokens must be >= 0");
  }
  if (sampling == Sampling::temperature && !(temperature > 0.0)) {
    throw std::invalid_argument("DecodeConfig: temperature must be > 0");
  }
  if (window < 0) throw std::invalid_argument("DecodeConfig: window must be >= 0");
}

DecoderRuntime::DecoderRuntime(const Model& model) : cfg_(model.config()) {
  std::map<std::string, Tensor> by_name;
  for (const auto& [name, p] : model.named_params()) by_name.emplace(name, p);
  auto take = [&by_name](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw std::runtime_error("DecoderRuntime: missing parameter " + name);
    }
    return it->second.values();
  };

  embed_ = take("embed");
  if (cfg_.pe.kind == PEKind::ape_learn) pos_table_ = take("pos_table");
  final_norm_ = take("final_norm");
  lm_head_ = take("lm_head");
  layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    LayerW& lw = layers_[static_cast<std::size_t>(l)];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    lw.attn_norm = take(prefix + "attn_norm");
    lw.ffn_norm = take(prefix + "ffn_norm");
    lw.w_gate = take(prefix + "w_gate");
    lw.w_up = take(prefix + "w_up");
    lw.w_down = take(prefix + "w_down");
    lw.heads.resize(static_cast<std::size_t>(cfg_.n_heads));
    for (int h = 0; h < cfg_.n_heads; ++h) {
      const std::string hp = prefix + "h" + std::to_string(h) + ".";
      HeadW& hw = lw.heads[static_cast<std::size_t>(h)];
      hw.wq = take(hp + "wq");
      hw.wk = take(hp + "wk");
      hw.wv = take(hp + "wv");
      hw.wo = take(hp + "wo");
    }
  }
  if (cfg_.pe.kind == PEKind::alibi) alibi_ = alibi_slopes(cfg_.n_heads);
}

KVCache DecoderRuntime::make_cache(int window) const {
  return KVCache(cfg_.n_layers, cfg_.n_heads, cfg_.head_dim(), window);
}

std::vector<double> DecoderRuntime::step(KVCache& cache, int token) const {
  check(token >= 0 && token < cfg_.vocab_size,
        "decode: token " + std::to_string(token) + " out of range");
  check(cache.layers() == cfg_.n_layers && cache.heads() == cfg_.n_heads &&
            cache.head_dim() == cfg_.head_dim(),
        "decode: cache shape does not match the model");
  const int d = cfg_.model_dim;
  const int dh = cfg_.head_dim();
  const int pos = cache.seen();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const MaskSpec spec = cfg_.mask_spec(MaskMode::extrapolate);

  if (cfg_.pe.kind == PEKind::ape_learn && pos >= cfg_.max_len) {
    throw std::invalid_argument(
        "decode: ape-learn table does not cover position " + std::to_string(pos));
  }
  cache.begin_token(pos);

  std::vector<double> x(embed_.begin() + static_cast<std::size_t>(token) * d,
                        embed_.begin() + static_cast<std::size_t>(token + 1) * d);
  if (cfg_.pe.kind == PEKind::ape_sin) {
    Tensor table = sinusoidal_table(pos + 1, d, cfg_.pe.rope_base);
    for (int j = 0; j < d; ++j) {
      x[static_cast<std::size_t>(j)] +=
          table.at(static_cast<std::int64_t>(pos) * d + j);
    }
  } else if (cfg_.pe.kind == PEKind::ape_learn) {
    for (int j = 0; j < d; ++j) {
      x[static_cast<std::size_t>(j)] +=
          pos_table_[static_cast<std::size_t>(pos) * d + j];
    }
  }

  std::vector<double> h, q, k, v, mixed, proj, row;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const LayerW& lw = layers_[static_cast<std::size_t>(l)];
    rmsnorm_row(x, lw.attn_norm, cfg_.norm_eps, h);
    std::vector<double> attn_out(static_cast<std::size_t>(d), 0.0);
    for (int hh = 0; hh < cfg_.n_heads; ++hh) {
      const HeadW& hw = lw.heads[static_cast<std::size_t>(hh)];
      vecmat(h, hw.wq, d, dh, q);
      vecmat(h, hw.wk, d, dh, k);
      vecmat(h, hw.wv, d, dh, v);
      if (cfg_.pe.kind == PEKind::rope) {
        rotate_row(q, pos, cfg_.pe.rope_base);
        rotate_row(k, pos, cfg_.pe.rope_base);
      }
      cache.push(l, hh, k, v);

      const int m = cache.stored();
      const bool pseudo = cfg_.mask_kind == MaskKind::stablemask;
      row.assign(static_cast<std::size_t>(m) + (pseudo ? 1 : 0), 0.0);
      for (int j = 0; j < m; ++j) {
        const double* kj = cache.k_at(l, hh, j);
        double s = 0.0;
        for (int p = 0; p < dh; ++p) s += q[static_cast<std::size_t>(p)] * kj[p];
        s *= scale;
        if (cfg_.pe.kind == PEKind::alibi) {
          s += -alibi_[static_cast<std::size_t>(hh)] * (pos - cache.position_at(j));
        }
        row[static_cast<std::size_t>(j)] = s;
      }
      if (pseudo) row[static_cast<std::size_t>(m)] = row_tau(pos + 1, pos + 1, spec, hh);
      softmax_inplace(row.data(), static_cast<int>(row.size()));

      mixed.assign(static_cast<std::size_t>(dh), 0.0);
      for (int j = 0; j < m; ++j) {
        const double w = row[static_cast<std::size_t>(j)];
        const double* vj = cache.v_at(l, hh, j);
        for (int p = 0; p < dh; ++p) mixed[static_cast<std::size_t>(p)] += w * vj[p];
      }
      vecmat(mixed, hw.wo, dh, d, proj);
      for (int j = 0; j < d; ++j) attn_out[static_cast<std::size_t>(j)] += proj[static_cast<std::size_t>(j)];
    }
    for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += attn_out[static_cast<std::size_t>(j)];

    rmsnorm_row(x, lw.ffn_norm, cfg_.norm_eps, h);
    const int f = static_cast<int>(lw.w_gate.size()) / d;
    std::vector<double> gate, up;
    vecmat(h, lw.w_gate, d, f, gate);
    vecmat(h, lw.w_up, d, f, up);
    for (int j = 0; j < f; ++j) {
      gate[static_cast<std::size_t>(j)] =
          silu_scalar(gate[static_cast<std::size_t>(j)]) * up[static_cast<std::size_t>(j)];
    }
    std::vector<double> ff;
    vecmat(gate, lw.w_down, f, d, ff);
    for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += ff[static_cast<std::size_t>(j)];
  }

  rmsnorm_row(x, final_norm_, cfg_.norm_eps, h);
  std::vector<double> logits;
  vecmat(h, lm_head_, d, cfg_.vocab_size, logits);
  return logits;
}

std::vector<double> decode_step(const Model& model, KVCache& cache, int token) {
  DecoderRuntime runtime(model);
  return runtime.step(cache, token);
}

int argmax_token(const std::vector<double>& logits) {
  check(!logits.empty(), "argmax_token: empty logits");
  return static_cast<int>(
      std::max_element(logits.begin(), logits.end()) - logits.begin());
}

int sample_token(const std::vector<double>& logits, double temperature,
                 std::mt19937_64& rng) {
  check(!logits.empty(), "sample_token: empty logits");
  check(temperature > 0.0, "sample_token: temperature must be > 0");
  std::vector<double> probs(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) probs[i] = logits[i] / temperature;
  softmax_inplace(probs.data(), static_cast<int>(probs.size()));
  double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;
}

std::vector<int> generate(const Model& model, const std::vector<int>& prompt,
                          const DecodeConfig& cfg) {
  cfg.validate();
  check(!prompt.empty(), "generate: empty prompt");
  DecoderRuntime runtime(model);
  KVCache cache = runtime.make_cache(cfg.window);
  std::vector<double> logits;
  for (int t : prompt) logits = runtime.step(cache, t);

  std::vector<int> out = prompt;
  std::mt19937_64 rng(cfg.seed);
  for (int i = 0; i < cfg.max_new_tokens; ++i) {
    int next = cfg.sampling == Sampling::greedy
                   ? argmax_token(logits)
                   : sample_token(logits, cfg.temperature, rng);
    out.push_back(next);
    logits = runtime.step(cache, next);
  }
  return out;
}

std::vector<double> windowed_ppl(const Model& model, const std::vector<int>& seq,
                                 int W) {
  check(W >= 0, "windowed_ppl: window must be >= 0");
  check(seq.size() >= 2, "windowed_ppl: need at least two tokens");
  DecoderRuntime runtime(model);
  KVCache cache = runtime.make_cache(W);
  std::vector<double> losses(seq.size() - 1);
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    std::vector<double> logits = runtime.step(cache, seq[i]);
    double lse = logsumexp(logits.data(), static_cast<int>(logits.size()));
    losses[i] = lse - logits[static_cast<std::size_t>(seq[i + 1])];
  }
  return losses;
}

}  // namespace masklab
