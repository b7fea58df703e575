#include "masklab/run_config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace masklab {
namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("run_config: " + msg);
}

std::string trim(const std::string& s) {
  std::size_t a = 0;
  std::size_t b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

int parse_int(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  int out = 0;
  try {
    out = std::stoi(value, &used);
  } catch (const std::exception&) {
    fail("key '" + key + "' wants an integer, got '" + value + "'");
  }
  if (used != value.size()) {
    fail("key '" + key + "' has trailing junk in '" + value + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(value, &used);
  } catch (const std::exception&) {
    fail("key '" + key + "' wants an unsigned integer, got '" + value + "'");
  }
  if (used != value.size()) {
    fail("key '" + key + "' has trailing junk in '" + value + "'");
  }
  return static_cast<std::uint64_t>(out);
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(value, &used);
  } catch (const std::exception&) {
    fail("key '" + key + "' wants a number, got '" + value + "'");
  }
  if (used != value.size()) {
    fail("key '" + key + "' has trailing junk in '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  fail("key '" + key + "' wants true/false, got '" + value + "'");
}

template <typename Fn>
auto named(const std::string& key, const std::string& value, Fn fn) {
  try {
    return fn(value);
  } catch (const std::invalid_argument& e) {
    fail("key '" + key + "': " + e.what());
  }
}

void set_model_key(ModelConfig& m, const std::string& key,
                   const std::string& value) {
  if (key == "vocab_size") m.vocab_size = parse_int(key, value);
  else if (key == "model_dim") m.model_dim = parse_int(key, value);
  else if (key == "n_layers") m.n_layers = parse_int(key, value);
  else if (key == "n_heads") m.n_heads = parse_int(key, value);
  else if (key == "ffn_mult") m.ffn_mult = parse_int(key, value);
  else if (key == "max_len") m.max_len = parse_int(key, value);
  else if (key == "mask")
    m.mask_kind = named(key, value, mask_kind_from_name);
  else if (key == "gamma") m.gamma = parse_double(key, value);
  else if (key == "headwise_gamma") m.headwise_gamma = parse_bool(key, value);
  else if (key == "pe") m.pe.kind = named(key, value, pe_kind_from_name);
  else if (key == "rope_base") m.pe.rope_base = parse_double(key, value);
  else if (key == "dtype") m.dtype = named(key, value, dtype_from_name);
  else if (key == "norm_eps") m.norm_eps = parse_double(key, value);
  else if (key == "init_std") m.init_std = parse_double(key, value);
  else fail("unknown key 'model." + key + "'");
}

void set_train_key(TrainConfig& t, const std::string& key,
                   const std::string& value) {
  if (key == "peak_lr") t.peak_lr = parse_double(key, value);
  else if (key == "begin_lr") t.begin_lr = parse_double(key, value);
  else if (key == "warmup_steps") t.warmup_steps = parse_int(key, value);
  else if (key == "total_steps") t.total_steps = parse_int(key, value);
  else if (key == "decay")
    t.decay = named(key, value, decay_kind_from_name);
  else if (key == "beta1") t.beta1 = parse_double(key, value);
  else if (key == "beta2") t.beta2 = parse_double(key, value);
  else if (key == "eps") t.eps = parse_double(key, value);
  else if (key == "weight_decay") t.weight_decay = parse_double(key, value);
  else if (key == "clip_norm") t.clip_norm = parse_double(key, value);
  else if (key == "batch_size") t.batch_size = parse_int(key, value);
  else if (key == "seq_len") t.seq_len = parse_int(key, value);
  else fail("unknown key 'train." + key + "'");
}

void set_task_key(RunConfig& cfg, const std::string& key,
                  const std::string& value) {
  if (key == "kind")
    cfg.task.kind = named(key, value, task_kind_from_name);
  else if (key == "min_len") cfg.task.min_len = parse_int(key, value);
  else if (key == "max_len") cfg.task.max_len = parse_int(key, value);
  else if (key == "n_max") cfg.task.n_max = parse_int(key, value);
  else if (key == "corpus") cfg.corpus_path = value;
  else fail("unknown key 'task." + key + "'");
}

void set_run_key(RunConfig& cfg, const std::string& key,
                 const std::string& value) {
  if (key == "seed") cfg.seed = parse_u64(key, value);
  else if (key == "mode")
    cfg.mode = named(key, value, mask_mode_from_name);
  else if (key == "out_dir") cfg.out_dir = value;
  else fail("unknown key 'run." + key + "'");
}

void set_key(RunConfig& cfg, const std::string& section,
             const std::string& key, const std::string& value) {
  if (section == "model") set_model_key(cfg.model, key, value);
  else if (section == "train") set_train_key(cfg.train, key, value);
  else if (section == "task") set_task_key(cfg, key, value);
  else if (section == "run") set_run_key(cfg, key, value);
  else fail("unknown section '" + section + "'");
}

}  // namespace

void RunConfig::resolve() {
  if (model.vocab_size == 0) {
    model.vocab_size =
        task.kind == TaskKind::char_lm ? 256 : task.vocab();
  }
  task.seed = seed;
  train.seed = seed;
}

void RunConfig::validate(bool for_training) const {
  model.validate();
  train.validate();
  task.validate();
  if (task.kind == TaskKind::char_lm) {
    if (corpus_path.empty()) fail("char_lm needs task.corpus");
  } else if (model.vocab_size < task.vocab()) {
    fail("model.vocab_size " + std::to_string(model.vocab_size) +
         " cannot hold task vocab " + std::to_string(task.vocab()));
  }
  if (task.max_len > model.max_len) {
    fail("task.max_len " + std::to_string(task.max_len) +
         " exceeds model.max_len " + std::to_string(model.max_len));
  }
  if (train.seq_len > model.max_len) {
    fail("train.seq_len " + std::to_string(train.seq_len) +
         " exceeds model.max_len " + std::to_string(model.max_len));
  }
  if (for_training && mode != MaskMode::train) {
    fail(std::string("run.mode '") + mask_mode_name(mode) +
         "' is not usable for training");
  }
}

KvSections parse_kv_text(const std::string& text) {
  KvSections out;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        fail("line " + std::to_string(lineno) + ": malformed section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      out[section];
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      fail("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    if (section.empty()) {
      fail("line " + std::to_string(lineno) + ": key before any [section]");
    }
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) {
      fail("line " + std::to_string(lineno) + ": empty key");
    }
    auto [it, fresh] = out[section].emplace(key, trim(line.substr(eq + 1)));
    if (!fresh) {
      fail("line " + std::to_string(lineno) + ": duplicate key '" + section +
           "." + key + "'");
    }
  }
  return out;
}

RunConfig run_config_from_text(const std::string& text) {
  RunConfig cfg;
  for (const auto& [section, kv] : parse_kv_text(text)) {
    for (const auto& [key, value] : kv) set_key(cfg, section, key, value);
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("run_config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return run_config_from_text(buf.str());
}

void apply_override(RunConfig& cfg, const std::string& dotted_key,
                    const std::string& value) {
  std::size_t dot = dotted_key.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == dotted_key.size()) {
    fail("override key '" + dotted_key + "' is not 'section.key'");
  }
  set_key(cfg, dotted_key.substr(0, dot), dotted_key.substr(dot + 1), value);
}

std::string run_config_to_text(const RunConfig& cfg) {
  std::ostringstream out;
  out.precision(17);
  out << "[model]\n";
  out << "vocab_size = " << cfg.model.vocab_size << "\n";
  out << "model_dim = " << cfg.model.model_dim << "\n";
  out << "n_layers = " << cfg.model.n_layers << "\n";
  out << "n_heads = " << cfg.model.n_heads << "\n";
  out << "ffn_mult = " << cfg.model.ffn_mult << "\n";
  out << "max_len = " << cfg.model.max_len << "\n";
  out << "mask = " << mask_kind_name(cfg.model.mask_kind) << "\n";
  out << "gamma = " << cfg.model.gamma << "\n";
  out << "headwise_gamma = " << (cfg.model.headwise_gamma ? "true" : "false")
      << "\n";
  out << "pe = " << pe_kind_name(cfg.model.pe.kind) << "\n";
  out << "rope_base = " << cfg.model.pe.rope_base << "\n";
  out << "dtype = " << dtype_name(cfg.model.dtype) << "\n";
  out << "norm_eps = " << cfg.model.norm_eps << "\n";
  out << "init_std = " << cfg.model.init_std << "\n";
  out << "\n[train]\n";
  out << "peak_lr = " << cfg.train.peak_lr << "\n";
  out << "begin_lr = " << cfg.train.begin_lr << "\n";
  out << "warmup_steps = " << cfg.train.warmup_steps << "\n";
  out << "total_steps = " << cfg.train.total_steps << "\n";
  out << "decay = " << decay_kind_name(cfg.train.decay) << "\n";
  out << "beta1 = " << cfg.train.beta1 << "\n";
  out << "beta2 = " << cfg.train.beta2 << "\n";
  out << "eps = " << cfg.train.eps << "\n";
  out << "weight_decay = " << cfg.train.weight_decay << "\n";
  out << "clip_norm = " << cfg.train.clip_norm << "\n";
  out << "batch_size = " << cfg.train.batch_size << "\n";
  out << "seq_len = " << cfg.train.seq_len << "\n";
  out << "\n[task]\n";
  out << "kind = " << task_kind_name(cfg.task.kind) << "\n";
  out << "min_len = " << cfg.task.min_len << "\n";
  out << "max_len = " << cfg.task.max_len << "\n";
  out << "n_max = " << cfg.task.n_max << "\n";
  out << "corpus = " << cfg.corpus_path << "\n";
  out << "\n[run]\n";
  out << "seed = " << cfg.seed << "\n";
  out << "mode = " << mask_mode_name(cfg.mode) << "\n";
  out << "out_dir = " << cfg.out_dir << "\n";
  return out.str();
}

}  // namespace masklab
