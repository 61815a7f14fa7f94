#include "spkv/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace spkv {

void TaskSection::validate() const {
  if (name != "palindrome" && name != "copy" && name != "needle")
    throw std::runtime_error("config: unknown task name: " + name);
  if (n_numbers < 1) throw std::runtime_error("config: task.n_numbers must be >= 1");
  if (instruction_len < 0) throw std::runtime_error("config: task.instruction_len must be >= 0");
  if (haystack_len < 3) throw std::runtime_error("config: task.haystack_len must be >= 3");
  if (eval_batches < 1) throw std::runtime_error("config: task.eval_batches must be >= 1");
}

int TaskSection::seq_len() const {
  if (name == "palindrome") {
    PalindromeSpec s;
    s.n_numbers = n_numbers;
    s.instruction_len = instruction_len;
    return s.seq_len();
  }
  if (name == "copy") {
    CopySpec s;
    s.n_numbers = n_numbers;
    return s.seq_len();
  }
  NeedleSpec s;
  s.haystack_len = haystack_len;
  return s.seq_len();
}

int TaskSection::min_vocab() const {
  if (name == "palindrome") {
    PalindromeSpec s;
    s.n_numbers = n_numbers;
    s.instruction_len = instruction_len;
    return s.min_vocab();
  }
  if (name == "copy") {
    CopySpec s;
    s.n_numbers = n_numbers;
    return s.min_vocab();
  }
  NeedleSpec s;
  s.haystack_len = haystack_len;
  return s.min_vocab();
}

void validate_task_fits(const TaskSection& task, const ModelConfig& model) {
  task.validate();
  if (model.vocab_size < task.min_vocab())
    throw std::runtime_error("config: vocab_size " + std::to_string(model.vocab_size) +
                             " below task minimum " + std::to_string(task.min_vocab()));
  if (task.seq_len() > model.max_seq_len)
    throw std::runtime_error("config: task sequence length " + std::to_string(task.seq_len()) +
                             " exceeds max_seq_len " + std::to_string(model.max_seq_len));
}

Batch gen_task_batch(const TaskSection& task, int batch_size, Rng& rng) {
  if (task.name == "palindrome") {
    PalindromeSpec s;
    s.n_numbers = task.n_numbers;
    s.instruction_len = task.instruction_len;
    return gen_palindrome_batch(s, batch_size, rng);
  }
  if (task.name == "copy") {
    CopySpec s;
    s.n_numbers = task.n_numbers;
    return gen_copy_batch(s, batch_size, rng);
  }
  NeedleSpec s;
  s.haystack_len = task.haystack_len;
  return gen_needle_batch(s, batch_size, rng);
}

double task_chance_nll(const TaskSection& task) {
  if (task.name == "palindrome") {
    PalindromeSpec s;
    s.n_numbers = task.n_numbers;
    s.instruction_len = task.instruction_len;
    return static_cast<double>(chance_nll(s));
  }
  // copy and needle supervise only uniformly drawn number tokens
  return std::log(100.0);
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw std::runtime_error("config: bad integer for " + key + ": '" + v + "'");
  }
}

double parse_float(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw std::runtime_error("config: bad number for " + key + ": '" + v + "'");
  }
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

}  // namespace

FileConfig parse_config_text(const std::string& text) {
  FileConfig fc;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  // one entry per accepted key; anything else is a config error
  const std::map<std::string, Setter> keys = {
      {"model.n_layers", [&](const std::string& k, const std::string& v) { fc.model.n_layers = static_cast<int>(parse_int(k, v)); }},
      {"model.d_model", [&](const std::string& k, const std::string& v) { fc.model.d_model = static_cast<int>(parse_int(k, v)); }},
      {"model.n_q_heads", [&](const std::string& k, const std::string& v) { fc.model.n_q_heads = static_cast<int>(parse_int(k, v)); }},
      {"model.n_kv_heads", [&](const std::string& k, const std::string& v) { fc.model.n_kv_heads = static_cast<int>(parse_int(k, v)); }},
      {"model.d_head", [&](const std::string& k, const std::string& v) { fc.model.d_head = static_cast<int>(parse_int(k, v)); }},
      {"model.d_ffn", [&](const std::string& k, const std::string& v) { fc.model.d_ffn = static_cast<int>(parse_int(k, v)); }},
      {"model.vocab_size", [&](const std::string& k, const std::string& v) { fc.model.vocab_size = static_cast<int>(parse_int(k, v)); }},
      {"model.max_seq_len", [&](const std::string& k, const std::string& v) { fc.model.max_seq_len = static_cast<int>(parse_int(k, v)); }},
      {"model.rope_base", [&](const std::string& k, const std::string& v) { fc.model.rope_base = static_cast<float>(parse_float(k, v)); }},
      {"model.layer_kinds",
       [&](const std::string&, const std::string& v) {
         fc.model.layer_kinds.clear();
         if (trim(v).empty()) return;
         for (const std::string& name : split(v, ','))
           fc.model.layer_kinds.push_back(attention_kind_from_name(name));
       }},
      {"model.head_overrides",
       [&](const std::string& k, const std::string& v) {
         fc.model.head_overrides.clear();
         if (trim(v).empty()) return;
         for (const std::string& item : split(v, ';')) {
           const std::vector<std::string> parts = split(item, ':');
           if (parts.size() != 3)
             throw std::runtime_error("config: " + k + " items must be layer:kv_head:kind");
           HeadOverride o;
           o.layer = static_cast<int>(parse_int(k, parts[0]));
           o.kv_head = static_cast<int>(parse_int(k, parts[1]));
           o.kind = attention_kind_from_name(parts[2]);
           fc.model.head_overrides.push_back(o);
         }
       }},
      {"gate.window", [&](const std::string& k, const std::string& v) { fc.gate.window = static_cast<int>(parse_int(k, v)); }},
      {"gate.tau", [&](const std::string& k, const std::string& v) { fc.gate.tau = static_cast<float>(parse_float(k, v)); }},
      {"gate.mode", [&](const std::string&, const std::string& v) { fc.gate.mode = gate_mode_from_name(v); }},
      {"gate.p_min", [&](const std::string& k, const std::string& v) { fc.gate.p_min = static_cast<float>(parse_float(k, v)); }},
      {"gate.aux_weight", [&](const std::string& k, const std::string& v) { fc.gate.aux_weight = static_cast<float>(parse_float(k, v)); }},
      {"gate.init_bias", [&](const std::string& k, const std::string& v) { fc.gate.init_bias = static_cast<float>(parse_float(k, v)); }},
      {"gate.predictor_lr_mult", [&](const std::string& k, const std::string& v) { fc.gate.predictor_lr_mult = static_cast<float>(parse_float(k, v)); }},
      {"gate.predictor_weight_decay", [&](const std::string& k, const std::string& v) { fc.gate.predictor_weight_decay = static_cast<float>(parse_float(k, v)); }},
      {"train.total_steps", [&](const std::string& k, const std::string& v) { fc.train.total_steps = static_cast<int>(parse_int(k, v)); }},
      {"train.warmup_steps", [&](const std::string& k, const std::string& v) { fc.train.warmup_steps = static_cast<int>(parse_int(k, v)); }},
      {"train.decay_start_step", [&](const std::string& k, const std::string& v) { fc.train.decay_start_step = static_cast<int>(parse_int(k, v)); }},
      {"train.peak_lr", [&](const std::string& k, const std::string& v) { fc.train.peak_lr = static_cast<float>(parse_float(k, v)); }},
      {"train.final_lr_fraction", [&](const std::string& k, const std::string& v) { fc.train.final_lr_fraction = static_cast<float>(parse_float(k, v)); }},
      {"train.batch_size", [&](const std::string& k, const std::string& v) { fc.train.batch_size = static_cast<int>(parse_int(k, v)); }},
      {"train.phase2_start_fraction", [&](const std::string& k, const std::string& v) { fc.train.phase2_start_fraction = static_cast<float>(parse_float(k, v)); }},
      {"train.anneal_steps", [&](const std::string& k, const std::string& v) { fc.train.anneal_steps = static_cast<int>(parse_int(k, v)); }},
      {"train.beta1", [&](const std::string& k, const std::string& v) { fc.train.beta1 = static_cast<float>(parse_float(k, v)); }},
      {"train.beta2", [&](const std::string& k, const std::string& v) { fc.train.beta2 = static_cast<float>(parse_float(k, v)); }},
      {"train.eps", [&](const std::string& k, const std::string& v) { fc.train.eps = static_cast<float>(parse_float(k, v)); }},
      {"train.weight_decay", [&](const std::string& k, const std::string& v) { fc.train.weight_decay = static_cast<float>(parse_float(k, v)); }},
      {"train.clip_norm", [&](const std::string& k, const std::string& v) { fc.train.clip_norm = static_cast<float>(parse_float(k, v)); }},
      {"train.mode", [&](const std::string&, const std::string& v) { fc.train.mode = train_mode_from_name(v); }},
      {"train.seed", [&](const std::string& k, const std::string& v) { fc.train.seed = static_cast<std::uint64_t>(parse_int(k, v)); }},
      {"task.name", [&](const std::string&, const std::string& v) { fc.task.name = v; }},
      {"task.n_numbers", [&](const std::string& k, const std::string& v) { fc.task.n_numbers = static_cast<int>(parse_int(k, v)); }},
      {"task.instruction_len", [&](const std::string& k, const std::string& v) { fc.task.instruction_len = static_cast<int>(parse_int(k, v)); }},
      {"task.haystack_len", [&](const std::string& k, const std::string& v) { fc.task.haystack_len = static_cast<int>(parse_int(k, v)); }},
      {"task.eval_seed", [&](const std::string& k, const std::string& v) { fc.task.eval_seed = static_cast<std::uint64_t>(parse_int(k, v)); }},
      {"task.eval_batches", [&](const std::string& k, const std::string& v) { fc.task.eval_batches = static_cast<int>(parse_int(k, v)); }},
  };

  std::stringstream ss(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(ss, raw)) {
    ++lineno;
    const std::size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: line " + std::to_string(lineno) + " is not key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = keys.find(key);
    if (it == keys.end())
      throw std::runtime_error("config: unknown key '" + key + "' on line " + std::to_string(lineno));
    it->second(key, value);
  }

  fc.model.validate();
  fc.gate.validate();
  fc.train.validate();
  fc.task.validate();
  return fc;
}

FileConfig parse_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("config file not found: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

namespace {

std::string fmt_f(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

std::string render_config(const FileConfig& fc) {
  std::ostringstream o;
  o << "model.n_layers = " << fc.model.n_layers << "\n";
  o << "model.d_model = " << fc.model.d_model << "\n";
  o << "model.n_q_heads = " << fc.model.n_q_heads << "\n";
  o << "model.n_kv_heads = " << fc.model.n_kv_heads << "\n";
  o << "model.d_head = " << fc.model.d_head << "\n";
  o << "model.d_ffn = " << fc.model.d_ffn << "\n";
  o << "model.vocab_size = " << fc.model.vocab_size << "\n";
  o << "model.max_seq_len = " << fc.model.max_seq_len << "\n";
  o << "model.rope_base = " << fmt_f(fc.model.rope_base) << "\n";
  if (!fc.model.layer_kinds.empty()) {
    o << "model.layer_kinds = ";
    for (std::size_t i = 0; i < fc.model.layer_kinds.size(); ++i)
      o << (i ? "," : "") << attention_kind_name(fc.model.layer_kinds[i]);
    o << "\n";
  }
  if (!fc.model.head_overrides.empty()) {
    o << "model.head_overrides = ";
    for (std::size_t i = 0; i < fc.model.head_overrides.size(); ++i) {
      const HeadOverride& h = fc.model.head_overrides[i];
      o << (i ? ";" : "") << h.layer << ":" << h.kv_head << ":" << attention_kind_name(h.kind);
    }
    o << "\n";
  }
  o << "gate.window = " << fc.gate.window << "\n";
  o << "gate.tau = " << fmt_f(fc.gate.tau) << "\n";
  o << "gate.mode = " << gate_mode_name(fc.gate.mode) << "\n";
  o << "gate.p_min = " << fmt_f(fc.gate.p_min) << "\n";
  o << "gate.aux_weight = " << fmt_f(fc.gate.aux_weight) << "\n";
  o << "gate.init_bias = " << fmt_f(fc.gate.init_bias) << "\n";
  o << "gate.predictor_lr_mult = " << fmt_f(fc.gate.predictor_lr_mult) << "\n";
  o << "gate.predictor_weight_decay = " << fmt_f(fc.gate.predictor_weight_decay) << "\n";
  o << "train.total_steps = " << fc.train.total_steps << "\n";
  o << "train.warmup_steps = " << fc.train.warmup_steps << "\n";
  o << "train.decay_start_step = " << fc.train.decay_start_step << "\n";
  o << "train.peak_lr = " << fmt_f(fc.train.peak_lr) << "\n";
  o << "train.final_lr_fraction = " << fmt_f(fc.train.final_lr_fraction) << "\n";
  o << "train.batch_size = " << fc.train.batch_size << "\n";
  o << "train.phase2_start_fraction = " << fmt_f(fc.train.phase2_start_fraction) << "\n";
  o << "train.anneal_steps = " << fc.train.anneal_steps << "\n";
  o << "train.beta1 = " << fmt_f(fc.train.beta1) << "\n";
  o << "train.beta2 = " << fmt_f(fc.train.beta2) << "\n";
  o << "train.eps = " << fmt_f(fc.train.eps) << "\n";
  o << "train.weight_decay = " << fmt_f(fc.train.weight_decay) << "\n";
  o << "train.clip_norm = " << fmt_f(fc.train.clip_norm) << "\n";
  o << "train.mode = " << train_mode_name(fc.train.mode) << "\n";
  o << "train.seed = " << fc.train.seed << "\n";
  o << "task.name = " << fc.task.name << "\n";
  o << "task.n_numbers = " << fc.task.n_numbers << "\n";
  o << "task.instruction_len = " << fc.task.instruction_len << "\n";
  o << "task.haystack_len = " << fc.task.haystack_len << "\n";
  o << "task.eval_seed = " << fc.task.eval_seed << "\n";
  o << "task.eval_batches = " << fc.task.eval_batches << "\n";
  return o.str();
}

void write_resolved_config(const std::string& path, const FileConfig& fc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << render_config(fc);
  if (!out) throw std::runtime_error("short write: " + path);
}

}  // namespace spkv
