#include "spkv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace spkv {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

using json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[4] = {'S', 'P', 'K', 'V'};
constexpr std::uint32_t kVersion = 1;

json model_config_to_json(const ModelConfig& c) {
  json j;
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_q_heads"] = c.n_q_heads;
  j["n_kv_heads"] = c.n_kv_heads;
  j["d_head"] = c.d_head;
  j["d_ffn"] = c.d_ffn;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["rope_base"] = c.rope_base;
  j["layer_kinds"] = json::array();
  for (AttentionKind k : c.layer_kinds) j["layer_kinds"].push_back(attention_kind_name(k));
  j["head_overrides"] = json::array();
  for (const HeadOverride& o : c.head_overrides)
    j["head_overrides"].push_back(
        {{"layer", o.layer}, {"kv_head", o.kv_head}, {"kind", attention_kind_name(o.kind)}});
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_q_heads = j.at("n_q_heads").get<int>();
  c.n_kv_heads = j.at("n_kv_heads").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.d_ffn = j.at("d_ffn").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.rope_base = j.at("rope_base").get<float>();
  for (const auto& k : j.at("layer_kinds"))
    c.layer_kinds.push_back(attention_kind_from_name(k.get<std::string>()));
  for (const auto& o : j.at("head_overrides")) {
    HeadOverride h;
    h.layer = o.at("layer").get<int>();
    h.kv_head = o.at("kv_head").get<int>();
    h.kind = attention_kind_from_name(o.at("kind").get<std::string>());
    c.head_overrides.push_back(h);
  }
  return c;
}

json gate_config_to_json(const GateConfig& g) {
  json j;
  j["window"] = g.window;
  j["tau"] = g.tau;
  j["mode"] = gate_mode_name(g.mode);
  j["alpha"] = g.alpha;
  j["p_min"] = g.p_min;
  j["aux_weight"] = g.aux_weight;
  j["init_bias"] = g.init_bias;
  j["predictor_lr_mult"] = g.predictor_lr_mult;
  j["predictor_weight_decay"] = g.predictor_weight_decay;
  return j;
}

GateConfig gate_config_from_json(const json& j) {
  GateConfig g;
  g.window = j.at("window").get<int>();
  g.tau = j.at("tau").get<float>();
  g.mode = gate_mode_from_name(j.at("mode").get<std::string>());
  g.alpha = j.at("alpha").get<float>();
  g.p_min = j.at("p_min").get<float>();
  g.aux_weight = j.at("aux_weight").get<float>();
  g.init_bias = j.at("init_bias").get<float>();
  g.predictor_lr_mult = j.at("predictor_lr_mult").get<float>();
  g.predictor_weight_decay = j.at("predictor_weight_decay").get<float>();
  return g;
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void write_floats(std::ostream& os, const std::vector<float>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(float)));
}

void read_floats(std::istream& is, std::vector<float>& v, std::size_t n) {
  v.resize(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!is) throw std::runtime_error("checkpoint: truncated parameter payload");
}

}  // namespace

std::string config_to_json(const ModelConfig& cfg, const GateConfig& gate) {
  json j;
  j["model"] = model_config_to_json(cfg);
  j["gate"] = gate_config_to_json(gate);
  return j.dump(2);
}

void config_from_json(const std::string& text, ModelConfig& cfg, GateConfig& gate) {
  json j = json::parse(text);
  cfg = model_config_from_json(j.at("model"));
  gate = gate_config_from_json(j.at("gate"));
}

Checkpoint snapshot(const Model& model) {
  Checkpoint cp;
  cp.config = model.cfg;
  cp.gate = model.gate;
  cp.params.reserve(model.n_params());
  for (const Tensor* t : model.param_list()) {
    const float* p = t->ptr();
    cp.params.insert(cp.params.end(), p, p + t->numel());
  }
  return cp;
}

void restore(Model& model, const Checkpoint& cp) {
  if (cp.params.size() != model.n_params())
    throw std::runtime_error("restore: parameter count mismatch");
  std::size_t off = 0;
  for (ParamRef pr : model.param_refs()) {
    std::memcpy(pr.t->ptr(), cp.params.data() + off, pr.t->numel() * sizeof(float));
    off += pr.t->numel();
  }
}

Model model_from(const Checkpoint& cp) {
  Rng scratch(0);
  Model m = Model::init(cp.config, cp.gate, scratch);
  restore(m, cp);
  return m;
}

void save_checkpoint(const std::string& path, const Checkpoint& cp) {
  if (cp.has_opt && (cp.m.size() != cp.params.size() || cp.v.size() != cp.params.size()))
    throw std::runtime_error("save_checkpoint: moment sizes != param size");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  const std::string meta = config_to_json(cp.config, cp.gate);
  write_pod(os, static_cast<std::uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  write_pod(os, static_cast<std::uint64_t>(cp.params.size()));
  write_floats(os, cp.params);
  write_pod(os, static_cast<std::uint8_t>(cp.has_opt ? 1 : 0));
  if (cp.has_opt) {
    write_pod(os, cp.adam_step);
    write_floats(os, cp.m);
    write_floats(os, cp.v);
  }
  write_pod(os, cp.train_step);
  write_pod(os, cp.rng_state);
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kVersion)
    throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
  const auto meta_len = read_pod<std::uint32_t>(is);
  std::string meta(meta_len, '\0');
  is.read(meta.data(), meta_len);
  if (!is) throw std::runtime_error("load_checkpoint: truncated metadata");
  Checkpoint cp;
  config_from_json(meta, cp.config, cp.gate);
  const auto n = read_pod<std::uint64_t>(is);
  read_floats(is, cp.params, n);
  cp.has_opt = read_pod<std::uint8_t>(is) != 0;
  if (cp.has_opt) {
    cp.adam_step = read_pod<std::uint64_t>(is);
    read_floats(is, cp.m, n);
    read_floats(is, cp.v, n);
  }
  cp.train_step = read_pod<std::uint64_t>(is);
  cp.rng_state = read_pod<std::uint64_t>(is);
  return cp;
}

}  // namespace spkv
