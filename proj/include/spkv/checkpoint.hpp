#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spkv/model.hpp"

namespace spkv {

// In-memory image of a saved model: configs, flat parameter payload (in
// Model::param_refs order), and optionally the Adam moments + training
// counters needed to resume a run bit-for-bit.
struct Checkpoint {
  ModelConfig config;
  GateConfig gate;
  std::vector<float> params;
  bool has_opt = false;
  std::uint64_t adam_step = 0;  // optimizer update count (bias correction)
  std::vector<float> m, v;
  std::uint64_t train_step = 0;
  std::uint64_t rng_state = 0;
};

Checkpoint snapshot(const Model& model);
void restore(Model& model, const Checkpoint& cp);
Model model_from(const Checkpoint& cp);

// Binary file layout (all integers little-endian):
//   "SPKV" | u32 version | u32 meta_len | meta (JSON) | u64 n | f32 params[n]
//   | u8 has_opt | [u64 adam_step | f32 m[n] | f32 v[n]] | u64 train_step
//   | u64 rng_state
void save_checkpoint(const std::string& path, const Checkpoint& cp);
Checkpoint load_checkpoint(const std::string& path);

// Config blobs as JSON text (also embedded in the checkpoint header).
std::string config_to_json(const ModelConfig& cfg, const GateConfig& gate);
void config_from_json(const std::string& text, ModelConfig& cfg, GateConfig& gate);

}  // namespace spkv
