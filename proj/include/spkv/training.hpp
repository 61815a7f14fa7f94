#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "spkv/checkpoint.hpp"
#include "spkv/model.hpp"
#include "spkv/tasks.hpp"

namespace spkv {

enum class TrainMode {
  DenseBaseline,    // no gating at all
  SoftGatedCPT,     // soft log-utility bias the whole run (phase 1)
  TAHG,             // soft until the phase-2 boundary, then frozen predictor
                    // + annealed binarization at tau
  BernoulliSTE,     // sampled hard gates with straight-through gradients
  FromScratchGated, // same schedule as TAHG but meant to start from fresh init
  FrozenLLM         // only the utility predictors train
};

const char* train_mode_name(TrainMode m);
TrainMode train_mode_from_name(const std::string& name);

struct TrainConfig {
  int total_steps = 3000;
  int warmup_steps = 100;
  int decay_start_step = 1000;
  float peak_lr = 1e-3f;
  float final_lr_fraction = 0.01f;
  int batch_size = 4;
  float phase2_start_fraction = 0.75f;  // of the decay span
  int anneal_steps = 500;               // 0 = abrupt binarization
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float eps = 1e-8f;
  float weight_decay = 0.1f;
  float clip_norm = 1.0f;
  TrainMode mode = TrainMode::SoftGatedCPT;
  std::uint64_t seed = 0;

  void validate() const;
  // Step at which phase 2 begins: decay_start + phase2_start_fraction of the
  // decay span.
  int phase2_boundary() const;
  // The configured anneal span, shrunk to 10% of the decay span when it would
  // not fit inside it (tiny runs); 0 stays 0.
  int resolved_anneal_steps() const;
};

float lr_at(int step, const TrainConfig& cfg);

enum class PhaseTag { Dense, Soft, Annealed, Hard, Sampled };
const char* phase_tag_name(PhaseTag p);

struct PhaseState {
  PhaseTag tag;
  float alpha;
};

// Phase schedule for the two-phase modes (TAHG / FromScratchGated).
PhaseState phase_of(int step, const TrainConfig& cfg);

struct TrainRecord {
  int step = 0;
  float lr = 0.0f;
  float loss = 0.0f;
  float aux = 0.0f;
  float mean_u = 0.0f;  // meaningful only when has_gate_stats
  float rho = 0.0f;
  PhaseTag phase = PhaseTag::Dense;
  float alpha = 0.0f;
  bool has_gate_stats = false;
};

struct TrainLog {
  std::vector<TrainRecord> records;
};

// One JSON object per optimizer step with fixed keys
// {"step","lr","loss","aux","mean_u","rho","phase","alpha"}; mean_u and rho
// are null for ungated runs.
void write_train_log(const std::string& path, const TrainLog& log);

// AdamW with decoupled weight decay over the model's flat parameter list.
// Moments are indexed by flat offset so freezing never shifts them.
struct AdamW {
  float beta1, beta2, eps;
  std::uint64_t t = 0;
  std::vector<float> m, v;

  AdamW(float b1, float b2, float e) : beta1(b1), beta2(b2), eps(e) {}

  void step(std::vector<ParamRef>& params, float lr, float base_wd,
            float pred_lr_mult, float pred_wd);
};

// Scales all gradients so their global norm is at most max_norm; returns the
// pre-clip norm.
float clip_global_norm(std::vector<ParamRef>& params, float max_norm);

using BatchFn = std::function<Batch(int step, Rng& rng)>;

struct TrainResult {
  TrainLog log;
  Checkpoint checkpoint;  // final params + moments + counters + rng state
};

// Runs the configured protocol on `model` in place. Throws on non-finite
// loss after appending a diagnostic record (and flushing it to log_path if
// one was given).
TrainResult train(Model& model, const BatchFn& next_batch, const TrainConfig& cfg,
                  const std::string& log_path = "");

}  // namespace spkv
