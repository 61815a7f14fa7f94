#pragma once

#include <string>

#include "spkv/model.hpp"
#include "spkv/tasks.hpp"
#include "spkv/training.hpp"

namespace spkv {

// Which synthetic data generator feeds training/evaluation.
struct TaskSection {
  std::string name = "palindrome";  // palindrome | copy | needle
  int n_numbers = 8;                // palindrome / copy
  int instruction_len = 50;         // palindrome
  int haystack_len = 60;            // needle
  std::uint64_t eval_seed = 9999;
  int eval_batches = 4;

  void validate() const;
  int seq_len() const;
  int min_vocab() const;
};

// The full key=value config file: sections model.*, gate.*, train.*, task.*.
// Unknown keys are rejected; later duplicates override earlier ones.
struct FileConfig {
  ModelConfig model;
  GateConfig gate;
  TrainConfig train;
  TaskSection task;
};

FileConfig parse_config_text(const std::string& text);
FileConfig parse_config_file(const std::string& path);

// Deterministic snapshot of every resolved value, readable by the parser.
std::string render_config(const FileConfig& fc);
void write_resolved_config(const std::string& path, const FileConfig& fc);

// The generated sequences must fit the model's vocabulary and context.
void validate_task_fits(const TaskSection& task, const ModelConfig& model);

Batch gen_task_batch(const TaskSection& task, int batch_size, Rng& rng);

// Positions the task supervises; loss over them vs. chance distinguishes
// solving the task from memorizing filler.
double task_chance_nll(const TaskSection& task);

}  // namespace spkv
