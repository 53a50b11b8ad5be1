#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mmcl/data.hpp"
#include "mmcl/encoder.hpp"
#include "mmcl/objectives.hpp"
#include "mmcl/retrieval.hpp"

namespace mmcl {

enum class OptimizerKind { Adam, AdamW };

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double peak_lr = 5e-4;
  std::size_t warmup_steps = 100;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::pair<double, double> betas{0.9, 0.999};
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  ObjectiveConfig objective;
  std::size_t eval_every = 0;  // 0: evaluate at epoch ends only
  DualEncoder::Shape shape;

  void validate() const;

  nlohmann::json to_json() const;
  // Missing keys keep defaults. weight_decay defaults to 0.01 for adamw when absent.
  static TrainConfig from_json(const nlohmann::json& j);
};

// Linear warmup to peak_lr, then cosine decay to 0 at total_steps.
double lr_at(const TrainConfig& config, std::size_t step, std::size_t total_steps);

// A contiguous run of parameters with its gradient.
struct ParamBlock {
  std::span<double> value;
  std::span<const double> grad;
  bool decay = true;
  std::optional<std::pair<double, double>> clamp;
};

struct OptimizerState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::size_t step = 0;
};

void optimizer_step(OptimizerState& state, std::span<const ParamBlock> blocks, double lr, const TrainConfig& config);

struct TrainingSet {
  std::vector<PairedRecord> pairs;
  std::vector<NliRecord> nli;  // required by the "n" and "e" variants
};

struct HistoryEntry {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double r1_text = 0.0;   // text retrieval, recall@1
  double r1_other = 0.0;  // other-modality retrieval, recall@1
  double score = 0.0;     // mean of the two
  double train_loss = 0.0;  // mean composite loss since the previous entry
  double logit_scale = 0.0;

  nlohmann::json to_json() const;
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  std::vector<TermValue> terms;
  double composite = 0.0;
  double logit_scale = 0.0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  DualEncoder best;
  DualEncoder final_model;
  std::vector<HistoryEntry> history;
  std::vector<StepRecord> steps;
  std::optional<std::size_t> best_index;  // into history
  std::size_t total_steps = 0;
};

// Sorted token set of the training captions and NLI sentences.
Vocabulary build_vocabulary(const TrainingSet& data);

struct PairedEvaluation {
  RetrievalResult text;   // item queries -> captions
  RetrievalResult other;  // caption queries -> items
  double score() const { return 0.5 * (text.recall_at.at(1) + other.recall_at.at(1)); }
};

PairedEvaluation evaluate_pairs(const DualEncoder& model, const PairedDataset& dataset);

TrainResult train(const TrainConfig& config, const TrainingSet& data, const std::vector<PairedRecord>& val);

}  // namespace mmcl
