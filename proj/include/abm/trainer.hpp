#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "abm/episodes.hpp"
#include "abm/heads.hpp"

namespace abm {

struct TrainConfig {
  std::size_t episodes_per_epoch = 1000;
  std::size_t epochs = 200;
  std::size_t batch_size = 32;  // episodes per optimizer step
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double lr_decay = 1e-6;
  EpisodeSpec task;
  std::uint64_t seed = 0;
  std::size_t validation_episodes = 500;
  std::size_t test_episodes = 1000;
  // Stop after this many epochs without a validation improvement.
  std::optional<std::size_t> patience;
  std::size_t threads = 1;  // evaluation workers

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
// Reads the "training" and "task" objects of a run config.
TrainConfig train_config_from_json(const nlohmann::json& training, const nlohmann::json& task,
                                   const std::string& training_path, const std::string& task_path);

struct OpenSetScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Open set (label 0) is the positive class; 0/0 counts as 0.
OpenSetScores f1_open_set(std::span<const std::size_t> predictions, std::span<const std::size_t> truths);

struct Metrics {
  double accuracy = 0.0;
  double accuracy_variance = 0.0;  // across per-episode accuracies
  double ci95 = 0.0;               // 1.96 * standard error of the per-episode accuracy
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t episodes = 0;
  std::size_t queries = 0;
  bool open_set = false;
};

nlohmann::json to_json(const Metrics& m);

class Predictor {
 public:
  virtual ~Predictor() = default;
  // Posteriors for every query of the episode; must be safe to call concurrently.
  virtual std::vector<LabelPosterior> predict(const Episode& episode, std::uint64_t seed) const = 0;
};

class ModelPredictor final : public Predictor {
 public:
  explicit ModelPredictor(const Model<float>& model) : model_(model) {}
  std::vector<LabelPosterior> predict(const Episode& episode, std::uint64_t seed) const override;

 private:
  const Model<float>& model_;
};

// Episode i is sampled with derive_seed(seed, i); results do not depend on
// the thread count.
Metrics evaluate(const Predictor& predictor, const Dataset& dataset, const EpisodeSpec& task,
                 std::size_t episodes, std::uint64_t seed, std::size_t threads = 1);
Metrics evaluate(const Model<float>& model, const Dataset& dataset, const EpisodeSpec& task,
                 std::size_t episodes, std::uint64_t seed, std::size_t threads = 1);

inline constexpr char kCheckpointMagic[9] = "ABMCKPT1";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int version = kCheckpointVersion;
  ModelConfig model;
  std::vector<std::pair<std::string, num::Tensor<float>>> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  const num::Tensor<float>* find(const std::string& name) const;
};

// Parameters, populated batch-norm statistics ("<block>.running_mean" and
// "<block>.running_var") and, when given, Adam moments ("adam.m/<name>",
// "adam.v/<name>", step in metadata).
Checkpoint make_checkpoint(Model<float>& model, const num::AdamState<float>* optimizer = nullptr,
                           nlohmann::json metadata = nlohmann::json::object());
Model<float> restore_model(const Checkpoint& checkpoint);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double self_loss = 0.0;  // mean self-regularization term, 0 when absent
  double val_accuracy = 0.0;
  double val_f1 = 0.0;
  double wall_time = 0.0;  // seconds since training started
};

nlohmann::json to_json(const EpochLog& e, bool with_self_term);

struct TrainResult {
  Checkpoint best;
  std::size_t best_epoch = 0;
  Metrics best_validation;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Episodic Adam training with per-epoch validation; returns the checkpoint of
// the best validation accuracy. Non-finite losses abort with the batch seed.
TrainResult train(const ModelConfig& model_config, const TrainConfig& config, const Dataset& train_set,
                  const Dataset& validation_set, const EpochCallback& on_epoch = {});

}  // namespace abm
