#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>

#include "abm/trainer.hpp"

namespace abm {

struct DatasetSource {
  DatasetFormat format = DatasetFormat::synthetic;
  std::filesystem::path path;  // unused for synthetic data
  SyntheticSpec synthetic;

  // Fails with ErrorCode::config when a file-backed path does not exist.
  void validate() const;
};

nlohmann::json to_json(const DatasetSource& s);
// Relative paths resolve against `base_dir`.
DatasetSource dataset_source_from_json(const nlohmann::json& j, const std::string& path,
                                       const std::filesystem::path& base_dir);
Dataset load_source(const DatasetSource& source);

struct RunConfig {
  DatasetSource dataset;
  SplitSpec split;
  bool augment_rotations = false;  // training classes only
  ModelConfig model;
  TrainConfig training;
  std::filesystem::path output_dir = "abm_run";

  void validate() const;
};

// Keys: dataset, split, augment_rotations, encoder, model, training, task,
// output_dir. Unknown keys fail with their full key path.
nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);

// Replaces the value at a dotted key path ("training.epochs") and re-validates.
RunConfig override_run_config(const RunConfig& c, const std::string& key_path, const nlohmann::json& value);

// Class split with the training seed; rotations augment the training part.
Splits prepare_splits(const RunConfig& c);

// Worker count capped by the ABM_THREADS environment variable.
std::size_t cap_threads(std::size_t requested);

inline constexpr const char* kCheckpointFile = "checkpoint.abm";
inline constexpr const char* kTrainLogFile = "train_log.jsonl";
inline constexpr const char* kEffectiveConfigFile = "config.json";
inline constexpr const char* kTestMetricsFile = "test_metrics.json";

// Trains, then writes the effective config, the JSONL log, the best
// checkpoint and its test metrics into the output directory. Returns a
// summary with the written paths.
nlohmann::json run_training(const RunConfig& c, const std::function<void(const std::string&)>& on_log_line = {});

nlohmann::json dataset_info(const Dataset& d);

// Keeps the listed class ids, renumbered in the given order.
Dataset select_classes(const Dataset& d, std::span<const std::size_t> ids);

// Match-probability maps of `points` uniformly sampled test pixels over every
// reference pixel: "<prefix>_point<k>.pgm" per point plus "<prefix>.json".
// `layer_mask` holds 1-based blocks and overrides the checkpoint's mask.
nlohmann::json export_alignment(const Model<float>& model, const Image& test, const Image& reference,
                                std::size_t points, const std::filesystem::path& prefix, std::uint64_t seed,
                                std::span<const std::size_t> layer_mask = {});

}  // namespace abm
