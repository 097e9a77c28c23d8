#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace abm {

// Images are [C, H, W] floats in [0, 1].
struct ClassRecord {
  std::size_t id = 0;
  std::string name;
  std::vector<std::vector<float>> images;
};

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<ClassRecord> classes;

  std::size_t image_size() const { return channels * height * width; }
  std::size_t image_count() const;
  // Dims and channels consistent, every class non-empty, ids dense from 0.
  void validate() const;
  // Reassigns ids 0..n-1 in class order.
  void renumber();
};

enum class DatasetFormat { idx, image_dirs, synthetic };

std::string to_string(DatasetFormat f);
DatasetFormat dataset_format_from_string(const std::string& s);

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t classes = 10;
  std::size_t images_per_class = 20;
  std::size_t size = 28;
  std::size_t strokes = 3;     // polylines per glyph
  double jitter = 1.0;         // per-image vertex noise, pixels
  double thickness = 1.2;      // stroke half-width, pixels
};

nlohmann::json to_json(const SyntheticSpec& s);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j, const std::string& path);

// IDX image file (optionally .gz) with its labels file, or a directory holding
// exactly one *images-idx3* and one *labels-idx1* file.
Dataset load_idx(const std::filesystem::path& path);
// IDX files given explicitly.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
// Each leaf directory is a class of PNG / PGM / PPM images.
Dataset load_image_dirs(const std::filesystem::path& root);
// Seeded random polyline glyphs; each class is a template drawn with jitter.
Dataset make_synthetic(const SyntheticSpec& spec);

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;  // [C, H, W] in [0, 1]
};

// PNG, binary PGM or binary PPM, converted to `channels` (1 or 3).
Image read_image(const std::filesystem::path& path, std::size_t channels);

Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                     const SyntheticSpec& synthetic = {});

// 90-degree clockwise rotation of a [C, n, n] image.
std::vector<float> rotate90(std::span<const float> image, std::size_t channels, std::size_t n);

// Every class becomes four classes: 0, 90, 180 and 270 degree variants.
Dataset augment_rotations(const Dataset& dataset);

struct SplitSpec {
  // Explicit class ids. Identical validation and test lists share classes
  // and split each class's images into disjoint halves.
  std::optional<std::vector<std::size_t>> train, validation, test;
  // Otherwise class counts (taken after a seeded shuffle) ...
  std::optional<std::size_t> train_count, validation_count, test_count;
  // ... or fractions of the class count.
  std::optional<double> train_fraction, validation_fraction;
};

nlohmann::json to_json(const SplitSpec& s);
SplitSpec split_spec_from_json(const nlohmann::json& j, const std::string& path);

struct Splits {
  Dataset train;
  Dataset validation;
  Dataset test;
};

Splits split_classes(const Dataset& dataset, const SplitSpec& spec, std::uint64_t seed);

struct EpisodeSpec {
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t queries = 1;  // per episode, each from a uniformly drawn class of the episode
  bool open_set = false;
};

// Non-owning view of one dataset image.
struct EpisodeImage {
  std::span<const float> pixels;
  std::size_t label = 0;  // support: 1..n; query: 0 for the open set
  std::size_t class_id = 0;
  std::size_t image_index = 0;
};

// Views into the dataset it was sampled from, which must outlive it.
struct Episode {
  std::size_t way = 0;
  std::size_t shot = 0;
  std::vector<EpisodeImage> support;  // ordered by label, then shot
  std::vector<EpisodeImage> queries;
  std::optional<std::size_t> open_class;
  std::uint64_t seed = 0;

  std::size_t support_labels() const { return open_class ? way - 1 : way; }
  bool open_set() const { return open_class.has_value(); }
};

Episode sample_episode(const Dataset& dataset, const EpisodeSpec& spec, std::uint64_t seed);

// Checks the label and disjointness invariants; throws on violation.
void validate_episode(const Episode& episode);

}  // namespace abm
