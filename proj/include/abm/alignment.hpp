#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "abm/encoder.hpp"
#include "abm/num/random.hpp"

namespace abm {

enum class Aligner { greedy, hungarian };
enum class Aggregation { mean, sum };

std::string to_string(Aligner a);
Aligner aligner_from_string(const std::string& s);

// Strictly increasing row-major pixel indices drawn from an H x W image.
struct PixelSample {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::size_t> indices;
  double fraction = 1.0;
};

// max(1, round(fraction * pixels))
std::size_t sample_count(std::size_t pixels, double fraction);

// Uniform sample without replacement, then the union with `forced`.
PixelSample sample_pixels(std::size_t height, std::size_t width, double fraction, Rng& rng,
                          std::span<const std::size_t> forced = {});

// Negative cosine similarities between sampled test pixels (rows) and sampled
// reference pixels (columns).
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> costs;
  std::vector<std::size_t> row_pixels;
  std::vector<std::size_t> col_pixels;

  float at(std::size_t r, std::size_t c) const { return costs[r * cols + c]; }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(costs).subspan(r * cols, cols);
  }
};

inline constexpr double kCosineEpsilon = 1e-12;

CostMatrix cost_matrix(const HypercolumnField& test, const HypercolumnField& reference,
                       const PixelSample& test_sample, const PixelSample& reference_sample);

// softmax(-costs), max-subtracted.
std::vector<double> match_probabilities(std::span<const float> costs);
std::vector<double> match_probabilities(std::span<const double> costs);

// Shannon entropy in nats.
double entropy(std::span<const double> probabilities);

struct AlignmentResult {
  std::vector<std::size_t> columns;  // chosen column per row
  std::vector<double> row_costs;     // cost of the chosen entry per row
  double zeta = 0.0;
  bool unique = false;  // true when the columns are injective by construction
};

// Per-row argmin (ties to the lowest column) of a rows x cols block.
template <typename Real>
std::vector<std::size_t> greedy_columns(std::size_t rows, std::size_t cols,
                                        std::span<const Real> costs);

// Minimum-total injective assignment of rows to columns; rows <= cols.
template <typename Real>
std::vector<std::size_t> hungarian_columns(std::size_t rows, std::size_t cols,
                                           std::span<const Real> costs);

AlignmentResult greedy_align(const CostMatrix& cost, Aggregation aggregation = Aggregation::mean);
AlignmentResult hungarian_align(const CostMatrix& cost, Aggregation aggregation = Aggregation::mean);
AlignmentResult align(const CostMatrix& cost, Aligner method, Aggregation aggregation);

struct AlignOptions {
  double test_fraction = 0.10;
  double reference_fraction = 0.20;
  Aligner method = Aligner::greedy;
  Aggregation aggregation = Aggregation::mean;
  // Forces every sampled test pixel into the reference sample. Implied when
  // the test and reference spans alias the same pixels.
  bool self_alignment = false;
  num::NormMode mode = num::NormMode::eval;
  std::vector<std::size_t> active_blocks;  // 0-based override of the layer mask
};

struct AlignOutput {
  HypercolumnField test_field;
  HypercolumnField reference_field;
  PixelSample test_sample;
  PixelSample reference_sample;
  CostMatrix cost;
  AlignmentResult result;
};

// encode -> sample -> cost matrix -> aligner.
AlignOutput align_images(std::span<const float> test_image, std::span<const float> reference_image,
                         Encoder<float>& test_encoder, Encoder<float>& reference_encoder,
                         const AlignOptions& options, Rng& rng);

}  // namespace abm
