#include "abm/alignment.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace abm {

std::string to_string(Aligner a) { return a == Aligner::greedy ? "greedy" : "hungarian"; }

Aligner aligner_from_string(const std::string& s) {
  if (s == "greedy") return Aligner::greedy;
  if (s == "hungarian") return Aligner::hungarian;
  fail(ErrorCode::config, "unknown aligner '" + s + "' (expected greedy or hungarian)");
}

std::size_t sample_count(std::size_t pixels, double fraction) {
  const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pixels)));
  return std::clamp<std::size_t>(n, 1, pixels);
}

PixelSample sample_pixels(std::size_t height, std::size_t width, double fraction, Rng& rng,
                          std::span<const std::size_t> forced) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    fail(ErrorCode::invalid_argument, "sampling fraction must be in (0, 1], got " +
                                          std::to_string(fraction));
  }
  const std::size_t pixels = height * width;
  if (pixels == 0) fail(ErrorCode::invalid_argument, "cannot sample an empty image");
  for (std::size_t f : forced) {
    if (f >= pixels) {
      fail(ErrorCode::invalid_argument, "forced pixel " + std::to_string(f) + " outside a " +
                                            std::to_string(height) + "x" + std::to_string(width) +
                                            " image");
    }
  }
  PixelSample s{height, width, {}, fraction};
  const std::size_t k = sample_count(pixels, fraction);
  if (k == pixels) {
    s.indices.resize(pixels);
    std::iota(s.indices.begin(), s.indices.end(), std::size_t{0});
    return s;
  }
  std::vector<std::size_t> all(pixels);
  std::iota(all.begin(), all.end(), std::size_t{0});
  s.indices.reserve(k + forced.size());
  std::sample(all.begin(), all.end(), std::back_inserter(s.indices), k, rng);
  s.indices.insert(s.indices.end(), forced.begin(), forced.end());
  std::sort(s.indices.begin(), s.indices.end());
  s.indices.erase(std::unique(s.indices.begin(), s.indices.end()), s.indices.end());
  return s;
}

namespace {

void check_sample(const PixelSample& s, const HypercolumnField& f, const char* which) {
  if (s.height != f.height || s.width != f.width) {
    fail(ErrorCode::shape, std::string(which) + " sample dims do not match its field");
  }
  if (s.indices.empty()) fail(ErrorCode::invalid_argument, std::string(which) + " sample is empty");
  for (std::size_t i : s.indices) {
    if (i >= f.pixels()) fail(ErrorCode::invalid_argument, std::string(which) + " sample index out of range");
  }
}

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMatrixF gather(const HypercolumnField& f, const std::vector<std::size_t>& pixels) {
  RowMatrixF m(pixels.size(), f.dim);
  for (std::size_t r = 0; r < pixels.size(); ++r) {
    const auto v = f.feature_at(pixels[r]);
    std::copy(v.begin(), v.end(), m.row(r).data());
  }
  return m;
}

AlignmentResult finish(const CostMatrix& cost, std::vector<std::size_t> columns,
                       Aggregation aggregation, bool unique) {
  AlignmentResult r;
  r.columns = std::move(columns);
  r.unique = unique;
  r.row_costs.resize(cost.rows);
  double total = 0.0;
  for (std::size_t i = 0; i < cost.rows; ++i) {
    r.row_costs[i] = cost.at(i, r.columns[i]);
    total += r.row_costs[i];
  }
  r.zeta = aggregation == Aggregation::mean ? total / static_cast<double>(cost.rows) : total;
  return r;
}

}  // namespace

CostMatrix cost_matrix(const HypercolumnField& test, const HypercolumnField& reference,
                       const PixelSample& test_sample, const PixelSample& reference_sample) {
  if (test.dim != reference.dim) {
    fail(ErrorCode::shape, "hypercolumn dimensions differ: " + std::to_string(test.dim) + " vs " +
                               std::to_string(reference.dim));
  }
  check_sample(test_sample, test, "test");
  check_sample(reference_sample, reference, "reference");

  const RowMatrixF u = gather(test, test_sample.indices);
  const RowMatrixF v = gather(reference, reference_sample.indices);
  const Eigen::VectorXf nu = u.rowwise().norm();
  const Eigen::VectorXf nv = v.rowwise().norm();

  CostMatrix c;
  c.rows = u.rows();
  c.cols = v.rows();
  c.row_pixels = test_sample.indices;
  c.col_pixels = reference_sample.indices;
  c.costs.resize(c.rows * c.cols);
  Eigen::Map<RowMatrixF> out(c.costs.data(), c.rows, c.cols);
  out.noalias() = u * v.transpose();
  for (std::size_t i = 0; i < c.rows; ++i) {
    for (std::size_t j = 0; j < c.cols; ++j) {
      const double den = static_cast<double>(nu(i)) * nv(j) + kCosineEpsilon;
      out(i, j) = static_cast<float>(std::clamp(-out(i, j) / den, -1.0, 1.0));
    }
  }
  return c;
}

namespace {

template <typename Real>
std::vector<double> softmin(std::span<const Real> costs) {
  if (costs.empty()) fail(ErrorCode::invalid_argument, "match probabilities of an empty row");
  const Real lo = *std::min_element(costs.begin(), costs.end());
  std::vector<double> p(costs.size());
  double z = 0.0;
  for (std::size_t i = 0; i < costs.size(); ++i) {
    p[i] = std::exp(static_cast<double>(lo) - static_cast<double>(costs[i]));
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

}  // namespace

std::vector<double> match_probabilities(std::span<const float> costs) { return softmin(costs); }
std::vector<double> match_probabilities(std::span<const double> costs) { return softmin(costs); }

double entropy(std::span<const double> probabilities) {
  double h = 0.0;
  for (double p : probabilities) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

template <typename Real>
std::vector<std::size_t> greedy_columns(std::size_t rows, std::size_t cols,
                                        std::span<const Real> costs) {
  if (rows == 0 || cols == 0) fail(ErrorCode::invalid_argument, "cannot align an empty cost matrix");
  if (costs.size() != rows * cols) fail(ErrorCode::shape, "cost block size mismatch");
  std::vector<std::size_t> best(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = costs.data() + r * cols;
    std::size_t arg = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (row[c] < row[arg]) arg = c;
    }
    best[r] = arg;
  }
  return best;
}

template <typename Real>
std::vector<std::size_t> hungarian_columns(std::size_t rows, std::size_t cols,
                                           std::span<const Real> costs) {
  if (rows == 0 || cols == 0) fail(ErrorCode::invalid_argument, "cannot align an empty cost matrix");
  if (costs.size() != rows * cols) fail(ErrorCode::shape, "cost block size mismatch");
  if (rows > cols) {
    fail(ErrorCode::invalid_argument, "hungarian alignment needs rows <= cols, got " +
                                          std::to_string(rows) + " x " + std::to_string(cols));
  }
  // Shortest augmenting paths with row/column potentials (1-based, column 0
  // is the virtual start).
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0), min_slack(cols + 1);
  std::vector<std::size_t> owner(cols + 1, 0), way(cols + 1, 0);
  std::vector<char> used(cols + 1);
  auto a = [&](std::size_t i, std::size_t j) {
    return static_cast<double>(costs[(i - 1) * cols + (j - 1)]);
  };
  for (std::size_t i = 1; i <= rows; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::fill(min_slack.begin(), min_slack.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < min_slack[j]) {
          min_slack[j] = cur;
          way[j] = j0;
        }
        if (min_slack[j] < delta) {
          delta = min_slack[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          min_slack[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assignment(rows);
  for (std::size_t j = 1; j <= cols; ++j) {
    if (owner[j] != 0) assignment[owner[j] - 1] = j - 1;
  }
  return assignment;
}

template std::vector<std::size_t> greedy_columns(std::size_t, std::size_t, std::span<const float>);
template std::vector<std::size_t> greedy_columns(std::size_t, std::size_t, std::span<const double>);
template std::vector<std::size_t> hungarian_columns(std::size_t, std::size_t, std::span<const float>);
template std::vector<std::size_t> hungarian_columns(std::size_t, std::size_t, std::span<const double>);

AlignmentResult greedy_align(const CostMatrix& cost, Aggregation aggregation) {
  return finish(cost, greedy_columns<float>(cost.rows, cost.cols, cost.costs),
                             aggregation, false);
}

AlignmentResult hungarian_align(const CostMatrix& cost, Aggregation aggregation) {
  return finish(cost, hungarian_columns<float>(cost.rows, cost.cols, cost.costs),
                             aggregation, true);
}

AlignmentResult align(const CostMatrix& cost, Aligner method, Aggregation aggregation) {
  return method == Aligner::greedy ? greedy_align(cost, aggregation)
                                   : hungarian_align(cost, aggregation);
}

AlignOutput align_images(std::span<const float> test_image, std::span<const float> reference_image,
                         Encoder<float>& test_encoder, Encoder<float>& reference_encoder,
                         const AlignOptions& options, Rng& rng) {
  const bool self = options.self_alignment ||
                    (test_image.data() == reference_image.data() &&
                     test_image.size() == reference_image.size());
  const EncoderConfig& cfg = test_encoder.config();
  AlignOutput out;
  if (&test_encoder == &reference_encoder) {
    if (self) {
      out.test_field = encode_hypercolumn(test_image, test_encoder, options.mode, options.active_blocks);
      out.reference_field = out.test_field;
    } else {
      // One batch so batch-statistics modes see both images together.
      const std::span<const float> both[] = {test_image, reference_image};
      auto batch = image_batch<float>(both, cfg.channels, cfg.height, cfg.width);
      auto enc = options.mode == num::NormMode::train
                     ? test_encoder.forward(batch, options.mode, options.active_blocks)
                     : test_encoder.infer(batch, options.mode, options.active_blocks);
      auto fields = split_fields(enc.hypercolumn.value());
      out.test_field = std::move(fields[0]);
      out.reference_field = std::move(fields[1]);
    }
  } else {
    out.test_field = encode_hypercolumn(test_image, test_encoder, options.mode, options.active_blocks);
    out.reference_field =
        encode_hypercolumn(reference_image, reference_encoder, options.mode, options.active_blocks);
  }
  out.test_sample = sample_pixels(out.test_field.height, out.test_field.width,
                                  options.test_fraction, rng);
  const std::span<const std::size_t> forced =
      self ? std::span<const std::size_t>(out.test_sample.indices) : std::span<const std::size_t>{};
  out.reference_sample = sample_pixels(out.reference_field.height, out.reference_field.width,
                                       options.reference_fraction, rng, forced);
  out.cost = cost_matrix(out.test_field, out.reference_field, out.test_sample, out.reference_sample);
  out.result = align(out.cost, options.method, options.aggregation);
  return out;
}

}  // namespace abm
