#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "abm/num/adam.hpp"
#include "abm/num/autograd.hpp"
#include "abm/num/random.hpp"
#include "json.hpp"

namespace abm {

struct EncoderConfig {
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t channels = 1;
  std::vector<std::size_t> block_channels{32, 64, 64, 64};
  // Per block: 2x2 max-pool after the block. Empty selects the default
  // schedule (pool after blocks 1 and 2).
  std::vector<bool> pool_after;
  // false gives the test and reference images separate encoders.
  bool shared = true;
  // 1-based blocks stacked into the hypercolumn. Empty means all blocks.
  std::vector<std::size_t> layer_mask;
  bool unit_norm_layers = false;

  // Default block layout for a square input: 4 blocks for <= 28 px, 6 above.
  static EncoderConfig for_input(std::size_t size, std::size_t channels);

  void validate() const;
  std::vector<bool> resolved_pooling() const;
  // 0-based active blocks in block order.
  std::vector<std::size_t> active_blocks() const;
  std::size_t hypercolumn_dim() const;
};

nlohmann::json to_json(const EncoderConfig& config);
// Unknown keys are rejected; `path` prefixes error messages.
EncoderConfig encoder_config_from_json(const nlohmann::json& j, const std::string& path = "encoder");

// Per-pixel stacked descriptors of one image; row p holds the D features of
// row-major pixel p.
struct HypercolumnField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t dim = 0;
  std::vector<float> features;

  std::size_t pixels() const { return height * width; }
  std::span<const float> feature_at(std::size_t pixel) const;
};

template <typename Real>
struct ConvBlock {
  num::Var<Real> kernels;
  num::Var<Real> bias;
  num::Var<Real> gamma;
  num::Var<Real> beta;
  num::BatchNormStats<Real> stats;
};

// conv3x3 -> batch-norm -> ReLU [-> 2x2 max-pool] blocks; the hypercolumn
// stacks each active block's pre-pool activation, upsampled to input size.
template <typename Real>
class Encoder {
 public:
  struct Output {
    num::Var<Real> hypercolumn;       // [N, D, H, W]
    num::Var<Real> final_activation;  // last block, pre-pool [N, C_last, h, w]
  };

  Encoder() = default;
  static Encoder build(const EncoderConfig& config, Rng& rng);

  const EncoderConfig& config() const { return config_; }
  std::vector<ConvBlock<Real>>& blocks() { return blocks_; }
  const std::vector<ConvBlock<Real>>& blocks() const { return blocks_; }

  // `images` is [N, C, H, W]. `active` overrides the configured layer mask
  // (0-based); empty uses the configured one.
  Output forward(const num::Var<Real>& images, num::NormMode mode,
                 std::span<const std::size_t> active = {});

  // Eval or batch mode pass; never mutates, safe to call concurrently.
  Output infer(const num::Var<Real>& images, num::NormMode mode = num::NormMode::eval,
               std::span<const std::size_t> active = {}) const;

  std::vector<num::NamedParameter<Real>> parameters(const std::string& prefix) const;

 private:
  EncoderConfig config_;
  std::vector<ConvBlock<Real>> blocks_;
};

extern template class Encoder<float>;
extern template class Encoder<double>;

// Stacks [C, H, W] images into one [N, C, H, W] constant batch.
template <typename Real>
num::Var<Real> image_batch(std::span<const std::span<const float>> images, std::size_t channels,
                           std::size_t height, std::size_t width);

// Splits a [N, D, H, W] hypercolumn value into per-image fields.
template <typename Real>
std::vector<HypercolumnField> split_fields(const num::Tensor<Real>& hypercolumn);

// Encodes one [C, H, W] image (pixel values in [0, 1]) into its field.
HypercolumnField encode_hypercolumn(std::span<const float> image, Encoder<float>& encoder,
                                    num::NormMode mode, std::span<const std::size_t> active = {});

}  // namespace abm
