#include "abm/encoder.hpp"

#include <algorithm>

#include "abm/num/init.hpp"
#include "json_util.hpp"

namespace abm {

using num::NormMode;
using num::Shape;
using num::Tensor;
using num::Var;

EncoderConfig EncoderConfig::for_input(std::size_t size, std::size_t channels) {
  EncoderConfig c;
  c.height = c.width = size;
  c.channels = channels;
  if (size > 28) c.block_channels = {32, 64, 64, 64, 64, 64};
  return c;
}

void EncoderConfig::validate() const {
  if (block_channels.empty()) fail(ErrorCode::config, "encoder needs at least one block");
  if (height == 0 || width == 0 || channels == 0) {
    fail(ErrorCode::config, "encoder input size and channels must be positive");
  }
  for (std::size_t c : block_channels) {
    if (c == 0) fail(ErrorCode::config, "encoder block channel counts must be positive");
  }
  if (!pool_after.empty() && pool_after.size() != block_channels.size()) {
    fail(ErrorCode::config, "encoder pool_after needs one entry per block");
  }
  std::vector<std::size_t> seen;
  for (std::size_t b : layer_mask) {
    if (b < 1 || b > block_channels.size()) {
      fail(ErrorCode::config, "layer mask entry " + std::to_string(b) + " is not a block (1.." +
                                  std::to_string(block_channels.size()) + ")");
    }
    if (std::find(seen.begin(), seen.end(), b) != seen.end()) {
      fail(ErrorCode::config, "layer mask lists block " + std::to_string(b) + " twice");
    }
    seen.push_back(b);
  }
}

std::vector<bool> EncoderConfig::resolved_pooling() const {
  if (!pool_after.empty()) return pool_after;
  std::vector<bool> pools(block_channels.size(), false);
  for (std::size_t i = 0; i < pools.size() && i < 2; ++i) pools[i] = true;
  return pools;
}

std::vector<std::size_t> EncoderConfig::active_blocks() const {
  std::vector<std::size_t> active;
  if (layer_mask.empty()) {
    for (std::size_t i = 0; i < block_channels.size(); ++i) active.push_back(i);
  } else {
    for (std::size_t b : layer_mask) active.push_back(b - 1);
    std::sort(active.begin(), active.end());
  }
  return active;
}

std::size_t EncoderConfig::hypercolumn_dim() const {
  std::size_t d = 0;
  for (std::size_t b : active_blocks()) d += block_channels[b];
  return d;
}

nlohmann::json to_json(const EncoderConfig& c) {
  nlohmann::json j;
  j["input_size"] = {c.height, c.width};
  j["channels"] = c.channels;
  j["blocks"] = c.block_channels;
  j["pool_after"] = c.resolved_pooling();
  j["shared"] = c.shared;
  j["layer_mask"] = c.layer_mask;
  j["unit_norm_layers"] = c.unit_norm_layers;
  return j;
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j, const std::string& path) {
  detail::reject_unknown_keys(
      j, path,
      {"input_size", "channels", "blocks", "pool_after", "shared", "layer_mask", "unit_norm_layers"});
  EncoderConfig c;
  std::vector<std::size_t> size{c.height, c.width};
  detail::read_optional(j, "input_size", path, size);
  if (size.size() != 2) fail(ErrorCode::config, "'" + path + ".input_size' must be [height, width]");
  c.height = size[0];
  c.width = size[1];
  detail::read_optional(j, "channels", path, c.channels);
  c.block_channels = EncoderConfig::for_input(std::max(c.height, c.width), c.channels).block_channels;
  detail::read_optional(j, "blocks", path, c.block_channels);
  detail::read_optional(j, "pool_after", path, c.pool_after);
  detail::read_optional(j, "shared", path, c.shared);
  detail::read_optional(j, "layer_mask", path, c.layer_mask);
  detail::read_optional(j, "unit_norm_layers", path, c.unit_norm_layers);
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorCode::config, "'" + path + "': " + e.what());
  }
  return c;
}

std::span<const float> HypercolumnField::feature_at(std::size_t pixel) const {
  if (pixel >= pixels()) {
    fail(ErrorCode::invalid_argument, "pixel index " + std::to_string(pixel) +
                                          " out of range for a " + std::to_string(height) + "x" +
                                          std::to_string(width) + " field");
  }
  return std::span<const float>(features).subspan(pixel * dim, dim);
}

template <typename Real>
Encoder<Real> Encoder<Real>::build(const EncoderConfig& config, Rng& rng) {
  config.validate();
  Encoder enc;
  enc.config_ = config;
  std::size_t in = config.channels;
  for (std::size_t out : config.block_channels) {
    ConvBlock<Real> block;
    block.kernels = Var<Real>::leaf(num::xavier_uniform<Real>(Shape{out, in, 3, 3}, rng), true);
    block.bias = Var<Real>::leaf(Tensor<Real>(Shape{out}, Real(0)), true);
    block.gamma = Var<Real>::leaf(Tensor<Real>(Shape{out}, Real(1)), true);
    block.beta = Var<Real>::leaf(Tensor<Real>(Shape{out}, Real(0)), true);
    enc.blocks_.push_back(std::move(block));
    in = out;
  }
  return enc;
}

template <typename Real>
typename Encoder<Real>::Output Encoder<Real>::forward(const Var<Real>& images, NormMode mode,
                                                      std::span<const std::size_t> active) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != config_.channels || s[2] != config_.height ||
      s[3] != config_.width) {
    fail(ErrorCode::shape, "encoder expects [N, " + std::to_string(config_.channels) + ", " +
                               std::to_string(config_.height) + ", " +
                               std::to_string(config_.width) + "] images, got " +
                               num::shape_string(s));
  }
  const std::vector<std::size_t> configured = config_.active_blocks();
  if (active.empty()) active = configured;
  for (std::size_t b : active) {
    if (b >= blocks_.size()) fail(ErrorCode::invalid_argument, "active block out of range");
  }
  const std::vector<bool> pools = config_.resolved_pooling();

  std::vector<Var<Real>> taps;
  Var<Real> x = images;
  Var<Real> last;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    ConvBlock<Real>& block = blocks_[b];
    Var<Real> h = num::conv2d(x, block.kernels, block.bias);
    h = num::batch_norm(h, block.gamma, block.beta, block.stats, mode);
    h = num::relu(h);
    if (std::find(active.begin(), active.end(), b) != active.end()) {
      Var<Real> tap = config_.unit_norm_layers ? num::l2_normalize_channels(h) : h;
      taps.push_back(num::upsample_nearest(tap, config_.height, config_.width));
    }
    last = h;
    x = pools[b] ? num::max_pool2(h) : h;
  }
  if (taps.empty()) fail(ErrorCode::config, "no active blocks in the hypercolumn mask");
  return {num::concat_channels<Real>(taps), last};
}

template <typename Real>
typename Encoder<Real>::Output Encoder<Real>::infer(const Var<Real>& images, NormMode mode,
                                                    std::span<const std::size_t> active) const {
  if (mode == NormMode::train) fail(ErrorCode::invalid_argument, "infer cannot run in train mode");
  // Neither eval nor batch mode writes the running statistics.
  return const_cast<Encoder*>(this)->forward(images, mode, active);
}

template <typename Real>
std::vector<num::NamedParameter<Real>> Encoder<Real>::parameters(const std::string& prefix) const {
  std::vector<num::NamedParameter<Real>> params;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string base = prefix + ".block" + std::to_string(b + 1) + ".";
    params.push_back({base + "kernels", blocks_[b].kernels});
    params.push_back({base + "bias", blocks_[b].bias});
    params.push_back({base + "gamma", blocks_[b].gamma});
    params.push_back({base + "beta", blocks_[b].beta});
  }
  return params;
}

template class Encoder<float>;
template class Encoder<double>;

template <typename Real>
Var<Real> image_batch(std::span<const std::span<const float>> images, std::size_t channels,
                      std::size_t height, std::size_t width) {
  if (images.empty()) fail(ErrorCode::invalid_argument, "image batch is empty");
  const std::size_t per = channels * height * width;
  std::vector<Real> data;
  data.reserve(images.size() * per);
  for (const auto& img : images) {
    if (img.size() != per) {
      fail(ErrorCode::shape, "image has " + std::to_string(img.size()) + " values, expected " +
                                 std::to_string(per));
    }
    data.insert(data.end(), img.begin(), img.end());
  }
  return Var<Real>::constant(
      Tensor<Real>(Shape{images.size(), channels, height, width}, std::move(data)));
}

template Var<float> image_batch(std::span<const std::span<const float>>, std::size_t, std::size_t,
                                std::size_t);
template Var<double> image_batch(std::span<const std::span<const float>>, std::size_t,
                                 std::size_t, std::size_t);

template <typename Real>
std::vector<HypercolumnField> split_fields(const Tensor<Real>& hc) {
  if (hc.rank() != 4) fail(ErrorCode::shape, "hypercolumn must be [N, D, H, W]");
  const std::size_t n = hc.dim(0), d = hc.dim(1), h = hc.dim(2), w = hc.dim(3);
  const std::size_t plane = h * w;
  std::vector<HypercolumnField> fields(n);
  for (std::size_t i = 0; i < n; ++i) {
    HypercolumnField& f = fields[i];
    f.height = h;
    f.width = w;
    f.dim = d;
    f.features.resize(plane * d);
    for (std::size_t c = 0; c < d; ++c) {
      const Real* src = hc.raw() + (i * d + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) f.features[p * d + c] = static_cast<float>(src[p]);
    }
  }
  return fields;
}

template std::vector<HypercolumnField> split_fields(const Tensor<float>&);
template std::vector<HypercolumnField> split_fields(const Tensor<double>&);

HypercolumnField encode_hypercolumn(std::span<const float> image, Encoder<float>& encoder,
                                    NormMode mode, std::span<const std::size_t> active) {
  const EncoderConfig& c = encoder.config();
  const std::span<const float> one[] = {image};
  auto batch = image_batch<float>(one, c.channels, c.height, c.width);
  auto out = mode == NormMode::train ? encoder.forward(batch, mode, active)
                                     : encoder.infer(batch, mode, active);
  return std::move(split_fields(out.hypercolumn.value()).front());
}

}  // namespace abm
