#include <algorithm>
#include <cstring>
#include <random>

#include "abm/encoder.hpp"
#include "doctest.h"

using namespace abm;
using num::NormMode;

namespace {

std::vector<float> noise_image(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> img(n);
  for (float& v : img) v = dist(rng);
  return img;
}

// One train-mode pass so eval mode has running statistics.
void warm_up(Encoder<float>& enc, std::uint64_t seed) {
  const auto& c = enc.config();
  const std::size_t n = c.channels * c.height * c.width;
  auto a = noise_image(n, seed), b = noise_image(n, seed + 1);
  const std::span<const float> imgs[] = {a, b};
  enc.forward(image_batch<float>(imgs, c.channels, c.height, c.width), NormMode::train);
}

}  // namespace

TEST_CASE("default encoder has four blocks of 32,64,64,64 filters") {
  Rng rng(1);
  auto enc = Encoder<float>::build(EncoderConfig{}, rng);
  REQUIRE(enc.blocks().size() == 4);
  const std::size_t expected[] = {32, 64, 64, 64};
  for (std::size_t b = 0; b < 4; ++b) CHECK(enc.blocks()[b].kernels.shape()[0] == expected[b]);
  CHECK(enc.config().hypercolumn_dim() == 224);
  CHECK(enc.parameters("enc").size() == 16);
  CHECK(enc.parameters("enc")[0].name == "enc.block1.kernels");
}

TEST_CASE("large inputs default to six blocks and layers 4-6 give 192 dims") {
  auto cfg = EncoderConfig::for_input(84, 3);
  CHECK(cfg.block_channels.size() == 6);
  cfg.layer_mask = {4, 5, 6};
  CHECK(cfg.hypercolumn_dim() == 192);
}

TEST_CASE("hypercolumn field is 28x28x224 with all blocks, 28x28x32 with block 1") {
  Rng rng(2);
  auto enc = Encoder<float>::build(EncoderConfig{}, rng);
  warm_up(enc, 10);
  auto img = noise_image(784, 3);
  auto full = encode_hypercolumn(img, enc, NormMode::eval);
  CHECK(full.height == 28);
  CHECK(full.width == 28);
  CHECK(full.dim == 224);
  CHECK(full.features.size() == 784 * 224);
  CHECK(std::all_of(full.features.begin(), full.features.end(),
                    [](float v) { return std::isfinite(v); }));

  const std::size_t first[] = {0};
  auto one = encode_hypercolumn(img, enc, NormMode::eval, first);
  CHECK(one.dim == 32);

  // Prefix consistency: the first 32 dims of the full field are the block-1 field.
  for (std::size_t p = 0; p < 784; ++p) {
    auto a = full.feature_at(p);
    auto b = one.feature_at(p);
    CHECK(std::equal(b.begin(), b.end(), a.begin()));
  }
}

TEST_CASE("layer masks from the config") {
  Rng rng(3);
  EncoderConfig cfg;
  cfg.layer_mask = {2, 4};
  auto enc = Encoder<float>::build(cfg, rng);
  warm_up(enc, 4);
  auto f = encode_hypercolumn(noise_image(784, 5), enc, NormMode::eval);
  CHECK(f.dim == 128);
}

TEST_CASE("feature_at slices rows of the feature block") {
  HypercolumnField f{2, 3, 2, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}};
  CHECK(f.feature_at(0)[0] == 0);
  CHECK(f.feature_at(0)[1] == 1);
  CHECK(f.feature_at(5)[0] == 10);
  CHECK(f.feature_at(5)[1] == 11);
  for (std::size_t p = 0; p < f.pixels(); ++p) CHECK(f.feature_at(p)[1] == f.features[p * 2 + 1]);
  CHECK_THROWS_AS(f.feature_at(6), Error);
}

TEST_CASE("eval-mode encoding is deterministic") {
  Rng rng(4);
  auto enc = Encoder<float>::build(EncoderConfig{}, rng);
  warm_up(enc, 6);
  auto img = noise_image(784, 7);
  auto copy = img;
  auto a = encode_hypercolumn(img, enc, NormMode::eval);
  auto b = encode_hypercolumn(copy, enc, NormMode::eval);
  CHECK(a.features == b.features);
}

TEST_CASE("same seed builds bit-identical encoders") {
  Rng r1(9), r2(9);
  auto a = Encoder<float>::build(EncoderConfig{}, r1);
  auto b = Encoder<float>::build(EncoderConfig{}, r2);
  for (std::size_t i = 0; i < a.blocks().size(); ++i) {
    auto ka = a.blocks()[i].kernels.data();
    auto kb = b.blocks()[i].kernels.data();
    CHECK(std::memcmp(ka.data(), kb.data(), ka.size_bytes()) == 0);
  }
}

TEST_CASE("eval mode without running statistics is an error") {
  Rng rng(5);
  auto enc = Encoder<float>::build(EncoderConfig{}, rng);
  CHECK_THROWS_AS(encode_hypercolumn(noise_image(784, 1), enc, NormMode::eval), Error);
}

TEST_CASE("translating the input translates block-1 activations") {
  Rng rng(6);
  auto enc = Encoder<float>::build(EncoderConfig{}, rng);
  warm_up(enc, 8);
  // Content confined to the centre so a 2-pixel shift stays inside the frame.
  std::vector<float> a(784, 0.0f), b(784, 0.0f);
  auto content = noise_image(784, 11);
  for (std::size_t y = 8; y < 18; ++y)
    for (std::size_t x = 8; x < 18; ++x) {
      a[y * 28 + x] = content[y * 28 + x];
      b[(y + 2) * 28 + x + 2] = content[y * 28 + x];
    }
  const std::size_t first[] = {0};
  auto fa = encode_hypercolumn(a, enc, NormMode::eval, first);
  auto fb = encode_hypercolumn(b, enc, NormMode::eval, first);
  for (std::size_t y = 1; y < 25; ++y)
    for (std::size_t x = 1; x < 25; ++x) {
      auto va = fa.feature_at(y * 28 + x);
      auto vb = fb.feature_at((y + 2) * 28 + x + 2);
      for (std::size_t d = 0; d < va.size(); ++d) REQUIRE(va[d] == doctest::Approx(vb[d]).epsilon(1e-5));
    }
}

TEST_CASE("encoder shape and config errors") {
  Rng rng(7);
  EncoderConfig empty;
  empty.block_channels.clear();
  CHECK_THROWS_AS(Encoder<float>::build(empty, rng), Error);

  EncoderConfig bad_mask;
  bad_mask.layer_mask = {5};
  CHECK_THROWS_AS(bad_mask.validate(), Error);

  auto enc = Encoder<float>::build(EncoderConfig{}, rng);
  std::vector<float> small(100, 0.5f);
  const std::span<const float> imgs[] = {small};
  CHECK_THROWS_AS(enc.forward(image_batch<float>(imgs, 1, 10, 10), NormMode::train), Error);
}

TEST_CASE("encoder config JSON round trip and unknown keys") {
  EncoderConfig c;
  c.layer_mask = {1, 3};
  c.unit_norm_layers = true;
  auto back = encoder_config_from_json(to_json(c));
  CHECK(back.block_channels == c.block_channels);
  CHECK(back.layer_mask == c.layer_mask);
  CHECK(back.unit_norm_layers);
  CHECK(back.resolved_pooling() == c.resolved_pooling());

  auto big = encoder_config_from_json(nlohmann::json{{"input_size", {84, 84}}, {"channels", 3}});
  CHECK(big.block_channels.size() == 6);

  try {
    encoder_config_from_json(nlohmann::json{{"foo", 1}});
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::config);
    CHECK(std::string(e.what()).find("encoder.foo") != std::string::npos);
  }
}
