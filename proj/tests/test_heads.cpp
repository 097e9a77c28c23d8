#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "abm/heads.hpp"
#include "abm/num/gradcheck.hpp"
#include "doctest.h"

using namespace abm;
using num::GradCheckOptions;
using num::NormMode;

namespace {

double total(const LabelPosterior& p) {
  return std::accumulate(p.probabilities.begin(), p.probabilities.end(), 0.0);
}

CostMatrix square(std::size_t k, float diagonal, float off) {
  CostMatrix c;
  c.rows = c.cols = k;
  c.costs.assign(k * k, off);
  for (std::size_t i = 0; i < k; ++i) c.costs[i * k + i] = diagonal;
  c.row_pixels.resize(k);
  std::iota(c.row_pixels.begin(), c.row_pixels.end(), std::size_t{0});
  c.col_pixels = c.row_pixels;
  return c;
}

ModelConfig tiny_config(Method method) {
  ModelConfig c;
  c.encoder.height = c.encoder.width = 8;
  c.encoder.block_channels = {3, 4};
  c.method = method;
  c.test_fraction = 0.25;
  c.reference_fraction = 0.5;
  return c;
}

// Constant feature field: zero kernels and unit shift after normalization.
template <typename Real>
void flatten_encoder(Encoder<Real>& enc) {
  for (auto& b : enc.blocks()) {
    for (auto& v : b.kernels.mutable_value().data()) v = 0;
    for (auto& v : b.beta.mutable_value().data()) v = 1;
  }
}

}  // namespace

TEST_CASE("abm posterior examples") {
  const double z[] = {0.15, 0.35};
  auto p = abm_posterior(z, 1.0);
  CHECK(p.probabilities[0] == doctest::Approx(0.5498).epsilon(1e-4));
  CHECK(p.probabilities[1] == doctest::Approx(0.4502).epsilon(1e-4));
  CHECK(p.predicted == 1);
  CHECK_FALSE(p.open_slot);

  const double equal[] = {0.2, 0.2, 0.2};
  for (double v : abm_posterior(equal, 7.0).probabilities) CHECK(v == doctest::Approx(1.0 / 3));
  CHECK(abm_posterior(equal, 7.0).predicted == 1);

  const double distinct[] = {0.3, -0.1, 0.2};
  auto sharp = abm_posterior(distinct, 1e4);
  CHECK(sharp.probability_of(2) == doctest::Approx(1.0));
  CHECK(sharp.predicted == 2);
  CHECK_THROWS_AS(abm_posterior({}, 1.0), Error);
}

TEST_CASE("openmax posterior examples") {
  const double one[] = {0.4};
  auto p = openmax_posterior(one, {0.4, 3.0});
  CHECK(p.probabilities[0] == doctest::Approx(0.5));
  CHECK(p.probabilities[1] == doctest::Approx(0.5));
  // Open only when every score strictly exceeds the threshold.
  CHECK(p.predicted == 1);
  CHECK(openmax_label(one, 0.3999) == 0);

  const double z[] = {-1.0, 0.0};
  auto q = openmax_posterior(z, {0.0, 1.0});
  CHECK(q.probabilities[0] == doctest::Approx(0.2119).epsilon(1e-3));
  CHECK(q.probabilities[1] == doctest::Approx(0.5761).epsilon(1e-4));
  CHECK(q.probabilities[2] == doctest::Approx(0.2119).epsilon(1e-3));
  CHECK(q.predicted == 1);
  CHECK(q.probability_of(0) == q.probabilities[0]);

  auto open = openmax_posterior(z, {-1e3, 1.0});
  CHECK(open.probability_of(0) == doctest::Approx(1.0));
  CHECK(open.predicted == 0);
  CHECK_THROWS_AS(openmax_posterior({}, {}), Error);
}

TEST_CASE("posterior properties on random inputs") {
  Rng rng(1);
  std::uniform_real_distribution<double> zdist(-1.0, 1.0), sdist(0.1, 40.0);
  for (int t = 0; t < 2000; ++t) {
    std::vector<double> z(1 + t % 9);
    for (double& v : z) v = zdist(rng);
    const double s = sdist(rng);
    const OpenSetHead head{zdist(rng), s};

    auto closed = abm_posterior(z, s);
    auto open = openmax_posterior(z, head);
    CHECK(std::abs(total(closed) - 1.0) < 1e-6);
    CHECK(std::abs(total(open) - 1.0) < 1e-6);
    for (double v : open.probabilities) CHECK(v >= 0.0);

    const double min_z = *std::min_element(z.begin(), z.end());
    CHECK((open.predicted == 0) == (min_z > head.tau));

    // Prediction is invariant to a common positive rescaling of zeta.
    std::vector<double> scaled = z;
    for (double& v : scaled) v *= 3.7;
    CHECK(abm_posterior(scaled, s).predicted == closed.predicted);

    // Lowering one score raises its probability (moderate scale, no saturation).
    const std::size_t k = t % z.size();
    std::vector<double> lowered = z;
    lowered[k] -= 0.05;
    const double moderate = std::min(s, 5.0);
    if (z.size() > 1) {
      CHECK(abm_posterior(lowered, moderate).probabilities[k] > abm_posterior(z, moderate).probabilities[k]);
    }

    // Permuting supports permutes the posterior.
    std::vector<std::size_t> perm(z.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> permuted(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) permuted[i] = z[perm[i]];
    auto pp = abm_posterior(permuted, s);
    for (std::size_t i = 0; i < z.size(); ++i) {
      CHECK(pp.probabilities[i] == doctest::Approx(closed.probabilities[perm[i]]).epsilon(1e-12));
    }
  }
}

TEST_CASE("self-regularization loss examples") {
  CHECK(self_regularization_loss(square(6, -1000.0f, 0.0f)) == doctest::Approx(0.0));
  CHECK(self_regularization_loss(square(9, -0.5f, -0.5f)) == doctest::Approx(std::log(9.0)));
  CHECK(self_regularization_loss(square(157, 0.25f, 0.25f)) == doctest::Approx(5.056).epsilon(1e-3));
  CHECK(std::log(5.0) + std::log(157.0) == doctest::Approx(6.666).epsilon(1e-3));

  auto missing = square(3, 0.0f, 0.0f);
  missing.col_pixels = {10, 11, 12};
  CHECK_THROWS_AS(self_regularization_loss(missing), Error);

  // Field form: a field against itself with forced identities.
  Rng rng(2);
  HypercolumnField f{4, 4, 3, std::vector<float>(48)};
  std::normal_distribution<float> n;
  for (float& v : f.features) v = n(rng);
  auto s = sample_pixels(4, 4, 0.25, rng);
  auto r = sample_pixels(4, 4, 0.5, rng, s.indices);
  const double loss = self_regularization_loss(f, s, r);
  CHECK(loss > 0.0);
  CHECK(loss < std::log(static_cast<double>(r.indices.size())) + 2.0);
}

TEST_CASE("baseline posterior") {
  Rng rng(3);
  EncoderConfig ec;
  ec.height = ec.width = 8;
  ec.block_channels = {4, 4};
  auto enc = Encoder<float>::build(ec, rng);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<std::vector<float>> imgs(3, std::vector<float>(64));
  for (auto& img : imgs)
    for (float& v : img) v = u(rng);
  const std::span<const float> supports[] = {imgs[0], imgs[1], imgs[2]};
  auto p = baseline_posterior(imgs[1], supports, enc, 10.0, NormMode::batch);
  CHECK(std::abs(total(p) - 1.0) < 1e-6);
  CHECK(p.predicted == 2);
  const std::span<const float> single[] = {imgs[0]};
  CHECK(baseline_posterior(imgs[2], single, enc, 10.0, NormMode::batch).probabilities[0] == 1.0);
}

TEST_CASE("model parameters for shared and separate encoders") {
  auto cfg = tiny_config(Method::abm_selfreg);
  auto shared = Model<float>::build(cfg, 1);
  CHECK(shared.shared());
  CHECK(&shared.test_encoder() == &shared.reference_encoder());
  auto params = shared.parameters();
  CHECK(params.size() == 2 * 4 + 2);
  CHECK(params.front().name == "encoder.block1.kernels");
  CHECK(params.back().name == "head.log_scale");
  CHECK(shared.head().scale == doctest::Approx(10.0));
  CHECK(shared.head().tau == 0.0);

  cfg.encoder.shared = false;
  auto split = Model<float>::build(cfg, 1);
  CHECK_FALSE(split.shared());
  auto sp = split.parameters();
  CHECK(sp.size() == 4 * 4 + 2);
  CHECK(sp[0].name == "encoder_test.block1.kernels");
  CHECK(sp[8].name == "encoder_ref.block1.kernels");
  CHECK_FALSE(sp[0].var.same_node(sp[8].var));
}

TEST_CASE("episode loss reduces to analytic values for uniform posteriors") {
  auto data = make_synthetic({5, 6, 4, 8});
  auto episode = sample_episode(data, {5, 1, 1, false}, 11);

  auto cfg = tiny_config(Method::abm);
  cfg.reference_fraction = 1.0;
  auto model = Model<double>::build(cfg, 2);
  flatten_encoder(model.test_encoder());
  model.log_scale().mutable_value()[0] = -60.0;

  auto plain = episode_loss(model, episode, NormMode::batch, 3);
  CHECK(plain.loss.item() == doctest::Approx(std::log(5.0)).epsilon(1e-9));
  CHECK_FALSE(plain.has_self_term);
  for (double p : plain.posteriors[0].probabilities) CHECK(p == doctest::Approx(0.2));

  cfg.method = Method::abm_selfreg;
  auto reg = Model<double>::build(cfg, 2);
  flatten_encoder(reg.test_encoder());
  reg.log_scale().mutable_value()[0] = -60.0;
  auto with_self = episode_loss(reg, episode, NormMode::batch, 3);
  CHECK(with_self.has_self_term);
  CHECK(with_self.self_regularization == doctest::Approx(std::log(64.0)).epsilon(1e-9));
  CHECK(with_self.loss.item() == doctest::Approx(std::log(5.0) + std::log(64.0)).epsilon(1e-9));

  cfg.head.lambda = 0.0;
  auto off = Model<double>::build(cfg, 2);
  CHECK_FALSE(episode_loss(off, episode, NormMode::batch, 3).has_self_term);
}

TEST_CASE("episode loss gradient matches finite differences") {
  auto data = make_synthetic({7, 4, 6, 8});
  GradCheckOptions opts;
  opts.coordinates = 30;

  SUBCASE("open-set, greedy, self-regularized") {
    auto episode = sample_episode(data, {2, 1, 3, true}, 5);
    auto model = Model<double>::build(tiny_config(Method::abm_selfreg), 4);
    model.tau().mutable_value()[0] = -0.3;
    model.log_scale().mutable_value()[0] = std::log(3.0);
    const auto params = model.parameters();
    auto r = num::grad_check([&] { return episode_loss(model, episode, NormMode::batch, 9).loss; }, params, opts);
    CHECK(r.checked >= 20);
    CHECK(r.max_relative_error < 1e-4);
  }
  SUBCASE("closed-set, hungarian, separate encoders") {
    auto episode = sample_episode(data, {3, 1, 2, false}, 6);
    auto cfg = tiny_config(Method::abm_selfreg);
    cfg.aligner = Aligner::hungarian;
    cfg.encoder.shared = false;
    auto model = Model<double>::build(cfg, 5);
    model.log_scale().mutable_value()[0] = std::log(3.0);
    const auto params = model.parameters();
    auto r = num::grad_check([&] { return episode_loss(model, episode, NormMode::batch, 10).loss; }, params, opts);
    CHECK(r.max_relative_error < 1e-4);
  }
  SUBCASE("baseline, open-set") {
    auto episode = sample_episode(data, {3, 1, 3, true}, 7);
    auto model = Model<double>::build(tiny_config(Method::baseline), 6);
    model.log_scale().mutable_value()[0] = std::log(3.0);
    const auto params = model.parameters();
    auto r = num::grad_check([&] { return episode_loss(model, episode, NormMode::batch, 11).loss; }, params, opts);
    CHECK(r.max_relative_error < 1e-4);
  }
}

TEST_CASE("predict agrees with the training graph under batch normalization") {
  auto data = make_synthetic({8, 5, 4, 8});
  for (Method m : {Method::abm_selfreg, Method::baseline}) {
    auto cfg = tiny_config(m);
    cfg.eval_norm = NormMode::batch;
    auto model = Model<float>::build(cfg, 3);
    auto episode = sample_episode(data, {4, 1, 3, true}, 12);
    auto graph = episode_loss(model, episode, NormMode::batch, 13);
    auto fast = predict(model, episode, 13);
    REQUIRE(fast.size() == 3);
    for (std::size_t q = 0; q < 3; ++q) {
      CHECK(fast[q].open_slot);
      CHECK(std::abs(total(fast[q]) - 1.0) < 1e-6);
      for (std::size_t i = 0; i < fast[q].probabilities.size(); ++i) {
        CHECK(fast[q].probabilities[i] == doctest::Approx(graph.posteriors[q].probabilities[i]).epsilon(1e-3));
      }
    }
  }
}

TEST_CASE("episode loss rejects labels outside the episode") {
  auto data = make_synthetic({9, 4, 4, 8});
  auto episode = sample_episode(data, {3, 1, 1, false}, 1);
  episode.queries[0].label = 0;
  auto model = Model<float>::build(tiny_config(Method::abm), 1);
  CHECK_THROWS_AS(episode_loss(model, episode, NormMode::batch, 1), Error);
  episode.queries[0].label = 4;
  CHECK_THROWS_AS(episode_loss(model, episode, NormMode::batch, 1), Error);
}

TEST_CASE("model config JSON") {
  auto c = tiny_config(Method::baseline);
  c.aligner = Aligner::hungarian;
  c.head.lambda = 0.5;
  c.eval_norm = NormMode::batch;
  const auto j = to_json(c);
  auto back = model_config_from_json(j, c.encoder, "");
  CHECK(back.method == Method::baseline);
  CHECK(back.aligner == Aligner::hungarian);
  CHECK(back.head.lambda == 0.5);
  CHECK(back.eval_norm == NormMode::batch);
  CHECK(back.test_fraction == 0.25);
  CHECK(method_from_string("abm+selfreg") == Method::abm_selfreg);
  CHECK_THROWS_AS(model_config_from_json(nlohmann::json{{"head", {{"lamda", 1}}}}, c.encoder, ""), Error);
  CHECK_THROWS_AS(model_config_from_json(nlohmann::json{{"sampling", {{"test_fraction", 0}}}}, c.encoder, ""), Error);
}
