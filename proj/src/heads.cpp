#include "abm/heads.hpp"

#include <algorithm>
#include <cmath>

#include "json_util.hpp"

namespace abm {

using num::NormMode;
using num::Tensor;
using num::Var;

std::string to_string(Method m) {
  switch (m) {
    case Method::abm: return "abm";
    case Method::abm_selfreg: return "abm+selfreg";
    case Method::baseline: return "baseline";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "abm") return Method::abm;
  if (s == "abm+selfreg" || s == "abm_selfreg") return Method::abm_selfreg;
  if (s == "baseline") return Method::baseline;
  fail(ErrorCode::config, "unknown method '" + s + "' (expected abm, abm+selfreg or baseline)");
}

double LabelPosterior::probability_of(std::size_t label) const {
  const std::size_t index = open_slot ? label : label - 1;
  if ((!open_slot && label == 0) || index >= probabilities.size()) {
    fail(ErrorCode::invalid_argument, "label " + std::to_string(label) + " is not in the posterior");
  }
  return probabilities[index];
}

LabelPosterior posterior_from_logits(std::span<const double> logits, bool open_slot) {
  if (logits.empty()) fail(ErrorCode::invalid_argument, "posterior needs at least one logit");
  for (double v : logits) {
    if (!std::isfinite(v)) fail(ErrorCode::numeric, "non-finite logit in posterior");
  }
  LabelPosterior p;
  p.open_slot = open_slot;
  const double mx = *std::max_element(logits.begin(), logits.end());
  p.probabilities.resize(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p.probabilities[i] = std::exp(logits[i] - mx);
    z += p.probabilities[i];
  }
  for (double& v : p.probabilities) v /= z;
  // Ties resolve to the lowest label, which is the lowest index.
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  p.predicted = p.label_at(best);
  return p;
}

LabelPosterior abm_posterior(std::span<const double> zetas, double scale) {
  if (zetas.empty()) fail(ErrorCode::invalid_argument, "abm posterior needs at least one support score");
  std::vector<double> logits(zetas.size());
  for (std::size_t i = 0; i < zetas.size(); ++i) logits[i] = -scale * zetas[i];
  return posterior_from_logits(logits, false);
}

std::size_t openmax_label(std::span<const double> zetas, double tau) {
  if (zetas.empty()) fail(ErrorCode::invalid_argument, "openmax decision needs a non-empty support set");
  const auto best = std::min_element(zetas.begin(), zetas.end());
  return *best > tau ? 0 : static_cast<std::size_t>(best - zetas.begin()) + 1;
}

LabelPosterior openmax_posterior(std::span<const double> zetas, const OpenSetHead& head) {
  if (zetas.empty()) fail(ErrorCode::invalid_argument, "openmax posterior needs a non-empty support set");
  std::vector<double> logits{-head.scale * head.tau};
  for (double z : zetas) logits.push_back(-head.scale * z);
  LabelPosterior p = posterior_from_logits(logits, true);
  p.predicted = openmax_label(zetas, head.tau);
  return p;
}

double self_regularization_loss(const CostMatrix& c) {
  if (c.rows == 0 || c.cols == 0) fail(ErrorCode::invalid_argument, "self-regularization of an empty cost matrix");
  double total = 0.0;
  for (std::size_t r = 0; r < c.rows; ++r) {
    const auto it = std::find(c.col_pixels.begin(), c.col_pixels.end(), c.row_pixels[r]);
    if (it == c.col_pixels.end()) {
      fail(ErrorCode::invalid_argument, "identity column for pixel " + std::to_string(c.row_pixels[r]) +
                                            " missing from the reference sample");
    }
    const std::size_t j = static_cast<std::size_t>(it - c.col_pixels.begin());
    const auto row = c.row(r);
    const float lo = *std::min_element(row.begin(), row.end());
    double s = 0.0;
    for (float v : row) s += std::exp(static_cast<double>(lo) - v);
    total += std::log(s) - (static_cast<double>(lo) - row[j]);
  }
  return total / static_cast<double>(c.rows);
}

double self_regularization_loss(const HypercolumnField& field, const PixelSample& sample,
                                const PixelSample& reference_sample) {
  return self_regularization_loss(cost_matrix(field, field, sample, reference_sample));
}

namespace {

template <typename Real>
std::vector<double> global_embeddings(const Tensor<Real>& activation) {
  const std::size_t n = activation.dim(0), c = activation.dim(1);
  const std::size_t plane = activation.dim(2) * activation.dim(3);
  std::vector<double> e(n * c, 0.0);
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += activation.raw()[i * plane + p];
    e[i] = s / static_cast<double>(plane);
  }
  return e;
}

double cosine(const double* a, const double* b, std::size_t d) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < d; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb) + kCosineEpsilon);
}

}  // namespace

LabelPosterior baseline_posterior(std::span<const float> query,
                                  std::span<const std::span<const float>> supports,
                                  const Encoder<float>& encoder, double scale, NormMode mode) {
  if (supports.empty()) fail(ErrorCode::invalid_argument, "baseline posterior needs supports");
  const EncoderConfig& c = encoder.config();
  std::vector<std::span<const float>> all{query};
  all.insert(all.end(), supports.begin(), supports.end());
  auto out = encoder.infer(image_batch<float>(all, c.channels, c.height, c.width), mode);
  const auto emb = global_embeddings(out.final_activation.value());
  const std::size_t d = out.final_activation.shape()[1];
  std::vector<double> zetas(supports.size());
  for (std::size_t s = 0; s < supports.size(); ++s) zetas[s] = -cosine(&emb[0], &emb[(s + 1) * d], d);
  return abm_posterior(zetas, scale);
}

void ModelConfig::validate() const {
  encoder.validate();
  auto fraction_ok = [](double f) { return f > 0.0 && f <= 1.0; };
  if (!fraction_ok(test_fraction) || !fraction_ok(reference_fraction)) {
    fail(ErrorCode::config, "sampling fractions must lie in (0, 1]");
  }
  if (!(head.scale_init > 0.0) || !std::isfinite(head.scale_init)) fail(ErrorCode::config, "head.scale_init must be positive");
  if (!(head.lambda >= 0.0) || !std::isfinite(head.lambda)) fail(ErrorCode::config, "head.lambda must be >= 0");
  if (!std::isfinite(head.tau_init)) fail(ErrorCode::config, "head.tau_init must be finite");
  if (eval_norm == NormMode::train) fail(ErrorCode::config, "eval_norm must be eval or batch");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"encoder", to_json(c.encoder)},
          {"method", to_string(c.method)},
          {"aligner", to_string(c.aligner)},
          {"aggregation", c.aggregation == Aggregation::mean ? "mean" : "sum"},
          {"head", {{"lambda", c.head.lambda}, {"tau_init", c.head.tau_init}, {"scale_init", c.head.scale_init}}},
          {"sampling", {{"test_fraction", c.test_fraction}, {"reference_fraction", c.reference_fraction}}},
          {"eval_norm", c.eval_norm == NormMode::eval ? "eval" : "batch"}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, const EncoderConfig& encoder,
                                   const std::string& path) {
  ModelConfig c;
  c.encoder = encoder;
  std::string s;
  if (j.contains("method")) {
    detail::read_optional(j, "method", path, s);
    c.method = method_from_string(s);
  }
  if (j.contains("aligner")) {
    detail::read_optional(j, "aligner", path, s);
    c.aligner = aligner_from_string(s);
  }
  if (j.contains("aggregation")) {
    detail::read_optional(j, "aggregation", path, s);
    if (s == "mean") c.aggregation = Aggregation::mean;
    else if (s == "sum") c.aggregation = Aggregation::sum;
    else fail(ErrorCode::config, "'" + detail::join_path(path, "aggregation") + "' must be mean or sum");
  }
  if (j.contains("head")) {
    const std::string hp = detail::join_path(path, "head");
    detail::reject_unknown_keys(j["head"], hp, {"lambda", "tau_init", "scale_init"});
    detail::read_optional(j["head"], "lambda", hp, c.head.lambda);
    detail::read_optional(j["head"], "tau_init", hp, c.head.tau_init);
    detail::read_optional(j["head"], "scale_init", hp, c.head.scale_init);
  }
  if (j.contains("sampling")) {
    const std::string sp = detail::join_path(path, "sampling");
    detail::reject_unknown_keys(j["sampling"], sp, {"test_fraction", "reference_fraction"});
    detail::read_optional(j["sampling"], "test_fraction", sp, c.test_fraction);
    detail::read_optional(j["sampling"], "reference_fraction", sp, c.reference_fraction);
  }
  if (j.contains("eval_norm")) {
    detail::read_optional(j, "eval_norm", path, s);
    if (s == "eval") c.eval_norm = NormMode::eval;
    else if (s == "batch") c.eval_norm = NormMode::batch;
    else fail(ErrorCode::config, "'" + detail::join_path(path, "eval_norm") + "' must be eval or batch");
  }
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorCode::config, "'" + (path.empty() ? std::string("config") : path) + "': " + e.what());
  }
  return c;
}

template <typename Real>
Model<Real> Model<Real>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Model m;
  m.config_ = config;
  m.test_encoder_ = std::make_shared<Encoder<Real>>(Encoder<Real>::build(config.encoder, rng));
  m.reference_encoder_ = config.encoder.shared
                             ? m.test_encoder_
                             : std::make_shared<Encoder<Real>>(Encoder<Real>::build(config.encoder, rng));
  m.tau_ = Var<Real>::leaf(Tensor<Real>(num::Shape{1}, static_cast<Real>(config.head.tau_init)), true);
  m.log_scale_ = Var<Real>::leaf(
      Tensor<Real>(num::Shape{1}, static_cast<Real>(std::log(config.head.scale_init))), true);
  return m;
}

template <typename Real>
OpenSetHead Model<Real>::head() const {
  return {static_cast<double>(tau_.value()[0]), std::exp(static_cast<double>(log_scale_.value()[0]))};
}

template <typename Real>
std::vector<num::NamedParameter<Real>> Model<Real>::parameters() const {
  std::vector<num::NamedParameter<Real>> params;
  if (shared()) {
    params = test_encoder_->parameters("encoder");
  } else {
    params = test_encoder_->parameters("encoder_test");
    auto ref = reference_encoder_->parameters("encoder_ref");
    params.insert(params.end(), ref.begin(), ref.end());
  }
  params.push_back({"head.tau", tau_});
  params.push_back({"head.log_scale", log_scale_});
  return params;
}

template <typename Real>
std::vector<std::pair<std::string, num::BatchNormStats<Real>*>> Model<Real>::norm_stats() {
  std::vector<std::pair<std::string, num::BatchNormStats<Real>*>> out;
  auto add = [&](Encoder<Real>& enc, const std::string& prefix) {
    for (std::size_t b = 0; b < enc.blocks().size(); ++b) {
      out.emplace_back(prefix + ".block" + std::to_string(b + 1), &enc.blocks()[b].stats);
    }
  };
  if (shared()) {
    add(*test_encoder_, "encoder");
  } else {
    add(*test_encoder_, "encoder_test");
    add(*reference_encoder_, "encoder_ref");
  }
  return out;
}

template class Model<float>;
template class Model<double>;

namespace {

// Batch layout of an episode's images across the two encoders.
struct Layout {
  std::vector<std::span<const float>> test_images;
  std::vector<std::span<const float>> reference_images;
  std::vector<std::size_t> query_rows;      // query q in the test batch
  std::vector<std::size_t> support_rows;    // support s in the reference batch
  std::vector<std::size_t> query_ref_rows;  // query q in the reference batch (self term)
};

Layout layout(const Episode& e, bool shared, bool self_term) {
  Layout l;
  for (const auto& s : e.support) {
    l.support_rows.push_back(l.reference_images.size());
    l.reference_images.push_back(s.pixels);
  }
  if (shared) {
    for (const auto& q : e.queries) {
      l.query_rows.push_back(l.reference_images.size());
      l.query_ref_rows.push_back(l.reference_images.size());
      l.reference_images.push_back(q.pixels);
    }
  } else {
    for (const auto& q : e.queries) {
      l.query_rows.push_back(l.test_images.size());
      l.test_images.push_back(q.pixels);
      if (self_term) {
        l.query_ref_rows.push_back(l.reference_images.size());
        l.reference_images.push_back(q.pixels);
      }
    }
  }
  return l;
}

std::size_t target_index(const Episode& e, std::size_t label) {
  const std::size_t n = e.support_labels();
  if (e.open_set()) {
    if (label > n) fail(ErrorCode::invalid_argument, "query label " + std::to_string(label) + " outside the episode's label set");
    return label;
  }
  if (label < 1 || label > n) {
    fail(ErrorCode::invalid_argument, "query label " + std::to_string(label) + " outside the episode's label set");
  }
  return label - 1;
}

// Independent sample streams so training and prediction draw identical samples.
struct Streams {
  Rng test, reference, self;
  explicit Streams(std::uint64_t seed)
      : test(derive_seed(seed, 1u)), reference(derive_seed(seed, 2u)), self(derive_seed(seed, 3u)) {}
};

template <typename Real>
std::vector<std::size_t> choose_columns(Aligner a, std::size_t rows, std::size_t cols, std::span<const Real> costs) {
  return a == Aligner::greedy ? greedy_columns<Real>(rows, cols, costs) : hungarian_columns<Real>(rows, cols, costs);
}

template <typename T, typename Mean>
std::vector<T> per_label(const Episode& e, const std::vector<T>& per_support, Mean mean_of) {
  std::vector<T> out;
  for (std::size_t label = 1; label <= e.support_labels(); ++label) {
    std::vector<T> group;
    for (std::size_t s = 0; s < e.support.size(); ++s) {
      if (e.support[s].label == label) group.push_back(per_support[s]);
    }
    out.push_back(group.size() == 1 ? group[0] : mean_of(group));
  }
  return out;
}

}  // namespace

template <typename Real>
EpisodeLoss<Real> episode_loss(Model<Real>& model, const Episode& episode, NormMode mode,
                               std::uint64_t seed) {
  if (episode.support.empty() || episode.queries.empty()) {
    fail(ErrorCode::invalid_argument, "episode needs supports and queries");
  }
  const ModelConfig& cfg = model.config();
  const EncoderConfig& ec = cfg.encoder;
  const double lambda = cfg.self_weight();
  const bool self_term = lambda > 0.0 && cfg.method != Method::baseline;
  const Layout l = layout(episode, model.shared(), self_term);

  typename Encoder<Real>::Output ref_out = model.reference_encoder().forward(
      image_batch<Real>(l.reference_images, ec.channels, ec.height, ec.width), mode);
  typename Encoder<Real>::Output test_out =
      model.shared() ? ref_out
                     : model.test_encoder().forward(
                           image_batch<Real>(l.test_images, ec.channels, ec.height, ec.width), mode);

  const Var<Real> neg_scale = num::scale(num::exp(model.log_scale()), -1.0);
  auto scalar_mean = [](const std::vector<Var<Real>>& v) { return num::mean(num::concat<Real>(v)); };

  EpisodeLoss<Real> result;
  std::vector<Var<Real>> ce_terms, self_terms;
  Streams streams(seed);

  std::vector<Var<Real>> support_features;  // reference pixels (abm) or embeddings (baseline)
  std::vector<PixelSample> support_samples;
  Var<Real> test_emb, support_emb;
  if (cfg.method == Method::baseline) {
    test_emb = num::spatial_mean(test_out.final_activation);
    support_emb = num::gather_rows(num::spatial_mean(ref_out.final_activation),
                                   std::span<const std::size_t>(l.support_rows));
  } else {
    for (std::size_t s = 0; s < episode.support.size(); ++s) {
      support_samples.push_back(sample_pixels(ec.height, ec.width, cfg.reference_fraction, streams.reference));
      support_features.push_back(
          num::gather_pixels(ref_out.hypercolumn, l.support_rows[s], support_samples[s].indices));
    }
  }

  for (std::size_t q = 0; q < episode.queries.size(); ++q) {
    const std::size_t target = target_index(episode, episode.queries[q].label);
    std::vector<Var<Real>> zetas;
    Var<Real> u;
    PixelSample test_sample;
    if (cfg.method == Method::baseline) {
      const std::size_t row[] = {l.query_rows[q]};
      const Var<Real> cost = num::neg_cosine(num::gather_rows(test_emb, std::span<const std::size_t>(row)), support_emb);
      for (std::size_t s = 0; s < episode.support.size(); ++s) zetas.push_back(num::pick(cost, s));
    } else {
      test_sample = sample_pixels(ec.height, ec.width, cfg.test_fraction, streams.test);
      u = num::gather_pixels(test_out.hypercolumn, l.query_rows[q], test_sample.indices);
      for (std::size_t s = 0; s < episode.support.size(); ++s) {
        const Var<Real> cost = num::neg_cosine(u, support_features[s], kCosineEpsilon);
        const auto cols = choose_columns<Real>(cfg.aligner, cost.shape()[0], cost.shape()[1], cost.data());
        const Var<Real> minima = num::select_columns(cost, cols);
        zetas.push_back(cfg.aggregation == Aggregation::mean ? num::mean(minima) : num::sum(minima));
      }
    }
    std::vector<Var<Real>> label_scores = per_label(episode, zetas, scalar_mean);
    if (episode.open_set()) label_scores.insert(label_scores.begin(), model.tau());
    const Var<Real> logits = num::mul_scalar(num::concat<Real>(label_scores), neg_scale);
    const Var<Real> log_probs = num::log_softmax(logits);
    ce_terms.push_back(num::scale(num::pick(log_probs, target), -1.0));
    std::vector<double> logit_values(logits.data().begin(), logits.data().end());
    result.posteriors.push_back(posterior_from_logits(logit_values, episode.open_set()));
    if (episode.open_set()) {
      std::vector<double> scores;
      for (std::size_t i = 1; i < label_scores.size(); ++i) scores.push_back(label_scores[i].item());
      result.posteriors.back().predicted = openmax_label(scores, model.tau().item());
    }

    if (self_term) {
      const PixelSample ref = sample_pixels(ec.height, ec.width, cfg.reference_fraction, streams.self,
                                            test_sample.indices);
      const Var<Real> v = num::gather_pixels(ref_out.hypercolumn, l.query_ref_rows[q], ref.indices);
      std::vector<std::size_t> targets(test_sample.indices.size());
      for (std::size_t i = 0; i < targets.size(); ++i) {
        targets[i] = static_cast<std::size_t>(
            std::lower_bound(ref.indices.begin(), ref.indices.end(), test_sample.indices[i]) - ref.indices.begin());
      }
      self_terms.push_back(num::softmax_cross_entropy_rows(num::scale(num::neg_cosine(u, v, kCosineEpsilon), -1.0), targets));
    }
  }

  const Var<Real> classification = scalar_mean(ce_terms);
  result.classification = static_cast<double>(classification.item());
  result.loss = classification;
  if (self_term) {
    const Var<Real> self = scalar_mean(self_terms);
    result.self_regularization = static_cast<double>(self.item());
    result.has_self_term = true;
    result.loss = num::add(classification, num::scale(self, lambda));
  }
  return result;
}

template EpisodeLoss<float> episode_loss(Model<float>&, const Episode&, NormMode, std::uint64_t);
template EpisodeLoss<double> episode_loss(Model<double>&, const Episode&, NormMode, std::uint64_t);

std::vector<LabelPosterior> predict(const Model<float>& model, const Episode& episode, std::uint64_t seed) {
  if (episode.support.empty() || episode.queries.empty()) {
    fail(ErrorCode::invalid_argument, "episode needs supports and queries");
  }
  const ModelConfig& cfg = model.config();
  const EncoderConfig& ec = cfg.encoder;
  const Layout l = layout(episode, model.shared(), false);
  const auto ref_out = model.reference_encoder().infer(
      image_batch<float>(l.reference_images, ec.channels, ec.height, ec.width), cfg.eval_norm);
  const auto test_out = model.shared()
                            ? ref_out
                            : model.test_encoder().infer(
                                  image_batch<float>(l.test_images, ec.channels, ec.height, ec.width), cfg.eval_norm);
  const OpenSetHead head = model.head();
  auto mean_of = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };

  std::vector<LabelPosterior> out;
  Streams streams(seed);
  auto finish = [&](const std::vector<double>& zetas) {
    const auto labels = per_label(episode, zetas, mean_of);
    out.push_back(episode.open_set() ? openmax_posterior(labels, head) : abm_posterior(labels, head.scale));
  };

  if (cfg.method == Method::baseline) {
    const auto test_emb = global_embeddings(test_out.final_activation.value());
    const auto ref_emb = global_embeddings(ref_out.final_activation.value());
    const std::size_t d = ref_out.final_activation.shape()[1];
    for (std::size_t q = 0; q < episode.queries.size(); ++q) {
      target_index(episode, episode.queries[q].label);
      std::vector<double> zetas;
      for (std::size_t s = 0; s < episode.support.size(); ++s) {
        zetas.push_back(-cosine(&test_emb[l.query_rows[q] * d], &ref_emb[l.support_rows[s] * d], d));
      }
      finish(zetas);
    }
    return out;
  }

  const auto test_fields = split_fields(test_out.hypercolumn.value());
  const auto ref_fields = model.shared() ? test_fields : split_fields(ref_out.hypercolumn.value());
  std::vector<PixelSample> support_samples;
  for (std::size_t s = 0; s < episode.support.size(); ++s) {
    support_samples.push_back(sample_pixels(ec.height, ec.width, cfg.reference_fraction, streams.reference));
  }
  for (std::size_t q = 0; q < episode.queries.size(); ++q) {
    target_index(episode, episode.queries[q].label);
    const PixelSample test_sample = sample_pixels(ec.height, ec.width, cfg.test_fraction, streams.test);
    std::vector<double> zetas;
    for (std::size_t s = 0; s < episode.support.size(); ++s) {
      const CostMatrix cost = cost_matrix(test_fields[l.query_rows[q]], ref_fields[l.support_rows[s]],
                                          test_sample, support_samples[s]);
      zetas.push_back(align(cost, cfg.aligner, cfg.aggregation).zeta);
    }
    finish(zetas);
  }
  return out;
}

}  // namespace abm
