#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "abm/alignment.hpp"
#include "abm/encoder.hpp"
#include "abm/episodes.hpp"

namespace abm {

enum class Method { abm, abm_selfreg, baseline };

std::string to_string(Method m);
// Accepts "abm", "abm+selfreg" (or "abm_selfreg") and "baseline".
Method method_from_string(const std::string& s);

struct HeadConfig {
  double lambda = 1.0;  // self-regularization weight
  double tau_init = 0.0;
  double scale_init = 10.0;
};

struct OpenSetHead {
  double tau = 0.0;
  double scale = 10.0;
};

// Probabilities over labels. With an open slot, index i is label i (0 is the
// open set); without one, index i is label i + 1.
struct LabelPosterior {
  std::vector<double> probabilities;
  bool open_slot = false;
  std::size_t predicted = 0;

  std::size_t label_at(std::size_t index) const { return open_slot ? index : index + 1; }
  double probability_of(std::size_t label) const;
};

// Posterior from logits laid out as LabelPosterior::probabilities.
LabelPosterior posterior_from_logits(std::span<const double> logits, bool open_slot);

// softmax(-scale * zeta)
LabelPosterior abm_posterior(std::span<const double> zetas, double scale);
// 0 when every zeta exceeds tau, otherwise the 1-based argmin (ties to the
// lowest label).
std::size_t openmax_label(std::span<const double> zetas, double tau);

// softmax(-scale * (tau, zeta_1, ..., zeta_n)); slot 0 is the open set and
// the prediction follows openmax_label.
LabelPosterior openmax_posterior(std::span<const double> zetas, const OpenSetHead& head);

// Mean over sampled pixels of -log P(match = own pixel), with match
// probabilities softmax(-cost) over the reference sample.
double self_regularization_loss(const CostMatrix& self_cost);
double self_regularization_loss(const HypercolumnField& field, const PixelSample& sample,
                                const PixelSample& reference_sample);

// Cosine-similarity softmax over global (spatially averaged final block)
// embeddings.
LabelPosterior baseline_posterior(std::span<const float> query,
                                  std::span<const std::span<const float>> supports,
                                  const Encoder<float>& encoder, double scale,
                                  num::NormMode mode = num::NormMode::eval);

struct ModelConfig {
  EncoderConfig encoder;
  Method method = Method::abm_selfreg;
  Aligner aligner = Aligner::greedy;
  Aggregation aggregation = Aggregation::mean;
  HeadConfig head;
  double test_fraction = 0.10;
  double reference_fraction = 0.20;
  // Normalization at prediction time: eval (running statistics) or batch
  // (statistics of the episode's images).
  num::NormMode eval_norm = num::NormMode::eval;

  double self_weight() const { return method == Method::abm_selfreg ? head.lambda : 0.0; }
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
// Reads the "method", "aligner", "aggregation", "head", "sampling" and
// "eval_norm" keys of `j`; the encoder is passed separately.
ModelConfig model_config_from_json(const nlohmann::json& j, const EncoderConfig& encoder,
                                   const std::string& path);

// Encoders plus the learnable threshold and log logit scale.
template <typename Real>
class Model {
 public:
  static Model build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  bool shared() const { return test_encoder_ == reference_encoder_; }
  Encoder<Real>& test_encoder() { return *test_encoder_; }
  Encoder<Real>& reference_encoder() { return *reference_encoder_; }
  const Encoder<Real>& test_encoder() const { return *test_encoder_; }
  const Encoder<Real>& reference_encoder() const { return *reference_encoder_; }
  num::Var<Real>& tau() { return tau_; }
  num::Var<Real>& log_scale() { return log_scale_; }
  OpenSetHead head() const;

  // Learnable tensors: "encoder.*" (or "encoder_test.*" and "encoder_ref.*"),
  // "head.tau" and "head.log_scale".
  std::vector<num::NamedParameter<Real>> parameters() const;
  // Pointers to every batch-norm statistics record with its name prefix.
  std::vector<std::pair<std::string, num::BatchNormStats<Real>*>> norm_stats();

 private:
  ModelConfig config_;
  std::shared_ptr<Encoder<Real>> test_encoder_;
  std::shared_ptr<Encoder<Real>> reference_encoder_;
  num::Var<Real> tau_;
  num::Var<Real> log_scale_;
};

extern template class Model<float>;
extern template class Model<double>;

template <typename Real>
struct EpisodeLoss {
  num::Var<Real> loss;             // classification + lambda * self
  double classification = 0.0;    // mean query cross-entropy
  double self_regularization = 0.0;
  bool has_self_term = false;
  std::vector<LabelPosterior> posteriors;  // one per query
};

// Differentiable loss of one episode. Pixel samples derive from `seed`.
template <typename Real>
EpisodeLoss<Real> episode_loss(Model<Real>& model, const Episode& episode, num::NormMode mode,
                               std::uint64_t seed);

// Posteriors for every query without building a training graph step; uses
// the configured eval normalization. Safe to call concurrently.
std::vector<LabelPosterior> predict(const Model<float>& model, const Episode& episode,
                                    std::uint64_t seed);

}  // namespace abm
