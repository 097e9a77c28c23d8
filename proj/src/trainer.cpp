#include "abm/trainer.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <set>
#include <thread>

#include "json_util.hpp"

namespace abm {

using num::NormMode;
using num::Tensor;

void TrainConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) fail(ErrorCode::config, std::string(name) + " must be >= 1");
  };
  positive(episodes_per_epoch, "training.episodes_per_epoch");
  positive(epochs, "training.epochs");
  positive(batch_size, "training.batch_size");
  positive(validation_episodes, "training.validation_episodes");
  positive(test_episodes, "training.test_episodes");
  positive(threads, "training.threads");
  positive(task.way, "task.way");
  positive(task.shot, "task.shot");
  positive(task.queries, "task.queries");
  if (task.open_set && task.way < 2) fail(ErrorCode::config, "open-set tasks need task.way >= 2");
  if (patience && *patience == 0) fail(ErrorCode::config, "training.patience must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail(ErrorCode::config, "training.learning_rate must be positive");
  if (!(weight_decay >= 0.0) || !(lr_decay >= 0.0)) fail(ErrorCode::config, "training decay coefficients must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json training{{"episodes_per_epoch", c.episodes_per_epoch},
                          {"epochs", c.epochs},
                          {"batch_size", c.batch_size},
                          {"learning_rate", c.learning_rate},
                          {"weight_decay", c.weight_decay},
                          {"lr_decay", c.lr_decay},
                          {"seed", c.seed},
                          {"validation_episodes", c.validation_episodes},
                          {"test_episodes", c.test_episodes},
                          {"threads", c.threads}};
  if (c.patience) training["patience"] = *c.patience;
  nlohmann::json task{{"way", c.task.way}, {"shot", c.task.shot}, {"queries", c.task.queries},
                      {"open_set", c.task.open_set}};
  return {{"training", training}, {"task", task}};
}

TrainConfig train_config_from_json(const nlohmann::json& training, const nlohmann::json& task,
                                   const std::string& training_path, const std::string& task_path) {
  TrainConfig c;
  detail::reject_unknown_keys(task, task_path, {"way", "shot", "queries", "open_set"});
  detail::read_optional(task, "way", task_path, c.task.way);
  detail::read_optional(task, "shot", task_path, c.task.shot);
  detail::read_optional(task, "queries", task_path, c.task.queries);
  detail::read_optional(task, "open_set", task_path, c.task.open_set);

  detail::reject_unknown_keys(training, training_path,
                              {"episodes_per_epoch", "epochs", "batch_size", "learning_rate", "weight_decay",
                               "lr_decay", "seed", "validation_episodes", "test_episodes", "patience", "threads"});
  if (c.task.way >= 20) c.batch_size = 4;
  detail::read_optional(training, "episodes_per_epoch", training_path, c.episodes_per_epoch);
  detail::read_optional(training, "epochs", training_path, c.epochs);
  detail::read_optional(training, "batch_size", training_path, c.batch_size);
  detail::read_optional(training, "learning_rate", training_path, c.learning_rate);
  detail::read_optional(training, "weight_decay", training_path, c.weight_decay);
  detail::read_optional(training, "lr_decay", training_path, c.lr_decay);
  detail::read_optional(training, "seed", training_path, c.seed);
  detail::read_optional(training, "validation_episodes", training_path, c.validation_episodes);
  detail::read_optional(training, "test_episodes", training_path, c.test_episodes);
  detail::read_optional(training, "threads", training_path, c.threads);
  if (training.contains("patience") && !training["patience"].is_null()) {
    std::size_t p = 0;
    detail::read_optional(training, "patience", training_path, p);
    c.patience = p;
  }
  c.validate();
  return c;
}

OpenSetScores f1_open_set(std::span<const std::size_t> predictions, std::span<const std::size_t> truths) {
  if (predictions.size() != truths.size()) {
    fail(ErrorCode::invalid_argument, "f1_open_set needs equal-length predictions and truths");
  }
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool p = predictions[i] == 0, t = truths[i] == 0;
    tp += p && t;
    fp += p && !t;
    fn += !p && t;
  }
  OpenSetScores s;
  s.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  s.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

nlohmann::json to_json(const Metrics& m) {
  nlohmann::json j{{"accuracy", m.accuracy},         {"accuracy_variance", m.accuracy_variance},
                   {"ci95", m.ci95},                 {"episodes", m.episodes},
                   {"queries", m.queries},           {"open_set", m.open_set}};
  if (m.open_set) {
    j["precision"] = m.precision;
    j["recall"] = m.recall;
    j["f1"] = m.f1;
  }
  return j;
}

std::vector<LabelPosterior> ModelPredictor::predict(const Episode& episode, std::uint64_t seed) const {
  return abm::predict(model_, episode, seed);
}

Metrics evaluate(const Predictor& predictor, const Dataset& dataset, const EpisodeSpec& task,
                 std::size_t episodes, std::uint64_t seed, std::size_t threads) {
  if (episodes == 0) fail(ErrorCode::invalid_argument, "evaluation needs at least one episode");
  if (task.way > dataset.classes.size()) {
    fail(ErrorCode::invalid_argument, "way " + std::to_string(task.way) + " exceeds the dataset's " +
                                          std::to_string(dataset.classes.size()) + " classes");
  }
  struct Outcome {
    std::vector<std::size_t> predicted, truth;
  };
  std::vector<Outcome> outcomes(episodes);
  threads = std::max<std::size_t>(1, std::min(threads, episodes));
  std::vector<std::exception_ptr> errors(threads);
  auto work = [&](std::size_t t) {
    try {
      for (std::size_t i = t; i < episodes; i += threads) {
        const Episode e = sample_episode(dataset, task, derive_seed(seed, i));
        const auto posts = predictor.predict(e, derive_seed(seed, i, 1u));
        if (posts.size() != e.queries.size()) fail(ErrorCode::runtime, "predictor returned the wrong number of posteriors");
        for (std::size_t q = 0; q < posts.size(); ++q) {
          outcomes[i].predicted.push_back(posts[q].predicted);
          outcomes[i].truth.push_back(e.queries[q].label);
        }
      }
    } catch (...) {
      errors[t] = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  Metrics m;
  m.episodes = episodes;
  m.open_set = task.open_set;
  std::vector<std::size_t> predicted, truth;
  double correct = 0, sum = 0, sum_sq = 0;
  for (const auto& o : outcomes) {
    double c = 0;
    for (std::size_t q = 0; q < o.truth.size(); ++q) c += o.predicted[q] == o.truth[q];
    correct += c;
    const double acc = c / static_cast<double>(o.truth.size());
    sum += acc;
    sum_sq += acc * acc;
    predicted.insert(predicted.end(), o.predicted.begin(), o.predicted.end());
    truth.insert(truth.end(), o.truth.begin(), o.truth.end());
  }
  const double n = static_cast<double>(episodes);
  m.queries = truth.size();
  m.accuracy = correct / static_cast<double>(m.queries);
  const double mean = sum / n;
  m.accuracy_variance = episodes > 1 ? std::max(0.0, (sum_sq - n * mean * mean) / (n - 1)) : 0.0;
  m.ci95 = 1.96 * std::sqrt(m.accuracy_variance / n);
  if (task.open_set) {
    const OpenSetScores s = f1_open_set(predicted, truth);
    m.precision = s.precision;
    m.recall = s.recall;
    m.f1 = s.f1;
  }
  return m;
}

Metrics evaluate(const Model<float>& model, const Dataset& dataset, const EpisodeSpec& task,
                 std::size_t episodes, std::uint64_t seed, std::size_t threads) {
  return evaluate(ModelPredictor(model), dataset, task, episodes, seed, threads);
}

// Checkpoints

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

Checkpoint make_checkpoint(Model<float>& model, const num::AdamState<float>* optimizer, nlohmann::json metadata) {
  Checkpoint c;
  c.model = model.config();
  c.metadata = std::move(metadata);
  for (const auto& p : model.parameters()) c.tensors.emplace_back(p.name, p.var.value());
  for (auto& [prefix, stats] : model.norm_stats()) {
    if (!stats->populated) continue;
    const num::Shape shape{stats->running_mean.size()};
    c.tensors.emplace_back(prefix + ".running_mean", Tensor<float>(shape, stats->running_mean));
    c.tensors.emplace_back(prefix + ".running_var", Tensor<float>(shape, stats->running_var));
  }
  if (optimizer && optimizer->step > 0) {
    for (std::size_t i = 0; i < optimizer->names.size(); ++i) {
      c.tensors.emplace_back("adam.m/" + optimizer->names[i], optimizer->first_moment[i]);
      c.tensors.emplace_back("adam.v/" + optimizer->names[i], optimizer->second_moment[i]);
    }
    c.metadata["optimizer"] = {{"step", optimizer->step},
                               {"learning_rate", optimizer->config.learning_rate},
                               {"weight_decay", optimizer->config.weight_decay},
                               {"lr_decay", optimizer->config.lr_decay}};
  }
  return c;
}

Model<float> restore_model(const Checkpoint& c) {
  Model<float> model = Model<float>::build(c.model, 0);
  for (auto& p : model.parameters()) {
    const Tensor<float>* t = c.find(p.name);
    if (!t) fail(ErrorCode::format, "checkpoint lacks tensor '" + p.name + "'");
    if (t->shape() != p.var.shape()) {
      fail(ErrorCode::format, "checkpoint tensor '" + p.name + "' has shape " + num::shape_string(t->shape()) +
                                  ", model expects " + num::shape_string(p.var.shape()));
    }
    num::Var<float> alias = p.var;
    alias.mutable_value() = *t;
  }
  for (auto& [prefix, stats] : model.norm_stats()) {
    const Tensor<float>* mean = c.find(prefix + ".running_mean");
    const Tensor<float>* var = c.find(prefix + ".running_var");
    if (!mean || !var) continue;
    stats->running_mean.assign(mean->data().begin(), mean->data().end());
    stats->running_var.assign(var->data().begin(), var->data().end());
    stats->populated = true;
  }
  return model;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  nlohmann::json model = to_json(c.model);
  model.erase("encoder");
  nlohmann::json manifest{{"format", kCheckpointMagic},
                          {"version", c.version},
                          {"encoder", to_json(c.model.encoder)},
                          {"model", model},
                          {"metadata", c.metadata},
                          {"tensors", nlohmann::json::array()}};
  std::string blobs;
  for (const auto& [name, t] : c.tensors) {
    const std::size_t offset = blobs.size();
    for (float v : t.data()) put_u32(blobs, std::bit_cast<std::uint32_t>(v));
    manifest["tensors"].push_back({{"name", name},
                                   {"shape", t.shape()},
                                   {"dtype", "float32"},
                                   {"offset", offset},
                                   {"length", blobs.size() - offset}});
  }
  const std::string text = manifest.dump();
  std::string header(kCheckpointMagic, 8);
  put_u32(header, static_cast<std::uint32_t>(text.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write checkpoint '" + path.string() + "'");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(blobs.data(), static_cast<std::streamsize>(blobs.size()));
  if (!out) fail(ErrorCode::io, "failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint '" + path.string() + "'";
  if (bytes.size() < 12 || bytes.compare(0, 8, kCheckpointMagic) != 0) {
    fail(ErrorCode::format, where + " has a foreign or corrupt magic header");
  }
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t manifest_size = get_u32(raw + 8);
  if (bytes.size() < 12 + manifest_size) fail(ErrorCode::format, where + " is truncated inside its manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(12, manifest_size));
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::format, where + " has a malformed manifest");
  }
  if (!manifest.is_object() || !manifest.contains("version") || !manifest["version"].is_number_integer()) {
    fail(ErrorCode::format, where + " manifest lacks a version");
  }
  Checkpoint c;
  c.version = manifest["version"].get<int>();
  if (c.version != kCheckpointVersion) {
    fail(ErrorCode::format, where + " has unsupported version " + std::to_string(c.version) + " (expected " +
                                std::to_string(kCheckpointVersion) + ")");
  }
  try {
    const EncoderConfig enc = encoder_config_from_json(manifest.at("encoder"), "checkpoint.encoder");
    c.model = model_config_from_json(manifest.at("model"), enc, "checkpoint.model");
    c.metadata = manifest.value("metadata", nlohmann::json::object());
    const std::size_t blob_start = 12 + manifest_size;
    const std::size_t blob_size = bytes.size() - blob_start;
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<num::Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto length = entry.at("length").get<std::size_t>();
      if (entry.at("dtype").get<std::string>() != "float32") fail(ErrorCode::format, where + ": tensor '" + name + "' is not float32");
      if (offset > blob_size || length > blob_size - offset) fail(ErrorCode::format, where + " is truncated in tensor '" + name + "'");
      if (length != num::shape_size(shape) * 4) fail(ErrorCode::format, where + ": tensor '" + name + "' length disagrees with its shape");
      std::vector<float> values(length / 4);
      for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = std::bit_cast<float>(get_u32(raw + blob_start + offset + 4 * i));
      }
      c.tensors.emplace_back(name, Tensor<float>(shape, std::move(values)));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, where + " manifest is incomplete: " + e.what());
  }
  return c;
}

// Training

nlohmann::json to_json(const EpochLog& e, bool with_self_term) {
  nlohmann::json j{{"epoch", e.epoch},
                   {"train_loss", e.train_loss},
                   {"val_accuracy", e.val_accuracy},
                   {"val_f1", e.val_f1},
                   {"wall_time", e.wall_time}};
  if (with_self_term) j["self_loss"] = e.self_loss;
  return j;
}

TrainResult train(const ModelConfig& model_config, const TrainConfig& config, const Dataset& train_set,
                  const Dataset& validation_set, const EpochCallback& on_epoch) {
  config.validate();
  model_config.validate();
  train_set.validate();
  validation_set.validate();
  std::set<std::string> train_names;
  for (const auto& c : train_set.classes) train_names.insert(c.name);
  for (const auto& c : validation_set.classes) {
    if (train_names.count(c.name)) fail(ErrorCode::config, "class '" + c.name + "' is in both the training and validation sets");
  }
  if (train_set.classes.size() < config.task.way || validation_set.classes.size() < config.task.way) {
    fail(ErrorCode::config, "training and validation sets need at least task.way classes");
  }

  const auto start = std::chrono::steady_clock::now();
  Model<float> model = Model<float>::build(model_config, derive_seed(config.seed, 0x1417u));
  const auto params = model.parameters();
  num::AdamState<float> adam;
  adam.config.learning_rate = config.learning_rate;
  adam.config.weight_decay = config.weight_decay;
  adam.config.lr_decay = config.lr_decay;
  const std::uint64_t validation_seed = derive_seed(config.seed, 0x7661u);

  TrainResult result;
  bool have_best = false;
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0, self_sum = 0.0;
    std::size_t done = 0;
    bool has_self = false;
    for (std::size_t batch = 0; done < config.episodes_per_epoch; ++batch) {
      const std::size_t n = std::min(config.batch_size, config.episodes_per_epoch - done);
      const std::uint64_t batch_seed = derive_seed(config.seed, epoch, batch);
      for (const auto& p : params) {
        num::Var<float> v = p.var;
        v.zero_grad();
      }
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t episode_seed = derive_seed(batch_seed, i);
        const Episode e = sample_episode(train_set, config.task, episode_seed);
        const auto out = episode_loss(model, e, NormMode::train, derive_seed(episode_seed, 1u));
        const double value = out.loss.item();
        if (!std::isfinite(value)) {
          fail(ErrorCode::numeric, "training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                                       ", batch " + std::to_string(batch) + " (batch seed " +
                                       std::to_string(batch_seed) + ")");
        }
        num::scale(out.loss, 1.0 / static_cast<double>(n)).backward();
        loss_sum += value;
        self_sum += out.self_regularization;
        has_self = has_self || out.has_self_term;
      }
      try {
        num::adam_step<float>(params, adam);
      } catch (const Error& err) {
        fail(ErrorCode::numeric, std::string(err.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(batch) + " (batch seed " + std::to_string(batch_seed) + ")");
      }
      done += n;
    }

    const Metrics val = evaluate(model, validation_set, config.task, config.validation_episodes,
                                 validation_seed, config.threads);
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(done);
    log.self_loss = has_self ? self_sum / static_cast<double>(done) : 0.0;
    log.val_accuracy = val.accuracy;
    log.val_f1 = val.f1;
    log.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);

    if (!have_best || val.accuracy > result.best_validation.accuracy) {
      have_best = true;
      since_best = 0;
      result.best_epoch = epoch;
      result.best_validation = val;
      result.best = make_checkpoint(model, &adam,
                                    {{"epoch", epoch}, {"seed", config.seed}, {"val_accuracy", val.accuracy}, {"val_f1", val.f1}});
    } else if (config.patience && ++since_best >= *config.patience) {
      break;
    }
  }
  nlohmann::json history = nlohmann::json::array();
  const bool self_term = model_config.self_weight() > 0.0 && model_config.method != Method::baseline;
  for (const auto& l : result.log) {
    nlohmann::json h = to_json(l, self_term);
    h.erase("wall_time");
    history.push_back(h);
  }
  result.best.metadata["history"] = history;
  return result;
}

}  // namespace abm
