#include "abm/run.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>

#include "json_util.hpp"

namespace abm {

namespace fs = std::filesystem;
using num::NormMode;

namespace {

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p.lexically_normal();
  return (base / p).lexically_normal();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write '" + path.string() + "'");
  out << text;
  if (!out) fail(ErrorCode::io, "failed writing '" + path.string() + "'");
}

}  // namespace

void DatasetSource::validate() const {
  if (format == DatasetFormat::synthetic) return;
  if (path.empty()) fail(ErrorCode::config, "'dataset.path' is required for " + to_string(format) + " data");
  if (!fs::exists(path)) fail(ErrorCode::config, "'dataset.path': '" + path.string() + "' does not exist");
}

nlohmann::json to_json(const DatasetSource& s) {
  nlohmann::json j{{"format", to_string(s.format)}};
  if (s.format == DatasetFormat::synthetic) {
    j["synthetic"] = to_json(s.synthetic);
  } else {
    j["path"] = s.path.generic_string();
  }
  return j;
}

DatasetSource dataset_source_from_json(const nlohmann::json& j, const std::string& path, const fs::path& base_dir) {
  detail::reject_unknown_keys(j, path, {"format", "path", "synthetic"});
  DatasetSource s;
  std::string format = "synthetic";
  detail::read_optional(j, "format", path, format);
  s.format = dataset_format_from_string(format);
  std::string p;
  detail::read_optional(j, "path", path, p);
  s.path = resolve(p, base_dir);
  if (j.contains("synthetic")) s.synthetic = synthetic_spec_from_json(j["synthetic"], detail::join_path(path, "synthetic"));
  s.validate();
  return s;
}

Dataset load_source(const DatasetSource& source) {
  source.validate();
  return load_dataset(source.path, source.format, source.synthetic);
}

void RunConfig::validate() const {
  dataset.validate();
  model.validate();
  training.validate();
  if (output_dir.empty()) fail(ErrorCode::config, "'output_dir' must not be empty");
  if (augment_rotations && model.encoder.height != model.encoder.width) {
    fail(ErrorCode::config, "'augment_rotations' needs square images");
  }
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json model = to_json(c.model);
  model.erase("encoder");
  const nlohmann::json train = to_json(c.training);
  return {{"dataset", to_json(c.dataset)},
          {"split", to_json(c.split)},
          {"augment_rotations", c.augment_rotations},
          {"encoder", to_json(c.model.encoder)},
          {"model", model},
          {"training", train["training"]},
          {"task", train["task"]},
          {"output_dir", c.output_dir.generic_string()}};
}

RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  detail::reject_unknown_keys(
      j, "", {"dataset", "split", "augment_rotations", "encoder", "model", "training", "task", "output_dir"});
  const nlohmann::json empty = nlohmann::json::object();
  auto section = [&](const char* key) -> const nlohmann::json& { return j.contains(key) ? j[key] : empty; };
  RunConfig c;
  c.dataset = dataset_source_from_json(section("dataset"), "dataset", base_dir);
  c.split = split_spec_from_json(section("split"), "split");
  detail::read_optional(j, "augment_rotations", "", c.augment_rotations);
  const EncoderConfig encoder = encoder_config_from_json(section("encoder"), "encoder");
  detail::reject_unknown_keys(section("model"), "model",
                              {"method", "aligner", "aggregation", "head", "sampling", "eval_norm"});
  c.model = model_config_from_json(section("model"), encoder, "model");
  c.training = train_config_from_json(section("training"), section("task"), "training", "task");
  std::string out = c.output_dir.string();
  detail::read_optional(j, "output_dir", "", out);
  c.output_dir = resolve(out, base_dir);
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::config, "cannot read config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::config, "config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, fs::absolute(path).parent_path());
}

RunConfig override_run_config(const RunConfig& c, const std::string& key_path, const nlohmann::json& value) {
  if (key_path.empty()) fail(ErrorCode::config, "empty override key");
  nlohmann::json j = to_json(c);
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key_path.find('.', start);
    const std::string key = key_path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) fail(ErrorCode::config, "malformed key path '" + key_path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    nlohmann::json& next = (*node)[key];
    if (next.is_null()) next = nlohmann::json::object();
    if (!next.is_object()) fail(ErrorCode::config, "'" + key_path.substr(0, dot) + "' is not an object");
    node = &next;
    start = dot + 1;
  }
  return run_config_from_json(j, fs::path());
}

Splits prepare_splits(const RunConfig& c) {
  const Dataset data = load_source(c.dataset);
  const EncoderConfig& e = c.model.encoder;
  if (data.height != e.height || data.width != e.width || data.channels != e.channels) {
    fail(ErrorCode::config, "encoder expects " + std::to_string(e.channels) + "x" + std::to_string(e.height) + "x" +
                                std::to_string(e.width) + " images but the dataset has " +
                                std::to_string(data.channels) + "x" + std::to_string(data.height) + "x" +
                                std::to_string(data.width));
  }
  Splits s = split_classes(data, c.split, c.training.seed);
  if (c.augment_rotations) s.train = augment_rotations(s.train);
  const std::size_t way = c.training.task.way;
  auto check = [&](const Dataset& d, const char* part) {
    if (d.classes.size() < way) {
      fail(ErrorCode::config, std::string("the ") + part + " split has " + std::to_string(d.classes.size()) +
                                  " classes, fewer than task.way = " + std::to_string(way));
    }
  };
  check(s.train, "train");
  check(s.validation, "validation");
  check(s.test, "test");
  return s;
}

std::size_t cap_threads(std::size_t requested) {
  requested = std::max<std::size_t>(1, requested);
  const char* env = std::getenv("ABM_THREADS");
  if (!env || !*env) return requested;
  char* end = nullptr;
  const unsigned long long cap = std::strtoull(env, &end, 10);
  if (*end != '\0' || cap == 0) fail(ErrorCode::config, "ABM_THREADS must be a positive integer, got '" + std::string(env) + "'");
  return std::min<std::size_t>(requested, cap);
}

nlohmann::json run_training(const RunConfig& c, const std::function<void(const std::string&)>& on_log_line) {
  c.validate();
  const Splits splits = prepare_splits(c);
  std::error_code ec;
  fs::create_directories(c.output_dir, ec);
  if (ec) fail(ErrorCode::io, "cannot create output directory '" + c.output_dir.string() + "': " + ec.message());
  const fs::path config_path = c.output_dir / kEffectiveConfigFile;
  const fs::path log_path = c.output_dir / kTrainLogFile;
  const fs::path checkpoint_path = c.output_dir / kCheckpointFile;
  const fs::path metrics_path = c.output_dir / kTestMetricsFile;
  write_text(config_path, to_json(c).dump(2) + "\n");

  TrainConfig t = c.training;
  t.threads = cap_threads(t.threads);
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) fail(ErrorCode::io, "cannot write '" + log_path.string() + "'");
  const bool self_term = c.model.self_weight() > 0.0;
  const TrainResult result = train(c.model, t, splits.train, splits.validation, [&](const EpochLog& e) {
    const std::string line = to_json(e, self_term).dump();
    log << line << '\n';
    log.flush();
    if (on_log_line) on_log_line(line);
  });
  save_checkpoint(result.best, checkpoint_path);

  const Model<float> model = restore_model(result.best);
  const Metrics test = evaluate(model, splits.test, t.task, t.test_episodes, derive_seed(t.seed, 0x7465u), t.threads);
  write_text(metrics_path, to_json(test).dump(2) + "\n");
  return {{"checkpoint", checkpoint_path.generic_string()},
          {"log", log_path.generic_string()},
          {"config", config_path.generic_string()},
          {"test_metrics", metrics_path.generic_string()},
          {"epochs_run", result.log.size()},
          {"best_epoch", result.best_epoch},
          {"validation", to_json(result.best_validation)},
          {"test", to_json(test)},
          {"classes", {{"train", splits.train.classes.size()},
                       {"validation", splits.validation.classes.size()},
                       {"test", splits.test.classes.size()}}}};
}

nlohmann::json dataset_info(const Dataset& d) {
  d.validate();
  std::size_t lo = d.classes.front().images.size(), hi = lo;
  nlohmann::json names = nlohmann::json::array();
  for (const auto& c : d.classes) {
    lo = std::min(lo, c.images.size());
    hi = std::max(hi, c.images.size());
    names.push_back({{"id", c.id}, {"name", c.name}, {"images", c.images.size()}});
  }
  return {{"classes", d.classes.size()},
          {"images", d.image_count()},
          {"height", d.height},
          {"width", d.width},
          {"channels", d.channels},
          {"images_per_class", {{"min", lo}, {"max", hi}}},
          {"class_list", names}};
}

Dataset select_classes(const Dataset& d, std::span<const std::size_t> ids) {
  if (ids.empty()) fail(ErrorCode::invalid_argument, "no classes selected");
  Dataset out;
  out.height = d.height;
  out.width = d.width;
  out.channels = d.channels;
  std::set<std::size_t> seen;
  for (std::size_t id : ids) {
    if (id >= d.classes.size()) {
      fail(ErrorCode::invalid_argument, "class id " + std::to_string(id) + " is out of range (dataset has " +
                                            std::to_string(d.classes.size()) + " classes)");
    }
    if (!seen.insert(id).second) fail(ErrorCode::invalid_argument, "class id " + std::to_string(id) + " is listed twice");
    out.classes.push_back(d.classes[id]);
  }
  out.renumber();
  return out;
}

namespace {

HypercolumnField encode_image(const Encoder<float>& encoder, const Image& image, NormMode mode,
                              std::span<const std::size_t> active) {
  const std::span<const float> one[] = {image.pixels};
  const auto batch = image_batch<float>(one, image.channels, image.height, image.width);
  return split_fields<float>(encoder.infer(batch, mode, active).hypercolumn.value()).front();
}

void write_pgm(const fs::path& path, std::size_t height, std::size_t width, std::span<const double> values) {
  const double peak = *std::max_element(values.begin(), values.end());
  std::string bytes = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (double v : values) {
    const double scaled = peak > 0 ? std::round(255.0 * v / peak) : 0.0;
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(scaled, 0.0, 255.0))));
  }
  write_text(path, bytes);
}

}  // namespace

nlohmann::json export_alignment(const Model<float>& model, const Image& test, const Image& reference,
                                std::size_t points, const fs::path& prefix, std::uint64_t seed,
                                std::span<const std::size_t> layer_mask) {
  const ModelConfig& cfg = model.config();
  const EncoderConfig& e = cfg.encoder;
  for (const Image* img : {&test, &reference}) {
    if (img->height != e.height || img->width != e.width || img->channels != e.channels) {
      fail(ErrorCode::shape, "image is " + std::to_string(img->channels) + "x" + std::to_string(img->height) + "x" +
                                 std::to_string(img->width) + " but the encoder expects " +
                                 std::to_string(e.channels) + "x" + std::to_string(e.height) + "x" +
                                 std::to_string(e.width));
    }
  }
  const std::size_t pixels = e.height * e.width;
  if (points == 0 || points > pixels) {
    fail(ErrorCode::invalid_argument, "points must be in [1, " + std::to_string(pixels) + "]");
  }
  std::vector<std::size_t> active;
  for (std::size_t layer : layer_mask) {
    if (layer == 0 || layer > e.block_channels.size()) {
      fail(ErrorCode::invalid_argument, "layer " + std::to_string(layer) + " is outside 1.." +
                                            std::to_string(e.block_channels.size()));
    }
    active.push_back(layer - 1);
  }
  std::sort(active.begin(), active.end());
  active.erase(std::unique(active.begin(), active.end()), active.end());
  if (active.empty()) active = e.active_blocks();

  const HypercolumnField ft = encode_image(model.test_encoder(), test, cfg.eval_norm, active);
  const HypercolumnField fr = encode_image(model.reference_encoder(), reference, cfg.eval_norm, active);

  PixelSample test_sample{e.height, e.width, {}, static_cast<double>(points) / static_cast<double>(pixels)};
  std::vector<std::size_t> all(pixels);
  std::iota(all.begin(), all.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 1u));
  std::sample(all.begin(), all.end(), std::back_inserter(test_sample.indices), points, rng);
  const PixelSample reference_sample{e.height, e.width, all, 1.0};

  const CostMatrix cost = cost_matrix(ft, fr, test_sample, reference_sample);
  const AlignmentResult aligned = align(cost, cfg.aligner, cfg.aggregation);

  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  const std::string stem = prefix.filename().string();
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t b : active) layers.push_back(b + 1);
  nlohmann::json out{{"height", e.height},
                     {"width", e.width},
                     {"layers", layers},
                     {"aligner", to_string(cfg.aligner)},
                     {"aggregation", cfg.aggregation == Aggregation::mean ? "mean" : "sum"},
                     {"zeta", aligned.zeta},
                     {"seed", seed},
                     {"points", nlohmann::json::array()}};
  for (std::size_t r = 0; r < cost.rows; ++r) {
    const std::vector<double> probs = match_probabilities(cost.row(r));
    const std::size_t best =
        static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    const std::string heatmap = stem + "_point" + std::to_string(r) + ".pgm";
    write_pgm(prefix.parent_path() / heatmap, e.height, e.width, probs);
    const std::size_t p = cost.row_pixels[r];
    out["points"].push_back({{"pixel", {{"index", p}, {"row", p / e.width}, {"col", p % e.width}}},
                             {"argmax", {{"index", best}, {"row", best / e.width}, {"col", best % e.width}}},
                             {"aligned_to", cost.col_pixels[aligned.columns[r]]},
                             {"heatmap", heatmap},
                             {"probabilities", probs}});
  }
  fs::path sidecar = prefix;
  sidecar += ".json";
  write_text(sidecar, out.dump(1) + "\n");
  return {{"sidecar", sidecar.generic_string()}, {"points", cost.rows}, {"zeta", aligned.zeta}};
}

}  // namespace abm
