#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "abm/abm.h"
#include "json.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct Failure {
  abm_status status;
};

int exit_code(abm_status s) {
  switch (s) {
    case ABM_OK: return kExitOk;
    case ABM_ERR_INVALID_ARGUMENT:
    case ABM_ERR_SHAPE:
    case ABM_ERR_CONFIG: return kExitUsage;
    default: return kExitRuntime;
  }
}

void check(abm_status s) {
  if (s != ABM_OK) throw Failure{s};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  abm_string_free(s);
  return out;
}

template <typename T, void (*Free)(T*)>
struct Handle {
  T* ptr = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Free(ptr); }
};

using Config = Handle<abm_config, abm_config_free>;
using Dataset = Handle<abm_dataset, abm_dataset_free>;
using Model = Handle<abm_model, abm_model_free>;

// Values that are not valid JSON are taken as strings.
std::string as_json_value(const std::string& text) {
  const auto parsed = nlohmann::json::parse(text, nullptr, false);
  return parsed.is_discarded() ? nlohmann::json(text).dump() : parsed.dump();
}

struct DatasetFlags {
  std::string config;
  std::string part = "test";
  std::string path;
  std::string format;
  std::uint64_t synthetic_seed = 0;
  std::size_t synthetic_classes = 10;
  std::size_t synthetic_images = 20;
  std::size_t synthetic_size = 28;
  std::vector<std::size_t> classes;

  void add(CLI::App* app) {
    app->add_option("--config", config, "Run config supplying the dataset and class split");
    app->add_option("--part", part, "Split part with --config: all, train, validation or test")
        ->capture_default_str();
    app->add_option("--dataset", path, "Dataset path (overrides the config's dataset)");
    app->add_option("--format", format, "Dataset format: idx, image-dirs or synthetic");
    app->add_option("--synthetic-seed", synthetic_seed, "Synthetic generator seed")->capture_default_str();
    app->add_option("--synthetic-classes", synthetic_classes, "Synthetic class count")->capture_default_str();
    app->add_option("--synthetic-images", synthetic_images, "Synthetic images per class")->capture_default_str();
    app->add_option("--synthetic-size", synthetic_size, "Synthetic image side length")->capture_default_str();
    app->add_option("--classes", classes, "Keep only these class ids (after --part selection)")->delimiter(',');
  }

  bool explicit_source() const { return !path.empty() || !format.empty(); }

  void open(Dataset& out) const {
    Dataset base;
    if (explicit_source()) {
      nlohmann::json source{{"format", format.empty() ? "idx" : format}};
      if (!path.empty()) source["path"] = std::filesystem::absolute(path).string();
      if (format == "synthetic") {
        source["synthetic"] = {{"seed", synthetic_seed},
                               {"classes", synthetic_classes},
                               {"images_per_class", synthetic_images},
                               {"size", synthetic_size}};
      }
      check(abm_dataset_open(source.dump().c_str(), nullptr, &base.ptr));
    } else if (!config.empty()) {
      Config c;
      check(abm_config_load(config.c_str(), &c.ptr));
      check(abm_dataset_from_config(c.ptr, part.c_str(), &base.ptr));
    } else {
      std::cerr << "error: give --config or --dataset/--format\n";
      throw Failure{ABM_ERR_INVALID_ARGUMENT};
    }
    if (classes.empty()) {
      std::swap(out.ptr, base.ptr);
    } else {
      check(abm_dataset_select(base.ptr, classes.data(), classes.size(), &out.ptr));
    }
  }
};

std::size_t threads_or_env(std::optional<std::size_t> requested) {
  std::size_t t = 0;
  check(abm_thread_cap(requested.value_or(SIZE_MAX), &t));
  return t;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::optional<std::size_t>& epochs, const std::optional<std::size_t>& episodes,
              const std::optional<std::uint64_t>& seed, const std::optional<std::string>& output,
              const std::optional<std::size_t>& threads, bool quiet) {
  Config c;
  check(abm_config_load(config_path.c_str(), &c.ptr));
  auto set = [&](const std::string& key, const std::string& json) {
    check(abm_config_set(c.ptr, key.c_str(), json.c_str()));
  };
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      std::cerr << "error: --set expects key.path=value, got '" << s << "'\n";
      return kExitUsage;
    }
    set(s.substr(0, eq), as_json_value(s.substr(eq + 1)));
  }
  if (epochs) set("training.epochs", std::to_string(*epochs));
  if (episodes) set("training.episodes_per_epoch", std::to_string(*episodes));
  if (seed) set("training.seed", std::to_string(*seed));
  if (threads) set("training.threads", std::to_string(*threads));
  if (output) set("output_dir", nlohmann::json(std::filesystem::absolute(*output).string()).dump());

  char* summary = nullptr;
  abm_log_fn log = [](const char* line, void*) {
    std::cerr << line << '\n';
  };
  check(abm_train(c.ptr, quiet ? nullptr : log, nullptr, &summary));
  std::cout << take(summary) << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Alignment-based matching networks: one-shot and open-set classification by pixel alignment.\n"
      "Option precedence: command-line flags, then --set overrides, then the config file, then defaults.\n"
      "ABM_THREADS caps worker threads. Exit codes: 0 success, 2 usage or config error, 3 runtime failure.",
      "abm"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(abm_version()));

  auto* train = app.add_subcommand("train", "Train from a JSON run config");
  std::string train_config;
  std::vector<std::string> sets;
  std::optional<std::size_t> epochs, episodes, train_threads;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::string> output;
  bool quiet = false;
  train->add_option("config", train_config, "Run config (JSON)")->required();
  train->add_option("--set", sets, "Override a config key, e.g. --set training.epochs=3");
  train->add_option("--epochs", epochs, "Override training.epochs");
  train->add_option("--episodes-per-epoch", episodes, "Override training.episodes_per_epoch");
  train->add_option("--seed", train_seed, "Override training.seed");
  train->add_option("--output", output, "Override output_dir");
  train->add_option("--threads", train_threads, "Override training.threads");
  train->add_flag("--quiet", quiet, "Do not echo log lines to stderr");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on sampled episodes; prints metrics JSON");
  std::string eval_checkpoint;
  DatasetFlags eval_data;
  abm_task task{5, 1, 1, 0};
  bool open_set = false;
  std::size_t eval_episodes = 1000;
  std::uint64_t eval_seed = 0;
  std::optional<std::size_t> eval_threads;
  eval->add_option("checkpoint", eval_checkpoint, "Checkpoint file")->required();
  eval_data.add(eval);
  eval->add_option("--way", task.way, "Classes per episode")->capture_default_str();
  eval->add_option("--shot", task.shot, "Support images per class")->capture_default_str();
  eval->add_option("--queries", task.queries, "Queries per episode")->capture_default_str();
  eval->add_flag("--open-set", open_set, "Open-set episodes (label 0 is the open set)");
  eval->add_option("--episodes", eval_episodes, "Episode count")->capture_default_str();
  eval->add_option("--seed", eval_seed, "Episode seed")->capture_default_str();
  eval->add_option("--threads", eval_threads, "Worker threads (default: ABM_THREADS or 1)");

  auto* align = app.add_subcommand("align", "Export match-probability heatmaps (PGM) and a JSON sidecar");
  std::string align_checkpoint, test_image, ref_image, prefix;
  std::size_t points = 3;
  std::uint64_t align_seed = 0;
  std::vector<std::size_t> layers;
  align->add_option("checkpoint", align_checkpoint, "Checkpoint file")->required();
  align->add_option("--test", test_image, "Test image (PNG, PGM or PPM)")->required();
  align->add_option("--ref", ref_image, "Reference image")->required();
  align->add_option("--points", points, "Uniformly sampled test pixels")->capture_default_str();
  align->add_option("--out", prefix, "Output prefix")->required();
  align->add_option("--seed", align_seed, "Pixel sampling seed")->capture_default_str();
  align->add_option("--layer-mask", layers, "1-based blocks stacked into the hypercolumn, e.g. 4,5,6")
      ->delimiter(',');

  auto* info = app.add_subcommand("dataset-info", "Print dataset statistics as JSON");
  DatasetFlags info_data;
  info_data.part = "all";
  info_data.add(info);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) {
      return cmd_train(train_config, sets, epochs, episodes, train_seed, output, train_threads, quiet);
    }
    if (*eval) {
      Model model;
      check(abm_model_load(eval_checkpoint.c_str(), &model.ptr));
      Dataset data;
      eval_data.open(data);
      task.open_set = open_set ? 1 : 0;
      char* metrics = nullptr;
      check(abm_evaluate(model.ptr, data.ptr, &task, eval_episodes, eval_seed, threads_or_env(eval_threads), &metrics));
      std::cout << take(metrics) << '\n';
      return kExitOk;
    }
    if (*align) {
      Model model;
      check(abm_model_load(align_checkpoint.c_str(), &model.ptr));
      char* summary = nullptr;
      check(abm_align_export(model.ptr, test_image.c_str(), ref_image.c_str(), points, prefix.c_str(), align_seed,
                             layers.data(), layers.size(), &summary));
      std::cout << take(summary) << '\n';
      return kExitOk;
    }
    if (*info) {
      Dataset data;
      info_data.open(data);
      char* json = nullptr;
      check(abm_dataset_info(data.ptr, &json));
      std::cout << take(json) << '\n';
      return kExitOk;
    }
  } catch (const Failure& f) {
    const std::string message = abm_last_error();
    if (!message.empty()) std::cerr << "error (" << abm_status_name(f.status) << "): " << message << '\n';
    return exit_code(f.status);
  }
  return kExitUsage;
}
