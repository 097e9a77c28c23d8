#include "abm/abm.h"

#include <cstdlib>
#include <cstring>
#include <new>
#include <string>

#include "abm/run.hpp"

struct abm_config {
  abm::RunConfig config;
};

struct abm_dataset {
  abm::Dataset dataset;
};

struct abm_model {
  abm::Checkpoint checkpoint;
  abm::Model<float> model;
};

namespace {

thread_local std::string last_error;

abm_status status_of(abm::ErrorCode code) {
  switch (code) {
    case abm::ErrorCode::invalid_argument: return ABM_ERR_INVALID_ARGUMENT;
    case abm::ErrorCode::shape: return ABM_ERR_SHAPE;
    case abm::ErrorCode::config: return ABM_ERR_CONFIG;
    case abm::ErrorCode::io: return ABM_ERR_IO;
    case abm::ErrorCode::format: return ABM_ERR_FORMAT;
    case abm::ErrorCode::numeric: return ABM_ERR_NUMERIC;
    case abm::ErrorCode::state: return ABM_ERR_STATE;
    case abm::ErrorCode::runtime: return ABM_ERR_RUNTIME;
  }
  return ABM_ERR_RUNTIME;
}

template <typename F>
abm_status guarded(F&& body) {
  try {
    body();
    last_error.clear();
    return ABM_OK;
  } catch (const abm::Error& e) {
    last_error = e.what();
    return status_of(e.code());
  } catch (const nlohmann::json::exception& e) {
    last_error = e.what();
    return ABM_ERR_CONFIG;
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return ABM_ERR_OUT_OF_MEMORY;
  } catch (const std::exception& e) {
    last_error = e.what();
    return ABM_ERR_RUNTIME;
  } catch (...) {
    last_error = "unknown error";
    return ABM_ERR_RUNTIME;
  }
}

void require(const void* p, const char* name) {
  if (!p) abm::fail(abm::ErrorCode::invalid_argument, std::string(name) + " must not be null");
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

nlohmann::json parse_json(const char* text, const char* what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    abm::fail(abm::ErrorCode::config, std::string(what) + " is not valid JSON: " + text);
  }
}

}  // namespace

extern "C" {

const char* abm_version(void) { return "1.0.0"; }

const char* abm_status_name(abm_status status) {
  switch (status) {
    case ABM_OK: return "ok";
    case ABM_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case ABM_ERR_SHAPE: return "shape";
    case ABM_ERR_CONFIG: return "config";
    case ABM_ERR_IO: return "io";
    case ABM_ERR_FORMAT: return "format";
    case ABM_ERR_NUMERIC: return "numeric";
    case ABM_ERR_STATE: return "state";
    case ABM_ERR_RUNTIME: return "runtime";
    case ABM_ERR_OUT_OF_MEMORY: return "out_of_memory";
  }
  return "unknown";
}

const char* abm_last_error(void) { return last_error.c_str(); }

void abm_string_free(char* s) { std::free(s); }

abm_status abm_thread_cap(size_t requested, size_t* out) {
  return guarded([&] {
    require(out, "out");
    *out = abm::cap_threads(requested);
  });
}

abm_status abm_config_load(const char* path, abm_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new abm_config{abm::load_run_config(path)};
  });
}

abm_status abm_config_parse(const char* json, const char* base_dir, abm_config** out) {
  return guarded([&] {
    require(json, "json");
    require(out, "out");
    *out = new abm_config{abm::run_config_from_json(parse_json(json, "config"), base_dir ? base_dir : "")};
  });
}

abm_status abm_config_set(abm_config* config, const char* key_path, const char* json_value) {
  return guarded([&] {
    require(config, "config");
    require(key_path, "key_path");
    require(json_value, "json_value");
    config->config = abm::override_run_config(config->config, key_path, parse_json(json_value, key_path));
  });
}

abm_status abm_config_to_json(const abm_config* config, char** out) {
  return guarded([&] {
    require(config, "config");
    require(out, "out");
    *out = copy_string(abm::to_json(config->config).dump(2));
  });
}

void abm_config_free(abm_config* config) { delete config; }

abm_status abm_train(const abm_config* config, abm_log_fn on_log, void* user, char** summary_json) {
  return guarded([&] {
    require(config, "config");
    const nlohmann::json summary = abm::run_training(config->config, [&](const std::string& line) {
      if (on_log) on_log(line.c_str(), user);
    });
    if (summary_json) *summary_json = copy_string(summary.dump());
  });
}

abm_status abm_dataset_open(const char* source_json, const char* base_dir, abm_dataset** out) {
  return guarded([&] {
    require(source_json, "source_json");
    require(out, "out");
    const auto source =
        abm::dataset_source_from_json(parse_json(source_json, "dataset source"), "dataset", base_dir ? base_dir : "");
    *out = new abm_dataset{abm::load_source(source)};
  });
}

abm_status abm_dataset_from_config(const abm_config* config, const char* part, abm_dataset** out) {
  return guarded([&] {
    require(config, "config");
    require(part, "part");
    require(out, "out");
    const std::string p = part;
    if (p == "all") {
      *out = new abm_dataset{abm::load_source(config->config.dataset)};
      return;
    }
    abm::Splits s = abm::prepare_splits(config->config);
    if (p == "train") *out = new abm_dataset{std::move(s.train)};
    else if (p == "validation") *out = new abm_dataset{std::move(s.validation)};
    else if (p == "test") *out = new abm_dataset{std::move(s.test)};
    else abm::fail(abm::ErrorCode::invalid_argument, "part must be all, train, validation or test, got '" + p + "'");
  });
}

abm_status abm_dataset_select(const abm_dataset* dataset, const size_t* class_ids, size_t count, abm_dataset** out) {
  return guarded([&] {
    require(dataset, "dataset");
    require(out, "out");
    if (count > 0) require(class_ids, "class_ids");
    *out = new abm_dataset{abm::select_classes(dataset->dataset, std::span<const size_t>(class_ids, count))};
  });
}

abm_status abm_dataset_info(const abm_dataset* dataset, char** json) {
  return guarded([&] {
    require(dataset, "dataset");
    require(json, "json");
    *json = copy_string(abm::dataset_info(dataset->dataset).dump());
  });
}

void abm_dataset_free(abm_dataset* dataset) { delete dataset; }

abm_status abm_model_load(const char* checkpoint_path, abm_model** out) {
  return guarded([&] {
    require(checkpoint_path, "checkpoint_path");
    require(out, "out");
    abm::Checkpoint c = abm::load_checkpoint(checkpoint_path);
    abm::Model<float> m = abm::restore_model(c);
    *out = new abm_model{std::move(c), std::move(m)};
  });
}

abm_status abm_model_save(const abm_model* model, const char* checkpoint_path) {
  return guarded([&] {
    require(model, "model");
    require(checkpoint_path, "checkpoint_path");
    abm::save_checkpoint(model->checkpoint, checkpoint_path);
  });
}

abm_status abm_model_info(const abm_model* model, char** json) {
  return guarded([&] {
    require(model, "model");
    require(json, "json");
    std::size_t count = 0;
    for (const auto& p : model->model.parameters()) count += p.var.value().size();
    nlohmann::json meta = model->checkpoint.metadata;
    meta.erase("history");
    *json = copy_string(nlohmann::json{{"version", model->checkpoint.version},
                                       {"model", abm::to_json(model->checkpoint.model)},
                                       {"parameters", count},
                                       {"tensors", model->checkpoint.tensors.size()},
                                       {"metadata", meta}}
                            .dump());
  });
}

void abm_model_free(abm_model* model) { delete model; }

abm_status abm_evaluate(const abm_model* model, const abm_dataset* dataset, const abm_task* task, size_t episodes,
                        uint64_t seed, size_t threads, char** metrics_json) {
  return guarded([&] {
    require(model, "model");
    require(dataset, "dataset");
    require(task, "task");
    require(metrics_json, "metrics_json");
    abm::EpisodeSpec spec{task->way, task->shot, task->queries, task->open_set != 0};
    if (spec.way == 0 || spec.shot == 0 || spec.queries == 0) {
      abm::fail(abm::ErrorCode::invalid_argument, "way, shot and queries must be >= 1");
    }
    const abm::Metrics m =
        abm::evaluate(model->model, dataset->dataset, spec, episodes, seed, abm::cap_threads(threads));
    *metrics_json = copy_string(abm::to_json(m).dump());
  });
}

abm_status abm_align_export(const abm_model* model, const char* test_image, const char* reference_image,
                            size_t points, const char* out_prefix, uint64_t seed, const size_t* layers,
                            size_t layer_count, char** summary_json) {
  return guarded([&] {
    require(model, "model");
    require(test_image, "test_image");
    require(reference_image, "reference_image");
    require(out_prefix, "out_prefix");
    if (layer_count > 0) require(layers, "layers");
    const std::size_t channels = model->model.config().encoder.channels;
    const abm::Image test = abm::read_image(test_image, channels);
    const abm::Image reference = abm::read_image(reference_image, channels);
    const nlohmann::json summary = abm::export_alignment(model->model, test, reference, points, out_prefix, seed,
                                                         std::span<const size_t>(layers, layer_count));
    if (summary_json) *summary_json = copy_string(summary.dump());
  });
}

}  // extern "C"
