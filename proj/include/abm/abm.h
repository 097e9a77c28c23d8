/* C interface to the alignment-based matching network library. */
#ifndef ABM_ABM_H
#define ABM_ABM_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32) && defined(ABM_BUILDING)
#define ABM_API __declspec(dllexport)
#elif defined(_WIN32)
#define ABM_API __declspec(dllimport)
#elif defined(__GNUC__)
#define ABM_API __attribute__((visibility("default")))
#else
#define ABM_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum abm_status {
  ABM_OK = 0,
  ABM_ERR_INVALID_ARGUMENT = 1,
  ABM_ERR_SHAPE = 2,
  ABM_ERR_CONFIG = 3,
  ABM_ERR_IO = 4,
  ABM_ERR_FORMAT = 5,
  ABM_ERR_NUMERIC = 6,
  ABM_ERR_STATE = 7,
  ABM_ERR_RUNTIME = 8,
  ABM_ERR_OUT_OF_MEMORY = 9
} abm_status;

typedef struct abm_config abm_config;
typedef struct abm_dataset abm_dataset;
typedef struct abm_model abm_model;

typedef struct abm_task {
  size_t way;
  size_t shot;
  size_t queries; /* per episode */
  int open_set;
} abm_task;

/* Receives each training-log line (a JSON object) as an epoch finishes. */
typedef void (*abm_log_fn)(const char* json_line, void* user);

ABM_API const char* abm_version(void);
ABM_API const char* abm_status_name(abm_status status);
/* Message of the last failed call on this thread; empty after a success. */
ABM_API const char* abm_last_error(void);
/* Frees strings returned through char** out-parameters. */
ABM_API void abm_string_free(char* s);
/* min(requested, ABM_THREADS) when the variable is set. */
ABM_API abm_status abm_thread_cap(size_t requested, size_t* out);

/* Run configs. Relative paths resolve against the config file's directory
   (or base_dir for abm_config_parse). */
ABM_API abm_status abm_config_load(const char* path, abm_config** out);
ABM_API abm_status abm_config_parse(const char* json, const char* base_dir, abm_config** out);
/* Sets a dotted key ("training.epochs") to a JSON value and re-validates. */
ABM_API abm_status abm_config_set(abm_config* config, const char* key_path, const char* json_value);
ABM_API abm_status abm_config_to_json(const abm_config* config, char** out);
ABM_API void abm_config_free(abm_config* config);

/* Trains and writes checkpoint, log, effective config and test metrics into
   the config's output directory; the summary is JSON. */
ABM_API abm_status abm_train(const abm_config* config, abm_log_fn on_log, void* user, char** summary_json);

/* source_json: {"format": "idx" | "image-dirs" | "synthetic", "path": ...,
   "synthetic": {...}}. */
ABM_API abm_status abm_dataset_open(const char* source_json, const char* base_dir, abm_dataset** out);
/* part: "all", "train", "validation" or "test". */
ABM_API abm_status abm_dataset_from_config(const abm_config* config, const char* part, abm_dataset** out);
ABM_API abm_status abm_dataset_select(const abm_dataset* dataset, const size_t* class_ids, size_t count,
                                      abm_dataset** out);
ABM_API abm_status abm_dataset_info(const abm_dataset* dataset, char** json);
ABM_API void abm_dataset_free(abm_dataset* dataset);

ABM_API abm_status abm_model_load(const char* checkpoint_path, abm_model** out);
ABM_API abm_status abm_model_save(const abm_model* model, const char* checkpoint_path);
/* Model config, parameter count and checkpoint metadata as JSON. */
ABM_API abm_status abm_model_info(const abm_model* model, char** json);
ABM_API void abm_model_free(abm_model* model);

/* Metrics JSON; episode i is drawn from a seed derived from (seed, i). */
ABM_API abm_status abm_evaluate(const abm_model* model, const abm_dataset* dataset, const abm_task* task,
                                size_t episodes, uint64_t seed, size_t threads, char** metrics_json);

/* Writes "<prefix>_point<k>.pgm" heatmaps and "<prefix>.json". layers holds
   1-based blocks; layer_count 0 keeps the checkpoint's mask. */
ABM_API abm_status abm_align_export(const abm_model* model, const char* test_image, const char* reference_image,
                                    size_t points, const char* out_prefix, uint64_t seed, const size_t* layers,
                                    size_t layer_count, char** summary_json);

#ifdef __cplusplus
}
#endif

#endif
