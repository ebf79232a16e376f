/* C interface to the ppbench core. All functions return a ppb_status; on
 * failure a one-line diagnostic is available from ppb_last_error() on the
 * calling thread until the next call on that thread. Strings returned
 * through char** out-parameters are owned by the caller and released with
 * ppb_string_free. Configuration is passed as JSON text; NULL or "" means
 * defaults. */
#ifndef PPBENCH_H
#define PPBENCH_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define PPB_API __declspec(dllexport)
#else
#define PPB_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ppb_status {
  PPB_OK = 0,
  PPB_ERR_INTERNAL = 1,
  PPB_ERR_CONFIG = 2,
  PPB_ERR_DATA = 3,
  PPB_ERR_NUMERIC = 4
} ppb_status;

typedef struct ppb_dataset ppb_dataset;
typedef struct ppb_model ppb_model;
typedef struct ppb_training ppb_training;

PPB_API const char* ppb_version(void);
PPB_API const char* ppb_last_error(void);
PPB_API void ppb_string_free(char* s);

/* Dataset generation and loading. The generator config keys are
 * num_classes, num_parts, train_per_class, test_per_class, image_size, seed
 * and occlusion_prob. */
PPB_API ppb_status ppb_generate_dataset(const char* config_json, const char* dir, char** manifest_path);
PPB_API ppb_status ppb_dataset_load(const char* manifest_path, ppb_dataset** out);
PPB_API void ppb_dataset_free(ppb_dataset* dataset);
PPB_API ppb_status ppb_dataset_info(const ppb_dataset* dataset, char** info_json);

/* Training. `progress` (may be NULL) receives each epoch's log row as CSV
 * text, with the header available as ppb_train_log_header(). */
typedef void (*ppb_progress_fn)(const char* log_row, void* user);
PPB_API const char* ppb_train_log_header(void);
PPB_API ppb_status ppb_train(const ppb_dataset* dataset, const char* config_json, ppb_progress_fn progress,
                             void* user, ppb_training** out);
/* Writes epoch_XX.ckpt, final.ckpt, train_log.csv and train_config.json. */
PPB_API ppb_status ppb_training_write(const ppb_training* training, const char* dir);
/* The final model, as a new handle owned by the caller. */
PPB_API ppb_status ppb_training_model(const ppb_training* training, ppb_model** out);
PPB_API void ppb_training_free(ppb_training* training);

/* Models. A model loaded from <dir>/x.ckpt picks up <dir>/train_config.json
 * when present, so reports can name the training configuration. */
PPB_API ppb_status ppb_model_load(const char* checkpoint_path, ppb_model** out);
PPB_API ppb_status ppb_model_save(const ppb_model* model, const char* checkpoint_path);
PPB_API ppb_status ppb_model_config(const ppb_model* model, char** config_json);
PPB_API void ppb_model_free(ppb_model* model);
PPB_API ppb_status ppb_predict(const ppb_model* model, const ppb_dataset* dataset, int test_split, int* labels,
                               size_t capacity, size_t* count);

/* Evaluation. Option keys: mu, box_ratio, threads, similar_threshold and
 * noises (array of {kind: "gauss"|"pgd", sigma | eps, alpha, steps, seed}).
 * The report is JSON; `csv_row` (may be NULL) receives its flat CSV row. */
PPB_API const char* ppb_report_csv_header(void);
PPB_API ppb_status ppb_evaluate(const ppb_model* model, const ppb_dataset* dataset, const char* options_json,
                                char** report_json, char** csv_row);
/* Consistency of each checkpoint in order, as a JSON array of numbers. */
PPB_API ppb_status ppb_consistency_series(const char* const* checkpoint_paths, size_t count,
                                          const ppb_dataset* dataset, const char* options_json, char** series_json);

/* Benchmark table over serialised reports: per-method means as CSV and as
 * aligned text. `sources` (may be NULL) labels the reports in diagnostics. */
PPB_API ppb_status ppb_report_table(const char* const* report_jsons, const char* const* sources, size_t count,
                                    char** table_csv, char** table_text);

#ifdef __cplusplus
}
#endif

#endif
