/*
 * C interface of the dmlram library.
 *
 * Every function returns a dml_status. On failure the message of the most
 * recent error on the calling thread is available from dml_last_error().
 * Objects are opaque handles released with their matching *_free function;
 * passing NULL to a *_free function is a no-op. Strings produced by the
 * library come back as dml_text handles.
 */
#ifndef DMLRAM_C_API_H
#define DMLRAM_C_API_H

#include <stddef.h>
#include <stdint.h>

#if defined(DMLRAM_BUILDING)
#define DML_API __attribute__((visibility("default")))
#else
#define DML_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dml_status {
    DML_OK = 0,
    DML_ERR_ARGUMENT = 1,  /* NULL pointer or bad enum string */
    DML_ERR_DIMENSION = 2, /* mismatched extents or lengths */
    DML_ERR_CONFIG = 3,    /* invalid hyperparameters or settings */
    DML_ERR_NUMERIC = 4,   /* NaN/Inf during training */
    DML_ERR_IO = 5,        /* missing, truncated or malformed file */
    DML_ERR_INVARIANT = 6, /* data that violates a domain rule */
    DML_ERR_INTERNAL = 7   /* anything else */
} dml_status;

typedef struct dml_text dml_text;
typedef struct dml_experiment dml_experiment;
typedef struct dml_pipeline dml_pipeline;

DML_API const char* dml_version(void);
DML_API const char* dml_status_name(dml_status status);
/* Message of the last failed call on this thread ("" if none). */
DML_API const char* dml_last_error(void);

/* ---- text ---------------------------------------------------------------- */

DML_API const char* dml_text_data(const dml_text* text);
DML_API size_t dml_text_size(const dml_text* text);
DML_API void dml_text_free(dml_text* text);

/* ---- data ---------------------------------------------------------------- */

/* Writes a synthetic dataset (manifest.json plus tensor files) to out_dir.
 * summary_json (optional) receives the dataset fingerprint and sizes. */
DML_API dml_status dml_generate_synthetic(const char* out_dir, size_t n_traj, size_t steps, size_t image_size,
                                          uint64_t seed, dml_text** summary_json);

/* ---- metrics ------------------------------------------------------------- */

/* preds and targets are row-major [n, a]. */
DML_API dml_status dml_compute_metrics(const float* preds, const float* targets, size_t n, size_t a, double* mse,
                                       double* mae, double* rmse);

/* Audits (mse, rmse) pairs from a CSV file. report_json and report_text are
 * optional; flagged receives the number of inconsistent rows. */
DML_API dml_status dml_check_tables(const char* csv_path, double tolerance, size_t* flagged, dml_text** report_json,
                                    dml_text** report_text);

/* ---- experiments --------------------------------------------------------- */

DML_API dml_status dml_experiment_load(const char* config_path, dml_experiment** out);
/* base_dir resolves relative paths in the document; may be NULL. */
DML_API dml_status dml_experiment_parse(const char* json_text, const char* base_dir, dml_experiment** out);
DML_API void dml_experiment_free(dml_experiment* experiment);
DML_API dml_status dml_experiment_config_json(const dml_experiment* experiment, dml_text** out);

/* stage: "visual", "state", "fusion" or "all". */
DML_API dml_status dml_experiment_train(const dml_experiment* experiment, const char* stage, const char* out_dir,
                                        dml_text** summary_json);

/* Runs the comparison grid. all_ok is set to 0 when any cell failed; the
 * call itself still returns DML_OK in that case. */
DML_API dml_status dml_experiment_compare(const dml_experiment* experiment, dml_text** report_json,
                                          dml_text** report_text, int* all_ok);

/* ---- pipelines ----------------------------------------------------------- */

DML_API dml_status dml_pipeline_load(const char* bundle_path, dml_pipeline** out);
DML_API void dml_pipeline_free(dml_pipeline* pipeline);

/* Any output pointer may be NULL. */
DML_API dml_status dml_pipeline_dims(const dml_pipeline* pipeline, size_t* window, size_t* channels, size_t* height,
                                     size_t* width, size_t* state_dim, size_t* action_dim);

/* images: window frames, each [channels, height, width], concatenated.
 * state: [positions | velocities | efforts | gripper]. action receives the
 * denormalised action. key is needed only for file-backed features. */
DML_API dml_status dml_pipeline_predict(const dml_pipeline* pipeline, const float* images, size_t images_len,
                                        const float* state, size_t state_len, const char* key, float* action,
                                        size_t action_len);

/* split: "train", "val" or "test". data_path is a dataset directory or its
 * manifest.json. */
DML_API dml_status dml_evaluate_bundle(const char* bundle_path, const char* data_path, const char* split,
                                       dml_text** report_json);

#ifdef __cplusplus
}
#endif

#endif /* DMLRAM_C_API_H */
