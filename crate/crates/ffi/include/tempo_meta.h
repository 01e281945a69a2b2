#ifndef TEMPO_META_H
#define TEMPO_META_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define TM_OK 0

#define TM_ERR_NULL -1

#define TM_ERR_ARGUMENT -2

#define TM_ERR_PARSE -3

#define TM_ERR_IO -4

#define TM_ERR_NUMERIC -5

#define TM_ERR_CHECKPOINT -6

#define TM_ERR_CONFIG -7

#define TM_ERR_PANIC -99

#define TM_MODE_META 0

#define TM_MODE_PLAIN 1

#define TM_MODE_FINETUNE 2

#define TM_ABLATION_FULL 0

#define TM_ABLATION_NO_GATE 1

#define TM_ABLATION_SHARED_GATE 2

#define TM_OPTIMIZER_SGD 0

#define TM_OPTIMIZER_ADAM 1

/**
 * Opaque temporal graph with its train/valid/test split.
 */
typedef struct TmGraph TmGraph;

/**
 * Opaque trained model: parameters and gates.
 */
typedef struct TmModel TmModel;

/**
 * Hyperparameters. `gate_lr <= 0` means "use alpha".
 */
typedef struct {
  double alpha;
  double beta;
  double l2;
  double gate_lr;
  uint32_t dim;
  uint32_t epochs;
  uint32_t test_steps;
  uint64_t seed;
  int32_t ablation;
  int32_t optimizer;
  bool gate_update_in_eval;
} TmConfig;

/**
 * Test metrics as fractions in [0, 1].
 */
typedef struct {
  double mrr;
  double hits1;
  double hits3;
  double hits10;
  uint64_t count;
} TmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tm_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *tm_last_error(void);

/**
 * Fills `out` with the library defaults.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `TmConfig`.
 */
int32_t tm_config_default(TmConfig *out);

/**
 * Loads a quadruple file and splits it chronologically by the three
 * proportions.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
int32_t tm_graph_load(const char *path,
                      uint64_t time_gap,
                      double p_train,
                      double p_valid,
                      double p_test,
                      TmGraph **out);

/**
 * Builds a graph from `n` rows of `(subject, relation, object, time)`
 * stored row-major in `data`. Times are raw and divided by `time_gap`.
 *
 * # Safety
 * `data` must point to `4 * n` readable values; `out` must be writable.
 */
int32_t tm_graph_from_quadruples(const uint64_t *data,
                                 uintptr_t n,
                                 uint64_t time_gap,
                                 double p_train,
                                 double p_valid,
                                 double p_test,
                                 TmGraph **out);

/**
 * # Safety
 * `graph` must be null or a handle from this library, not yet freed.
 */
void tm_graph_free(TmGraph *graph);

/**
 * Writes entity count, relation count and snapshot count.
 *
 * # Safety
 * `graph` must be a live handle; each output pointer may be null.
 */
int32_t tm_graph_shape(const TmGraph *graph,
                       uint64_t *num_entities,
                       uint64_t *num_relations,
                       uint64_t *num_timestamps);

/**
 * Trains a model on the graph's training span. `mode` is `TM_MODE_META`
 * or `TM_MODE_PLAIN`.
 *
 * # Safety
 * `graph` and `config` must be valid; `out` must be writable.
 */
int32_t tm_model_train(const TmGraph *graph, const TmConfig *config, int32_t mode, TmModel **out);

/**
 * Runs the test protocol of `mode` and writes the test metrics. The model
 * itself is left unchanged.
 *
 * # Safety
 * All pointers must be valid; `out` must be writable.
 */
int32_t tm_model_evaluate(const TmModel *model,
                          const TmGraph *graph,
                          const TmConfig *config,
                          int32_t mode,
                          TmMetrics *out);

/**
 * Score of `(subject, relation, object)`. Use `relation + |R|` to score
 * the inverse direction.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
int32_t tm_model_score(const TmModel *model,
                       uint64_t subject,
                       uint64_t relation,
                       uint64_t object,
                       double *out);

/**
 * Writes the parameter and gate checkpoints.
 *
 * # Safety
 * `model` must be live; paths must be NUL-terminated strings.
 */
int32_t tm_model_save(const TmModel *model, const char *params_path, const char *gates_path);

/**
 * Loads checkpoints written by `tm_model_save` or the CLI.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
int32_t tm_model_load(const char *params_path, const char *gates_path, TmModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library, not yet freed.
 */
void tm_model_free(TmModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TEMPO_META_H */
