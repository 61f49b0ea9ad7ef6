#ifndef METALORA_H
#define METALORA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MloraStatus {
  MLORA_STATUS_OK = 0,
  MLORA_STATUS_NULL_POINTER = 1,
  MLORA_STATUS_INVALID_UTF8 = 2,
  MLORA_STATUS_INVALID_CONFIG = 3,
  MLORA_STATUS_IO = 4,
  MLORA_STATUS_ADAPTER = 5,
  MLORA_STATUS_DIVERGED = 6,
  MLORA_STATUS_GRADCHECK_FAILED = 7,
  MLORA_STATUS_FAILED = 8,
  MLORA_STATUS_PANIC = 9,
} MloraStatus;

/**
 * A set of trained or loaded adapters.
 */
typedef struct MloraAdapter MloraAdapter;

/**
 * A run configuration.
 */
typedef struct MloraConfig MloraConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static nul-terminated string.
 */
const char *mlora_version(void);

/**
 * Message for the last failed call on this thread, or null.
 * Valid until the next library call on the same thread.
 */
const char *mlora_last_error_message(void);

/**
 * Parses a JSON run configuration.
 *
 * # Safety
 * `json` must be a nul-terminated string and `out` a valid pointer.
 */
enum MloraStatus mlora_config_from_json(const char *json, struct MloraConfig **out);

/**
 * Built-in configuration: `"sinusoid"`, `"low-rank"` or `"sequence"`.
 *
 * # Safety
 * `name` must be a nul-terminated string and `out` a valid pointer.
 */
enum MloraStatus mlora_config_preset(const char *name, struct MloraConfig **out);

/**
 * Sets the training seed.
 *
 * # Safety
 * `config` must come from this library.
 */
enum MloraStatus mlora_config_set_seed(struct MloraConfig *config, uint64_t seed);

/**
 * Sets the number of outer iterations.
 *
 * # Safety
 * `config` must come from this library.
 */
enum MloraStatus mlora_config_set_iterations(struct MloraConfig *config, uint64_t iterations);

/**
 * Serializes the configuration; free the result with [`mlora_string_free`].
 *
 * # Safety
 * `config` must come from this library and `out` be a valid pointer.
 */
enum MloraStatus mlora_config_to_json(const struct MloraConfig *config, char **out);

/**
 * # Safety
 * `config` must come from this library or be null.
 */
void mlora_config_free(struct MloraConfig *config);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void mlora_string_free(char *s);

/**
 * Trains per `config`, writing adapter, metrics and summary into `out_dir`
 * (the config's output directory when null). `out_adapter` and
 * `out_examples` may be null.
 *
 * # Safety
 * Pointers must be valid or null where allowed.
 */
enum MloraStatus mlora_train(const struct MloraConfig *config,
                             const char *out_dir,
                             struct MloraAdapter **out_adapter,
                             uint64_t *out_examples);

/**
 * Mean and sample standard deviation over evaluation seeds of the held-out
 * post-adaptation query loss. `out_sd` may be null.
 *
 * # Safety
 * Pointers must be valid or null where allowed.
 */
enum MloraStatus mlora_evaluate(const struct MloraConfig *config,
                                const struct MloraAdapter *adapter,
                                double *out_mean,
                                double *out_sd);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum MloraStatus mlora_adapter_load(const char *path, struct MloraAdapter **out);

/**
 * # Safety
 * `adapter` must come from this library and `path` be a nul-terminated string.
 */
enum MloraStatus mlora_adapter_save(const struct MloraAdapter *adapter, const char *path);

/**
 * Number of trainable scalars, 0 for a null handle.
 *
 * # Safety
 * `adapter` must come from this library or be null.
 */
size_t mlora_adapter_param_count(const struct MloraAdapter *adapter);

/**
 * # Safety
 * `adapter` must come from this library or be null.
 */
void mlora_adapter_free(struct MloraAdapter *adapter);

/**
 * Runs the finite-difference check of every primitive and loss.
 * `out_failed` (may be null) receives the number of failing cases.
 *
 * # Safety
 * `out_failed` must be valid or null.
 */
enum MloraStatus mlora_gradcheck(uint64_t seed, uint32_t *out_failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METALORA_H */
