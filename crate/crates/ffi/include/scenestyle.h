#ifndef SCENESTYLE_H
#define SCENESTYLE_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_UTF8 = 2,
  SS_STATUS_IO = 3,
  SS_STATUS_PARSE = 4,
  SS_STATUS_INVALID_ARGUMENT = 5,
  SS_STATUS_NOT_FOUND = 6,
  SS_STATUS_GENERATION = 7,
  SS_STATUS_CHECKPOINT = 8,
  SS_STATUS_ENCODER = 9,
  SS_STATUS_INTERNAL = 10,
  SS_STATUS_PANIC = 11,
} SsStatus;

/**
 * Loaded model, asset index and text encoder.
 */
typedef struct SsEngine SsEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *ss_last_error(void);

/**
 * Library version as a static string.
 */
const char *ss_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and must not be freed twice.
 */
void ss_string_free(char *s);

/**
 * Loads a checkpoint and an embedding index. `max_new` caps the objects
 * added per call, 0 keeps the default.
 *
 * # Safety
 * Path arguments must be NUL-terminated; `out` must be writable.
 */
enum SsStatus ss_engine_open(const char *checkpoint_path,
                             const char *index_path,
                             uint32_t max_new,
                             struct SsEngine **out);

/**
 * Releases an engine. Null is ignored.
 *
 * # Safety
 * `engine` must come from [`ss_engine_open`] and must not be used afterwards.
 */
void ss_engine_free(struct SsEngine *engine);

/**
 * Builds an empty scene JSON from a floor outline of `n_points` (x, z)
 * pairs, rasterised at the model's floor resolution.
 *
 * # Safety
 * `xz` must hold `2 * n_points` doubles; strings must be NUL-terminated.
 */
enum SsStatus ss_scene_from_floor(const struct SsEngine *engine,
                                  const double *xz,
                                  size_t n_points,
                                  const char *room_type,
                                  char **out_json);

/**
 * Adds objects to a scene until the model stops. `prompt` may be null for
 * unguided completion. Writes the completed scene JSON to `out_json`.
 *
 * # Safety
 * Strings must be NUL-terminated (or null where allowed); `out_json`
 * must be writable.
 */
enum SsStatus ss_complete(const struct SsEngine *engine,
                          const char *scene_json,
                          const char *prompt,
                          double w0,
                          double decay,
                          uint64_t seed,
                          char **out_json);

/**
 * Swaps the asset of one instance for one matching `prompt`.
 *
 * # Safety
 * Strings must be NUL-terminated; `out_json` must be writable.
 */
enum SsStatus ss_replace(const struct SsEngine *engine,
                         const char *scene_json,
                         const char *instance_id,
                         const char *prompt,
                         uint64_t seed,
                         char **out_json);

/**
 * Ranks assets against a text query. Writes a JSON array of
 * `{asset_id, score}` objects.
 *
 * # Safety
 * `query` must be NUL-terminated; `out_json` must be writable.
 */
enum SsStatus ss_search(const struct SsEngine *engine,
                        const char *query,
                        size_t k,
                        char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCENESTYLE_H */
