#ifndef DJTD_FFI_H
#define DJTD_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum DjtdStatus {
  DJTD_STATUS_OK = 0,
  DJTD_STATUS_NULL_POINTER = 1,
  DJTD_STATUS_INVALID_ARGUMENT = 2,
  DJTD_STATUS_IO = 3,
  DJTD_STATUS_MODEL = 4,
  DJTD_STATUS_BUFFER_TOO_SMALL = 5,
  DJTD_STATUS_PANIC = 6,
} DjtdStatus;

// Opaque model handle.
typedef struct DjtdModel DjtdModel;

// Edit counts of one hypothesis against its reference.
typedef struct DjtdErrorCounts {
  size_t substitutions;
  size_t insertions;
  size_t deletions;
  size_t ref_len;
} DjtdErrorCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *djtd_version(void);

// Copies the last error message of this thread into `buf` (always
// NUL-terminated when `cap > 0`) and returns the full message length.
size_t djtd_last_error(char *buf, size_t cap);

// Loads a checkpoint directory written by `djtd train`.
enum DjtdStatus djtd_model_load(const char *dir, struct DjtdModel **out);

// Releases a handle. Null is ignored.
void djtd_model_free(struct DjtdModel *model);

size_t djtd_model_vocab_size(const struct DjtdModel *model);

size_t djtd_model_feature_dim(const struct DjtdModel *model);

// Sets the first- and second-pass beam widths used by later decodes.
enum DjtdStatus djtd_model_set_beams(struct DjtdModel *model, size_t beam1, size_t beam2);

// Two-pass decode of `frames` row-major feature vectors of width `dim` at
// interpolation weight `lambda`. Writes up to `cap` token ids to `tokens`
// and the hypothesis length to `len`; if `cap` is too small `len` still
// receives the required size.
enum DjtdStatus djtd_model_decode(const struct DjtdModel *model,
                                  const double *features,
                                  size_t frames,
                                  size_t dim,
                                  double lambda,
                                  uint32_t *tokens,
                                  size_t cap,
                                  size_t *len);

// Minimum-edit alignment counts of `hyp` against `reference`.
enum DjtdStatus djtd_count_errors(const uint32_t *reference,
                                  size_t ref_len,
                                  const uint32_t *hyp,
                                  size_t hyp_len,
                                  struct DjtdErrorCounts *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DJTD_FFI_H */
