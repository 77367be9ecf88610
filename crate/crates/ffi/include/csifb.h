#ifndef CSIFB_H
#define CSIFB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CsifbStatus {
  CSIFB_STATUS_OK = 0,
  CSIFB_STATUS_NULL_POINTER = 1,
  CSIFB_STATUS_INVALID_ARGUMENT = 2,
  CSIFB_STATUS_DIMENSION = 3,
  CSIFB_STATUS_FORMAT = 4,
  CSIFB_STATUS_IO = 5,
  CSIFB_STATUS_NUMERICAL = 6,
  CSIFB_STATUS_NON_CONVERGENCE = 7,
  /**
   * A panic was caught at the boundary.
   */
  CSIFB_STATUS_INTERNAL = 8,
} CsifbStatus;

/**
 * Trained or freshly initialised model.
 */
typedef struct CsifbModel CsifbModel;

/**
 * Scalar Lloyd-Max codebook.
 */
typedef struct CsifbQuantizer CsifbQuantizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t csifb_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint written by the training command.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum CsifbStatus csifb_model_load(const char *path, struct CsifbModel **out);

/**
 * Untrained desk-scale model (8x8 channel, codeword length 32).
 *
 * # Safety
 * `out` must be writable.
 */
enum CsifbStatus csifb_model_new_desk(uint64_t seed, struct CsifbModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum CsifbStatus csifb_model_save(const struct CsifbModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void csifb_model_free(struct CsifbModel *model);

/**
 * Writes the retained delay rows, antennas, real channel length and codeword
 * length. Any output pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be writable.
 */
enum CsifbStatus csifb_model_dims(const struct CsifbModel *model,
                                  size_t *na,
                                  size_t *nt,
                                  size_t *n,
                                  size_t *m);

/**
 * Encodes `batch` channels (`batch * n` values) into `batch * m` codeword values.
 *
 * # Safety
 * `h` must hold `h_len` values and `out` must have room for `out_len`.
 */
enum CsifbStatus csifb_model_encode(const struct CsifbModel *model,
                                    const double *h,
                                    size_t h_len,
                                    double *out,
                                    size_t out_len);

/**
 * Runs `iters` learned decoder iterations on `batch * m` codeword values and
 * writes `batch * n` reconstructed channel values.
 *
 * # Safety
 * `s` must hold `s_len` values and `out` must have room for `out_len`.
 */
enum CsifbStatus csifb_model_decode(const struct CsifbModel *model,
                                    const double *s,
                                    size_t s_len,
                                    size_t iters,
                                    uint64_t seed,
                                    double *out,
                                    size_t out_len);

/**
 * Fits a `bits`-bit Lloyd-Max codebook to `len` samples.
 *
 * # Safety
 * `samples` must hold `len` values and `out` must be writable.
 */
enum CsifbStatus csifb_quantizer_fit(const double *samples,
                                     size_t len,
                                     uint8_t bits,
                                     size_t max_iter,
                                     double tol,
                                     struct CsifbQuantizer **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum CsifbStatus csifb_quantizer_load(const char *path, struct CsifbQuantizer **out);

/**
 * # Safety
 * `q` must be a live handle and `path` a NUL-terminated string.
 */
enum CsifbStatus csifb_quantizer_save(const struct CsifbQuantizer *q, const char *path);

/**
 * Releases a codebook. Null is ignored.
 *
 * # Safety
 * `q` must be null or a handle not yet freed.
 */
void csifb_quantizer_free(struct CsifbQuantizer *q);

/**
 * Bits per scalar of a codebook, or 0 for a null handle.
 *
 * # Safety
 * `q` must be null or a live handle.
 */
uint8_t csifb_quantizer_bits(const struct CsifbQuantizer *q);

/**
 * Maps `len` values to level indices and their reconstruction levels.
 * Either output may be null.
 *
 * # Safety
 * `s` must hold `len` values; non-null outputs must have room for `len`.
 */
enum CsifbStatus csifb_quantizer_quantize(const struct CsifbQuantizer *q,
                                          const double *s,
                                          size_t len,
                                          uint32_t *indices,
                                          double *dequantized);

/**
 * Feedback payload size `m * bits`.
 */
size_t csifb_feedback_bits(size_t m, uint8_t bits);

/**
 * Encoder multiply count for an `na x nt` channel at compression `1 / cr`.
 *
 * # Safety
 * `out` must be writable.
 */
enum CsifbStatus csifb_encoder_flops(size_t na, size_t nt, size_t cr, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSIFB_H */
