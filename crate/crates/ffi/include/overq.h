#ifndef OVERQ_H
#define OVERQ_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OverqCalibration {
  OVERQ_CALIBRATION_MAX = 0,
  OVERQ_CALIBRATION_PERCENTILE = 1,
  OVERQ_CALIBRATION_MMSE = 2,
} OverqCalibration;

typedef enum OverqPeVariant {
  OVERQ_PE_VARIANT_BASELINE = 0,
  OVERQ_PE_VARIANT_SPLIT = 1,
  OVERQ_PE_VARIANT_SHIFT = 2,
} OverqPeVariant;

/**
 * Result code of every fallible call.
 */
typedef enum OverqStatus {
  OVERQ_STATUS_OK = 0,
  OVERQ_STATUS_INVALID_ARGUMENT = 1,
  OVERQ_STATUS_NULL_POINTER = 2,
  OVERQ_STATUS_MALFORMED_ENCODING = 3,
  OVERQ_STATUS_LENGTH_MISMATCH = 4,
  OVERQ_STATUS_OVERFLOW = 5,
  OVERQ_STATUS_BUFFER_TOO_SMALL = 6,
  OVERQ_STATUS_PANIC = 7,
} OverqStatus;

typedef enum OverqVariant {
  OVERQ_VARIANT_BASELINE = 0,
  OVERQ_VARIANT_SPLIT = 1,
  OVERQ_VARIANT_SHIFT = 2,
  OVERQ_VARIANT_ZERO_REUSE = 3,
  OVERQ_VARIANT_SHIFT_ZERO_REUSE = 4,
} OverqVariant;

/**
 * Opaque weight-stationary array with loaded weights.
 */
typedef struct OverqArray OverqArray;

/**
 * Opaque encoded activation vector.
 */
typedef struct OverqEncoded OverqEncoded;

/**
 * Mirror of the quantizer config.
 */
typedef struct OverqQuantConfig {
  uint32_t magnitude_bits;
  double clip_scale;
  double overwrite_threshold;
} OverqQuantConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length in bytes of the last error message on this thread, including the
 * terminating NUL; 0 when there is none.
 */
size_t overq_last_error_length(void);

/**
 * Copy the last error message (NUL-terminated, truncated to `cap`) into
 * `buf`. Returns the number of bytes written including the NUL.
 */
size_t overq_last_error_message(char *buf, size_t cap);

/**
 * NUL-terminated library version; static storage.
 */
const char *overq_version(void);

/**
 * Validated config with the default `S / 4` overwrite threshold.
 */
enum OverqStatus overq_quant_config_new(uint32_t magnitude_bits,
                                        double clip_scale,
                                        struct OverqQuantConfig *out);

/**
 * Pick a clip scale from `len` samples. `percentile` is only read for
 * `OverqCalibration::Percentile`.
 */
enum OverqStatus overq_calibrate(const double *samples,
                                 size_t len,
                                 uint32_t magnitude_bits,
                                 enum OverqCalibration method,
                                 double percentile,
                                 struct OverqQuantConfig *out);

/**
 * Quantize `len` values into `codes_out` (length `len`).
 */
enum OverqStatus overq_quantize(const double *x,
                                size_t len,
                                const struct OverqQuantConfig *config,
                                int64_t *codes_out);

/**
 * Encode `len` activations. On success `*out` owns a new handle that must
 * be released with [`overq_encoded_free`].
 */
enum OverqStatus overq_encode(const double *x,
                              size_t len,
                              const struct OverqQuantConfig *config,
                              enum OverqVariant variant,
                              struct OverqEncoded **out);

/**
 * Rebuild a handle from the packed test-vector form.
 */
enum OverqStatus overq_encoded_from_packed(const uint8_t *bytes,
                                           size_t nbytes,
                                           size_t len,
                                           const struct OverqQuantConfig *config,
                                           enum OverqVariant variant,
                                           struct OverqEncoded **out);

void overq_encoded_free(struct OverqEncoded *handle);

/**
 * Number of slots; 0 for a null handle.
 */
size_t overq_encoded_len(const struct OverqEncoded *handle);

/**
 * Copy flag bits (0/1), slot signs (0/1) and magnitudes. Any output pointer
 * may be null to skip it; non-null outputs must hold `len` entries.
 */
enum OverqStatus overq_encoded_slots(const struct OverqEncoded *handle,
                                     uint8_t *flags,
                                     uint8_t *negative,
                                     uint32_t *magnitude,
                                     size_t len);

/**
 * Write the packed form into `buf`. `*written` always receives the
 * required size; `BufferTooSmall` is returned when `cap` is short.
 */
enum OverqStatus overq_encoded_packed(const struct OverqEncoded *handle,
                                      uint8_t *buf,
                                      size_t cap,
                                      size_t *written);

/**
 * Decode into `out` (length `len`, which must equal the slot count).
 */
enum OverqStatus overq_decode(const struct OverqEncoded *handle, double *out, size_t len);

/**
 * Reference dot product against `len` weight codes of `weight_bits`
 * magnitude bits. The result is in accumulator units.
 */
enum OverqStatus overq_dot_reference(const struct OverqEncoded *handle,
                                     const int64_t *weights,
                                     size_t len,
                                     uint32_t weight_bits,
                                     int64_t *out);

/**
 * Create a `rows x cols` array holding row-major weight codes.
 */
enum OverqStatus overq_array_new(size_t rows,
                                 size_t cols,
                                 enum OverqPeVariant pe_variant,
                                 uint32_t activation_bits,
                                 const int64_t *weights,
                                 uint32_t weight_bits,
                                 struct OverqArray **out);

void overq_array_free(struct OverqArray *handle);

/**
 * Stream `count` encoded vectors through the array. `outputs` receives
 * `count * cols` accumulators, vector-major; `cycles` may be null.
 */
enum OverqStatus overq_array_run(struct OverqArray *handle,
                                 const struct OverqEncoded *const *vectors,
                                 size_t count,
                                 int64_t *outputs,
                                 uint64_t *cycles);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OVERQ_H */
