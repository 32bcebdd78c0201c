/* Generated by cbindgen from crates/ffi; do not edit. */

#ifndef NULLBEAM_H
#define NULLBEAM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum NbStatus {
  NB_STATUS_OK = 0,
  NB_STATUS_NULL_POINTER = 1,
  NB_STATUS_INVALID_ARGUMENT = 2,
  NB_STATUS_JSON = 3,
  NB_STATUS_MEASUREMENT = 4,
  NB_STATUS_SHAPE = 5,
  NB_STATUS_SCENARIO_MISMATCH = 6,
  NB_STATUS_IO = 7,
  NB_STATUS_STATE = 8,
  NB_STATUS_PANIC = 9,
} NbStatus;

// Opaque scenario handle.
typedef struct NbScenario NbScenario;

// Ground-truth figures of one beam.
typedef struct NbMetrics {
  // `|w^H h|²`, linear.
  double signal_gain;
  double snr_db;
  double inr_db;
  double sinr_db;
  // Worst per-interferer SIR; +inf without interferers.
  double min_sir_db;
  // `log2(1 + SINR)`.
  double rate;
} NbMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next call into this library on the same thread.
const char *nb_last_error(void);

// Library version as a static NUL-terminated string.
const char *nb_version(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void nb_string_free(char *s);

// Builds a scenario from a JSON scenario configuration (antennas, bits,
// target, interferers with explicit directions, powers, seed).
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum NbStatus nb_scenario_from_config_json(const char *json, struct NbScenario **out);

// Restores a scenario saved with [`nb_scenario_to_json`] or by the CLI.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum NbStatus nb_scenario_from_json(const char *json, struct NbScenario **out);

// Serializes a scenario; free the result with [`nb_string_free`].
//
// # Safety
// `scenario` must be a live handle; `out` must be writable.
enum NbStatus nb_scenario_to_json(const struct NbScenario *scenario, char **out);

// Number of antennas, or 0 for a NULL handle.
//
// # Safety
// `scenario` must be NULL or a live handle.
size_t nb_scenario_antennas(const struct NbScenario *scenario);

// Codebook resolution in bits, or 0 for a NULL handle.
//
// # Safety
// `scenario` must be NULL or a live handle.
uint32_t nb_scenario_bits(const struct NbScenario *scenario);

// Releases a scenario. NULL is ignored.
//
// # Safety
// `scenario` must come from this library and not have been freed.
void nb_scenario_free(struct NbScenario *scenario);

// Noiseless on/off power readings of a beam: `P_{S+I+N}` and `P_{I+N}`.
//
// # Safety
// `phases` must hold `len` doubles; the outputs must be writable.
enum NbStatus nb_measure(const struct NbScenario *scenario,
                         const double *phases,
                         size_t len,
                         double *signal_interference_noise,
                         double *interference_noise);

// Ground-truth metrics of a beam (any phases, not only codebook ones).
//
// # Safety
// `phases` must hold `len` doubles; `out` must be writable.
enum NbStatus nb_metrics(const struct NbScenario *scenario,
                         const double *phases,
                         size_t len,
                         struct NbMetrics *out);

// Quantizes `len` phases onto the `bits`-bit codebook. `input` and `output`
// may alias.
//
// # Safety
// Both buffers must hold `len` doubles.
enum NbStatus nb_quantize(uint32_t bits, const double *input, double *output, size_t len);

// Approximate half-power beamwidth (radians) of a half-wavelength ULA.
//
// # Safety
// `out` must be writable.
enum NbStatus nb_hpbw(size_t antennas, double *out);

// Linear gains `|w^H a(θ)|²` of a beam over `count` azimuths (radians) for a
// ULA with the given element spacing in wavelengths.
//
// # Safety
// `phases` must hold `len` doubles; `angles` and `gains` `count` doubles.
enum NbStatus nb_pattern(const double *phases,
                         size_t len,
                         double spacing,
                         const double *angles,
                         double *gains,
                         size_t count);

// Learns a beam against the scenario for `iterations` steps and writes the
// best beam's phases and its measured SINR (linear). `agent_json` is an
// agent configuration or NULL for defaults.
//
// # Safety
// `best_phases` must hold `len` doubles, equal to the antenna count;
// `best_sinr` must be writable; `agent_json` NULL or NUL-terminated.
enum NbStatus nb_learn(const struct NbScenario *scenario,
                       const char *agent_json,
                       size_t iterations,
                       double *best_phases,
                       size_t len,
                       double *best_sinr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NULLBEAM_H */
