/* C interface to the btt diagnosis and scheduling engine.
 *
 * Every function returns a btt_status. On failure, btt_last_error() holds a
 * message for the calling thread until its next btt_ call. Strings returned
 * through char** are owned by the caller and released with btt_string_free.
 */
#ifndef BTT_H
#define BTT_H

#include <stddef.h>

#if defined(_WIN32)
#define BTT_API __declspec(dllexport)
#else
#define BTT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum btt_status {
  BTT_OK = 0,
  BTT_INVALID_INPUT = 1,
  BTT_IO_ERROR = 2,
  BTT_PARSE_ERROR = 3,
  BTT_INVARIANT_VIOLATION = 4,
  BTT_NO_SUCH_TRIAL = 5,
  BTT_INTERNAL = 6
} btt_status;

typedef enum btt_decision {
  BTT_DECISION_CONTINUE = 0,
  BTT_DECISION_TERMINATE_BAD = 1,
  BTT_DECISION_TERMINATE_BENIGN = 2
} btt_decision;

typedef enum btt_replay_mode { BTT_REPLAY_COMBINED = 0, BTT_REPLAY_PER_INDICATOR = 1 } btt_replay_mode;

typedef enum btt_stop_ack { BTT_STOP_STOPPING = 0, BTT_STOP_ALREADY_STOPPING = 1, BTT_STOP_ALREADY_FINISHED = 2 } btt_stop_ack;

typedef struct btt_config btt_config;
typedef struct btt_trace btt_trace;
typedef struct btt_report btt_report;
typedef struct btt_replay btt_replay;
typedef struct btt_experiment btt_experiment;

BTT_API const char* btt_version(void);
BTT_API const char* btt_last_error(void);
BTT_API const char* btt_status_name(btt_status status);
BTT_API void btt_string_free(char* s);

/* Ten statistics in order: avg, var, median, min, max, q3, q1, skewness,
 * kurtosis, zero_ratio. */
BTT_API btt_status btt_stat_vector(const double* values, size_t n, double out[10]);

/* Indicator thresholds. A NULL config argument elsewhere means defaults. */
BTT_API btt_status btt_config_default(btt_config** out);
BTT_API btt_status btt_config_parse(const char* text, btt_config** out);
BTT_API btt_status btt_config_load(const char* path, btt_config** out);
BTT_API btt_status btt_config_to_json(const btt_config* cfg, char** out);
BTT_API void btt_config_free(btt_config* cfg);

BTT_API btt_status btt_trace_read_file(const char* path, btt_trace** out);
BTT_API btt_status btt_trace_epoch_count(const btt_trace* trace, int* out);
BTT_API btt_status btt_trace_trial_id(const btt_trace* trace, char** out);
BTT_API void btt_trace_free(btt_trace* trace);

BTT_API btt_status btt_diagnose(const btt_trace* trace, int epoch, const btt_config* cfg, btt_report** out);
BTT_API btt_status btt_report_decision(const btt_report* report, btt_decision* out);
/* "ERG+LAR", or "" when nothing fired. */
BTT_API btt_status btt_report_positives(const btt_report* report, char** out);
BTT_API btt_status btt_report_to_json(const btt_report* report, char** out);
BTT_API void btt_report_free(btt_report* report);

/* Diagnoses every epoch prefix of one trace file. The JSON document lists
 * the positive verdicts of each epoch and the first decision. */
BTT_API btt_status btt_diagnose_file(const char* path, const btt_config* cfg, char** out_json, char** out_text);

BTT_API btt_status btt_replay_dir(const char* dir, const btt_config* cfg, btt_replay_mode mode, btt_replay** out);
BTT_API btt_status btt_replay_trial_count(const btt_replay* replay, int* out);
BTT_API btt_status btt_replay_to_json(const btt_replay* replay, char** out);
BTT_API btt_status btt_replay_table(const btt_replay* replay, char** out);
BTT_API void btt_replay_free(btt_replay* replay);

/* labels_json: object trial_id -> "good"|"bad", or NULL to label by the
 * `quantile` of final metrics. grid_json: array of config objects, or NULL
 * for a single default config. */
BTT_API btt_status btt_calibrate(const char* dir, const char* labels_json, double quantile, const char* grid_json,
                                 char** out_json);

/* Manifest keys: experiment_id, runner, space (built-in name or file),
 * policy, budget, concurrency, seed, config (file), out, checker_latency_ms,
 * simulated. */
BTT_API btt_status btt_experiment_create(const char* manifest_json, btt_experiment** out);
typedef void (*btt_event_fn)(const char* line, void* user);
BTT_API btt_status btt_experiment_set_event_callback(btt_experiment* exp, btt_event_fn fn, void* user);
BTT_API btt_status btt_experiment_run(btt_experiment* exp);
/* Thread-safe; may be called while btt_experiment_run is in progress. */
BTT_API btt_status btt_experiment_request_stop(btt_experiment* exp, const char* trial_id, const char* reason,
                                               btt_stop_ack* out);
BTT_API btt_status btt_experiment_summary_json(const btt_experiment* exp, char** out);
BTT_API btt_status btt_experiment_summary_table(const btt_experiment* exp, char** out);
BTT_API void btt_experiment_free(btt_experiment* exp);

BTT_API btt_status btt_log_summary_json(const char* log_path, char** out);

/* options_json may be NULL or hold k, baseline_best, baseline_time_ms. */
BTT_API btt_status btt_compare(const char* log_a, const char* name_a, const char* log_b, const char* name_b,
                               const char* options_json, char** out_table, char** out_json, char** out_csv);

/* JSON array of {name, runner, dims}. */
BTT_API btt_status btt_spaces_list(char** out_json);

#ifdef __cplusplus
}
#endif

#endif /* BTT_H */
