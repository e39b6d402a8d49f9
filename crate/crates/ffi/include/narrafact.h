#ifndef NARRAFACT_H
#define NARRAFACT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum NfStatus {
  NF_STATUS_OK = 0,
  NF_STATUS_NULL_ARGUMENT = 1,
  NF_STATUS_INVALID_UTF8 = 2,
  NF_STATUS_MALFORMED_INPUT = 3,
  NF_STATUS_INVALID_INPUT = 4,
  NF_STATUS_INVALID_PARAMS = 5,
  NF_STATUS_EMPTY_INPUT = 6,
  NF_STATUS_PROVIDER = 7,
  NF_STATUS_NO_FACTS = 8,
  NF_STATUS_DEGENERATE_SERIES = 9,
  NF_STATUS_IO = 10,
  NF_STATUS_INTERNAL = 11,
  NF_STATUS_PANIC = 12,
} NfStatus;

// Which rank statistic a permutation test uses.
typedef enum NfStatistic {
  NF_STATISTIC_SPEARMAN = 0,
  NF_STATISTIC_KENDALL = 1,
} NfStatistic;

// Scripted provider used for graph building, summarizing and scoring.
typedef struct NfEngine NfEngine;

// A character knowledge graph.
typedef struct NfGraph NfGraph;

// A parsed narrative.
typedef struct NfNarrative NfNarrative;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *nf_last_error_message(void);

// Static, nul-terminated library version.
const char *nf_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void nf_string_free(char *s);

// Parses scene JSON: `{"id", "title", "scenes": [{"index", "text"}]}`.
//
// # Safety
// `json` must be a nul-terminated string; `out` must be writable.
enum NfStatus nf_narrative_from_json(const char *json, struct NfNarrative **out);

// # Safety
// `narrative` must be a live handle; `out` must be writable.
enum NfStatus nf_narrative_scene_count(const struct NfNarrative *narrative, size_t *out);

// Number of chunks greedy scene packing produces under `budget` tokens.
//
// # Safety
// `narrative` must be a live handle; `out` must be writable.
enum NfStatus nf_narrative_chunk_count(const struct NfNarrative *narrative,
                                       size_t budget,
                                       size_t *out);

// # Safety
// `narrative` must come from this library and not be freed twice. Null is ignored.
void nf_narrative_free(struct NfNarrative *narrative);

// Builds a graph from already-extracted data:
// `{"tau", "alias_pairs": [{"left", "right", "scene_index"}], "triples": [...]}`.
//
// # Safety
// `json` must be a nul-terminated string; `out` must be writable.
enum NfStatus nf_graph_from_triples_json(const char *json, struct NfGraph **out);

// Plain-text rendering of the graph, as shown to the judge.
//
// # Safety
// `graph` must be a live handle; `out` must be writable.
enum NfStatus nf_graph_linearize(const struct NfGraph *graph, char **out);

// # Safety
// `graph` must be a live handle; `out` must be writable.
enum NfStatus nf_graph_to_json(const struct NfGraph *graph, char **out);

// # Safety
// `graph` must come from this library and not be freed twice. Null is ignored.
void nf_graph_free(struct NfGraph *graph);

// ROUGE-N F1 in [0, 100] for `n` of 1 or 2.
//
// # Safety
// Strings must be nul-terminated; `out` must be writable.
enum NfStatus nf_rouge_n(const char *candidate, const char *reference, size_t n, double *out);

// ROUGE-L F1 in [0, 100].
//
// # Safety
// Strings must be nul-terminated; `out` must be writable.
enum NfStatus nf_rouge_l(const char *candidate, const char *reference, double *out);

// # Safety
// `metric` and `human` must each point to `n` doubles; `out` must be writable.
enum NfStatus nf_spearman(const double *metric, const double *human, size_t n, double *out);

// Kendall tau-b.
//
// # Safety
// `metric` and `human` must each point to `n` doubles; `out` must be writable.
enum NfStatus nf_kendall(const double *metric, const double *human, size_t n, double *out);

// Two-sided permutation p-value over shuffles of the human scores.
//
// # Safety
// `metric` and `human` must each point to `n` doubles; `out` must be writable.
enum NfStatus nf_permutation_pvalue(const double *metric,
                                    const double *human,
                                    size_t n,
                                    enum NfStatistic statistic,
                                    size_t permutations,
                                    uint64_t seed,
                                    double *out);

// Engine over a scripted provider: `{"rules": [...], "queue": [...], "embeddings": {...}}`.
//
// # Safety
// `script_json` must be a nul-terminated string; `out` must be writable.
enum NfStatus nf_engine_scripted(const char *script_json, struct NfEngine **out);

// Extracts a character graph over `rounds` passes, keeping predicates seen at least `tau` times.
//
// # Safety
// Handles must be live; `out` must be writable.
enum NfStatus nf_engine_build_graph(const struct NfEngine *engine,
                                    const struct NfNarrative *narrative,
                                    size_t rounds,
                                    size_t tau,
                                    struct NfGraph **out);

// Drafts a summary by summarizing chunks of at most `chunk_budget` tokens.
//
// # Safety
// Handles must be live; `out` must be writable.
enum NfStatus nf_engine_summarize(const struct NfEngine *engine,
                                  const struct NfNarrative *narrative,
                                  size_t chunk_budget,
                                  char **out);

// Scores `summary` against the narrative; writes the report as JSON.
// `graph` may be null to judge against scenes only.
//
// # Safety
// Handles must be live or, for `graph`, null; `summary` must be
// nul-terminated; `out` must be writable.
enum NfStatus nf_engine_score(const struct NfEngine *engine,
                              const struct NfNarrative *narrative,
                              const struct NfGraph *graph,
                              const char *summary,
                              char **out);

// # Safety
// `engine` must come from this library and not be freed twice. Null is ignored.
void nf_engine_free(struct NfEngine *engine);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NARRAFACT_H */
