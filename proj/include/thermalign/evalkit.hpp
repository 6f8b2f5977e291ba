#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "thermalign/common.hpp"

namespace thermalign {

struct EmptyEvaluation : Error {
  using Error::Error;
};
struct EvaluationAborted : Error {
  using Error::Error;
};
struct MalformedHabitat : Error {
  MalformedHabitat(const std::string& msg, int lines)
      : Error(msg), observed_lines(lines) {}
  int observed_lines;
};

class Backend;  // backends.hpp

enum class PromptMode { closed_set, open_set, habitat };

const char* prompt_mode_name(PromptMode m);  // "closed" / "open" / "habitat"
std::optional<PromptMode> prompt_mode_from_name(const std::string& name);

// The exact instruction text sent to a backend for each mode. Byte-stable:
// golden tests pin these strings.
std::string render_prompt(PromptMode mode);

// Outcome of parsing one model response in the "Species; Count" contract.
struct Prediction {
  std::string raw_text;
  std::optional<std::string> species;   // canonical lowercase
  std::optional<long long> count;
  bool ok() const { return species.has_value() && count.has_value(); }
};

// Total function: never throws, any string maps to ok or malformed. Accepts
// optional whitespace, any-cased species word (plural and "rhinoceros"
// accepted), "; " separator with flexible spacing, a non-negative integer
// count, and an optional trailing period.
Prediction parse_species_count(std::string_view raw);

struct SpeciesPRF {
  double precision = 0, recall = 0, f1 = 0;
  long long tp = 0, fp = 0, fn = 0;
};

struct RecognitionMetrics {
  std::map<std::string, SpeciesPRF> per_species;  // keyed by true species
  double macro_f1 = 0;
  long long n = 0;
};

struct TruthPrediction {
  std::string species;  // canonical lowercase truth
  int count = 0;
  Prediction pred;
};

// Species precision/recall/F1 over parsed predictions. Malformed responses
// count as a miss for the true class and inflate nobody's false positives.
// Classes never predicted or never present score 0 where the denominator
// vanishes. Throws EmptyEvaluation on an empty input.
RecognitionMetrics recognition_metrics(const std::vector<TruthPrediction>& items);

struct SpeciesEnumeration {
  double exact = 0;
  double within1 = 0;
  std::optional<double> mae;  // empty when every response was malformed
  double unparseable_rate = 0;
  long long n = 0;
};

struct EnumerationMetrics {
  std::map<std::string, SpeciesEnumeration> per_species;  // keyed by true species
  double macro_exact = 0;
  double macro_within1 = 0;
  long long n = 0;
};

// Count quality conditioned on the true species: exact-match rate, within-1
// rate, and MAE over parseable responses only. Malformed responses fail exact
// and within-1, are excluded from MAE, and surface as unparseable_rate.
EnumerationMetrics enumeration_metrics(const std::vector<TruthPrediction>& items);

struct HabitatReport {
  std::string habitat_land_cover;
  std::string key_landscape_features;
  std::string human_presence;
  std::string interpretation;
};

// Expects exactly four non-empty lines after dropping blank ones; known field
// labels are stripped when the model echoes them. Otherwise throws
// MalformedHabitat carrying the observed line count.
HabitatReport parse_habitat(std::string_view raw);

struct EvalItem {
  std::string image_id;
  std::string thermal_path;
  std::string rgb_path;
  std::string species;  // canonical lowercase
  int count = 0;
};

struct ResponseRecord {
  std::string image_id;
  std::string mode;
  bool backend_ok = true;
  std::string error;  // backend failure message, if any
  Prediction pred;
};

struct EvaluationResult {
  PromptMode mode = PromptMode::open_set;
  RecognitionMetrics recognition;
  EnumerationMetrics enumeration;
  std::vector<ResponseRecord> responses;  // sorted by image_id
  long long n_items = 0;
  long long backend_failures = 0;
};

// Runs the mode's prompt over every item with bounded parallelism, then
// aggregates once in image_id order so the result is independent of thread
// scheduling. A backend failure marks the item malformed; if more than half
// the items fail the run aborts with EvaluationAborted.
EvaluationResult evaluate(Backend& backend, const std::vector<EvalItem>& items,
                          PromptMode mode, int parallelism, int max_new_tokens = 12);

// Reporting. Values are fixed-point with three decimals and never blank; an
// undefined MAE renders as 0.000.
struct LabeledResult {
  std::string model;
  std::string prompt_label;  // "Closed-Set" / "Open-Set"
  const EvaluationResult* result;
};

std::string recognition_table_csv(const std::vector<LabeledResult>& rows);
std::string enumeration_table_csv(const std::vector<LabeledResult>& rows);
std::string recognition_table_text(const std::vector<LabeledResult>& rows);
std::string enumeration_table_text(const std::vector<LabeledResult>& rows);

}  // namespace thermalign
