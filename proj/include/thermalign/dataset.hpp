#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "thermalign/evalkit.hpp"
#include "thermalign/scenegen.hpp"

namespace thermalign {

struct InvalidRotation : Error {
  using Error::Error;
};
struct EmptyClass : Error {
  using Error::Error;
};
struct EmptyDataset : Error {
  using Error::Error;
};
struct SchemaError : Error {
  using Error::Error;
};

struct AnnotationRecord {
  std::string image_id;
  std::string image_path;  // relative to the corpus root
  std::string rgb_path;
  std::string species;     // canonical lowercase
  int count = 0;
  std::string augmented_from;  // image_id of the source record, "" if original
  int rotation_k = 0;          // quarter turns applied to the source image
  bool operator==(const AnnotationRecord&) const = default;
};

// k in {1,2,3} quarter turns; anything else is InvalidRotation. Rotation by
// multiples of 90 degrees permutes pixels, so intensity histograms are
// untouched and species/count labels stay valid.
GrayImage rotate_augment(const GrayImage& img, int k);
RgbImage rotate_augment(const RgbImage& img, int k);

// Upsamples every species to the majority class size by cloning uniformly
// chosen originals with a random quarter-turn. Pure on records: the new
// entries carry augmented_from/rotation_k and fresh aug/ image paths; pixel
// materialization happens separately. Input order is preserved, new records
// append per species. Throws EmptyClass when a species has no originals.
std::vector<AnnotationRecord> balance_classes(const std::vector<AnnotationRecord>& records,
                                              std::uint64_t seed);

// Writes the rotated thermal/RGB PNGs for every augmented record that is not
// on disk yet. Reads sources relative to corpus_root, writes under
// corpus_root/aug/.
void materialize_augmented(const std::vector<AnnotationRecord>& records,
                           const std::string& corpus_root);

struct SplitRatios {
  double train = 0.8, val = 0.1, test = 0.1;
  bool operator==(const SplitRatios&) const = default;
};

struct Splits {
  std::vector<AnnotationRecord> train, val, test;
};

// Stratified by species: each class is shuffled with the seed and cut at
// floor(n*train) / floor(n*val), remainder to test, so every class
// contributes to every split deterministically.
Splits split_dataset(const std::vector<AnnotationRecord>& records,
                     const SplitRatios& ratios, std::uint64_t seed);

struct ConversationExample {
  std::vector<std::string> images;  // image paths, one entry here
  std::string user_text;            // "<image>\n" + prompt
  std::string assistant_text;       // "Species; N"
  bool operator==(const ConversationExample&) const = default;
};

// ShareGPT-style pair for one record. mode must be closed_set or open_set.
ConversationExample to_sharegpt(const AnnotationRecord& record, PromptMode mode);

struct DatasetManifest {
  std::uint64_t seed = 0;
  SplitRatios ratios;
  std::string split_order;  // "augment-first" or "split-first"
  std::string prompt_mode;  // "closed" / "open" / "mixed"
  bool balanced = true;
  std::map<std::string, std::map<std::string, int>> per_species;  // split -> species -> n
  int cross_split_siblings = 0;  // augmented records split apart from their source
};

struct Dataset {
  Splits records;
  std::vector<ConversationExample> train, val, test;
  DatasetManifest manifest;
};

struct BuildOptions {
  bool balance = true;
  std::string split_order = "augment-first";  // or "split-first"
  SplitRatios ratios;
  std::string prompt_mode = "mixed";  // per-record closed/open by id hash
  std::uint64_t seed = 1;
};

// Full pipeline over a generated corpus: optional balancing (+ on-disk
// augmentation), stratified split, conversation rendering. split-first
// balances the train split only, after splitting, which rules out
// augmentation leakage across splits; augment-first reproduces the simpler
// balance-then-split order and reports any resulting sibling leakage in the
// manifest.
Dataset build_dataset(const std::vector<AnnotationRecord>& originals,
                      const BuildOptions& options, const std::string& corpus_root);

std::vector<AnnotationRecord> records_from_corpus(const std::vector<CorpusRecord>& corpus);

// Directory layout: train.json / val.json / test.json (ShareGPT arrays),
// records.json (annotation records per split), manifest.json. Writes are
// atomic (temp file + rename).
void persist(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace thermalign
