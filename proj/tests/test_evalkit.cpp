#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "thermalign/backends.hpp"
#include "thermalign/evalkit.hpp"
#include "thermalign/rng.hpp"

using namespace thermalign;

namespace {

TruthPrediction tp(const std::string& truth, int count, const std::string& raw) {
  return {truth, count, parse_species_count(raw)};
}

TruthPrediction malformed(const std::string& truth, int count) {
  return {truth, count, Prediction{}};
}

// Independent re-implementations of both metric functions, written as plain
// counting loops over the confusion definition so they share no structure
// with the library code.
RecognitionMetrics naive_recognition(const std::vector<TruthPrediction>& items) {
  std::set<std::string> classes;
  for (const auto& it : items) classes.insert(it.species);
  RecognitionMetrics m;
  m.n = static_cast<long long>(items.size());
  double f1_sum = 0;
  for (const auto& c : classes) {
    SpeciesPRF prf;
    for (const auto& it : items) {
      const bool hit = it.pred.ok() && *it.pred.species == c;
      if (it.species == c && hit) prf.tp++;
      if (it.species != c && hit) prf.fp++;
      if (it.species == c && !hit) prf.fn++;
    }
    prf.precision = prf.tp + prf.fp == 0 ? 0.0 : double(prf.tp) / double(prf.tp + prf.fp);
    prf.recall = prf.tp + prf.fn == 0 ? 0.0 : double(prf.tp) / double(prf.tp + prf.fn);
    prf.f1 = prf.precision + prf.recall == 0
                 ? 0.0
                 : 2 * prf.precision * prf.recall / (prf.precision + prf.recall);
    f1_sum += prf.f1;
    m.per_species[c] = prf;
  }
  m.macro_f1 = f1_sum / double(classes.size());
  return m;
}

EnumerationMetrics naive_enumeration(const std::vector<TruthPrediction>& items) {
  std::set<std::string> classes;
  for (const auto& it : items) classes.insert(it.species);
  EnumerationMetrics m;
  m.n = static_cast<long long>(items.size());
  double exact_sum = 0, within1_sum = 0;
  for (const auto& c : classes) {
    SpeciesEnumeration e;
    long long exact = 0, within1 = 0, parsed = 0;
    double abs_err = 0;
    for (const auto& it : items) {
      if (it.species != c) continue;
      e.n++;
      if (!it.pred.ok()) continue;
      parsed++;
      const long long d = *it.pred.count - it.count;
      if (d == 0) exact++;
      if (std::llabs(d) <= 1) within1++;
      abs_err += double(std::llabs(d));
    }
    e.exact = double(exact) / double(e.n);
    e.within1 = double(within1) / double(e.n);
    e.unparseable_rate = double(e.n - parsed) / double(e.n);
    if (parsed > 0) e.mae = abs_err / double(parsed);
    exact_sum += e.exact;
    within1_sum += e.within1;
    m.per_species[c] = e;
  }
  m.macro_exact = exact_sum / double(classes.size());
  m.macro_within1 = within1_sum / double(classes.size());
  return m;
}

// Replies keyed by request_id; ids listed in fail return a backend error.
class ScriptedBackend final : public Backend {
 public:
  std::map<std::string, std::string> replies;
  std::set<std::string> fail;
  int parallel_cap = 1 << 20;

  std::string name() const override { return "scripted"; }
  int max_parallel() const override { return parallel_cap; }
  std::string infer(const InferenceRequest& req) override {
    calls_++;
    if (fail.count(req.request_id)) throw BackendError("scripted failure: " + req.request_id);
    const auto it = replies.find(req.request_id);
    return it == replies.end() ? std::string("???") : it->second;
  }
  int calls() const { return calls_.load(); }

 private:
  std::atomic<int> calls_{0};
};

std::vector<EvalItem> six_items() {
  // Two of each species, scrambled insertion order to exercise the id sort.
  return {
      {"rhino_0001", "t/r1.png", "r/r1.png", "rhino", 2},
      {"deer_0002", "t/d2.png", "r/d2.png", "deer", 5},
      {"elephant_0001", "t/e1.png", "r/e1.png", "elephant", 1},
      {"deer_0001", "t/d1.png", "r/d1.png", "deer", 3},
      {"elephant_0002", "t/e2.png", "r/e2.png", "elephant", 7},
      {"rhino_0002", "t/r2.png", "r/r2.png", "rhino", 4},
  };
}

}  // namespace

TEST_CASE("prompt mode names round-trip") {
  CHECK(std::string(prompt_mode_name(PromptMode::closed_set)) == "closed");
  CHECK(std::string(prompt_mode_name(PromptMode::open_set)) == "open");
  CHECK(std::string(prompt_mode_name(PromptMode::habitat)) == "habitat");
  for (PromptMode m : {PromptMode::closed_set, PromptMode::open_set, PromptMode::habitat})
    CHECK(prompt_mode_from_name(prompt_mode_name(m)) == m);
  CHECK(prompt_mode_from_name("closed_set") == PromptMode::closed_set);
  CHECK(prompt_mode_from_name("closed-set") == PromptMode::closed_set);
  CHECK(prompt_mode_from_name("open_set") == PromptMode::open_set);
  CHECK(prompt_mode_from_name("open-set") == PromptMode::open_set);
  CHECK_FALSE(prompt_mode_from_name("socratic").has_value());
  CHECK_FALSE(prompt_mode_from_name("").has_value());
}

TEST_CASE("prompt strings are byte-exact") {
  const std::string closed =
      "Identify the species and count. Return ONLY in the format: Species; "
      "Count (example: Deer; 1). Allowed species: deer, rhino, elephant.";
  const std::string open =
      "Identify the species and count. Return ONLY in the format: Species; "
      "Count (example: Deer; 1).";
  const std::string habitat =
      "Describe the most important environmental context in this drone image. "
      "Return 4 lines only:\n"
      "Habitat/land cover:\n"
      "Key landscape features (e.g., river, road, forest edge, grassland).\n"
      "Human presence/disturbance (if any).\n"
      "Brief habitat-context interpretation (1 sentence).";
  CHECK(render_prompt(PromptMode::closed_set) == closed);
  CHECK(render_prompt(PromptMode::open_set) == open);
  CHECK(render_prompt(PromptMode::habitat) == habitat);
  // closed is open plus the allowed-species sentence, nothing else differs
  CHECK(render_prompt(PromptMode::closed_set) ==
        render_prompt(PromptMode::open_set) + " Allowed species: deer, rhino, elephant.");
}

TEST_CASE("parser accepts the documented exemplars") {
  Prediction p = parse_species_count("Deer; 1");
  REQUIRE(p.ok());
  CHECK(*p.species == "deer");
  CHECK(*p.count == 1);
  CHECK(p.raw_text == "Deer; 1");

  p = parse_species_count("Elephant; 2");
  REQUIRE(p.ok());
  CHECK(*p.species == "elephant");
  CHECK(*p.count == 2);

  p = parse_species_count("elephant;2.");
  REQUIRE(p.ok());
  CHECK(*p.species == "elephant");
  CHECK(*p.count == 2);

  p = parse_species_count("I see some animals");
  CHECK_FALSE(p.ok());
  CHECK_FALSE(p.species.has_value());
  CHECK_FALSE(p.count.has_value());
  CHECK(p.raw_text == "I see some animals");
}

TEST_CASE("parser normalizes case, plurals and synonyms") {
  struct Case {
    const char* raw;
    const char* species;
    long long count;
  };
  const Case good[] = {
      {"RHINO; 4", "rhino", 4},
      {"  rhinoceros ;12 ", "rhino", 12},
      {"Rhinoceroses; 3", "rhino", 3},
      {"deers; 2", "deer", 2},
      {"Elephants;11.", "elephant", 11},
      {"zebra; 5", "zebra", 5},  // open-set word kept verbatim, lowercased
      {"\t Deer\t;\t7\t", "deer", 7},
      {"deer; 0", "deer", 0},
      {"deer; 123456789012345678", "deer", 123456789012345678LL},
  };
  for (const auto& c : good) {
    CAPTURE(c.raw);
    const Prediction p = parse_species_count(c.raw);
    REQUIRE(p.ok());
    CHECK(*p.species == c.species);
    CHECK(*p.count == c.count);
  }
}

TEST_CASE("parser rejects everything outside the contract") {
  const char* bad[] = {
      "",
      "   ",
      "Deer",
      "Deer;",
      "Deer; ",
      "; 3",
      "Deer: 3",
      "Deer; -1",
      "Deer; 3 extra",
      "Deer; 3..",
      "Deer; 3.5",
      "Deer; three",
      "Deer 3",
      "Deer; 1234567890123456789",  // 19 digits: past the int64 guard
      "Deer; 3; 4",
      "42; deer",
      "Deer!; 3",
  };
  for (const char* raw : bad) {
    CAPTURE(raw);
    const Prediction p = parse_species_count(raw);
    CHECK_FALSE(p.ok());
    CHECK_FALSE(p.species.has_value());
    CHECK_FALSE(p.count.has_value());
    CHECK(p.raw_text == raw);
  }
}

TEST_CASE("parser is total over 10k fuzzed strings") {
  Rng rng(0xF0225EED);
  const std::string species_pool[] = {"Deer",  "deer",     "RHINO", "rhinoceros",
                                      "Eleph", "elephants", "x",     "Zebra"};
  int parsed_ok = 0;
  for (int t = 0; t < 10000; ++t) {
    std::string s;
    const int shape = static_cast<int>(rng.uniform_int(0, 3));
    const int len = static_cast<int>(rng.uniform_int(0, 40));
    if (shape == 0) {
      for (int i = 0; i < len; ++i)
        s.push_back(static_cast<char>(rng.uniform_int(0, 255)));
    } else if (shape == 1) {
      for (int i = 0; i < len; ++i)
        s.push_back(static_cast<char>(rng.uniform_int(32, 126)));
    } else {
      // start well-formed, then mutate a few bytes
      s = species_pool[rng.uniform_int(0, 7)];
      s += "; " + std::to_string(rng.uniform_int(0, 99));
      if (rng.uniform_int(0, 1)) s += ".";
      const int mutations = static_cast<int>(rng.uniform_int(0, 2));
      for (int mu = 0; mu < mutations && !s.empty(); ++mu) {
        const auto pos = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(s.size()) - 1));
        s[pos] = static_cast<char>(rng.uniform_int(0, 255));
      }
    }
    const Prediction p = parse_species_count(s);
    // total function: raw text preserved, species/count both set or both absent
    REQUIRE(p.raw_text == s);
    REQUIRE(p.species.has_value() == p.count.has_value());
    if (p.ok()) {
      ++parsed_ok;
      REQUIRE(*p.count >= 0);
      REQUIRE_FALSE(p.species->empty());
      // parsing is idempotent on its own raw text
      const Prediction again = parse_species_count(p.raw_text);
      REQUIRE(again.ok());
      REQUIRE(*again.species == *p.species);
      REQUIRE(*again.count == *p.count);
    }
  }
  CHECK(parsed_ok > 500);  // the mutated-well-formed arm must often survive
}

TEST_CASE("structured round-trip: generated well-formed strings always parse") {
  Rng rng(0x600D);
  const struct {
    const char* written;
    const char* canonical;
  } words[] = {{"deer", "deer"},         {"Deer", "deer"},       {"DEERS", "deer"},
               {"rhino", "rhino"},       {"Rhinos", "rhino"},    {"rhinoceros", "rhino"},
               {"RHINOCEROSES", "rhino"}, {"elephant", "elephant"}, {"Elephants", "elephant"}};
  const char* pads[] = {"", " ", "  ", "\t"};
  for (int t = 0; t < 2000; ++t) {
    const auto& w = words[rng.uniform_int(0, 8)];
    const long long count = rng.uniform_int(0, 1000000);
    std::string s = std::string(pads[rng.uniform_int(0, 3)]) + w.written +
                    pads[rng.uniform_int(0, 3)] + ";" + pads[rng.uniform_int(0, 3)] +
                    std::to_string(count);
    if (rng.uniform_int(0, 1)) s += ".";
    s += pads[rng.uniform_int(0, 3)];
    CAPTURE(s);
    const Prediction p = parse_species_count(s);
    REQUIRE(p.ok());
    REQUIRE(*p.species == w.canonical);
    REQUIRE(*p.count == count);
  }
}

TEST_CASE("worked confusion-matrix example") {
  // truth [deer,deer,rhino,elephant], preds [deer,rhino,rhino,deer]
  const std::vector<TruthPrediction> items = {
      tp("deer", 1, "Deer; 1"),
      tp("deer", 1, "Rhino; 1"),
      tp("rhino", 1, "Rhino; 1"),
      tp("elephant", 1, "Deer; 1"),
  };
  const RecognitionMetrics m = recognition_metrics(items);
  REQUIRE(m.per_species.size() == 3);
  const SpeciesPRF deer = m.per_species.at("deer");
  CHECK(deer.tp == 1);
  CHECK(deer.fp == 1);
  CHECK(deer.fn == 1);
  CHECK(deer.precision == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(deer.recall == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(deer.f1 == doctest::Approx(0.5).epsilon(1e-12));
  const SpeciesPRF rhino = m.per_species.at("rhino");
  CHECK(rhino.precision == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(rhino.recall == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rhino.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  const SpeciesPRF elephant = m.per_species.at("elephant");
  CHECK(elephant.precision == 0.0);
  CHECK(elephant.recall == 0.0);
  CHECK(elephant.f1 == 0.0);
  CHECK(m.macro_f1 == doctest::Approx((0.5 + 2.0 / 3.0) / 3.0).epsilon(1e-12));
  CHECK(m.n == 4);
}

TEST_CASE("recognition: perfect predictions and zero-division rule") {
  const std::vector<TruthPrediction> perfect = {
      tp("deer", 2, "Deer; 2"), tp("rhino", 1, "Rhino; 1"), tp("elephant", 3, "Elephant; 3")};
  const RecognitionMetrics m = recognition_metrics(perfect);
  for (const auto& [sp, prf] : m.per_species) {
    CAPTURE(sp);
    CHECK(prf.precision == 1.0);
    CHECK(prf.recall == 1.0);
    CHECK(prf.f1 == 1.0);
  }
  CHECK(m.macro_f1 == 1.0);

  // a class never predicted scores 0, not NaN
  const std::vector<TruthPrediction> never = {
      tp("deer", 2, "Rhino; 2"), tp("rhino", 1, "Rhino; 1")};
  const RecognitionMetrics z = recognition_metrics(never);
  CHECK(z.per_species.at("deer").precision == 0.0);
  CHECK(z.per_species.at("deer").recall == 0.0);
  CHECK(z.per_species.at("deer").f1 == 0.0);

  // an out-of-set prediction inflates nobody's false positives
  const std::vector<TruthPrediction> open = {
      tp("deer", 2, "Zebra; 2"), tp("deer", 1, "Deer; 1")};
  const RecognitionMetrics o = recognition_metrics(open);
  CHECK(o.per_species.size() == 1);
  CHECK(o.per_species.at("deer").tp == 1);
  CHECK(o.per_species.at("deer").fp == 0);
  CHECK(o.per_species.at("deer").fn == 1);

  CHECK_THROWS_AS(recognition_metrics({}), EmptyEvaluation);
}

TEST_CASE("worked enumeration example") {
  // deer true counts [3,5,2], predicted [3,4,6]
  const std::vector<TruthPrediction> items = {
      tp("deer", 3, "Deer; 3"), tp("deer", 5, "Deer; 4"), tp("deer", 2, "Deer; 6")};
  const EnumerationMetrics m = enumeration_metrics(items);
  const SpeciesEnumeration e = m.per_species.at("deer");
  CHECK(e.exact == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(e.within1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  REQUIRE(e.mae.has_value());
  CHECK(*e.mae == doctest::Approx(5.0 / 3.0).epsilon(1e-12));
  CHECK(e.unparseable_rate == 0.0);
  CHECK(e.n == 3);
}

TEST_CASE("enumeration: malformed handling and conditioning on truth") {
  // malformed fails exact/within-1, is excluded from MAE, shows in the rate
  const std::vector<TruthPrediction> items = {
      tp("deer", 3, "Deer; 3"), malformed("deer", 4), tp("deer", 10, "Deer; 9")};
  const EnumerationMetrics m = enumeration_metrics(items);
  const SpeciesEnumeration e = m.per_species.at("deer");
  CHECK(e.exact == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(e.within1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  REQUIRE(e.mae.has_value());
  CHECK(*e.mae == doctest::Approx(0.5).epsilon(1e-12));  // over the 2 parsed
  CHECK(e.unparseable_rate == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // counts are scored against the TRUE species even when the predicted
  // species is wrong
  const std::vector<TruthPrediction> crossed = {tp("deer", 7, "Rhino; 7")};
  const EnumerationMetrics c = enumeration_metrics(crossed);
  CHECK(c.per_species.at("deer").exact == 1.0);

  // a species whose responses were all malformed has no MAE at all
  const std::vector<TruthPrediction> dark = {malformed("rhino", 2), malformed("rhino", 5)};
  const EnumerationMetrics d = enumeration_metrics(dark);
  CHECK_FALSE(d.per_species.at("rhino").mae.has_value());
  CHECK(d.per_species.at("rhino").unparseable_rate == 1.0);
  CHECK(d.per_species.at("rhino").exact == 0.0);

  CHECK_THROWS_AS(enumeration_metrics({}), EmptyEvaluation);
}

TEST_CASE("metrics match brute-force oracles on 1000 random instances") {
  Rng rng(0x0c0de);
  const char* truths[] = {"deer", "rhino", "elephant"};
  const char* preds[] = {"deer", "rhino", "elephant", "zebra", "giraffe"};
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 50));
    std::vector<TruthPrediction> items;
    items.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      TruthPrediction it;
      it.species = truths[rng.uniform_int(0, 2)];
      it.count = static_cast<int>(rng.uniform_int(1, 12));
      if (rng.uniform_int(0, 3) != 0) {  // 25% malformed
        it.pred.species = preds[rng.uniform_int(0, 4)];
        it.pred.count = rng.uniform_int(0, 15);
      }
      items.push_back(std::move(it));
    }

    const RecognitionMetrics r = recognition_metrics(items);
    const RecognitionMetrics rn = naive_recognition(items);
    const EnumerationMetrics e = enumeration_metrics(items);
    const EnumerationMetrics en = naive_enumeration(items);
    CAPTURE(trial);
    REQUIRE(r.per_species.size() == rn.per_species.size());
    REQUIRE(std::abs(r.macro_f1 - rn.macro_f1) <= 1e-12);
    for (const auto& [sp, prf] : r.per_species) {
      const SpeciesPRF& o = rn.per_species.at(sp);
      REQUIRE(prf.tp == o.tp);
      REQUIRE(prf.fp == o.fp);
      REQUIRE(prf.fn == o.fn);
      REQUIRE(std::abs(prf.precision - o.precision) <= 1e-12);
      REQUIRE(std::abs(prf.recall - o.recall) <= 1e-12);
      REQUIRE(std::abs(prf.f1 - o.f1) <= 1e-12);
      // bounds
      REQUIRE((prf.precision >= 0.0 && prf.precision <= 1.0));
      REQUIRE((prf.recall >= 0.0 && prf.recall <= 1.0));
      REQUIRE((prf.f1 >= 0.0 && prf.f1 <= 1.0));
    }
    REQUIRE(e.per_species.size() == en.per_species.size());
    REQUIRE(std::abs(e.macro_exact - en.macro_exact) <= 1e-12);
    REQUIRE(std::abs(e.macro_within1 - en.macro_within1) <= 1e-12);
    for (const auto& [sp, se] : e.per_species) {
      const SpeciesEnumeration& o = en.per_species.at(sp);
      REQUIRE(se.n == o.n);
      REQUIRE(std::abs(se.exact - o.exact) <= 1e-12);
      REQUIRE(std::abs(se.within1 - o.within1) <= 1e-12);
      REQUIRE(std::abs(se.unparseable_rate - o.unparseable_rate) <= 1e-12);
      REQUIRE(se.mae.has_value() == o.mae.has_value());
      if (se.mae) REQUIRE(std::abs(*se.mae - *o.mae) <= 1e-12);
      REQUIRE(se.exact <= se.within1 + 1e-15);
      if (se.mae) REQUIRE(*se.mae >= 0.0);
    }

    // permutation invariance on a sample of trials
    if (trial % 10 == 0) {
      std::vector<TruthPrediction> shuffled = items;
      rng.shuffle(shuffled);
      const RecognitionMetrics r2 = recognition_metrics(shuffled);
      const EnumerationMetrics e2 = enumeration_metrics(shuffled);
      REQUIRE(r2.macro_f1 == r.macro_f1);
      REQUIRE(e2.macro_exact == e.macro_exact);
      REQUIRE(e2.macro_within1 == e.macro_within1);
      for (const auto& [sp, prf] : r.per_species) {
        REQUIRE(r2.per_species.at(sp).tp == prf.tp);
        REQUIRE(r2.per_species.at(sp).fp == prf.fp);
        REQUIRE(r2.per_species.at(sp).fn == prf.fn);
      }
    }
  }
}

TEST_CASE("habitat parser strips labels and enforces four lines") {
  const char* labeled =
      "Habitat/land cover: dense tropical rainforest with mixed canopy layers\n"
      "Key landscape features (e.g., river, road, forest edge, grassland): a river bend and a forest edge\n"
      "Human presence/disturbance (if any): none visible\n"
      "Brief habitat-context interpretation (1 sentence): Intact riparian forest with low disturbance.";
  const HabitatReport r = parse_habitat(labeled);
  CHECK(r.habitat_land_cover == "dense tropical rainforest with mixed canopy layers");
  CHECK(r.key_landscape_features == "a river bend and a forest edge");
  CHECK(r.human_presence == "none visible");
  CHECK(r.interpretation == "Intact riparian forest with low disturbance.");

  // unlabeled lines pass through untouched; blank lines are dropped
  const HabitatReport plain = parse_habitat(
      "\ngrassland\n\n  river crossing  \nno disturbance\nHealthy open savanna.\n\n");
  CHECK(plain.habitat_land_cover == "grassland");
  CHECK(plain.key_landscape_features == "river crossing");
  CHECK(plain.human_presence == "no disturbance");
  CHECK(plain.interpretation == "Healthy open savanna.");

  // labels match case-insensitively, with or without a colon
  const HabitatReport shouted = parse_habitat(
      "HABITAT/LAND COVER: wetland\nkey landscape features pond cluster\n"
      "Human presence/disturbance: road\nBrief habitat-context interpretation: Disturbed wetland.");
  CHECK(shouted.habitat_land_cover == "wetland");
  CHECK(shouted.key_landscape_features == "pond cluster");
  CHECK(shouted.human_presence == "road");
  CHECK(shouted.interpretation == "Disturbed wetland.");

  CHECK_THROWS_AS(parse_habitat("one\ntwo\nthree"), MalformedHabitat);
  CHECK_THROWS_AS(parse_habitat("1\n2\n3\n4\n5"), MalformedHabitat);
  CHECK_THROWS_AS(parse_habitat(""), MalformedHabitat);
  try {
    parse_habitat("only\nthree\nlines");
  } catch (const MalformedHabitat& ex) {
    CHECK(ex.observed_lines == 3);
  }
  try {
    parse_habitat("");
  } catch (const MalformedHabitat& ex) {
    CHECK(ex.observed_lines == 0);
  }
}

TEST_CASE("evaluate: perfect scripted backend reaches the oracle bound") {
  ScriptedBackend be;
  const std::vector<EvalItem> items = six_items();
  for (const auto& it : items) {
    std::string sp = it.species;
    sp[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(sp[0])));
    be.replies[it.image_id] = sp + "; " + std::to_string(it.count);
  }
  const EvaluationResult res = evaluate(be, items, PromptMode::closed_set, 1);
  CHECK(res.mode == PromptMode::closed_set);
  CHECK(res.n_items == 6);
  CHECK(res.backend_failures == 0);
  CHECK(res.recognition.macro_f1 == 1.0);
  CHECK(res.enumeration.macro_exact == 1.0);
  CHECK(res.enumeration.macro_within1 == 1.0);
  for (const auto& [sp, e] : res.enumeration.per_species) {
    REQUIRE(e.mae.has_value());
    CHECK(*e.mae == 0.0);
  }
  // responses come back sorted by image_id regardless of input order
  REQUIRE(res.responses.size() == 6);
  for (std::size_t i = 1; i < res.responses.size(); ++i)
    CHECK(res.responses[i - 1].image_id < res.responses[i].image_id);
  CHECK(res.responses.front().mode == std::string("closed"));
  CHECK(be.calls() == 6);
}

TEST_CASE("evaluate: constant answer gives closed-form metrics") {
  ScriptedBackend be;
  const std::vector<EvalItem> items = six_items();
  for (const auto& it : items) be.replies[it.image_id] = "Deer; 1";
  const EvaluationResult res = evaluate(be, items, PromptMode::open_set, 1);
  // recall(deer)=1, precision(deer)=share of deer in truth = 2/6
  CHECK(res.recognition.per_species.at("deer").recall == 1.0);
  CHECK(res.recognition.per_species.at("deer").precision ==
        doctest::Approx(2.0 / 6.0).epsilon(1e-12));
  CHECK(res.recognition.per_species.at("rhino").f1 == 0.0);
  CHECK(res.recognition.per_species.at("elephant").f1 == 0.0);
}

TEST_CASE("evaluate: a failing item is scored malformed, not fatal") {
  ScriptedBackend be;
  const std::vector<EvalItem> items = six_items();
  for (const auto& it : items) {
    std::string sp = it.species;
    sp[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(sp[0])));
    be.replies[it.image_id] = sp + "; " + std::to_string(it.count);
  }
  be.fail.insert("deer_0001");
  const EvaluationResult res = evaluate(be, items, PromptMode::closed_set, 1);
  CHECK(res.backend_failures == 1);
  const auto rec = std::find_if(res.responses.begin(), res.responses.end(),
                                [](const ResponseRecord& r) { return r.image_id == "deer_0001"; });
  REQUIRE(rec != res.responses.end());
  CHECK_FALSE(rec->backend_ok);
  CHECK(rec->error.find("scripted failure") != std::string::npos);
  CHECK_FALSE(rec->pred.ok());
  // deer lost one recall point, nothing else moved
  CHECK(res.recognition.per_species.at("deer").recall == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(res.recognition.per_species.at("rhino").f1 == 1.0);
}

TEST_CASE("evaluate: aborts past 50% failures, tolerates exactly half") {
  ScriptedBackend be;
  const std::vector<EvalItem> items = six_items();
  for (const auto& it : items) be.replies[it.image_id] = "Deer; 1";
  be.fail = {"deer_0001", "deer_0002", "rhino_0001"};
  CHECK_NOTHROW(evaluate(be, items, PromptMode::closed_set, 1));  // exactly half
  be.fail.insert("rhino_0002");
  CHECK_THROWS_AS(evaluate(be, items, PromptMode::closed_set, 1), EvaluationAborted);
}

TEST_CASE("evaluate: rejects empty input and the habitat mode") {
  ScriptedBackend be;
  CHECK_THROWS_AS(evaluate(be, {}, PromptMode::closed_set, 1), EmptyEvaluation);
  CHECK_THROWS_WITH_AS(evaluate(be, six_items(), PromptMode::habitat, 1),
                       doctest::Contains("habitat"), Error);
}

TEST_CASE("evaluate: results do not depend on the parallelism level") {
  const std::vector<EvalItem> items = six_items();
  auto run = [&](int parallelism) {
    ScriptedBackend be;
    for (const auto& it : items) be.replies[it.image_id] = "Rhino; 2";
    be.fail.insert("elephant_0002");
    return evaluate(be, items, PromptMode::open_set, parallelism);
  };
  const EvaluationResult a = run(1);
  const EvaluationResult b = run(3);
  REQUIRE(a.responses.size() == b.responses.size());
  for (std::size_t i = 0; i < a.responses.size(); ++i) {
    CHECK(a.responses[i].image_id == b.responses[i].image_id);
    CHECK(a.responses[i].backend_ok == b.responses[i].backend_ok);
    CHECK(a.responses[i].pred.raw_text == b.responses[i].pred.raw_text);
  }
  CHECK(a.recognition.macro_f1 == b.recognition.macro_f1);
  CHECK(a.enumeration.macro_within1 == b.enumeration.macro_within1);
  CHECK(a.backend_failures == b.backend_failures);
}

TEST_CASE("report tables: golden CSV rows and never-blank columns") {
  // the worked confusion example feeds the recognition table
  const std::vector<TruthPrediction> rec_items = {
      tp("deer", 1, "Deer; 1"),
      tp("deer", 1, "Rhino; 1"),
      tp("rhino", 1, "Rhino; 1"),
      tp("elephant", 1, "Deer; 1"),
  };
  EvaluationResult res;
  res.recognition = recognition_metrics(rec_items);
  // the worked enumeration example (deer only) feeds the enumeration table:
  // rhino and elephant columns must render as 0.000, never blank
  const std::vector<TruthPrediction> enum_items = {
      tp("deer", 3, "Deer; 3"), tp("deer", 5, "Deer; 4"), tp("deer", 2, "Deer; 6")};
  res.enumeration = enumeration_metrics(enum_items);

  const std::vector<LabeledResult> rows = {{"toy-vlm", "Open-Set", &res}};
  CHECK(recognition_table_csv(rows) ==
        "Model,Prompt,Precision,,,Recall,,,F1,,\n"
        ",,Deer,Rhino,Elephant,Deer,Rhino,Elephant,Deer,Rhino,Elephant\n"
        "toy-vlm,Open-Set,0.500,0.500,0.000,0.500,1.000,0.000,0.500,0.667,0.000\n");
  CHECK(enumeration_table_csv(rows) ==
        "Model,Prompt,Exact accuracy,,,Within-1 accuracy,,,MAE,,\n"
        ",,Deer,Rhino,Elephant,Deer,Rhino,Elephant,Deer,Rhino,Elephant\n"
        "toy-vlm,Open-Set,0.333,0.000,0.000,0.667,0.000,0.000,1.667,0.000,0.000\n");

  const std::string text = recognition_table_text(rows);
  CHECK(text.find("Model") != std::string::npos);
  CHECK(text.find("| Precision") != std::string::npos);
  CHECK(text.find("0.667") != std::string::npos);
  const std::string etext = enumeration_table_text(rows);
  CHECK(etext.find("Within-1 accuracy") != std::string::npos);
  CHECK(etext.find("1.667") != std::string::npos);
  // two labeled rows produce two data lines
  const std::vector<LabeledResult> two = {{"toy-vlm", "Closed-Set", &res},
                                          {"toy-vlm", "Open-Set", &res}};
  const std::string both = recognition_table_csv(two);
  CHECK(std::count(both.begin(), both.end(), '\n') == 4);
}
