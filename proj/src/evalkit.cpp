#include "thermalign/evalkit.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <numeric>

#include "thermalign/backends.hpp"

namespace thermalign {
namespace {

constexpr std::array<const char*, 3> kCanonicalSpecies = {"deer", "rhino", "elephant"};

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v';
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

bool is_known_species(const std::string& s) {
  return std::find(kCanonicalSpecies.begin(), kCanonicalSpecies.end(), s) !=
         kCanonicalSpecies.end();
}

// lowercase word -> canonical species form, tolerating common aliases and a
// plural 's'. Unknown words pass through unchanged; recognition scoring
// treats them as a miss for whatever the true class was.
std::string canonical_species(const std::string& word_lower) {
  static const std::map<std::string, std::string> aliases = {
      {"rhinoceros", "rhino"}, {"rhinoceroses", "rhino"}, {"rhinos", "rhino"},
      {"deers", "deer"},       {"elephants", "elephant"}};
  const auto it = aliases.find(word_lower);
  if (it != aliases.end()) return it->second;
  if (!word_lower.empty() && word_lower.back() == 's') {
    const std::string singular = word_lower.substr(0, word_lower.size() - 1);
    if (is_known_species(singular)) return singular;
  }
  return word_lower;
}

double fraction(long long num, long long denom) {
  return denom == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(denom);
}

std::string fmt3(double v) { return format_double("%.3f", v); }

}  // namespace

const char* prompt_mode_name(PromptMode m) {
  switch (m) {
    case PromptMode::closed_set:
      return "closed";
    case PromptMode::open_set:
      return "open";
    default:
      return "habitat";
  }
}

std::optional<PromptMode> prompt_mode_from_name(const std::string& name) {
  if (name == "closed" || name == "closed_set" || name == "closed-set")
    return PromptMode::closed_set;
  if (name == "open" || name == "open_set" || name == "open-set")
    return PromptMode::open_set;
  if (name == "habitat") return PromptMode::habitat;
  return std::nullopt;
}

std::string render_prompt(PromptMode mode) {
  switch (mode) {
    case PromptMode::closed_set:
      return "Identify the species and count. Return ONLY in the format: "
             "Species; Count (example: Deer; 1). Allowed species: deer, rhino, "
             "elephant.";
    case PromptMode::open_set:
      return "Identify the species and count. Return ONLY in the format: "
             "Species; Count (example: Deer; 1).";
    default:
      return "Describe the most important environmental context in this drone "
             "image. Return 4 lines only:\n"
             "Habitat/land cover:\n"
             "Key landscape features (e.g., river, road, forest edge, "
             "grassland).\n"
             "Human presence/disturbance (if any).\n"
             "Brief habitat-context interpretation (1 sentence).";
  }
}

Prediction parse_species_count(std::string_view raw) {
  Prediction p;
  p.raw_text = std::string(raw);
  std::size_t i = 0;
  const std::size_t n = raw.size();
  auto skip_ws = [&] {
    while (i < n && is_space(raw[i])) ++i;
  };

  skip_ws();
  std::size_t w0 = i;
  while (i < n && std::isalpha(static_cast<unsigned char>(raw[i]))) ++i;
  if (i == w0) return p;  // no species word
  const std::string word(raw.substr(w0, i - w0));

  skip_ws();
  if (i >= n || raw[i] != ';') return p;
  ++i;
  skip_ws();

  std::size_t d0 = i;
  while (i < n && std::isdigit(static_cast<unsigned char>(raw[i]))) ++i;
  if (i == d0 || i - d0 > 18) return p;  // no digits, or beyond int64 range
  long long count = 0;
  for (std::size_t k = d0; k < i; ++k) count = count * 10 + (raw[k] - '0');

  if (i < n && raw[i] == '.') ++i;  // tolerated trailing period
  skip_ws();
  if (i != n) return p;  // trailing junk

  p.species = canonical_species(lower(word));
  p.count = count;
  return p;
}

RecognitionMetrics recognition_metrics(const std::vector<TruthPrediction>& items) {
  if (items.empty()) throw EmptyEvaluation("recognition_metrics: no items");
  RecognitionMetrics m;
  m.n = static_cast<long long>(items.size());
  for (const auto& it : items) m.per_species[it.species];  // key by truth only
  for (const auto& it : items) {
    const bool parsed = it.pred.ok();
    const std::string predicted = parsed ? *it.pred.species : std::string();
    if (parsed && predicted == it.species) {
      m.per_species[it.species].tp++;
    } else {
      m.per_species[it.species].fn++;
      // A parsed-but-wrong species is a false positive for that class, but
      // only if the class is one we track (i.e. appears among the truths).
      if (parsed) {
        auto fp_it = m.per_species.find(predicted);
        if (fp_it != m.per_species.end()) fp_it->second.fp++;
      }
    }
  }
  double f1_sum = 0;
  for (auto& [sp, prf] : m.per_species) {
    prf.precision = fraction(prf.tp, prf.tp + prf.fp);
    prf.recall = fraction(prf.tp, prf.tp + prf.fn);
    prf.f1 = (prf.precision + prf.recall) == 0
                 ? 0.0
                 : 2.0 * prf.precision * prf.recall / (prf.precision + prf.recall);
    f1_sum += prf.f1;
  }
  m.macro_f1 = f1_sum / static_cast<double>(m.per_species.size());
  return m;
}

EnumerationMetrics enumeration_metrics(const std::vector<TruthPrediction>& items) {
  if (items.empty()) throw EmptyEvaluation("enumeration_metrics: no items");
  EnumerationMetrics m;
  m.n = static_cast<long long>(items.size());
  struct Acc {
    long long n = 0, exact = 0, within1 = 0, parsed = 0;
    double abs_err = 0;
  };
  std::map<std::string, Acc> acc;
  for (const auto& it : items) {
    Acc& a = acc[it.species];
    a.n++;
    if (!it.pred.ok()) continue;  // malformed: fails exact/within-1, skips MAE
    a.parsed++;
    const long long diff = *it.pred.count - it.count;
    if (diff == 0) a.exact++;
    if (diff >= -1 && diff <= 1) a.within1++;
    a.abs_err += static_cast<double>(diff < 0 ? -diff : diff);
  }
  double exact_sum = 0, within1_sum = 0;
  for (const auto& [sp, a] : acc) {
    SpeciesEnumeration e;
    e.n = a.n;
    e.exact = fraction(a.exact, a.n);
    e.within1 = fraction(a.within1, a.n);
    e.unparseable_rate = fraction(a.n - a.parsed, a.n);
    if (a.parsed > 0) e.mae = a.abs_err / static_cast<double>(a.parsed);
    m.per_species[sp] = e;
    exact_sum += e.exact;
    within1_sum += e.within1;
  }
  m.macro_exact = exact_sum / static_cast<double>(m.per_species.size());
  m.macro_within1 = within1_sum / static_cast<double>(m.per_species.size());
  return m;
}

HabitatReport parse_habitat(std::string_view raw) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= raw.size()) {
    std::size_t end = raw.find('\n', start);
    if (end == std::string_view::npos) end = raw.size();
    const std::string line = trim(raw.substr(start, end - start));
    if (!line.empty()) lines.push_back(line);
    start = end + 1;
  }
  if (lines.size() != 4)
    throw MalformedHabitat("habitat response has " + std::to_string(lines.size()) +
                               " non-empty lines, expected 4",
                           static_cast<int>(lines.size()));

  static const std::array<const char*, 4> stems = {
      "habitat/land cover", "key landscape features", "human presence/disturbance",
      "brief habitat-context interpretation"};
  auto strip_label = [&](const std::string& line) {
    const std::string low = lower(line);
    for (const char* stem : stems) {
      const std::size_t len = std::string_view(stem).size();
      if (low.compare(0, len, stem) != 0) continue;
      const std::size_t colon = line.find(':', len);
      if (colon != std::string::npos) return trim(std::string_view(line).substr(colon + 1));
      return trim(std::string_view(line).substr(len));
    }
    return line;
  };

  HabitatReport r;
  r.habitat_land_cover = strip_label(lines[0]);
  r.key_landscape_features = strip_label(lines[1]);
  r.human_presence = strip_label(lines[2]);
  r.interpretation = strip_label(lines[3]);
  return r;
}

EvaluationResult evaluate(Backend& backend, const std::vector<EvalItem>& items,
                          PromptMode mode, int parallelism, int max_new_tokens) {
  if (items.empty()) throw EmptyEvaluation("evaluate: empty dataset split");
  if (mode == PromptMode::habitat)
    throw Error("evaluate() scores recognition prompts; run the habitat flow instead");

  const std::string prompt = render_prompt(mode);
  std::vector<InferenceRequest> requests;
  requests.reserve(items.size());
  for (const auto& it : items) {
    InferenceRequest req;
    req.request_id = it.image_id;
    req.image_path = it.thermal_path;
    req.prompt = prompt;
    req.max_new_tokens = max_new_tokens;
    requests.push_back(std::move(req));
  }
  const std::vector<BatchItem> raw = batch_infer(backend, requests, parallelism);

  // Aggregate in image_id order so results do not depend on scheduling.
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return items[a].image_id < items[b].image_id;
  });

  EvaluationResult result;
  result.mode = mode;
  result.n_items = static_cast<long long>(items.size());
  std::vector<TruthPrediction> scored;
  scored.reserve(items.size());
  for (std::size_t idx : order) {
    const EvalItem& item = items[idx];
    const BatchItem& b = raw[idx];
    ResponseRecord rec;
    rec.image_id = item.image_id;
    rec.mode = prompt_mode_name(mode);
    rec.backend_ok = b.ok;
    rec.error = b.error;
    rec.pred = b.ok ? parse_species_count(b.text) : Prediction{};
    if (!b.ok) result.backend_failures++;
    result.responses.push_back(rec);
    scored.push_back({item.species, item.count, rec.pred});
  }
  if (2 * result.backend_failures > result.n_items)
    throw EvaluationAborted("backend failed on " + std::to_string(result.backend_failures) +
                            " of " + std::to_string(result.n_items) + " items");

  result.recognition = recognition_metrics(scored);
  result.enumeration = enumeration_metrics(scored);
  return result;
}

namespace {

std::array<double, 9> recognition_values(const EvaluationResult& r) {
  std::array<double, 9> v{};
  for (int s = 0; s < 3; ++s) {
    const auto it = r.recognition.per_species.find(kCanonicalSpecies[static_cast<std::size_t>(s)]);
    const SpeciesPRF prf = it == r.recognition.per_species.end() ? SpeciesPRF{} : it->second;
    v[static_cast<std::size_t>(s)] = prf.precision;
    v[static_cast<std::size_t>(3 + s)] = prf.recall;
    v[static_cast<std::size_t>(6 + s)] = prf.f1;
  }
  return v;
}

std::array<double, 9> enumeration_values(const EvaluationResult& r) {
  std::array<double, 9> v{};
  for (int s = 0; s < 3; ++s) {
    const auto it = r.enumeration.per_species.find(kCanonicalSpecies[static_cast<std::size_t>(s)]);
    const SpeciesEnumeration e =
        it == r.enumeration.per_species.end() ? SpeciesEnumeration{} : it->second;
    v[static_cast<std::size_t>(s)] = e.exact;
    v[static_cast<std::size_t>(3 + s)] = e.within1;
    // Never-blank contract: an undefined MAE renders as 0.000.
    v[static_cast<std::size_t>(6 + s)] = e.mae.value_or(0.0);
  }
  return v;
}

std::string csv_table(const std::vector<LabeledResult>& rows,
                      const std::array<const char*, 3>& groups,
                      std::array<double, 9> (*extract)(const EvaluationResult&)) {
  std::string out = "Model,Prompt";
  for (const char* g : groups) out += std::string(",") + g + ",,";
  out += "\n,";
  for (int rep = 0; rep < 3; ++rep) out += ",Deer,Rhino,Elephant";
  out += "\n";
  for (const auto& row : rows) {
    out += row.model + "," + row.prompt_label;
    for (double v : extract(*row.result)) out += "," + fmt3(v);
    out += "\n";
  }
  return out;
}

std::string text_table(const std::vector<LabeledResult>& rows,
                       const std::array<const char*, 3>& groups,
                       std::array<double, 9> (*extract)(const EvaluationResult&)) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof(buf), "%-14s %-11s", "Model", "Prompt");
  out += buf;
  for (const char* g : groups) {
    std::snprintf(buf, sizeof(buf), " | %-23s", g);
    out += buf;
  }
  out += "\n";
  std::snprintf(buf, sizeof(buf), "%-14s %-11s", "", "");
  out += buf;
  for (int rep = 0; rep < 3; ++rep) {
    std::snprintf(buf, sizeof(buf), " | %7s %7s %7s", "Deer", "Rhino", "Eleph");
    out += buf;
  }
  out += "\n";
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%-14s %-11s", row.model.c_str(),
                  row.prompt_label.c_str());
    out += buf;
    const auto vals = extract(*row.result);
    for (int g = 0; g < 3; ++g) {
      std::snprintf(buf, sizeof(buf), " | %7.3f %7.3f %7.3f", vals[static_cast<std::size_t>(3 * g)],
                    vals[static_cast<std::size_t>(3 * g + 1)], vals[static_cast<std::size_t>(3 * g + 2)]);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace

std::string recognition_table_csv(const std::vector<LabeledResult>& rows) {
  return csv_table(rows, {"Precision", "Recall", "F1"}, recognition_values);
}

std::string enumeration_table_csv(const std::vector<LabeledResult>& rows) {
  return csv_table(rows, {"Exact accuracy", "Within-1 accuracy", "MAE"},
                   enumeration_values);
}

std::string recognition_table_text(const std::vector<LabeledResult>& rows) {
  return text_table(rows, {"Precision", "Recall", "F1"}, recognition_values);
}

std::string enumeration_table_text(const std::vector<LabeledResult>& rows) {
  return text_table(rows, {"Exact accuracy", "Within-1 accuracy", "MAE"},
                    enumeration_values);
}

}  // namespace thermalign
