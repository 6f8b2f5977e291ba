#include "thermalign/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <thread>

#include "json.hpp"
#include "thermalign/evalkit.hpp"

namespace fs = std::filesystem;

namespace thermalign {
namespace {

using njson = nlohmann::ordered_json;

void write_text_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + tmp.string());
    out << content;
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void require_artifact(const fs::path& p, const char* producing_stage) {
  if (!fs::exists(p))
    throw Error(p.string() + " not found; run the " + std::string(producing_stage) +
                " stage first");
}

void make_dirs(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory: " + p.string());
}

// Strict object reader: every key must be consumed by a get()/object() call,
// leftovers raise ConfigError naming the full path.
class Fields {
 public:
  Fields(const njson& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  const njson* find(const std::string& key) {
    seen_.push_back(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, std::string& out) {
    if (const njson* v = find(key)) {
      if (!v->is_string()) throw type_error(key, "a string");
      out = v->get<std::string>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (const njson* v = find(key)) {
      if (!v->is_boolean()) throw type_error(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, int& out) {
    if (const njson* v = find(key)) {
      if (!v->is_number_integer()) throw type_error(key, "an integer");
      out = v->get<int>();
    }
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (const njson* v = find(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() &&
                                      v->get<long long>() < 0))
        throw type_error(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const std::string& key, double& out) {
    if (const njson* v = find(key)) {
      if (!v->is_number()) throw type_error(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, std::vector<std::string>& out) {
    if (const njson* v = find(key)) {
      if (!v->is_array()) throw type_error(key, "an array of strings");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_string()) throw type_error(key, "an array of strings");
        out.push_back(e.get<std::string>());
      }
    }
  }
  void get(const std::string& key, SplitRatios& out) {
    if (const njson* v = find(key)) {
      if (!v->is_array() || v->size() != 3 || !(*v)[0].is_number() ||
          !(*v)[1].is_number() || !(*v)[2].is_number())
        throw type_error(key, "an array of 3 numbers");
      out.train = (*v)[0].get<double>();
      out.val = (*v)[1].get<double>();
      out.test = (*v)[2].get<double>();
    }
  }
  const njson* object(const std::string& key) {
    if (const njson* v = find(key)) {
      if (!v->is_object()) throw type_error(key, "an object");
      return v;
    }
    return nullptr;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
        throw ConfigError(path_ + "." + it.key() + ": unknown key");
  }

 private:
  ConfigError type_error(const std::string& key, const char* expected) const {
    return ConfigError(path_ + "." + key + ": expected " + expected);
  }

  const njson& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

ScenegenSection parse_scenegen(const njson& j, const std::string& path) {
  ScenegenSection s;
  Fields f(j, path);
  f.get("n_per_species", s.n_per_species);
  f.get("width", s.width);
  f.get("height", s.height);
  f.get("glyph_scale", s.glyph_scale);
  f.get("count_min", s.count_min);
  f.get("count_max", s.count_max);
  f.finish();
  return s;
}

DatasetSection parse_dataset(const njson& j, const std::string& path) {
  DatasetSection s;
  Fields f(j, path);
  f.get("balance", s.balance);
  f.get("split_order", s.split_order);
  f.get("ratios", s.ratios);
  f.get("prompt_mode", s.prompt_mode);
  f.finish();
  return s;
}

VLMConfig parse_model(const njson& j, const std::string& path) {
  VLMConfig m;
  Fields f(j, path);
  f.get("vocab_size", m.vocab_size);
  f.get("d_v", m.d_v);
  f.get("d_h", m.d_h);
  f.get("d_m", m.d_m);
  f.get("patch", m.patch);
  f.get("heads", m.heads);
  f.get("enc_blocks", m.enc_blocks);
  f.get("lm_blocks", m.lm_blocks);
  f.get("ff_mult", m.ff_mult);
  f.get("max_len", m.max_len);
  f.get("img_h", m.img_h);
  f.get("img_w", m.img_w);
  f.finish();
  return m;
}

PretrainSection parse_pretrain(const njson& j, const std::string& path) {
  PretrainSection s;
  Fields f(j, path);
  f.get("steps", s.steps);
  f.get("peak_lr", s.peak_lr);
  f.get("warmup_ratio", s.warmup_ratio);
  f.get("batch_size", s.batch_size);
  f.get("eval_interval", s.eval_interval);
  f.get("n_per_species", s.n_per_species);
  f.get("holdout_fraction", s.holdout_fraction);
  f.finish();
  return s;
}

AlignSection parse_align(const njson& j, const std::string& path) {
  AlignSection s;
  Fields f(j, path);
  f.get("peak_lr", s.peak_lr);
  f.get("warmup_ratio", s.warmup_ratio);
  f.get("max_steps", s.max_steps);
  f.get("batch_size", s.batch_size);
  f.get("eval_interval", s.eval_interval);
  f.get("weight_decay", s.weight_decay);
  f.get("reduced_precision", s.reduced_precision);
  f.finish();
  return s;
}

RemoteConfig parse_remote(const njson& j, const std::string& path) {
  RemoteConfig r;
  Fields f(j, path);
  f.get("base_url", r.base_url);
  f.get("model", r.model);
  f.get("auth_env", r.auth_env);
  f.get("timeout_seconds", r.timeout_seconds);
  f.get("max_retries", r.max_retries);
  f.get("max_parallel", r.max_parallel);
  f.get("backoff_base_seconds", r.backoff_base_seconds);
  f.get("jitter_seed", r.jitter_seed);
  f.finish();
  return r;
}

EvalSection parse_eval(const njson& j, const std::string& path) {
  EvalSection s;
  Fields f(j, path);
  f.get("backend", s.backend);
  f.get("modes", s.modes);
  f.get("parallelism", s.parallelism);
  f.get("max_new_tokens", s.max_new_tokens);
  f.get("habitat_max_new_tokens", s.habitat_max_new_tokens);
  if (const njson* r = f.object("remote")) s.remote = parse_remote(*r, path + ".remote");
  f.finish();
  return s;
}

// Per-stage RNG streams, all derived from the one global seed.
enum SeedStream : std::uint64_t {
  kCorpusStream = 1,
  kDatasetStream = 2,
  kPretrainCorpusStream = 3,
  kModelInitStream = 4,
  kPretrainLoopStream = 5,
  kProjectorReinitStream = 6,
  kAlignLoopStream = 7,
  kPretrainSplitStream = 8,
};

fs::path data_dir(const std::string& run_dir) { return fs::path(run_dir) / "data"; }
fs::path dataset_dir(const std::string& run_dir) { return fs::path(run_dir) / "dataset"; }
fs::path pretrain_dir(const std::string& run_dir) { return fs::path(run_dir) / "pretrain"; }
fs::path align_dir(const std::string& run_dir) { return fs::path(run_dir) / "align"; }
fs::path eval_dir(const std::string& run_dir) { return fs::path(run_dir) / "eval"; }

CorpusConfig corpus_config(const ScenegenSection& s, std::uint64_t seed, int n_per_species) {
  CorpusConfig c;
  c.seed = seed;
  for (Species sp : kAllSpecies) c.n_per_species[species_name(sp)] = n_per_species;
  c.width = s.width;
  c.height = s.height;
  c.glyph_scale = s.glyph_scale;
  c.count_min = s.count_min;
  c.count_max = s.count_max;
  return c;
}

TrainConfig align_train_config(const PipelineConfig& cfg) {
  TrainConfig t;
  t.peak_lr = cfg.align.peak_lr;
  t.warmup_ratio = cfg.align.warmup_ratio;
  t.max_steps = cfg.align.max_steps;
  t.batch_size = cfg.align.batch_size;
  t.eval_interval = cfg.align.eval_interval;
  t.seed = derive_seed(cfg.seed, kAlignLoopStream);
  t.weight_decay = cfg.align.weight_decay;
  t.reduced_precision = cfg.align.reduced_precision;
  t.threads = cfg.effective_threads();
  return t;
}

TrainConfig pretrain_train_config(const PipelineConfig& cfg) {
  TrainConfig t;
  t.peak_lr = cfg.pretrain.peak_lr;
  t.warmup_ratio = cfg.pretrain.warmup_ratio;
  t.max_steps = cfg.pretrain.steps;
  t.batch_size = cfg.pretrain.batch_size;
  t.eval_interval = cfg.pretrain.eval_interval;
  t.seed = derive_seed(cfg.seed, kPretrainLoopStream);
  t.threads = cfg.effective_threads();
  return t;
}

// Decode images and tokenize both sides of each conversation up front.
std::vector<TrainExample> to_examples(const ToyVLM<float>& model,
                                      const std::vector<ConversationExample>& convs,
                                      const fs::path& corpus_root, int threads) {
  std::vector<TrainExample> out(convs.size());
  parallel_for(convs.size(), threads, [&](std::size_t i) {
    const ConversationExample& c = convs[i];
    TrainExample& ex = out[i];
    ex.id = c.images.at(0);
    ex.image = read_png((corpus_root / c.images.at(0)).string());
    ex.prompt_ids = model.prompt_ids(c.user_text);
    ex.target_ids = model.target_ids(c.assistant_text);
  });
  return out;
}

std::string reference_answer(const CorpusRecord& rec) {
  const auto sp = species_from_name(rec.species);
  if (!sp) throw Error("unknown species in manifest: " + rec.species);
  return species_capitalized(*sp) + "; " + std::to_string(rec.count);
}

std::unique_ptr<Backend> make_backend(const PipelineConfig& cfg, const std::string& run_dir) {
  if (cfg.eval.backend == "remote") return std::make_unique<RemoteBackend>(cfg.eval.remote);
  const fs::path selected = align_dir(run_dir) / "selected.txt";
  require_artifact(selected, "align");
  const int step = std::stoi(read_text_file(selected));
  const fs::path ckpt =
      align_dir(run_dir) / "checkpoints" / ("step-" + std::to_string(step)) / "model.ckpt";
  require_artifact(ckpt, "align");
  return std::make_unique<LocalBackend>(ckpt.string());
}

std::vector<EvalItem> test_items(const Dataset& ds, const std::string& run_dir) {
  std::vector<EvalItem> items;
  items.reserve(ds.records.test.size());
  for (const AnnotationRecord& r : ds.records.test)
    items.push_back({r.image_id, (data_dir(run_dir) / r.image_path).string(),
                     (data_dir(run_dir) / r.rgb_path).string(), r.species, r.count});
  return items;
}

njson recognition_json(const RecognitionMetrics& m) {
  njson per = njson::object();
  for (const auto& [sp, v] : m.per_species)
    per[sp] = njson{{"precision", v.precision}, {"recall", v.recall},   {"f1", v.f1},
                    {"tp", v.tp},               {"fp", v.fp},           {"fn", v.fn}};
  return njson{{"macro_f1", m.macro_f1}, {"n", m.n}, {"per_species", per}};
}

njson enumeration_json(const EnumerationMetrics& m) {
  njson per = njson::object();
  for (const auto& [sp, v] : m.per_species) {
    njson e{{"exact", v.exact},
            {"within1", v.within1},
            {"mae", nullptr},
            {"unparseable_rate", v.unparseable_rate},
            {"n", v.n}};
    if (v.mae) e["mae"] = *v.mae;
    per[sp] = e;
  }
  return njson{{"macro_exact", m.macro_exact},
               {"macro_within1", m.macro_within1},
               {"n", m.n},
               {"per_species", per}};
}

RecognitionMetrics recognition_from_json(const njson& j) {
  RecognitionMetrics m;
  m.macro_f1 = j.at("macro_f1").get<double>();
  m.n = j.at("n").get<long long>();
  for (const auto& [sp, v] : j.at("per_species").items()) {
    SpeciesPRF p;
    p.precision = v.at("precision").get<double>();
    p.recall = v.at("recall").get<double>();
    p.f1 = v.at("f1").get<double>();
    p.tp = v.at("tp").get<long long>();
    p.fp = v.at("fp").get<long long>();
    p.fn = v.at("fn").get<long long>();
    m.per_species[sp] = p;
  }
  return m;
}

EnumerationMetrics enumeration_from_json(const njson& j) {
  EnumerationMetrics m;
  m.macro_exact = j.at("macro_exact").get<double>();
  m.macro_within1 = j.at("macro_within1").get<double>();
  m.n = j.at("n").get<long long>();
  for (const auto& [sp, v] : j.at("per_species").items()) {
    SpeciesEnumeration e;
    e.exact = v.at("exact").get<double>();
    e.within1 = v.at("within1").get<double>();
    if (!v.at("mae").is_null()) e.mae = v.at("mae").get<double>();
    e.unparseable_rate = v.at("unparseable_rate").get<double>();
    e.n = v.at("n").get<long long>();
    m.per_species[sp] = e;
  }
  return m;
}

std::string response_jsonl_line(const ResponseRecord& r) {
  njson j;
  j["image_id"] = r.image_id;
  j["mode"] = r.mode;
  j["backend_ok"] = r.backend_ok;
  j["error"] = r.error;
  j["raw_text"] = r.pred.raw_text;
  j["species"] = r.pred.species ? njson(*r.pred.species) : njson(nullptr);
  j["count"] = r.pred.count ? njson(*r.pred.count) : njson(nullptr);
  return j.dump() + "\n";
}

std::string prompt_label(const std::string& mode_name) {
  if (mode_name == "closed") return "Closed-Set";
  if (mode_name == "open") return "Open-Set";
  return mode_name;
}

// table2 = recognition, table3 = enumeration; one row per evaluated mode.
void write_tables(const fs::path& dir, const std::string& model_name,
                  const std::vector<std::pair<std::string, EvaluationResult>>& results) {
  std::vector<LabeledResult> rows;
  rows.reserve(results.size());
  for (const auto& [mode_name, result] : results)
    rows.push_back({model_name, prompt_label(mode_name), &result});
  write_text_atomic(dir / "table2.csv", recognition_table_csv(rows));
  write_text_atomic(dir / "table3.csv", enumeration_table_csv(rows));
  write_text_atomic(dir / "table2.txt", recognition_table_text(rows));
  write_text_atomic(dir / "table3.txt", enumeration_table_text(rows));
}

}  // namespace

int PipelineConfig::effective_threads() const {
  if (threads > 0) return threads;
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::min(4u, std::max(1u, hw)));
}

void PipelineConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("config." + what); };
  if (output_root.empty()) fail("output_root: must not be empty");
  if (threads < 0) fail("threads: must be >= 0");

  if (scenegen.n_per_species < 1) fail("scenegen.n_per_species: must be >= 1");
  if (scenegen.count_min < 1) fail("scenegen.count_min: must be >= 1");
  if (scenegen.count_max < scenegen.count_min)
    fail("scenegen.count_max: must be >= count_min");
  if (scenegen.glyph_scale < 4) fail("scenegen.glyph_scale: must be >= 4");
  if (2 * scenegen.glyph_scale >= std::min(scenegen.width, scenegen.height))
    fail("scenegen.glyph_scale: glyphs must fit the scene");

  if (dataset.split_order != "augment-first" && dataset.split_order != "split-first")
    fail("dataset.split_order: must be augment-first or split-first");
  if (dataset.prompt_mode != "mixed" && dataset.prompt_mode != "closed" &&
      dataset.prompt_mode != "open")
    fail("dataset.prompt_mode: must be mixed, closed or open");
  if (!(dataset.ratios.train > 0) || !(dataset.ratios.val > 0) || !(dataset.ratios.test > 0))
    fail("dataset.ratios: every ratio must be positive");
  if (std::abs(dataset.ratios.train + dataset.ratios.val + dataset.ratios.test - 1.0) > 1e-9)
    fail("dataset.ratios: must sum to 1");

  if (model.vocab_size < 1 || model.d_v < 1 || model.d_h < 1 || model.d_m < 1 ||
      model.patch < 1 || model.heads < 1 || model.enc_blocks < 1 || model.lm_blocks < 1 ||
      model.ff_mult < 1 || model.max_len < 1)
    fail("model: every dimension must be >= 1");
  if (model.d_m % model.heads != 0) fail("model.heads: must divide d_m");
  if (model.img_h % model.patch != 0 || model.img_w % model.patch != 0)
    fail("model.patch: must divide img_h and img_w");
  if (model.img_h != scenegen.height || model.img_w != scenegen.width)
    fail("model.img_h/img_w: must match the scene size");

  if (pretrain.steps < 1) fail("pretrain.steps: must be >= 1");
  if (pretrain.batch_size < 1) fail("pretrain.batch_size: must be >= 1");
  if (pretrain.eval_interval < 1) fail("pretrain.eval_interval: must be >= 1");
  if (pretrain.steps / pretrain.eval_interval < 2)
    fail("pretrain.eval_interval: need at least two evaluation points");
  if (!(pretrain.peak_lr > 0)) fail("pretrain.peak_lr: must be positive");
  if (pretrain.warmup_ratio < 0 || pretrain.warmup_ratio >= 1)
    fail("pretrain.warmup_ratio: must be in [0,1)");
  if (pretrain.n_per_species < 2) fail("pretrain.n_per_species: must be >= 2");
  if (!(pretrain.holdout_fraction > 0) || !(pretrain.holdout_fraction < 1))
    fail("pretrain.holdout_fraction: must be in (0,1)");

  if (align.max_steps < 1) fail("align.max_steps: must be >= 1");
  if (align.batch_size < 1) fail("align.batch_size: must be >= 1");
  if (align.eval_interval < 1) fail("align.eval_interval: must be >= 1");
  if (align.max_steps / align.eval_interval < 2)
    fail("align.eval_interval: need at least two evaluation points");
  if (!(align.peak_lr > 0)) fail("align.peak_lr: must be positive");
  if (align.warmup_ratio < 0 || align.warmup_ratio >= 1)
    fail("align.warmup_ratio: must be in [0,1)");

  if (eval.backend != "local" && eval.backend != "remote")
    fail("eval.backend: must be local or remote");
  if (eval.modes.empty()) fail("eval.modes: must not be empty");
  for (const std::string& m : eval.modes)
    if (m != "closed" && m != "open") fail("eval.modes: entries must be closed or open");
  if (eval.parallelism < 1) fail("eval.parallelism: must be >= 1");
  if (eval.max_new_tokens < 1) fail("eval.max_new_tokens: must be >= 1");
  if (eval.habitat_max_new_tokens < 1) fail("eval.habitat_max_new_tokens: must be >= 1");
  if (eval.backend == "remote" && eval.remote.base_url.empty())
    fail("eval.remote.base_url: required for the remote backend");
  if (!(eval.remote.timeout_seconds > 0)) fail("eval.remote.timeout_seconds: must be positive");
  if (eval.remote.max_retries < 0) fail("eval.remote.max_retries: must be >= 0");
  if (eval.remote.max_parallel < 1) fail("eval.remote.max_parallel: must be >= 1");
  if (eval.remote.backoff_base_seconds < 0)
    fail("eval.remote.backoff_base_seconds: must be >= 0");
}

PipelineConfig parse_pipeline_config(const std::string& json_text) {
  njson j;
  try {
    j = njson::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig c;
  Fields f(j, "config");
  f.get("output_root", c.output_root);
  f.get("seed", c.seed);
  f.get("threads", c.threads);
  if (const njson* s = f.object("scenegen")) c.scenegen = parse_scenegen(*s, "config.scenegen");
  if (const njson* s = f.object("dataset")) c.dataset = parse_dataset(*s, "config.dataset");
  if (const njson* s = f.object("model")) c.model = parse_model(*s, "config.model");
  if (const njson* s = f.object("pretrain")) c.pretrain = parse_pretrain(*s, "config.pretrain");
  if (const njson* s = f.object("align")) c.align = parse_align(*s, "config.align");
  if (const njson* s = f.object("eval")) c.eval = parse_eval(*s, "config.eval");
  f.finish();
  c.validate();
  return c;
}

std::string serialize_pipeline_config(const PipelineConfig& c) {
  njson j;
  j["output_root"] = c.output_root;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["scenegen"] = njson{{"n_per_species", c.scenegen.n_per_species},
                        {"width", c.scenegen.width},
                        {"height", c.scenegen.height},
                        {"glyph_scale", c.scenegen.glyph_scale},
                        {"count_min", c.scenegen.count_min},
                        {"count_max", c.scenegen.count_max}};
  j["dataset"] = njson{
      {"balance", c.dataset.balance},
      {"split_order", c.dataset.split_order},
      {"ratios", njson::array({c.dataset.ratios.train, c.dataset.ratios.val,
                               c.dataset.ratios.test})},
      {"prompt_mode", c.dataset.prompt_mode}};
  j["model"] = njson{{"vocab_size", c.model.vocab_size},
                     {"d_v", c.model.d_v},
                     {"d_h", c.model.d_h},
                     {"d_m", c.model.d_m},
                     {"patch", c.model.patch},
                     {"heads", c.model.heads},
                     {"enc_blocks", c.model.enc_blocks},
                     {"lm_blocks", c.model.lm_blocks},
                     {"ff_mult", c.model.ff_mult},
                     {"max_len", c.model.max_len},
                     {"img_h", c.model.img_h},
                     {"img_w", c.model.img_w}};
  j["pretrain"] = njson{{"steps", c.pretrain.steps},
                        {"peak_lr", c.pretrain.peak_lr},
                        {"warmup_ratio", c.pretrain.warmup_ratio},
                        {"batch_size", c.pretrain.batch_size},
                        {"eval_interval", c.pretrain.eval_interval},
                        {"n_per_species", c.pretrain.n_per_species},
                        {"holdout_fraction", c.pretrain.holdout_fraction}};
  j["align"] = njson{{"peak_lr", c.align.peak_lr},
                     {"warmup_ratio", c.align.warmup_ratio},
                     {"max_steps", c.align.max_steps},
                     {"batch_size", c.align.batch_size},
                     {"eval_interval", c.align.eval_interval},
                     {"weight_decay", c.align.weight_decay},
                     {"reduced_precision", c.align.reduced_precision}};
  j["eval"] = njson{{"backend", c.eval.backend},
                    {"modes", c.eval.modes},
                    {"parallelism", c.eval.parallelism},
                    {"max_new_tokens", c.eval.max_new_tokens},
                    {"habitat_max_new_tokens", c.eval.habitat_max_new_tokens},
                    {"remote", njson{{"base_url", c.eval.remote.base_url},
                                     {"model", c.eval.remote.model},
                                     {"auth_env", c.eval.remote.auth_env},
                                     {"timeout_seconds", c.eval.remote.timeout_seconds},
                                     {"max_retries", c.eval.remote.max_retries},
                                     {"max_parallel", c.eval.remote.max_parallel},
                                     {"backoff_base_seconds", c.eval.remote.backoff_base_seconds},
                                     {"jitter_seed", c.eval.remote.jitter_seed}}}};
  return j.dump(2) + "\n";
}

PipelineConfig load_pipeline_config(const std::string& path) {
  return parse_pipeline_config(read_text_file(path));
}

std::string prepare_run_dir(const PipelineConfig& cfg, const std::string& run_flag) {
  if (run_flag.empty()) return create_run_dir(cfg);
  make_dirs(run_flag);
  if (!fs::exists(fs::path(run_flag) / "config.json"))
    write_text_atomic(fs::path(run_flag) / "config.json", serialize_pipeline_config(cfg));
  return run_flag;
}

std::string create_run_dir(const PipelineConfig& cfg) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
  const fs::path runs = fs::path(cfg.output_root) / "runs";
  make_dirs(runs);
  const std::string base = std::string(stamp) + "-seed" + std::to_string(cfg.seed);
  fs::path dir = runs / base;
  for (int k = 2; fs::exists(dir); ++k) dir = runs / (base + "-" + std::to_string(k));
  make_dirs(dir);
  write_text_atomic(dir / "config.json", serialize_pipeline_config(cfg));
  return dir.string();
}

void stage_gen_data(const PipelineConfig& cfg, const std::string& run_dir) {
  const CorpusConfig cc = corpus_config(cfg.scenegen, derive_seed(cfg.seed, kCorpusStream),
                                        cfg.scenegen.n_per_species);
  const auto records = generate_corpus(cc, data_dir(run_dir).string());
  std::printf("[gen-data] %zu scenes (%d per species) -> %s\n", records.size(),
              cfg.scenegen.n_per_species, data_dir(run_dir).c_str());
}

void stage_build_dataset(const PipelineConfig& cfg, const std::string& run_dir) {
  require_artifact(data_dir(run_dir) / "manifest.json", "gen-data");
  const auto originals = records_from_corpus(load_corpus_manifest(data_dir(run_dir).string()));
  BuildOptions opts;
  opts.balance = cfg.dataset.balance;
  opts.split_order = cfg.dataset.split_order;
  opts.ratios = cfg.dataset.ratios;
  opts.prompt_mode = cfg.dataset.prompt_mode;
  opts.seed = derive_seed(cfg.seed, kDatasetStream);
  const Dataset ds = build_dataset(originals, opts, data_dir(run_dir).string());
  persist(ds, dataset_dir(run_dir).string());
  std::printf("[build-dataset] train/val/test = %zu/%zu/%zu (%s, %s prompts) -> %s\n",
              ds.train.size(), ds.val.size(), ds.test.size(),
              cfg.dataset.split_order.c_str(), cfg.dataset.prompt_mode.c_str(),
              dataset_dir(run_dir).c_str());
}

PretrainResult stage_pretrain(const PipelineConfig& cfg, const std::string& run_dir) {
  const fs::path dir = pretrain_dir(run_dir);
  make_dirs(dir);

  // RGB source corpus: same scene geometry, its own size and seed stream.
  const CorpusConfig cc =
      corpus_config(cfg.scenegen, derive_seed(cfg.seed, kPretrainCorpusStream),
                    cfg.pretrain.n_per_species);
  const auto records = generate_corpus(cc, (dir / "data").string());

  ToyVLM<float> model(cfg.model, Vocabulary::default_vocab(),
                      derive_seed(cfg.seed, kModelInitStream));

  std::vector<ConversationExample> convs;
  convs.reserve(records.size());
  for (const CorpusRecord& r : records) {
    const PromptMode mode =
        fnv1a64(r.image_id) & 1 ? PromptMode::open_set : PromptMode::closed_set;
    convs.push_back({{r.rgb_image}, "<image>\n" + render_prompt(mode), reference_answer(r)});
  }
  auto examples = to_examples(model, convs, dir / "data", cfg.effective_threads());

  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(derive_seed(cfg.seed, kPretrainSplitStream));
  split_rng.shuffle(order);
  const std::size_t n_holdout = std::max<std::size_t>(
      1, static_cast<std::size_t>(cfg.pretrain.holdout_fraction *
                                  static_cast<double>(examples.size())));
  std::vector<TrainExample> holdout, train;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_holdout ? holdout : train).push_back(std::move(examples[order[i]]));
  if (train.empty()) throw ConfigError("pretrain corpus too small for the holdout fraction");

  const PretrainResult result =
      pretrain_backbones(model, train, holdout, pretrain_train_config(cfg),
                         derive_seed(cfg.seed, kProjectorReinitStream), dir.string());
  save_checkpoint(model, (dir / "backbone.ckpt").string());

  njson m;
  m["steps"] = cfg.pretrain.steps;
  m["n_train"] = train.size();
  m["n_holdout"] = holdout.size();
  m["final_smoothed_loss"] = result.final_smoothed_loss;
  m["holdout_exact"] = result.holdout_exact;
  write_text_atomic(dir / "metrics.json", m.dump(2) + "\n");

  std::printf("[pretrain] %d steps, smoothed loss %.4f, holdout exact %.3f -> %s\n",
              cfg.pretrain.steps, result.final_smoothed_loss, result.holdout_exact,
              (dir / "backbone.ckpt").c_str());
  return result;
}

RunArtifacts stage_align(const PipelineConfig& cfg, const std::string& run_dir) {
  const fs::path backbone = pretrain_dir(run_dir) / "backbone.ckpt";
  require_artifact(backbone, "pretrain");
  require_artifact(dataset_dir(run_dir) / "manifest.json", "build-dataset");

  ToyVLM<float> model = load_checkpoint<float>(backbone.string());
  if (!(model.cfg == cfg.model))
    throw ConfigError("model dimensions in the config differ from the pretrained checkpoint");
  const Dataset ds = load_dataset(dataset_dir(run_dir).string());
  const int threads = cfg.effective_threads();
  const auto train = to_examples(model, ds.train, data_dir(run_dir), threads);
  const auto val = to_examples(model, ds.val, data_dir(run_dir), threads);

  const fs::path dir = align_dir(run_dir);
  make_dirs(dir);
  const RunArtifacts art = train_projector(model, train, val, align_train_config(cfg),
                                           dir.string());

  double selected_val_loss = 0;
  for (const CurvePoint& p : art.val_curve)
    if (p.step == art.selected_step) selected_val_loss = p.value;

  write_text_atomic(dir / "partition.txt", format_partition_table(art.partition));
  njson m;
  m["selected_step"] = art.selected_step;
  m["selected_val_loss"] = selected_val_loss;
  m["max_steps"] = cfg.align.max_steps;
  m["trained_params"] = art.partition.trained_params;
  m["total_params"] = art.partition.total_params;
  m["trained_pct"] = art.partition.trained_pct;
  m["trained_tensors"] = art.partition.trained_tensors;
  m["frozen_tensors"] = art.partition.frozen_tensors;
  m["trainable_modules"] = art.partition.trainable_modules;
  write_text_atomic(dir / "metrics.json", m.dump(2) + "\n");

  std::printf("[align] selected step %d of %d, val loss %.4f, trained %s params (%.3f%%)\n",
              art.selected_step, cfg.align.max_steps, selected_val_loss,
              format_thousands(art.partition.trained_params).c_str(),
              art.partition.trained_pct);
  return art;
}

void stage_eval(const PipelineConfig& cfg, const std::string& run_dir) {
  const auto backend = make_backend(cfg, run_dir);
  require_artifact(dataset_dir(run_dir) / "manifest.json", "build-dataset");
  const Dataset ds = load_dataset(dataset_dir(run_dir).string());
  const auto items = test_items(ds, run_dir);
  const int parallelism = std::min(cfg.eval.parallelism, backend->max_parallel());

  const fs::path dir = eval_dir(run_dir);
  make_dirs(dir);

  njson metrics;
  metrics["backend"] = backend->name();
  metrics["seed"] = cfg.seed;
  metrics["n_test"] = items.size();
  njson modes = njson::object();
  std::string responses_text;
  std::vector<std::pair<std::string, EvaluationResult>> results;
  std::string summary;
  for (const std::string& mode_name : cfg.eval.modes) {
    const PromptMode mode = *prompt_mode_from_name(mode_name);
    EvaluationResult r =
        evaluate(*backend, items, mode, parallelism, cfg.eval.max_new_tokens);
    njson mj;
    mj["n"] = r.n_items;
    mj["backend_failures"] = r.backend_failures;
    mj["recognition"] = recognition_json(r.recognition);
    mj["enumeration"] = enumeration_json(r.enumeration);
    modes[mode_name] = mj;
    for (const ResponseRecord& resp : r.responses)
      responses_text += response_jsonl_line(resp);
    summary += (summary.empty() ? "" : ", ") + mode_name +
               " F1 " + format_double("%.3f", r.recognition.macro_f1) + " within-1 " +
               format_double("%.3f", r.enumeration.macro_within1);
    results.emplace_back(mode_name, std::move(r));
  }
  metrics["modes"] = modes;
  write_text_atomic(dir / "metrics.json", metrics.dump(2) + "\n");
  write_text_atomic(dir / "responses.jsonl", responses_text);
  write_tables(dir, backend->name(), results);

  std::printf("[eval] %zu test images: %s -> %s\n", items.size(), summary.c_str(),
              (dir / "metrics.json").c_str());
}

void stage_report(const PipelineConfig&, const std::string& run_dir) {
  const fs::path metrics_path = eval_dir(run_dir) / "metrics.json";
  require_artifact(metrics_path, "eval");
  njson metrics;
  try {
    metrics = njson::parse(read_text_file(metrics_path));
  } catch (const nlohmann::json::exception& e) {
    throw Error("cannot parse " + metrics_path.string() + ": " + e.what());
  }

  std::vector<std::pair<std::string, EvaluationResult>> results;
  try {
    for (const auto& [mode_name, mj] : metrics.at("modes").items()) {
      EvaluationResult r;
      r.mode = prompt_mode_from_name(mode_name).value_or(PromptMode::open_set);
      r.n_items = mj.at("n").get<long long>();
      r.backend_failures = mj.at("backend_failures").get<long long>();
      r.recognition = recognition_from_json(mj.at("recognition"));
      r.enumeration = enumeration_from_json(mj.at("enumeration"));
      results.emplace_back(mode_name, std::move(r));
    }
    write_tables(eval_dir(run_dir), metrics.at("backend").get<std::string>(), results);
  } catch (const nlohmann::json::exception& e) {
    throw Error("unexpected metrics schema in " + metrics_path.string() + ": " + e.what());
  }

  const fs::path curves = align_dir(run_dir) / "curves";
  require_artifact(curves / "train.csv", "align");
  write_text_atomic(align_dir(run_dir) / "loss_curves.svg",
                    loss_curves_svg(read_curves_csv((curves / "train.csv").string()),
                                    read_curves_csv((curves / "val.csv").string())));

  std::printf("[report] wrote %s/{table2.csv,table3.csv} and %s/loss_curves.svg\n",
              eval_dir(run_dir).c_str(), align_dir(run_dir).c_str());
}

void stage_habitat(const PipelineConfig& cfg, const std::string& run_dir) {
  if (cfg.eval.backend != "remote")
    throw ConfigError("habitat descriptions need the remote backend (eval.backend = remote)");
  require_artifact(dataset_dir(run_dir) / "manifest.json", "build-dataset");
  const Dataset ds = load_dataset(dataset_dir(run_dir).string());
  auto items = test_items(ds, run_dir);
  std::sort(items.begin(), items.end(),
            [](const EvalItem& a, const EvalItem& b) { return a.image_id < b.image_id; });

  RemoteBackend backend(cfg.eval.remote);
  const int parallelism = std::min(cfg.eval.parallelism, backend.max_parallel());
  std::vector<InferenceRequest> requests;
  requests.reserve(items.size());
  for (const EvalItem& it : items)
    requests.push_back({it.image_id, it.rgb_path, render_prompt(PromptMode::habitat),
                        cfg.eval.habitat_max_new_tokens});
  const auto batch = batch_infer(backend, requests, parallelism);

  std::string lines;
  std::size_t parsed = 0, malformed = 0, failed = 0;
  for (const BatchItem& item : batch) {
    njson j;
    j["image_id"] = item.request_id;
    j["mode"] = "habitat";
    j["backend_ok"] = item.ok;
    j["error"] = item.error;
    j["raw_text"] = item.text;
    j["report"] = nullptr;
    j["malformed_lines"] = nullptr;
    if (!item.ok) {
      ++failed;
    } else {
      try {
        const HabitatReport r = parse_habitat(item.text);
        j["report"] = njson{{"habitat_land_cover", r.habitat_land_cover},
                            {"key_landscape_features", r.key_landscape_features},
                            {"human_presence", r.human_presence},
                            {"interpretation", r.interpretation}};
        ++parsed;
      } catch (const MalformedHabitat& e) {
        j["malformed_lines"] = e.observed_lines;
        ++malformed;
      }
    }
    lines += j.dump() + "\n";
  }
  const fs::path dir = fs::path(run_dir) / "habitat";
  make_dirs(dir);
  write_text_atomic(dir / "habitat.jsonl", lines);
  std::printf("[habitat] %zu images: %zu parsed, %zu malformed, %zu failed -> %s\n",
              items.size(), parsed, malformed, failed, (dir / "habitat.jsonl").c_str());
}

void stage_all(const PipelineConfig& cfg, const std::string& run_dir) {
  stage_gen_data(cfg, run_dir);
  stage_build_dataset(cfg, run_dir);
  stage_pretrain(cfg, run_dir);
  stage_align(cfg, run_dir);
  stage_eval(cfg, run_dir);
  stage_report(cfg, run_dir);
}

}  // namespace thermalign
