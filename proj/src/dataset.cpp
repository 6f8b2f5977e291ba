#include "thermalign/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"

namespace fs = std::filesystem;

namespace thermalign {
namespace {

constexpr const char* kSpeciesOrder[] = {"deer", "rhino", "elephant"};

void check_rotation(int k) {
  if (k < 1 || k > 3)
    throw InvalidRotation("rotation must be 1, 2 or 3 quarter turns, got " +
                          std::to_string(k));
}

std::string cap_species(const std::string& s) {
  std::string out = s;
  if (!out.empty())
    out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out;
}

std::map<std::string, std::vector<AnnotationRecord>> by_species(
    const std::vector<AnnotationRecord>& records) {
  std::map<std::string, std::vector<AnnotationRecord>> groups;
  for (const auto& r : records) groups[r.species].push_back(r);
  return groups;
}

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

nlohmann::ordered_json record_json(const AnnotationRecord& r) {
  return {{"image_id", r.image_id},
          {"image_path", r.image_path},
          {"rgb_path", r.rgb_path},
          {"species", r.species},
          {"count", r.count},
          {"augmented_from", r.augmented_from},
          {"rotation_k", r.rotation_k}};
}

AnnotationRecord record_from_json(const nlohmann::json& j, const std::string& where) {
  try {
    AnnotationRecord r;
    r.image_id = j.at("image_id").get<std::string>();
    r.image_path = j.at("image_path").get<std::string>();
    r.rgb_path = j.at("rgb_path").get<std::string>();
    r.species = j.at("species").get<std::string>();
    r.count = j.at("count").get<int>();
    r.augmented_from = j.at("augmented_from").get<std::string>();
    r.rotation_k = j.at("rotation_k").get<int>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("bad annotation record at " + where + ": " + e.what());
  }
}

nlohmann::ordered_json conversation_json(const ConversationExample& ex) {
  return {{"images", ex.images},
          {"messages",
           {{{"role", "user"}, {"content", ex.user_text}},
            {{"role", "assistant"}, {"content", ex.assistant_text}}}}};
}

ConversationExample conversation_from_json(const nlohmann::json& j,
                                           const std::string& where) {
  try {
    ConversationExample ex;
    ex.images = j.at("images").get<std::vector<std::string>>();
    const auto& msgs = j.at("messages");
    if (msgs.size() != 2) throw SchemaError(where + ": expected 2 messages");
    if (msgs[0].at("role").get<std::string>() != "user" ||
        msgs[1].at("role").get<std::string>() != "assistant")
      throw SchemaError(where + ": expected user/assistant message pair");
    ex.user_text = msgs[0].at("content").get<std::string>();
    ex.assistant_text = msgs[1].at("content").get<std::string>();
    return ex;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("bad conversation at " + where + ": " + e.what());
  }
}

// Per-record prompt mode under the "mixed" policy: stable id hash, so the
// assignment survives reordering and re-splitting.
PromptMode mode_for_record(const AnnotationRecord& r, const std::string& prompt_mode) {
  if (prompt_mode == "closed") return PromptMode::closed_set;
  if (prompt_mode == "open") return PromptMode::open_set;
  return fnv1a64(r.image_id) & 1 ? PromptMode::open_set : PromptMode::closed_set;
}

std::vector<ConversationExample> render_split(const std::vector<AnnotationRecord>& records,
                                              const std::string& prompt_mode) {
  std::vector<ConversationExample> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(to_sharegpt(r, mode_for_record(r, prompt_mode)));
  return out;
}

std::vector<AnnotationRecord> balance_train_only(const std::vector<AnnotationRecord>& train,
                                                 std::uint64_t seed) {
  return balance_classes(train, seed);
}

int count_cross_split_siblings(const Splits& splits) {
  std::map<std::string, int> origin_split;  // image_id -> split index
  auto tag = [&](const std::vector<AnnotationRecord>& recs, int idx) {
    for (const auto& r : recs)
      if (r.augmented_from.empty()) origin_split[r.image_id] = idx;
  };
  tag(splits.train, 0);
  tag(splits.val, 1);
  tag(splits.test, 2);
  int leaks = 0;
  auto scan = [&](const std::vector<AnnotationRecord>& recs, int idx) {
    for (const auto& r : recs) {
      if (r.augmented_from.empty()) continue;
      const auto it = origin_split.find(r.augmented_from);
      if (it != origin_split.end() && it->second != idx) ++leaks;
    }
  };
  scan(splits.train, 0);
  scan(splits.val, 1);
  scan(splits.test, 2);
  return leaks;
}

std::map<std::string, int> species_histogram(const std::vector<AnnotationRecord>& recs) {
  std::map<std::string, int> h;
  for (const auto& r : recs) h[r.species]++;
  return h;
}

}  // namespace

GrayImage rotate_augment(const GrayImage& img, int k) {
  check_rotation(k);
  return rot90(img, k);
}

RgbImage rotate_augment(const RgbImage& img, int k) {
  check_rotation(k);
  return rot90(img, k);
}

std::vector<AnnotationRecord> balance_classes(const std::vector<AnnotationRecord>& records,
                                              std::uint64_t seed) {
  if (records.empty()) throw EmptyDataset("balance_classes: no records");
  auto groups = by_species(records);
  std::size_t target = 0;
  for (const auto& [sp, recs] : groups) target = std::max(target, recs.size());
  for (const auto& [sp, recs] : groups) {
    bool has_original = false;
    for (const auto& r : recs) has_original |= r.augmented_from.empty();
    if (!has_original)
      throw EmptyClass("species " + sp + " has no original records to augment from");
  }

  std::vector<AnnotationRecord> out = records;
  Rng rng(derive_seed(seed, 0xba1a));
  // Deterministic species order, not map order dependent on content.
  for (const char* sp : kSpeciesOrder) {
    const auto it = groups.find(sp);
    if (it == groups.end()) continue;
    std::vector<const AnnotationRecord*> originals;
    for (const auto& r : it->second)
      if (r.augmented_from.empty()) originals.push_back(&r);
    int aug_index = 0;
    for (std::size_t n = it->second.size(); n < target; ++n, ++aug_index) {
      const AnnotationRecord& src =
          *originals[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(originals.size()) - 1))];
      const int k = static_cast<int>(rng.uniform_int(1, 3));
      AnnotationRecord aug;
      char buf[96];
      std::snprintf(buf, sizeof(buf), "%s_aug%03d", src.image_id.c_str(), aug_index);
      aug.image_id = buf;
      aug.image_path = "aug/" + aug.image_id + ".png";
      aug.rgb_path = "aug/" + aug.image_id + "_rgb.png";
      aug.species = src.species;
      aug.count = src.count;  // rotation never changes the animal count
      aug.augmented_from = src.image_id;
      aug.rotation_k = k;
      out.push_back(std::move(aug));
    }
  }
  return out;
}

void materialize_augmented(const std::vector<AnnotationRecord>& records,
                           const std::string& corpus_root) {
  std::map<std::string, const AnnotationRecord*> by_id;
  for (const auto& r : records)
    if (r.augmented_from.empty()) by_id[r.image_id] = &r;

  bool made_dir = false;
  for (const auto& r : records) {
    if (r.augmented_from.empty()) continue;
    const fs::path thermal_out = fs::path(corpus_root) / r.image_path;
    const fs::path rgb_out = fs::path(corpus_root) / r.rgb_path;
    if (fs::exists(thermal_out) && fs::exists(rgb_out)) continue;
    if (!made_dir) {
      std::error_code ec;
      fs::create_directories(fs::path(corpus_root) / "aug", ec);
      if (ec) throw IoError("cannot create " + corpus_root + "/aug");
      made_dir = true;
    }
    const auto src = by_id.find(r.augmented_from);
    if (src == by_id.end())
      throw SchemaError("augmented record " + r.image_id + " points at missing source " +
                        r.augmented_from);
    const AnyImage thermal = read_png((fs::path(corpus_root) / src->second->image_path).string());
    const AnyImage rgb = read_png((fs::path(corpus_root) / src->second->rgb_path).string());
    write_png(thermal_out.string(), rotate_augment(thermal.gray, r.rotation_k));
    write_png(rgb_out.string(), rotate_augment(rgb.rgb, r.rotation_k));
  }
}

Splits split_dataset(const std::vector<AnnotationRecord>& records,
                     const SplitRatios& ratios, std::uint64_t seed) {
  if (records.empty()) throw EmptyDataset("split_dataset: no records");
  if (ratios.train <= 0 || ratios.val < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
    throw SchemaError("split ratios must be nonnegative and sum to 1");

  auto groups = by_species(records);
  Splits out;
  Rng rng(derive_seed(seed, 0x5411));
  for (const char* sp : kSpeciesOrder) {
    const auto it = groups.find(sp);
    if (it == groups.end()) continue;
    std::vector<AnnotationRecord>& recs = it->second;
    rng.shuffle(recs);
    const auto n = recs.size();
    const auto n_train = static_cast<std::size_t>(ratios.train * static_cast<double>(n));
    const auto n_val = static_cast<std::size_t>(ratios.val * static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      if (i < n_train)
        out.train.push_back(recs[i]);
      else if (i < n_train + n_val)
        out.val.push_back(recs[i]);
      else
        out.test.push_back(recs[i]);
    }
  }
  // Any species not in the canonical list would be silently dropped above;
  // reject instead so nothing vanishes.
  for (const auto& [sp, recs] : groups)
    if (std::find_if(std::begin(kSpeciesOrder), std::end(kSpeciesOrder),
                     [&](const char* s) { return sp == s; }) == std::end(kSpeciesOrder))
      throw SchemaError("unknown species in records: " + sp);
  return out;
}

ConversationExample to_sharegpt(const AnnotationRecord& record, PromptMode mode) {
  if (mode == PromptMode::habitat)
    throw Error("habitat prompts are not supervised conversations");
  ConversationExample ex;
  ex.images.push_back(record.image_path);
  ex.user_text = "<image>\n" + render_prompt(mode);
  ex.assistant_text = cap_species(record.species) + "; " + std::to_string(record.count);
  return ex;
}

std::vector<AnnotationRecord> records_from_corpus(const std::vector<CorpusRecord>& corpus) {
  std::vector<AnnotationRecord> out;
  out.reserve(corpus.size());
  for (const auto& c : corpus) {
    AnnotationRecord r;
    r.image_id = c.image_id;
    r.image_path = c.image;
    r.rgb_path = c.rgb_image;
    r.species = c.species;
    r.count = c.count;
    out.push_back(std::move(r));
  }
  return out;
}

Dataset build_dataset(const std::vector<AnnotationRecord>& originals,
                      const BuildOptions& options, const std::string& corpus_root) {
  if (originals.empty()) throw EmptyDataset("build_dataset: no records");
  if (options.split_order != "augment-first" && options.split_order != "split-first")
    throw SchemaError("split_order must be augment-first or split-first, got " +
                      options.split_order);
  if (options.prompt_mode != "mixed" && options.prompt_mode != "closed" &&
      options.prompt_mode != "open")
    throw SchemaError("prompt_mode must be mixed, closed or open, got " +
                      options.prompt_mode);

  Dataset ds;
  if (options.balance && options.split_order == "augment-first") {
    const auto balanced = balance_classes(originals, options.seed);
    materialize_augmented(balanced, corpus_root);
    ds.records = split_dataset(balanced, options.ratios, options.seed);
  } else if (options.balance) {  // split-first
    ds.records = split_dataset(originals, options.ratios, options.seed);
    ds.records.train = balance_train_only(ds.records.train, options.seed);
    materialize_augmented(ds.records.train, corpus_root);
  } else {
    ds.records = split_dataset(originals, options.ratios, options.seed);
  }

  ds.train = render_split(ds.records.train, options.prompt_mode);
  ds.val = render_split(ds.records.val, options.prompt_mode);
  ds.test = render_split(ds.records.test, options.prompt_mode);

  ds.manifest.seed = options.seed;
  ds.manifest.ratios = options.ratios;
  ds.manifest.split_order = options.split_order;
  ds.manifest.prompt_mode = options.prompt_mode;
  ds.manifest.balanced = options.balance;
  ds.manifest.per_species["train"] = species_histogram(ds.records.train);
  ds.manifest.per_species["val"] = species_histogram(ds.records.val);
  ds.manifest.per_species["test"] = species_histogram(ds.records.test);
  ds.manifest.cross_split_siblings = count_cross_split_siblings(ds.records);
  return ds;
}

void persist(const Dataset& ds, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir);

  auto dump_conversations = [&](const std::vector<ConversationExample>& exs,
                                const char* name) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& ex : exs) arr.push_back(conversation_json(ex));
    write_text_atomic(fs::path(dir) / name, arr.dump(2) + "\n");
  };
  dump_conversations(ds.train, "train.json");
  dump_conversations(ds.val, "val.json");
  dump_conversations(ds.test, "test.json");

  nlohmann::ordered_json records;
  auto dump_records = [&](const std::vector<AnnotationRecord>& recs) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : recs) arr.push_back(record_json(r));
    return arr;
  };
  records["train"] = dump_records(ds.records.train);
  records["val"] = dump_records(ds.records.val);
  records["test"] = dump_records(ds.records.test);
  write_text_atomic(fs::path(dir) / "records.json", records.dump(2) + "\n");

  nlohmann::ordered_json manifest;
  manifest["seed"] = ds.manifest.seed;
  manifest["ratios"] = {{"train", ds.manifest.ratios.train},
                        {"val", ds.manifest.ratios.val},
                        {"test", ds.manifest.ratios.test}};
  manifest["split_order"] = ds.manifest.split_order;
  manifest["prompt_mode"] = ds.manifest.prompt_mode;
  manifest["balanced"] = ds.manifest.balanced;
  manifest["per_species"] = ds.manifest.per_species;
  manifest["cross_split_siblings"] = ds.manifest.cross_split_siblings;
  manifest["sizes"] = {{"train", ds.records.train.size()},
                       {"val", ds.records.val.size()},
                       {"test", ds.records.test.size()}};
  write_text_atomic(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::string& dir) {
  auto parse_file = [&](const char* name) {
    std::ifstream in(fs::path(dir) / name);
    if (!in) throw IoError("cannot open " + (fs::path(dir) / name).string());
    try {
      nlohmann::json j;
      in >> j;
      return j;
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string(name) + ": " + e.what());
    }
  };

  Dataset ds;
  auto load_conversations = [&](const char* name) {
    const nlohmann::json j = parse_file(name);
    if (!j.is_array()) throw SchemaError(std::string(name) + ": expected an array");
    std::vector<ConversationExample> out;
    for (std::size_t i = 0; i < j.size(); ++i)
      out.push_back(conversation_from_json(j[i], std::string(name) + "[" + std::to_string(i) + "]"));
    return out;
  };
  ds.train = load_conversations("train.json");
  ds.val = load_conversations("val.json");
  ds.test = load_conversations("test.json");

  const nlohmann::json rj = parse_file("records.json");
  auto load_records = [&](const char* key) {
    std::vector<AnnotationRecord> out;
    const auto& arr = rj.at(key);
    for (std::size_t i = 0; i < arr.size(); ++i)
      out.push_back(record_from_json(arr[i], std::string("records.json/") + key + "[" +
                                                 std::to_string(i) + "]"));
    return out;
  };
  try {
    ds.records.train = load_records("train");
    ds.records.val = load_records("val");
    ds.records.test = load_records("test");
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("records.json: ") + e.what());
  }

  const nlohmann::json mj = parse_file("manifest.json");
  try {
    ds.manifest.seed = mj.at("seed").get<std::uint64_t>();
    ds.manifest.ratios.train = mj.at("ratios").at("train").get<double>();
    ds.manifest.ratios.val = mj.at("ratios").at("val").get<double>();
    ds.manifest.ratios.test = mj.at("ratios").at("test").get<double>();
    ds.manifest.split_order = mj.at("split_order").get<std::string>();
    ds.manifest.prompt_mode = mj.at("prompt_mode").get<std::string>();
    ds.manifest.balanced = mj.at("balanced").get<bool>();
    ds.manifest.per_species =
        mj.at("per_species").get<std::map<std::string, std::map<std::string, int>>>();
    ds.manifest.cross_split_siblings = mj.at("cross_split_siblings").get<int>();
    const auto& sizes = mj.at("sizes");
    if (sizes.at("train").get<std::size_t>() != ds.records.train.size() ||
        sizes.at("val").get<std::size_t>() != ds.records.val.size() ||
        sizes.at("test").get<std::size_t>() != ds.records.test.size())
      throw SchemaError("manifest sizes disagree with records.json");
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("manifest.json: ") + e.what());
  }
  if (ds.train.size() != ds.records.train.size() ||
      ds.val.size() != ds.records.val.size() || ds.test.size() != ds.records.test.size())
    throw SchemaError("conversation files disagree with records.json");
  return ds;
}

}  // namespace thermalign
