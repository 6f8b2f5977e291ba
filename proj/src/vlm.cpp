#include "thermalign/vlm.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace thermalign {
namespace {

constexpr char kMagic[8] = {'T', 'A', 'L', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr double kInitStd = 0.02;

// Readable module label for the partition report, e.g. "Projector/MLP".
std::string module_label(const std::vector<std::string>& trainable_names) {
  bool enc = false, prj = false, lm = false;
  for (const auto& n : trainable_names) {
    if (n.rfind("encoder.", 0) == 0) enc = true;
    else if (n.rfind("projector.", 0) == 0) prj = true;
    else if (n.rfind("lm.", 0) == 0) lm = true;
  }
  std::string out;
  auto add = [&](const char* s) {
    if (!out.empty()) out += "+";
    out += s;
  };
  if (enc) add("Encoder");
  if (prj) add("Projector/MLP");
  if (lm) add("LM");
  if (out.empty()) out = "None";
  return out;
}

}  // namespace

std::vector<double> nll_from_logits(const Eigen::MatrixXd& logits,
                                    const std::vector<int>& targets, int first_row) {
  if (targets.empty()) throw EmptyTarget("no target tokens to score");
  if (first_row < 0 ||
      first_row + static_cast<int>(targets.size()) > static_cast<int>(logits.rows()))
    throw ShapeError("target rows fall outside the logits matrix");
  std::vector<double> nll;
  nll.reserve(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const int tok = targets[t];
    if (tok < 0 || tok >= static_cast<int>(logits.cols()))
      throw ShapeError("target token id out of vocabulary: " + std::to_string(tok));
    const auto row = logits.row(first_row + static_cast<int>(t));
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    nll.push_back(lse - row(tok));
  }
  return nll;
}

// ---------------------------------------------------------------- encoder

template <class S>
void VisionEncoder<S>::setup(const VLMConfig& cfg, Rng& rng) {
  patch = cfg.patch;
  d_v = cfg.d_v;
  const int in = 3 * patch * patch;
  patch_proj.setup("encoder.patch_proj", in, d_v, rng, kInitStd);
  const int max_patches = (cfg.img_h / patch) * (cfg.img_w / patch);
  pos.setup("encoder.pos", max_patches, d_v, false);
  pos.init_normal(rng, 0.01);
  blocks.resize(static_cast<std::size_t>(cfg.enc_blocks));
  for (int b = 0; b < cfg.enc_blocks; ++b)
    blocks[static_cast<std::size_t>(b)].setup("encoder.block" + std::to_string(b),
                                              d_v, cfg.heads, cfg.ff_mult * d_v,
                                              rng, kInitStd);
  lnf.setup("encoder.lnf", d_v);
}

template <class S>
Mat<S> VisionEncoder<S>::patchify(const AnyImage& img) const {
  const int h = img.height(), w = img.width();
  if (h % patch != 0 || w % patch != 0)
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible into " + std::to_string(patch) + "-pixel patches");
  const int ph = h / patch, pw = w / patch;
  const int n = ph * pw;
  if (n > static_cast<int>(pos.w.rows()))
    throw ShapeError("image yields " + std::to_string(n) +
                     " patches, positional table has " + std::to_string(pos.w.rows()));
  const Eigen::MatrixXd* chan[3];
  if (img.is_rgb) {
    chan[0] = &img.rgb.r;
    chan[1] = &img.rgb.g;
    chan[2] = &img.rgb.b;
  } else {
    chan[0] = &img.gray.v;
    chan[1] = &img.gray.v;
    chan[2] = &img.gray.v;
  }
  Mat<S> out(n, 3 * patch * patch);
  for (int pi = 0; pi < ph; ++pi) {
    for (int pj = 0; pj < pw; ++pj) {
      const int row = pi * pw + pj;
      int col = 0;
      for (int c = 0; c < 3; ++c)
        for (int di = 0; di < patch; ++di)
          for (int dj = 0; dj < patch; ++dj)
            out(row, col++) =
                static_cast<S>((*chan[c])(pi * patch + di, pj * patch + dj));
    }
  }
  return out;
}

template <class S>
Mat<S> VisionEncoder<S>::fwd(const AnyImage& img) {
  Mat<S> x = patchify(img);
  used_patches_ = static_cast<int>(x.rows());
  Mat<S> h = patch_proj.fwd(x);
  h += pos.w.topRows(used_patches_);
  for (auto& b : blocks) h = b.fwd(h);
  return lnf.fwd(h);
}

template <class S>
void VisionEncoder<S>::bwd(const Mat<S>& dfeat) {
  Mat<S> d = lnf.bwd(dfeat);
  for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) d = it->bwd(d);
  if (pos.trainable) pos.g.topRows(used_patches_) += d;
  patch_proj.bwd(d);
}

template <class S>
void VisionEncoder<S>::collect(std::vector<Tensor<S>*>& out) {
  patch_proj.collect(out);
  out.push_back(&pos);
  for (auto& b : blocks) b.collect(out);
  lnf.collect(out);
}

// -------------------------------------------------------------- projector

template <class S>
void Projector<S>::setup(const VLMConfig& cfg, Rng& rng) {
  fc1.setup("projector.fc1", cfg.d_v, cfg.d_h, rng, kInitStd);
  fc2.setup("projector.fc2", cfg.d_h, cfg.d_m, rng, kInitStd);
}

// ------------------------------------------------------------------- lm

template <class S>
void CausalLM<S>::setup(const VLMConfig& cfg, Rng& rng) {
  d_m = cfg.d_m;
  vocab_size = cfg.vocab_size;
  max_len = cfg.max_len;
  tok.setup("lm.tok_emb", vocab_size, d_m, false);
  tok.init_normal(rng, kInitStd);
  pos.setup("lm.pos_emb", max_len, d_m, false);
  pos.init_normal(rng, 0.01);
  blocks.resize(static_cast<std::size_t>(cfg.lm_blocks));
  for (int b = 0; b < cfg.lm_blocks; ++b)
    blocks[static_cast<std::size_t>(b)].setup("lm.block" + std::to_string(b), d_m,
                                              cfg.heads, cfg.ff_mult * d_m, rng,
                                              kInitStd);
  lnf.setup("lm.lnf", d_m);
  head.setup("lm.head", d_m, vocab_size, rng, kInitStd);
}

template <class S>
Mat<S> CausalLM<S>::fwd(const Mat<S>& visual, const std::vector<int>& ids) {
  const int P = static_cast<int>(visual.rows());
  const int T = P + static_cast<int>(ids.size());
  if (T > max_len)
    throw ShapeError("sequence length " + std::to_string(T) + " exceeds max_len " +
                     std::to_string(max_len));
  ids_ = ids;
  prefix_ = P;
  Mat<S> x(T, d_m);
  if (P > 0) x.topRows(P) = visual;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const int id = ids[t];
    if (id < 0 || id >= vocab_size)
      throw ShapeError("token id out of range: " + std::to_string(id));
    x.row(P + static_cast<int>(t)) = tok.w.row(id);
  }
  x += pos.w.topRows(T);
  for (auto& b : blocks) x = b.fwd(x);
  return head.fwd(lnf.fwd(x));
}

template <class S>
Mat<S> CausalLM<S>::bwd(const Mat<S>& dlogits) {
  Mat<S> d = lnf.bwd(head.bwd(dlogits));
  for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) d = it->bwd(d);
  if (pos.trainable) pos.g.topRows(d.rows()) += d;
  if (tok.trainable)
    for (std::size_t t = 0; t < ids_.size(); ++t)
      tok.g.row(ids_[t]) += d.row(prefix_ + static_cast<int>(t));
  return d.topRows(prefix_);
}

template <class S>
void CausalLM<S>::collect(std::vector<Tensor<S>*>& out) {
  out.push_back(&tok);
  out.push_back(&pos);
  for (auto& b : blocks) b.collect(out);
  lnf.collect(out);
  head.collect(out);
}

// ----------------------------------------------------------------- model

template <class S>
ToyVLM<S>::ToyVLM(const VLMConfig& config, Vocabulary v, std::uint64_t seed)
    : cfg(config), vocab(std::move(v)) {
  if (vocab.size() != cfg.vocab_size)
    throw ShapeError("vocabulary has " + std::to_string(vocab.size()) +
                     " tokens, config expects " + std::to_string(cfg.vocab_size));
  Rng rng(derive_seed(seed, 0x700d));
  enc.setup(cfg, rng);
  proj.setup(cfg, rng);
  lm.setup(cfg, rng);
}

template <class S>
std::vector<Tensor<S>*> ToyVLM<S>::params() {
  std::vector<Tensor<S>*> out;
  enc.collect(out);
  proj.collect(out);
  lm.collect(out);
  return out;
}

template <class S>
std::vector<const Tensor<S>*> ToyVLM<S>::params() const {
  auto mutable_params = const_cast<ToyVLM<S>*>(this)->params();
  return {mutable_params.begin(), mutable_params.end()};
}

template <class S>
std::vector<Tensor<S>*> ToyVLM<S>::trainable_params() {
  std::vector<Tensor<S>*> out;
  for (Tensor<S>* t : params())
    if (t->trainable) out.push_back(t);
  return out;
}

template <class S>
void ToyVLM<S>::zero_grad() {
  for (Tensor<S>* t : params()) t->zero_grad();
}

template <class S>
void ToyVLM<S>::set_all_trainable(bool trainable) {
  for (Tensor<S>* t : params()) t->trainable = trainable;
}

template <class S>
void ToyVLM<S>::set_projector_only_trainable() {
  for (Tensor<S>* t : params())
    t->trainable = t->name.rfind("projector.", 0) == 0;
}

template <class S>
void ToyVLM<S>::reinit_projector(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x9a07));
  proj.fc1.W.init_normal(rng, kInitStd);
  proj.fc1.b.w.setZero();
  proj.fc2.W.init_normal(rng, kInitStd);
  proj.fc2.b.w.setZero();
}

template <class S>
std::vector<int> ToyVLM<S>::prompt_ids(const std::string& user_text) const {
  std::vector<int> ids{vocab.bos()};
  for (int id : vocab.tokenize(user_text))
    if (id != vocab.img()) ids.push_back(id);
  return ids;
}

template <class S>
std::vector<int> ToyVLM<S>::target_ids(const std::string& assistant_text) const {
  std::vector<int> ids = vocab.tokenize(assistant_text);
  ids.push_back(vocab.eos());
  return ids;
}

template <class S>
Mat<S> ToyVLM<S>::forward_logits(const Mat<S>& z, const std::vector<int>& ids) {
  return lm.fwd(z, ids);
}

template <class S>
std::vector<double> ToyVLM<S>::sequence_loss_per_token(const Mat<S>& z,
                                                       const std::vector<int>& prompt,
                                                       const std::vector<int>& target) {
  if (target.empty()) throw EmptyTarget("no target tokens to score");
  std::vector<int> ids = prompt;
  ids.insert(ids.end(), target.begin(), target.end());
  const Mat<S> logits = lm.fwd(z, ids);
  const Eigen::MatrixXd logits_d = logits.template cast<double>();
  const int first = static_cast<int>(z.rows()) + static_cast<int>(prompt.size()) - 1;
  return nll_from_logits(logits_d, target, first);
}

template <class S>
double ToyVLM<S>::sequence_loss(const Mat<S>& z, const std::vector<int>& prompt,
                                const std::vector<int>& target) {
  const std::vector<double> nll = sequence_loss_per_token(z, prompt, target);
  double sum = 0;
  for (double v : nll) sum += v;
  return sum;
}

template <class S>
double ToyVLM<S>::loss_and_backward(const AnyImage& img, const std::vector<int>& prompt,
                                    const std::vector<int>& target, double grad_scale,
                                    bool through_encoder) {
  if (target.empty()) throw EmptyTarget("no target tokens to score");
  const Mat<S> feats = enc.fwd(img);
  const Mat<S> z = proj.fwd(feats);
  std::vector<int> ids = prompt;
  ids.insert(ids.end(), target.begin(), target.end());
  const Mat<S> logits = lm.fwd(z, ids);
  const Eigen::MatrixXd logits_d = logits.template cast<double>();
  const int first = static_cast<int>(z.rows()) + static_cast<int>(prompt.size()) - 1;

  double loss = 0;
  Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(logits.rows(), logits.cols());
  for (std::size_t t = 0; t < target.size(); ++t) {
    const int row = first + static_cast<int>(t);
    const auto lrow = logits_d.row(row);
    const double m = lrow.maxCoeff();
    Eigen::ArrayXd e = (lrow.array() - m).exp();
    const double sum = e.sum();
    loss += m + std::log(sum) - lrow(target[t]);
    Eigen::ArrayXd p = e / sum;
    p(target[t]) -= 1.0;
    dlogits.row(row) = (p * grad_scale).matrix().transpose();
  }

  const Mat<S> dz = lm.bwd(dlogits.cast<S>());
  const Mat<S> dfeat = proj.bwd(dz);
  if (through_encoder) enc.bwd(dfeat);
  return loss;
}

template <class S>
std::vector<int> ToyVLM<S>::generate(const Mat<S>& z, const std::vector<int>& prompt,
                                     int max_new) {
  std::vector<int> ids = prompt;
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    const Mat<S> logits = lm.fwd(z, ids);
    const auto last = logits.row(logits.rows() - 1);
    int best = 0;
    for (int j = 1; j < static_cast<int>(last.size()); ++j)
      if (last(j) > last(best)) best = j;
    if (best == vocab.eos()) break;
    out.push_back(best);
    ids.push_back(best);
  }
  return out;
}

template <class S>
std::string ToyVLM<S>::answer(const AnyImage& img, const std::string& user_text,
                              int max_new) {
  const Mat<S> z = proj.fwd(enc.fwd(img));
  const std::vector<int> ids = generate(z, prompt_ids(user_text), max_new);
  return vocab.detokenize(ids);
}

template <class S>
std::uint64_t parameter_count(const ToyVLM<S>& m) {
  std::uint64_t n = 0;
  for (const Tensor<S>* t : m.params()) n += t->count();
  return n;
}

template <class S>
std::map<std::string, std::string> weight_digests(ToyVLM<S>& m, bool frozen_only) {
  std::map<std::string, std::string> out;
  for (Tensor<S>* t : m.params()) {
    if (frozen_only && t->trainable) continue;
    out[t->name] = to_hex(t->digest());
  }
  return out;
}

template <class S>
PartitionReport parameter_partition(ToyVLM<S>& m) {
  PartitionReport r;
  std::vector<std::string> trainable_names;
  for (Tensor<S>* t : m.params()) {
    r.total_params += t->count();
    if (t->trainable) {
      r.trained_params += t->count();
      r.trained_tensors++;
      trainable_names.push_back(t->name);
    } else {
      r.frozen_tensors++;
    }
  }
  r.trained_pct = r.total_params == 0
                      ? 0.0
                      : 100.0 * static_cast<double>(r.trained_params) /
                            static_cast<double>(r.total_params);
  r.trainable_modules = module_label(trainable_names);
  return r;
}

std::string format_partition_row(const PartitionReport& r) {
  return format_thousands(r.trained_params) + " / " +
         format_double("%.3f%%", r.trained_pct) + " / " +
         std::to_string(r.trained_tensors) + " / " + std::to_string(r.frozen_tensors) +
         " / " + r.trainable_modules;
}

std::string format_partition_table(const PartitionReport& r) {
  std::string out =
      "Trained parameters | Trained (%) | Trained tensors | Frozen tensors | "
      "Trainable modules\n";
  out += format_thousands(r.trained_params) + " | " +
         format_double("%.3f%%", r.trained_pct) + " | " +
         std::to_string(r.trained_tensors) + " | " + std::to_string(r.frozen_tensors) +
         " | " + r.trainable_modules + "\n";
  return out;
}

// ------------------------------------------------------------ checkpoint

namespace {

template <class S>
const char* dtype_name() {
  return sizeof(S) == 4 ? "f32" : "f64";
}

}  // namespace

template <class S>
void save_checkpoint(const ToyVLM<S>& m, const std::string& path) {
  nlohmann::ordered_json header;
  header["dtype"] = dtype_name<S>();
  header["layout"] = "col-major";
  header["config"] = {{"vocab_size", m.cfg.vocab_size}, {"d_v", m.cfg.d_v},
                      {"d_h", m.cfg.d_h},               {"d_m", m.cfg.d_m},
                      {"patch", m.cfg.patch},           {"heads", m.cfg.heads},
                      {"enc_blocks", m.cfg.enc_blocks}, {"lm_blocks", m.cfg.lm_blocks},
                      {"ff_mult", m.cfg.ff_mult},       {"max_len", m.cfg.max_len},
                      {"img_h", m.cfg.img_h},           {"img_w", m.cfg.img_w}};
  header["vocab"] = {{"tokens", m.vocab.tokens()},
                     {"bos", m.vocab.bos()},
                     {"eos", m.vocab.eos()},
                     {"pad", m.vocab.pad()},
                     {"img", m.vocab.img()}};
  header["tensors"] = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  const auto params = m.params();
  for (const Tensor<S>* t : params) {
    const std::uint64_t bytes = sizeof(S) * t->count();
    header["tensors"].push_back({{"name", t->name},
                                 {"rows", t->w.rows()},
                                 {"cols", t->w.cols()},
                                 {"trainable", t->trainable},
                                 {"offset", offset},
                                 {"digest", to_hex(t->digest())}});
    offset += bytes;
  }
  header["data_bytes"] = offset;
  const std::string hjson = header.dump();

  const std::string tmp = path + ".tmp";
  std::ofstream out(tmp, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + tmp);
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t hlen = hjson.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hjson.data(), static_cast<std::streamsize>(hjson.size()));
  for (const Tensor<S>* t : params)
    out.write(reinterpret_cast<const char*>(t->w.data()),
              static_cast<std::streamsize>(sizeof(S) * t->count()));
  out.flush();
  if (!out) throw IoError("short write: " + tmp);
  out.close();
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path + " (" + ec.message() + ")");
}

template <class S>
ToyVLM<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("not a checkpoint file: " + path);
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) +
                  " in " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen == 0 || hlen > (1ull << 30)) throw IoError("corrupt header in " + path);
  std::string hjson(hlen, '\0');
  in.read(hjson.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("truncated header in " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hjson);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint header in " + path + ": " + e.what());
  }
  if (header.at("dtype").get<std::string>() != dtype_name<S>())
    throw IoError("checkpoint dtype " + header.at("dtype").get<std::string>() +
                  " does not match requested scalar " + dtype_name<S>());

  VLMConfig cfg;
  const auto& cj = header.at("config");
  cfg.vocab_size = cj.at("vocab_size").get<int>();
  cfg.d_v = cj.at("d_v").get<int>();
  cfg.d_h = cj.at("d_h").get<int>();
  cfg.d_m = cj.at("d_m").get<int>();
  cfg.patch = cj.at("patch").get<int>();
  cfg.heads = cj.at("heads").get<int>();
  cfg.enc_blocks = cj.at("enc_blocks").get<int>();
  cfg.lm_blocks = cj.at("lm_blocks").get<int>();
  cfg.ff_mult = cj.at("ff_mult").get<int>();
  cfg.max_len = cj.at("max_len").get<int>();
  cfg.img_h = cj.at("img_h").get<int>();
  cfg.img_w = cj.at("img_w").get<int>();

  const auto& vj = header.at("vocab");
  Vocabulary vocab(vj.at("tokens").get<std::vector<std::string>>(),
                   vj.at("bos").get<int>(), vj.at("eos").get<int>(),
                   vj.at("pad").get<int>(), vj.at("img").get<int>());

  ToyVLM<S> model(cfg, std::move(vocab), 0);
  std::map<std::string, Tensor<S>*> by_name;
  for (Tensor<S>* t : model.params()) by_name[t->name] = t;

  const auto& tensors = header.at("tensors");
  if (tensors.size() != by_name.size())
    throw IoError("checkpoint lists " + std::to_string(tensors.size()) +
                  " tensors, model has " + std::to_string(by_name.size()));
  for (const auto& tj : tensors) {
    const std::string name = tj.at("name").get<std::string>();
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("unknown tensor in checkpoint: " + name);
    Tensor<S>* t = it->second;
    const auto rows = tj.at("rows").get<Eigen::Index>();
    const auto cols = tj.at("cols").get<Eigen::Index>();
    if (rows != t->w.rows() || cols != t->w.cols())
      throw IoError("shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(t->w.data()),
            static_cast<std::streamsize>(sizeof(S) * t->count()));
    if (!in) throw IoError("truncated tensor data for " + name + " in " + path);
    t->trainable = tj.at("trainable").get<bool>();
    if (to_hex(t->digest()) != tj.at("digest").get<std::string>())
      throw IoError("digest mismatch for " + name + " in " + path +
                    " (corrupt checkpoint)");
  }
  return model;
}

template struct VisionEncoder<float>;
template struct VisionEncoder<double>;
template struct Projector<float>;
template struct Projector<double>;
template struct CausalLM<float>;
template struct CausalLM<double>;
template struct ToyVLM<float>;
template struct ToyVLM<double>;
template std::uint64_t parameter_count<float>(const ToyVLM<float>&);
template std::uint64_t parameter_count<double>(const ToyVLM<double>&);
template std::map<std::string, std::string> weight_digests<float>(ToyVLM<float>&, bool);
template std::map<std::string, std::string> weight_digests<double>(ToyVLM<double>&, bool);
template PartitionReport parameter_partition<float>(ToyVLM<float>&);
template PartitionReport parameter_partition<double>(ToyVLM<double>&);
template void save_checkpoint<float>(const ToyVLM<float>&, const std::string&);
template void save_checkpoint<double>(const ToyVLM<double>&, const std::string&);
template ToyVLM<float> load_checkpoint<float>(const std::string&);
template ToyVLM<double> load_checkpoint<double>(const std::string&);

}  // namespace thermalign
