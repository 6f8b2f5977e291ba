#include "thermalign/train.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>

namespace fs = std::filesystem;

namespace thermalign {
namespace {

float bf16_round(float x) {
  std::uint32_t u;
  std::memcpy(&u, &x, sizeof(u));
  const std::uint32_t lsb = (u >> 16) & 1u;
  u += 0x7fffu + lsb;  // round to nearest even
  u &= 0xffff0000u;
  float y;
  std::memcpy(&y, &u, sizeof(y));
  return y;
}

// Round-robin worker pool over model replicas. Lane 0 is the caller's model;
// the remaining lanes are deep copies. Work item i always runs on lane
// i % lanes, so a given lane's examples are processed sequentially and the
// float accumulation order is fixed by (threads, batch) alone.
class Lanes {
 public:
  Lanes(ToyVLM<float>& master, int threads) : master_(master) {
    for (int i = 1; i < std::max(1, threads); ++i)
      clones_.push_back(std::make_unique<ToyVLM<float>>(master));
  }

  int count() const { return 1 + static_cast<int>(clones_.size()); }
  ToyVLM<float>& lane(int i) { return i == 0 ? master_ : *clones_[static_cast<std::size_t>(i) - 1]; }

  // Push the master's trainable weights to every clone (frozen weights never
  // change after construction).
  void sync() {
    if (clones_.empty()) return;
    const auto src = master_.trainable_params();
    for (auto& clone : clones_) {
      const auto dst = clone->trainable_params();
      for (std::size_t t = 0; t < src.size(); ++t) dst[t]->w = src[t]->w;
    }
  }

  // fn(lane_model, item_index) for every item, parallel across lanes.
  void run(std::size_t n_items, const std::function<void(ToyVLM<float>&, std::size_t)>& fn) {
    const int lanes = count();
    parallel_for(static_cast<std::size_t>(lanes), lanes, [&](std::size_t l) {
      for (std::size_t i = l; i < n_items; i += static_cast<std::size_t>(lanes))
        fn(lane(static_cast<int>(l)), i);
    });
  }

  // Add clone gradients into the master's trainable tensors, in lane order.
  void reduce_grads() {
    const auto dst = master_.trainable_params();
    for (auto& clone : clones_) {
      const auto src = clone->trainable_params();
      for (std::size_t t = 0; t < dst.size(); ++t) dst[t]->g += src[t]->g;
    }
  }

 private:
  ToyVLM<float>& master_;
  std::vector<std::unique_ptr<ToyVLM<float>>> clones_;
};

double per_token_loss(ToyVLM<float>& m, const TrainExample& ex) {
  const auto z = m.project(m.encode_image(ex.image));
  const double sum = m.sequence_loss(z, ex.prompt_ids, ex.target_ids);
  return sum / static_cast<double>(ex.target_ids.size());
}

double mean_split_loss(Lanes& lanes, const std::vector<TrainExample>& examples) {
  std::vector<double> losses(examples.size());
  lanes.run(examples.size(), [&](ToyVLM<float>& m, std::size_t i) {
    losses[i] = per_token_loss(m, examples[i]);
  });
  double sum = 0;
  for (double v : losses) sum += v;  // fixed order, independent of scheduling
  return sum / static_cast<double>(examples.size());
}

struct LoopResult {
  std::vector<CurvePoint> train_curve;
  std::vector<CurvePoint> val_curve;
};

LoopResult run_training_loop(ToyVLM<float>& model,
                             const std::vector<TrainExample>& train,
                             const std::vector<TrainExample>& val,
                             const TrainConfig& cfg, bool through_encoder,
                             bool save_ckpts, const std::string& run_dir) {
  cfg.validate();
  if (train.empty()) throw EmptyInput("no training examples");
  if (val.empty()) throw EmptyInput("no validation examples");
  if (save_ckpts && run_dir.empty())
    throw ConfigError("checkpointing requested without a run directory");

  Lanes lanes(model, cfg.threads);
  AdamW<float> opt(model.trainable_params(), cfg);
  Rng order_rng(derive_seed(cfg.seed, 0x5e9));
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  order_rng.shuffle(order);
  std::size_t cursor = 0;
  auto next_index = [&]() {
    if (cursor == order.size()) {
      order_rng.shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  };

  LoopResult result;
  std::vector<const TrainExample*> batch;
  std::vector<double> batch_losses;
  for (int step = 1; step <= cfg.max_steps; ++step) {
    batch.clear();
    for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(&train[next_index()]);

    lanes.sync();
    for (int l = 0; l < lanes.count(); ++l) lanes.lane(l).zero_grad();
    batch_losses.assign(batch.size(), 0.0);
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    lanes.run(batch.size(), [&](ToyVLM<float>& m, std::size_t i) {
      const TrainExample& ex = *batch[i];
      const double scale = inv_b / static_cast<double>(ex.target_ids.size());
      const double loss_sum =
          m.loss_and_backward(ex.image, ex.prompt_ids, ex.target_ids, scale, through_encoder);
      batch_losses[i] = loss_sum / static_cast<double>(ex.target_ids.size());
    });
    lanes.reduce_grads();

    double mean_loss = 0;
    for (double v : batch_losses) mean_loss += v;
    mean_loss *= inv_b;
    if (!std::isfinite(mean_loss))
      throw DivergenceError("non-finite training loss at step " + std::to_string(step));

    opt.step(lr_at(step, cfg));
    if (cfg.reduced_precision)
      for (Tensor<float>* t : model.trainable_params())
        t->w = t->w.unaryExpr([](float v) { return bf16_round(v); });

    result.train_curve.push_back({step, mean_loss});

    if (step % cfg.eval_interval == 0) {
      lanes.sync();
      const double val_loss = mean_split_loss(lanes, val);
      if (!std::isfinite(val_loss))
        throw DivergenceError("non-finite validation loss at step " + std::to_string(step));
      result.val_curve.push_back({step, val_loss});
      if (save_ckpts) {
        const fs::path dir = fs::path(run_dir) / "checkpoints" / ("step-" + std::to_string(step));
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create " + dir.string());
        save_checkpoint(model, (dir / "model.ckpt").string());
      }
    }
  }
  return result;
}

void write_text_file(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + tmp);
    out << content;
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path);
}

void write_run_files(const std::string& run_dir, const LoopResult& curves,
                     std::optional<int> selected_step) {
  std::error_code ec;
  fs::create_directories(fs::path(run_dir) / "curves", ec);
  if (ec) throw IoError("cannot create " + run_dir + "/curves");
  write_curves_csv((fs::path(run_dir) / "curves" / "train.csv").string(), curves.train_curve);
  write_curves_csv((fs::path(run_dir) / "curves" / "val.csv").string(), curves.val_curve);
  write_text_file((fs::path(run_dir) / "loss_curves.svg").string(),
                  loss_curves_svg(curves.train_curve, curves.val_curve));
  if (selected_step)
    write_text_file((fs::path(run_dir) / "selected.txt").string(),
                    std::to_string(*selected_step) + "\n");
}

}  // namespace

void TrainConfig::validate() const {
  if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
  if (max_steps / eval_interval < 2)
    throw ConfigError("need at least two evaluation points: max_steps/eval_interval = " +
                      std::to_string(max_steps / eval_interval));
  if (!(peak_lr > 0)) throw ConfigError("peak_lr must be positive");
  if (warmup_ratio < 0 || warmup_ratio >= 1)
    throw ConfigError("warmup_ratio must be in [0,1)");
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

double lr_at(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.max_steps)
    throw InvalidStep("step " + std::to_string(step) + " outside [0," +
                      std::to_string(cfg.max_steps) + "]");
  const int warmup = static_cast<int>(cfg.warmup_ratio * cfg.max_steps);
  if (warmup > 0 && step <= warmup)
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const int denom = std::max(1, cfg.max_steps - warmup);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(denom);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

std::vector<double> smooth(const std::vector<double>& values, double alpha) {
  if (values.empty()) throw EmptyInput("smooth: empty series");
  if (alpha < 0 || alpha >= 1) throw ConfigError("smoothing factor must be in [0,1)");
  std::vector<double> out;
  out.reserve(values.size());
  double s = values.front();
  out.push_back(s);
  for (std::size_t i = 1; i < values.size(); ++i) {
    s = alpha * s + (1.0 - alpha) * values[i];
    out.push_back(s);
  }
  return out;
}

int select_checkpoint(const std::vector<CurvePoint>& val_curve) {
  if (val_curve.empty()) throw EmptyInput("select_checkpoint: empty validation curve");
  const CurvePoint* best = &val_curve.front();
  for (const auto& p : val_curve)
    if (p.value < best->value) best = &p;  // strict: ties keep the earlier step
  return best->step;
}

RunArtifacts train_projector(ToyVLM<float>& model,
                             const std::vector<TrainExample>& train,
                             const std::vector<TrainExample>& val,
                             const TrainConfig& cfg, const std::string& run_dir) {
  model.set_projector_only_trainable();
  const auto frozen_before = weight_digests(model, /*frozen_only=*/true);

  const bool persist = !run_dir.empty();
  const LoopResult curves =
      run_training_loop(model, train, val, cfg, /*through_encoder=*/false,
                        /*save_ckpts=*/persist, run_dir);

  const auto frozen_after = weight_digests(model, /*frozen_only=*/true);
  for (const auto& [name, digest] : frozen_before) {
    const auto it = frozen_after.find(name);
    if (it == frozen_after.end() || it->second != digest)
      throw FreezeViolation("frozen tensor changed during alignment: " + name);
  }

  RunArtifacts art;
  art.train_curve = curves.train_curve;
  art.val_curve = curves.val_curve;
  art.selected_step = select_checkpoint(curves.val_curve);
  art.partition = parameter_partition(model);
  art.run_dir = run_dir;
  if (persist) {
    write_run_files(run_dir, curves, art.selected_step);
    art.selected_checkpoint = (fs::path(run_dir) / "checkpoints" /
                               ("step-" + std::to_string(art.selected_step)) / "model.ckpt")
                                  .string();
  }
  return art;
}

PretrainResult pretrain_backbones(ToyVLM<float>& model,
                                  const std::vector<TrainExample>& train,
                                  const std::vector<TrainExample>& holdout,
                                  const TrainConfig& cfg,
                                  std::uint64_t projector_seed,
                                  const std::string& run_dir) {
  model.set_all_trainable(true);
  const LoopResult curves =
      run_training_loop(model, train, holdout, cfg, /*through_encoder=*/true,
                        /*save_ckpts=*/false, run_dir);

  std::vector<double> values;
  values.reserve(curves.train_curve.size());
  for (const auto& p : curves.train_curve) values.push_back(p.value);
  const std::vector<double> trend = smooth(values, 0.98);
  if (trend.back() >= trend.front())
    throw PretrainDivergence("smoothed source loss did not improve: " +
                             format_double("%.4f", trend.front()) + " -> " +
                             format_double("%.4f", trend.back()));

  PretrainResult result;
  result.train_curve = curves.train_curve;
  result.val_curve = curves.val_curve;
  result.final_smoothed_loss = trend.back();
  result.holdout_exact = exact_match_rate(model, holdout, cfg.threads);

  // Source task learned: freeze the backbones, discard the source projector,
  // and hand back a model whose only free parameters are the fresh projector.
  model.set_projector_only_trainable();
  model.reinit_projector(projector_seed);

  if (!run_dir.empty()) write_run_files(run_dir, curves, std::nullopt);
  return result;
}

double eval_loss(ToyVLM<float>& model, const std::vector<TrainExample>& examples,
                 int threads) {
  if (examples.empty()) throw EmptyInput("eval_loss: no examples");
  Lanes lanes(model, threads);
  return mean_split_loss(lanes, examples);
}

double exact_match_rate(ToyVLM<float>& model,
                        const std::vector<TrainExample>& examples, int threads) {
  if (examples.empty()) throw EmptyInput("exact_match_rate: no examples");
  Lanes lanes(model, threads);
  std::vector<char> hit(examples.size(), 0);
  lanes.run(examples.size(), [&](ToyVLM<float>& m, std::size_t i) {
    const TrainExample& ex = examples[i];
    std::vector<int> want = ex.target_ids;
    if (!want.empty() && want.back() == m.vocab.eos()) want.pop_back();
    const auto z = m.project(m.encode_image(ex.image));
    const auto got = m.generate(z, ex.prompt_ids, static_cast<int>(want.size()) + 2);
    hit[i] = got == want ? 1 : 0;
  });
  long long n_hit = 0;
  for (char h : hit) n_hit += h;
  return static_cast<double>(n_hit) / static_cast<double>(examples.size());
}

void write_curves_csv(const std::string& path, const std::vector<CurvePoint>& curve) {
  std::string content = "step,value\n";
  for (const auto& p : curve)
    content += std::to_string(p.step) + "," + format_double("%.17g", p.value) + "\n";
  write_text_file(path, content);
}

std::vector<CurvePoint> read_curves_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<CurvePoint> curve;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw IoError("bad curve row in " + path + ": " + line);
    curve.push_back({std::stoi(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
  }
  return curve;
}

std::string loss_curves_svg(const std::vector<CurvePoint>& train_curve,
                            const std::vector<CurvePoint>& val_curve,
                            double smooth_alpha) {
  const double L = 64, R = 780, T = 24, B = 360;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  auto expand = [&](const std::vector<CurvePoint>& c) {
    for (const auto& p : c) {
      xmin = std::min(xmin, static_cast<double>(p.step));
      xmax = std::max(xmax, static_cast<double>(p.step));
      ymin = std::min(ymin, p.value);
      ymax = std::max(ymax, p.value);
    }
  };
  expand(train_curve);
  expand(val_curve);
  if (train_curve.empty() && val_curve.empty()) throw EmptyInput("no curves to plot");
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  auto X = [&](double s) { return L + (s - xmin) / (xmax - xmin) * (R - L); };
  auto Y = [&](double v) { return B - (v - ymin) / (ymax - ymin) * (B - T); };
  auto polyline = [&](const std::vector<CurvePoint>& c, const std::vector<double>* vals,
                      const char* color, double width, double opacity) {
    std::string pts;
    for (std::size_t i = 0; i < c.size(); ++i) {
      const double v = vals ? (*vals)[i] : c[i].value;
      pts += format_double("%.2f", X(c[i].step)) + "," + format_double("%.2f", Y(v)) + " ";
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "<polyline fill=\"none\" stroke=\"%s\" stroke-width=\"%.1f\" "
                  "stroke-opacity=\"%.2f\" points=\"",
                  color, width, opacity);
    return std::string(buf) + pts + "\"/>\n";
  };

  std::string svg =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 800 400\" "
        "font-family=\"sans-serif\" font-size=\"12\">\n"
        "<rect width=\"800\" height=\"400\" fill=\"white\"/>\n";
  svg += "<line x1=\"64\" y1=\"360\" x2=\"780\" y2=\"360\" stroke=\"#444\"/>\n";
  svg += "<line x1=\"64\" y1=\"24\" x2=\"64\" y2=\"360\" stroke=\"#444\"/>\n";
  svg += "<text x=\"420\" y=\"392\" text-anchor=\"middle\">step</text>\n";
  svg += "<text x=\"16\" y=\"196\" transform=\"rotate(-90 16 196)\" "
         "text-anchor=\"middle\">loss</text>\n";
  svg += "<text x=\"60\" y=\"372\" text-anchor=\"end\">" + format_double("%g", xmin) + "</text>\n";
  svg += "<text x=\"780\" y=\"372\" text-anchor=\"end\">" + format_double("%g", xmax) + "</text>\n";
  svg += "<text x=\"58\" y=\"364\" text-anchor=\"end\">" + format_double("%.3f", ymin) + "</text>\n";
  svg += "<text x=\"58\" y=\"32\" text-anchor=\"end\">" + format_double("%.3f", ymax) + "</text>\n";

  if (!train_curve.empty()) {
    svg += polyline(train_curve, nullptr, "steelblue", 1.0, 0.35);
    std::vector<double> values;
    values.reserve(train_curve.size());
    for (const auto& p : train_curve) values.push_back(p.value);
    const std::vector<double> trend = smooth(values, smooth_alpha);
    svg += polyline(train_curve, &trend, "darkorange", 2.0, 1.0);
  }
  if (!val_curve.empty()) svg += polyline(val_curve, nullptr, "seagreen", 2.0, 1.0);

  svg += "<rect x=\"640\" y=\"34\" width=\"132\" height=\"58\" fill=\"white\" "
         "stroke=\"#ccc\"/>\n";
  svg += "<line x1=\"648\" y1=\"48\" x2=\"672\" y2=\"48\" stroke=\"steelblue\" "
         "stroke-opacity=\"0.35\"/><text x=\"678\" y=\"52\">train (raw)</text>\n";
  svg += "<line x1=\"648\" y1=\"66\" x2=\"672\" y2=\"66\" stroke=\"darkorange\" "
         "stroke-width=\"2\"/><text x=\"678\" y=\"70\">train (smoothed)</text>\n";
  svg += "<line x1=\"648\" y1=\"84\" x2=\"672\" y2=\"84\" stroke=\"seagreen\" "
         "stroke-width=\"2\"/><text x=\"678\" y=\"88\">validation</text>\n";
  svg += "</svg>\n";
  return svg;
}

}  // namespace thermalign
