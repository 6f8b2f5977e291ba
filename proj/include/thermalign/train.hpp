#pragma once

#include <optional>
#include <string>
#include <vector>

#include "thermalign/vlm.hpp"

namespace thermalign {

struct InvalidStep : Error {
  using Error::Error;
};
struct EmptyInput : Error {
  using Error::Error;
};
struct DivergenceError : Error {
  using Error::Error;
};
struct FreezeViolation : Error {
  using Error::Error;
};
struct PretrainDivergence : Error {
  using Error::Error;
};

struct TrainConfig {
  double peak_lr = 1e-4;
  double warmup_ratio = 0.03;
  int max_steps = 1000;
  int batch_size = 16;
  int eval_interval = 100;
  std::uint64_t seed = 1;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool reduced_precision = false;  // round trainable weights to bf16 after updates
  int threads = 1;
  void validate() const;  // throws ConfigError
};

// Linear warmup for floor(warmup_ratio * max_steps) steps, then cosine decay
// to zero at max_steps. Defined on [0, max_steps]; anything else is
// InvalidStep.
double lr_at(int step, const TrainConfig& cfg);

// Exponential moving average with s_0 = x_0. alpha in [0,1).
std::vector<double> smooth(const std::vector<double>& values, double alpha);

struct CurvePoint {
  int step = 0;
  double value = 0;
};

// Step of the minimum validation loss; ties break toward the earlier step.
int select_checkpoint(const std::vector<CurvePoint>& val_curve);

// Decoupled weight decay Adam over the tensors handed in.
template <class S>
class AdamW {
 public:
  AdamW(std::vector<Tensor<S>*> params, const TrainConfig& cfg)
      : b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.adam_eps), wd_(cfg.weight_decay) {
    for (Tensor<S>* t : params)
      slots_.push_back({t, Mat<S>::Zero(t->w.rows(), t->w.cols()),
                        Mat<S>::Zero(t->w.rows(), t->w.cols())});
  }
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& s : slots_) {
      s.m = (s.m.array() * S(b1_) + s.t->g.array() * S(1.0 - b1_)).matrix();
      s.v = (s.v.array() * S(b2_) + s.t->g.array().square() * S(1.0 - b2_)).matrix();
      auto mhat = s.m.array() / S(bc1);
      auto vhat = s.v.array() / S(bc2);
      s.t->w.array() -=
          S(lr) * (mhat / (vhat.sqrt() + S(eps_)) + S(wd_) * s.t->w.array());
    }
  }

 private:
  struct Slot {
    Tensor<S>* t;
    Mat<S> m, v;
  };
  std::vector<Slot> slots_;
  double b1_, b2_, eps_, wd_;
  long t_ = 0;
};

// One supervised conversation, image decoded and text tokenized up front.
struct TrainExample {
  std::string id;
  AnyImage image;
  std::vector<int> prompt_ids;
  std::vector<int> target_ids;
};

struct RunArtifacts {
  std::vector<CurvePoint> train_curve;  // one point per optimizer step
  std::vector<CurvePoint> val_curve;    // one point per eval interval
  int selected_step = 0;
  PartitionReport partition;
  std::string run_dir;
  std::string selected_checkpoint;  // path of the chosen checkpoint file
};

// Projector-only alignment. Backbones are frozen on entry; their digests are
// recorded before the first step and re-verified after the last, and any
// drift raises FreezeViolation. Losses are per-token NLL averaged per
// example. Writes curves/, checkpoints/step-N/, selected.txt and
// loss_curves.svg under run_dir when run_dir is non-empty.
RunArtifacts train_projector(ToyVLM<float>& model,
                             const std::vector<TrainExample>& train,
                             const std::vector<TrainExample>& val,
                             const TrainConfig& cfg, const std::string& run_dir);

struct PretrainResult {
  std::vector<CurvePoint> train_curve;
  std::vector<CurvePoint> val_curve;
  double final_smoothed_loss = 0;
  double holdout_exact = 0;  // greedy decode == reference text, on holdout
};

// Joint supervised pretraining of encoder + LM (+ a throwaway projector) on
// the RGB source task. Afterwards the backbones are frozen and the projector
// is re-initialized from projector_seed, leaving the model ready for
// alignment. Raises PretrainDivergence when the smoothed train loss fails to
// improve end-over-start.
PretrainResult pretrain_backbones(ToyVLM<float>& model,
                                  const std::vector<TrainExample>& train,
                                  const std::vector<TrainExample>& holdout,
                                  const TrainConfig& cfg,
                                  std::uint64_t projector_seed,
                                  const std::string& run_dir);

// Mean per-example (per-token) NLL over a split; no gradients.
double eval_loss(ToyVLM<float>& model, const std::vector<TrainExample>& examples,
                 int threads);

// Fraction of examples whose greedy decode detokenizes exactly to the
// reference assistant text.
double exact_match_rate(ToyVLM<float>& model,
                        const std::vector<TrainExample>& examples, int threads);

void write_curves_csv(const std::string& path, const std::vector<CurvePoint>& curve);
std::vector<CurvePoint> read_curves_csv(const std::string& path);

// Two-series loss plot: raw per-step loss, its smoothed trend, and the
// validation curve when present.
std::string loss_curves_svg(const std::vector<CurvePoint>& train_curve,
                            const std::vector<CurvePoint>& val_curve,
                            double smooth_alpha = 0.98);

}  // namespace thermalign
