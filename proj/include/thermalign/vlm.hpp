#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "thermalign/image.hpp"
#include "thermalign/nn.hpp"
#include "thermalign/vocab.hpp"

namespace thermalign {

struct EmptyTarget : Error {
  using Error::Error;
};

struct VLMConfig {
  int vocab_size = 64;
  int d_v = 64;    // vision feature width
  int d_h = 128;   // projector hidden width
  int d_m = 128;   // language model width
  int patch = 8;
  int heads = 4;
  int enc_blocks = 1;
  int lm_blocks = 2;
  int ff_mult = 4;
  int max_len = 192;
  int img_h = 64;  // sizes the vision positional table
  int img_w = 64;
  bool operator==(const VLMConfig&) const = default;
};

// Numerically stable per-token negative log-likelihoods, computed in double
// regardless of the model scalar. logits row (first_row + t) scores target t.
std::vector<double> nll_from_logits(const Eigen::MatrixXd& logits,
                                    const std::vector<int>& targets, int first_row);

template <class S>
struct VisionEncoder {
  int patch = 8, d_v = 64;
  Linear<S> patch_proj;
  Tensor<S> pos;
  std::vector<Block<S>> blocks;
  LayerNorm<S> lnf;
  int used_patches_ = 0;

  void setup(const VLMConfig& cfg, Rng& rng);
  // Patch rows are channel-major (all red, then green, then blue), each
  // channel scanned row-major. Grayscale images are replicated across
  // channels so thermal frames reuse the RGB patch projection.
  Mat<S> patchify(const AnyImage& img) const;
  Mat<S> fwd(const AnyImage& img);
  void bwd(const Mat<S>& dfeat);
  void collect(std::vector<Tensor<S>*>& out);
};

template <class S>
struct Projector {
  Linear<S> fc1, fc2;
  Gelu<S> act;

  void setup(const VLMConfig& cfg, Rng& rng);
  Mat<S> fwd(const Mat<S>& feats) { return fc2.fwd(act.fwd(fc1.fwd(feats))); }
  Mat<S> bwd(const Mat<S>& dz) { return fc1.bwd(act.bwd(fc2.bwd(dz))); }
  void collect(std::vector<Tensor<S>*>& out) {
    fc1.collect(out);
    fc2.collect(out);
  }
};

template <class S>
struct CausalLM {
  int d_m = 128, vocab_size = 64, max_len = 192;
  Tensor<S> tok, pos;
  std::vector<Block<S>> blocks;
  LayerNorm<S> lnf;
  Linear<S> head;
  std::vector<int> ids_;
  int prefix_ = 0;

  void setup(const VLMConfig& cfg, Rng& rng);
  // Visual embeddings occupy the first rows, token embeddings follow; one
  // shared positional table covers the concatenated sequence.
  Mat<S> fwd(const Mat<S>& visual, const std::vector<int>& ids);
  // Returns the gradient w.r.t. the visual embeddings.
  Mat<S> bwd(const Mat<S>& dlogits);
  void collect(std::vector<Tensor<S>*>& out);
};

// Frozen-backbone vision-language model: encoder and LM are trained once on
// the RGB source task and then held fixed; only the projector adapts to the
// thermal domain.
template <class S>
struct ToyVLM {
  VLMConfig cfg;
  Vocabulary vocab;
  VisionEncoder<S> enc;
  Projector<S> proj;
  CausalLM<S> lm;

  ToyVLM(const VLMConfig& config, Vocabulary v, std::uint64_t seed);

  std::vector<Tensor<S>*> params();
  std::vector<const Tensor<S>*> params() const;
  std::vector<Tensor<S>*> trainable_params();
  void zero_grad();
  void set_all_trainable(bool trainable);
  // Freezes encoder + LM, marks the projector trainable.
  void set_projector_only_trainable();
  void reinit_projector(std::uint64_t seed);

  Mat<S> encode_image(const AnyImage& img) { return enc.fwd(img); }
  Mat<S> project(const Mat<S>& feats) { return proj.fwd(feats); }

  // [<bos>] + text tokens; <image> markers in the text are dropped because
  // the projected patch embeddings already occupy the visual slots.
  std::vector<int> prompt_ids(const std::string& user_text) const;
  // assistant text tokens + <eos>
  std::vector<int> target_ids(const std::string& assistant_text) const;

  Mat<S> forward_logits(const Mat<S>& z, const std::vector<int>& ids);

  // Token-level autoregressive NLL of the target continuation given the
  // visual prefix and prompt: -sum_t log P(w_t | w_<t, z). Prompt positions
  // are context only; nothing is scored there.
  double sequence_loss(const Mat<S>& z, const std::vector<int>& prompt,
                       const std::vector<int>& target);
  std::vector<double> sequence_loss_per_token(const Mat<S>& z,
                                              const std::vector<int>& prompt,
                                              const std::vector<int>& target);

  // Full forward + backward from the image. Gradients are scaled by
  // grad_scale and accumulated into .g; returns the unscaled loss sum.
  // through_encoder extends the backward pass into the vision encoder, which
  // only matters when the backbones themselves are being trained.
  double loss_and_backward(const AnyImage& img, const std::vector<int>& prompt,
                           const std::vector<int>& target, double grad_scale,
                           bool through_encoder);

  // Greedy decoding; stops at <eos> or max_new tokens. Ties break toward the
  // lowest token id. Returns only the generated continuation, <eos> excluded.
  std::vector<int> generate(const Mat<S>& z, const std::vector<int>& prompt,
                            int max_new);
  // Convenience: image + raw user text -> detokenized continuation.
  std::string answer(const AnyImage& img, const std::string& user_text, int max_new);
};

template <class S>
std::uint64_t parameter_count(const ToyVLM<S>& m);

// name -> hex digest of the raw weight bytes. frozen_only narrows to
// non-trainable tensors, the set audited before and after alignment.
template <class S>
std::map<std::string, std::string> weight_digests(ToyVLM<S>& m, bool frozen_only);

struct PartitionReport {
  std::uint64_t trained_params = 0;
  std::uint64_t total_params = 0;
  double trained_pct = 0;  // percentage, e.g. 4.692
  int trained_tensors = 0;
  int frozen_tensors = 0;
  std::string trainable_modules;
};

template <class S>
PartitionReport parameter_partition(ToyVLM<S>& m);

// Fixed five-column layout:
// Trained parameters | Trained (%) | Trained tensors | Frozen tensors | Trainable modules
std::string format_partition_row(const PartitionReport& r);
std::string format_partition_table(const PartitionReport& r);

// Versioned single-file container: magic + version + JSON header (config,
// vocabulary, tensor names/shapes/digests/trainability) + raw little-endian
// weights. Loading verifies the digests, so corruption fails loudly.
template <class S>
void save_checkpoint(const ToyVLM<S>& m, const std::string& path);
template <class S>
ToyVLM<S> load_checkpoint(const std::string& path);

// float and double instantiations are provided by vlm.cpp.

}  // namespace thermalign
