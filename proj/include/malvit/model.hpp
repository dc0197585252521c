#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "malvit/config.hpp"
#include "malvit/ops.hpp"
#include "malvit/tensor.hpp"

namespace malvit {

template <typename T>
struct EncoderBlock {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> qkv_weight, qkv_bias;    // [d, 3d], [3d]
  Tensor<T> proj_weight, proj_bias;  // [d, d], [d]
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> fc1_weight, fc1_bias;  // [d, hidden], [hidden]
  Tensor<T> fc2_weight, fc2_bias;  // [hidden, d], [d]
};

template <typename T>
struct ModelParameters {
  Tensor<T> patch_weight, patch_bias;  // [P*P*C, d], [d]
  Tensor<T> position;                  // [num_tokens + N, d]
  Tensor<T> tokens;                    // [num_tokens, d]; undefined for MAL_NO_TOKENS
  std::vector<EncoderBlock<T>> blocks;
  Tensor<T> norm_gamma, norm_beta;
  Tensor<T> head_weight, head_bias;  // row i is the d -> 1 head of task i
  Tensor<T> log_sigmas;              // s_i, with loss weight exp(-s_i)
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct TaskOutputs {
  Tensor<T> logits;                      // [B, n], columns in task_names order
  std::vector<Tensor<T>> attention_maps;  // per block [B, heads, S, S], when requested
  std::size_t block_invocations = 0;
};

enum class LossWeighting { learnable, fixed };

/// Scaled dot-product attention over q, k, v [..., seq, d_k]. The softmax
/// matrix is written to `weights` when non-null.
template <typename T>
Tensor<T> attention(GradientTape<T>& tape, const Tensor<T>& q, const Tensor<T>& k,
                    const Tensor<T>& v, Tensor<T>* weights = nullptr);

/// Multi-attribute vision transformer. Attribute tokens (one per task) are
/// prepended to the patch embeddings, position embeddings cover the whole
/// sequence, and task i's head reads the final feature of token i.
template <typename T>
class MalVitModel {
 public:
  /// Freshly initialized parameters, deterministic in `seed`.
  MalVitModel(ModelConfig config, std::uint64_t seed);
  /// Adopts existing parameters (shapes are validated).
  MalVitModel(ModelConfig config, ModelParameters<T> params);

  const ModelConfig& config() const noexcept { return config_; }
  ModelParameters<T>& params() noexcept { return params_; }
  const ModelParameters<T>& params() const noexcept { return params_; }

  /// images[B, H, W, C] with values in [0, 1].
  TaskOutputs<T> forward(GradientTape<T>& tape, const Tensor<T>& images,
                         bool record_attention = false) const;

  std::vector<NamedTensor<T>> named_parameters() const;
  std::vector<Tensor<T>> parameters() const;
  std::size_t parameter_count() const;

  /// Deep copy with independent storage.
  MalVitModel clone() const;
  void zero_grad();

 private:
  void check_shapes() const;

  ModelConfig config_;
  ModelParameters<T> params_;
};

template <typename T>
std::size_t count_parameters(const MalVitModel<T>& model) {
  return model.parameter_count();
}

/// Binary cross-entropy of sigmoid(logit) against y in {0, 1}.
double task_loss(double logit, int label);

/// sum_i exp(-s_i) * L_i + s_i (learnable), or sum_i L_i (fixed).
template <typename T>
Tensor<T> total_loss(GradientTape<T>& tape, const Tensor<T>& per_task_losses,
                     const MalVitModel<T>& model, LossWeighting weighting = LossWeighting::learnable);

/// Current loss weights lambda_i = exp(-s_i).
template <typename T>
std::vector<double> loss_weights(const MalVitModel<T>& model);

/// Copies a [H, W, C] image into [N, P*P*C] patches (same layout as ops::patchify).
std::vector<float> patchify_image(std::span<const float> image, std::size_t size, std::size_t channels,
                                  std::size_t patch);
/// Inverse of patchify_image.
std::vector<float> unpatchify_image(std::span<const float> patches, std::size_t size,
                                    std::size_t channels, std::size_t patch);

extern template class MalVitModel<float>;
extern template class MalVitModel<double>;

}  // namespace malvit
