#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "malvit/dataset.hpp"
#include "malvit/model.hpp"
#include "malvit/rng.hpp"

namespace malvit {

enum class AttackFamily { fgsm, bim, pgd, uap, patch_fool };

std::string_view attack_family_name(AttackFamily f);
AttackFamily parse_attack_family(std::string_view name);

struct AttackConfig {
  AttackFamily family = AttackFamily::pgd;
  double epsilon = 0.03;           // L-inf budget in [0, 1] pixel units
  std::optional<double> alpha;     // step size; defaults in effective_alpha()
  std::size_t steps = 10;          // BIM / PGD iterations
  bool random_start = false;       // PGD only
  std::size_t uap_epochs = 5;
  std::size_t uap_batch_size = 64;
  std::size_t patch_budget = 1;    // k, Patch-Fool
  std::size_t patch_iters = 60;
  double patch_lr = 0.05;
  std::vector<std::size_t> target_tasks;  // empty: all tasks

  /// alpha if set; otherwise epsilon for FGSM, epsilon / 4 for BIM and PGD,
  /// epsilon / 10 for UAP. Unused by Patch-Fool.
  double effective_alpha() const;
  /// Throws ConfigError on a broken invariant.
  void validate() const;
  /// Short row label such as "pgd(eps=0.03,steps=10)".
  std::string label() const;

  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);

  static AttackConfig fgsm(double eps);
  static AttackConfig bim(double eps, std::size_t steps = 10);
  static AttackConfig pgd(double eps, std::size_t steps = 10, bool random_start = false);
  static AttackConfig uap(double eps, std::size_t epochs);
  static AttackConfig patch_fool(std::size_t k);
};

struct AdversarialBatch {
  Tensor<float> x_adv;  // [B, H, W, C]
  Tensor<float> delta;  // x_adv - x
  std::vector<std::vector<std::size_t>> selected_patches;  // Patch-Fool only, per image
};

/// Sum over target tasks (all when empty) and over the batch of per-task BCE.
/// labels are [B, n] row-major. Throws ConfigError for an empty task set or an
/// out-of-range task index.
Tensor<float> attack_objective(GradientTape<float>& tape, const TaskOutputs<float>& outputs,
                               std::span<const std::uint8_t> labels, const std::vector<std::size_t>& target_tasks);

/// Objective value at x (no gradient).
double objective_value(const MalVitModel<float>& model, const Tensor<float>& x, std::span<const std::uint8_t> labels,
                       const std::vector<std::size_t>& target_tasks);

/// Gradient of the attack objective with respect to the input images. Model
/// parameters are frozen on the internal tape and never written.
Tensor<float> input_gradient(const MalVitModel<float>& model, const Tensor<float>& x,
                             std::span<const std::uint8_t> labels, const std::vector<std::size_t>& target_tasks);

/// Componentwise sign with sign(0) = 0; throws NumericError on non-finite input.
float sign_of(float g);

using InputGradientFn = std::function<Tensor<float>(const Tensor<float>&)>;

/// Shared core of FGSM, BIM and PGD: `steps` updates
///   x <- clip_ball(clip_[0,1](x + alpha * sign(gradient(x))))
/// from `start`, where the ball is the eps-ball around x rounded inward so that
/// |x_adv - x| <= eps holds exactly in double precision.
AdversarialBatch iterative_sign_attack(const InputGradientFn& gradient, const Tensor<float>& x, double eps,
                                       double alpha, std::size_t steps, Tensor<float> start);

/// x_adv = clip(x + eps * sign(grad), 0, 1).
AdversarialBatch fgsm(const MalVitModel<float>& model, const Tensor<float>& x, std::span<const std::uint8_t> labels,
                      const AttackConfig& cfg);
/// Iterated FGSM with step alpha, projected onto the eps-ball around x and [0, 1].
AdversarialBatch bim(const MalVitModel<float>& model, const Tensor<float>& x, std::span<const std::uint8_t> labels,
                     const AttackConfig& cfg);
/// BIM from a uniform random start inside the eps-ball when cfg.random_start.
AdversarialBatch pgd(const MalVitModel<float>& model, const Tensor<float>& x, std::span<const std::uint8_t> labels,
                     const AttackConfig& cfg, Rng& rng);

struct UapResult {
  Tensor<float> delta;                   // [H, W, C]
  std::vector<double> epoch_objective;  // mean objective seen during each epoch
};

/// Sign-gradient ascent of the mean objective over `ds`, one perturbation for
/// every image; batches are reshuffled each epoch with `rng`.
UapResult uap_train(const MalVitModel<float>& model, const Dataset& ds, const AttackConfig& cfg, Rng& rng);

/// clip(x + delta, 0, 1) with the same delta for every image. When eps is
/// given, results are nudged inward so |x_adv - x| <= eps holds exactly.
Tensor<float> apply_uap(const Tensor<float>& x, const Tensor<float>& delta, std::optional<double> eps = {});

/// Per image, the k patch indices receiving the most attention summed over
/// blocks, heads and query tokens; ties go to the lower index.
std::vector<std::vector<std::size_t>> select_influential_patches(const MalVitModel<float>& model,
                                                                 const Tensor<float>& x, std::size_t k);
/// Same selection from precomputed attention maps (per block [B, heads, S, S]).
std::vector<std::vector<std::size_t>> select_influential_patches(const std::vector<Tensor<float>>& attention_maps,
                                                                 std::size_t num_tokens, std::size_t k);

/// Replaces the selected patches with pixels optimized by Adam ascent on the
/// objective (initialized uniformly in [0, 1]); all other pixels are untouched.
AdversarialBatch patch_fool(const MalVitModel<float>& model, const Tensor<float>& x,
                            std::span<const std::uint8_t> labels, const AttackConfig& cfg, Rng& rng);

/// Dispatch for the per-batch families (FGSM, BIM, PGD, Patch-Fool). UAP needs
/// a trained perturbation; pass it as `uap_delta`.
AdversarialBatch run_attack(const MalVitModel<float>& model, const Tensor<float>& x,
                            std::span<const std::uint8_t> labels, const AttackConfig& cfg, Rng& rng,
                            const Tensor<float>* uap_delta = nullptr);

/// Perturbation file: delta (and optionally x_adv) plus a metadata record of
/// family, eps, alpha, steps, seed and model hash.
void save_perturbation(const std::filesystem::path& path, const Tensor<float>& delta, const AttackConfig& cfg,
                       std::uint64_t seed, const std::string& model_hash, const Tensor<float>* x_adv = nullptr);
struct PerturbationFile {
  Tensor<float> delta;
  Tensor<float> x_adv;  // undefined when not stored
  AttackConfig config;
  std::uint64_t seed = 0;
  std::string model_hash;
};
PerturbationFile load_perturbation(const std::filesystem::path& path);

}  // namespace malvit
