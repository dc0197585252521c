#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "malvit/dataset.hpp"
#include "malvit/model.hpp"

namespace malvit {

std::string_view weighting_name(LossWeighting w);
LossWeighting parse_weighting(std::string_view name);

struct TrainConfig {
  std::size_t batch_size = 128;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::optional<double> lr;  // chosen by lr_probe when unset
  std::vector<double> lr_candidates{1e-4, 3e-4, 1e-3};
  std::size_t probe_batches = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm; 0 disables clipping
  std::uint64_t seed = 0;
  LossWeighting weighting = LossWeighting::learnable;

  /// Throws ConfigError. patience <= max_epochs is required unless max_epochs
  /// is 0 (which returns the initial model).
  void validate() const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Bias-corrected Adam moments; m and v mirror the parameter list.
struct AdamState {
  std::vector<std::vector<float>> m, v;
  std::uint64_t t = 0;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam update from the parameters' gradient buffers (missing buffers are
/// zeros). Throws NumericError naming the first parameter with a non-finite
/// gradient, before anything is written.
void adam_step(const std::vector<NamedTensor<float>>& params, AdamState& state, double lr, const AdamHyper& hyper = {});

/// Scales all gradients so that their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(const std::vector<NamedTensor<float>>& params, double max_norm);

/// Short trial per candidate on clones of `model` (the model is not touched):
/// cfg.probe_batches Adam steps over a fixed shuffled order, scored by an
/// exponential moving average of the batch loss. A candidate diverges when a
/// loss is non-finite or the smoothed loss ends above 4x the first batch loss.
/// Returns the candidate with the lowest smoothed loss; ConfigError when all
/// diverge.
double lr_probe(const MalVitModel<float>& model, const Dataset& ds, const std::vector<double>& candidates,
                const TrainConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;  // mean weighted training loss over batches
  double val_loss = 0.0;    // mean unweighted sum of task losses
  std::vector<double> val_balanced_accuracy;  // per task
  double val_mean_balanced_accuracy = 0.0;
  double monitor = 0.0;
  std::vector<double> lambdas;  // loss weights at the end of the epoch
};

struct TrainHistory {
  std::vector<std::string> task_names;
  double lr = 0.0;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 0 when no epoch completed
  bool stopped_early = false;

  /// Columns: epoch,train_loss,val_loss,val_mean_bacc,monitor,bacc_<task>...,lambda_<task>...
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

struct TrainResult {
  MalVitModel<float> model;  // best-monitor snapshot
  TrainHistory history;
};

/// Epoch-level monitor override (higher is better); the default is the
/// validation mean balanced accuracy.
using MonitorFn = std::function<double(std::size_t epoch, const MalVitModel<float>& model)>;

/// Adam on the total loss with early stopping on the monitor. `model` is the
/// starting point and is not modified. Batches are reshuffled per epoch from
/// cfg.seed. Throws NumericError with epoch and batch on a non-finite loss.
TrainResult train(const MalVitModel<float>& model, const Dataset& train_ds, const Dataset& val_ds,
                  const TrainConfig& cfg, const MonitorFn& monitor = {});

/// Checkpoint container (kind "checkpoint"): every parameter as f32 plus the
/// model config and optional extra metadata.
void save_checkpoint(const MalVitModel<float>& model, const std::filesystem::path& path,
                     const nlohmann::json& extra = nlohmann::json::object());
struct Checkpoint {
  MalVitModel<float> model;
  nlohmann::json extra;
  std::string hash;
};
/// Throws CorruptionError, VersionError or IntegrityError on a damaged file and
/// VariantMismatchError when `expected` is given and differs.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<Variant> expected = {});

/// Hex crc32 over the model config and parameter bytes.
std::string model_hash(const MalVitModel<float>& model);

}  // namespace malvit
