#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "malvit/attacks.hpp"
#include "malvit/dataset.hpp"
#include "malvit/model.hpp"

namespace malvit {

/// Confusion counts for one task. A rate whose denominator is zero counts as 0
/// in the balanced accuracy and is flagged.
struct TaskMetrics {
  std::string task;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::size_t count() const noexcept { return tp + fp + tn + fn; }
  bool tpr_undefined() const noexcept { return tp + fn == 0; }
  bool tnr_undefined() const noexcept { return tn + fp == 0; }
  double tpr() const noexcept;
  double tnr() const noexcept;
  double accuracy() const noexcept;
  double balanced_accuracy() const noexcept;

  bool operator==(const TaskMetrics&) const = default;
};

/// Throws ContractError on length mismatch or empty input.
TaskMetrics confusion(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> labels,
                      std::string task = {});
double balanced_accuracy(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> labels);

/// Prediction rule: positive iff logit > 0.
std::vector<TaskMetrics> metrics_from_logits(std::span<const float> logits, std::span<const std::uint8_t> labels,
                                             const std::vector<std::string>& task_names);

double mean_balanced_accuracy(const std::vector<TaskMetrics>& m);

struct EvalOptions {
  std::size_t batch_size = 128;  // fixed chunking; results do not depend on threads
  std::size_t threads = 1;
  /// UAP training set; the evaluated set itself when null.
  const Dataset* uap_source = nullptr;
};

/// Logits [N, n] row-major, evaluated in chunks of batch_size.
std::vector<float> predict_logits(const MalVitModel<float>& model, const Dataset& ds, const EvalOptions& opts = {});

/// Mean over samples of the unweighted sum of task BCE losses.
double mean_task_loss(std::span<const float> logits, std::span<const std::uint8_t> labels, std::size_t num_tasks);

std::vector<TaskMetrics> evaluate_clean(const MalVitModel<float>& model, const Dataset& ds,
                                        const EvalOptions& opts = {});

/// Attacks each chunk of batch_size images with an Rng derived from (seed,
/// chunk index), then scores the adversarial images like evaluate_clean. UAP
/// trains one perturbation first (on opts.uap_source) and applies it to every
/// chunk.
std::vector<TaskMetrics> evaluate_robust(const MalVitModel<float>& model, const Dataset& ds, const AttackConfig& cfg,
                                         std::uint64_t seed, const EvalOptions& opts = {});

/// 100 * (mal - sal) / sal per entry; undefined (flagged) when sal == 0.
struct Increment {
  std::optional<double> percent;
  bool defined() const noexcept { return percent.has_value(); }
};
std::vector<Increment> relative_increment(std::span<const double> mal, std::span<const double> sal);

enum class SweepAxis { uap_epsilon, patchfool_k };
std::string_view sweep_axis_name(SweepAxis a);
SweepAxis parse_sweep_axis(std::string_view name);

struct SweepRow {
  double value = 0.0;
  double mean_balanced_accuracy = 0.0;
  std::vector<TaskMetrics> metrics;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::uap_epsilon;
  AttackConfig base;
  std::vector<SweepRow> rows;
};

/// One evaluate_robust per value (values must be non-empty and ascending).
SweepResult sweep(const MalVitModel<float>& model, const Dataset& ds, SweepAxis axis, const std::vector<double>& values,
                  const AttackConfig& base, std::uint64_t seed, const EvalOptions& opts = {});

/// Pointwise mean of several curves over the same values (e.g. one per SAL model).
SweepResult mean_curve(const std::vector<SweepResult>& curves);

struct ModelDescriptor {
  std::string name;  // "MAL-ViT", "SAL-ViT", ...
  Variant variant = Variant::mal;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> task_names;
};

struct AttackResult {
  AttackConfig config;
  std::vector<TaskMetrics> metrics;
};

struct EvalReport {
  static constexpr int kSchemaVersion = 1;

  ModelDescriptor model;
  std::vector<TaskMetrics> clean;
  std::vector<AttackResult> robust;
  std::vector<SweepResult> sweeps;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Joins single-task reports (one per SAL model) into one multi-task report,
/// task columns in the given order. Attack rows must match across reports.
EvalReport merge_single_task_reports(const std::vector<EvalReport>& reports, const std::vector<std::string>& task_order,
                                     const std::string& name = "SAL-ViT");

/// Numbers are written with 6 significant digits ("%.6g").
std::string format_number(double v);

/// Robust accuracy table: header "model,attack,<task...>,avg"; one row per (report,
/// attack), clean rows labelled "none"; balanced accuracy in percent.
std::string table2_csv(const std::vector<EvalReport>& reports);
/// Relative increment table: header "method,<task...>"; one row of relative increments in
/// percent (clean balanced accuracy, MAL vs SAL); undefined entries are "nan".
std::string table1_csv(const EvalReport& mal, const EvalReport& sal);
/// Header "<axis>,mean_balanced_accuracy,<task...>"; accuracies in percent.
std::string sweep_csv(const SweepResult& s);

/// Writes report.json, table2.csv and one sweep_<axis>.csv per sweep into
/// out_dir. Output is a pure function of the report.
void emit_report(const EvalReport& report, const std::filesystem::path& out_dir);

}  // namespace malvit
