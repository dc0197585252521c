#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "malvit/container.hpp"
#include "malvit/tensor.hpp"

namespace malvit {

enum class Split { train, val, test };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct Sample {
  std::vector<float> image;  // [H, W, C] row-major, values in [0, 1]
  std::vector<std::uint8_t> labels;
  std::string id;
};

/// Images and labels stored contiguously: image i occupies
/// images[i * image_numel(), (i + 1) * image_numel()).
struct Dataset {
  std::vector<std::string> task_names;
  Split split = Split::train;
  std::size_t image_size = 0;
  std::size_t channels = 3;
  std::vector<float> images;
  std::vector<std::uint8_t> labels;  // [size, num_tasks]
  std::vector<std::string> ids;

  std::size_t size() const noexcept { return ids.size(); }
  bool empty() const noexcept { return ids.empty(); }
  std::size_t num_tasks() const noexcept { return task_names.size(); }
  std::size_t image_numel() const noexcept { return image_size * image_size * channels; }

  std::span<const float> image(std::size_t i) const;
  std::span<const std::uint8_t> label_row(std::size_t i) const;
  std::uint8_t label(std::size_t i, std::size_t task) const { return labels[i * num_tasks() + task]; }
  Sample sample(std::size_t i) const;
  void add(const Sample& s);

  /// Throws DataError naming the task.
  std::size_t task_index(std::string_view name) const;

  /// Stacks the given samples into a [B, H, W, C] tensor.
  Tensor<float> batch_images(std::span<const std::size_t> indices) const;
  /// [B, num_tasks] row-major labels.
  std::vector<std::uint8_t> batch_labels(std::span<const std::size_t> indices) const;

  Dataset subset(std::span<const std::size_t> indices) const;
  /// First `count` samples (or all when smaller).
  Dataset head(std::size_t count) const;
  /// Keeps only the named tasks, in the given order.
  Dataset select_tasks(const std::vector<std::string>& names) const;

  /// Checks ranges, label values, sizes and id uniqueness; throws DataError.
  void validate() const;
};

/// How a positive attribute shows up in its image region; negatives leave the
/// region as plain background.
enum class FeatureKind {
  shape,    // filled square in the attribute color
  stripes,  // horizontal stripes in the attribute color
  color     // disk tinted with the attribute color
};

std::string_view feature_kind_name(FeatureKind k);

struct AttributeRule {
  std::string name;
  FeatureKind kind = FeatureKind::shape;
  std::size_t region = 0;  // cell of the 3x3 grid, row-major
  double marginal = 0.5;   // P(label = 1)
  std::array<float, 3> color{1.0f, 1.0f, 1.0f};
};

/// Labels come from a Gaussian copula: z ~ N(0, R), label_j = [z_j < q_j] with
/// q_j the standard normal quantile of marginal_j. R is the latent correlation.
struct SynthSpec {
  std::uint64_t seed = 0;
  std::size_t n_train = 8000;
  std::size_t n_val = 1000;
  std::size_t n_test = 1000;
  std::size_t image_size = 64;
  std::vector<AttributeRule> attributes;
  std::vector<double> correlation;  // [n, n] row-major
  double noise_std = 0.05;

  std::size_t num_attributes() const noexcept { return attributes.size(); }
  std::vector<std::string> task_names() const;

  /// Throws ConfigError: asymmetric or non-unit-diagonal matrix, non-positive
  /// definite matrix, marginals outside (0, 1), bad regions, duplicate names.
  void validate() const;

  /// The nine face attributes with a face-like correlation structure
  /// (hair colours exclusive, beard styles together, No_Beard against beards).
  /// With n < 9 the first n attributes and their sub-matrix are kept.
  static SynthSpec face_attributes(std::size_t n_attributes = 9, std::uint64_t seed = 0);

  nlohmann::json to_json() const;
  static SynthSpec from_json(const nlohmann::json& j);
};

struct DatasetSplits {
  Dataset train, val, test;
};

/// Pure function of the SynthSpec; each split draws from its own derived stream.
DatasetSplits synth_generate(const SynthSpec& spec);

/// Standard normal quantile, accurate to ~1e-12 on (0, 1).
double normal_quantile(double p);

/// CelebA attribute file: line 1 sample count, line 2 attribute names, then
/// "filename v1 v2 ..." rows with v in {-1, 1}.
struct AttributeTable {
  std::vector<std::string> attribute_names;
  std::vector<std::string> filenames;
  std::vector<std::vector<int>> values;  // +1 / -1, one row per file
};

AttributeTable parse_attribute_table(std::istream& in, const std::string& source = "<stream>");
AttributeTable read_attribute_table(const std::filesystem::path& path);
/// Writes the table in the published format (round-trips through the parser).
std::string format_attribute_table(const AttributeTable& t);
/// filename -> {0, 1, 2}.
std::vector<std::pair<std::string, int>> parse_partition_file(std::istream& in,
                                                              const std::string& source = "<stream>");

struct CelebaOptions {
  std::size_t image_size = 224;
  std::size_t channels = 3;
  /// When false, images are not decoded and image buffers are left empty.
  bool decode_images = true;
};

/// Returns train/val/test with labels mapped -1 -> 0 and +1 -> 1, restricted to
/// `selected_attrs` in the given order. Images are decoded (PNG/JPEG via
/// OpenCV), converted to RGB, resized bilinearly and scaled to [0, 1].
DatasetSplits load_celeba(const std::filesystem::path& image_dir, const std::filesystem::path& attr_file,
                          const std::filesystem::path& partition_file,
                          const std::vector<std::string>& selected_attrs, const CelebaOptions& options = {});

/// Index batches; shuffle uses a seeded permutation. The last batch may be short.
std::vector<std::vector<std::size_t>> batches(std::size_t dataset_size, std::size_t batch_size, bool shuffle,
                                              std::uint64_t seed);
std::vector<std::vector<std::size_t>> batches(const Dataset& ds, std::size_t batch_size, bool shuffle,
                                              std::uint64_t seed);

/// (positives, negatives) for one task.
std::pair<std::size_t, std::size_t> class_balance(const Dataset& ds, std::string_view task);

/// Dataset container: images f32 [N,H,W,C], labels u8 [N,n], metadata with
/// task_names, ids, split and image geometry.
Container dataset_to_container(const Dataset& ds);
Dataset dataset_from_container(const Container& c);
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace malvit
