#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace malvit {

/// MAL: one attribute token per task. SAL: a single CLS token and one task.
/// MAL_NO_TOKENS: no extra tokens; every head reads the mean patch feature.
enum class Variant { mal, sal, mal_no_tokens };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

struct ModelConfig {
  std::size_t image_size = 64;  // H == W
  std::size_t channels = 3;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t depth = 4;
  std::size_t mlp_ratio = 4;
  double layer_norm_eps = 1e-6;
  std::vector<std::string> task_names;
  Variant variant = Variant::mal;

  std::size_t num_tasks() const { return task_names.size(); }
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  /// Extra learnable tokens prepended to the patch sequence.
  std::size_t num_tokens() const;
  std::size_t seq_len() const { return num_tokens() + num_patches(); }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t mlp_hidden() const { return embed_dim * mlp_ratio; }
  std::size_t image_numel() const { return image_size * image_size * channels; }

  /// Throws ConfigError on any broken invariant.
  void validate() const;

  /// 64x64x3 images, 8-pixel patches, d=64, 4 heads, 4 blocks.
  static ModelConfig desk(std::vector<std::string> tasks, Variant variant = Variant::mal);
  /// ViT-Tiny/16 at 224x224: d=192, 3 heads, 12 blocks.
  static ModelConfig vit_tiny(std::vector<std::string> tasks, Variant variant = Variant::mal);
  static ModelConfig preset(std::string_view name, std::vector<std::string> tasks, Variant variant);

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace malvit
