#include "malvit/config.hpp"

#include "malvit/error.hpp"

namespace malvit {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::mal:
      return "mal";
    case Variant::sal:
      return "sal";
    case Variant::mal_no_tokens:
      return "mal-no-tokens";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  if (name == "mal") return Variant::mal;
  if (name == "sal") return Variant::sal;
  if (name == "mal-no-tokens" || name == "mal_no_tokens") return Variant::mal_no_tokens;
  throw ConfigError("unknown model variant '" + std::string(name) +
                    "' (expected mal, sal or mal-no-tokens)");
}

std::size_t ModelConfig::num_tokens() const {
  switch (variant) {
    case Variant::mal:
      return task_names.size();
    case Variant::sal:
      return 1;
    case Variant::mal_no_tokens:
      return 0;
  }
  return 0;
}

void ModelConfig::validate() const {
  if (image_size == 0 || channels == 0 || patch_size == 0) {
    throw ConfigError("image_size, channels and patch_size must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " must be a positive multiple of num_heads " +
                      std::to_string(num_heads));
  }
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
  if (task_names.empty()) throw ConfigError("a model needs at least one task");
  if (variant == Variant::sal && task_names.size() != 1) {
    throw ConfigError("a SAL model has exactly one task, got " + std::to_string(task_names.size()));
  }
  if (!(layer_norm_eps > 0)) throw ConfigError("layer_norm_eps must be positive");
}

ModelConfig ModelConfig::desk(std::vector<std::string> tasks, Variant variant) {
  ModelConfig c;
  c.task_names = std::move(tasks);
  c.variant = variant;
  return c;
}

ModelConfig ModelConfig::vit_tiny(std::vector<std::string> tasks, Variant variant) {
  ModelConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.embed_dim = 192;
  c.num_heads = 3;
  c.depth = 12;
  c.task_names = std::move(tasks);
  c.variant = variant;
  return c;
}

ModelConfig ModelConfig::preset(std::string_view name, std::vector<std::string> tasks, Variant variant) {
  if (name == "desk") return desk(std::move(tasks), variant);
  if (name == "vit-tiny") return vit_tiny(std::move(tasks), variant);
  throw ConfigError("unknown model preset '" + std::string(name) + "' (expected desk or vit-tiny)");
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{{"image_size", image_size},   {"channels", channels},
                        {"patch_size", patch_size},   {"embed_dim", embed_dim},
                        {"num_heads", num_heads},     {"depth", depth},
                        {"mlp_ratio", mlp_ratio},     {"layer_norm_eps", layer_norm_eps},
                        {"task_names", task_names},   {"variant", variant_name(variant)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.image_size = j.at("image_size").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.depth = j.at("depth").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
    c.task_names = j.at("task_names").get<std::vector<std::string>>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

}  // namespace malvit
