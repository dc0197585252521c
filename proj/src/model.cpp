#include "malvit/model.hpp"

#include <cmath>

#include "malvit/error.hpp"
#include "malvit/rng.hpp"

namespace malvit {
namespace {

template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape), T(0), true);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> trunc_normal_param(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape), T(0), true);
  for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(stddev));
  return t;
}

template <typename T>
Tensor<T> const_param(Shape shape, T value) {
  return Tensor<T>(std::move(shape), value, true);
}

template <typename T>
void expect_shape(const Tensor<T>& t, const Shape& shape, const std::string& name) {
  if (!t.defined() || t.shape() != shape) {
    throw DimensionError("parameter " + name + " has shape " +
                         (t.defined() ? shape_str(t.shape()) : std::string("<undefined>")) +
                         ", expected " + shape_str(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T> attention(GradientTape<T>& tape, const Tensor<T>& q, const Tensor<T>& k,
                    const Tensor<T>& v, Tensor<T>* weights) {
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.size(-1))));
  auto scores = ops::scale(tape, ops::matmul(tape, q, k, /*transpose_b=*/true), inv_scale);
  auto attn = ops::softmax(tape, scores, -1);
  if (weights) *weights = attn;
  return ops::matmul(tape, attn, v);
}

template <typename T>
MalVitModel<T>::MalVitModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.embed_dim, hidden = config_.mlp_hidden();
  const std::size_t n = config_.num_tasks(), pd = config_.patch_dim();
  const double pd_bound = 1.0 / std::sqrt(static_cast<double>(pd));
  const double d_bound = 1.0 / std::sqrt(static_cast<double>(d));
  const double h_bound = 1.0 / std::sqrt(static_cast<double>(hidden));

  params_.patch_weight = uniform_param<T>({pd, d}, pd_bound, rng);
  params_.patch_bias = uniform_param<T>({d}, pd_bound, rng);
  params_.position = trunc_normal_param<T>({config_.seq_len(), d}, 0.02, rng);
  if (config_.num_tokens() > 0) {
    params_.tokens = trunc_normal_param<T>({config_.num_tokens(), d}, 0.02, rng);
  }
  for (std::size_t b = 0; b < config_.depth; ++b) {
    EncoderBlock<T> blk;
    blk.ln1_gamma = const_param<T>({d}, T(1));
    blk.ln1_beta = const_param<T>({d}, T(0));
    blk.qkv_weight = uniform_param<T>({d, 3 * d}, d_bound, rng);
    blk.qkv_bias = uniform_param<T>({3 * d}, d_bound, rng);
    blk.proj_weight = uniform_param<T>({d, d}, d_bound, rng);
    blk.proj_bias = uniform_param<T>({d}, d_bound, rng);
    blk.ln2_gamma = const_param<T>({d}, T(1));
    blk.ln2_beta = const_param<T>({d}, T(0));
    blk.fc1_weight = uniform_param<T>({d, hidden}, d_bound, rng);
    blk.fc1_bias = uniform_param<T>({hidden}, d_bound, rng);
    blk.fc2_weight = uniform_param<T>({hidden, d}, h_bound, rng);
    blk.fc2_bias = uniform_param<T>({d}, h_bound, rng);
    params_.blocks.push_back(std::move(blk));
  }
  params_.norm_gamma = const_param<T>({d}, T(1));
  params_.norm_beta = const_param<T>({d}, T(0));
  params_.head_weight = uniform_param<T>({n, d}, d_bound, rng);
  params_.head_bias = uniform_param<T>({n}, d_bound, rng);
  params_.log_sigmas = const_param<T>({n}, T(0));
}

template <typename T>
MalVitModel<T>::MalVitModel(ModelConfig config, ModelParameters<T> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  check_shapes();
}

template <typename T>
void MalVitModel<T>::check_shapes() const {
  const std::size_t d = config_.embed_dim, hidden = config_.mlp_hidden(), n = config_.num_tasks();
  expect_shape(params_.patch_weight, {config_.patch_dim(), d}, "patch.weight");
  expect_shape(params_.patch_bias, {d}, "patch.bias");
  expect_shape(params_.position, {config_.seq_len(), d}, "position");
  if (config_.num_tokens() > 0) {
    expect_shape(params_.tokens, {config_.num_tokens(), d}, "tokens");
  } else if (params_.tokens.defined()) {
    throw DimensionError("a model without attribute tokens must not carry a tokens tensor");
  }
  if (params_.blocks.size() != config_.depth) {
    throw DimensionError("expected " + std::to_string(config_.depth) + " encoder blocks, got " +
                         std::to_string(params_.blocks.size()));
  }
  for (const auto& [name, t] : named_parameters()) {
    if (name.rfind("blocks.", 0) != 0) continue;
    const bool wide = name.ends_with("qkv.weight") || name.ends_with("qkv.bias");
    const bool hid = name.ends_with("fc1.weight") || name.ends_with("fc1.bias");
    Shape want;
    if (name.ends_with("qkv.weight")) want = {d, 3 * d};
    else if (name.ends_with("fc1.weight")) want = {d, hidden};
    else if (name.ends_with("fc2.weight")) want = {hidden, d};
    else if (name.ends_with("proj.weight")) want = {d, d};
    else want = {wide ? 3 * d : hid ? hidden : d};
    expect_shape(t, want, name);
  }
  expect_shape(params_.norm_gamma, {d}, "norm.gamma");
  expect_shape(params_.norm_beta, {d}, "norm.beta");
  expect_shape(params_.head_weight, {n, d}, "heads.weight");
  expect_shape(params_.head_bias, {n}, "heads.bias");
  expect_shape(params_.log_sigmas, {n}, "loss.log_sigmas");
}

template <typename T>
TaskOutputs<T> MalVitModel<T>::forward(GradientTape<T>& tape, const Tensor<T>& images,
                                       bool record_attention) const {
  const auto& c = config_;
  const Shape want{images.defined() && images.dim() == 4 ? images.size(0) : 0, c.image_size,
                   c.image_size, c.channels};
  if (!images.defined() || images.dim() != 4 || images.shape() != want || want[0] == 0) {
    throw ContractError("forward expects images [B," + std::to_string(c.image_size) + "," +
                        std::to_string(c.image_size) + "," + std::to_string(c.channels) +
                        "], got " + (images.defined() ? shape_str(images.shape()) : "<undefined>"));
  }
  for (T v : images.data()) {
    if (!(v >= T(0) && v <= T(1))) throw ContractError("image values must lie in [0, 1]");
  }
  const std::size_t batch = images.size(0);
  const std::size_t d = c.embed_dim, heads = c.num_heads, dk = c.head_dim(), seq = c.seq_len();
  TaskOutputs<T> out;

  auto patches = ops::patchify(tape, images, c.patch_size);
  auto x = ops::linear(tape, patches, params_.patch_weight, params_.patch_bias);
  if (c.num_tokens() > 0) {
    auto tok = ops::expand_leading(tape, params_.tokens, batch);
    x = ops::concat(tape, {tok, x}, 1);
  }
  x = ops::add(tape, x, params_.position);

  for (const auto& blk : params_.blocks) {
    auto h = ops::layer_norm(tape, x, blk.ln1_gamma, blk.ln1_beta, c.layer_norm_eps);
    auto qkv = ops::linear(tape, h, blk.qkv_weight, blk.qkv_bias);
    qkv = ops::permute(tape, ops::reshape(tape, qkv, {batch, seq, 3, heads, dk}), {2, 0, 3, 1, 4});
    auto part = [&](std::size_t i) {
      return ops::reshape(tape, ops::slice(tape, qkv, 0, i, 1), {batch, heads, seq, dk});
    };
    Tensor<T> weights;
    auto ctx = attention(tape, part(0), part(1), part(2), record_attention ? &weights : nullptr);
    if (record_attention) out.attention_maps.push_back(weights);
    ctx = ops::reshape(tape, ops::permute(tape, ctx, {0, 2, 1, 3}), {batch, seq, d});
    x = ops::add(tape, x, ops::linear(tape, ctx, blk.proj_weight, blk.proj_bias));

    h = ops::layer_norm(tape, x, blk.ln2_gamma, blk.ln2_beta, c.layer_norm_eps);
    h = ops::gelu(tape, ops::linear(tape, h, blk.fc1_weight, blk.fc1_bias));
    x = ops::add(tape, x, ops::linear(tape, h, blk.fc2_weight, blk.fc2_bias));
    ++out.block_invocations;
  }
  x = ops::layer_norm(tape, x, params_.norm_gamma, params_.norm_beta, c.layer_norm_eps);

  if (c.num_tokens() > 0) {
    // Token i feeds head i: logits[b, i] = <f_i, w_i> + b_i.
    auto feats = ops::slice(tape, x, 1, 0, c.num_tokens());
    auto dots = ops::sum_axis(tape, ops::mul(tape, feats, params_.head_weight), -1);
    out.logits = ops::add(tape, dots, params_.head_bias);
  } else {
    auto pooled = ops::mean_axis(tape, x, 1);
    out.logits = ops::add(tape, ops::matmul(tape, pooled, params_.head_weight, true), params_.head_bias);
  }
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> MalVitModel<T>::named_parameters() const {
  std::vector<NamedTensor<T>> out;
  out.push_back({"patch.weight", params_.patch_weight});
  out.push_back({"patch.bias", params_.patch_bias});
  out.push_back({"position", params_.position});
  if (params_.tokens.defined()) out.push_back({"tokens", params_.tokens});
  for (std::size_t i = 0; i < params_.blocks.size(); ++i) {
    const auto& b = params_.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    out.push_back({p + "ln1.gamma", b.ln1_gamma});
    out.push_back({p + "ln1.beta", b.ln1_beta});
    out.push_back({p + "qkv.weight", b.qkv_weight});
    out.push_back({p + "qkv.bias", b.qkv_bias});
    out.push_back({p + "proj.weight", b.proj_weight});
    out.push_back({p + "proj.bias", b.proj_bias});
    out.push_back({p + "ln2.gamma", b.ln2_gamma});
    out.push_back({p + "ln2.beta", b.ln2_beta});
    out.push_back({p + "fc1.weight", b.fc1_weight});
    out.push_back({p + "fc1.bias", b.fc1_bias});
    out.push_back({p + "fc2.weight", b.fc2_weight});
    out.push_back({p + "fc2.bias", b.fc2_bias});
  }
  out.push_back({"norm.gamma", params_.norm_gamma});
  out.push_back({"norm.beta", params_.norm_beta});
  out.push_back({"heads.weight", params_.head_weight});
  out.push_back({"heads.bias", params_.head_bias});
  out.push_back({"loss.log_sigmas", params_.log_sigmas});
  return out;
}

template <typename T>
std::vector<Tensor<T>> MalVitModel<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (auto& nt : named_parameters()) out.push_back(nt.tensor);
  return out;
}

template <typename T>
std::size_t MalVitModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& nt : named_parameters()) n += nt.tensor.numel();
  return n;
}

template <typename T>
MalVitModel<T> MalVitModel<T>::clone() const {
  ModelParameters<T> p = params_;
  auto deep = [](Tensor<T>& t) {
    if (t.defined()) t = t.clone();
  };
  deep(p.patch_weight);
  deep(p.patch_bias);
  deep(p.position);
  deep(p.tokens);
  for (auto& b : p.blocks) {
    for (Tensor<T>* t : {&b.ln1_gamma, &b.ln1_beta, &b.qkv_weight, &b.qkv_bias, &b.proj_weight,
                         &b.proj_bias, &b.ln2_gamma, &b.ln2_beta, &b.fc1_weight, &b.fc1_bias,
                         &b.fc2_weight, &b.fc2_bias}) {
      deep(*t);
    }
  }
  deep(p.norm_gamma);
  deep(p.norm_beta);
  deep(p.head_weight);
  deep(p.head_bias);
  deep(p.log_sigmas);
  return MalVitModel(config_, std::move(p));
}

template <typename T>
void MalVitModel<T>::zero_grad() {
  for (auto& nt : named_parameters()) nt.tensor.zero_grad();
}

double task_loss(double logit, int label) {
  if (label != 0 && label != 1) {
    throw DataError("binary label outside {0,1}: " + std::to_string(label));
  }
  return ops::softplus(logit) - label * logit;
}

template <typename T>
Tensor<T> total_loss(GradientTape<T>& tape, const Tensor<T>& per_task_losses,
                     const MalVitModel<T>& model, LossWeighting weighting) {
  const auto& s = model.params().log_sigmas;
  if (per_task_losses.shape() != s.shape()) {
    throw DimensionError("total_loss: " + shape_str(per_task_losses.shape()) + " task losses for " +
                         std::to_string(s.numel()) + " tasks");
  }
  if (weighting == LossWeighting::fixed) return ops::sum(tape, per_task_losses);
  auto lambdas = ops::exp(tape, ops::scale(tape, s, T(-1)));
  auto weighted = ops::sum(tape, ops::mul(tape, per_task_losses, lambdas));
  return ops::add(tape, weighted, ops::sum(tape, s));
}

template <typename T>
std::vector<double> loss_weights(const MalVitModel<T>& model) {
  std::vector<double> out;
  for (T s : model.params().log_sigmas.data()) out.push_back(std::exp(-static_cast<double>(s)));
  return out;
}

std::vector<float> patchify_image(std::span<const float> image, std::size_t size, std::size_t channels,
                                  std::size_t patch) {
  GradientTape<float> tape(false);
  Tensor<float> img({1, size, size, channels}, std::vector<float>(image.begin(), image.end()));
  auto out = ops::patchify(tape, img, patch);
  return {out.data().begin(), out.data().end()};
}

std::vector<float> unpatchify_image(std::span<const float> patches, std::size_t size,
                                    std::size_t channels, std::size_t patch) {
  if (patch == 0 || size % patch != 0 || patches.size() != size * size * channels) {
    throw ConfigError("unpatchify: patch layout does not match a " + std::to_string(size) + "x" +
                      std::to_string(size) + "x" + std::to_string(channels) + " image");
  }
  const std::size_t grid = size / patch, run = patch * channels, plen = patch * run;
  std::vector<float> image(patches.size());
  for (std::size_t pr = 0; pr < grid; ++pr) {
    for (std::size_t pc = 0; pc < grid; ++pc) {
      for (std::size_t i = 0; i < patch; ++i) {
        const std::size_t src = (pr * grid + pc) * plen + i * run;
        const std::size_t dst = ((pr * patch + i) * size + pc * patch) * channels;
        std::copy(patches.begin() + static_cast<std::ptrdiff_t>(src),
                  patches.begin() + static_cast<std::ptrdiff_t>(src + run),
                  image.begin() + static_cast<std::ptrdiff_t>(dst));
      }
    }
  }
  return image;
}

template class MalVitModel<float>;
template class MalVitModel<double>;
template Tensor<float> attention(GradientTape<float>&, const Tensor<float>&, const Tensor<float>&,
                                 const Tensor<float>&, Tensor<float>*);
template Tensor<double> attention(GradientTape<double>&, const Tensor<double>&, const Tensor<double>&,
                                  const Tensor<double>&, Tensor<double>*);
template Tensor<float> total_loss(GradientTape<float>&, const Tensor<float>&, const MalVitModel<float>&,
                                  LossWeighting);
template Tensor<double> total_loss(GradientTape<double>&, const Tensor<double>&,
                                   const MalVitModel<double>&, LossWeighting);
template std::vector<double> loss_weights(const MalVitModel<float>&);
template std::vector<double> loss_weights(const MalVitModel<double>&);

}  // namespace malvit
