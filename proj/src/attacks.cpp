#include "malvit/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "malvit/error.hpp"

namespace malvit {

std::string_view attack_family_name(AttackFamily f) {
  switch (f) {
    case AttackFamily::fgsm: return "fgsm";
    case AttackFamily::bim: return "bim";
    case AttackFamily::pgd: return "pgd";
    case AttackFamily::uap: return "uap";
    case AttackFamily::patch_fool: return "patch-fool";
  }
  return "?";
}

AttackFamily parse_attack_family(std::string_view name) {
  if (name == "fgsm") return AttackFamily::fgsm;
  if (name == "bim") return AttackFamily::bim;
  if (name == "pgd") return AttackFamily::pgd;
  if (name == "uap") return AttackFamily::uap;
  if (name == "patch-fool" || name == "patch_fool" || name == "patchfool") return AttackFamily::patch_fool;
  throw ConfigError("unknown attack family '" + std::string(name) + "' (expected fgsm, bim, pgd, uap, patch-fool)");
}

double AttackConfig::effective_alpha() const {
  if (alpha) return *alpha;
  switch (family) {
    case AttackFamily::fgsm: return epsilon;
    case AttackFamily::bim:
    case AttackFamily::pgd: return epsilon / 4.0;
    case AttackFamily::uap: return epsilon / 10.0;
    case AttackFamily::patch_fool: return 0.0;
  }
  return 0.0;
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
  if (alpha && !(*alpha > 0.0)) throw ConfigError("alpha must be positive");
  switch (family) {
    case AttackFamily::fgsm: break;
    case AttackFamily::bim:
    case AttackFamily::pgd:
      if (steps == 0) throw ConfigError(std::string(attack_family_name(family)) + " needs steps >= 1");
      break;
    case AttackFamily::uap:
      if (uap_epochs == 0) throw ConfigError("uap needs epochs >= 1");
      if (uap_batch_size == 0) throw ConfigError("uap batch size must be at least 1");
      break;
    case AttackFamily::patch_fool:
      if (patch_budget == 0) throw ConfigError("patch-fool needs k >= 1");
      if (patch_iters == 0) throw ConfigError("patch-fool needs at least one iteration");
      if (!(patch_lr > 0.0)) throw ConfigError("patch-fool learning rate must be positive");
      break;
  }
}

namespace {

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

}  // namespace

std::string AttackConfig::label() const {
  const std::string name(attack_family_name(family));
  switch (family) {
    case AttackFamily::fgsm: return name + "(eps=" + fmt_g(epsilon) + ")";
    case AttackFamily::bim: return name + "(eps=" + fmt_g(epsilon) + ",steps=" + std::to_string(steps) + ")";
    case AttackFamily::pgd:
      return name + "(eps=" + fmt_g(epsilon) + ",steps=" + std::to_string(steps) + (random_start ? ",rs" : "") + ")";
    case AttackFamily::uap: return name + "(eps=" + fmt_g(epsilon) + ",epochs=" + std::to_string(uap_epochs) + ")";
    case AttackFamily::patch_fool: return name + "(k=" + std::to_string(patch_budget) + ")";
  }
  return name;
}

nlohmann::json AttackConfig::to_json() const {
  nlohmann::json j = {{"family", attack_family_name(family)},
                      {"epsilon", epsilon},
                      {"alpha", alpha ? nlohmann::json(*alpha) : nlohmann::json(nullptr)},
                      {"effective_alpha", effective_alpha()},
                      {"steps", steps},
                      {"random_start", random_start},
                      {"uap_epochs", uap_epochs},
                      {"uap_batch_size", uap_batch_size},
                      {"patch_budget", patch_budget},
                      {"patch_iters", patch_iters},
                      {"patch_lr", patch_lr},
                      {"target_tasks", target_tasks}};
  return j;
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  try {
    AttackConfig c;
    c.family = parse_attack_family(j.at("family").get<std::string>());
    c.epsilon = j.at("epsilon").get<double>();
    if (j.contains("alpha") && !j.at("alpha").is_null()) c.alpha = j.at("alpha").get<double>();
    c.steps = j.value("steps", c.steps);
    c.random_start = j.value("random_start", c.random_start);
    c.uap_epochs = j.value("uap_epochs", c.uap_epochs);
    c.uap_batch_size = j.value("uap_batch_size", c.uap_batch_size);
    c.patch_budget = j.value("patch_budget", c.patch_budget);
    c.patch_iters = j.value("patch_iters", c.patch_iters);
    c.patch_lr = j.value("patch_lr", c.patch_lr);
    c.target_tasks = j.value("target_tasks", c.target_tasks);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed attack config: ") + e.what());
  }
}

AttackConfig AttackConfig::fgsm(double eps) {
  AttackConfig c;
  c.family = AttackFamily::fgsm;
  c.epsilon = eps;
  c.steps = 1;
  return c;
}

AttackConfig AttackConfig::bim(double eps, std::size_t steps) {
  AttackConfig c;
  c.family = AttackFamily::bim;
  c.epsilon = eps;
  c.steps = steps;
  return c;
}

AttackConfig AttackConfig::pgd(double eps, std::size_t steps, bool random_start) {
  AttackConfig c;
  c.family = AttackFamily::pgd;
  c.epsilon = eps;
  c.steps = steps;
  c.random_start = random_start;
  return c;
}

AttackConfig AttackConfig::uap(double eps, std::size_t epochs) {
  AttackConfig c;
  c.family = AttackFamily::uap;
  c.epsilon = eps;
  c.uap_epochs = epochs;
  return c;
}

AttackConfig AttackConfig::patch_fool(std::size_t k) {
  AttackConfig c;
  c.family = AttackFamily::patch_fool;
  c.patch_budget = k;
  return c;
}

Tensor<float> attack_objective(GradientTape<float>& tape, const TaskOutputs<float>& outputs,
                               std::span<const std::uint8_t> labels, const std::vector<std::size_t>& target_tasks) {
  const std::size_t n = outputs.logits.size(1);
  auto per_task = ops::bce_with_logits(tape, outputs.logits, labels, ops::Reduction::sum);
  if (target_tasks.empty()) return ops::sum(tape, per_task);
  std::vector<float> mask(n, 0.0f);
  for (auto t : target_tasks) {
    if (t >= n) throw ConfigError("target task " + std::to_string(t) + " out of range for " + std::to_string(n) + " tasks");
    mask[t] = 1.0f;
  }
  return ops::sum(tape, ops::mul(tape, per_task, Tensor<float>({n}, std::move(mask))));
}

double objective_value(const MalVitModel<float>& model, const Tensor<float>& x, std::span<const std::uint8_t> labels,
                       const std::vector<std::size_t>& target_tasks) {
  GradientTape<float> tape(false);
  return attack_objective(tape, model.forward(tape, x), labels, target_tasks).item();
}

Tensor<float> input_gradient(const MalVitModel<float>& model, const Tensor<float>& x,
                             std::span<const std::uint8_t> labels, const std::vector<std::size_t>& target_tasks) {
  GradientTape<float> tape;
  tape.freeze_all(model.parameters());
  Tensor<float> xi = x.clone();
  xi.set_requires_grad(true);
  auto obj = attack_objective(tape, model.forward(tape, xi), labels, target_tasks);
  if (!std::isfinite(obj.item())) throw NumericError("attack objective is not finite");
  tape.backward(obj);
  Tensor<float> g(x.shape(), xi.grad_values());
  for (float v : g.data()) {
    if (!std::isfinite(v)) throw NumericError("non-finite input gradient");
  }
  return g;
}

float sign_of(float g) {
  if (!std::isfinite(g)) throw NumericError("non-finite gradient component");
  return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f);
}

namespace {

// Float interval of the eps-ball around x intersected with [0, 1], rounded
// inward so every value in it is within eps of x when measured in double.
void ball_bounds(float x, double eps, float& lo, float& hi) {
  const double xd = x;
  lo = static_cast<float>(std::max(0.0, xd - eps));
  hi = static_cast<float>(std::min(1.0, xd + eps));
  while (xd - static_cast<double>(lo) > eps) lo = std::nextafter(lo, 2.0f);
  while (static_cast<double>(hi) - xd > eps) hi = std::nextafter(hi, -1.0f);
}

struct Ball {
  std::vector<float> lo, hi;
};

Ball make_ball(const Tensor<float>& x, double eps) {
  Ball b;
  b.lo.resize(x.numel());
  b.hi.resize(x.numel());
  const auto px = x.data();
  for (std::size_t i = 0; i < px.size(); ++i) ball_bounds(px[i], eps, b.lo[i], b.hi[i]);
  return b;
}

Tensor<float> difference(const Tensor<float>& a, const Tensor<float>& b) {
  std::vector<float> d(a.numel());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] - b.data()[i];
  return Tensor<float>(a.shape(), std::move(d));
}

void check_labels(const MalVitModel<float>& model, const Tensor<float>& x, std::span<const std::uint8_t> labels) {
  if (x.dim() != 4 || labels.size() != x.size(0) * model.config().num_tasks()) {
    throw DimensionError("attack: " + std::to_string(labels.size()) + " labels for images " + shape_str(x.shape()) +
                         " and " + std::to_string(model.config().num_tasks()) + " tasks");
  }
}

}  // namespace

AdversarialBatch iterative_sign_attack(const InputGradientFn& gradient, const Tensor<float>& x, double eps,
                                       double alpha, std::size_t steps, Tensor<float> start) {
  if (start.shape() != x.shape()) throw DimensionError("attack start does not match the input shape");
  const Ball ball = make_ball(x, eps);
  const float a = static_cast<float>(alpha);
  Tensor<float> cur = std::move(start);
  cur.set_requires_grad(false);
  for (std::size_t s = 0; s < steps && eps > 0.0; ++s) {
    const auto g = gradient(cur);
    if (g.shape() != x.shape()) throw DimensionError("gradient shape does not match the input");
    auto pc = cur.data();
    const auto pg = g.data();
    for (std::size_t i = 0; i < pc.size(); ++i) {
      const float v = std::clamp(pc[i] + a * sign_of(pg[i]), 0.0f, 1.0f);
      pc[i] = std::clamp(v, ball.lo[i], ball.hi[i]);
    }
  }
  AdversarialBatch out;
  out.delta = difference(cur, x);
  out.x_adv = std::move(cur);
  return out;
}

namespace {

AdversarialBatch sign_iterations(const MalVitModel<float>& model, const Tensor<float>& x,
                                 std::span<const std::uint8_t> labels, const AttackConfig& cfg, double alpha,
                                 std::size_t steps, Tensor<float> start) {
  auto grad = [&](const Tensor<float>& cur) { return input_gradient(model, cur, labels, cfg.target_tasks); };
  return iterative_sign_attack(grad, x, cfg.epsilon, alpha, steps, std::move(start));
}

}  // namespace

AdversarialBatch fgsm(const MalVitModel<float>& model, const Tensor<float>& x, std::span<const std::uint8_t> labels,
                      const AttackConfig& cfg) {
  cfg.validate();
  check_labels(model, x, labels);
  return sign_iterations(model, x, labels, cfg, cfg.epsilon, 1, x.clone());
}

AdversarialBatch bim(const MalVitModel<float>& model, const Tensor<float>& x, std::span<const std::uint8_t> labels,
                     const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.steps == 0) throw ConfigError("bim needs steps >= 1");
  check_labels(model, x, labels);
  return sign_iterations(model, x, labels, cfg, cfg.effective_alpha(), cfg.steps, x.clone());
}

AdversarialBatch pgd(const MalVitModel<float>& model, const Tensor<float>& x, std::span<const std::uint8_t> labels,
                     const AttackConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.steps == 0) throw ConfigError("pgd needs steps >= 1");
  check_labels(model, x, labels);
  if (!cfg.random_start) return sign_iterations(model, x, labels, cfg, cfg.effective_alpha(), cfg.steps, x.clone());
  const Ball ball = make_ball(x, cfg.epsilon);
  Tensor<float> start = x.clone();
  auto ps = start.data();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const double v = static_cast<double>(ps[i]) + rng.uniform(-cfg.epsilon, cfg.epsilon);
    ps[i] = std::clamp(static_cast<float>(std::clamp(v, 0.0, 1.0)), ball.lo[i], ball.hi[i]);
  }
  return sign_iterations(model, x, labels, cfg, cfg.effective_alpha(), cfg.steps, std::move(start));
}

Tensor<float> apply_uap(const Tensor<float>& x, const Tensor<float>& delta, std::optional<double> eps) {
  if (x.dim() != 4 || delta.dim() != 3 || delta.size(0) != x.size(1) || delta.size(1) != x.size(2) ||
      delta.size(2) != x.size(3)) {
    throw DimensionError("apply_uap: delta " + shape_str(delta.shape()) + " does not match images " +
                         shape_str(x.shape()));
  }
  const std::size_t per = delta.numel();
  Tensor<float> out = x.clone();
  out.set_requires_grad(false);
  auto po = out.data();
  const auto pd = delta.data();
  for (std::size_t i = 0; i < po.size(); ++i) {
    const float xi = po[i];
    float v = std::clamp(xi + pd[i % per], 0.0f, 1.0f);
    if (eps) {
      float lo, hi;
      ball_bounds(xi, *eps, lo, hi);
      v = std::clamp(v, lo, hi);
    }
    po[i] = v;
  }
  return out;
}

UapResult uap_train(const MalVitModel<float>& model, const Dataset& ds, const AttackConfig& cfg, Rng& rng) {
  cfg.validate();
  if (ds.empty()) throw DataError("uap_train needs a non-empty dataset");
  if (ds.task_names != model.config().task_names) throw DataError("uap_train: dataset tasks do not match the model");
  const auto& c = model.config();
  const Shape img_shape{c.image_size, c.image_size, c.channels};
  const std::size_t per = shape_numel(img_shape);
  float bound = static_cast<float>(cfg.epsilon);
  while (static_cast<double>(bound) > cfg.epsilon) bound = std::nextafter(bound, -1.0f);
  const float alpha = static_cast<float>(cfg.effective_alpha());

  UapResult res;
  res.delta = Tensor<float>(img_shape, 0.0f);
  for (std::size_t epoch = 0; epoch < cfg.uap_epochs; ++epoch) {
    double total = 0.0;
    const auto order = batches(ds, cfg.uap_batch_size, true, rng.next_u64());
    for (const auto& idx : order) {
      const auto x = ds.batch_images(idx);
      const auto labels = ds.batch_labels(idx);
      Tensor<float> xadv = apply_uap(x, res.delta, cfg.epsilon);
      GradientTape<float> tape;
      tape.freeze_all(model.parameters());
      xadv.set_requires_grad(true);
      auto obj = attack_objective(tape, model.forward(tape, xadv), labels, cfg.target_tasks);
      if (!std::isfinite(obj.item())) throw NumericError("uap objective is not finite");
      total += obj.item() / static_cast<double>(idx.size());
      tape.backward(obj);
      const auto g = xadv.grad_values();
      // Gradient w.r.t. delta: pixels pinned by the [0, 1] clip pass nothing.
      std::vector<double> gd(per, 0.0);
      const auto px = x.data();
      auto pd = res.delta.data();
      for (std::size_t b = 0; b < idx.size(); ++b) {
        for (std::size_t j = 0; j < per; ++j) {
          const float raw = px[b * per + j] + pd[j];
          if (raw > 0.0f && raw < 1.0f) gd[j] += g[b * per + j];
        }
      }
      for (std::size_t j = 0; j < per; ++j) {
        if (!std::isfinite(gd[j])) throw NumericError("non-finite uap gradient");
        const float s = gd[j] > 0 ? 1.0f : (gd[j] < 0 ? -1.0f : 0.0f);
        pd[j] = std::clamp(pd[j] + alpha * s, -bound, bound);
      }
    }
    res.epoch_objective.push_back(total / static_cast<double>(order.size()));
  }
  return res;
}

std::vector<std::vector<std::size_t>> select_influential_patches(const std::vector<Tensor<float>>& attention_maps,
                                                                 std::size_t num_tokens, std::size_t k) {
  if (attention_maps.empty()) throw ContractError("no attention maps recorded (depth 0 model?)");
  const auto& first = attention_maps.front();
  const std::size_t batch = first.size(0), seq = first.size(-1);
  if (seq <= num_tokens) throw DimensionError("attention maps have no patch tokens");
  const std::size_t n = seq - num_tokens;
  if (k == 0 || k > n) {
    throw ConfigError("patch budget k=" + std::to_string(k) + " must be in [1, " + std::to_string(n) + "]");
  }
  std::vector<std::vector<double>> infl(batch, std::vector<double>(n, 0.0));
  for (const auto& a : attention_maps) {
    if (a.dim() != 4 || a.size(0) != batch || a.size(2) != seq || a.size(3) != seq) {
      throw DimensionError("attention map shape " + shape_str(a.shape()) + " is inconsistent");
    }
    const std::size_t heads = a.size(1);
    const float* p = a.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t q = 0; q < seq; ++q) {
          const float* row = p + ((b * heads + h) * seq + q) * seq + num_tokens;
          for (std::size_t j = 0; j < n; ++j) infl[b][j] += row[j];
        }
      }
    }
  }
  std::vector<std::vector<std::size_t>> out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return infl[b][i] > infl[b][j]; });
    out[b].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return out;
}

std::vector<std::vector<std::size_t>> select_influential_patches(const MalVitModel<float>& model,
                                                                 const Tensor<float>& x, std::size_t k) {
  const auto& c = model.config();
  if (k == 0 || k > c.num_patches()) {
    throw ConfigError("patch budget k=" + std::to_string(k) + " must be in [1, " + std::to_string(c.num_patches()) + "]");
  }
  GradientTape<float> tape(false);
  const auto out = model.forward(tape, x, true);
  return select_influential_patches(out.attention_maps, c.num_tokens(), k);
}

AdversarialBatch patch_fool(const MalVitModel<float>& model, const Tensor<float>& x,
                            std::span<const std::uint8_t> labels, const AttackConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.patch_budget == 0) throw ConfigError("patch-fool needs k >= 1");
  if (cfg.patch_iters == 0) throw ConfigError("patch-fool needs at least one iteration");
  check_labels(model, x, labels);
  const auto& c = model.config();
  const std::size_t batch = x.size(0), size = c.image_size, ch = c.channels, P = c.patch_size, grid = c.grid();
  const std::size_t per = c.image_numel();

  AdversarialBatch out;
  out.selected_patches = select_influential_patches(model, x, cfg.patch_budget);

  // Flat indices of every pixel value inside the selected footprints.
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < batch; ++b) {
    for (auto p : out.selected_patches[b]) {
      const std::size_t r0 = (p / grid) * P, c0 = (p % grid) * P;
      for (std::size_t y = 0; y < P; ++y) {
        for (std::size_t xx = 0; xx < P; ++xx) {
          for (std::size_t k = 0; k < ch; ++k) idx.push_back(b * per + ((r0 + y) * size + c0 + xx) * ch + k);
        }
      }
    }
  }

  Tensor<float> cur = x.clone();
  cur.set_requires_grad(false);
  auto pc = cur.data();
  for (auto i : idx) pc[i] = static_cast<float>(rng.uniform());

  constexpr double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
  std::vector<double> m(idx.size(), 0.0), v(idx.size(), 0.0);
  for (std::size_t t = 1; t <= cfg.patch_iters; ++t) {
    const auto g = input_gradient(model, cur, labels, cfg.target_tasks);
    const auto pg = g.data();
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const double gj = pg[idx[j]];
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double step = cfg.patch_lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + adam_eps);
      pc[idx[j]] = std::clamp(static_cast<float>(pc[idx[j]] + step), 0.0f, 1.0f);
    }
  }
  out.delta = difference(cur, x);
  out.x_adv = std::move(cur);
  return out;
}

AdversarialBatch run_attack(const MalVitModel<float>& model, const Tensor<float>& x,
                            std::span<const std::uint8_t> labels, const AttackConfig& cfg, Rng& rng,
                            const Tensor<float>* uap_delta) {
  switch (cfg.family) {
    case AttackFamily::fgsm: return fgsm(model, x, labels, cfg);
    case AttackFamily::bim: return bim(model, x, labels, cfg);
    case AttackFamily::pgd: return pgd(model, x, labels, cfg, rng);
    case AttackFamily::patch_fool: return patch_fool(model, x, labels, cfg, rng);
    case AttackFamily::uap: {
      if (uap_delta == nullptr) throw ContractError("uap evaluation needs a trained perturbation");
      AdversarialBatch out;
      out.x_adv = apply_uap(x, *uap_delta, cfg.epsilon);
      out.delta = difference(out.x_adv, x);
      return out;
    }
  }
  throw ConfigError("unknown attack family");
}

void save_perturbation(const std::filesystem::path& path, const Tensor<float>& delta, const AttackConfig& cfg,
                       std::uint64_t seed, const std::string& model_hash, const Tensor<float>* x_adv) {
  Container c;
  c.kind = "perturbation";
  c.metadata = {{"attack", cfg.to_json()}, {"seed", seed}, {"model_hash", model_hash}};
  c.add_f32("delta", delta.shape(), delta.data());
  if (x_adv != nullptr) c.add_f32("x_adv", x_adv->shape(), x_adv->data());
  save_container(path, c);
  nlohmann::json sidecar = c.metadata;
  sidecar["container"] = path.filename().string();
  sidecar["content_hash"] = hash_hex(c.content_hash());
  write_file_atomic(std::filesystem::path(path.string() + ".json"), sidecar.dump(2) + "\n");
}

PerturbationFile load_perturbation(const std::filesystem::path& path) {
  const Container c = load_container(path, "perturbation");
  PerturbationFile f;
  try {
    f.config = AttackConfig::from_json(c.metadata.at("attack"));
    f.seed = c.metadata.at("seed").get<std::uint64_t>();
    f.model_hash = c.metadata.at("model_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("malformed perturbation metadata: ") + e.what());
  }
  f.delta = Tensor<float>(c.at("delta").shape, c.f32("delta"));
  if (c.contains("x_adv")) f.x_adv = Tensor<float>(c.at("x_adv").shape, c.f32("x_adv"));
  return f;
}

}  // namespace malvit
