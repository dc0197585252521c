#include "malvit/trainer.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "malvit/container.hpp"
#include "malvit/error.hpp"
#include "malvit/evaluator.hpp"
#include "malvit/ops.hpp"
#include "malvit/rng.hpp"

namespace malvit {

std::string_view weighting_name(LossWeighting w) {
  return w == LossWeighting::learnable ? "learnable" : "fixed";
}

LossWeighting parse_weighting(std::string_view name) {
  if (name == "learnable") return LossWeighting::learnable;
  if (name == "fixed") return LossWeighting::fixed;
  throw ConfigError("unknown loss weighting '" + std::string(name) + "' (expected learnable or fixed)");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (max_epochs > 0 && (patience == 0 || patience > max_epochs)) {
    throw ConfigError("patience must be in [1, max_epochs], got " + std::to_string(patience));
  }
  if (lr && !(*lr > 0.0 && std::isfinite(*lr))) throw ConfigError("lr must be positive and finite");
  if (!lr) {
    if (lr_candidates.empty()) throw ConfigError("lr_probe needs at least one candidate");
    for (double c : lr_candidates) {
      if (!(c > 0.0 && std::isfinite(c))) throw ConfigError("lr candidates must be positive and finite");
    }
    if (probe_batches == 0) throw ConfigError("probe_batches must be positive");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j{{"batch_size", batch_size},
                   {"max_epochs", max_epochs},
                   {"patience", patience},
                   {"lr", lr ? nlohmann::json(*lr) : nlohmann::json(nullptr)},
                   {"lr_candidates", lr_candidates},
                   {"probe_batches", probe_batches},
                   {"beta1", beta1},
                   {"beta2", beta2},
                   {"adam_eps", adam_eps},
                   {"grad_clip", grad_clip},
                   {"seed", seed},
                   {"weighting", weighting_name(weighting)}};
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    if (j.contains("lr") && !j.at("lr").is_null()) c.lr = j.at("lr").get<double>();
    c.lr_candidates = j.value("lr_candidates", c.lr_candidates);
    c.probe_batches = j.value("probe_batches", c.probe_batches);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    c.weighting = parse_weighting(j.value("weighting", std::string("learnable")));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
  c.validate();
  return c;
}

void adam_step(const std::vector<NamedTensor<float>>& params, AdamState& state, double lr, const AdamHyper& hyper) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0f);
      state.v.emplace_back(p.tensor.numel(), 0.0f);
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("Adam state holds " + std::to_string(state.m.size()) + " moments for " +
                        std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params[i].tensor;
    if (state.m[i].size() != t.numel()) throw ContractError("Adam moment shape differs for " + params[i].name);
    if (!t.has_grad()) continue;
    for (float g : t.storage()->grad) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + params[i].name + "'");
    }
  }
  state.t += 1;
  const double b1 = hyper.beta1, b2 = hyper.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    const auto& grad = t.storage()->grad;
    auto w = t.storage()->data.data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double g = grad.empty() ? 0.0 : grad[k];
      const double mk = b1 * m[k] + (1.0 - b1) * g;
      const double vk = b2 * v[k] + (1.0 - b2) * g * g;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      w[k] = static_cast<float>(w[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + hyper.eps));
    }
  }
}

double clip_grad_norm(const std::vector<NamedTensor<float>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (float g : p.tensor.storage()->grad) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& p : params) {
      for (float& g : p.tensor.storage()->grad) g = static_cast<float>(g * f);
    }
  }
  return norm;
}

namespace {

void check_tasks(const MalVitModel<float>& model, const Dataset& ds, const char* what) {
  if (ds.task_names != model.config().task_names) {
    throw DataError(std::string(what) + " task names do not match the model's tasks");
  }
  if (ds.empty()) throw DataError(std::string(what) + " dataset is empty");
}

// One optimization step; returns the (pre-step) total loss.
double train_step(MalVitModel<float>& model, AdamState& adam, const Dataset& ds, const std::vector<std::size_t>& idx,
                  const TrainConfig& cfg, double lr) {
  model.zero_grad();
  GradientTape<float> tape(true);
  const auto x = ds.batch_images(idx);
  const auto y = ds.batch_labels(idx);
  const auto out = model.forward(tape, x);
  const auto per_task = ops::bce_with_logits(tape, out.logits, y, ops::Reduction::mean);
  const auto loss = total_loss(tape, per_task, model, cfg.weighting);
  const double value = loss.item();
  if (!std::isfinite(value)) return value;
  tape.backward(loss);
  const auto params = model.named_parameters();
  if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
  adam_step(params, adam, lr, {cfg.beta1, cfg.beta2, cfg.adam_eps});
  return value;
}

constexpr std::uint64_t kProbeStream = 0x70726f6265ULL;

}  // namespace

double lr_probe(const MalVitModel<float>& model, const Dataset& ds, const std::vector<double>& candidates,
                const TrainConfig& cfg) {
  if (candidates.empty()) throw ConfigError("lr_probe needs at least one candidate");
  if (candidates.size() == 1) return candidates[0];
  check_tasks(model, ds, "probe");
  auto order = batches(ds, cfg.batch_size, true, mix_seed(cfg.seed, kProbeStream));
  if (order.size() > cfg.probe_batches) order.resize(cfg.probe_batches);
  constexpr double beta = 0.7;
  double best = std::numeric_limits<double>::infinity();
  std::optional<double> chosen;
  for (double lr : candidates) {
    auto trial = model.clone();
    AdamState adam;
    double ema = 0.0, first = 0.0, smoothed = 0.0;
    bool diverged = false;
    for (std::size_t b = 0; b < order.size(); ++b) {
      double loss = 0.0;
      try {
        loss = train_step(trial, adam, ds, order[b], cfg, lr);
      } catch (const NumericError&) {
        diverged = true;
        break;
      }
      if (!std::isfinite(loss)) {
        diverged = true;
        break;
      }
      if (b == 0) first = loss;
      ema = beta * ema + (1.0 - beta) * loss;
      smoothed = ema / (1.0 - std::pow(beta, static_cast<double>(b + 1)));
    }
    if (diverged || !std::isfinite(smoothed) || smoothed > 4.0 * std::abs(first)) continue;
    if (smoothed < best) {
      best = smoothed;
      chosen = lr;
    }
  }
  if (!chosen) throw ConfigError("every learning-rate candidate diverged during the probe");
  return *chosen;
}

std::string TrainHistory::to_csv() const {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,val_mean_bacc,monitor";
  for (const auto& t : task_names) os << ",bacc_" << t;
  for (const auto& t : task_names) os << ",lambda_" << t;
  os << '\n';
  for (const auto& e : epochs) {
    os << e.epoch << ',' << format_number(e.train_loss) << ',' << format_number(e.val_loss) << ','
       << format_number(e.val_mean_balanced_accuracy) << ',' << format_number(e.monitor);
    for (double b : e.val_balanced_accuracy) os << ',' << format_number(b);
    for (double l : e.lambdas) os << ',' << format_number(l);
    os << '\n';
  }
  return os.str();
}

nlohmann::json TrainHistory::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : epochs) {
    rows.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"val_loss", e.val_loss},
                    {"val_balanced_accuracy", e.val_balanced_accuracy},
                    {"val_mean_balanced_accuracy", e.val_mean_balanced_accuracy},
                    {"monitor", e.monitor},
                    {"lambdas", e.lambdas}});
  }
  return {{"task_names", task_names},
          {"lr", lr},
          {"best_epoch", best_epoch},
          {"stopped_early", stopped_early},
          {"epochs", rows}};
}

TrainResult train(const MalVitModel<float>& model, const Dataset& train_ds, const Dataset& val_ds,
                  const TrainConfig& cfg, const MonitorFn& monitor) {
  cfg.validate();
  TrainHistory hist;
  hist.task_names = model.config().task_names;
  if (cfg.max_epochs == 0) return {model.clone(), hist};
  check_tasks(model, train_ds, "training");
  check_tasks(model, val_ds, "validation");

  hist.lr = cfg.lr ? *cfg.lr : lr_probe(model, train_ds, cfg.lr_candidates, cfg);
  auto current = model.clone();
  auto best = model.clone();
  double best_monitor = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  AdamState adam;
  EvalOptions eval_opts;
  eval_opts.batch_size = cfg.batch_size;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto order = batches(train_ds, cfg.batch_size, true, mix_seed(cfg.seed, epoch));
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); ++b) {
      const double loss = train_step(current, adam, train_ds, order[b], cfg, hist.lr);
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b + 1));
      }
      loss_sum += loss;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    const auto logits = predict_logits(current, val_ds, eval_opts);
    rec.val_loss = mean_task_loss(logits, val_ds.labels, val_ds.num_tasks());
    const auto metrics = metrics_from_logits(logits, val_ds.labels, val_ds.task_names);
    for (const auto& m : metrics) rec.val_balanced_accuracy.push_back(m.balanced_accuracy());
    rec.val_mean_balanced_accuracy = mean_balanced_accuracy(metrics);
    rec.monitor = monitor ? monitor(epoch, current) : rec.val_mean_balanced_accuracy;
    rec.lambdas = loss_weights(current);
    hist.epochs.push_back(rec);

    if (rec.monitor > best_monitor) {
      best_monitor = rec.monitor;
      best = current.clone();
      hist.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      hist.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  return {std::move(best), std::move(hist)};
}

namespace {

Container checkpoint_container(const MalVitModel<float>& model) {
  Container c;
  c.kind = "checkpoint";
  c.metadata["model_config"] = model.config().to_json();
  for (const auto& p : model.named_parameters()) {
    const auto d = p.tensor.data();
    c.add_f32(p.name, p.tensor.shape(), d);
  }
  return c;
}

}  // namespace

std::string model_hash(const MalVitModel<float>& model) {
  return hash_hex(checkpoint_container(model).content_hash());
}

void save_checkpoint(const MalVitModel<float>& model, const std::filesystem::path& path, const nlohmann::json& extra) {
  auto c = checkpoint_container(model);
  c.metadata["model_hash"] = hash_hex(c.content_hash());
  c.metadata["extra"] = extra;
  save_container(path, c);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<Variant> expected) {
  const auto c = load_container(path, "checkpoint");
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(c.metadata.at("model_config"));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(path.string() + ": bad model config in checkpoint: " + e.what());
  }
  if (expected && cfg.variant != *expected) {
    throw VariantMismatchError(path.string() + ": checkpoint holds a " + std::string(variant_name(cfg.variant)) +
                               " model, expected " + std::string(variant_name(*expected)));
  }
  MalVitModel<float> model(cfg, 0);
  const auto params = model.named_parameters();
  if (params.size() != c.entries.size()) {
    throw CorruptionError(path.string() + ": checkpoint has " + std::to_string(c.entries.size()) +
                          " tensors, the model needs " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    if (!c.contains(p.name)) throw CorruptionError(path.string() + ": missing tensor '" + p.name + "'");
    const auto& e = c.at(p.name);
    if (e.dtype != DType::f32 || e.shape != p.tensor.shape()) {
      throw CorruptionError(path.string() + ": tensor '" + p.name + "' has the wrong dtype or shape");
    }
    const auto values = c.f32(p.name);
    auto dst = p.tensor.storage()->data.data();
    std::copy(values.begin(), values.end(), dst);
  }
  Checkpoint out{std::move(model), c.metadata.value("extra", nlohmann::json::object()), {}};
  out.hash = model_hash(out.model);
  if (c.metadata.contains("model_hash") && c.metadata.at("model_hash") != out.hash) {
    throw IntegrityError(path.string() + ": model hash mismatch");
  }
  return out;
}

}  // namespace malvit
