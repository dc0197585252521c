#include "malvit/evaluator.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "malvit/error.hpp"
#include "malvit/parallel.hpp"

namespace malvit {

double TaskMetrics::tpr() const noexcept {
  return tpr_undefined() ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}
double TaskMetrics::tnr() const noexcept {
  return tnr_undefined() ? 0.0 : static_cast<double>(tn) / static_cast<double>(tn + fp);
}
double TaskMetrics::accuracy() const noexcept {
  return count() == 0 ? 0.0 : static_cast<double>(tp + tn) / static_cast<double>(count());
}
double TaskMetrics::balanced_accuracy() const noexcept { return 0.5 * (tpr() + tnr()); }

TaskMetrics confusion(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> labels, std::string task) {
  if (preds.size() != labels.size()) {
    throw ContractError("balanced accuracy: " + std::to_string(preds.size()) + " predictions vs " +
                        std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) throw ContractError("balanced accuracy of an empty set");
  TaskMetrics m;
  m.task = std::move(task);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] > 1 || labels[i] > 1) throw DataError("predictions and labels must be 0 or 1");
    if (labels[i]) {
      (preds[i] ? m.tp : m.fn)++;
    } else {
      (preds[i] ? m.fp : m.tn)++;
    }
  }
  return m;
}

double balanced_accuracy(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> labels) {
  return confusion(preds, labels).balanced_accuracy();
}

std::vector<TaskMetrics> metrics_from_logits(std::span<const float> logits, std::span<const std::uint8_t> labels,
                                             const std::vector<std::string>& task_names) {
  const std::size_t n = task_names.size();
  if (n == 0 || logits.size() != labels.size() || logits.size() % n != 0) {
    throw ContractError("logits/labels do not form a [N, " + std::to_string(n) + "] matrix");
  }
  const std::size_t rows = logits.size() / n;
  std::vector<TaskMetrics> out;
  std::vector<std::uint8_t> p(rows), y(rows);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t i = 0; i < rows; ++i) {
      p[i] = logits[i * n + t] > 0.0f ? 1 : 0;
      y[i] = labels[i * n + t];
    }
    out.push_back(confusion(p, y, task_names[t]));
  }
  return out;
}

double mean_balanced_accuracy(const std::vector<TaskMetrics>& m) {
  if (m.empty()) return 0.0;
  double s = 0.0;
  for (const auto& t : m) s += t.balanced_accuracy();
  return s / static_cast<double>(m.size());
}

namespace {

void check_tasks(const MalVitModel<float>& model, const Dataset& ds) {
  if (ds.task_names != model.config().task_names) {
    std::string a, b;
    for (const auto& t : model.config().task_names) a += (a.empty() ? "" : ",") + t;
    for (const auto& t : ds.task_names) b += (b.empty() ? "" : ",") + t;
    throw DataError("model tasks [" + a + "] do not match dataset tasks [" + b + "]");
  }
  if (ds.empty()) throw DataError("cannot evaluate an empty dataset");
}

std::vector<float> logits_of(const MalVitModel<float>& model, const Tensor<float>& x) {
  GradientTape<float> tape(false);
  const auto out = model.forward(tape, x);
  const auto d = out.logits.data();
  return {d.begin(), d.end()};
}

// Runs fn(chunk, indices) -> logits for every fixed chunk and stitches the rows.
template <typename Fn>
std::vector<float> chunked_logits(const Dataset& ds, std::size_t n_tasks, const EvalOptions& opts, Fn fn) {
  const auto chunks = batches(ds.size(), opts.batch_size, false, 0);
  std::vector<std::vector<float>> parts(chunks.size());
  parallel_for(chunks.size(), opts.threads, [&](std::size_t c) { parts[c] = fn(c, chunks[c]); });
  std::vector<float> out;
  out.reserve(ds.size() * n_tasks);
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace

std::vector<float> predict_logits(const MalVitModel<float>& model, const Dataset& ds, const EvalOptions& opts) {
  check_tasks(model, ds);
  return chunked_logits(ds, model.config().num_tasks(), opts, [&](std::size_t, const std::vector<std::size_t>& idx) {
    return logits_of(model, ds.batch_images(idx));
  });
}

double mean_task_loss(std::span<const float> logits, std::span<const std::uint8_t> labels, std::size_t num_tasks) {
  if (num_tasks == 0 || logits.size() != labels.size() || logits.empty() || logits.size() % num_tasks != 0) {
    throw ContractError("logits/labels do not form a [N, " + std::to_string(num_tasks) + "] matrix");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += task_loss(logits[i], labels[i]);
  return s / static_cast<double>(logits.size() / num_tasks);
}

std::vector<TaskMetrics> evaluate_clean(const MalVitModel<float>& model, const Dataset& ds, const EvalOptions& opts) {
  const auto logits = predict_logits(model, ds, opts);
  return metrics_from_logits(logits, ds.labels, ds.task_names);
}

std::vector<TaskMetrics> evaluate_robust(const MalVitModel<float>& model, const Dataset& ds, const AttackConfig& cfg,
                                         std::uint64_t seed, const EvalOptions& opts) {
  cfg.validate();
  check_tasks(model, ds);
  const Rng root(seed);
  Tensor<float> uap_delta;
  if (cfg.family == AttackFamily::uap) {
    const auto& c = model.config();
    if (cfg.epsilon == 0.0) {
      uap_delta = Tensor<float>({c.image_size, c.image_size, c.channels}, 0.0f);
    } else {
      Rng urng = root.derive(0xffffffffULL);
      uap_delta = uap_train(model, opts.uap_source ? *opts.uap_source : ds, cfg, urng).delta;
    }
  }
  const auto logits =
      chunked_logits(ds, model.config().num_tasks(), opts, [&](std::size_t c, const std::vector<std::size_t>& idx) {
        Rng rng = root.derive(c);
        const auto x = ds.batch_images(idx);
        const auto labels = ds.batch_labels(idx);
        const auto adv = run_attack(model, x, labels, cfg, rng, uap_delta.defined() ? &uap_delta : nullptr);
        return logits_of(model, adv.x_adv);
      });
  return metrics_from_logits(logits, ds.labels, ds.task_names);
}

std::vector<Increment> relative_increment(std::span<const double> mal, std::span<const double> sal) {
  if (mal.size() != sal.size()) throw ContractError("relative_increment needs matching task sets");
  std::vector<Increment> out(mal.size());
  for (std::size_t i = 0; i < mal.size(); ++i) {
    if (sal[i] != 0.0) out[i].percent = 100.0 * (mal[i] - sal[i]) / sal[i];
  }
  return out;
}

std::string_view sweep_axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::uap_epsilon: return "uap-eps";
    case SweepAxis::patchfool_k: return "patchfool-k";
  }
  return "?";
}

SweepAxis parse_sweep_axis(std::string_view name) {
  if (name == "uap-eps" || name == "uap_epsilon") return SweepAxis::uap_epsilon;
  if (name == "patchfool-k" || name == "patchfool_k") return SweepAxis::patchfool_k;
  throw ConfigError("unknown sweep axis '" + std::string(name) + "' (expected uap-eps or patchfool-k)");
}

SweepResult sweep(const MalVitModel<float>& model, const Dataset& ds, SweepAxis axis, const std::vector<double>& values,
                  const AttackConfig& base, std::uint64_t seed, const EvalOptions& opts) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (!(values[i] > values[i - 1])) throw ConfigError("sweep values must be strictly ascending");
  }
  SweepResult res;
  res.axis = axis;
  res.base = base;
  for (double v : values) {
    AttackConfig cfg = base;
    if (axis == SweepAxis::uap_epsilon) {
      cfg.family = AttackFamily::uap;
      cfg.epsilon = v;
    } else {
      if (!(v >= 1.0) || v != std::floor(v)) throw ConfigError("patch counts must be positive integers");
      cfg.family = AttackFamily::patch_fool;
      cfg.patch_budget = static_cast<std::size_t>(v);
    }
    SweepRow row;
    row.value = v;
    row.metrics = evaluate_robust(model, ds, cfg, seed, opts);
    row.mean_balanced_accuracy = mean_balanced_accuracy(row.metrics);
    res.rows.push_back(std::move(row));
  }
  return res;
}

SweepResult mean_curve(const std::vector<SweepResult>& curves) {
  if (curves.empty()) throw ContractError("mean_curve of no curves");
  SweepResult out;
  out.axis = curves[0].axis;
  out.base = curves[0].base;
  for (std::size_t r = 0; r < curves[0].rows.size(); ++r) {
    SweepRow row;
    row.value = curves[0].rows[r].value;
    double s = 0.0;
    for (const auto& c : curves) {
      if (c.axis != out.axis || c.rows.size() != curves[0].rows.size() || c.rows[r].value != row.value) {
        throw ContractError("mean_curve needs curves over identical values");
      }
      s += c.rows[r].mean_balanced_accuracy;
      row.metrics.insert(row.metrics.end(), c.rows[r].metrics.begin(), c.rows[r].metrics.end());
    }
    row.mean_balanced_accuracy = s / static_cast<double>(curves.size());
    out.rows.push_back(std::move(row));
  }
  return out;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

namespace {

// JSON numbers carry the same 6 significant digits as the CSV files.
nlohmann::json num(double v) {
  if (!std::isfinite(v)) return nullptr;
  return std::stod(format_number(v));
}

nlohmann::json metrics_json(const TaskMetrics& m) {
  nlohmann::json flags = nlohmann::json::array();
  if (m.tpr_undefined()) flags.push_back("tpr_undefined");
  if (m.tnr_undefined()) flags.push_back("tnr_undefined");
  return {{"task", m.task},
          {"tp", m.tp},
          {"fp", m.fp},
          {"tn", m.tn},
          {"fn", m.fn},
          {"accuracy", num(m.accuracy())},
          {"balanced_accuracy", num(m.balanced_accuracy())},
          {"flags", flags}};
}

TaskMetrics metrics_from(const nlohmann::json& j) {
  TaskMetrics m;
  m.task = j.at("task").get<std::string>();
  m.tp = j.at("tp").get<std::size_t>();
  m.fp = j.at("fp").get<std::size_t>();
  m.tn = j.at("tn").get<std::size_t>();
  m.fn = j.at("fn").get<std::size_t>();
  return m;
}

nlohmann::json metrics_list(const std::vector<TaskMetrics>& ms) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& m : ms) a.push_back(metrics_json(m));
  return a;
}

std::vector<TaskMetrics> metrics_list_from(const nlohmann::json& j) {
  std::vector<TaskMetrics> out;
  for (const auto& m : j) out.push_back(metrics_from(m));
  return out;
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["model"] = {{"name", model.name},
                {"variant", variant_name(model.variant)},
                {"config_hash", model.config_hash},
                {"seed", model.seed},
                {"task_names", model.task_names}};
  j["clean"] = {{"metrics", metrics_list(clean)}, {"mean_balanced_accuracy", num(mean_balanced_accuracy(clean))}};
  j["robust"] = nlohmann::json::array();
  for (const auto& r : robust) {
    j["robust"].push_back({{"attack", r.config.to_json()},
                           {"label", r.config.label()},
                           {"metrics", metrics_list(r.metrics)},
                           {"mean_balanced_accuracy", num(mean_balanced_accuracy(r.metrics))}});
  }
  j["sweeps"] = nlohmann::json::array();
  for (const auto& s : sweeps) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : s.rows) {
      rows.push_back({{"value", num(r.value)},
                      {"mean_balanced_accuracy", num(r.mean_balanced_accuracy)},
                      {"metrics", metrics_list(r.metrics)}});
    }
    j["sweeps"].push_back({{"axis", sweep_axis_name(s.axis)}, {"base", s.base.to_json()}, {"rows", rows}});
  }
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion) {
      throw VersionError("report schema version " + j.at("schema_version").dump() + " is not supported");
    }
    EvalReport r;
    const auto& m = j.at("model");
    r.model.name = m.at("name").get<std::string>();
    r.model.variant = parse_variant(m.at("variant").get<std::string>());
    r.model.config_hash = m.at("config_hash").get<std::string>();
    r.model.seed = m.at("seed").get<std::uint64_t>();
    r.model.task_names = m.at("task_names").get<std::vector<std::string>>();
    r.clean = metrics_list_from(j.at("clean").at("metrics"));
    for (const auto& a : j.at("robust")) {
      r.robust.push_back({AttackConfig::from_json(a.at("attack")), metrics_list_from(a.at("metrics"))});
    }
    for (const auto& s : j.at("sweeps")) {
      SweepResult sr;
      sr.axis = parse_sweep_axis(s.at("axis").get<std::string>());
      sr.base = AttackConfig::from_json(s.at("base"));
      for (const auto& row : s.at("rows")) {
        SweepRow rr;
        rr.value = row.at("value").get<double>();
        rr.metrics = metrics_list_from(row.at("metrics"));
        rr.mean_balanced_accuracy = row.at("mean_balanced_accuracy").get<double>();
        sr.rows.push_back(std::move(rr));
      }
      r.sweeps.push_back(std::move(sr));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed evaluation report: ") + e.what());
  }
}

EvalReport merge_single_task_reports(const std::vector<EvalReport>& reports, const std::vector<std::string>& task_order,
                                     const std::string& name) {
  if (reports.empty()) throw DataError("no reports to merge");
  std::map<std::string, const EvalReport*> by_task;
  for (const auto& r : reports) {
    if (r.clean.size() != 1) throw DataError("report '" + r.model.name + "' is not a single-task report");
    by_task[r.clean[0].task] = &r;
  }
  EvalReport out;
  out.model.name = name;
  out.model.variant = reports[0].model.variant;
  out.model.seed = reports[0].model.seed;
  out.model.task_names = task_order;
  std::string hashes;
  for (const auto& t : task_order) {
    auto it = by_task.find(t);
    if (it == by_task.end()) throw DataError("no single-task report for task '" + t + "'");
    hashes += (hashes.empty() ? "" : "+") + it->second->model.config_hash;
    out.clean.push_back(it->second->clean[0]);
  }
  out.model.config_hash = hashes;
  const auto& first = *by_task.at(task_order[0]);
  for (std::size_t a = 0; a < first.robust.size(); ++a) {
    AttackResult row{first.robust[a].config, {}};
    for (const auto& t : task_order) {
      const auto& r = *by_task.at(t);
      if (r.robust.size() != first.robust.size() || r.robust[a].config.label() != row.config.label()) {
        throw DataError("single-task reports ran different attacks (task '" + t + "')");
      }
      row.metrics.push_back(r.robust[a].metrics.at(0));
    }
    out.robust.push_back(std::move(row));
  }
  return out;
}

namespace {

std::string pct(double v) { return format_number(100.0 * v); }

std::vector<const TaskMetrics*> ordered(const std::vector<TaskMetrics>& ms, const std::vector<std::string>& tasks) {
  std::vector<const TaskMetrics*> out;
  for (const auto& t : tasks) {
    const TaskMetrics* found = nullptr;
    for (const auto& m : ms) {
      if (m.task == t) found = &m;
    }
    if (!found) throw DataError("report has no metrics for task '" + t + "'");
    out.push_back(found);
  }
  return out;
}

void table_row(std::ostringstream& os, const std::string& model, const std::string& attack,
               const std::vector<TaskMetrics>& ms, const std::vector<std::string>& tasks) {
  os << model << ',' << attack;
  double s = 0.0;
  for (const auto* m : ordered(ms, tasks)) {
    os << ',' << pct(m->balanced_accuracy());
    s += m->balanced_accuracy();
  }
  os << ',' << pct(s / static_cast<double>(tasks.size())) << '\n';
}

}  // namespace

std::string table2_csv(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw DataError("no reports for the table");
  const auto& tasks = reports[0].model.task_names;
  std::ostringstream os;
  os << "model,attack";
  for (const auto& t : tasks) os << ',' << t;
  os << ",avg\n";
  for (const auto& r : reports) {
    table_row(os, r.model.name, "none", r.clean, tasks);
    for (const auto& a : r.robust) table_row(os, r.model.name, a.config.label(), a.metrics, tasks);
  }
  return os.str();
}

std::string table1_csv(const EvalReport& mal, const EvalReport& sal) {
  const auto& tasks = mal.model.task_names;
  std::vector<double> a, b;
  for (const auto* m : ordered(mal.clean, tasks)) a.push_back(m->balanced_accuracy());
  for (const auto* m : ordered(sal.clean, tasks)) b.push_back(m->balanced_accuracy());
  const auto inc = relative_increment(a, b);
  std::ostringstream os;
  os << "method";
  for (const auto& t : tasks) os << ',' << t;
  os << '\n' << mal.model.name << " vs " << sal.model.name;
  for (const auto& i : inc) os << ',' << (i.defined() ? format_number(*i.percent) : "nan");
  os << '\n';
  return os.str();
}

std::string sweep_csv(const SweepResult& s) {
  std::ostringstream os;
  os << (s.axis == SweepAxis::uap_epsilon ? "epsilon" : "k") << ",mean_balanced_accuracy";
  std::vector<std::string> tasks;
  if (!s.rows.empty()) {
    for (const auto& m : s.rows[0].metrics) tasks.push_back(m.task);
  }
  for (const auto& t : tasks) os << ',' << t;
  os << '\n';
  for (const auto& r : s.rows) {
    os << format_number(r.value) << ',' << pct(r.mean_balanced_accuracy);
    for (const auto& m : r.metrics) os << ',' << pct(m.balanced_accuracy());
    os << '\n';
  }
  return os.str();
}

void emit_report(const EvalReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  write_file_atomic(out_dir / "report.json", report.to_json().dump(2) + "\n");
  write_file_atomic(out_dir / "table2.csv", table2_csv({report}));
  for (const auto& s : report.sweeps) {
    write_file_atomic(out_dir / ("sweep_" + std::string(sweep_axis_name(s.axis)) + ".csv"), sweep_csv(s));
  }
}

}  // namespace malvit
