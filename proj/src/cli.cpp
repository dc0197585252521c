#include "malvit/cli.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "malvit/container.hpp"
#include "malvit/error.hpp"
#include "malvit/evaluator.hpp"
#include "malvit/trainer.hpp"

#ifndef MALVIT_SOURCE_REVISION
#define MALVIT_SOURCE_REVISION "unknown"
#endif

namespace fs = std::filesystem;

namespace malvit {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Error reports must stay on one line.
std::string one_line(std::string s) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

std::string join(const std::vector<std::string>& v, const char* sep = ",") {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : sep) + x;
  return s;
}

}  // namespace

std::map<std::string, std::string> parse_kv_config(std::istream& in, const std::string& source) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const auto key = trim(std::string_view(t).substr(0, eq));
    auto value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (!kv.emplace(key, value).second) throw ConfigError(where + ": duplicate key '" + key + "'");
  }
  return kv;
}

std::map<std::string, std::string> read_kv_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  return parse_kv_config(in, path.string());
}

std::string format_kv_config(const std::map<std::string, std::string>& kv, const std::string& header) {
  std::string s;
  if (!header.empty()) s += "# " + header + "\n";
  for (const auto& [k, v] : kv) s += k + " = " + v + "\n";
  return s;
}

FileRecord file_record(const fs::path& path) {
  const auto bytes = read_file(path);
  return {path.generic_string(), hash_hex(crc32_of(bytes)), bytes.size()};
}

nlohmann::json RunManifest::to_json() const {
  auto files = [](const std::vector<FileRecord>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& f : v) a.push_back({{"path", f.path}, {"crc32", f.crc32}, {"bytes", f.bytes}});
    return a;
  };
  return {{"command", command},
          {"argv", argv},
          {"resolved", resolved},
          {"seed", seed},
          {"threads", threads},
          {"versions", versions},
          {"inputs", files(inputs)},
          {"outputs", files(outputs)},
          {"started_at", started_at},
          {"wall_clock_seconds", wall_clock_seconds},
          {"source_revision", source_revision}};
}

namespace {

struct Options {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string config;
  std::string out = "out";

  std::size_t attrs = 9, n = 8000, n_val = 1000, n_test = 1000, image_size = 64;
  double noise = 0.05;

  std::string data, variant = "mal", tasks = "all", preset = "desk", weighting = "learnable";
  std::size_t epochs = 100, patience = 10, batch_size = 128, probe_batches = 10;
  double lr = 0.0, grad_clip = 1.0;

  std::string checkpoint, split = "test", attacks = "none", uap_split, name;
  double eps = 0.03, alpha = 0.0, patch_lr = 0.05;
  std::size_t steps = 10, uap_epochs = 5, uap_batch_size = 64, k = 1, patch_iters = 60, limit = 0;
  bool random_start = false;

  std::string mal_report;
  std::vector<std::string> sal_reports, checkpoints;
  std::string axis, values;
};

// Command state: the output directory and the manifest being assembled.
struct Run {
  const Options& o;
  RunManifest manifest;
  fs::path out;
  std::ostream& log;

  void input(const fs::path& p) { manifest.inputs.push_back(file_record(p)); }
  void output(const fs::path& p) { manifest.outputs.push_back(file_record(p)); }
  void text(const std::string& name, const std::string& body) {
    write_file_atomic(out / name, body);
    output(out / name);
  }
};

void add_eval_options(CLI::App* c, Options& o) {
  c->add_option("--eps", o.eps, "L-inf budget in [0,1] pixel units");
  // No default string: an unset alpha must stay unset when a run is repeated
  // from its resolved configuration.
  c->add_option("--alpha", o.alpha, "step size (default: eps for fgsm, eps/4 bim/pgd, eps/10 uap)")->default_str("");
  c->add_option("--steps", o.steps, "BIM/PGD iterations");
  c->add_flag("--random-start", o.random_start, "PGD uniform start inside the eps-ball");
  c->add_option("--epochs", o.uap_epochs, "UAP training epochs");
  c->add_option("--uap-batch-size", o.uap_batch_size, "UAP training batch size");
  c->add_option("--uap-split", o.uap_split, "split the UAP is trained on (default: the evaluated split)");
  c->add_option("--k", o.k, "Patch-Fool patch budget")->check(CLI::PositiveNumber);
  c->add_option("--patch-iters", o.patch_iters, "Patch-Fool optimization steps");
  c->add_option("--patch-lr", o.patch_lr, "Patch-Fool Adam learning rate");
  c->add_option("--batch-size", o.batch_size, "evaluation chunk size")->check(CLI::PositiveNumber);
  c->add_option("--split", o.split, "dataset split to evaluate");
  c->add_option("--limit", o.limit, "evaluate only the first N samples (0: all)");
  c->add_option("--name", o.name, "model name in reports");
}

fs::path split_path(const Options& o, std::string_view split) {
  if (o.data.empty()) throw CLI::ValidationError("--data", "a dataset directory is required");
  return fs::path(o.data) / (std::string(split_name(parse_split(split))) + ".mvd");
}

Dataset load_split(Run& run, std::string_view split) {
  const auto p = split_path(run.o, split);
  run.input(p);
  return load_dataset(p);
}

AttackConfig attack_from(const Options& o, AttackFamily family, const CLI::App* cmd) {
  AttackConfig c;
  c.family = family;
  c.epsilon = o.eps;
  if (cmd->get_option("--alpha")->count() > 0) c.alpha = o.alpha;
  c.steps = o.steps;
  c.random_start = o.random_start;
  c.uap_epochs = o.uap_epochs;
  c.uap_batch_size = o.uap_batch_size;
  c.patch_budget = o.k;
  c.patch_iters = o.patch_iters;
  c.patch_lr = o.patch_lr;
  c.validate();
  return c;
}

std::string default_model_name(Variant v) {
  switch (v) {
    case Variant::mal: return "MAL-ViT";
    case Variant::sal: return "SAL-ViT";
    case Variant::mal_no_tokens: return "MAL-ViT-no-tokens";
  }
  return "model";
}

void cmd_synth(Run& run) {
  const auto& o = run.o;
  auto spec = SynthSpec::face_attributes(o.attrs, o.seed);
  spec.n_train = o.n;
  spec.n_val = o.n_val;
  spec.n_test = o.n_test;
  spec.image_size = o.image_size;
  spec.noise_std = o.noise;
  spec.validate();
  const auto d = synth_generate(spec);
  for (const auto* ds : {&d.train, &d.val, &d.test}) {
    const auto p = run.out / (std::string(split_name(ds->split)) + ".mvd");
    save_dataset(p, *ds);
    run.output(p);
  }
  run.text("synth_spec.json", spec.to_json().dump(2) + "\n");
  run.log << "synth: " << d.train.size() << "/" << d.val.size() << "/" << d.test.size() << " samples, "
          << spec.num_attributes() << " attributes -> " << run.out.generic_string() << "\n";
}

void cmd_train(Run& run) {
  const auto& o = run.o;
  const auto train_all = load_split(run, "train");
  const auto val_all = load_split(run, "val");
  std::vector<std::string> tasks = o.tasks == "all" ? train_all.task_names : split_list(o.tasks);
  if (tasks.empty()) throw CLI::ValidationError("--tasks", "no task names given");
  for (const auto& t : tasks) train_all.task_index(t);
  const Variant variant = parse_variant(o.variant);

  struct Job {
    std::string name;
    std::vector<std::string> tasks;
  };
  std::vector<Job> jobs;
  if (variant == Variant::sal) {
    for (const auto& t : tasks) jobs.push_back({"sal_" + t, {t}});
  } else {
    jobs.push_back({std::string(variant_name(variant)), tasks});
  }

  TrainConfig tc;
  tc.batch_size = o.batch_size;
  tc.max_epochs = o.epochs;
  tc.patience = o.patience;
  if (o.lr > 0.0) tc.lr = o.lr;
  tc.probe_batches = o.probe_batches;
  tc.grad_clip = o.grad_clip;
  tc.seed = o.seed;
  tc.weighting = parse_weighting(o.weighting);
  tc.validate();

  for (const auto& job : jobs) {
    const auto tr = train_all.select_tasks(job.tasks);
    const auto va = val_all.select_tasks(job.tasks);
    auto mc = ModelConfig::preset(o.preset, job.tasks, variant);
    if (mc.image_size != tr.image_size || mc.channels != tr.channels) {
      throw ConfigError("preset '" + o.preset + "' expects " + std::to_string(mc.image_size) + "px images, dataset has " +
                        std::to_string(tr.image_size) + "px");
    }
    MalVitModel<float> model(mc, o.seed);
    const auto res = train(model, tr, va, tc);
    const auto ck = run.out / (job.name + ".ckpt");
    save_checkpoint(res.model, ck,
                    {{"train_config", tc.to_json()},
                     {"lr", res.history.lr},
                     {"best_epoch", res.history.best_epoch},
                     {"epochs_run", res.history.epochs.size()}});
    run.output(ck);
    run.text(job.name + "_history.csv", res.history.to_csv());
    const double best = res.history.best_epoch > 0
                            ? res.history.epochs[res.history.best_epoch - 1].val_mean_balanced_accuracy
                            : 0.0;
    run.log << "train " << job.name << ": lr=" << format_number(res.history.lr)
            << " epochs=" << res.history.epochs.size() << " best_epoch=" << res.history.best_epoch
            << " val_mean_bacc=" << format_number(best) << "\n";
  }
}

std::vector<AttackFamily> parse_attack_list(const std::string& s) {
  std::vector<AttackFamily> out;
  for (const auto& a : split_list(s)) {
    if (a == "none") continue;
    if (a == "all") {
      out.insert(out.end(), {AttackFamily::fgsm, AttackFamily::bim, AttackFamily::pgd, AttackFamily::uap,
                             AttackFamily::patch_fool});
      continue;
    }
    out.push_back(parse_attack_family(a));
  }
  return out;
}

struct LoadedModel {
  Checkpoint ck;
  Dataset ds;
  std::optional<Dataset> uap_source;
};

LoadedModel load_for_eval(Run& run, const std::string& path) {
  const auto& o = run.o;
  run.input(path);
  auto ck = load_checkpoint(path);
  const auto& tasks = ck.model.config().task_names;
  auto ds = load_split(run, o.split).select_tasks(tasks);
  if (o.limit > 0) ds = ds.head(o.limit);
  std::optional<Dataset> src;
  if (!o.uap_split.empty()) src = load_split(run, o.uap_split).select_tasks(tasks);
  return {std::move(ck), std::move(ds), std::move(src)};
}

EvalOptions eval_options(const Options& o, const LoadedModel& m) {
  EvalOptions e;
  e.batch_size = o.batch_size;
  e.threads = o.threads;
  e.uap_source = m.uap_source ? &*m.uap_source : nullptr;
  return e;
}

ModelDescriptor describe(const Options& o, const LoadedModel& m) {
  const auto& c = m.ck.model.config();
  return {o.name.empty() ? default_model_name(c.variant) : o.name, c.variant, m.ck.hash, o.seed, c.task_names};
}

void cmd_attack_eval(Run& run, const CLI::App* cmd) {
  const auto& o = run.o;
  if (o.checkpoint.empty()) throw CLI::ValidationError("--checkpoint", "a checkpoint is required");
  const auto m = load_for_eval(run, o.checkpoint);
  const auto opts = eval_options(o, m);
  EvalReport report;
  report.model = describe(o, m);
  report.clean = evaluate_clean(m.ck.model, m.ds, opts);
  run.log << "clean: mean_bacc=" << format_number(mean_balanced_accuracy(report.clean)) << "\n";
  for (auto family : parse_attack_list(o.attacks)) {
    const auto cfg = attack_from(o, family, cmd);
    report.robust.push_back({cfg, evaluate_robust(m.ck.model, m.ds, cfg, o.seed, opts)});
    run.log << cfg.label() << ": mean_bacc=" << format_number(mean_balanced_accuracy(report.robust.back().metrics))
            << "\n";
  }
  emit_report(report, run.out);
  run.output(run.out / "report.json");
  run.output(run.out / "table2.csv");
}

EvalReport read_report(Run& run, const std::string& path) {
  run.input(path);
  const auto bytes = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": not a JSON report: " + e.what());
  }
  return EvalReport::from_json(j);
}

void cmd_compare(Run& run) {
  const auto& o = run.o;
  if (o.mal_report.empty() || o.sal_reports.empty()) {
    throw CLI::ValidationError("--mal/--sal", "one MAL report and at least one SAL report are required");
  }
  const auto mal = read_report(run, o.mal_report);
  std::vector<EvalReport> sals;
  for (const auto& p : o.sal_reports) sals.push_back(read_report(run, p));
  EvalReport sal;
  if (sals.size() == 1 && sals[0].clean.size() > 1) {
    sal = sals[0];
    if (sal.model.task_names != mal.model.task_names) throw DataError("MAL and SAL reports cover different tasks");
  } else {
    sal = merge_single_task_reports(sals, mal.model.task_names);
  }
  run.text("table1.csv", table1_csv(mal, sal));
  run.text("table2.csv", table2_csv({mal, sal}));
  run.text("sal_merged.json", sal.to_json().dump(2) + "\n");
  std::vector<double> a, b;
  for (const auto& m : mal.clean) a.push_back(m.balanced_accuracy());
  for (const auto& t : mal.model.task_names) {
    for (const auto& m : sal.clean) {
      if (m.task == t) b.push_back(m.balanced_accuracy());
    }
  }
  std::size_t positive = 0;
  for (const auto& i : relative_increment(a, b)) positive += i.defined() && *i.percent > 0.0;
  run.log << "compare: " << positive << "/" << a.size() << " tasks with a positive relative increment\n";
}

void cmd_sweep(Run& run, const CLI::App* cmd) {
  const auto& o = run.o;
  if (o.axis.empty()) throw CLI::ValidationError("--axis", "an axis is required");
  const auto axis = parse_sweep_axis(o.axis);
  std::vector<double> values;
  for (const auto& v : split_list(o.values)) {
    try {
      std::size_t pos = 0;
      values.push_back(std::stod(v, &pos));
      if (pos != v.size()) throw std::invalid_argument(v);
    } catch (const std::logic_error&) {
      throw CLI::ValidationError("--values", "'" + v + "' is not a number");
    }
  }
  if (values.empty()) throw CLI::ValidationError("--values", "at least one value is required");
  std::vector<std::string> paths = o.checkpoints;
  if (paths.empty()) throw CLI::ValidationError("--checkpoint", "at least one checkpoint is required");
  const auto base =
      attack_from(o, axis == SweepAxis::uap_epsilon ? AttackFamily::uap : AttackFamily::patch_fool, cmd);
  std::vector<SweepResult> curves;
  nlohmann::json per_model = nlohmann::json::array();
  for (const auto& p : paths) {
    const auto m = load_for_eval(run, p);
    curves.push_back(sweep(m.ck.model, m.ds, axis, values, base, o.seed, eval_options(o, m)));
    EvalReport r;
    r.model = describe(o, m);
    r.clean = evaluate_clean(m.ck.model, m.ds, eval_options(o, m));
    r.sweeps.push_back(curves.back());
    per_model.push_back(r.to_json());
  }
  const auto curve = curves.size() == 1 ? curves[0] : mean_curve(curves);
  const std::string stem = "sweep_" + std::string(sweep_axis_name(axis));
  run.text(stem + ".csv", sweep_csv(curve));
  run.text(stem + ".json", nlohmann::json{{"models", per_model}}.dump(2) + "\n");
  for (const auto& r : curve.rows) {
    run.log << sweep_axis_name(axis) << "=" << format_number(r.value)
            << ": mean_bacc=" << format_number(r.mean_balanced_accuracy) << "\n";
  }
}

// Fills options left unset on the command line from the config file. Keys of
// other commands are ignored; keys no command knows are an error.
void apply_config(CLI::App& app, CLI::App* cmd, const std::map<std::string, std::string>& kv) {
  std::set<std::string> known;
  for (const auto* a : {static_cast<const CLI::App*>(&app)}) {
    for (const auto* opt : a->get_options()) known.insert(opt->get_single_name());
    for (const auto* sub : a->get_subcommands({})) {
      for (const auto* opt : sub->get_options()) known.insert(opt->get_single_name());
    }
  }
  for (const auto& [key, _] : kv) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  for (CLI::App* a : {&app, cmd}) {
    for (CLI::Option* opt : a->get_options()) {
      const auto name = opt->get_single_name();
      if (name == "config" || name == "help" || opt->count() > 0) continue;
      const auto it = kv.find(name);
      if (it == kv.end()) continue;
      try {
        opt->add_result(it->second);
        opt->run_callback();
      } catch (const CLI::Error& e) {
        throw ConfigError("config key '" + name + "': " + e.what());
      }
    }
  }
}

std::map<std::string, std::string> resolved_options(CLI::App& app, CLI::App* cmd) {
  std::map<std::string, std::string> kv;
  for (CLI::App* a : {&app, cmd}) {
    for (const CLI::Option* opt : a->get_options()) {
      const auto name = opt->get_single_name();
      if (name == "config" || name == "help") continue;
      if (opt->count() > 0) {
        kv[name] = join(opt->results());
      } else if (!opt->get_default_str().empty()) {
        kv[name] = opt->get_default_str();
      }
    }
  }
  return kv;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Multi-attribute vision transformer robustness experiments", "malvit"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  app.add_option("--seed", o.seed, "random seed (default 0)");
  app.add_option("--threads", o.threads, "evaluation threads; 1 is the bit-exact reproducibility mode")
      ->check(CLI::PositiveNumber);
  app.add_option("--config", o.config, "flat key = value config file; command-line flags take precedence");
  app.add_option("--out", o.out, "output directory");

  auto* synth = app.add_subcommand("synth", "generate the seeded synthetic attribute benchmark");
  synth->add_option("--attrs", o.attrs, "number of attributes (1-9)")->check(CLI::Range(1, 9));
  synth->add_option("--n", o.n, "training samples")->check(CLI::PositiveNumber);
  synth->add_option("--n-val", o.n_val, "validation samples")->check(CLI::PositiveNumber);
  synth->add_option("--n-test", o.n_test, "test samples")->check(CLI::PositiveNumber);
  synth->add_option("--image-size", o.image_size, "image side in pixels")->check(CLI::PositiveNumber);
  synth->add_option("--noise", o.noise, "pixel noise standard deviation");

  auto* trn = app.add_subcommand("train", "train MAL, SAL (one model per task) or MAL without attribute tokens");
  trn->add_option("--data", o.data, "dataset directory with train.mvd and val.mvd");
  trn->add_option("--variant", o.variant, "mal, sal or mal-no-tokens");
  trn->add_option("--tasks", o.tasks, "'all' or a comma-separated task list");
  trn->add_option("--preset", o.preset, "model preset: desk or vit-tiny");
  trn->add_option("--epochs", o.epochs, "maximum epochs");
  trn->add_option("--patience", o.patience, "early-stopping patience in epochs");
  trn->add_option("--batch-size", o.batch_size, "batch size")->check(CLI::PositiveNumber);
  trn->add_option("--lr", o.lr, "learning rate; 0 selects it with the probe");
  trn->add_option("--probe-batches", o.probe_batches, "batches per learning-rate probe trial");
  trn->add_option("--grad-clip", o.grad_clip, "global gradient norm bound; 0 disables");
  trn->add_option("--weighting", o.weighting, "task loss weighting: learnable or fixed");

  auto* eval = app.add_subcommand("attack-eval", "clean and robust evaluation of one checkpoint");
  eval->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  eval->add_option("--data", o.data, "dataset directory");
  eval->add_option("--attacks", o.attacks, "comma list of none, all, fgsm, bim, pgd, uap, patch-fool");
  add_eval_options(eval, o);

  auto* cmp = app.add_subcommand("compare", "relative increment of MAL over SAL per task (table1.csv)");
  cmp->add_option("--mal", o.mal_report, "MAL report.json");
  cmp->add_option("--sal", o.sal_reports, "SAL report.json files (one per task, or one multi-task report)")
      ->delimiter(',');

  auto* swp = app.add_subcommand("sweep", "robust accuracy over UAP epsilon or Patch-Fool patch count");
  swp->add_option("--checkpoint", o.checkpoints, "checkpoint(s); several give a mean curve")->delimiter(',');
  swp->add_option("--data", o.data, "dataset directory");
  // Required, but checked after the config file is applied.
  swp->add_option("--axis", o.axis, "uap-eps or patchfool-k (required)");
  swp->add_option("--values", o.values, "comma-separated ascending values (required)");
  add_eval_options(swp, o);

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  CLI::App* cmd = app.get_subcommands().front();
  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (!o.config.empty()) apply_config(app, cmd, read_kv_config(o.config));
    Run run{o, {}, fs::path(o.out), out};
    std::error_code ec;
    fs::create_directories(run.out, ec);
    if (ec) throw IoError("cannot create " + run.out.string() + ": " + ec.message());
    run.manifest.command = cmd->get_name();
    run.manifest.argv = args;
    run.manifest.resolved = resolved_options(app, cmd);
    run.manifest.seed = o.seed;
    run.manifest.threads = o.threads;
    run.manifest.versions = {{"malvit", kVersion},
                             {"container", Container::kVersion},
                             {"report_schema", EvalReport::kSchemaVersion}};
    run.manifest.started_at = utc_now();
    run.manifest.source_revision = MALVIT_SOURCE_REVISION;
    if (!o.config.empty()) run.input(o.config);

    const auto& name = cmd->get_name();
    if (name == "synth") cmd_synth(run);
    else if (name == "train") cmd_train(run);
    else if (name == "attack-eval") cmd_attack_eval(run, cmd);
    else if (name == "compare") cmd_compare(run);
    else cmd_sweep(run, cmd);

    run.text("resolved.cfg", format_kv_config(run.manifest.resolved, "malvit " + name + " resolved configuration"));
    run.manifest.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_file_atomic(run.out / "run_manifest.json", run.manifest.to_json().dump(2) + "\n");
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.category() << ": " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: internal: " << one_line(e.what()) << "\n";
    return 1;
  }
}

}  // namespace malvit
