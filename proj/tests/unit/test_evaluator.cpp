#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "malvit/container.hpp"
#include "malvit/error.hpp"
#include "malvit/evaluator.hpp"
#include "malvit/rng.hpp"

using namespace malvit;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> v8(std::initializer_list<int> xs) {
  std::vector<std::uint8_t> out;
  for (int x : xs) out.push_back(static_cast<std::uint8_t>(x));
  return out;
}

DatasetSplits small_data(std::size_t n_tasks, std::size_t n) {
  SynthSpec s = SynthSpec::face_attributes(n_tasks, 21);
  s.image_size = 16;
  s.n_train = n;
  s.n_val = n;
  s.n_test = n;
  return synth_generate(s);
}

ModelConfig small_config(const std::vector<std::string>& tasks) {
  ModelConfig c = ModelConfig::desk(tasks);
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.depth = 2;
  c.mlp_ratio = 2;
  return c;
}

EvalReport sample_report(const std::string& name, double shift) {
  EvalReport r;
  r.model = {name, Variant::mal, "abc123", 7, {"A", "B"}};
  r.clean = {{"A", 40, 10 + static_cast<std::size_t>(shift), 45, 5}, {"B", 30, 20, 30, 20}};
  r.robust.push_back({AttackConfig::pgd(0.03, 10), {{"A", 10, 40, 15, 35}, {"B", 5, 45, 25, 25}}});
  SweepResult s;
  s.axis = SweepAxis::patchfool_k;
  s.base = AttackConfig::patch_fool(1);
  s.rows.push_back({1, 0.4, {{"A", 1, 1, 1, 1}, {"B", 2, 0, 2, 0}}});
  s.rows.push_back({2, 0.3, {{"A", 0, 2, 1, 1}, {"B", 1, 1, 0, 2}}});
  r.sweeps.push_back(s);
  return r;
}

}  // namespace

TEST_SUITE("evaluator") {

TEST_CASE("balanced accuracy examples") {
  CHECK(balanced_accuracy(v8({1, 0, 1, 0}), v8({1, 0, 1, 0})) == 1.0);
  CHECK(balanced_accuracy(v8({1, 1, 1, 1}), v8({1, 0, 1, 0})) == 0.5);
  // tp=3, fn=1, tn=2, fp=2
  const auto preds = v8({1, 1, 1, 0, 0, 0, 1, 1});
  const auto labels = v8({1, 1, 1, 1, 0, 0, 0, 0});
  const auto m = confusion(preds, labels, "x");
  CHECK(m.tp == 3);
  CHECK(m.fn == 1);
  CHECK(m.tn == 2);
  CHECK(m.fp == 2);
  CHECK(m.count() == 8);
  CHECK(m.balanced_accuracy() == doctest::Approx(0.625).epsilon(1e-15));
  CHECK(m.accuracy() == doctest::Approx(0.625));
}

TEST_CASE("undefined rates count as zero and are flagged") {
  const auto m = confusion(v8({1, 1}), v8({1, 1}));
  CHECK(m.tnr_undefined());
  CHECK_FALSE(m.tpr_undefined());
  CHECK(m.balanced_accuracy() == 0.5);
}

TEST_CASE("balanced accuracy rejects bad input") {
  CHECK_THROWS_AS(balanced_accuracy(v8({1, 0}), v8({1})), ContractError);
  CHECK_THROWS_AS(balanced_accuracy({}, {}), ContractError);
  CHECK_THROWS_AS(balanced_accuracy(v8({2}), v8({1})), DataError);
}

TEST_CASE("balanced accuracy is permutation invariant and complements") {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 5 + static_cast<std::size_t>(rng.uniform() * 40);
    std::vector<std::uint8_t> p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform() < 0.5;
      y[i] = rng.uniform() < 0.5;
    }
    y[0] = 1;
    y[1] = 0;
    const double base = balanced_accuracy(p, y);
    const auto perm = rng.permutation(n);
    std::vector<std::uint8_t> pp(n), yy(n), pc(n);
    for (std::size_t i = 0; i < n; ++i) {
      pp[i] = p[perm[i]];
      yy[i] = y[perm[i]];
      pc[i] = 1 - p[i];
    }
    CHECK(balanced_accuracy(pp, yy) == base);
    CHECK(balanced_accuracy(pc, y) == doctest::Approx(1.0 - base).epsilon(1e-12));
  }
}

TEST_CASE("metrics from logits use a zero threshold") {
  const std::vector<float> logits{0.5f, -1.0f, 0.0f, 2.0f};
  const auto m = metrics_from_logits(logits, v8({1, 0, 1, 1}), {"A", "B"});
  REQUIRE(m.size() == 2);
  CHECK(m[0].task == "A");
  CHECK(m[0].tp == 1);
  CHECK(m[0].fn == 1);  // logit exactly 0 is negative
  CHECK(m[1].tp == 1);
  CHECK(m[1].tn == 1);
  CHECK(m[0].tnr_undefined());
  CHECK(mean_balanced_accuracy(m) == doctest::Approx((0.25 + 1.0) / 2));
}

TEST_CASE("relative increment examples") {
  const std::vector<double> sal{88.5, 50.0, 0.0, 70.0};
  const std::vector<double> mal{90.3, 25.0, 10.0, 70.0};
  const auto inc = relative_increment(mal, sal);
  REQUIRE(inc.size() == 4);
  CHECK(*inc[0].percent == doctest::Approx(2.0339).epsilon(1e-4));
  CHECK(*inc[1].percent == doctest::Approx(-50.0));
  CHECK_FALSE(inc[2].defined());
  CHECK(*inc[3].percent == 0.0);
  const std::vector<double> x{0.3, 0.9, 0.51};
  for (const auto& i : relative_increment(x, x)) CHECK(*i.percent == 0.0);
  CHECK_THROWS_AS(relative_increment(x, sal), ContractError);
}

TEST_CASE("constant model scores one half and evaluation is repeatable") {
  const auto d = small_data(3, 24);
  MalVitModel<float> m(small_config(d.test.task_names), 4);
  auto& p = m.params();
  std::fill(p.head_weight.data().begin(), p.head_weight.data().end(), 0.0f);
  std::fill(p.head_bias.data().begin(), p.head_bias.data().end(), 0.25f);
  const auto clean = evaluate_clean(m, d.test);
  for (const auto& t : clean) {
    if (t.tp + t.fn > 0 && t.tn + t.fp > 0) CHECK(t.balanced_accuracy() == 0.5);
  }
  MalVitModel<float> r(small_config(d.test.task_names), 5);
  CHECK(evaluate_clean(r, d.test) == evaluate_clean(r, d.test));
}

TEST_CASE("oracle logits give perfect scores") {
  const auto d = small_data(3, 30);
  std::vector<float> logits(d.test.labels.size());
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = d.test.labels[i] ? 3.0f : -3.0f;
  for (const auto& t : metrics_from_logits(logits, d.test.labels, d.test.task_names)) {
    CHECK(t.balanced_accuracy() == 1.0);
  }
}

TEST_CASE("zero-budget attacks reproduce clean metrics exactly") {
  const auto d = small_data(3, 20);
  MalVitModel<float> m(small_config(d.test.task_names), 6);
  const auto clean = evaluate_clean(m, d.test);
  for (auto cfg : {AttackConfig::fgsm(0.0), AttackConfig::bim(0.0, 3), AttackConfig::pgd(0.0, 3, true),
                   AttackConfig::uap(0.0, 1)}) {
    CHECK(evaluate_robust(m, d.test, cfg, 1) == clean);
  }
}

TEST_CASE("results do not depend on the thread count") {
  const auto d = small_data(2, 21);
  MalVitModel<float> m(small_config(d.test.task_names), 8);
  EvalOptions one{8, 1, nullptr}, three{8, 3, nullptr};
  CHECK(predict_logits(m, d.test, one) == predict_logits(m, d.test, three));
  const auto cfg = AttackConfig::pgd(0.03, 2, true);
  CHECK(evaluate_robust(m, d.test, cfg, 3, one) == evaluate_robust(m, d.test, cfg, 3, three));
  CHECK(evaluate_robust(m, d.test, cfg, 3, one) == evaluate_robust(m, d.test, cfg, 3, one));
}

TEST_CASE("a single-value sweep matches a direct evaluation") {
  const auto d = small_data(2, 12);
  MalVitModel<float> m(small_config(d.test.task_names), 9);
  auto base = AttackConfig::uap(0.0, 1);
  const auto s = sweep(m, d.test, SweepAxis::uap_epsilon, {0.05}, base, 4);
  REQUIRE(s.rows.size() == 1);
  base.epsilon = 0.05;
  const auto direct = evaluate_robust(m, d.test, base, 4);
  CHECK(s.rows[0].metrics == direct);
  CHECK(s.rows[0].mean_balanced_accuracy == mean_balanced_accuracy(direct));
  const auto zero = sweep(m, d.test, SweepAxis::uap_epsilon, {0.0}, base, 4);
  CHECK(zero.rows[0].mean_balanced_accuracy == mean_balanced_accuracy(evaluate_clean(m, d.test)));
  CHECK_THROWS_AS(sweep(m, d.test, SweepAxis::uap_epsilon, {}, base, 4), ConfigError);
  CHECK_THROWS_AS(sweep(m, d.test, SweepAxis::uap_epsilon, {0.1, 0.05}, base, 4), ConfigError);
  CHECK_THROWS_AS(sweep(m, d.test, SweepAxis::patchfool_k, {1.5}, AttackConfig::patch_fool(1), 4), ConfigError);
}

TEST_CASE("mean curve averages pointwise") {
  SweepResult a, b;
  a.rows = {{1, 0.4, {{"A", 1, 0, 1, 0}}}, {2, 0.2, {{"A", 0, 1, 0, 1}}}};
  b.rows = {{1, 0.6, {{"B", 1, 0, 1, 0}}}, {2, 0.4, {{"B", 0, 1, 0, 1}}}};
  const auto m = mean_curve({a, b});
  REQUIRE(m.rows.size() == 2);
  CHECK(m.rows[0].mean_balanced_accuracy == doctest::Approx(0.5));
  CHECK(m.rows[1].mean_balanced_accuracy == doctest::Approx(0.3));
  CHECK(m.rows[0].metrics.size() == 2);
}

TEST_CASE("report JSON round-trips and keeps six significant digits") {
  const auto r = sample_report("MAL-ViT", 0);
  const auto j = r.to_json();
  CHECK(j.at("schema_version") == EvalReport::kSchemaVersion);
  CHECK(EvalReport::from_json(j).to_json() == j);
  auto bad = j;
  bad["schema_version"] = 99;
  CHECK_THROWS_AS(EvalReport::from_json(bad), VersionError);
  CHECK(format_number(2.0 / 3.0) == "0.666667");
  CHECK(format_number(100.0) == "100");
}

TEST_CASE("table layouts") {
  const auto mal = sample_report("MAL-ViT", 0);
  const auto csv = table2_csv({mal});
  CHECK(csv.rfind("model,attack,A,B,avg\n", 0) == 0);
  CHECK(csv.find("MAL-ViT,none,") != std::string::npos);
  CHECK(csv.find("MAL-ViT,pgd(eps=0.03,steps=10),") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(table1_csv(mal, mal) == "method,A,B\nMAL-ViT vs MAL-ViT,0,0\n");
  const auto sw = sweep_csv(mal.sweeps[0]);
  CHECK(sw.rfind("k,mean_balanced_accuracy,A,B\n", 0) == 0);
  CHECK(std::count(sw.begin(), sw.end(), '\n') == 3);
}

TEST_CASE("emitting a report twice gives byte-identical files") {
  const auto r = sample_report("MAL-ViT", 1);
  const auto root = fs::temp_directory_path() / "malvit_emit_test";
  fs::remove_all(root);
  emit_report(r, root / "a");
  emit_report(r, root / "b");
  for (const char* f : {"report.json", "table2.csv", "sweep_patchfool-k.csv"}) {
    REQUIRE(fs::exists(root / "a" / f));
    CHECK(read_file(root / "a" / f) == read_file(root / "b" / f));
  }
  EvalReport clean_only;
  clean_only.model = r.model;
  clean_only.clean = r.clean;
  emit_report(clean_only, root / "c");
  CHECK(EvalReport::from_json(nlohmann::json::parse(read_file(root / "c" / "report.json"))).robust.empty());
  fs::remove_all(root);
}

TEST_CASE("single-task reports merge in task order") {
  EvalReport a, b;
  a.model = {"SAL-ViT", Variant::sal, "h1", 0, {"A"}};
  b.model = {"SAL-ViT", Variant::sal, "h2", 0, {"B"}};
  a.clean = {{"A", 1, 0, 1, 0}};
  b.clean = {{"B", 0, 1, 0, 1}};
  const auto m = merge_single_task_reports({a, b}, {"B", "A"});
  CHECK(m.model.task_names == std::vector<std::string>{"B", "A"});
  CHECK(m.clean[0].task == "B");
  CHECK_THROWS_AS(merge_single_task_reports({a}, {"A", "B"}), DataError);
}

}  // TEST_SUITE
