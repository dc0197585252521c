#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "malvit/cli.hpp"
#include "malvit/container.hpp"
#include "malvit/error.hpp"
#include "malvit/evaluator.hpp"
#include "malvit/trainer.hpp"

using namespace malvit;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "malvit");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const char* name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  const auto b = read_file(p);
  return {b.begin(), b.end()};
}

nlohmann::json manifest(const fs::path& dir) { return nlohmann::json::parse(slurp(dir / "run_manifest.json")); }

// Small 64px benchmark shared by the command tests.
fs::path shared_data() {
  static const fs::path dir = [] {
    const auto d = scratch("malvit_cli_data");
    const auto r = cli({"--seed", "3", "--out", d.string(), "synth", "--attrs", "3", "--n", "24", "--n-val", "8",
                        "--n-test", "6"});
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

std::vector<std::string> quick_train(const fs::path& out) {
  return {"--out", out.string(), "train", "--data", shared_data().string(), "--epochs", "1", "--patience", "1",
          "--batch-size", "8", "--lr", "0.001"};
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("config files parse flat key value lines") {
  std::istringstream in("# comment\n\nseed = 7\nname = \"MAL run\"\n  eps=0.03  \n");
  const auto kv = parse_kv_config(in, "c.cfg");
  CHECK(kv.at("seed") == "7");
  CHECK(kv.at("name") == "MAL run");
  CHECK(kv.at("eps") == "0.03");
  std::istringstream again(format_kv_config(kv, "header"));
  CHECK(parse_kv_config(again) == kv);
  std::istringstream dup("a = 1\na = 2\n");
  CHECK_THROWS_WITH_AS(parse_kv_config(dup, "d.cfg"), doctest::Contains("d.cfg:2"), ConfigError);
  std::istringstream bad("just words\n");
  CHECK_THROWS_AS(parse_kv_config(bad), ConfigError);
}

TEST_CASE("synth twice gives identical outputs and records the default seed") {
  const auto root = scratch("malvit_cli_synth");
  const std::vector<std::string> args{"synth", "--attrs", "2", "--n", "10", "--n-val", "3", "--n-test", "3",
                                      "--image-size", "16"};
  auto a = args, b = args;
  a.insert(a.begin(), {"--out", (root / "a").string()});
  b.insert(b.begin(), {"--out", (root / "b").string()});
  REQUIRE(cli(a).code == 0);
  REQUIRE(cli(b).code == 0);
  for (const char* f : {"train.mvd", "val.mvd", "test.mvd", "synth_spec.json"}) {
    CHECK(read_file(root / "a" / f) == read_file(root / "b" / f));
  }
  const auto m = manifest(root / "a");
  CHECK(m.at("seed") == 0);
  CHECK(m.at("command") == "synth");
  CHECK(m.at("outputs").size() == 5);
  fs::remove_all(root);
}

TEST_CASE("usage errors exit with code 2 on one line") {
  const auto r = cli({"--out", "/tmp/malvit_cli_unused", "synth", "--attrs", "0"});
  CHECK(r.code == 2);
  CHECK(r.err.rfind("error: usage: ", 0) == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
}

TEST_CASE("runtime failures exit with code 1 and a category") {
  const auto r = cli({"--out", "/tmp/malvit_cli_unused", "train", "--data", "/nonexistent/dir"});
  CHECK(r.code == 1);
  CHECK(r.err.rfind("error: ", 0) == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
}

TEST_CASE("train with an unknown task lists the available ones") {
  const auto root = scratch("malvit_cli_badtask");
  auto args = quick_train(root);
  args.insert(args.end(), {"--variant", "sal", "--tasks", "Nope"});
  const auto r = cli(args);
  CHECK(r.code == 1);
  CHECK(r.err.find("Nope") != std::string::npos);
  CHECK(r.err.find("Black_Hair") != std::string::npos);
  fs::remove_all(root);
}

TEST_CASE("SAL training writes one checkpoint per task") {
  const auto root = scratch("malvit_cli_sal");
  auto args = quick_train(root);
  args.insert(args.end(), {"--variant", "sal", "--tasks", "5_o_Clock_Shadow,Black_Hair"});
  const auto r = cli(args);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(root / "sal_5_o_Clock_Shadow.ckpt"));
  CHECK(fs::exists(root / "sal_Black_Hair.ckpt"));
  CHECK(fs::exists(root / "sal_Black_Hair_history.csv"));
  const auto ck = load_checkpoint(root / "sal_Black_Hair.ckpt", Variant::sal);
  CHECK(ck.model.config().task_names == std::vector<std::string>{"Black_Hair"});
  fs::remove_all(root);
}

TEST_CASE("the ablation variant is recorded in its checkpoint") {
  const auto root = scratch("malvit_cli_notok");
  auto args = quick_train(root);
  args.insert(args.end(), {"--variant", "mal-no-tokens"});
  REQUIRE(cli(args).code == 0);
  CHECK(load_checkpoint(root / "mal-no-tokens.ckpt").model.config().variant == Variant::mal_no_tokens);
  fs::remove_all(root);
}

TEST_CASE("training, evaluation and comparison reproduce byte for byte") {
  const auto root = scratch("malvit_cli_flow");
  auto train_args = quick_train(root / "t1");
  REQUIRE(cli(train_args).code == 0);
  REQUIRE(fs::exists(root / "t1" / "mal.ckpt"));
  // Re-run from the persisted resolved configuration into a new directory.
  REQUIRE(cli({"--config", (root / "t1" / "resolved.cfg").string(), "--out", (root / "t2").string(), "train"})
              .code == 0);
  CHECK(read_file(root / "t1" / "mal.ckpt") == read_file(root / "t2" / "mal.ckpt"));
  CHECK(read_file(root / "t1" / "mal_history.csv") == read_file(root / "t2" / "mal_history.csv"));

  const auto ckpt = (root / "t1" / "mal.ckpt").string();
  const std::vector<std::string> eval{"attack-eval", "--checkpoint", ckpt, "--data", shared_data().string(),
                                      "--attacks", "none"};
  auto e1 = eval, e2 = eval;
  e1.insert(e1.begin(), {"--out", (root / "e1").string()});
  e2.insert(e2.begin(), {"--out", (root / "e2").string()});
  REQUIRE(cli(e1).code == 0);
  REQUIRE(cli(e2).code == 0);
  CHECK(read_file(root / "e1" / "report.json") == read_file(root / "e2" / "report.json"));
  const auto report = EvalReport::from_json(nlohmann::json::parse(slurp(root / "e1" / "report.json")));
  CHECK(report.robust.empty());
  CHECK(report.clean.size() == 3);

  auto pgd = eval;
  pgd.back() = "pgd";
  pgd.insert(pgd.end(), {"--eps", "0.03", "--steps", "2"});
  pgd.insert(pgd.begin(), {"--out", (root / "e3").string()});
  REQUIRE(cli(pgd).code == 0);
  const auto r3 = EvalReport::from_json(nlohmann::json::parse(slurp(root / "e3" / "report.json")));
  REQUIRE(r3.robust.size() == 1);
  CHECK(r3.robust[0].config.steps == 2);
  // The unset step size must stay unset when repeated from the resolved config.
  REQUIRE(cli({"--config", (root / "e3" / "resolved.cfg").string(), "--out", (root / "e4").string(), "attack-eval"})
              .code == 0);
  CHECK(read_file(root / "e3" / "report.json") == read_file(root / "e4" / "report.json"));

  const auto mal_report = (root / "e1" / "report.json").string();
  REQUIRE(cli({"--out", (root / "c").string(), "compare", "--mal", mal_report, "--sal", mal_report}).code == 0);
  CHECK(slurp(root / "c" / "table1.csv") ==
        "method,5_o_Clock_Shadow,Black_Hair,Blond_Hair\nMAL-ViT vs MAL-ViT,0,0,0\n");

  fs::remove_all(root);
}

TEST_CASE("compare names a missing SAL task") {
  const auto root = scratch("malvit_cli_missing");
  EvalReport mal, sal_a;
  mal.model = {"MAL-ViT", Variant::mal, "h", 0, {"A", "B"}};
  mal.clean = {{"A", 1, 0, 1, 0}, {"B", 1, 0, 1, 0}};
  sal_a.model = {"SAL-ViT", Variant::sal, "h", 0, {"A"}};
  sal_a.clean = {{"A", 1, 0, 1, 0}};
  write_file_atomic(root / "mal.json", mal.to_json().dump());
  write_file_atomic(root / "sal_a.json", sal_a.to_json().dump());
  const auto r = cli({"--out", (root / "o").string(), "compare", "--mal", (root / "mal.json").string(), "--sal",
                      (root / "sal_a.json").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("'B'") != std::string::npos);
  fs::remove_all(root);
}

TEST_CASE("sweep writes one row per value and rejects an empty list") {
  const auto root = scratch("malvit_cli_sweep");
  REQUIRE(cli(quick_train(root / "t")).code == 0);
  const auto ckpt = (root / "t" / "mal.ckpt").string();
  const auto r = cli({"--out", (root / "s").string(), "sweep", "--checkpoint", ckpt, "--data",
                      shared_data().string(), "--axis", "uap-eps", "--values", "0.03,0.1,0.3,1.0", "--epochs", "1"});
  REQUIRE(r.code == 0);
  const auto csv = slurp(root / "s" / "sweep_uap-eps.csv");
  CHECK(csv.rfind("epsilon,mean_balanced_accuracy,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  const auto k = cli({"--out", (root / "k").string(), "sweep", "--checkpoint", ckpt, "--data",
                      shared_data().string(), "--axis", "patchfool-k", "--values", "1,2", "--patch-iters", "2"});
  REQUIRE(k.code == 0);
  CHECK(slurp(root / "k" / "sweep_patchfool-k.csv").rfind("k,", 0) == 0);
  REQUIRE(cli({"--config", (root / "k" / "resolved.cfg").string(), "--out", (root / "k2").string(), "sweep"}).code == 0);
  CHECK(read_file(root / "k" / "sweep_patchfool-k.csv") == read_file(root / "k2" / "sweep_patchfool-k.csv"));
  CHECK(cli({"--out", (root / "n").string(), "sweep", "--checkpoint", ckpt, "--values", "1"}).code == 2);
  const auto empty = cli({"--out", (root / "e").string(), "sweep", "--checkpoint", ckpt, "--data",
                          shared_data().string(), "--axis", "uap-eps", "--values", ""});
  CHECK(empty.code == 2);
  fs::remove_all(root);
}

TEST_CASE("flags override the config file which overrides defaults") {
  const auto root = scratch("malvit_cli_precedence");
  write_file_atomic(root / "run.cfg", std::string("seed = 5\nattrs = 2\nn = 12\nn-val = 3\nn-test = 3\nimage-size = 16\n"));
  REQUIRE(cli({"--config", (root / "run.cfg").string(), "--out", (root / "o").string(), "synth", "--attrs", "3"})
              .code == 0);
  const auto m = manifest(root / "o");
  CHECK(m.at("seed") == 5);
  CHECK(m.at("resolved").at("attrs") == "3");
  CHECK(m.at("resolved").at("n") == "12");
  CHECK(m.at("resolved").at("noise") == "0.05");
  const auto d = load_dataset(root / "o" / "train.mvd");
  CHECK(d.task_names.size() == 3);
  CHECK(d.size() == 12);
  write_file_atomic(root / "bad.cfg", std::string("not-an-option = 1\n"));
  const auto r = cli({"--config", (root / "bad.cfg").string(), "--out", (root / "p").string(), "synth"});
  CHECK(r.code == 1);
  CHECK(r.err.find("not-an-option") != std::string::npos);
  fs::remove_all(root);
}

}  // TEST_SUITE
