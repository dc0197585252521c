#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "malvit/attacks.hpp"
#include "malvit/error.hpp"
#include "malvit/ops.hpp"

using namespace malvit;

namespace {

ModelConfig small_config(std::size_t n_tasks = 3, Variant v = Variant::mal) {
  std::vector<std::string> tasks;
  for (std::size_t i = 0; i < n_tasks; ++i) tasks.push_back("t" + std::to_string(i));
  ModelConfig c = ModelConfig::desk(tasks, v);
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.depth = 2;
  c.mlp_ratio = 2;
  return c;
}

Tensor<float> batch(std::size_t b, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(b * size * size * 3);
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  // Saturated pixels exercise the [0, 1] clipping.
  for (std::size_t i = 0; i < v.size(); i += 17) v[i] = (i / 17) % 2 ? 1.0f : 0.0f;
  return Tensor<float>({b, size, size, 3}, std::move(v));
}

std::vector<std::uint8_t> labels(std::size_t b, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint8_t> y(b * n);
  for (auto& v : y) v = rng.uniform() < 0.5 ? 1 : 0;
  return y;
}

bool same(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

void check_budget(const Tensor<float>& x, const AdversarialBatch& adv, double eps) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double xa = adv.x_adv.data()[i];
    CHECK(xa >= 0.0);
    CHECK(xa <= 1.0);
    CHECK(std::abs(xa - static_cast<double>(x.data()[i])) <= eps + 1e-9);
  }
}

double logit_for_loss(double loss) { return -std::log(std::expm1(loss)); }  // y = 1

}  // namespace

TEST_SUITE("attacks") {

TEST_CASE("config defaults, validation and labels") {
  CHECK(AttackConfig::fgsm(0.03).effective_alpha() == 0.03);
  CHECK(AttackConfig::bim(0.03).effective_alpha() == doctest::Approx(0.0075));
  CHECK(AttackConfig::pgd(0.03).steps == 10);
  CHECK(AttackConfig::uap(0.1, 5).effective_alpha() == doctest::Approx(0.01));
  CHECK(AttackConfig::pgd(0.03).label() == "pgd(eps=0.03,steps=10)");
  auto bad = AttackConfig::pgd(-0.1);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  auto pf = AttackConfig::patch_fool(1);
  pf.patch_iters = 0;
  CHECK_THROWS_AS(pf.validate(), ConfigError);
  CHECK_THROWS_AS(AttackConfig::patch_fool(0).validate(), ConfigError);
  auto neg_alpha = AttackConfig::bim(0.03);
  neg_alpha.alpha = -1.0;
  CHECK_THROWS_AS(neg_alpha.validate(), ConfigError);
  const auto round = AttackConfig::from_json(AttackConfig::uap(0.3, 10).to_json());
  CHECK(round.family == AttackFamily::uap);
  CHECK(round.uap_epochs == 10);
  CHECK(parse_attack_family("patch-fool") == AttackFamily::patch_fool);
  CHECK_THROWS_AS(parse_attack_family("cw"), ConfigError);
}

TEST_CASE("sign_of") {
  CHECK(sign_of(0.0f) == 0.0f);
  CHECK(sign_of(-0.0f) == 0.0f);
  CHECK(sign_of(3.0f) == 1.0f);
  CHECK(sign_of(-1e-30f) == -1.0f);
  CHECK_THROWS_AS(sign_of(std::nanf("")), NumericError);
  CHECK_THROWS_AS(sign_of(INFINITY), NumericError);
}

TEST_CASE("attack objective examples") {
  GradientTape<float> tape(false);
  TaskOutputs<float> one;
  one.logits = Tensor<float>({1, 1}, {0.3f});
  CHECK(attack_objective(tape, one, std::vector<std::uint8_t>{1}, {}).item() ==
        doctest::Approx(task_loss(0.3, 1)).epsilon(1e-6));
  TaskOutputs<float> two;
  two.logits = Tensor<float>({1, 2}, {static_cast<float>(logit_for_loss(0.3)), static_cast<float>(logit_for_loss(0.4))});
  CHECK(attack_objective(tape, two, std::vector<std::uint8_t>{1, 1}, {}).item() == doctest::Approx(0.7).epsilon(1e-5));
  CHECK(attack_objective(tape, two, std::vector<std::uint8_t>{1, 1}, {1}).item() == doctest::Approx(0.4).epsilon(1e-5));
  CHECK_THROWS_AS(attack_objective(tape, two, std::vector<std::uint8_t>{1, 1}, {2}), ConfigError);
}

TEST_CASE("input gradient is the sum of per-task input gradients") {
  MalVitModel<float> m(small_config(), 1);
  const auto x = batch(2, 16, 2);
  const auto y = labels(2, 3, 3);
  const auto all = input_gradient(m, x, y, {});
  std::vector<double> sum(all.numel(), 0.0);
  for (std::size_t t = 0; t < 3; ++t) {
    const auto g = input_gradient(m, x, y, {t});
    for (std::size_t i = 0; i < g.numel(); ++i) sum[i] += g.data()[i];
  }
  for (std::size_t i = 0; i < sum.size(); ++i) CHECK(std::abs(sum[i] - all.data()[i]) <= 1e-6);
  for (const auto& p : m.parameters()) CHECK(!p.has_grad());
}

TEST_CASE("FGSM on a linear one-pixel logit steps against the weight") {
  const double w = 2.0;
  const Tensor<float> x({1, 1, 1, 1}, {0.5f});
  // d/dx BCE(y=1, w x) = -w (1 - sigmoid(w x)) < 0
  InputGradientFn grad = [&](const Tensor<float>& xa) {
    const double z = w * xa.data()[0];
    return Tensor<float>({1, 1, 1, 1}, {static_cast<float>(-w * (1.0 - 1.0 / (1.0 + std::exp(-z))))});
  };
  const auto adv = iterative_sign_attack(grad, x, 0.03, 0.03, 1, x.clone());
  CHECK(adv.x_adv.data()[0] == doctest::Approx(0.47).epsilon(1e-6));
  CHECK(std::abs(adv.x_adv.data()[0] - 0.5) <= 0.03 + 1e-9);
}

TEST_CASE("eps = 0 leaves inputs bit-identical") {
  MalVitModel<float> m(small_config(), 4);
  const auto x = batch(3, 16, 5);
  const auto y = labels(3, 3, 6);
  Rng rng(7);
  CHECK(same(fgsm(m, x, y, AttackConfig::fgsm(0.0)).x_adv, x));
  CHECK(same(bim(m, x, y, AttackConfig::bim(0.0)).x_adv, x));
  CHECK(same(pgd(m, x, y, AttackConfig::pgd(0.0, 10, true), rng).x_adv, x));
  Dataset ds;
  ds.task_names = {"t0", "t1", "t2"};
  ds.image_size = 16;
  for (std::size_t i = 0; i < 3; ++i) {
    ds.add(Sample{std::vector<float>(x.data().begin() + i * 768, x.data().begin() + (i + 1) * 768),
                  std::vector<std::uint8_t>(y.begin() + i * 3, y.begin() + (i + 1) * 3), "s" + std::to_string(i)});
  }
  const auto u = uap_train(m, ds, AttackConfig::uap(0.0, 1), rng);
  CHECK(u.delta.numel() == 16 * 16 * 3);
  for (float v : u.delta.data()) CHECK(v == 0.0f);
}

TEST_CASE("PGD without random start is BIM, and one full step is FGSM (bit-exact)") {
  MalVitModel<float> m(small_config(), 8);
  const auto x = batch(4, 16, 9);
  const auto y = labels(4, 3, 10);
  Rng rng(11);
  auto one = AttackConfig::pgd(0.03, 1);
  one.alpha = 0.03;
  CHECK(same(pgd(m, x, y, one, rng).x_adv, fgsm(m, x, y, AttackConfig::fgsm(0.03)).x_adv));
  auto p = AttackConfig::pgd(0.03, 10);
  p.alpha = 0.0075;
  auto b = AttackConfig::bim(0.03, 10);
  b.alpha = 0.0075;
  CHECK(same(pgd(m, x, y, p, rng).x_adv, bim(m, x, y, b).x_adv));
}

TEST_CASE("epsilon budget holds for every bounded family") {
  MalVitModel<float> m(small_config(), 12);
  const auto x = batch(6, 16, 13);
  const auto y = labels(6, 3, 14);
  for (double eps : {0.01, 0.03, 0.1, 0.3}) {
    Rng rng(15);
    check_budget(x, fgsm(m, x, y, AttackConfig::fgsm(eps)), eps);
    check_budget(x, bim(m, x, y, AttackConfig::bim(eps, 5)), eps);
    check_budget(x, pgd(m, x, y, AttackConfig::pgd(eps, 5, true), rng), eps);
  }
}

TEST_CASE("random-start PGD is reproducible from the seed") {
  MalVitModel<float> m(small_config(), 16);
  const auto x = batch(2, 16, 17);
  const auto y = labels(2, 3, 18);
  const auto cfg = AttackConfig::pgd(0.03, 3, true);
  Rng a(5), b(5), c(6);
  const auto ra = pgd(m, x, y, cfg, a).x_adv;
  CHECK(same(ra, pgd(m, x, y, cfg, b).x_adv));
  CHECK(!same(ra, pgd(m, x, y, cfg, c).x_adv));
}

TEST_CASE("UAP: universal, bounded, applied identically") {
  MalVitModel<float> m(small_config(), 19);
  Dataset ds;
  ds.task_names = {"t0", "t1", "t2"};
  ds.image_size = 16;
  const auto imgs = batch(20, 16, 20);
  const auto y = labels(20, 3, 21);
  for (std::size_t i = 0; i < 20; ++i) {
    Sample s;
    s.image.assign(imgs.data().begin() + i * 768, imgs.data().begin() + (i + 1) * 768);
    s.labels.assign(y.begin() + i * 3, y.begin() + (i + 1) * 3);
    s.id = "s" + std::to_string(i);
    ds.add(s);
  }
  auto cfg = AttackConfig::uap(0.05, 3);
  cfg.uap_batch_size = 8;
  Rng rng(22);
  const auto u = uap_train(m, ds, cfg, rng);
  CHECK(u.delta.shape() == Shape{16, 16, 3});
  CHECK(u.epoch_objective.size() == 3);
  for (float v : u.delta.data()) CHECK(std::abs(static_cast<double>(v)) <= 0.05 + 1e-9);

  const auto x = batch(2, 16, 23);
  const auto xa = apply_uap(x, u.delta, 0.05);
  for (std::size_t i = 0; i < 768; ++i) {
    const float d0 = xa.data()[i] - x.data()[i], d1 = xa.data()[768 + i] - x.data()[768 + i];
    const bool c0 = xa.data()[i] == 0.0f || xa.data()[i] == 1.0f, c1 = xa.data()[768 + i] == 0.0f || xa.data()[768 + i] == 1.0f;
    if (!c0 && !c1) CHECK(d0 == doctest::Approx(d1).epsilon(1e-5));
  }
  CHECK(same(apply_uap(x, Tensor<float>({16, 16, 3}, 0.0f)), x));
  const Tensor<float> white({1, 16, 16, 3}, 1.0f);
  const auto saturated = apply_uap(white, Tensor<float>({16, 16, 3}, 0.2f));
  for (float v : saturated.data()) CHECK(v == 1.0f);
  CHECK_THROWS_AS(uap_train(m, Dataset{{"t0", "t1", "t2"}, Split::train, 16}, AttackConfig::uap(0.1, 1), rng),
                  DataError);
}

TEST_CASE("UAP objective rises across epochs in most seeded runs") {
  MalVitModel<float> m(small_config(2), 24);
  Dataset ds;
  ds.task_names = {"t0", "t1"};
  ds.image_size = 16;
  const auto imgs = batch(32, 16, 25);
  const auto y = labels(32, 2, 26);
  for (std::size_t i = 0; i < 32; ++i) {
    Sample s;
    s.image.assign(imgs.data().begin() + i * 768, imgs.data().begin() + (i + 1) * 768);
    s.labels.assign(y.begin() + i * 2, y.begin() + (i + 1) * 2);
    s.id = std::to_string(i);
    ds.add(s);
  }
  int monotone = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto cfg = AttackConfig::uap(0.1, 4);
    cfg.uap_batch_size = 8;
    Rng rng(seed);
    const auto u = uap_train(m, ds, cfg, rng);
    bool ok = true;
    for (std::size_t e = 1; e < u.epoch_objective.size(); ++e) ok &= u.epoch_objective[e] >= u.epoch_objective[e - 1];
    monotone += ok;
  }
  CHECK(monotone >= 9);
}

TEST_CASE("influential patch selection") {
  const std::size_t tokens = 1, patches = 4, s = tokens + patches;
  Tensor<float> uniform({1, 2, s, s}, 1.0f / static_cast<float>(s));
  const auto a = select_influential_patches({uniform, uniform}, tokens, 2);
  CHECK(a == std::vector<std::vector<std::size_t>>{{0, 1}});
  CHECK_THROWS_AS(select_influential_patches({uniform}, tokens, 5), ConfigError);
  CHECK_THROWS_AS(select_influential_patches({uniform}, tokens, 0), ConfigError);

  // Two patches; every query sends 0.9 of its mass to patch 1.
  Tensor<float> hand({1, 1, 2, 2}, {0.1f, 0.9f, 0.1f, 0.9f});
  CHECK(select_influential_patches({hand}, 0, 1) == std::vector<std::vector<std::size_t>>{{1}});

  MalVitModel<float> m(small_config(), 27);
  const auto x = batch(2, 16, 28);
  const auto all = select_influential_patches(m, x, 16);
  GradientTape<float> tape(false);
  const auto maps = m.forward(tape, x, true).attention_maps;
  for (std::size_t b = 0; b < 2; ++b) {
    CHECK(all[b].size() == 16);
    std::vector<double> infl(16, 0.0);
    for (const auto& att : maps) {
      const std::size_t sq = att.size(-1);
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t q = 0; q < sq; ++q)
          for (std::size_t p = 0; p < 16; ++p) infl[p] += att.data()[((b * 2 + h) * sq + q) * sq + 3 + p];
    }
    for (std::size_t i = 1; i < 16; ++i) CHECK(infl[all[b][i - 1]] >= infl[all[b][i]] - 1e-6);
  }
}

TEST_CASE("Patch-Fool perturbs only the selected patch footprints") {
  auto c = small_config();
  c.image_size = 32;
  c.patch_size = 8;
  MalVitModel<float> m(c, 29);
  const auto x = batch(3, 32, 30);
  const auto y = labels(3, 3, 31);
  auto cfg = AttackConfig::patch_fool(1);
  cfg.patch_iters = 5;
  Rng rng(32);
  const auto adv = patch_fool(m, x, y, cfg, rng);
  for (std::size_t b = 0; b < 3; ++b) {
    REQUIRE(adv.selected_patches[b].size() == 1);
    const std::size_t p = adv.selected_patches[b][0], pr = p / 4, pc = p % 4;
    std::size_t changed = 0;
    for (std::size_t r = 0; r < 32; ++r)
      for (std::size_t col = 0; col < 32; ++col)
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const std::size_t i = ((b * 32 + r) * 32 + col) * 3 + ch;
          const bool inside = r / 8 == pr && col / 8 == pc;
          if (!inside) CHECK(adv.delta.data()[i] == 0.0f);
          if (!inside) CHECK(adv.x_adv.data()[i] == x.data()[i]);
          changed += adv.delta.data()[i] != 0.0f;
          CHECK(adv.x_adv.data()[i] >= 0.0f);
          CHECK(adv.x_adv.data()[i] <= 1.0f);
        }
    CHECK(changed <= 192);
  }
}

TEST_CASE("Patch-Fool objective grows with the patch budget") {
  MalVitModel<float> m(small_config(), 33);
  const auto x = batch(2, 16, 34);
  const auto y = labels(2, 3, 35);
  double prev = -1.0;
  for (std::size_t k : {1u, 2u, 4u, 8u, 16u}) {
    auto cfg = AttackConfig::patch_fool(k);
    cfg.patch_iters = 30;
    Rng rng(36);
    const double obj = objective_value(m, patch_fool(m, x, y, cfg, rng).x_adv, y, {});
    CHECK(obj >= prev);
    prev = obj;
  }
}

TEST_CASE("run_attack dispatch and perturbation files") {
  MalVitModel<float> m(small_config(), 37);
  const auto x = batch(2, 16, 38);
  const auto y = labels(2, 3, 39);
  Rng rng(40);
  CHECK_THROWS_AS(run_attack(m, x, y, AttackConfig::uap(0.1, 1), rng), ContractError);
  const Tensor<float> delta({16, 16, 3}, 0.05f);
  const auto adv = run_attack(m, x, y, AttackConfig::uap(0.1, 1), rng, &delta);
  check_budget(x, adv, 0.1);

  const auto dir = std::filesystem::temp_directory_path() / "malvit_test_perturbation";
  std::filesystem::remove_all(dir);
  const auto path = dir / "delta.mvp";
  save_perturbation(path, delta, AttackConfig::uap(0.1, 1), 7, "abcd1234", &adv.x_adv);
  CHECK(std::filesystem::exists(path.string() + ".json"));
  const auto back = load_perturbation(path);
  CHECK(same(back.delta, delta));
  CHECK(same(back.x_adv, adv.x_adv));
  CHECK(back.seed == 7);
  CHECK(back.model_hash == "abcd1234");
  CHECK(back.config.family == AttackFamily::uap);
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
