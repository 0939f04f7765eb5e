#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "refusal/attack.hpp"

using namespace refusal;
using namespace refusal::attack;
using mllm::ProjectorVariant;
using mllm::ToyMllm;
using text::Vocabulary;

namespace {

Tensor test_image(std::uint64_t seed) {
  Rng rng(seed);
  Tensor img({32, 32, 3});
  for (auto& v : img.data) v = rng.uniform01();
  return img;
}

const Vocabulary& vocab512() {
  static const Vocabulary v = [] {
    Vocabulary vv = Vocabulary::default_vocab();
    std::size_t i = 0;
    while (vv.size() < 512) vv.intern("filler" + std::to_string(i++));
    return vv;
  }();
  return v;
}

}  // namespace

TEST_CASE("shadow question construction") {
  QuestionPools pools;
  const std::string q = "How many objects are in this image?";

  SECTION("exact wraps the single user question") {
    auto set = build_shadow_questions(ShadowKind::Exact, q, pools, 1, 3);
    CHECK(set.questions == std::vector<std::string>{q});
    CHECK_THROWS_AS(build_shadow_questions(ShadowKind::Exact, "", pools, 1, 3), Error);
    CHECK_THROWS_AS(build_shadow_questions(ShadowKind::Exact, q, pools, 2, 3), ConfigError);
  }
  SECTION("general draws distinct pool questions") {
    auto set = build_shadow_questions(ShadowKind::General, "", pools, 10, 4);
    REQUIRE(set.questions.size() == 10);
    std::set<std::string> uniq(set.questions.begin(), set.questions.end());
    CHECK(uniq.size() == 10);
    for (const auto& s : set.questions)
      CHECK(std::find(pools.general.begin(), pools.general.end(), s) != pools.general.end());
    // Deterministic per seed.
    CHECK(build_shadow_questions(ShadowKind::General, "", pools, 10, 4).questions ==
          set.questions);
    CHECK(build_shadow_questions(ShadowKind::General, "", pools, 10, 5).questions !=
          set.questions);
  }
  SECTION("similar produces distinct rephrasings, none equal to the original") {
    auto set = build_shadow_questions(ShadowKind::Similar, q, pools, 10, 6);
    REQUIRE(set.questions.size() == 10);
    std::set<std::string> uniq(set.questions.begin(), set.questions.end());
    CHECK(uniq.size() == 10);
    for (const auto& s : set.questions) {
      CHECK(s != q);
      CHECK(Vocabulary::default_vocab().tokenizes_clean(s));
    }
  }
  SECTION("count beyond pool size errors") {
    CHECK_THROWS_AS(build_shadow_questions(ShadowKind::General, "", pools, 1000, 1), ConfigError);
    CHECK_THROWS_AS(build_shadow_questions(ShadowKind::Similar, q, pools, 1000, 1), ConfigError);
  }
}

TEST_CASE("refusal response sampling") {
  const auto& set = refusal_response_set();
  REQUIRE(set.size() == 10);

  SECTION("uniform over entries") {
    Rng rng(99);
    std::vector<int> hist(10, 0);
    for (int i = 0; i < 10000; ++i) ++hist[static_cast<std::size_t>(sample_refusal_index(rng))];
    for (int h : hist) {
      const double f = h / 10000.0;
      CHECK(f > 0.08);
      CHECK(f < 0.12);
    }
  }
  SECTION("seeded draw is stable and in-set") {
    const std::string a = sample_refusal_response(set, 1234);
    CHECK(a == sample_refusal_response(set, 1234));
    CHECK(std::find(set.begin(), set.end(), a) != set.end());
  }
}

TEST_CASE("refusal loss identities") {
  ToyMllm m("rl", 3, ProjectorVariant::Ffn2);
  Tensor img = test_image(2);
  Tensor zero(img.shape);
  const auto& v = m.vocab();
  const std::string q = "What is happening in this image?";
  std::vector<int> r = v.tokenize(text::refusal_responses()[4]);
  r.push_back(Vocabulary::kEos);

  SECTION("single model and question: loss is minus the summed log-probs") {
    const double loss = refusal_loss({&m}, r, img, zero, {q});
    auto lp = m.teacher_forced_log_probs(img, v.tokenize(q), r);
    double s = 0.0;
    for (double l : lp) s += l;
    CHECK(loss == Catch::Approx(-s).epsilon(1e-12));
    CHECK(std::fabs(std::exp(-loss) - std::exp(s)) <= 1e-9 * std::exp(s));
  }
  SECTION("permutation invariance over models and questions") {
    ToyMllm m2("rl2", 4, ProjectorVariant::CrossAttention);
    const std::string q2 = "Can you describe this image?";
    const double a = refusal_loss({&m, &m2}, r, img, zero, {q, q2});
    const double b = refusal_loss({&m2, &m}, r, img, zero, {q2, q});
    CHECK(a == Catch::Approx(b).epsilon(1e-9));
  }
}

TEST_CASE("uniform-logit decoder gives loss r log V") {
  ToyMllm m("uni", 5, ProjectorVariant::Ffn2, &vocab512());
  for (auto& [name, t] : m.named_parameters())
    if (name.rfind("dec.", 0) == 0) std::fill(t->data.begin(), t->data.end(), 0.0);
  Tensor img = test_image(4);
  std::vector<int> r = m.vocab().tokenize("Sorry, I cannot assist with that");  // 7 tokens
  r.push_back(Vocabulary::kEos);
  REQUIRE(r.size() == 8);
  const double loss =
      refusal_loss({&m}, r, img, Tensor(img.shape), {"How many objects are in this image?"});
  CHECK(loss == Catch::Approx(8.0 * std::log(512.0)).epsilon(1e-12));
  CHECK(loss == Catch::Approx(49.907).margin(5e-4));
}

TEST_CASE("linf projection") {
  const double eps = 8.0 / 255.0;
  Tensor d({4}, {0.01, -0.02, 0.05, -0.9});
  Tensor p = project_linf(d, eps);
  CHECK(p.data[0] == 0.01);
  CHECK(p.data[1] == -0.02);
  CHECK(p.data[2] == Catch::Approx(eps));
  CHECK(p.data[3] == Catch::Approx(-eps));
  CHECK(project_linf(p, eps) == p);  // idempotent

  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    Tensor t({16});
    for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
    Tensor q = project_linf(t, eps);
    CHECK(q.max_abs() <= eps);
    CHECK(project_linf(q, eps) == q);
  }
}

TEST_CASE("bim step") {
  const double eps = 8.0 / 255.0;
  SECTION("zero gradient leaves delta unchanged") {
    Tensor d({3}, {0.01, -0.01, 0.0});
    Tensor g({3}, {0.0, 0.0, 0.0});
    CHECK(bim_step(d, g, 0.005, eps) == d);
  }
  SECTION("all-positive gradient from zero moves every entry to -alpha") {
    Tensor d({4});
    Tensor g({4}, {0.3, 0.001, 2.0, 0.7});
    Tensor out = bim_step(d, g, 0.005, eps);
    for (double v : out.data) CHECK(v == Catch::Approx(-0.005));
  }
  SECTION("at the lower bound a positive gradient keeps it clamped") {
    Tensor d = Tensor::full({3}, -eps);
    Tensor g = Tensor::full({3}, 1.0);
    Tensor out = bim_step(d, g, 0.005, eps);
    for (double v : out.data) CHECK(v == Catch::Approx(-eps));
  }
  SECTION("shape mismatch") {
    CHECK_THROWS_AS(bim_step(Tensor({2}), Tensor({3}), 0.01, eps), ShapeError);
  }
}

TEST_CASE("pgd step") {
  const double eps = 8.0 / 255.0;
  SECTION("zero gradient is identity") {
    Tensor d({2}, {0.01, -0.02});
    CHECK(pgd_step(d, Tensor({2}), 0.3, eps) == d);
  }
  SECTION("scalar case") {
    Tensor d({1});
    Tensor g({1}, {0.01});
    CHECK(pgd_step(d, g, 0.3, eps).data[0] == Catch::Approx(-0.003));
  }
  SECTION("projection holds for any gradient") {
    Rng rng(10);
    for (int i = 0; i < 100; ++i) {
      Tensor d({8}), g({8});
      for (auto& v : d.data) v = rng.uniform(-eps, eps);
      for (auto& v : g.data) v = rng.uniform(-50.0, 50.0);
      CHECK(pgd_step(d, g, 0.4, eps).max_abs() <= eps);
    }
  }
}

TEST_CASE("one small bim step descends a separable quadratic") {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 12;
    Tensor target({n}), c({n}), delta({n});
    for (std::size_t i = 0; i < n; ++i) {
      c.data[i] = rng.uniform(0.5, 2.0);
      // Keep the optimum at least one step away so the signed step cannot
      // overshoot past it.
      double gap = rng.uniform(0.01, 0.5) * (rng.uniform01() < 0.5 ? -1.0 : 1.0);
      target.data[i] = gap;
      delta.data[i] = 0.0;
    }
    auto f = [&](const Tensor& d) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        s += c.data[i] * (d.data[i] - target.data[i]) * (d.data[i] - target.data[i]);
      return s;
    };
    Tensor g({n});
    for (std::size_t i = 0; i < n; ++i)
      g.data[i] = 2.0 * c.data[i] * (delta.data[i] - target.data[i]);
    Tensor next = bim_step(delta, g, 0.005, 1.0);
    CHECK(f(next) < f(delta));
  }
}

TEST_CASE("early stop monitor") {
  EarlyStopMonitor monitor(0.001, 30);
  const int k = 17;
  int iterations = 0;
  bool stopped = false;
  for (int i = 0; i < k && !stopped; ++i) {
    stopped = monitor.observe(0.5);
    ++iterations;
  }
  CHECK_FALSE(stopped);
  while (!stopped) {
    stopped = monitor.observe(0.0005);
    ++iterations;
  }
  CHECK(iterations == k + 30);

  SECTION("an above-threshold value resets the streak") {
    EarlyStopMonitor m2(0.001, 3);
    CHECK_FALSE(m2.observe(0.0001));
    CHECK_FALSE(m2.observe(0.0001));
    CHECK_FALSE(m2.observe(0.01));
    CHECK_FALSE(m2.observe(0.0001));
    CHECK_FALSE(m2.observe(0.0001));
    CHECK(m2.observe(0.0001));
  }
}

TEST_CASE("optimizer loop basics") {
  ToyMllm m("opt", 21, ProjectorVariant::Ffn2);
  Tensor img = test_image(6);
  QuestionPools pools;
  auto shadow = build_shadow_questions(ShadowKind::Exact,
                                       "How many objects are in this image?", pools, 1, 1);
  AttackConfig cfg = default_attack_config(ShadowKind::Exact);
  cfg.seed = 5;

  SECTION("max_iter 0 returns the zero perturbation") {
    AttackConfig c0 = cfg;
    c0.max_iter = 0;
    auto res = optimize_refusal_perturbation({&m}, img, shadow, c0);
    CHECK(res.loss_trace.empty());
    CHECK(res.iterations_run == 0);
    CHECK(res.delta.max_abs() == 0.0);
    CHECK_FALSE(res.stopped_early);
  }
  SECTION("iterates satisfy the constraints and the loss drops") {
    AttackConfig c = cfg;
    c.max_iter = 30;
    int calls = 0;
    auto res = optimize_refusal_perturbation(
        {&m}, img, shadow, c, [&](int, const Tensor& delta, double) {
          ++calls;
          CHECK(delta.max_abs() <= c.epsilon + 1e-15);
          for (std::size_t i = 0; i < delta.numel(); ++i) {
            const double px = img.data[i] + delta.data[i];
            CHECK(px >= 0.0);
            CHECK(px <= 1.0);
          }
        });
    CHECK(calls == 30);
    CHECK(res.iterations_run == 30);
    REQUIRE(res.loss_trace.size() == 30);
    CHECK(res.loss_trace.back() < res.loss_trace.front());
    CHECK(std::find(text::refusal_responses().begin(), text::refusal_responses().end(),
                    res.chosen_refusal) != text::refusal_responses().end());
  }
  SECTION("bit-identical given the seed") {
    AttackConfig c = cfg;
    c.max_iter = 10;
    auto a = optimize_refusal_perturbation({&m}, img, shadow, c);
    auto b = optimize_refusal_perturbation({&m}, img, shadow, c);
    CHECK(a.delta == b.delta);
    CHECK(a.loss_trace == b.loss_trace);
    CHECK(a.chosen_refusal == b.chosen_refusal);
  }
  SECTION("minibatch larger than the shadow set is rejected") {
    AttackConfig c = cfg;
    c.minibatch = 2;
    CHECK_THROWS_AS(optimize_refusal_perturbation({&m}, img, shadow, c), ConfigError);
  }
}

TEST_CASE("empty-shadow baseline") {
  ToyMllm m("qi", 22, ProjectorVariant::Ffn2);
  Tensor img = test_image(7);
  AttackConfig cfg = default_attack_config(ShadowKind::Exact);
  cfg.max_iter = 3;
  cfg.seed = 9;
  auto res = baseline_empty_shadow({&m}, img, cfg);
  CHECK(res.delta.max_abs() <= cfg.epsilon + 1e-15);
  REQUIRE(res.loss_trace.size() == 3);

  // The first recorded loss is the refusal loss with an empty question at
  // delta = 0.
  std::vector<int> r = m.vocab().tokenize(res.chosen_refusal);
  r.push_back(Vocabulary::kEos);
  const double expected = refusal_loss({&m}, r, img, Tensor(img.shape), {""});
  CHECK(res.loss_trace[0] == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("token-by-token baseline") {
  ToyMllm m("tbt", 23, ProjectorVariant::Ffn2);
  Tensor img = test_image(8);
  QuestionPools pools;
  auto shadow = build_shadow_questions(ShadowKind::Exact,
                                       "Is there a circle in this image?", pools, 1, 1);
  AttackConfig cfg = default_attack_config(ShadowKind::Exact);
  cfg.seed = 31;

  SECTION("a single-token response coincides with the whole-sequence method") {
    const std::vector<int> one_token = {m.vocab().id("sorry")};
    AttackConfig c = cfg;
    c.max_iter = 8;
    auto a = baseline_token_by_token({&m}, img, shadow, c, nullptr, &one_token);
    auto b = optimize_refusal_perturbation({&m}, img, shadow, c, nullptr, &one_token);
    CHECK(a.delta == b.delta);
    CHECK(a.loss_trace == b.loss_trace);
  }
  SECTION("budget counts gradient steps across passes") {
    std::vector<int> r = m.vocab().tokenize("Sorry, I can't provide that information.");
    r.push_back(Vocabulary::kEos);
    AttackConfig c = cfg;
    c.max_iter = static_cast<int>(2 * r.size());  // exactly two passes
    auto res = baseline_token_by_token({&m}, img, shadow, c, nullptr, &r);
    CHECK(res.iterations_run == c.max_iter);
    CHECK(res.delta.max_abs() <= c.epsilon + 1e-15);
  }
}

TEST_CASE("perturbed image export") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "refusal_export_test";
  fs::create_directories(dir);
  Tensor img = test_image(10);
  // Quantize first so the zero-delta export reproduces the stored image.
  img::write_ppm(img, (dir / "orig.ppm").string());
  Tensor stored = img::read_ppm((dir / "orig.ppm").string());

  SECTION("zero delta reproduces the original exactly") {
    export_perturbed_image(stored, Tensor(stored.shape), (dir / "zero.ppm").string());
    CHECK(img::read_ppm((dir / "zero.ppm").string()) == stored);
  }
  SECTION("readback stays within half a quantization step") {
    Rng rng(11);
    Tensor delta(stored.shape);
    for (auto& v : delta.data) v = rng.uniform(-8.0 / 255.0, 8.0 / 255.0);
    clamp_delta_to_image(delta, stored);
    export_perturbed_image(stored, delta, (dir / "pert.ppm").string());
    Tensor back = img::read_ppm((dir / "pert.ppm").string());
    for (std::size_t i = 0; i < back.numel(); ++i) {
      const double want = stored.data[i] + delta.data[i];
      CHECK(std::fabs(back.data[i] - want) <= 1.0 / 510.0 + 1e-12);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("attack config validation") {
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AttackConfig{};
  cfg.alpha = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AttackConfig{};
  cfg.minibatch = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_NOTHROW(AttackConfig{}.validate());
}
