#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "refusal/checkpoint.hpp"
#include "refusal/defenses.hpp"
#include "refusal/evaluation.hpp"
#include "refusal/synthvqa.hpp"

using namespace refusal;
using namespace refusal::eval;
using mllm::GenerationConfig;
using mllm::ProjectorVariant;
using mllm::ToyMllm;

namespace {

Tensor test_image(std::uint64_t seed) {
  Rng rng(seed);
  Tensor img({32, 32, 3});
  for (auto& v : img.data) v = rng.uniform01();
  return img;
}

std::vector<EvalItem> stub_items(std::size_t n) {
  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < n; ++i)
    items.push_back(EvalItem{Tensor({1}), "q" + std::to_string(i), "red"});
  return items;
}

}  // namespace

TEST_CASE("refusal judge") {
  CHECK(is_refusal("I'm sorry, I can't assist with that request."));
  CHECK(is_refusal("Unfortunately, I can't assist with that request."));
  CHECK_FALSE(is_refusal("The circle is red."));
  CHECK(is_refusal("SORRY, no idea"));  // case-insensitive

  for (const auto& r : text::refusal_responses()) {
    INFO(r);
    CHECK(is_refusal(r));
  }
  for (const auto& a : text::vqa_answer_words()) {
    INFO(a);
    CHECK_FALSE(is_refusal(a));
  }
  CHECK_THROWS_AS(is_refusal("x", JudgeConfig{{}}), ConfigError);
}

TEST_CASE("first content word") {
  CHECK(first_content_word("three") == "three");
  CHECK(first_content_word("  three objects") == "three");
  CHECK(first_content_word("'three', yes") == "three");
  CHECK(first_content_word("...") == "");
  CHECK(first_content_word("") == "");
}

TEST_CASE("trial averaging") {
  CHECK(mean_rate({1.0, 0.9, 0.8}) == Catch::Approx(0.9));
  CHECK(mean_rate({1.0}) == 1.0);
}

TEST_CASE("refusal rate with stub generators") {
  auto items = stub_items(10);

  SECTION("all refusals gives 1.0") {
    Generator gen = [](const EvalItem&, std::uint64_t) { return std::string("I'm sorry."); };
    CHECK(refusal_rate(gen, items, 3, 1) == 1.0);
  }
  SECTION("no refusals gives 0.0") {
    Generator gen = [](const EvalItem&, std::uint64_t) { return std::string("red"); };
    CHECK(refusal_rate(gen, items, 3, 1) == 0.0);
  }
  SECTION("content-determined refusals are permutation invariant") {
    Generator gen = [](const EvalItem& item, std::uint64_t) {
      return item.question >= "q5" ? std::string("sorry") : std::string("red");
    };
    const double r = refusal_rate(gen, items, 2, 9);
    auto shuffled = items;
    Rng rng(4);
    rng.shuffle(shuffled);
    CHECK(refusal_rate(gen, shuffled, 2, 9) == r);
    CHECK(r == Catch::Approx(0.5));
  }
  SECTION("trial count is a no-op for a seed-independent generator") {
    Generator gen = [](const EvalItem& item, std::uint64_t) {
      return item.question == "q3" ? std::string("sorry") : std::string("no");
    };
    CHECK(refusal_rate(gen, items, 1, 2) == refusal_rate(gen, items, 5, 2));
  }
  SECTION("preconditions") {
    Generator gen = [](const EvalItem&, std::uint64_t) { return std::string(""); };
    CHECK_THROWS_AS(refusal_rate(gen, {}, 3, 1), Error);
    CHECK_THROWS_AS(refusal_rate(gen, items, 0, 1), Error);
  }
}

TEST_CASE("accuracy with stub generators") {
  auto items = stub_items(8);
  Generator perfect = [](const EvalItem& item, std::uint64_t) { return item.answer; };
  Generator refuser = [](const EvalItem&, std::uint64_t) {
    return std::string("I'm sorry, I can't assist with that request.");
  };
  CHECK(accuracy(perfect, items, 1) == 1.0);
  CHECK(accuracy(refuser, items, 1) == 0.0);
}

TEST_CASE("locality matrix with a real pair of models") {
  ToyMllm a("a", 1, ProjectorVariant::Ffn2);
  ToyMllm b("b", 2, ProjectorVariant::CrossAttention);
  std::vector<EvalItem> set_a, set_b;
  for (int i = 0; i < 3; ++i) {
    set_a.push_back(EvalItem{test_image(10 + i), "Is there a circle in this image?", ""});
    set_b.push_back(EvalItem{test_image(20 + i), "Is there a circle in this image?", ""});
  }
  GenerationConfig gen;
  gen.mode = GenerationConfig::Mode::Greedy;
  gen.max_new_tokens = 6;
  auto matrix = locality_matrix({&a, &b}, {set_a, set_b}, 2, gen);
  REQUIRE(matrix.size() == 2);
  for (const auto& row : matrix) {
    REQUIRE(row.size() == 2);
    for (double v : row) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  SECTION("degenerate single-model case equals refusal_rate") {
    auto m1 = locality_matrix({&a}, {set_a}, 2, gen);
    // Greedy generation makes the rate seed-independent, so the 1x1 entry
    // must coincide with the direct computation.
    CHECK(m1[0][0] == refusal_rate(a, set_a, 2, gen));
  }
}

TEST_CASE("multi round evaluation") {
  ToyMllm m("mr", 5, ProjectorVariant::Ffn2);
  Tensor img = test_image(40);
  const std::string q = "How many objects are in this image?";
  GenerationConfig gen;
  gen.mode = GenerationConfig::Mode::Greedy;
  gen.max_new_tokens = 6;

  SECTION("one round equals single-shot evaluation") {
    auto r = multi_round_eval(m, img, q, 1, gen);
    REQUIRE(r.refusal_per_round.size() == 1);
    const std::string single = m.generate(img, m.vocab().tokenize(q), gen);
    CHECK(r.refusal_per_round[0] == is_refusal(single));
    CHECK(r.truncated_rounds.empty());
  }
  SECTION("transcript grows monotonically without truncation") {
    auto r = multi_round_eval(m, img, q, 4, gen);
    REQUIRE(r.prefix_tokens.size() == 4);
    for (std::size_t i = 1; i < r.prefix_tokens.size(); ++i)
      CHECK(r.prefix_tokens[i] > r.prefix_tokens[i - 1]);
    CHECK(r.truncated_rounds.empty());
  }
  SECTION("a small context window forces truncation") {
    mllm::ModelDims dims;
    dims.max_seq = 64;
    ToyMllm tiny("tiny", 6, ProjectorVariant::Ffn2, &text::Vocabulary::default_vocab(), dims);
    auto r = multi_round_eval(tiny, img, q, 6, gen);
    CHECK_FALSE(r.truncated_rounds.empty());
    const std::size_t budget = dims.max_seq - tiny.dims().image_tokens();
    for (std::size_t len : r.prefix_tokens)
      CHECK(len + static_cast<std::size_t>(gen.max_new_tokens) <= budget);
  }
  SECTION("rounds must be positive") {
    CHECK_THROWS_AS(multi_round_eval(m, img, q, 0, gen), Error);
  }
}

TEST_CASE("gaussian noise defense") {
  Tensor img = test_image(50);

  SECTION("sigma zero is a bitwise no-op") {
    CHECK(defense::gaussian_noise_defense(img, 0.0, 7) == img);
  }
  SECTION("output stays in range and is seed-reproducible") {
    Tensor a = defense::gaussian_noise_defense(img, 0.3, 7);
    Tensor b = defense::gaussian_noise_defense(img, 0.3, 7);
    Tensor c = defense::gaussian_noise_defense(img, 0.3, 8);
    CHECK(a == b);
    CHECK(!(a == c));
    for (double v : a.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  SECTION("negative sigma is rejected") {
    CHECK_THROWS_AS(defense::gaussian_noise_defense(img, -0.1, 7), ConfigError);
  }
}

TEST_CASE("purifier") {
  Tensor img = test_image(60);
  defense::DefenseConfig cfg;
  cfg.kind = defense::DefenseConfig::Kind::Purify;

  SECTION("steps 0 and sigma 0 is the identity") {
    cfg.steps = 0;
    cfg.sigma = 0.0;
    CHECK(defense::purify(img, cfg, 3) == img);
    CHECK(defense::is_identity(cfg));
  }
  SECTION("a constant image is a fixed point of smoothing") {
    cfg.steps = 3;
    cfg.sigma = 0.0;
    cfg.radius = 1;
    Tensor flat = Tensor::full({32, 32, 3}, 0.42);
    Tensor out = defense::purify(flat, cfg, 3);
    for (double v : out.data) CHECK(v == Catch::Approx(0.42).margin(1e-12));
  }
  SECTION("smoothing shrinks high-frequency content") {
    cfg.steps = 1;
    cfg.sigma = 0.0;
    Tensor out = defense::purify(img, cfg, 3);
    double var_in = 0.0, var_out = 0.0, mean = 0.0;
    for (double v : img.data) mean += v;
    mean /= static_cast<double>(img.numel());
    for (std::size_t i = 0; i < img.numel(); ++i) {
      var_in += (img.data[i] - mean) * (img.data[i] - mean);
      var_out += (out.data[i] - mean) * (out.data[i] - mean);
    }
    CHECK(var_out < var_in);
  }
}

TEST_CASE("defense sweep identity row matches the undefended evaluation exactly") {
  ToyMllm m("sw", 9, ProjectorVariant::Ffn2);
  std::vector<EvalItem> clean, attacked;
  for (int i = 0; i < 3; ++i) {
    vqa::SceneSpec spec = vqa::random_scene(70 + static_cast<std::uint64_t>(i));
    auto qas = vqa::make_questions(spec);
    clean.push_back(EvalItem{vqa::render_scene(spec), qas[0].question, qas[0].answer});
    attacked.push_back(EvalItem{test_image(80 + i), qas[0].question, qas[0].answer});
  }
  GenerationConfig gen;
  gen.mode = GenerationConfig::Mode::Sample;
  gen.temperature = 1.0;
  gen.max_new_tokens = 6;
  gen.seed = 77;

  defense::DefenseConfig identity;
  identity.kind = defense::DefenseConfig::Kind::GaussianNoise;
  identity.sigma = 0.0;
  defense::DefenseConfig noisy = identity;
  noisy.sigma = 0.05;
  defense::DefenseConfig pure;
  pure.kind = defense::DefenseConfig::Kind::Purify;
  pure.steps = 1;
  pure.sigma = 0.01;

  auto rows = defense::run_defense_sweep(m, clean, attacked, {identity, noisy, pure}, 2, gen);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].refusal_rate == refusal_rate(m, attacked, 2, gen));
  CHECK(rows[0].accuracy == accuracy(m, clean, gen));
  CHECK(rows[0].overhead_pct == 0.0);
  CHECK(rows[1].overhead_pct > 0.0);
  CHECK(rows[1].overhead_pct < 0.05);  // noise is nearly free
  CHECK(rows[2].overhead_pct > rows[1].overhead_pct);
}

TEST_CASE("adversarial training protocol plumbing") {
  ToyMllm m("adv", 11, ProjectorVariant::Ffn2);
  std::vector<EvalItem> attacked, clean;
  for (int i = 0; i < 4; ++i) {
    vqa::SceneSpec spec = vqa::random_scene(90 + static_cast<std::uint64_t>(i));
    auto qas = vqa::make_questions(spec);
    attacked.push_back(EvalItem{test_image(90 + i), qas[0].question, qas[0].answer});
    clean.push_back(EvalItem{vqa::render_scene(spec), qas[0].question, qas[0].answer});
  }
  GenerationConfig gen;
  gen.mode = GenerationConfig::Mode::Greedy;
  gen.max_new_tokens = 6;
  train::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.learning_rate = 0.01;

  SECTION("split is deterministic, disjoint and covers everything") {
    ToyMllm m1 = m, m2 = m;
    auto a = defense::adversarial_training_protocol(m1, attacked, clean, cfg, 5, 1, gen);
    auto b = defense::adversarial_training_protocol(m2, attacked, clean, cfg, 5, 1, gen);
    CHECK(a.train_indices == b.train_indices);
    CHECK(a.heldout_indices == b.heldout_indices);
    std::set<std::size_t> all(a.train_indices.begin(), a.train_indices.end());
    for (auto i : a.heldout_indices) CHECK(all.insert(i).second);
    CHECK(all.size() == attacked.size());
    CHECK(a.train_indices.size() == 2);
    CHECK(mllm::parameters_equal(m1, m2));
  }
  SECTION("odd item counts are rejected") {
    ToyMllm m1 = m;
    auto odd = attacked;
    odd.pop_back();
    CHECK_THROWS_AS(defense::adversarial_training_protocol(m1, odd, clean, cfg, 5, 1, gen),
                    Error);
  }
  SECTION("the encoder stays frozen through the protocol") {
    ToyMllm m1 = m;
    defense::adversarial_training_protocol(m1, attacked, clean, cfg, 5, 1, gen);
    auto before = m.named_parameters();
    auto after = m1.named_parameters();
    for (std::size_t i = 0; i < after.size(); ++i)
      if (after[i].first.rfind("enc.", 0) == 0) CHECK(*after[i].second == *before[i].second);
  }
}
