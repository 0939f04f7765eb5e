#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "refusal/checkpoint.hpp"
#include "refusal/training.hpp"

using namespace refusal;
using mllm::ProjectorVariant;
using mllm::ToyMllm;
using train::TrainConfig;
using train::TrainItem;

namespace {

std::vector<TrainItem> tiny_items(std::size_t n, std::uint64_t seed) {
  const auto& vocab = text::Vocabulary::default_vocab();
  std::vector<TrainItem> items;
  for (std::size_t i = 0; i < n; ++i) {
    vqa::SceneSpec spec = vqa::random_scene(mix_seed(seed, i));
    auto qas = vqa::make_questions(spec);
    Rng rng(mix_seed(seed, i, 99));
    const auto& qa = qas[rng.index(qas.size())];
    items.push_back(train::make_train_item(vocab, vqa::render_scene(spec), qa.question, qa.answer));
  }
  return items;
}

}  // namespace

TEST_CASE("config validation rejects zero epochs") {
  TrainConfig cfg;
  cfg.epochs = 0;
  ToyMllm m("t", 1, ProjectorVariant::Ffn2);
  CHECK_THROWS_AS(train::minibatch_train(m, tiny_items(2, 1), cfg), ConfigError);
}

TEST_CASE("empty item list is rejected") {
  TrainConfig cfg;
  ToyMllm m("t", 1, ProjectorVariant::Ffn2);
  CHECK_THROWS_AS(train::minibatch_train(m, {}, cfg), Error);
  CHECK_THROWS_AS(train::adversarial_finetune(m, {}, cfg), Error);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  ToyMllm m("t", 5, ProjectorVariant::Ffn2);
  ToyMllm before = m;
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.learning_rate = 0.0;
  train::minibatch_train(m, tiny_items(4, 2), cfg);
  CHECK(mllm::parameters_equal(m, before));
}

TEST_CASE("projector-and-decoder scope freezes the encoder") {
  ToyMllm m("t", 6, ProjectorVariant::CrossAttention);
  ToyMllm before = m;
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.learning_rate = 0.005;
  cfg.trainable = TrainConfig::Trainable::ProjectorAndDecoder;
  train::minibatch_train(m, tiny_items(4, 3), cfg);
  auto enc_before = before.named_parameters();
  auto enc_after = m.named_parameters();
  bool any_changed = false;
  for (std::size_t i = 0; i < enc_after.size(); ++i) {
    if (enc_after[i].first.rfind("enc.", 0) == 0) {
      CHECK(*enc_after[i].second == *enc_before[i].second);
    } else if (!(*enc_after[i].second == *enc_before[i].second)) {
      any_changed = true;
    }
  }
  CHECK(any_changed);
}

TEST_CASE("training is deterministic given a seed") {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.learning_rate = 0.005;
  cfg.seed = 11;
  auto items = tiny_items(6, 4);
  ToyMllm a("t", 7, ProjectorVariant::Ffn2);
  ToyMllm b("t", 7, ProjectorVariant::Ffn2);
  auto ra = train::minibatch_train(a, items, cfg);
  auto rb = train::minibatch_train(b, items, cfg);
  CHECK(ra.epoch_mean_loss == rb.epoch_mean_loss);
  CHECK(mllm::parameters_equal(a, b));
}

TEST_CASE("loss decreases when overfitting a small batch") {
  ToyMllm m("t", 8, ProjectorVariant::Ffn2);
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.005;
  auto report = train::minibatch_train(m, tiny_items(8, 5), cfg);
  REQUIRE(report.epoch_mean_loss.size() == 6);
  CHECK(report.epoch_mean_loss.back() < report.epoch_mean_loss.front());
}

TEST_CASE("adversarial finetune drops its training loss after one epoch") {
  ToyMllm m("t", 9, ProjectorVariant::Ffn2);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.005;
  auto report = train::adversarial_finetune(m, tiny_items(6, 6), cfg);
  REQUIRE(report.epoch_mean_loss.size() == 2);
  CHECK(report.epoch_mean_loss[1] < report.epoch_mean_loss[0]);
}
