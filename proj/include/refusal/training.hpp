#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "refusal/evaluation.hpp"
#include "refusal/model.hpp"
#include "refusal/ppm.hpp"
#include "refusal/synthvqa.hpp"

namespace refusal::train {

struct TrainConfig {
  int epochs = 12;
  int batch_size = 16;
  double learning_rate = 0.002;
  std::uint64_t seed = 0;
  enum class Trainable { All, ProjectorAndDecoder } trainable = Trainable::All;

  void validate() const {
    require<ConfigError>(epochs >= 1, "TrainConfig: epochs must be >= 1, got ", epochs);
    require<ConfigError>(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    require<ConfigError>(learning_rate >= 0.0, "TrainConfig: learning_rate must be >= 0");
  }
};

struct TrainReport {
  std::vector<double> epoch_mean_loss;
  double final_clean_accuracy = -1.0;  // set when a held-out split is provided
};

inline nlohmann::json report_to_json(const TrainReport& r) {
  return {{"epoch_mean_loss", r.epoch_mean_loss},
          {"final_clean_accuracy", r.final_clean_accuracy}};
}

struct TrainItem {
  Tensor image;
  std::vector<int> question_ids;
  std::vector<int> target_ids;  // answer tokens + EOS
};

inline TrainItem make_train_item(const text::Vocabulary& vocab, Tensor image,
                                 const std::string& question, const std::string& answer) {
  TrainItem item;
  item.image = std::move(image);
  item.question_ids = vocab.tokenize(question);
  item.target_ids = vocab.tokenize(answer);
  item.target_ids.push_back(text::Vocabulary::kEos);
  return item;
}

inline std::vector<TrainItem> items_from_manifest(const vqa::DatasetManifest& manifest,
                                                  const text::Vocabulary& vocab) {
  std::vector<TrainItem> items;
  items.reserve(manifest.items.size());
  for (const auto& it : manifest.items)
    items.push_back(make_train_item(vocab, img::read_ppm(it.image_file), it.question, it.answer));
  return items;
}

inline std::vector<eval::EvalItem> eval_items_from_manifest(const vqa::DatasetManifest& manifest) {
  std::vector<eval::EvalItem> items;
  items.reserve(manifest.items.size());
  for (const auto& it : manifest.items)
    items.push_back(eval::EvalItem{img::read_ppm(it.image_file), it.question, it.answer});
  return items;
}

// Minibatch training over shuffled epochs with Adam updates (fixed standard
// constants, so learning_rate stays the only optimizer knob). Gradient
// accumulation runs strictly in item order, so the result depends only on
// (model, items, cfg). Plain fixed-step SGD cannot train the vision pathway
// of this model at any stable step size; it converges to answer priors.
inline TrainReport minibatch_train(mllm::ToyMllm& model, const std::vector<TrainItem>& items,
                                   const TrainConfig& cfg) {
  cfg.validate();
  require(!items.empty(), "minibatch_train: empty item list");
#ifndef REFUSAL_CLIP_NORM
#define REFUSAL_CLIP_NORM 1.0
#endif
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8, kClipNorm = REFUSAL_CLIP_NORM;
  const auto scope = cfg.trainable == TrainConfig::Trainable::All
                         ? mllm::ToyMllm::Scope::All
                         : mllm::ToyMllm::Scope::ProjectorAndDecoder;
  auto params = model.named_parameters(scope);
  std::vector<Tensor> accum(params.size()), m1(params.size()), m2(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    accum[p] = Tensor(params[p].second->shape);
    m1[p] = Tensor(params[p].second->shape);
    m2[p] = Tensor(params[p].second->shape);
  }

  TrainReport report;
  Rng shuffle_rng(mix_seed(cfg.seed, 0x73676474ULL));
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  ad::Tape tape;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Optimizer state restarts every epoch; the periodic re-kick breaks the
    // answer-prior plateau that a single long Adam run settles into.
    long step_count = 0;
    for (auto& t : m1) std::fill(t.data.begin(), t.data.end(), 0.0);
    for (auto& t : m2) std::fill(t.data.begin(), t.data.end(), 0.0);
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t cursor = 0;
    while (cursor < order.size()) {
      const std::size_t batch_end =
          std::min(order.size(), cursor + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t batch_n = batch_end - cursor;
      for (auto& a : accum) std::fill(a.data.begin(), a.data.end(), 0.0);
      for (std::size_t b = cursor; b < batch_end; ++b) {
        const TrainItem& item = items[order[b]];
        tape.reset();
        ad::Var img = tape.leaf_ref(&item.image, false);
        const std::vector<int> ctx = mllm::ToyMllm::with_bos(item.question_ids);
        double loss_val = 0.0;
        try {
          ad::Var loss = model.sequence_ce_loss(tape, img, ctx, item.target_ids, 0,
                                                item.target_ids.size(), /*train_params=*/true);
          loss_val = tape.value(loss).data[0];
          require<NumericError>(std::isfinite(loss_val), "loss is not finite");
          tape.backward(loss);
        } catch (const NumericError& e) {
          throw NumericError(
              format_msg("training diverged at epoch ", epoch + 1, ": ", e.what()));
        }
        loss_sum += loss_val;
        for (std::size_t p = 0; p < params.size(); ++p) {
          const Tensor* g = tape.gradient_for(params[p].second);
          if (!g) continue;
          for (std::size_t j = 0; j < accum[p].numel(); ++j) accum[p].data[j] += g->data[j];
        }
      }
      ++step_count;
      const double inv_batch = 1.0 / static_cast<double>(batch_n);
      double sq_norm = 0.0;
      for (std::size_t p = 0; p < params.size(); ++p)
        for (double g : accum[p].data) sq_norm += g * inv_batch * g * inv_batch;
      const double clip = sq_norm > kClipNorm * kClipNorm
                              ? kClipNorm / std::sqrt(sq_norm)
                              : 1.0;
      const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_count));
      const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_count));
      for (std::size_t p = 0; p < params.size(); ++p) {
        double* w = params[p].second->data.data();
        for (std::size_t j = 0; j < accum[p].numel(); ++j) {
          const double g = accum[p].data[j] * inv_batch * clip;
          m1[p].data[j] = kBeta1 * m1[p].data[j] + (1.0 - kBeta1) * g;
          m2[p].data[j] = kBeta2 * m2[p].data[j] + (1.0 - kBeta2) * g * g;
          w[j] -= cfg.learning_rate * (m1[p].data[j] / bc1) /
                  (std::sqrt(m2[p].data[j] / bc2) + kAdamEps);
        }
      }
      cursor = batch_end;
    }
    report.epoch_mean_loss.push_back(loss_sum / static_cast<double>(items.size()));
  }
  return report;
}

// Pretraining on the synthetic VQA corpus; when a held-out manifest is given
// the report carries final greedy accuracy on it.
inline TrainReport pretrain(mllm::ToyMllm& model, const vqa::DatasetManifest& train_split,
                            const TrainConfig& cfg,
                            const vqa::DatasetManifest* held_out = nullptr, int jobs = 1) {
  cfg.validate();
  require(!train_split.items.empty(), "pretrain: train split is empty");
  const auto items = items_from_manifest(train_split, model.vocab());
  TrainReport report = minibatch_train(model, items, cfg);
  if (held_out && !held_out->items.empty()) {
    mllm::GenerationConfig gen;
    gen.mode = mllm::GenerationConfig::Mode::Greedy;
    report.final_clean_accuracy =
        eval::accuracy(model, eval_items_from_manifest(*held_out), gen, nullptr, jobs);
  }
  return report;
}

// Fine-tunes projector + decoder on (perturbed image, question) -> correct
// answer; the vision encoder stays frozen.
inline TrainReport adversarial_finetune(mllm::ToyMllm& model, const std::vector<TrainItem>& items,
                                        TrainConfig cfg) {
  require(!items.empty(), "adversarial_finetune: empty item list");
  cfg.trainable = TrainConfig::Trainable::ProjectorAndDecoder;
  return minibatch_train(model, items, cfg);
}

}  // namespace refusal::train
