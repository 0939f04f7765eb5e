#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "refusal/evaluation.hpp"
#include "refusal/training.hpp"

namespace refusal::defense {

struct DefenseConfig {
  enum class Kind { GaussianNoise, Purify, AdvTrain };
  Kind kind = Kind::GaussianNoise;
  double sigma = 0.0;  // noise stddev (GaussianNoise, Purify)
  int steps = 0;       // smoothing passes (Purify)
  int radius = 1;      // box kernel radius (Purify)
  train::TrainConfig train;       // AdvTrain
  std::uint64_t split_seed = 0;   // AdvTrain
  std::uint64_t seed = 0;

  void validate() const {
    require<ConfigError>(sigma >= 0.0, "DefenseConfig: sigma must be >= 0");
    require<ConfigError>(steps >= 0, "DefenseConfig: steps must be >= 0");
    require<ConfigError>(radius >= 1, "DefenseConfig: radius must be >= 1");
  }
};

// Per-pixel i.i.d. N(0, sigma) noise, clamped back to [0,1]. sigma = 0 is a
// bitwise no-op.
inline Tensor gaussian_noise_defense(const Tensor& image, double sigma, std::uint64_t seed) {
  require<ConfigError>(sigma >= 0.0, "gaussian_noise_defense: sigma must be >= 0");
  if (sigma == 0.0) return image;
  Rng rng(mix_seed(seed, 0x6e6f6973ULL));
  Tensor out = image;
  for (auto& v : out.data) {
    v += rng.normal(0.0, sigma);
    v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  }
  return out;
}

namespace detail {

// One pass of per-channel box filtering; windows are clipped at the borders.
inline Tensor box_mean_pass(const Tensor& image, int radius) {
  const long H = static_cast<long>(image.shape[0]);
  const long W = static_cast<long>(image.shape[1]);
  const long C = static_cast<long>(image.shape[2]);
  Tensor out(image.shape);
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      const long y0 = std::max(0L, y - radius), y1 = std::min(H - 1, y + radius);
      const long x0 = std::max(0L, x - radius), x1 = std::min(W - 1, x + radius);
      const double inv = 1.0 / static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
      for (long c = 0; c < C; ++c) {
        double s = 0.0;
        for (long yy = y0; yy <= y1; ++yy)
          for (long xx = x0; xx <= x1; ++xx)
            s += image.data[static_cast<std::size_t>((yy * W + xx) * C + c)];
        out.data[static_cast<std::size_t>((y * W + x) * C + c)] = s * inv;
      }
    }
  return out;
}

}  // namespace detail

// Noise-then-smooth purifier standing in for a learned diffusion purifier:
// add N(0, sigma), then `steps` passes of local mean filtering.
inline Tensor purify(const Tensor& image, const DefenseConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Tensor out = gaussian_noise_defense(image, cfg.sigma, seed);
  for (int s = 0; s < cfg.steps; ++s) out = detail::box_mean_pass(out, cfg.radius);
  return out;
}

// Identity configurations must bypass the transform entirely so defended and
// undefended evaluations are bitwise identical.
inline bool is_identity(const DefenseConfig& cfg) {
  switch (cfg.kind) {
    case DefenseConfig::Kind::GaussianNoise: return cfg.sigma == 0.0;
    case DefenseConfig::Kind::Purify: return cfg.sigma == 0.0 && cfg.steps == 0;
    case DefenseConfig::Kind::AdvTrain: return false;
  }
  return false;
}

inline eval::ImageTransform make_transform(const DefenseConfig& cfg) {
  cfg.validate();
  if (is_identity(cfg)) return nullptr;
  if (cfg.kind == DefenseConfig::Kind::GaussianNoise)
    return [cfg](const Tensor& image, std::uint64_t seed) {
      return gaussian_noise_defense(image, cfg.sigma, mix_seed(cfg.seed, seed));
    };
  if (cfg.kind == DefenseConfig::Kind::Purify)
    return [cfg](const Tensor& image, std::uint64_t seed) {
      return purify(image, cfg, mix_seed(cfg.seed, seed));
    };
  throw ConfigError("adversarial training is not an inference-time transform");
}

// ---- deterministic overhead accounting -------------------------------------
// Reports must be byte-identical across runs, so overhead is a flop-count
// cost model rather than wall time: defense work per query relative to the
// model's estimated generation work.

inline double estimated_generation_flops(const mllm::ToyMllm& model) {
  const auto& d = model.dims();
  const double L = static_cast<double>(d.image_tokens()) + 24.0;  // typical prompt length
  auto block = [L](double w, double ffn) {
    return L * (8.0 * w * w + 4.0 * w * ffn) + 4.0 * L * L * w;
  };
  const double enc = static_cast<double>(d.enc_layers) *
                         block(static_cast<double>(d.enc_width), static_cast<double>(d.enc_ffn)) +
                     2.0 * static_cast<double>(d.image_tokens()) *
                         static_cast<double>(d.patch_dim()) * static_cast<double>(d.enc_width);
  const double dec = static_cast<double>(d.dec_layers) *
                     block(static_cast<double>(d.dec_width), static_cast<double>(d.dec_ffn));
  const double head = 2.0 * static_cast<double>(d.dec_width) * static_cast<double>(model.vocab_size());
  const double per_token = enc + dec + head;
  return 12.0 * per_token;  // typical generated length
}

inline double defense_flops(const DefenseConfig& cfg, std::size_t pixels) {
  if (is_identity(cfg)) return 0.0;
  const double n = static_cast<double>(pixels);
  double per_pixel = 0.0;
  if (cfg.sigma > 0.0) per_pixel += 10.0;  // normal draw + add + clamp
  if (cfg.kind == DefenseConfig::Kind::Purify) {
    const double window = static_cast<double>((2 * cfg.radius + 1) * (2 * cfg.radius + 1));
    per_pixel += static_cast<double>(cfg.steps) * (window + 1.0);
  }
  return per_pixel * n;
}

struct SweepRow {
  std::string defense;
  std::string param;
  double refusal_rate = 0.0;
  double accuracy = 0.0;
  double overhead_pct = 0.0;
};

inline std::string defense_kind_name(DefenseConfig::Kind k) {
  switch (k) {
    case DefenseConfig::Kind::GaussianNoise: return "gaussian";
    case DefenseConfig::Kind::Purify: return "purify";
    case DefenseConfig::Kind::AdvTrain: return "adv_train";
  }
  return "?";
}

inline std::string defense_param_string(const DefenseConfig& cfg) {
  if (cfg.kind == DefenseConfig::Kind::GaussianNoise)
    return format_msg("sigma=", cfg.sigma);
  if (cfg.kind == DefenseConfig::Kind::Purify)
    return format_msg("steps=", cfg.steps, ";radius=", cfg.radius, ";sigma=", cfg.sigma);
  return "50/50";
}

// Per config: refusal rate on attacked items, accuracy on clean items, and
// the cost-model overhead. Identity rows evaluate through the exact
// undefended path.
inline std::vector<SweepRow> run_defense_sweep(const mllm::ToyMllm& model,
                                               const std::vector<eval::EvalItem>& clean_items,
                                               const std::vector<eval::EvalItem>& attacked_items,
                                               const std::vector<DefenseConfig>& configs,
                                               int trials, const mllm::GenerationConfig& gen,
                                               const eval::JudgeConfig& judge = {}, int jobs = 1) {
  require(!clean_items.empty() && !attacked_items.empty(),
          "run_defense_sweep: item lists must be nonempty");
  std::vector<SweepRow> rows;
  const double base_flops = estimated_generation_flops(model);
  for (const auto& cfg : configs) {
    require<ConfigError>(cfg.kind != DefenseConfig::Kind::AdvTrain,
                         "run_defense_sweep covers inference-time defenses only");
    eval::ImageTransform transform = make_transform(cfg);
    SweepRow row;
    row.defense = defense_kind_name(cfg.kind);
    row.param = defense_param_string(cfg);
    row.refusal_rate = eval::refusal_rate(eval::model_generator(model, gen, transform),
                                          attacked_items, trials, gen.seed, judge, jobs);
    row.accuracy = eval::accuracy(model, clean_items, gen, transform, jobs);
    row.overhead_pct = 100.0 * defense_flops(cfg, attacked_items[0].image.numel()) / base_flops;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  require<IoError>(static_cast<bool>(os), "cannot open sweep CSV for writing: ", path);
  os.precision(17);
  os << "defense,param,refusal_rate,accuracy,overhead_pct\n";
  for (const auto& r : rows)
    os << r.defense << "," << r.param << "," << r.refusal_rate << "," << r.accuracy << ","
       << r.overhead_pct << "\n";
  require<IoError>(static_cast<bool>(os), "write failed for sweep CSV: ", path);
}

struct AdvTrainOutcome {
  double refusal_before = 0.0;   // held-out attacked half
  double refusal_after = 0.0;
  double accuracy_before = 0.0;  // clean items
  double accuracy_after = 0.0;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> heldout_indices;
  train::TrainReport finetune_report;
};

// 50/50 protocol: split the attacked (image, question, answer) items by seed,
// fine-tune projector + decoder on the first half, evaluate refusal on the
// held-out half and accuracy on clean items before and after.
inline AdvTrainOutcome adversarial_training_protocol(
    mllm::ToyMllm& model, const std::vector<eval::EvalItem>& attacked_items,
    const std::vector<eval::EvalItem>& clean_items, const train::TrainConfig& cfg,
    std::uint64_t split_seed, int trials, const mllm::GenerationConfig& gen,
    const eval::JudgeConfig& judge = {}, int jobs = 1) {
  require(attacked_items.size() >= 2 && attacked_items.size() % 2 == 0,
          "adversarial_training_protocol: need an even number of attacked items, got ",
          attacked_items.size());
  AdvTrainOutcome out;
  std::vector<std::size_t> idx(attacked_items.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(mix_seed(split_seed, 0x73706c74ULL));
  rng.shuffle(idx);
  const std::size_t half = idx.size() / 2;
  out.train_indices.assign(idx.begin(), idx.begin() + static_cast<long>(half));
  out.heldout_indices.assign(idx.begin() + static_cast<long>(half), idx.end());

  std::vector<train::TrainItem> train_items;
  for (std::size_t i : out.train_indices) {
    const auto& it = attacked_items[i];
    require(!it.answer.empty(), "adversarial_training_protocol: item without ground-truth answer");
    train_items.push_back(train::make_train_item(model.vocab(), it.image, it.question, it.answer));
  }
  std::vector<eval::EvalItem> heldout;
  for (std::size_t i : out.heldout_indices) heldout.push_back(attacked_items[i]);

  out.refusal_before = eval::refusal_rate(model, heldout, trials, gen, judge, jobs);
  out.accuracy_before = eval::accuracy(model, clean_items, gen, nullptr, jobs);
  out.finetune_report = train::adversarial_finetune(model, train_items, cfg);
  out.refusal_after = eval::refusal_rate(model, heldout, trials, gen, judge, jobs);
  out.accuracy_after = eval::accuracy(model, clean_items, gen, nullptr, jobs);
  return out;
}

inline nlohmann::json advtrain_to_json(const AdvTrainOutcome& o) {
  return {{"refusal_before", o.refusal_before},
          {"refusal_after", o.refusal_after},
          {"accuracy_before", o.accuracy_before},
          {"accuracy_after", o.accuracy_after},
          {"train_indices", o.train_indices},
          {"heldout_indices", o.heldout_indices},
          {"finetune", train::report_to_json(o.finetune_report)}};
}

}  // namespace refusal::defense
