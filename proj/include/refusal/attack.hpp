#pragma once

#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "refusal/model.hpp"
#include "refusal/ppm.hpp"
#include "refusal/rng.hpp"
#include "refusal/text.hpp"

namespace refusal::attack {

enum class ShadowKind { Exact, Similar, General };

inline const char* shadow_kind_name(ShadowKind k) {
  switch (k) {
    case ShadowKind::Exact: return "exact";
    case ShadowKind::Similar: return "similar";
    case ShadowKind::General: return "general";
  }
  return "?";
}

inline ShadowKind shadow_kind_from_name(const std::string& s) {
  if (s == "exact") return ShadowKind::Exact;
  if (s == "similar") return ShadowKind::Similar;
  if (s == "general") return ShadowKind::General;
  throw ConfigError("unknown shadow kind '" + s + "' (expected exact, similar or general)");
}

struct ShadowQuestionSet {
  ShadowKind kind = ShadowKind::Exact;
  std::vector<std::string> questions;
  std::uint64_t seed = 0;
};

struct QuestionPools {
  std::vector<std::string> general = text::general_question_pool();
  std::vector<std::string> paraphrase_templates = text::paraphrase_templates();
};

// Body of a question for paraphrase insertion: trailing question mark
// stripped, first word lowercased unless the slot starts the sentence.
inline std::string paraphrase_question(const std::string& tmpl, const std::string& question) {
  std::string body = question;
  while (!body.empty() && (body.back() == '?' || body.back() == ' ')) body.pop_back();
  const std::size_t slot = tmpl.find("{}");
  require(slot != std::string::npos, "paraphrase template lacks a {} slot: ", tmpl);
  const std::string filler =
      slot == 0 ? body : text::Vocabulary::lowercase_first_word(body);
  return tmpl.substr(0, slot) + filler + tmpl.substr(slot + 2);
}

inline ShadowQuestionSet build_shadow_questions(ShadowKind kind, const std::string& exact_question,
                                                const QuestionPools& pools, std::size_t count,
                                                std::uint64_t seed) {
  const auto& vocab = text::Vocabulary::default_vocab();
  ShadowQuestionSet set;
  set.kind = kind;
  set.seed = seed;
  Rng rng(mix_seed(seed, 0x73686164ULL));
  switch (kind) {
    case ShadowKind::Exact:
      require(!exact_question.empty(), "exact shadow questions need the exact user question");
      require<ConfigError>(count == 1, "exact shadow set holds exactly 1 question, got count=",
                           count);
      set.questions = {exact_question};
      break;
    case ShadowKind::Similar: {
      require(!exact_question.empty(), "similar shadow questions need an example question");
      require<ConfigError>(count <= pools.paraphrase_templates.size(), "requested ", count,
                           " similar questions but only ", pools.paraphrase_templates.size(),
                           " paraphrase templates exist");
      for (std::size_t i : rng.sample_indices(pools.paraphrase_templates.size(), count)) {
        std::string q = paraphrase_question(pools.paraphrase_templates[i], exact_question);
        require(q != exact_question, "paraphrase equals the original question: ", q);
        set.questions.push_back(std::move(q));
      }
      break;
    }
    case ShadowKind::General: {
      require<ConfigError>(count <= pools.general.size(), "requested ", count,
                           " general questions but the pool holds ", pools.general.size());
      for (std::size_t i : rng.sample_indices(pools.general.size(), count))
        set.questions.push_back(pools.general[i]);
      break;
    }
  }
  for (const auto& q : set.questions)
    require(vocab.tokenizes_clean(q), "shadow question contains out-of-vocabulary words: ", q);
  return set;
}

inline const std::vector<std::string>& refusal_response_set() {
  return text::refusal_responses();
}

inline int sample_refusal_index(Rng& rng) {
  return static_cast<int>(rng.index(refusal_response_set().size()));
}

inline std::string sample_refusal_response(const std::vector<std::string>& set,
                                           std::uint64_t seed) {
  require(set.size() == 10, "refusal response set must hold exactly 10 entries");
  Rng rng(mix_seed(seed, 0x72657370ULL));
  return set[rng.index(set.size())];
}

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double alpha = 0.005;          // BIM step size, or PGD learning rate
  int max_iter = 1500;
  int minibatch = 4;             // |Q_B|
  double early_stop_threshold = 0.001;
  int early_stop_patience = 30;
  enum class Optimizer { BIM, PGD } optimizer = Optimizer::BIM;
  std::uint64_t seed = 0;

  void validate() const {
    require<ConfigError>(epsilon > 0.0 && epsilon <= 1.0, "AttackConfig: epsilon must be in (0,1]");
    require<ConfigError>(alpha > 0.0, "AttackConfig: alpha must be > 0");
    require<ConfigError>(max_iter >= 0, "AttackConfig: max_iter must be >= 0");
    require<ConfigError>(minibatch >= 1, "AttackConfig: minibatch must be >= 1");
    require<ConfigError>(early_stop_threshold > 0.0 && early_stop_patience >= 1,
                         "AttackConfig: invalid early stop parameters");
  }
};

// Defaults mirroring the step-size and iteration studies: exact user
// questions take a larger step and fewer iterations than similar/general.
inline AttackConfig default_attack_config(ShadowKind kind,
                                          AttackConfig::Optimizer opt = AttackConfig::Optimizer::BIM) {
  AttackConfig cfg;
  cfg.optimizer = opt;
  const bool exact = kind == ShadowKind::Exact;
  if (opt == AttackConfig::Optimizer::BIM) {
    cfg.alpha = exact ? 0.007 : 0.005;
    cfg.max_iter = exact ? 1000 : 1500;
  } else {
    cfg.alpha = exact ? 0.3 : 0.4;
    cfg.max_iter = exact ? 1500 : 2000;
  }
  cfg.minibatch = exact ? 1 : 4;
  return cfg;
}

struct PerturbationResult {
  Tensor delta;
  std::string chosen_refusal;
  std::vector<double> loss_trace;  // minibatch mean loss at the start of each iteration
  int iterations_run = 0;
  bool stopped_early = false;
};

inline Tensor project_linf(Tensor delta, double epsilon) {
  for (auto& v : delta.data) v = v < -epsilon ? -epsilon : (v > epsilon ? epsilon : v);
  return delta;
}

// delta - alpha * sign(g), projected; sign(0) = 0 so flat coordinates stay put.
inline Tensor bim_step(const Tensor& delta, const Tensor& g, double alpha, double epsilon) {
  require<ShapeError>(delta.same_shape(g), "bim_step: shape mismatch ", shape_str(delta.shape),
                      " vs ", shape_str(g.shape));
  Tensor out = delta;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double s = g.data[i] > 0.0 ? 1.0 : (g.data[i] < 0.0 ? -1.0 : 0.0);
    out.data[i] -= alpha * s;
  }
  return project_linf(std::move(out), epsilon);
}

inline Tensor pgd_step(const Tensor& delta, const Tensor& g, double lr, double epsilon) {
  require<ShapeError>(delta.same_shape(g), "pgd_step: shape mismatch ", shape_str(delta.shape),
                      " vs ", shape_str(g.shape));
  Tensor out = delta;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= lr * g.data[i];
  return project_linf(std::move(out), epsilon);
}

// Shrink delta per pixel so the perturbed image stays a valid image.
inline void clamp_delta_to_image(Tensor& delta, const Tensor& image) {
  for (std::size_t i = 0; i < delta.numel(); ++i) {
    const double lo = -image.data[i], hi = 1.0 - image.data[i];
    if (delta.data[i] < lo) delta.data[i] = lo;
    if (delta.data[i] > hi) delta.data[i] = hi;
  }
}

// Counts consecutive observations below the threshold.
class EarlyStopMonitor {
 public:
  EarlyStopMonitor(double threshold, int patience) : threshold_(threshold), patience_(patience) {}

  bool observe(double loss) {
    consecutive_ = loss < threshold_ ? consecutive_ + 1 : 0;
    return consecutive_ >= patience_;
  }

 private:
  double threshold_;
  int patience_;
  int consecutive_ = 0;
};

using Models = std::vector<const mllm::ToyMllm*>;

namespace detail {

inline std::vector<std::vector<int>> tokenize_questions(const Models& models,
                                                        const std::vector<std::string>& questions) {
  require(!models.empty(), "attack: model set is empty");
  const auto& vocab = models[0]->vocab();
  for (const auto* m : models)
    require(m->vocab_size() == vocab.size(), "attack: models must share one vocabulary");
  std::vector<std::vector<int>> out;
  out.reserve(questions.size());
  for (const auto& q : questions) out.push_back(vocab.tokenize(q));
  return out;
}

inline Tensor add_tensors(const Tensor& a, const Tensor& b) {
  require<ShapeError>(a.same_shape(b), "perturbation shape ", shape_str(b.shape),
                      " does not match image ", shape_str(a.shape));
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b.data[i];
  return out;
}

}  // namespace detail

// Sum over models and questions of the teacher-forced cross-entropy of R
// given the perturbed image; Eq.-level definition, no gradients.
inline double refusal_loss(const Models& models, const std::vector<int>& response_ids,
                           const Tensor& image, const Tensor& delta,
                           const std::vector<std::string>& questions) {
  require(!models.empty(), "refusal_loss: model set is empty");
  require(!questions.empty(), "refusal_loss: question set is empty");
  const auto q_ids = detail::tokenize_questions(models, questions);
  const Tensor x_adv = detail::add_tensors(image, delta);
  double total = 0.0;
  for (const auto* m : models)
    for (const auto& q : q_ids) {
      const auto lp = m->teacher_forced_log_probs(x_adv, q, response_ids);
      for (double l : lp) total -= l;
    }
  return total;
}

// Gradient-carrying version: mean loss over (models x batch questions) and
// its gradient w.r.t. the perturbed image.
inline double refusal_loss_grad(const Models& models, const std::vector<int>& response_ids,
                                const Tensor& x_adv, const std::vector<std::vector<int>>& q_batch,
                                ad::Tape& tape, Tensor& grad_out) {
  tape.reset();
  ad::Var x = tape.leaf_ref(&x_adv, true);
  ad::Var total{};
  bool first = true;
  for (const auto* m : models)
    for (const auto& q : q_batch) {
      ad::Var ce = m->sequence_ce_loss(tape, x, mllm::ToyMllm::with_bos(q), response_ids, 0,
                                       response_ids.size());
      total = first ? ce : ad::add(total, ce);
      first = false;
    }
  const double norm = static_cast<double>(models.size() * q_batch.size());
  ad::Var mean = ad::scale(total, 1.0 / norm);
  const double loss = tape.value(mean).data[0];
  tape.backward(mean);
  grad_out = tape.gradient(x);
  return loss;
}

using IterationObserver = std::function<void(int iter, const Tensor& delta, double batch_loss)>;

namespace detail {

struct LoopState {
  Tensor delta;
  std::vector<double> trace;
  int iterations = 0;
  bool stopped = false;
};

// Shared driver: per-iteration loss/gradient comes from `step_loss`, which
// receives the minibatch question indices and must fill grad (already
// normalized or not; only BIM's sign makes that moot, PGD uses it as-is).
inline void run_loop(LoopState& state, const Tensor& image, const AttackConfig& cfg,
                     ShadowKind kind, std::size_t n_questions,
                     const std::function<double(const std::vector<std::size_t>&, Tensor&)>& step_loss,
                     const std::function<double()>& full_mean_loss, Rng& rng,
                     const IterationObserver& observer) {
  const std::size_t mb = static_cast<std::size_t>(cfg.minibatch);
  require<ConfigError>(mb <= n_questions, "AttackConfig: minibatch ", mb, " exceeds |Q_S| = ",
                       n_questions);
  const bool use_early_stop = kind != ShadowKind::Exact;
  EarlyStopMonitor monitor(cfg.early_stop_threshold, cfg.early_stop_patience);
  // Full-set mean < thr implies batch mean <= thr * |Qs| / |Qb| (losses are
  // nonnegative), so the full evaluation can be skipped above that gate
  // without changing the stopping behavior.
  const double gate =
      cfg.early_stop_threshold * static_cast<double>(n_questions) / static_cast<double>(mb);
  Tensor grad;
  for (int iter = 0; iter < cfg.max_iter; ++iter) {
    const auto batch = rng.sample_indices(n_questions, mb);
    double batch_loss = 0.0;
    try {
      batch_loss = step_loss(batch, grad);
      require<NumericError>(std::isfinite(batch_loss), "loss is not finite");
    } catch (const NumericError& e) {
      throw NumericError(format_msg("attack aborted at iteration ", iter, ": ", e.what()));
    }
    state.delta = cfg.optimizer == AttackConfig::Optimizer::BIM
                      ? bim_step(state.delta, grad, cfg.alpha, cfg.epsilon)
                      : pgd_step(state.delta, grad, cfg.alpha, cfg.epsilon);
    clamp_delta_to_image(state.delta, image);
    state.trace.push_back(batch_loss);
    state.iterations = iter + 1;
    if (observer) observer(iter, state.delta, batch_loss);
    if (use_early_stop) {
      const double observed = batch_loss <= gate ? full_mean_loss() : batch_loss;
      if (monitor.observe(observed)) {
        state.stopped = true;
        break;
      }
    }
  }
}

}  // namespace detail

namespace detail {

// The refusal target for one image: sampled uniformly from the fixed set, or
// pinned by the caller.
inline std::pair<std::string, std::vector<int>> choose_response(
    const mllm::ToyMllm& model, Rng& rng, const std::vector<int>* response_override) {
  if (response_override) {
    require(!response_override->empty(), "response override must be nonempty");
    return {model.vocab().detokenize(*response_override), *response_override};
  }
  const auto& responses = refusal_response_set();
  const auto& chosen = responses[static_cast<std::size_t>(sample_refusal_index(rng))];
  std::vector<int> ids = model.vocab().tokenize(chosen);
  ids.push_back(text::Vocabulary::kEos);
  return {chosen, ids};
}

}  // namespace detail

// Whole-sequence optimization: BIM/PGD on the mean teacher-forced
// cross-entropy of one sampled refusal response over the shadow questions.
inline PerturbationResult optimize_refusal_perturbation(const Models& models, const Tensor& image,
                                                        const ShadowQuestionSet& shadow,
                                                        const AttackConfig& cfg,
                                                        const IterationObserver& observer = nullptr,
                                                        const std::vector<int>* response_override = nullptr) {
  cfg.validate();
  require(!models.empty(), "optimize_refusal_perturbation: model set is empty");
  require(!shadow.questions.empty(), "optimize_refusal_perturbation: shadow set is empty");
  models[0]->check_image(image);
  const auto q_ids = detail::tokenize_questions(models, shadow.questions);

  Rng rng(mix_seed(cfg.seed, 0x61746b31ULL));
  auto [chosen_refusal, r_ids] = detail::choose_response(*models[0], rng, response_override);

  detail::LoopState state;
  state.delta = Tensor(image.shape);
  ad::Tape tape;
  auto step_loss = [&](const std::vector<std::size_t>& batch, Tensor& grad) {
    std::vector<std::vector<int>> q_batch;
    for (std::size_t i : batch) q_batch.push_back(q_ids[i]);
    const Tensor x_adv = detail::add_tensors(image, state.delta);
    return refusal_loss_grad(models, r_ids, x_adv, q_batch, tape, grad);
  };
  auto full_mean = [&] {
    return refusal_loss(models, r_ids, image, state.delta, shadow.questions) /
           static_cast<double>(models.size() * shadow.questions.size());
  };
  detail::run_loop(state, image, cfg, shadow.kind, q_ids.size(), step_loss, full_mean, rng,
                   observer);
  return PerturbationResult{std::move(state.delta), std::move(chosen_refusal),
                            std::move(state.trace), state.iterations, state.stopped};
}

// Extension of the toxic-response attack: the shadow set stays empty, so the
// loss conditions on the image alone (prefix is just BOS).
inline PerturbationResult baseline_empty_shadow(const Models& models, const Tensor& image,
                                                const AttackConfig& cfg,
                                                const IterationObserver& observer = nullptr) {
  ShadowQuestionSet empty;
  empty.kind = ShadowKind::Exact;  // no early stopping
  empty.questions = {""};
  AttackConfig c = cfg;
  c.minibatch = 1;
  return optimize_refusal_perturbation(models, image, empty, c, observer);
}

// Extension of the prompt-injection attack: optimizes one response token at a
// time, cycling k = 1..r; each gradient step maximizes log T_k given the
// fixed prefix t_1..t_{k-1}. A full pass costs r steps of the shared budget.
inline PerturbationResult baseline_token_by_token(const Models& models, const Tensor& image,
                                                  const ShadowQuestionSet& shadow,
                                                  const AttackConfig& cfg,
                                                  const IterationObserver& observer = nullptr,
                                                  const std::vector<int>* response_override = nullptr) {
  cfg.validate();
  require(!models.empty(), "baseline_token_by_token: model set is empty");
  require(!shadow.questions.empty(), "baseline_token_by_token: shadow set is empty");
  models[0]->check_image(image);
  const auto q_ids = detail::tokenize_questions(models, shadow.questions);

  Rng rng(mix_seed(cfg.seed, 0x61746b31ULL));
  auto [chosen_refusal, r_ids] = detail::choose_response(*models[0], rng, response_override);
  const std::size_t r = r_ids.size();

  detail::LoopState state;
  state.delta = Tensor(image.shape);
  ad::Tape tape;
  std::size_t token_cursor = 0;  // which T_k the next step maximizes
  auto step_loss = [&](const std::vector<std::size_t>& batch, Tensor& grad) {
    const std::size_t k = token_cursor;
    token_cursor = (token_cursor + 1) % r;
    const Tensor x_adv = detail::add_tensors(image, state.delta);
    tape.reset();
    ad::Var x = tape.leaf_ref(&x_adv, true);
    ad::Var total{};
    bool first = true;
    for (const auto* m : models)
      for (std::size_t qi : batch) {
        ad::Var ce = m->sequence_ce_loss(tape, x, mllm::ToyMllm::with_bos(q_ids[qi]), r_ids, k,
                                         k + 1);
        total = first ? ce : ad::add(total, ce);
        first = false;
      }
    const double norm = static_cast<double>(models.size() * batch.size());
    ad::Var mean = ad::scale(total, 1.0 / norm);
    tape.backward(mean);
    grad = tape.gradient(x);
    return tape.value(mean).data[0];
  };
  auto full_mean = [&] {
    return refusal_loss(models, r_ids, image, state.delta, shadow.questions) /
           static_cast<double>(models.size() * shadow.questions.size());
  };
  detail::run_loop(state, image, cfg, shadow.kind, q_ids.size(), step_loss, full_mean, rng,
                   observer);
  return PerturbationResult{std::move(state.delta), std::move(chosen_refusal),
                            std::move(state.trace), state.iterations, state.stopped};
}

// Quantized publication: round((x + delta) * 255) clamped, as PPM.
inline void export_perturbed_image(const Tensor& image, const Tensor& delta,
                                   const std::string& path) {
  img::write_ppm(detail::add_tensors(image, delta), path);
}

inline void save_loss_trace_csv(const std::vector<double>& trace, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  require<IoError>(static_cast<bool>(os), "cannot open trace CSV for writing: ", path);
  os << "iteration,loss\n";
  os.precision(17);
  for (std::size_t i = 0; i < trace.size(); ++i) os << i << "," << trace[i] << "\n";
  require<IoError>(static_cast<bool>(os), "write failed for trace CSV: ", path);
}

// Raw little-endian f64 dump, row-major over the delta's shape.
inline void save_delta_f64(const Tensor& delta, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require<IoError>(static_cast<bool>(os), "cannot open delta file for writing: ", path);
  os.write(reinterpret_cast<const char*>(delta.data.data()),
           static_cast<std::streamsize>(delta.data.size() * sizeof(double)));
  require<IoError>(static_cast<bool>(os), "write failed for delta file: ", path);
}

inline Tensor load_delta_f64(const std::string& path, const Shape& shape) {
  std::ifstream is(path, std::ios::binary);
  require<IoError>(static_cast<bool>(is), "cannot open delta file: ", path);
  Tensor out(shape);
  is.read(reinterpret_cast<char*>(out.data.data()),
          static_cast<std::streamsize>(out.data.size() * sizeof(double)));
  require<IoError>(static_cast<bool>(is), "truncated delta file: ", path);
  return out;
}

inline nlohmann::json result_to_json(const PerturbationResult& r, const std::string& delta_file,
                                     const std::string& trace_file, double epsilon) {
  return {{"chosen_refusal", r.chosen_refusal},
          {"iterations_run", r.iterations_run},
          {"stopped_early", r.stopped_early},
          {"final_loss", r.loss_trace.empty() ? 0.0 : r.loss_trace.back()},
          {"epsilon", epsilon},
          {"delta_file", delta_file},
          {"loss_trace_file", trace_file}};
}

}  // namespace refusal::attack
