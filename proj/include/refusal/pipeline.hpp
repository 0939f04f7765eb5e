#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "refusal/attack.hpp"
#include "refusal/checkpoint.hpp"
#include "refusal/config.hpp"
#include "refusal/defenses.hpp"
#include "refusal/evaluation.hpp"
#include "refusal/parallel.hpp"
#include "refusal/synthvqa.hpp"
#include "refusal/training.hpp"

namespace refusal::cli {

namespace fs = std::filesystem;

struct OutPaths {
  fs::path root;
  explicit OutPaths(const std::string& dir) : root(dir) {}

  fs::path data() const { return root / "data"; }
  fs::path train_manifest() const { return data() / "train.jsonl"; }
  fs::path test_manifest() const { return data() / "test.jsonl"; }
  fs::path models() const { return root / "models"; }
  fs::path checkpoint(const std::string& id) const { return models() / (id + ".tmlm"); }
  fs::path train_report(const std::string& id) const {
    return models() / (id + "_train_report.json");
  }
  fs::path attacks() const { return root / "attacks"; }
  fs::path attack_set(const std::string& name) const { return attacks() / name; }
  fs::path attack_manifest(const std::string& name) const {
    return attack_set(name) / "attack_manifest.json";
  }
  fs::path reports() const { return root / "reports"; }
  fs::path manifests() const { return root / "manifests"; }
};

namespace detail {

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  require<IoError>(!ec, "cannot create directory ", p.string(), ": ", ec.message());
}

inline void require_artifact(const fs::path& p, const std::string& producing_command) {
  require<PrereqError>(fs::exists(p), "missing artifact ", p.string(), "; run `refusalbench ",
                       producing_command, "` first");
}

inline void write_json(const nlohmann::json& j, const fs::path& p) {
  std::ofstream os(p, std::ios::trunc);
  require<IoError>(static_cast<bool>(os), "cannot open for writing: ", p.string());
  os << j.dump(2) << "\n";
  require<IoError>(static_cast<bool>(os), "write failed: ", p.string());
}

inline nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  require<IoError>(static_cast<bool>(is), "cannot open: ", p.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(format_msg(p.string(), ": JSON parse error: ", e.what()));
  }
}

// Stage manifest: enough provenance to re-run the stage in isolation.
inline void write_stage_manifest(const RunConfig& rc, const OutPaths& out,
                                 const std::string& stage, nlohmann::json seeds,
                                 std::vector<std::string> artifacts) {
  ensure_dir(out.manifests());
  std::sort(artifacts.begin(), artifacts.end());
  write_json({{"stage", stage},
              {"config_hash", rc.config_hash},
              {"jobs", rc.jobs},
              {"seeds", std::move(seeds)},
              {"artifacts", artifacts}},
             out.manifests() / (stage + ".json"));
}

inline mllm::ToyMllm build_model(const ModelSpec& spec) {
  return mllm::ToyMllm(spec.id, spec.seed, spec.projector);
}

inline mllm::ToyMllm load_model(const RunConfig& rc, const OutPaths& out, const std::string& id) {
  require_artifact(out.checkpoint(id), "train --config <config>");
  mllm::ToyMllm model = build_model(rc.model_spec(id));
  mllm::load_checkpoint(model, out.checkpoint(id).string());
  return model;
}

inline mllm::GenerationConfig gen_config(const RunConfig& rc) {
  mllm::GenerationConfig gen;
  gen.temperature = rc.temperature;
  gen.max_new_tokens = rc.max_new_tokens;
  gen.mode = rc.greedy_eval ? mllm::GenerationConfig::Mode::Greedy
                            : mllm::GenerationConfig::Mode::Sample;
  gen.seed = rc.eval_seed;
  return gen;
}

// One attacked set per competing entry: either each listed model separately
// or all of them jointly.
struct CompetingSet {
  std::string name;                  // directory name under attacks/
  std::vector<std::string> models;   // model ids in the set
};

inline std::vector<CompetingSet> competing_sets(const RunConfig& rc) {
  std::vector<CompetingSet> sets;
  if (rc.joint_attack) {
    CompetingSet joint;
    joint.models = rc.competing;
    joint.name = "joint";
    for (const auto& id : rc.competing) joint.name += "+" + id;
    sets.push_back(std::move(joint));
  } else {
    for (const auto& id : rc.competing) sets.push_back(CompetingSet{"vs_" + id, {id}});
  }
  return sets;
}

}  // namespace detail

inline void cmd_gen_data(const RunConfig& rc) {
  OutPaths out(rc.out_dir);
  detail::ensure_dir(out.data());
  vqa::Dataset ds = vqa::build_dataset(rc.n_train, rc.n_test, rc.dataset_seed,
                                       out.data().string(), rc.questions_per_scene);
  std::vector<std::string> artifacts = {out.train_manifest().string(),
                                        out.test_manifest().string()};
  for (const auto& item : ds.train.items) artifacts.push_back(item.image_file);
  for (const auto& item : ds.test.items) artifacts.push_back(item.image_file);
  detail::write_stage_manifest(rc, out, "gen-data", {{"dataset", rc.dataset_seed}},
                               std::move(artifacts));
}

inline void cmd_train(const RunConfig& rc) {
  OutPaths out(rc.out_dir);
  detail::require_artifact(out.train_manifest(), "gen-data --config <config>");
  detail::require_artifact(out.test_manifest(), "gen-data --config <config>");
  detail::ensure_dir(out.models());
  const auto train_split = vqa::load_manifest(out.train_manifest().string());
  const auto test_split = vqa::load_manifest(out.test_manifest().string());
  std::vector<std::string> artifacts;
  nlohmann::json seeds = {{"train", rc.train.seed}};
  for (const auto& spec : rc.models) {
    mllm::ToyMllm model = detail::build_model(spec);
    train::TrainConfig cfg = rc.train;
    cfg.seed = mix_seed(rc.train.seed, std::hash<std::string>{}(spec.id));
    const train::TrainReport report = train::pretrain(model, train_split, cfg, &test_split,
                                                      rc.jobs);
    mllm::save_checkpoint(model, out.checkpoint(spec.id).string());
    nlohmann::json rj = train::report_to_json(report);
    rj["model_id"] = spec.id;
    rj["projector"] = mllm::projector_name(spec.projector);
    rj["model_seed"] = spec.seed;
    detail::write_json(rj, out.train_report(spec.id));
    artifacts.push_back(out.checkpoint(spec.id).string());
    artifacts.push_back(out.train_report(spec.id).string());
    seeds["model_" + spec.id] = cfg.seed;
  }
  detail::write_stage_manifest(rc, out, "train", std::move(seeds), std::move(artifacts));
}

inline void cmd_attack(const RunConfig& rc) {
  OutPaths out(rc.out_dir);
  detail::require_artifact(out.test_manifest(), "gen-data --config <config>");
  const auto test_split = vqa::load_manifest(out.test_manifest().string());
  require<ConfigError>(rc.attack_images <= test_split.items.size(), "attack: requested ",
                       rc.attack_images, " images but the test split holds ",
                       test_split.items.size());

  std::vector<std::string> artifacts;
  for (const auto& set : detail::competing_sets(rc)) {
    std::vector<mllm::ToyMllm> loaded;
    for (const auto& id : set.models) loaded.push_back(detail::load_model(rc, out, id));
    attack::Models models;
    for (const auto& m : loaded) models.push_back(&m);

    const fs::path dir = out.attack_set(set.name);
    detail::ensure_dir(dir);
    nlohmann::json items = nlohmann::json::array();
    items.get_ref<nlohmann::json::array_t&>().resize(rc.attack_images);

    std::vector<std::string> set_files(rc.attack_images * 4);
    parallel_for(rc.attack_images, rc.jobs, [&](std::size_t i) {
      const vqa::VQAItem& vq = test_split.items[i];
      const Tensor image = img::read_ppm(vq.image_file);
      attack::QuestionPools pools;
      const std::uint64_t item_seed = mix_seed(rc.attack.seed, i);
      const attack::ShadowQuestionSet shadow = attack::build_shadow_questions(
          rc.shadow_kind, vq.question, pools, rc.shadow_count, item_seed);
      attack::AttackConfig acfg = rc.attack;
      acfg.seed = item_seed;
      const attack::PerturbationResult res =
          attack::optimize_refusal_perturbation(models, image, shadow, acfg);

      char base[32];
      std::snprintf(base, sizeof(base), "%03zu", i);
      const std::string json_file = (dir / (std::string("item_") + base + ".json")).string();
      const std::string delta_file = (dir / (std::string("delta_") + base + ".f64")).string();
      const std::string ppm_file = (dir / (std::string("perturbed_") + base + ".ppm")).string();
      const std::string trace_file = (dir / (std::string("loss_") + base + ".csv")).string();
      attack::save_delta_f64(res.delta, delta_file);
      attack::save_loss_trace_csv(res.loss_trace, trace_file);
      attack::export_perturbed_image(image, res.delta, ppm_file);
      nlohmann::json j = attack::result_to_json(res, delta_file, trace_file, acfg.epsilon);
      j["clean_image"] = vq.image_file;
      j["perturbed_image"] = ppm_file;
      j["question"] = vq.question;
      j["answer"] = vq.answer;
      j["item_index"] = i;
      j["seed"] = item_seed;
      detail::write_json(j, json_file);
      items[i] = {{"index", i},
                  {"json", json_file},
                  {"clean_image", vq.image_file},
                  {"perturbed_image", ppm_file},
                  {"question", vq.question},
                  {"answer", vq.answer},
                  {"chosen_refusal", res.chosen_refusal},
                  {"iterations_run", res.iterations_run},
                  {"stopped_early", res.stopped_early}};
      set_files[i * 4 + 0] = json_file;
      set_files[i * 4 + 1] = delta_file;
      set_files[i * 4 + 2] = ppm_file;
      set_files[i * 4 + 3] = trace_file;
    });

    nlohmann::json manifest = {{"competing_models", set.models},
                               {"shadow_kind", attack::shadow_kind_name(rc.shadow_kind)},
                               {"shadow_count", rc.shadow_count},
                               {"epsilon", rc.attack.epsilon},
                               {"optimizer", rc.attack.optimizer ==
                                                     attack::AttackConfig::Optimizer::BIM
                                                 ? "bim"
                                                 : "pgd"},
                               {"step_size", rc.attack.alpha},
                               {"max_iter", rc.attack.max_iter},
                               {"minibatch", rc.attack.minibatch},
                               {"seed", rc.attack.seed},
                               {"items", items}};
    detail::write_json(manifest, out.attack_manifest(set.name));
    artifacts.push_back(out.attack_manifest(set.name).string());
    artifacts.insert(artifacts.end(), set_files.begin(), set_files.end());
  }
  detail::write_stage_manifest(rc, out, "attack", {{"attack", rc.attack.seed}},
                               std::move(artifacts));
}

// Items of one attacked set, loaded back from the quantized published images.
inline std::vector<eval::EvalItem> load_attacked_items(const nlohmann::json& manifest) {
  std::vector<eval::EvalItem> items;
  for (const auto& j : manifest.at("items"))
    items.push_back(eval::EvalItem{img::read_ppm(j.at("perturbed_image").get<std::string>()),
                                   j.at("question").get<std::string>(),
                                   j.at("answer").get<std::string>()});
  return items;
}

inline std::vector<eval::EvalItem> load_clean_counterparts(const nlohmann::json& manifest) {
  std::vector<eval::EvalItem> items;
  for (const auto& j : manifest.at("items"))
    items.push_back(eval::EvalItem{img::read_ppm(j.at("clean_image").get<std::string>()),
                                   j.at("question").get<std::string>(),
                                   j.at("answer").get<std::string>()});
  return items;
}

inline void cmd_evaluate(const RunConfig& rc) {
  OutPaths out(rc.out_dir);
  detail::require_artifact(out.test_manifest(), "gen-data --config <config>");
  const auto sets = detail::competing_sets(rc);
  for (const auto& set : sets)
    detail::require_artifact(out.attack_manifest(set.name), "attack --config <config>");
  detail::ensure_dir(out.reports());

  std::vector<mllm::ToyMllm> zoo;
  for (const auto& spec : rc.models) zoo.push_back(detail::load_model(rc, out, spec.id));
  const auto test_split = vqa::load_manifest(out.test_manifest().string());
  const auto clean_eval_items = train::eval_items_from_manifest(test_split);
  const mllm::GenerationConfig gen = detail::gen_config(rc);

  eval::EvalReport report;
  report.trials = rc.trials;
  report.temperature = rc.greedy_eval ? 0.0 : rc.temperature;
  for (const auto& spec : rc.models) report.locality_models.push_back(spec.id);

  // Clean-image behavior of every model: accuracy on the full test split and
  // refusal rate on the attacked items' clean counterparts.
  const auto first_manifest = detail::read_json(out.attack_manifest(sets[0].name));
  const auto clean_counterparts = load_clean_counterparts(first_manifest);
  for (std::size_t m = 0; m < zoo.size(); ++m) {
    report.accuracy[rc.models[m].id] = eval::accuracy(zoo[m], clean_eval_items, gen, nullptr,
                                                      rc.jobs);
    report.clean_refusal_rate[rc.models[m].id] =
        eval::refusal_rate(zoo[m], clean_counterparts, rc.trials, gen, {}, rc.jobs);
  }

  // Locality: rows = attacked-against set, columns = every zoo model.
  for (std::size_t s = 0; s < sets.size(); ++s) {
    const auto manifest = detail::read_json(out.attack_manifest(sets[s].name));
    const auto attacked = load_attacked_items(manifest);
    std::vector<double> row;
    for (std::size_t m = 0; m < zoo.size(); ++m) {
      mllm::GenerationConfig cell = gen;
      cell.seed = mix_seed(gen.seed, s, m);
      row.push_back(eval::refusal_rate(zoo[m], attacked, rc.trials, cell, {}, rc.jobs));
    }
    report.locality.push_back(std::move(row));
  }

  // Multi-round decay against each competing set's own models.
  if (rc.rounds > 1) {
    for (std::size_t s = 0; s < sets.size(); ++s) {
      const auto manifest = detail::read_json(out.attack_manifest(sets[s].name));
      const auto attacked = load_attacked_items(manifest);
      for (const auto& id : sets[s].models) {
        const mllm::ToyMllm* model = nullptr;
        for (std::size_t m = 0; m < zoo.size(); ++m)
          if (rc.models[m].id == id) model = &zoo[m];
        std::vector<double> per_round(static_cast<std::size_t>(rc.rounds), 0.0);
        std::vector<std::vector<bool>> flags(attacked.size());
        parallel_for(attacked.size(), rc.jobs, [&](std::size_t i) {
          mllm::GenerationConfig mr = gen;
          mr.seed = mix_seed(gen.seed, 0x6d72ULL, i);
          flags[i] = eval::multi_round_eval(*model, attacked[i].image, attacked[i].question,
                                            rc.rounds, mr)
                         .refusal_per_round;
        });
        for (const auto& f : flags)
          for (std::size_t r = 0; r < f.size(); ++r)
            per_round[r] += f[r] ? 1.0 / static_cast<double>(flags.size()) : 0.0;
        report.per_round_rates[sets[s].name + ":" + id] = per_round;
      }
    }
  }

  nlohmann::json j = eval::report_to_json(report);
  nlohmann::json row_labels = nlohmann::json::array();
  for (const auto& set : sets) row_labels.push_back(set.name);
  j["locality"]["rows"] = row_labels;
  detail::write_json(j, out.reports() / "eval.json");

  // CSV matrix: one row per attacked-against set.
  std::ofstream csv(out.reports() / "locality.csv", std::ios::trunc);
  require<IoError>(static_cast<bool>(csv), "cannot open locality.csv for writing");
  csv.precision(17);
  csv << "attacked_vs";
  for (const auto& id : report.locality_models) csv << "," << id;
  csv << "\n";
  for (std::size_t s = 0; s < sets.size(); ++s) {
    csv << sets[s].name;
    for (double v : report.locality[s]) csv << "," << v;
    csv << "\n";
  }
  csv.close();

  detail::write_stage_manifest(rc, out, "evaluate", {{"eval", rc.eval_seed}},
                               {(out.reports() / "eval.json").string(),
                                (out.reports() / "locality.csv").string()});
}

inline void cmd_defend(const RunConfig& rc) {
  OutPaths out(rc.out_dir);
  const auto sets = detail::competing_sets(rc);
  detail::require_artifact(out.attack_manifest(sets[0].name), "attack --config <config>");
  detail::require_artifact(out.test_manifest(), "gen-data --config <config>");
  detail::ensure_dir(out.reports());

  const auto manifest = detail::read_json(out.attack_manifest(sets[0].name));
  const auto attacked = load_attacked_items(manifest);
  const auto test_split = vqa::load_manifest(out.test_manifest().string());
  const auto clean_items = train::eval_items_from_manifest(test_split);
  const mllm::GenerationConfig gen = detail::gen_config(rc);
  const std::string defender_id = sets[0].models[0];
  mllm::ToyMllm model = detail::load_model(rc, out, defender_id);

  std::vector<defense::DefenseConfig> configs;
  for (double sigma : rc.gaussian_sigmas) {
    defense::DefenseConfig c;
    c.kind = defense::DefenseConfig::Kind::GaussianNoise;
    c.sigma = sigma;
    c.seed = mix_seed(rc.eval_seed, 0x676eULL);
    configs.push_back(c);
  }
  if (rc.purify_enabled) {
    defense::DefenseConfig c;
    c.kind = defense::DefenseConfig::Kind::Purify;
    c.steps = rc.purify_steps;
    c.radius = rc.purify_radius;
    c.sigma = rc.purify_sigma;
    c.seed = mix_seed(rc.eval_seed, 0x7075ULL);
    configs.push_back(c);
  }
  const auto rows = defense::run_defense_sweep(model, clean_items, attacked, configs, rc.trials,
                                               gen, {}, rc.jobs);
  defense::write_sweep_csv(rows, (out.reports() / "defense_sweep.csv").string());
  std::vector<std::string> artifacts = {(out.reports() / "defense_sweep.csv").string()};

  if (rc.adv_train_enabled) {
    std::vector<eval::EvalItem> even_items = attacked;
    if (even_items.size() % 2 == 1) even_items.pop_back();
    require(even_items.size() >= 2, "adversarial training needs at least 2 attacked items");
    const auto outcome = defense::adversarial_training_protocol(
        model, even_items, clean_items, rc.adv_train, rc.split_seed, rc.trials, gen, {}, rc.jobs);
    nlohmann::json aj = defense::advtrain_to_json(outcome);
    aj["defender"] = defender_id;
    detail::write_json(aj, out.reports() / "adv_train.json");
    mllm::save_checkpoint(model, out.checkpoint(defender_id + "_advtrained").string());
    artifacts.push_back((out.reports() / "adv_train.json").string());
    artifacts.push_back(out.checkpoint(defender_id + "_advtrained").string());
  }
  detail::write_stage_manifest(rc, out, "defend",
                               {{"eval", rc.eval_seed}, {"split", rc.split_seed}},
                               std::move(artifacts));
}

inline void cmd_report(const RunConfig& rc) {
  OutPaths out(rc.out_dir);
  detail::ensure_dir(out.reports());
  nlohmann::json summary;
  summary["config_hash"] = rc.config_hash;

  nlohmann::json models = nlohmann::json::array();
  for (const auto& spec : rc.models) {
    nlohmann::json m = {{"id", spec.id},
                        {"seed", spec.seed},
                        {"projector", mllm::projector_name(spec.projector)}};
    if (fs::exists(out.train_report(spec.id)))
      m["train_report"] = detail::read_json(out.train_report(spec.id));
    models.push_back(std::move(m));
  }
  summary["models"] = std::move(models);

  nlohmann::json attacks = nlohmann::json::object();
  for (const auto& set : detail::competing_sets(rc)) {
    if (!fs::exists(out.attack_manifest(set.name))) continue;
    const auto manifest = detail::read_json(out.attack_manifest(set.name));
    double mean_iters = 0.0;
    long stopped = 0;
    const auto& items = manifest.at("items");
    for (const auto& j : items) {
      mean_iters += j.at("iterations_run").get<double>();
      stopped += j.at("stopped_early").get<bool>() ? 1 : 0;
    }
    if (!items.empty()) mean_iters /= static_cast<double>(items.size());
    attacks[set.name] = {{"shadow_kind", manifest.at("shadow_kind")},
                         {"epsilon", manifest.at("epsilon")},
                         {"optimizer", manifest.at("optimizer")},
                         {"images", items.size()},
                         {"mean_iterations", mean_iters},
                         {"stopped_early_count", stopped}};
  }
  summary["attacks"] = std::move(attacks);

  if (fs::exists(out.reports() / "eval.json"))
    summary["evaluation"] = detail::read_json(out.reports() / "eval.json");
  if (fs::exists(out.reports() / "adv_train.json"))
    summary["adversarial_training"] = detail::read_json(out.reports() / "adv_train.json");
  if (fs::exists(out.reports() / "defense_sweep.csv")) {
    std::ifstream is(out.reports() / "defense_sweep.csv");
    nlohmann::json lines = nlohmann::json::array();
    std::string line;
    while (std::getline(is, line))
      if (!line.empty()) lines.push_back(line);
    summary["defense_sweep_csv"] = std::move(lines);
  }
  detail::write_json(summary, out.reports() / "summary.json");

  // Refusal-rate table (rows = attacked sets, columns = models), shaped like
  // the locality CSV but kept as the primary headline table.
  if (fs::exists(out.reports() / "eval.json")) {
    const auto ev = detail::read_json(out.reports() / "eval.json");
    std::ofstream csv(out.reports() / "refusal_rates.csv", std::ios::trunc);
    require<IoError>(static_cast<bool>(csv), "cannot open refusal_rates.csv for writing");
    csv.precision(17);
    csv << "set";
    for (const auto& id : ev.at("locality").at("models")) csv << "," << id.get<std::string>();
    csv << "\n";
    const auto& rows = ev.at("locality").at("rows");
    const auto& matrix = ev.at("locality").at("matrix");
    for (std::size_t i = 0; i < rows.size(); ++i) {
      csv << rows[i].get<std::string>();
      for (const auto& v : matrix[i]) csv << "," << v.get<double>();
      csv << "\n";
    }
  }
  detail::write_stage_manifest(rc, out, "report", nlohmann::json::object(),
                               {(out.reports() / "summary.json").string()});
}

}  // namespace refusal::cli
