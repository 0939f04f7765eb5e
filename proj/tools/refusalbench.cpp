// Command-line pipeline driver: data generation, model training, refusal
// perturbation attacks, evaluation, countermeasures and report aggregation.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>

#include "refusal/config.hpp"
#include "refusal/pipeline.hpp"

extern "C" void openblas_set_num_threads(int);

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitPrereq = 3;
constexpr int kExitNumeric = 4;

struct GlobalFlags {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 0;
};

refusal::cli::RunConfig make_run_config(const GlobalFlags& flags) {
  refusal::cli::RunConfig rc = refusal::cli::load_run_config(flags.config_path);
  if (!flags.out_dir.empty()) rc.out_dir = flags.out_dir;
  if (flags.seed_set) refusal::cli::apply_master_seed(rc, flags.seed);
  if (flags.jobs > 0) rc.jobs = flags.jobs;
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  openblas_set_num_threads(1);  // per-image work parallelizes above BLAS

  CLI::App app{"refusalbench: refusal-perturbation attacks on toy multimodal models"};
  app.require_subcommand(1);

  GlobalFlags flags;
  app.add_option("--config", flags.config_path, "run configuration file")->required();
  app.add_option("--out", flags.out_dir, "output directory (overrides [output] dir)");
  app.add_option("--seed", flags.seed, "master seed overriding every stage seed")
      ->trigger_on_parse()
      ->each([&flags](const std::string&) { flags.seed_set = true; });
  app.add_option("--jobs", flags.jobs, "worker threads (overrides [output] jobs)");

  void (*stage)(const refusal::cli::RunConfig&) = nullptr;
  app.add_subcommand("gen-data", "generate the synthetic VQA corpus")
      ->callback([&] { stage = refusal::cli::cmd_gen_data; });
  app.add_subcommand("train", "pretrain every configured model")
      ->callback([&] { stage = refusal::cli::cmd_train; });
  app.add_subcommand("attack", "optimize refusal perturbations for test images")
      ->callback([&] { stage = refusal::cli::cmd_attack; });
  app.add_subcommand("evaluate", "refusal rates, accuracy, locality, multi-round")
      ->callback([&] { stage = refusal::cli::cmd_evaluate; });
  app.add_subcommand("defend", "defense sweep and adversarial training protocol")
      ->callback([&] { stage = refusal::cli::cmd_defend; });
  app.add_subcommand("report", "aggregate artifacts into summary reports")
      ->callback([&] { stage = refusal::cli::cmd_report; });

  CLI11_PARSE(app, argc, argv);

  try {
    const refusal::cli::RunConfig rc = make_run_config(flags);
    stage(rc);
    return kExitOk;
  } catch (const refusal::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const refusal::PrereqError& e) {
    std::fprintf(stderr, "missing prerequisite: %s\n", e.what());
    return kExitPrereq;
  } catch (const refusal::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  }
}
