#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "refusal/config.hpp"
#include "refusal/pipeline.hpp"

using namespace refusal;
using namespace refusal::cli;

namespace {

const char* kMiniConfig = R"(
# mini run
[dataset]
n_train = 8
n_test = 4
seed = 5

[model alpha]
seed = 101
projector = ffn2

[model beta]
seed = 202
projector = xattn

[train]
epochs = 1
batch_size = 4
learning_rate = 0.001
seed = 3

[attack]
competing = alpha
shadow = exact
images = 2
max_iter = 3
seed = 17

[eval]
trials = 2
mode = greedy
max_new_tokens = 6
rounds = 2
seed = 23

[defense]
gaussian_sigmas = 0, 0.05
purify_steps = 1
adv_epochs = 1
split_seed = 9

[output]
dir = OUTDIR
jobs = 2
)";

std::string mini_config(const std::string& out_dir) {
  std::string s = kMiniConfig;
  const std::string key = "OUTDIR";
  s.replace(s.find(key), key.size(), out_dir);
  return s;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("config parsing") {
  SECTION("values, sections and lists") {
    auto f = ConfigFile::parse_string("[a]\nx = 3\ny = 1.5\nz = hello\nflag = true\n"
                                      "list = 1, 2, 5\n[model m1]\nseed = 9\n");
    CHECK(f.get_int("a", "x", 0) == 3);
    CHECK(f.get_double("a", "y", 0) == 1.5);
    CHECK(f.get_str("a", "z", "") == "hello");
    CHECK(f.get_bool("a", "flag", false));
    CHECK(f.get_double_list("a", "list") == std::vector<double>{1, 2, 5});
    CHECK(f.get_int("a", "missing", 42) == 42);
    CHECK(f.sections_with_prefix("model ") == std::vector<std::string>{"model m1"});
    CHECK(f.get_u64("model m1", "seed", 0) == 9);
    f.check_all_used();
  }
  SECTION("comments and blank lines") {
    auto f = ConfigFile::parse_string("# header\n[a]\nx = 1  # inline\n\n; other comment\n");
    CHECK(f.get_int("a", "x", 0) == 1);
  }
  SECTION("errors carry line context") {
    try {
      ConfigFile::parse_string("[a]\ngood = 1\nbad-line\n", "test.ini");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("test.ini:3") != std::string::npos);
    }
    CHECK_THROWS_AS(ConfigFile::parse_string("[unclosed\n"), ConfigError);
    CHECK_THROWS_AS(ConfigFile::parse_string("orphan = 1\n"), ConfigError);
    CHECK_THROWS_AS(ConfigFile::parse_string("[a]\nx = 1\nx = 2\n"), ConfigError);
  }
  SECTION("type errors cite the offending line") {
    auto f = ConfigFile::parse_string("[a]\nx = abc\n", "t.ini");
    try {
      f.get_int("a", "x", 0);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("t.ini:2") != std::string::npos);
    }
  }
  SECTION("unknown keys are rejected after building the run config") {
    auto f = ConfigFile::parse_string("[dataset]\nn_train = 4\nn_test = 2\ntypo_key = 1\n"
                                      "[model m]\nseed = 1\n");
    CHECK_THROWS_AS(run_config_from(f), ConfigError);
  }
}

TEST_CASE("run config construction") {
  auto rc = run_config_from(ConfigFile::parse_string(mini_config("/tmp/x")));
  CHECK(rc.n_train == 8);
  CHECK(rc.models.size() == 2);
  CHECK(rc.models[0].id == "alpha");
  CHECK(rc.models[1].projector == mllm::ProjectorVariant::CrossAttention);
  CHECK(rc.competing == std::vector<std::string>{"alpha"});
  CHECK(rc.shadow_kind == attack::ShadowKind::Exact);
  CHECK(rc.attack.max_iter == 3);
  CHECK(rc.attack.minibatch == 1);  // exact default
  CHECK(rc.greedy_eval);
  CHECK(rc.gaussian_sigmas == std::vector<double>{0.0, 0.05});
  CHECK(rc.out_dir == "/tmp/x");

  SECTION("competing must reference a known model") {
    std::string bad = mini_config("/tmp/x");
    const std::string k = "competing = alpha";
    bad.replace(bad.find(k), k.size(), "competing = ghost");
    CHECK_THROWS_AS(run_config_from(ConfigFile::parse_string(bad)), ConfigError);
  }
  SECTION("master seed override rewrites stage seeds") {
    auto a = rc;
    apply_master_seed(a, 7);
    auto b = rc;
    apply_master_seed(b, 7);
    CHECK(a.dataset_seed == b.dataset_seed);
    CHECK(a.dataset_seed != rc.dataset_seed);
    apply_master_seed(b, 8);
    CHECK(a.dataset_seed != b.dataset_seed);
  }
}

TEST_CASE("pipeline stages produce and require artifacts") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "refusal_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto rc = run_config_from(ConfigFile::parse_string(mini_config((dir / "out").string())));

  SECTION("stages demand their prerequisites with actionable messages") {
    try {
      cmd_train(rc);
      FAIL("expected PrereqError");
    } catch (const PrereqError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("train.jsonl") != std::string::npos);
      CHECK(msg.find("gen-data") != std::string::npos);
    }
    CHECK_THROWS_AS(cmd_attack(rc), PrereqError);
    CHECK_THROWS_AS(cmd_evaluate(rc), PrereqError);
    CHECK_THROWS_AS(cmd_defend(rc), PrereqError);
  }

  SECTION("full mini pipeline runs and is idempotent") {
    cmd_gen_data(rc);
    CHECK(fs::exists(dir / "out" / "data" / "train.jsonl"));
    cmd_train(rc);
    CHECK(fs::exists(dir / "out" / "models" / "alpha.tmlm"));
    CHECK(fs::exists(dir / "out" / "models" / "beta.tmlm"));
    cmd_attack(rc);
    const fs::path aset = dir / "out" / "attacks" / "vs_alpha";
    CHECK(fs::exists(aset / "attack_manifest.json"));
    for (int i = 0; i < 2; ++i) {
      char b[8];
      std::snprintf(b, sizeof(b), "%03d", i);
      CHECK(fs::exists(aset / (std::string("item_") + b + ".json")));
      CHECK(fs::exists(aset / (std::string("perturbed_") + b + ".ppm")));
      CHECK(fs::exists(aset / (std::string("delta_") + b + ".f64")));
      CHECK(fs::exists(aset / (std::string("loss_") + b + ".csv")));
    }
    cmd_evaluate(rc);
    CHECK(fs::exists(dir / "out" / "reports" / "eval.json"));
    CHECK(fs::exists(dir / "out" / "reports" / "locality.csv"));
    cmd_defend(rc);
    CHECK(fs::exists(dir / "out" / "reports" / "defense_sweep.csv"));
    CHECK(fs::exists(dir / "out" / "reports" / "adv_train.json"));
    cmd_report(rc);
    CHECK(fs::exists(dir / "out" / "reports" / "summary.json"));
    CHECK(fs::exists(dir / "out" / "reports" / "refusal_rates.csv"));

    // The locality CSV has one row per attacked set, columns = zoo models.
    const std::string csv = read_file(dir / "out" / "reports" / "locality.csv");
    CHECK(csv.find("attacked_vs,alpha,beta") == 0);
    CHECK(csv.find("vs_alpha,") != std::string::npos);

    // Re-running stages overwrites with identical bytes.
    const std::string eval_before = read_file(dir / "out" / "reports" / "eval.json");
    const std::string sweep_before = read_file(dir / "out" / "reports" / "defense_sweep.csv");
    const std::string manifest_before = read_file(aset / "attack_manifest.json");
    cmd_attack(rc);
    cmd_evaluate(rc);
    cmd_defend(rc);
    CHECK(read_file(aset / "attack_manifest.json") == manifest_before);
    CHECK(read_file(dir / "out" / "reports" / "eval.json") == eval_before);
    CHECK(read_file(dir / "out" / "reports" / "defense_sweep.csv") == sweep_before);
  }
  fs::remove_all(dir);
}
