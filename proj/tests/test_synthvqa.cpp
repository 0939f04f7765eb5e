#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "refusal/ppm.hpp"
#include "refusal/synthvqa.hpp"

using namespace refusal;
using namespace refusal::vqa;

namespace {

// Test-local answer oracle: re-derives the answer from the scene by parsing
// the question text, independently of make_questions.
std::string answer_by_rule(const SceneSpec& scene, const std::string& question) {
  auto count_shape = [&](const char* name) {
    int n = 0;
    for (const auto& o : scene.objects)
      if (std::string(shape_name(o.shape)) == name) ++n;
    return n;
  };
  auto count_color = [&](const char* name) {
    int n = 0;
    for (const auto& o : scene.objects)
      if (std::string(color_name(o.color)) == name) ++n;
    return n;
  };
  if (question == "How many objects are in this image?")
    return text::count_words().at(scene.objects.size() - 1);
  if (question == "What color is the object?") {
    REQUIRE(scene.objects.size() == 1);
    return color_name(scene.objects[0].color);
  }
  if (question == "What shape is the object?") {
    REQUIRE(scene.objects.size() == 1);
    return shape_name(scene.objects[0].shape);
  }
  for (const char* s : {"circle", "square", "triangle"}) {
    if (question == std::string("Is there a ") + s + " in this image?")
      return count_shape(s) > 0 ? "yes" : "no";
    if (question == std::string("What color is the ") + s + "?") {
      REQUIRE(count_shape(s) == 1);
      for (const auto& o : scene.objects)
        if (std::string(shape_name(o.shape)) == s) return color_name(o.color);
    }
  }
  for (const char* c : {"red", "green", "blue", "yellow"}) {
    if (question == std::string("Is there a ") + c + " object in this image?")
      return count_color(c) > 0 ? "yes" : "no";
    if (question == std::string("What shape is the ") + c + " object?") {
      REQUIRE(count_color(c) == 1);
      for (const auto& o : scene.objects)
        if (std::string(color_name(o.color)) == c) return shape_name(o.shape);
    }
  }
  FAIL("unrecognized question: " << question);
  return "";
}

}  // namespace

TEST_CASE("empty grid renders pure background") {
  SceneSpec empty;
  Tensor image = render_scene(empty);
  CHECK(image.shape == Shape{32, 32, 3});
  for (double v : image.data) CHECK(v == 0.92);
}

TEST_CASE("rendering is deterministic") {
  SceneSpec spec = random_scene(404);
  CHECK(render_scene(spec) == render_scene(spec));
}

TEST_CASE("red circle in the top-left cell dominates that region in red") {
  SceneSpec spec;
  spec.objects.push_back(SceneObject{0, 0, ObjShape::Circle, ObjColor::Red});
  Tensor image = render_scene(spec);
  double red = 0.0, blue = 0.0;
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) {
      red += image.data[(y * 32 + x) * 3 + 0];
      blue += image.data[(y * 32 + x) * 3 + 2];
    }
  CHECK(red / 100.0 > blue / 100.0);
}

TEST_CASE("question construction examples") {
  SceneSpec spec;
  spec.objects.push_back(SceneObject{0, 0, ObjShape::Circle, ObjColor::Red});
  spec.objects.push_back(SceneObject{1, 1, ObjShape::Square, ObjColor::Blue});
  spec.objects.push_back(SceneObject{2, 2, ObjShape::Square, ObjColor::Green});
  auto qas = make_questions(spec);
  auto find = [&qas](const std::string& q) -> std::string {
    for (const auto& qa : qas)
      if (qa.question == q) return qa.answer;
    return "<missing>";
  };
  CHECK(find("How many objects are in this image?") == "three");
  CHECK(find("What color is the circle?") == "red");
  CHECK(find("Is there a triangle in this image?") == "no");
  CHECK(find("Is there a square in this image?") == "yes");
  // Two squares: no unique-square color question may exist.
  CHECK(find("What color is the square?") == "<missing>");
}

TEST_CASE("every generated answer matches the independent rule check") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    SceneSpec spec = random_scene(seed);
    REQUIRE(spec.objects.size() >= 1);
    REQUIRE(spec.objects.size() <= 9);
    for (const auto& qa : make_questions(spec)) {
      INFO("seed " << seed << " q: " << qa.question);
      CHECK(qa.answer == answer_by_rule(spec, qa.question));
      CHECK(text::Vocabulary::default_vocab().tokenizes_clean(qa.question));
    }
  }
}

TEST_CASE("scene invariants hold for random scenes") {
  for (std::uint64_t seed = 100; seed < 160; ++seed) {
    SceneSpec spec = random_scene(seed);
    std::set<std::pair<int, int>> cells;
    for (const auto& o : spec.objects) {
      CHECK(o.row >= 0);
      CHECK(o.row < 3);
      CHECK(o.col >= 0);
      CHECK(o.col < 3);
      CHECK(cells.insert({o.row, o.col}).second);  // one object per cell
    }
  }
}

TEST_CASE("ppm round trip") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "refusal_ppm_test";
  fs::create_directories(dir);
  const std::string path = (dir / "img.ppm").string();

  Rng rng(77);
  Tensor image({32, 32, 3});
  for (auto& v : image.data) v = rng.uniform01();
  img::write_ppm(image, path);
  Tensor back = img::read_ppm(path);
  REQUIRE(back.shape == image.shape);
  for (std::size_t i = 0; i < image.numel(); ++i) {
    const double quantized = img::quantize_channel(image.data[i]) / 255.0;
    CHECK(back.data[i] == quantized);
  }
  // A quantized image re-encodes to identical bytes.
  const std::string path2 = (dir / "img2.ppm").string();
  img::write_ppm(back, path2);
  CHECK(img::read_ppm(path2) == back);
  fs::remove_all(dir);
}

TEST_CASE("dataset build is reproducible and splits are disjoint") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "refusal_vqa_test";
  fs::remove_all(dir);

  Dataset a = build_dataset(12, 5, 7, (dir / "a").string());
  Dataset b = build_dataset(12, 5, 7, (dir / "b").string());
  REQUIRE(a.train.items.size() == 12);
  REQUIRE(a.test.items.size() == 5);
  for (std::size_t i = 0; i < a.train.items.size(); ++i) {
    CHECK(a.train.items[i].question == b.train.items[i].question);
    CHECK(a.train.items[i].answer == b.train.items[i].answer);
    CHECK(a.train.items[i].scene.seed == b.train.items[i].scene.seed);
  }
  std::set<std::uint64_t> train_seeds, test_seeds;
  for (const auto& it : a.train.items) train_seeds.insert(it.scene.seed);
  for (const auto& it : a.test.items) test_seeds.insert(it.scene.seed);
  for (auto s : test_seeds) CHECK(train_seeds.count(s) == 0);

  SECTION("manifest save/load round trip") {
    DatasetManifest loaded = load_manifest((dir / "a" / "train.jsonl").string());
    REQUIRE(loaded.items.size() == a.train.items.size());
    CHECK(loaded.split == a.train.split);
    CHECK(loaded.seed == a.train.seed);
    for (std::size_t i = 0; i < loaded.items.size(); ++i) {
      CHECK(loaded.items[i].image_file == a.train.items[i].image_file);
      CHECK(loaded.items[i].question == a.train.items[i].question);
      CHECK(loaded.items[i].answer == a.train.items[i].answer);
      CHECK(loaded.items[i].scene.seed == a.train.items[i].scene.seed);
      CHECK(loaded.items[i].scene.objects.size() == a.train.items[i].scene.objects.size());
    }
  }
  SECTION("rejects invalid sizes") {
    CHECK_THROWS_AS(build_dataset(0, 5, 1, (dir / "c").string()), ConfigError);
  }
  fs::remove_all(dir);
}

TEST_CASE("a test build of 100 items mirrors the evaluation count") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "refusal_vqa_100";
  fs::remove_all(dir);
  Dataset ds = build_dataset(1, 100, 3, dir.string());
  CHECK(ds.test.items.size() == 100);
  fs::remove_all(dir);
}
