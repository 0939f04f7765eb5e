#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "refusal/ppm.hpp"
#include "refusal/rng.hpp"
#include "refusal/tensor.hpp"
#include "refusal/text.hpp"

namespace refusal::vqa {

enum class ObjShape { Circle, Square, Triangle };
enum class ObjColor { Red, Green, Blue, Yellow };

inline const char* shape_name(ObjShape s) {
  switch (s) {
    case ObjShape::Circle: return "circle";
    case ObjShape::Square: return "square";
    case ObjShape::Triangle: return "triangle";
  }
  return "?";
}

inline const char* color_name(ObjColor c) {
  switch (c) {
    case ObjColor::Red: return "red";
    case ObjColor::Green: return "green";
    case ObjColor::Blue: return "blue";
    case ObjColor::Yellow: return "yellow";
  }
  return "?";
}

struct SceneObject {
  int row = 0;  // grid cell, 0..2
  int col = 0;
  ObjShape shape = ObjShape::Circle;
  ObjColor color = ObjColor::Red;
};

// A 3x3 grid of colored shapes; at most one object per cell.
struct SceneSpec {
  std::vector<SceneObject> objects;  // sorted by (row, col)
  std::uint64_t seed = 0;
};

// Scenes hold one to `max_objects` shapes; sparser scenes keep counting and
// attribute binding learnable at this model scale.
inline SceneSpec random_scene(std::uint64_t seed, std::size_t max_objects = 5) {
  require<ConfigError>(max_objects >= 1 && max_objects <= 9,
                       "random_scene: max_objects must be in 1..9");
  Rng rng(mix_seed(seed, 0x7363656eULL));
  SceneSpec spec;
  spec.seed = seed;
  // Min of two draws biases toward sparse scenes, where attribute questions
  // carry the clearest supervision.
  const std::size_t count = 1 + std::min(rng.index(max_objects), rng.index(max_objects));
  auto cells = rng.sample_indices(9, count);
  std::sort(cells.begin(), cells.end());
  for (std::size_t cell : cells) {
    SceneObject o;
    o.row = static_cast<int>(cell / 3);
    o.col = static_cast<int>(cell % 3);
    o.shape = static_cast<ObjShape>(rng.index(3));
    o.color = static_cast<ObjColor>(rng.index(4));
    spec.objects.push_back(o);
  }
  return spec;
}

namespace render_detail {

inline void rgb_of(ObjColor c, double& r, double& g, double& b) {
  switch (c) {
    case ObjColor::Red: r = 0.85; g = 0.10; b = 0.10; return;
    case ObjColor::Green: r = 0.10; g = 0.70; b = 0.15; return;
    case ObjColor::Blue: r = 0.15; g = 0.20; b = 0.85; return;
    case ObjColor::Yellow: r = 0.90; g = 0.85; b = 0.10; return;
  }
}

// Cell x spans [cell_lo(x), cell_lo(x+1)) on a 32-pixel axis.
inline int cell_lo(int i) { return (i * 32) / 3; }

inline bool inside_shape(ObjShape s, double px, double py, double cx, double cy, double half) {
  switch (s) {
    case ObjShape::Circle: {
      const double dx = px - cx, dy = py - cy;
      return dx * dx + dy * dy <= half * half;
    }
    case ObjShape::Square:
      return std::fabs(px - cx) <= half && std::fabs(py - cy) <= half;
    case ObjShape::Triangle: {
      // Upward triangle: apex at top, base at bottom of the bounding box.
      const double y = (py - (cy - half)) / (2.0 * half);  // 0 top .. 1 bottom
      if (y < 0.0 || y > 1.0) return false;
      return std::fabs(px - cx) <= half * y;
    }
  }
  return false;
}

}  // namespace render_detail

// Deterministic rasterization of a scene to a 32x32x3 image in [0,1].
inline Tensor render_scene(const SceneSpec& spec) {
  namespace d = render_detail;
  constexpr double kBackground = 0.92;
  Tensor image = Tensor::full({32, 32, 3}, kBackground);
  for (const auto& o : spec.objects) {
    const int x0 = d::cell_lo(o.col), x1 = d::cell_lo(o.col + 1);
    const int y0 = d::cell_lo(o.row), y1 = d::cell_lo(o.row + 1);
    const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
    const double half = 4.2;
    double r, g, b;
    d::rgb_of(o.color, r, g, b);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x)
        if (d::inside_shape(o.shape, x + 0.5, y + 0.5, cx, cy, half)) {
          double* px = &image.data[(static_cast<std::size_t>(y) * 32 + x) * 3];
          px[0] = r; px[1] = g; px[2] = b;
        }
  }
  return image;
}

struct QA {
  std::string question;
  std::string answer;
};

// All questions answerable from the scene by rule; answers are single
// vocabulary words.
inline std::vector<QA> make_questions(const SceneSpec& spec) {
  std::vector<QA> out;
  out.push_back({"How many objects are in this image?",
                 text::count_words().at(spec.objects.size() - 1)});
  if (spec.objects.size() == 1) {
    out.push_back({"What color is the object?", color_name(spec.objects[0].color)});
    out.push_back({"What shape is the object?", shape_name(spec.objects[0].shape)});
  }
  for (int s = 0; s < 3; ++s) {
    const auto shape = static_cast<ObjShape>(s);
    int n = 0;
    const SceneObject* only = nullptr;
    for (const auto& o : spec.objects)
      if (o.shape == shape) { ++n; only = &o; }
    out.push_back({std::string("Is there a ") + shape_name(shape) + " in this image?",
                   n > 0 ? "yes" : "no"});
    if (n == 1)
      out.push_back({std::string("What color is the ") + shape_name(shape) + "?",
                     color_name(only->color)});
  }
  for (int c = 0; c < 4; ++c) {
    const auto color = static_cast<ObjColor>(c);
    int n = 0;
    const SceneObject* only = nullptr;
    for (const auto& o : spec.objects)
      if (o.color == color) { ++n; only = &o; }
    out.push_back({std::string("Is there a ") + color_name(color) + " object in this image?",
                   n > 0 ? "yes" : "no"});
    if (n == 1)
      out.push_back({std::string("What shape is the ") + color_name(color) + " object?",
                     shape_name(only->shape)});
  }
  return out;
}

struct VQAItem {
  std::string image_file;
  std::string question;
  std::string answer;
  SceneSpec scene;
};

struct DatasetManifest {
  std::vector<VQAItem> items;
  std::string split;  // "train" or "test"
  std::uint64_t seed = 0;
};

inline nlohmann::json scene_to_json(const SceneSpec& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects)
    objs.push_back({{"row", o.row},
                    {"col", o.col},
                    {"shape", shape_name(o.shape)},
                    {"color", color_name(o.color)}});
  return {{"seed", s.seed}, {"objects", objs}};
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& jo : j.at("objects")) {
    SceneObject o;
    o.row = jo.at("row").get<int>();
    o.col = jo.at("col").get<int>();
    const std::string sh = jo.at("shape").get<std::string>();
    const std::string co = jo.at("color").get<std::string>();
    o.shape = sh == "circle" ? ObjShape::Circle
                             : sh == "square" ? ObjShape::Square : ObjShape::Triangle;
    o.color = co == "red" ? ObjColor::Red
                          : co == "green" ? ObjColor::Green
                                          : co == "blue" ? ObjColor::Blue : ObjColor::Yellow;
    s.objects.push_back(o);
  }
  return s;
}

// JSON lines, one item per line.
inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  require<IoError>(static_cast<bool>(os), "cannot open manifest for writing: ", path);
  for (const auto& item : m.items) {
    nlohmann::json j = {{"image_file", item.image_file},
                        {"question", item.question},
                        {"answer", item.answer},
                        {"scene", scene_to_json(item.scene)},
                        {"split", m.split},
                        {"dataset_seed", m.seed}};
    os << j.dump() << "\n";
  }
  require<IoError>(static_cast<bool>(os), "write failed for manifest: ", path);
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  require<IoError>(static_cast<bool>(is), "cannot open manifest: ", path);
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(format_msg(path, ":", lineno, ": manifest parse error: ", e.what()));
    }
    VQAItem item;
    item.image_file = j.at("image_file").get<std::string>();
    item.question = j.at("question").get<std::string>();
    item.answer = j.at("answer").get<std::string>();
    item.scene = scene_from_json(j.at("scene"));
    m.split = j.at("split").get<std::string>();
    m.seed = j.at("dataset_seed").get<std::uint64_t>();
    m.items.push_back(std::move(item));
  }
  return m;
}

struct Dataset {
  DatasetManifest train;
  DatasetManifest test;
};

// Generates scenes, renders PPMs under <out_dir>/images and writes the two
// manifests. Scene seeds are consecutive stream indices so train/test never
// share a scene. Train items may share a scene (`questions_per_scene` > 1
// asks several distinct questions about one image); test items always use
// one question per scene.
inline Dataset build_dataset(std::size_t n_train, std::size_t n_test, std::uint64_t seed,
                             const std::string& out_dir, std::size_t questions_per_scene = 1) {
  require<ConfigError>(n_train > 0 && n_test > 0, "build_dataset: n_train and n_test must be > 0");
  require<ConfigError>(questions_per_scene >= 1, "build_dataset: questions_per_scene must be >= 1");
  namespace fs = std::filesystem;
  const fs::path images = fs::path(out_dir) / "images";
  std::error_code ec;
  fs::create_directories(images, ec);
  require<IoError>(!ec, "cannot create directory ", images.string(), ": ", ec.message());

  Dataset ds;
  ds.train.split = "train";
  ds.train.seed = seed;
  ds.test.split = "test";
  ds.test.seed = seed;

  struct SceneCache {
    SceneSpec spec;
    std::string file;
    std::vector<QA> order;  // seeded question order
  };
  auto load_scene = [&](DatasetManifest& m, std::size_t scene_index,
                        std::size_t stream) -> SceneCache {
    const std::uint64_t scene_seed = mix_seed(seed, stream);
    SceneCache sc;
    sc.spec = random_scene(scene_seed);
    const Tensor image = render_scene(sc.spec);
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%05zu.ppm", m.split.c_str(), scene_index);
    const fs::path file = images / name;
    img::write_ppm(image, file.string());
    sc.file = file.string();
    sc.order = make_questions(sc.spec);
    Rng rng(mix_seed(scene_seed, 0x71616368ULL));
    rng.shuffle(sc.order);
    return sc;
  };

  const std::size_t train_scenes = (n_train + questions_per_scene - 1) / questions_per_scene;
  std::size_t emitted = 0;
  for (std::size_t s = 0; s < train_scenes && emitted < n_train; ++s) {
    SceneCache sc = load_scene(ds.train, s, s);
    for (std::size_t q = 0; q < questions_per_scene && emitted < n_train; ++q, ++emitted) {
      const QA& qa = sc.order[q % sc.order.size()];
      ds.train.items.push_back(VQAItem{sc.file, qa.question, qa.answer, sc.spec});
    }
  }
  for (std::size_t i = 0; i < n_test; ++i) {
    SceneCache sc = load_scene(ds.test, i, train_scenes + i);
    ds.test.items.push_back(VQAItem{sc.file, sc.order[0].question, sc.order[0].answer, sc.spec});
  }
  save_manifest(ds.train, (fs::path(out_dir) / "train.jsonl").string());
  save_manifest(ds.test, (fs::path(out_dir) / "test.jsonl").string());
  return ds;
}

}  // namespace refusal::vqa
