#pragma once

#include <cmath>
#include <fstream>
#include <string>

#include "refusal/tensor.hpp"

namespace refusal::img {

inline std::uint8_t quantize_channel(double v) {
  const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

// Binary PPM (P6, 8-bit). The model consumes pixels/255, so the written file
// is the quantized image on the 1/255 grid.
inline void write_ppm(const Tensor& image, const std::string& path) {
  require<ShapeError>(image.rank() == 3 && image.shape[2] == 3,
                      "write_ppm: expected {H,W,3} image, got ", shape_str(image.shape));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require<IoError>(static_cast<bool>(os), "cannot open image for writing: ", path);
  os << "P6\n" << image.shape[1] << " " << image.shape[0] << "\n255\n";
  for (double v : image.data) os.put(static_cast<char>(quantize_channel(v)));
  require<IoError>(static_cast<bool>(os), "write failed for image: ", path);
}

inline Tensor read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require<IoError>(static_cast<bool>(is), "cannot open image: ", path);
  std::string magic;
  is >> magic;
  require<IoError>(magic == "P6", "not a binary PPM (P6): ", path);
  std::size_t w = 0, h = 0, maxval = 0;
  is >> w >> h >> maxval;
  require<IoError>(static_cast<bool>(is) && maxval == 255, "unsupported PPM header in ", path);
  is.get();  // single whitespace after maxval
  Tensor image({h, w, 3});
  for (auto& v : image.data) {
    const int c = is.get();
    require<IoError>(c != EOF, "truncated PPM payload: ", path);
    v = static_cast<double>(c) / 255.0;
  }
  return image;
}

}  // namespace refusal::img
