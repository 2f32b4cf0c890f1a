#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace reidlab {

// Dense H x W x C raster, interleaved channels, float values in [0,1] for
// pixel data. Doubles as the feature-map container for the nets (HWC layout
// keeps the conv inner loops contiguous).
struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<float> v;

  Image() = default;
  Image(int height, int width, int channels, float fill = 0.f)
      : h(height), w(width), c(channels),
        v(static_cast<size_t>(height) * width * channels, fill) {}

  float& at(int y, int x, int ch) {
    return v[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  float at(int y, int x, int ch) const {
    return v[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  size_t size() const { return v.size(); }
  bool same_shape(const Image& o) const {
    return h == o.h && w == o.w && c == o.c;
  }
};

inline void clamp01(Image& img) {
  for (float& x : img.v) x = std::min(1.f, std::max(0.f, x));
}

// Snap to the 8-bit grid k/255. Stored rasters live on this grid, so
// save/load round-trips are bit-exact.
inline void quantize8(Image& img) {
  for (float& x : img.v) {
    float q = std::min(1.f, std::max(0.f, x));
    x = static_cast<float>(std::lround(q * 255.f)) / 255.f;
  }
}

inline std::vector<float> luminance(const Image& img) {
  std::vector<float> y(static_cast<size_t>(img.h) * img.w);
  if (img.c == 1) {
    y.assign(img.v.begin(), img.v.end());
    return y;
  }
  const float inv = 1.f / static_cast<float>(img.c);
  for (size_t p = 0; p < y.size(); ++p) {
    float s = 0.f;
    for (int ch = 0; ch < img.c; ++ch) s += img.v[p * img.c + ch];
    y[p] = s * inv;
  }
  return y;
}

inline void save_ppm(const std::filesystem::path& path, const Image& img) {
  if (img.c != 3) throw std::invalid_argument("save_ppm: need 3 channels");
  for (float x : img.v) {
    if (!(x >= 0.f && x <= 1.f))
      throw std::invalid_argument("save_ppm: pixel value out of range");
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_ppm: cannot open " + path.string());
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        row[static_cast<size_t>(x) * 3 + ch] = static_cast<unsigned char>(
            std::lround(img.at(y, x, ch) * 255.f));
    f.write(reinterpret_cast<const char*>(row.data()),
            static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw std::runtime_error("save_ppm: write failed " + path.string());
}

inline Image load_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_ppm: missing file " + path.string());
  std::string magic;
  f >> magic;
  if (magic != "P6") throw std::runtime_error("load_ppm: not a P6 file");
  auto next_int = [&f, &path]() {
    // skip whitespace and '#' comment lines
    int ch = f.get();
    while (ch == ' ' || ch == '\n' || ch == '\r' || ch == '\t' || ch == '#') {
      if (ch == '#')
        while (ch != '\n' && ch != EOF) ch = f.get();
      ch = f.get();
    }
    int val = 0;
    bool any = false;
    while (ch >= '0' && ch <= '9') {
      val = val * 10 + (ch - '0');
      any = true;
      ch = f.get();
    }
    if (!any) throw std::runtime_error("load_ppm: bad header " + path.string());
    return val;
  };
  int w = next_int(), h = next_int(), maxval = next_int();
  if (maxval != 255) throw std::runtime_error("load_ppm: maxval must be 255");
  if (w <= 0 || h <= 0) throw std::runtime_error("load_ppm: bad dimensions");
  Image img(h, w, 3);
  std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size()));
  if (static_cast<size_t>(f.gcount()) != buf.size())
    throw std::runtime_error("load_ppm: truncated file " + path.string());
  for (size_t i = 0; i < buf.size(); ++i)
    img.v[i] = static_cast<float>(buf[i]) / 255.f;
  return img;
}

}  // namespace reidlab
