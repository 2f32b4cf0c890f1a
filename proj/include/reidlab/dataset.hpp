#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "reidlab/image.hpp"
#include "reidlab/rng.hpp"

namespace reidlab {

enum class Role { train, query, gallery };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::train: return "train";
    case Role::query: return "query";
    default: return "gallery";
  }
}

inline Role role_from_name(const std::string& s) {
  if (s == "train") return Role::train;
  if (s == "query") return Role::query;
  if (s == "gallery") return Role::gallery;
  throw std::invalid_argument("unknown role: " + s);
}

// Appearance parameters, all in [0,1]; the renderer maps them to geometry
// and colors internally.
struct IdentitySpec {
  int id = 0;
  double torso_hue = 0, leg_hue = 0, skin_tone = 0;
  double build = 0.5;   // body width factor
  double stature = 0.5; // body height factor
};

struct CameraSpec {
  int cam_id = 0;
  double gain = 1.0;              // [0.7, 1.3]
  double tint[3] = {1, 1, 1};     // per-channel multiplier
  double noise_sigma = 0.02;      // Gaussian, additive; must stay <= 0.1
};

struct PersonImage {
  Image pixels;      // 128 x 64 x 3, values on the 8-bit grid
  int gt_id = -1;
  int cam_id = -1;
  std::string key;   // relative path, unique within a manifest
  Role role = Role::train;
};

struct DatasetConfig {
  int n_train_ids = 40;
  int n_test_ids = 40;
  int imgs_per_id = 8;
  int n_cams = 2;
  double noise_lo = 0.015, noise_hi = 0.030;
  // Appearance contrast: 1 keeps the renderer's saturated palette, smaller
  // values pull every figure toward the backdrop, like washed-out
  // surveillance footage. Identity ordering is unaffected.
  double contrast = 1.0;
};

struct DatasetManifest {
  std::vector<PersonImage> images;
  int n_train_ids = 0;
  int n_test_ids = 0;
  uint64_t seed = 0;
  uint64_t config_hash = 0;  // stamp of the config that produced this set

  std::vector<const PersonImage*> with_role(Role r) const {
    std::vector<const PersonImage*> out;
    for (const auto& im : images)
      if (im.role == r) out.push_back(&im);
    return out;
  }
  const PersonImage* find(const std::string& key) const {
    for (const auto& im : images)
      if (im.key == key) return &im;
    return nullptr;
  }
};

inline constexpr int kPersonH = 128;
inline constexpr int kPersonW = 64;

namespace detail {

inline void hsv_to_rgb(double hue01, double s, double v, double rgb[3]) {
  double h = hue01 * 6.0;
  int i = static_cast<int>(h) % 6;
  double f = h - std::floor(h);
  double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

inline void fill_rect(Image& img, int y0, int y1, int x0, int x1,
                      const double rgb[3]) {
  y0 = std::max(0, y0); x0 = std::max(0, x0);
  y1 = std::min(img.h, y1); x1 = std::min(img.w, x1);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x)
      for (int ch = 0; ch < 3; ++ch)
        img.at(y, x, ch) = static_cast<float>(rgb[ch]);
}

}  // namespace detail

// Layered-rectangle person on a flat backdrop: head / torso / legs bands,
// sized by the identity's build and stature. Jitter shifts the figure by a
// couple of pixels so same-identity images differ beyond camera noise.
inline Image render_person(const IdentitySpec& who, double jitter_dx,
                           double jitter_dy, double width_scale) {
  Image img(kPersonH, kPersonW, 3);
  const double backdrop[3] = {0.58, 0.58, 0.58};
  detail::fill_rect(img, 0, img.h, 0, img.w, backdrop);

  double body_h = img.h * (0.74 + 0.18 * who.stature);
  double body_w = img.w * (0.40 + 0.30 * who.build) * width_scale;
  double top = (img.h - body_h) / 2.0 + jitter_dy;
  double cx = img.w / 2.0 + jitter_dx;

  double skin[3];
  for (int ch = 0; ch < 3; ++ch) {
    double light = 0.92 - 0.07 * ch;  // warm light tone
    double dark = 0.48 - 0.10 * ch;
    skin[ch] = dark + (light - dark) * who.skin_tone;
  }
  double torso[3], legs[3];
  detail::hsv_to_rgb(who.torso_hue, 0.70, 0.80, torso);
  detail::hsv_to_rgb(who.leg_hue, 0.65, 0.55, legs);

  int head_top = static_cast<int>(top);
  int head_bot = static_cast<int>(top + 0.16 * body_h);
  int torso_bot = static_cast<int>(top + 0.58 * body_h);
  int legs_bot = static_cast<int>(top + body_h);
  int head_half = static_cast<int>(0.22 * body_w);
  int body_half = static_cast<int>(0.5 * body_w);
  int leg_half = static_cast<int>(0.42 * body_w);
  int icx = static_cast<int>(cx);

  detail::fill_rect(img, head_top, head_bot, icx - head_half, icx + head_half,
                    skin);
  detail::fill_rect(img, head_bot, torso_bot, icx - body_half, icx + body_half,
                    torso);
  detail::fill_rect(img, torso_bot, legs_bot, icx - leg_half, icx + leg_half,
                    legs);
  return img;
}

inline void apply_camera(Image& img, const CameraSpec& cam, Rng& rng) {
  if (cam.noise_sigma > 0.1)
    throw std::invalid_argument("camera noise_sigma must be <= 0.1");
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        double v = img.at(y, x, ch) * cam.gain * cam.tint[ch];
        v += rng.normal(0.0, cam.noise_sigma);
        img.at(y, x, ch) = static_cast<float>(v);
      }
  quantize8(img);  // stored rasters live on the 8-bit grid
}

inline DatasetManifest generate_dataset(const DatasetConfig& cfg,
                                        uint64_t seed) {
  if (cfg.n_train_ids < 2)
    throw std::invalid_argument("need >=2 train identities");
  if (cfg.n_test_ids < 2)
    throw std::invalid_argument("need >=2 test identities");
  if (cfg.imgs_per_id < 2)
    throw std::invalid_argument("need >=2 images per identity");
  if (cfg.n_cams < 2) throw std::invalid_argument("need >=2 cameras");
  if (cfg.noise_hi > 0.1)
    throw std::invalid_argument("camera noise_sigma must be <= 0.1");
  if (cfg.contrast <= 0.0 || cfg.contrast > 1.0)
    throw std::invalid_argument("contrast must be in (0, 1]");

  DatasetManifest m;
  m.n_train_ids = cfg.n_train_ids;
  m.n_test_ids = cfg.n_test_ids;
  m.seed = seed;

  int total_ids = cfg.n_train_ids + cfg.n_test_ids;
  std::vector<IdentitySpec> ids(total_ids);
  {
    Rng r(derive_seed(seed, "identities"));
    for (int i = 0; i < total_ids; ++i) {
      ids[i].id = i;
      ids[i].torso_hue = r.uniform();
      ids[i].leg_hue = r.uniform();
      ids[i].skin_tone = r.uniform();
      ids[i].build = r.uniform();
      ids[i].stature = r.uniform();
    }
  }
  std::vector<CameraSpec> cams(cfg.n_cams);
  {
    Rng r(derive_seed(seed, "cameras"));
    for (int c = 0; c < cfg.n_cams; ++c) {
      cams[c].cam_id = c;
      cams[c].gain = r.uniform(0.85, 1.15);
      for (int ch = 0; ch < 3; ++ch) cams[c].tint[ch] = r.uniform(0.92, 1.08);
      cams[c].noise_sigma = r.uniform(cfg.noise_lo, cfg.noise_hi);
    }
  }

  int counter = 0;
  char path[64];
  for (int i = 0; i < total_ids; ++i) {
    bool is_test = i >= cfg.n_train_ids;
    for (int j = 0; j < cfg.imgs_per_id; ++j) {
      int cam_index = j % cfg.n_cams;
      // One private stream per image: rendering order can change without
      // disturbing any other image.
      std::string tag = "img:" + std::to_string(i) + ":" + std::to_string(j);
      Rng r(derive_seed(seed, tag));
      double dx = r.uniform(-2.5, 2.5);
      double dy = r.uniform(-3.0, 3.0);
      double ws = r.uniform(0.96, 1.04);
      Image px = render_person(ids[i], dx, dy, ws);
      if (cfg.contrast < 1.0)
        for (auto& v : px.v)
          v = static_cast<float>(0.58 + cfg.contrast * (v - 0.58));
      apply_camera(px, cams[cam_index], r);

      PersonImage rec;
      rec.pixels = std::move(px);
      rec.gt_id = i;
      rec.cam_id = cam_index;
      rec.role = !is_test ? Role::train
                          : (cam_index == 0 ? Role::query : Role::gallery);
      std::snprintf(path, sizeof path, "img/%05d.ppm", counter++);
      rec.key = path;
      m.images.push_back(std::move(rec));
    }
  }
  return m;
}

// Open-set and split invariants. Called after generation and after load so
// hand-edited manifests cannot smuggle in a closed-set evaluation.
inline void validate_manifest(const DatasetManifest& m) {
  std::set<int> train_ids, test_ids;
  std::set<std::string> keys;
  std::map<int, std::set<int>> query_cams, gallery_cams;
  for (const auto& im : m.images) {
    if (!keys.insert(im.key).second)
      throw std::runtime_error("duplicate image key: " + im.key);
    if (im.role == Role::train) {
      train_ids.insert(im.gt_id);
    } else {
      test_ids.insert(im.gt_id);
      if (im.role == Role::query) query_cams[im.gt_id].insert(im.cam_id);
      else gallery_cams[im.gt_id].insert(im.cam_id);
    }
  }
  for (int id : test_ids)
    if (train_ids.count(id)) throw std::runtime_error("open-set violation");
  for (int id : test_ids) {
    if (!query_cams.count(id))
      throw std::runtime_error("test identity without query images: id " +
                               std::to_string(id));
    if (!gallery_cams.count(id))
      throw std::runtime_error("test identity without gallery images: id " +
                               std::to_string(id));
    for (int qc : query_cams[id])
      if (gallery_cams[id].count(qc))
        throw std::runtime_error(
            "query/gallery camera overlap for id " + std::to_string(id));
  }
}

inline void save_dataset(const DatasetManifest& m,
                         const std::filesystem::path& dir) {
  validate_manifest(m);
  std::filesystem::create_directories(dir);
  std::ofstream f(dir / "manifest.txt", std::ios::binary);
  if (!f) throw std::runtime_error("cannot write manifest");
  f << "n_train_ids=" << m.n_train_ids << "\n";
  f << "n_test_ids=" << m.n_test_ids << "\n";
  f << "seed=" << m.seed << "\n";
  if (m.config_hash != 0) f << "config_hash=" << m.config_hash << "\n";
  for (const auto& im : m.images) {
    std::filesystem::create_directories((dir / im.key).parent_path());
    save_ppm(dir / im.key, im.pixels);
    f << im.key << "," << im.gt_id << "," << im.cam_id << ","
      << role_name(im.role) << "\n";
  }
}

inline DatasetManifest load_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.txt", std::ios::binary);
  if (!f) throw std::runtime_error("missing manifest.txt in " + dir.string());
  DatasetManifest m;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto eq = line.find('=');
    if (eq != std::string::npos && line.find(',') == std::string::npos) {
      std::string k = line.substr(0, eq), v = line.substr(eq + 1);
      if (k == "n_train_ids") m.n_train_ids = std::stoi(v);
      else if (k == "n_test_ids") m.n_test_ids = std::stoi(v);
      else if (k == "seed") m.seed = std::stoull(v);
      else if (k == "config_hash") m.config_hash = std::stoull(v);
      else throw std::runtime_error("manifest: unknown header field " + k);
      continue;
    }
    std::stringstream ss(line);
    std::string key, gt, cam, role;
    if (!std::getline(ss, key, ',') || !std::getline(ss, gt, ',') ||
        !std::getline(ss, cam, ',') || !std::getline(ss, role))
      throw std::runtime_error("manifest: malformed record: " + line);
    PersonImage rec;
    rec.key = key;
    rec.gt_id = std::stoi(gt);
    rec.cam_id = std::stoi(cam);
    rec.role = role_from_name(role);
    auto path = dir / key;
    if (!std::filesystem::exists(path))
      throw std::runtime_error("missing image file: " + key);
    rec.pixels = load_ppm(path);
    m.images.push_back(std::move(rec));
  }
  validate_manifest(m);
  return m;
}

}  // namespace reidlab
