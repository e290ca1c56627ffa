#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dfkd/common.hpp"
#include "dfkd/rng.hpp"
#include "dfkd/serialize.hpp"
#include "dfkd/tensor.hpp"

#include "json.hpp"

// Procedural fine-grained dataset: super-classes differ by silhouette, the
// sub-classes within a super-class only by a small "part" patch (hue plus a
// geometric marker) at a super-specific location. The body jitters around the
// image center sample to sample; the part stays anchored so the discriminative
// cue is a local attribute, not a global layout change.

namespace dfkd {

struct LabeledImageSet {
  Tensor<float> images;  // (M, 3, H, W), values in [-1, 1]
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;

  int size() const { return images.defined() ? images.dim(0) : 0; }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  int image_size() const { return images.dim(2); }
};

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1)      { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else             { r = c; b = x; }
  const double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

// Signed distance to a regular polygon (circumradius R, nv vertices, rotated
// by phi); negative inside.
inline double polygon_sd(double px, double py, double cx, double cy, double r, int nv, double phi) {
  const double apothem = r * std::cos(M_PI / nv);
  double sd = -1e9;
  for (int i = 0; i < nv; ++i) {
    const double a = phi + 2.0 * M_PI * (i + 0.5) / nv;
    sd = std::max(sd, (px - cx) * std::cos(a) + (py - cy) * std::sin(a) - apothem);
  }
  return sd;
}

struct PartPlacement {
  double cx, cy, radius;
};

inline PartPlacement part_placement(int super_idx, int num_super, int s) {
  const double angle = 2.0 * M_PI * super_idx / num_super + M_PI / 4.0;
  const double dist = 0.28 * s;
  return {s / 2.0 + dist * std::cos(angle), s / 2.0 + dist * std::sin(angle),
          std::max(2.5, 0.09 * s)};
}

}  // namespace detail

inline LabeledImageSet synth_fgvc_dataset(int num_super, int subs_per_super, int samples_per_class, int image_size,
                                          std::uint64_t seed) {
  DFKD_CHECK(num_super >= 1 && subs_per_super >= 1 && samples_per_class >= 1,
             "synth_fgvc_dataset: counts must be >= 1");
  DFKD_CHECK(image_size >= 16, "synth_fgvc_dataset: image_size must be >= 16");
  DFKD_CHECK(image_size % 8 == 0, "synth_fgvc_dataset: image_size must be a multiple of 8");

  const int k = num_super * subs_per_super;
  const int m = k * samples_per_class;
  const int s = image_size;
  LabeledImageSet out;
  out.seed = seed;
  out.images = Tensor<float>({m, 3, s, s});
  out.labels.resize(static_cast<std::size_t>(m));
  Rng rng(seed);

  const int max_jitter = s / 8;
  for (int cls = 0; cls < k; ++cls) {
    const int super_idx = cls / subs_per_super;
    const int sub_idx = cls % subs_per_super;
    out.class_names.push_back("s" + std::to_string(super_idx) + "_p" + std::to_string(sub_idx));

    const int nv = 3 + super_idx;
    const double phi = 0.35 * super_idx;
    const double body_level = -0.10 + 0.20 * (super_idx % 4) / 3.0;
    double part_rgb[3];
    detail::hsv_to_rgb(static_cast<double>(sub_idx) / subs_per_super, 1.0, 1.0, part_rgb);
    const detail::PartPlacement part = detail::part_placement(super_idx, num_super, s);
    const int marker = sub_idx % 3;

    for (int j = 0; j < samples_per_class; ++j) {
      const int img = cls * samples_per_class + j;
      out.labels[static_cast<std::size_t>(img)] = cls;
      const int dx = rng.uniform_int(-max_jitter, max_jitter);
      const int dy = rng.uniform_int(-max_jitter, max_jitter);
      const double brightness = rng.uniform(-0.1, 0.1);
      const double body_cx = s / 2.0 + dx, body_cy = s / 2.0 + dy;
      const double body_r = 0.33 * s;

      for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
          const double px = x + 0.5, py = y + 0.5;
          double rgb[3] = {-0.85, -0.85, -0.85};

          const double body_sd = detail::polygon_sd(px, py, body_cx, body_cy, body_r, nv, phi);
          const double body_cov = std::clamp(0.5 - body_sd, 0.0, 1.0);
          for (int c = 0; c < 3; ++c) rgb[c] += body_cov * (body_level - rgb[c]);

          const double dpx = px - part.cx, dpy = py - part.cy;
          const double part_sd = std::sqrt(dpx * dpx + dpy * dpy) - part.radius;
          const double part_cov = std::clamp(0.5 - part_sd, 0.0, 1.0);
          for (int c = 0; c < 3; ++c) rgb[c] += part_cov * (2.0 * part_rgb[c] - 1.0 - rgb[c]);

          if (part_cov > 0.0) {
            bool marked = false;
            if (marker == 0) marked = std::abs(dpy) < 0.75 && std::abs(dpx) < part.radius * 0.8;
            if (marker == 1) marked = std::abs(dpx) < 0.75 && std::abs(dpy) < part.radius * 0.8;
            if (marker == 2) marked = dpx * dpx + dpy * dpy < 1.0;
            if (marked)
              for (int c = 0; c < 3; ++c) rgb[c] += part_cov * (-1.0 - rgb[c]) * 0.9;
          }

          for (int c = 0; c < 3; ++c)
            out.images.at(img, c, y, x) = static_cast<float>(std::clamp(rgb[c] + brightness, -1.0, 1.0));
        }
      }
      // mild pixel noise, clamped to the value range
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < s; ++y)
          for (int x = 0; x < s; ++x) {
            float& v = out.images.at(img, c, y, x);
            v = static_cast<float>(std::clamp(v + rng.normal(0.0, 0.02), -1.0, 1.0));
          }
    }
  }
  return out;
}

inline std::pair<LabeledImageSet, LabeledImageSet> split(const LabeledImageSet& data, double train_frac,
                                                         std::uint64_t seed) {
  DFKD_CHECK(train_frac > 0.0 && train_frac < 1.0, "split: train_frac must lie in (0, 1)");
  const int k = data.num_classes();
  const int m = data.size();
  std::vector<std::vector<int>> per_class(static_cast<std::size_t>(k));
  for (int i = 0; i < m; ++i) per_class[static_cast<std::size_t>(data.labels[static_cast<std::size_t>(i)])].push_back(i);

  Rng rng(seed);
  std::vector<int> train_idx, test_idx;
  for (int c = 0; c < k; ++c) {
    auto& idx = per_class[static_cast<std::size_t>(c)];
    DFKD_CHECK(static_cast<int>(idx.size()) >= 2, "split: class " << c << " has fewer than 2 samples");
    for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    int n_train = static_cast<int>(std::lround(train_frac * idx.size()));
    n_train = std::clamp(n_train, 1, static_cast<int>(idx.size()) - 1);
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + n_train);
    test_idx.insert(test_idx.end(), idx.begin() + n_train, idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());

  auto gather = [&](const std::vector<int>& sel) {
    LabeledImageSet out;
    out.seed = seed;
    out.class_names = data.class_names;
    const int s = data.image_size();
    out.images = Tensor<float>({static_cast<int>(sel.size()), 3, s, s});
    out.labels.reserve(sel.size());
    const std::int64_t stride = 3LL * s * s;
    for (std::size_t i = 0; i < sel.size(); ++i) {
      std::copy(data.images.data() + sel[i] * stride, data.images.data() + (sel[i] + 1) * stride,
                out.images.data() + static_cast<std::int64_t>(i) * stride);
      out.labels.push_back(data.labels[static_cast<std::size_t>(sel[i])]);
    }
    return out;
  };
  return {gather(train_idx), gather(test_idx)};
}

// Optional on-disk cache: binary tensor blob plus a JSON sidecar.
inline void save_dataset(const LabeledImageSet& data, const std::string& path) {
  BlobWriter w;
  w.add_tensor("images", data.images);
  Tensor<float> labels({data.size()});
  for (int i = 0; i < data.size(); ++i) labels[i] = static_cast<float>(data.labels[static_cast<std::size_t>(i)]);
  w.add_tensor("labels", labels);
  std::string names;
  for (const auto& n : data.class_names) names += n + "\n";
  w.add_string("class_names", names);
  w.add_i64("seed", static_cast<std::int64_t>(data.seed));
  w.write(path);

  nlohmann::json sidecar{{"seed", data.seed},
                         {"K", data.num_classes()},
                         {"M", data.size()},
                         {"image_size", data.image_size()},
                         {"checksum", tensor_checksum(data.images)}};
  std::ofstream f(path + ".json");
  f << sidecar.dump(2) << "\n";
}

inline LabeledImageSet load_dataset(const std::string& path) {
  BlobReader r(path);
  LabeledImageSet out;
  out.images = r.tensor("images");
  Tensor<float> labels = r.tensor("labels");
  for (std::int64_t i = 0; i < labels.numel(); ++i) out.labels.push_back(static_cast<int>(labels[i]));
  std::istringstream names(r.str("class_names"));
  std::string line;
  while (std::getline(names, line))
    if (!line.empty()) out.class_names.push_back(line);
  out.seed = static_cast<std::uint64_t>(r.i64("seed"));

  std::ifstream f(path + ".json");
  if (f.good()) {
    nlohmann::json sidecar = nlohmann::json::parse(f);
    DFKD_REQUIRE(sidecar["checksum"].get<std::uint32_t>() == tensor_checksum(out.images),
                 "load_dataset: checksum mismatch for " << path);
  }
  return out;
}

}  // namespace dfkd
