#include "multisiam/corpus.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>

#include "multisiam/rng.h"

namespace msiam {

namespace {

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Low-frequency value noise: random lattice values blended with smoothstep.
std::vector<double> value_noise(std::size_t h, std::size_t w, double cell,
                                Rng& rng) {
  const std::size_t gh = static_cast<std::size_t>(std::ceil(h / cell)) + 2;
  const std::size_t gw = static_cast<std::size_t>(std::ceil(w / cell)) + 2;
  std::vector<double> lattice(gh * gw);
  for (double& v : lattice) v = rng.uniform(-1.0, 1.0);
  std::vector<double> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = (y + 0.5) / cell;
    const auto iy = static_cast<std::size_t>(fy);
    const double ty = smoothstep(fy - iy);
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = (x + 0.5) / cell;
      const auto ix = static_cast<std::size_t>(fx);
      const double tx = smoothstep(fx - ix);
      const double top = lattice[iy * gw + ix] * (1 - tx) +
                         lattice[iy * gw + ix + 1] * tx;
      const double bot = lattice[(iy + 1) * gw + ix] * (1 - tx) +
                         lattice[(iy + 1) * gw + ix + 1] * tx;
      out[y * w + x] = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

std::size_t count(const std::vector<bool>& m) {
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
}

std::vector<bool> draw_shape(ShapeClass cls, const SceneSpec& spec, Rng& rng) {
  const double h = static_cast<double>(spec.height);
  const double w = static_cast<double>(spec.width);
  const double s = rng.uniform(spec.min_size, spec.max_size) * std::min(h, w);
  switch (cls) {
    case ShapeClass::kDisk: {
      const double r = 0.6 * s;
      return rasterize_disk(spec.height, spec.width, rng.uniform(r, w - r),
                            rng.uniform(r, h - r), r);
    }
    case ShapeClass::kRectangle: {
      const double bw = s * rng.uniform(0.8, 1.5);
      const double bh = s * rng.uniform(0.8, 1.5);
      const double x0 = rng.uniform(0.0, w - bw);
      const double y0 = rng.uniform(0.0, h - bh);
      return rasterize_rectangle(spec.height, spec.width, x0, y0, x0 + bw,
                                 y0 + bh);
    }
    case ShapeClass::kTriangle: {
      const double r = 0.75 * s;
      const double cx = rng.uniform(r, w - r), cy = rng.uniform(r, h - r);
      const double rot = rng.uniform(0.0, 2.0 * std::numbers::pi);
      std::array<double, 6> xy{};
      for (int k = 0; k < 3; ++k) {
        const double a = rot + 2.0 * std::numbers::pi * k / 3.0;
        xy[2 * k] = cx + r * std::cos(a);
        xy[2 * k + 1] = cy + r * std::sin(a);
      }
      return rasterize_triangle(spec.height, spec.width, xy);
    }
  }
  throw InvalidArgument("corpus: unknown shape class");
}

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little,
                "binary formats assume a little-endian host");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw FormatError("msim: truncated file while reading " + what);
  }
  return v;
}

} // namespace

std::vector<bool> rasterize_disk(std::size_t h, std::size_t w, double cx,
                                 double cy, double r) {
  std::vector<bool> m(h * w, false);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      m[y * w + x] = dx * dx + dy * dy <= r * r;
    }
  return m;
}

std::vector<bool> rasterize_rectangle(std::size_t h, std::size_t w, double x0,
                                      double y0, double x1, double y1) {
  std::vector<bool> m(h * w, false);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      m[y * w + x] = px >= x0 && px < x1 && py >= y0 && py < y1;
    }
  return m;
}

std::vector<bool> rasterize_triangle(std::size_t h, std::size_t w,
                                     const std::array<double, 6>& v) {
  auto edge = [](double ax, double ay, double bx, double by, double px,
                 double py) {
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
  };
  std::vector<bool> m(h * w, false);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double e0 = edge(v[0], v[1], v[2], v[3], px, py);
      const double e1 = edge(v[2], v[3], v[4], v[5], px, py);
      const double e2 = edge(v[4], v[5], v[0], v[1], px, py);
      m[y * w + x] = (e0 >= 0 && e1 >= 0 && e2 >= 0) ||
                     (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  return m;
}

LabeledImage generate_image(const SceneSpec& spec, std::size_t index) {
  if (spec.height == 0 || spec.width == 0 || spec.min_instances == 0 ||
      spec.min_instances > spec.max_instances ||
      spec.max_instances > 65535) {
    throw InvalidArgument("SceneSpec: invalid size or instance range");
  }
  const std::size_t h = spec.height, w = spec.width, n = h * w;
  Rng rng(derive_seed(spec.seed, "corpus", index));

  std::vector<double> rgb(3 * n);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto noise = value_noise(h, w, spec.background_cell, rng);
    const double base = spec.background_base;
    for (std::size_t p = 0; p < n; ++p)
      rgb[c * n + p] = base + spec.background_amplitude * noise[p];
  }

  LabeledImage out;
  out.height = h;
  out.width = w;
  out.instance_mask.assign(n, 0);
  std::vector<std::size_t> full_area;
  const std::size_t wanted =
      spec.min_instances +
      rng.below(spec.max_instances - spec.min_instances + 1);

  for (std::size_t inst = 0; inst < wanted; ++inst) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < spec.placement_retries && !placed;
         ++attempt) {
      const auto cls = static_cast<ShapeClass>(1 + rng.below(3));
      const auto shape = draw_shape(cls, spec, rng);
      const std::size_t area = count(shape);
      if (area == 0) continue;
      // Overlap of the new shape with earlier ones, and what each earlier
      // instance would lose in total once the new one is painted on top.
      std::size_t overlap = 0;
      std::vector<std::size_t> covered(full_area.size(), 0),
          visible(full_area.size(), 0);
      for (std::size_t p = 0; p < n; ++p) {
        const auto id = out.instance_mask[p];
        if (id == 0) continue;
        ++visible[id - 1];
        if (shape[p]) {
          ++overlap;
          ++covered[id - 1];
        }
      }
      bool ok = static_cast<double>(overlap) <
                spec.max_overlap * static_cast<double>(area);
      for (std::size_t k = 0; ok && k < full_area.size(); ++k) {
        const double lost = static_cast<double>(full_area[k] - visible[k] +
                                                covered[k]);
        ok = lost < spec.max_overlap * static_cast<double>(full_area[k]);
      }
      if (!ok) continue;

      std::array<double, 3> color{};
      for (std::size_t c = 0; c < 3; ++c) {
        color[c] = std::clamp(
            spec.palette[static_cast<std::size_t>(cls) - 1][c] +
                rng.uniform(-spec.color_jitter, spec.color_jitter),
            0.0, 1.0);
      }
      const auto id = static_cast<std::uint16_t>(full_area.size() + 1);
      for (std::size_t p = 0; p < n; ++p) {
        if (!shape[p]) continue;
        out.instance_mask[p] = id;
        for (std::size_t c = 0; c < 3; ++c) rgb[c * n + p] = color[c];
      }
      full_area.push_back(area);
      out.instance_class.push_back(static_cast<std::uint8_t>(cls));
      placed = true;
    }
    if (!placed) {
      break; // keep the instances placed so far
    }
  }

  for (double& v : rgb) v = std::clamp(v, 0.0, 1.0);
  out.image = Tensor::from({3, h, w}, std::move(rgb));
  out.class_mask.assign(n, 0);
  for (std::size_t p = 0; p < n; ++p) {
    if (out.instance_mask[p] != 0)
      out.class_mask[p] = out.instance_class[out.instance_mask[p] - 1];
  }
  return out;
}

std::vector<LabeledImage> generate(const SceneSpec& spec, std::size_t n) {
  if (n == 0) {
    throw InvalidArgument("generate: need at least one image");
  }
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_image(spec, i));
  return out;
}

template <typename Label>
std::vector<Label> downsample_mask(const std::vector<Label>& mask,
                                   std::size_t h, std::size_t w,
                                   std::size_t stride) {
  if (stride == 0 || h % stride != 0 || w % stride != 0) {
    throw ShapeError("downsample_mask: " + std::to_string(h) + "x" +
                     std::to_string(w) + " not divisible by stride " +
                     std::to_string(stride));
  }
  if (mask.size() != h * w) {
    throw ShapeError("downsample_mask: mask size does not match extents");
  }
  const std::size_t oh = h / stride, ow = w / stride;
  std::vector<Label> out(oh * ow);
  std::map<Label, std::size_t> votes;
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      votes.clear();
      for (std::size_t y = oy * stride; y < (oy + 1) * stride; ++y)
        for (std::size_t x = ox * stride; x < (ox + 1) * stride; ++x)
          ++votes[mask[y * w + x]];
      // std::map iterates labels in ascending order, so the first maximum
      // is the lowest tied label.
      auto best = votes.begin();
      for (auto it = votes.begin(); it != votes.end(); ++it)
        if (it->second > best->second) best = it;
      out[oy * ow + ox] = best->first;
    }
  return out;
}

template std::vector<std::uint16_t> downsample_mask(
    const std::vector<std::uint16_t>&, std::size_t, std::size_t, std::size_t);
template std::vector<std::uint8_t> downsample_mask(
    const std::vector<std::uint8_t>&, std::size_t, std::size_t, std::size_t);
template std::vector<std::size_t> downsample_mask(
    const std::vector<std::size_t>&, std::size_t, std::size_t, std::size_t);

void save_msim(const std::filesystem::path& path, const LabeledImage& img) {
  if (img.height > 65535 || img.width > 65535) {
    throw InvalidArgument("msim: extents exceed 16 bits");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw Error("msim: cannot open " + path.string() + " for writing");
  }
  const std::size_t n = img.height * img.width;
  os.write("MSIM", 4);
  put<std::uint16_t>(os, static_cast<std::uint16_t>(img.height));
  put<std::uint16_t>(os, static_cast<std::uint16_t>(img.width));
  auto px = img.image.data();
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      put<float>(os, static_cast<float>(px[c * n + p]));
  for (auto id : img.instance_mask) put<std::uint16_t>(os, id);
  for (auto id : img.class_mask) put<std::uint8_t>(os, id);
  if (!os) {
    throw Error("msim: write failed for " + path.string());
  }
}

LabeledImage load_msim(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw Error("msim: cannot open " + path.string());
  }
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MSIM", 4) != 0) {
    throw FormatError("msim: bad magic in " + path.string());
  }
  LabeledImage img;
  img.height = get<std::uint16_t>(is, "height");
  img.width = get<std::uint16_t>(is, "width");
  const std::size_t n = img.height * img.width;
  std::vector<double> rgb(3 * n);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      rgb[c * n + p] = get<float>(is, "pixels");
  img.image = Tensor::from({3, img.height, img.width}, std::move(rgb));
  img.instance_mask.resize(n);
  for (auto& id : img.instance_mask) id = get<std::uint16_t>(is, "instance ids");
  img.class_mask.resize(n);
  for (auto& id : img.class_mask) id = get<std::uint8_t>(is, "class ids");
  std::uint16_t max_id = 0;
  for (auto id : img.instance_mask) max_id = std::max(max_id, id);
  img.instance_class.assign(max_id, 0);
  for (std::size_t p = 0; p < n; ++p) {
    if (img.instance_mask[p] != 0)
      img.instance_class[img.instance_mask[p] - 1] = img.class_mask[p];
  }
  return img;
}

} // namespace msiam
