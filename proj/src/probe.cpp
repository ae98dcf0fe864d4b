#include "multisiam/probe.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "multisiam/alignment.h"
#include "multisiam/ops.h"
#include "multisiam/rng.h"
#include "multisiam/trainer.h"

namespace msiam {

namespace {

double pairs(double n) { return n * (n - 1.0) / 2.0; }

std::vector<std::size_t> widen(const std::vector<std::uint16_t>& v) {
  return {v.begin(), v.end()};
}

std::vector<std::size_t> widen(const std::vector<std::uint8_t>& v) {
  return {v.begin(), v.end()};
}

} // namespace

double adjusted_rand_index(std::span<const std::size_t> a,
                           std::span<const std::size_t> b) {
  if (a.size() != b.size() || a.empty()) {
    throw InvalidArgument("adjusted_rand_index: labelings differ in length or are empty");
  }
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  std::map<std::size_t, double> ca, cb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++joint[{a[i], b[i]}];
    ++ca[a[i]];
    ++cb[b[i]];
  }
  double index = 0, sa = 0, sb = 0;
  for (const auto& [key, n] : joint) index += pairs(n);
  for (const auto& [key, n] : ca) sa += pairs(n);
  for (const auto& [key, n] : cb) sb += pairs(n);
  const double expected = sa * sb / pairs(static_cast<double>(a.size()));
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) {
    return 1.0;
  }
  return (index - expected) / (max_index - expected);
}

ProbeReport probe_features(const std::vector<Tensor>& features,
                           const std::vector<LabeledImage>& images,
                           const ProbeOptions& options) {
  if (features.size() != images.size() || images.empty()) {
    throw InvalidArgument("probe: need one feature map per image");
  }
  ProbeReport report;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor& f = features[i];
    const LabeledImage& img = images[i];
    const std::size_t h = f.dim(1), w = f.dim(2);
    if (img.height % h != 0 || img.width % w != 0 ||
        img.height / h != img.width / w) {
      throw ShapeError("probe: feature map " + shape_string(f.shape()) +
                       " does not tile the image");
    }
    const std::size_t stride = img.height / h;
    Rng rng(derive_seed(options.seed, "probe", i));
    const ClusterResult clusters =
        kmeans(f, std::min(options.k, h * w), options.metric, options.max_iter, rng);
    const auto inst = widen(downsample_mask(img.instance_mask, img.height,
                                            img.width, stride));
    const auto cls = widen(downsample_mask(img.class_mask, img.height,
                                           img.width, stride));
    report.ari_instance += adjusted_rand_index(clusters.assignments, inst);
    report.ari_class += adjusted_rand_index(clusters.assignments, cls);
    report.cluster_maps.push_back(clusters.assignments);
    report.map_height = h;
    report.map_width = w;
  }
  report.ari_instance /= static_cast<double>(images.size());
  report.ari_class /= static_cast<double>(images.size());
  return report;
}

ProbeReport probe_backbone(const Network& net,
                           const std::vector<LabeledImage>& images,
                           const ProbeOptions& options) {
  NoGradGuard guard;
  std::vector<Tensor> features;
  std::vector<std::vector<double>> embeddings;
  for (const auto& img : images) {
    features.push_back(net.backbone(img.image));
    const Tensor z = net.project_1d(features.back());
    embeddings.emplace_back(z.data().begin(), z.data().end());
  }
  ProbeReport report = probe_features(features, images, options);
  report.feature_std = feature_std(embeddings);
  return report;
}

std::vector<std::size_t> cluster_full_resolution(const Network& net,
                                                 const LabeledImage& image,
                                                 const ProbeOptions& options,
                                                 std::size_t image_index) {
  NoGradGuard guard;
  const Tensor f = net.backbone(image.image);
  const Tensor up = roi_align(f, RelBox{}, image.height, image.width);
  Rng rng(derive_seed(options.seed, "viz", image_index));
  return kmeans(up, options.k, options.metric, options.max_iter, rng).assignments;
}

std::array<std::uint8_t, 3> palette_color(std::size_t label) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette = {{
      {230, 25, 75},  {60, 180, 75},  {0, 130, 200},  {255, 225, 25},
      {245, 130, 48}, {145, 30, 180}, {70, 240, 240}, {240, 50, 230},
  }};
  return kPalette[label % kPalette.size()];
}

RgbImage compose_panels(const LabeledImage& image,
                        const std::vector<std::vector<std::size_t>>& label_maps) {
  const std::size_t h = image.height, w = image.width, n = h * w;
  const std::size_t panels = 1 + label_maps.size();
  RgbImage out;
  out.width = w * panels;
  out.height = h;
  out.pixels.assign(out.width * h * 3, 0);
  auto px = image.image.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(px[c * n + y * w + x], 0.0, 1.0);
        out.pixels[(y * out.width + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  for (std::size_t p = 0; p < label_maps.size(); ++p) {
    if (label_maps[p].size() != n) {
      throw ShapeError("compose_panels: label map size mismatch");
    }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const auto color = palette_color(label_maps[p][y * w + x]);
        for (std::size_t c = 0; c < 3; ++c)
          out.pixels[(y * out.width + (p + 1) * w + x) * 3 + c] = color[c];
      }
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw Error("ppm: cannot open " + path.string() + " for writing");
  }
  os << "P6\n" << image.width << " " << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()),
           static_cast<std::streamsize>(image.pixels.size()));
  if (!os) {
    throw Error("ppm: write failed for " + path.string());
  }
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw Error("ppm: cannot open " + path.string());
  }
  std::string magic;
  RgbImage img;
  int maxval = 0;
  if (!(is >> magic >> img.width >> img.height >> maxval) || magic != "P6" ||
      maxval != 255) {
    throw FormatError("ppm: not a binary P6 file with maxval 255");
  }
  is.get(); // single whitespace before the raster
  img.pixels.resize(img.width * img.height * 3);
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()),
               static_cast<std::streamsize>(img.pixels.size()))) {
    throw FormatError("ppm: truncated raster");
  }
  return img;
}

} // namespace msiam
