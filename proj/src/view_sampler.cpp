#include "multisiam/view_sampler.h"

#include <algorithm>
#include <cmath>

#include "multisiam/ops.h"

namespace msiam {

double compute_iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0.0 || ih <= 0.0) {
    return 0.0;
  }
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

Box sample_crop_box(std::size_t image_h, std::size_t image_w,
                    const SamplerConfig& config, Rng& rng) {
  const double H = static_cast<double>(image_h);
  const double W = static_cast<double>(image_w);
  const double area = H * W;
  const double log_lo = std::log(config.min_aspect);
  const double log_hi = std::log(config.max_aspect);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(config.min_scale, config.max_scale);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const double w = std::sqrt(target * aspect);
    const double h = std::sqrt(target / aspect);
    if (w <= W && h <= H) {
      const double x0 = rng.uniform(0.0, W - w);
      const double y0 = rng.uniform(0.0, H - h);
      return {x0, y0, x0 + w, y0 + h};
    }
  }
  // Fallback: clamp the aspect into the image, keep the sampled scale.
  const double target = area * rng.uniform(config.min_scale, config.max_scale);
  double w = std::min(W, std::sqrt(target));
  double h = std::min(H, target / w);
  const double x0 = rng.uniform(0.0, W - w);
  const double y0 = rng.uniform(0.0, H - h);
  return {x0, y0, x0 + w, y0 + h};
}

PhotoParams sample_photo_params(const PhotoConfig& config, std::size_t out_w,
                                Rng& rng) {
  PhotoParams p;
  if (rng.bernoulli(config.jitter_prob)) {
    p.brightness = rng.uniform(-config.max_brightness, config.max_brightness);
    p.contrast = rng.uniform(-config.max_contrast, config.max_contrast);
    p.saturation = rng.uniform(-config.max_saturation, config.max_saturation);
    p.hue = rng.uniform(-config.max_hue, config.max_hue);
  }
  p.grayscale = rng.bernoulli(config.grayscale_prob);
  if (rng.bernoulli(config.blur_prob)) {
    const double s = static_cast<double>(out_w) / 224.0;
    p.blur_sigma =
        s * rng.uniform(config.blur_sigma_min, config.blur_sigma_max);
  }
  p.solarize = rng.bernoulli(config.solarize_prob);
  return p;
}

ViewPair sample_view_pair(std::size_t image_h, std::size_t image_w,
                          const SamplerConfig& config, Rng& rng) {
  if (!(config.iou_threshold >= 0.0 && config.iou_threshold < 1.0)) {
    throw InvalidArgument("sample_view_pair: iou_threshold must be in [0,1)");
  }
  if (!(config.min_scale > 0.0 && config.min_scale <= config.max_scale &&
        config.max_scale <= 1.0)) {
    throw InvalidArgument("sample_view_pair: need 0 < min_scale <= max_scale <= 1");
  }
  if (image_h == 0 || image_w == 0) {
    throw InvalidArgument("sample_view_pair: empty image");
  }
  Box best_a, best_b;
  double best_iou = -1.0;
  const std::size_t attempts = std::max<std::size_t>(config.max_attempts, 1);
  for (std::size_t i = 0; i < attempts; ++i) {
    const Box a = sample_crop_box(image_h, image_w, config, rng);
    const Box b = sample_crop_box(image_h, image_w, config, rng);
    const double iou = compute_iou(a, b);
    if (iou > best_iou) {
      best_iou = iou;
      best_a = a;
      best_b = b;
    }
    if (iou >= config.iou_threshold) {
      break;
    }
  }
  ViewPair pair;
  pair.a.box = best_a;
  pair.b.box = best_b;
  pair.iou = best_iou;
  for (auto [spec, photo] : {std::pair{&pair.a, &config.photo_a},
                             std::pair{&pair.b, &config.photo_b}}) {
    spec->out_h = config.out_h;
    spec->out_w = config.out_w;
    spec->flipped = rng.bernoulli(photo->flip_prob);
    spec->photo = sample_photo_params(*photo, config.out_w, rng);
  }
  return pair;
}

namespace {

void check_image(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("expected a [3,H,W] image, got " +
                     shape_string(image.shape()));
  }
}

// Bilinear read with edge clamping; (x, y) in continuous index space.
double bilinear(const double* plane, std::size_t h, std::size_t w, double y,
                double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const double top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
  const double bot = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
  return top * (1 - fy) + bot * fy;
}

double luma(double r, double g, double b) {
  return 0.299 * r + 0.587 * g + 0.114 * b;
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r) {
    h = std::fmod((g - b) / d, 6.0);
  } else if (mx == g) {
    h = (b - r) / d + 2.0;
  } else {
    h = (r - g) / d + 4.0;
  }
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double hh = h * 6.0;
  const int sector = static_cast<int>(std::floor(hh)) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

void clamp_unit(std::vector<double>& px) {
  for (double& v : px) v = std::clamp(v, 0.0, 1.0);
}

void gaussian_blur(std::vector<double>& px, std::size_t h, std::size_t w,
                   double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double ks = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    ks += k[i + radius];
  }
  for (double& v : k) v /= ks;
  std::vector<double> tmp(h * w);
  const auto ih = static_cast<int>(h), iw = static_cast<int>(w);
  for (std::size_t c = 0; c < 3; ++c) {
    double* plane = px.data() + c * h * w;
    for (int y = 0; y < ih; ++y)
      for (int x = 0; x < iw; ++x) {
        double s = 0.0;
        for (int d = -radius; d <= radius; ++d)
          s += k[d + radius] * plane[y * iw + std::clamp(x + d, 0, iw - 1)];
        tmp[y * iw + x] = s;
      }
    for (int y = 0; y < ih; ++y)
      for (int x = 0; x < iw; ++x) {
        double s = 0.0;
        for (int d = -radius; d <= radius; ++d)
          s += k[d + radius] * tmp[std::clamp(y + d, 0, ih - 1) * iw + x];
        plane[y * iw + x] = s;
      }
  }
}

} // namespace

Tensor crop_resize(const Tensor& image, const Box& box, std::size_t out_h,
                   std::size_t out_w) {
  check_image(image);
  const std::size_t h = image.dim(1), w = image.dim(2);
  auto src = image.data();
  std::vector<double> out(3 * out_h * out_w);
  for (std::size_t c = 0; c < 3; ++c) {
    const double* plane = src.data() + c * h * w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const double y = box.y0 + (static_cast<double>(i) + 0.5) *
                                    (box.height() / static_cast<double>(out_h));
      for (std::size_t j = 0; j < out_w; ++j) {
        const double x = box.x0 + (static_cast<double>(j) + 0.5) *
                                      (box.width() / static_cast<double>(out_w));
        out[(c * out_h + i) * out_w + j] =
            bilinear(plane, h, w, y - 0.5, x - 0.5);
      }
    }
  }
  return Tensor::from({3, out_h, out_w}, std::move(out));
}

Tensor apply_photometric(const Tensor& image, const PhotoParams& p) {
  check_image(image);
  const std::size_t h = image.dim(1), w = image.dim(2), n = h * w;
  std::vector<double> px(image.data().begin(), image.data().end());
  double* r = px.data();
  double* g = px.data() + n;
  double* b = px.data() + 2 * n;

  if (p.brightness != 0.0) {
    for (double& v : px) v *= 1.0 + p.brightness;
    clamp_unit(px);
  }
  if (p.contrast != 0.0) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += luma(r[i], g[i], b[i]);
    m /= static_cast<double>(n);
    for (double& v : px) v = m + (v - m) * (1.0 + p.contrast);
    clamp_unit(px);
  }
  if (p.saturation != 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      const double l = luma(r[i], g[i], b[i]);
      r[i] = l + (r[i] - l) * (1.0 + p.saturation);
      g[i] = l + (g[i] - l) * (1.0 + p.saturation);
      b[i] = l + (b[i] - l) * (1.0 + p.saturation);
    }
    clamp_unit(px);
  }
  if (p.hue != 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      double hh, ss, vv;
      rgb_to_hsv(r[i], g[i], b[i], hh, ss, vv);
      hh = std::fmod(hh + p.hue + 1.0, 1.0);
      hsv_to_rgb(hh, ss, vv, r[i], g[i], b[i]);
    }
    clamp_unit(px);
  }
  if (p.grayscale) {
    for (std::size_t i = 0; i < n; ++i) {
      const double l = luma(r[i], g[i], b[i]);
      r[i] = g[i] = b[i] = l;
    }
  }
  if (p.blur_sigma > 0.0) {
    gaussian_blur(px, h, w, p.blur_sigma);
  }
  Tensor out = Tensor::from({3, h, w}, std::move(px));
  if (p.solarize) {
    out = solarize_threshold(out, 0.5);
  }
  auto d = out.mutable_data();
  for (double& v : d) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Tensor render_view(const Tensor& image, const ViewSpec& spec) {
  check_image(image);
  if (!spec.box.valid() || spec.box.x0 < 0.0 || spec.box.y0 < 0.0 ||
      spec.box.x1 > static_cast<double>(image.dim(2)) + 1e-9 ||
      spec.box.y1 > static_cast<double>(image.dim(1)) + 1e-9) {
    throw InvalidArgument("render_view: box outside image bounds");
  }
  Tensor view = crop_resize(image, spec.box, spec.out_h, spec.out_w);
  if (spec.flipped) {
    NoGradGuard guard;
    view = flip_horizontal(view);
  }
  return apply_photometric(view, spec.photo);
}

} // namespace msiam
