#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "doctest.h"
#include "multisiam/corpus.h"

using namespace msiam;
namespace fs = std::filesystem;

TEST_CASE("generation is deterministic per seed") {
  SceneSpec spec;
  spec.seed = 42;
  const auto a = generate(spec, 6);
  const auto b = generate(spec, 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].image.numel() == b[i].image.numel());
    for (std::size_t j = 0; j < a[i].image.numel(); ++j)
      REQUIRE(a[i].image[j] == b[i].image[j]);
    CHECK(a[i].instance_mask == b[i].instance_mask);
    CHECK(a[i].class_mask == b[i].class_mask);
  }
  // Images are independent of how many others are generated.
  const LabeledImage third = generate_image(spec, 3);
  CHECK(third.instance_mask == a[3].instance_mask);

  spec.seed = 43;
  CHECK(generate(spec, 1)[0].instance_mask != a[0].instance_mask);
  CHECK_THROWS_AS(generate(spec, 0), InvalidArgument);
}

TEST_CASE("masks are consistent and within the instance range") {
  SceneSpec spec;
  spec.seed = 7;
  for (const auto& img : generate(spec, 64)) {
    std::set<std::uint16_t> ids;
    for (std::size_t p = 0; p < img.instance_mask.size(); ++p) {
      const auto id = img.instance_mask[p];
      REQUIRE((id > 0) == (img.class_mask[p] > 0));
      if (id > 0) {
        ids.insert(id);
        REQUIRE(img.class_mask[p] == img.instance_class[id - 1]);
      }
    }
    CHECK(ids.size() >= 2);
    CHECK(ids.size() <= 5);
    CHECK(ids.size() == img.instance_count());
    for (double v : img.image.data()) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
  }
}

TEST_CASE("background is not flat") {
  SceneSpec spec;
  const auto img = generate_image(spec, 0);
  double lo = 1, hi = 0;
  for (std::size_t p = 0; p < img.instance_mask.size(); ++p)
    if (img.instance_mask[p] == 0) lo = std::min(lo, img.image[p]), hi = std::max(hi, img.image[p]);
  CHECK(hi - lo > 0.05);
}

TEST_CASE("crowded scenes reduce the instance count instead of failing") {
  SceneSpec spec;
  spec.height = spec.width = 16;
  spec.min_size = spec.max_size = 0.9;
  spec.min_instances = 3;
  spec.max_instances = 5;
  for (const auto& img : generate(spec, 10)) CHECK(img.instance_count() >= 1);
}

TEST_CASE("rasterization areas") {
  const double r = 50.0;
  const auto disk = rasterize_disk(256, 256, 128.3, 120.7, r);
  const double area = static_cast<double>(std::count(disk.begin(), disk.end(), true));
  CHECK(std::abs(area - std::numbers::pi * r * r) / (std::numbers::pi * r * r) < 0.02);

  const auto rect = rasterize_rectangle(32, 32, 4, 6, 14, 10);
  CHECK(std::count(rect.begin(), rect.end(), true) == 40);

  const auto tri = rasterize_triangle(64, 64, {0, 0, 64, 0, 0, 64});
  const double tarea = static_cast<double>(std::count(tri.begin(), tri.end(), true));
  CHECK(std::abs(tarea - 2048.0) / 2048.0 < 0.05);
}

TEST_CASE("downsample_mask") {
  const std::vector<std::uint16_t> m = {3, 1, 4, 1, 5, 9, 2, 6, 5};
  CHECK(downsample_mask(m, 3, 3, 1) == m);

  const std::vector<std::uint16_t> uniform(16, 7);
  CHECK(downsample_mask(uniform, 4, 4, 4) == std::vector<std::uint16_t>{7});

  const std::vector<std::uint8_t> block = {1, 1, 2, 0};
  CHECK(downsample_mask(block, 2, 2, 2) == std::vector<std::uint8_t>{1});

  const std::vector<std::uint8_t> tie = {2, 2, 0, 0};
  CHECK(downsample_mask(tie, 2, 2, 2) == std::vector<std::uint8_t>{0});

  CHECK_THROWS_AS(downsample_mask(block, 2, 2, 3), ShapeError);
}

TEST_CASE("MSIM round trip and corruption") {
  const fs::path dir = fs::temp_directory_path() / "multisiam_corpus_test";
  fs::create_directories(dir);
  SceneSpec spec;
  spec.seed = 5;
  const LabeledImage img = generate_image(spec, 2);
  const fs::path path = dir / "img.msim";
  save_msim(path, img);
  CHECK(fs::file_size(path) == 4 + 2 + 2 + 64 * 64 * (12 + 2 + 1));
  const LabeledImage back = load_msim(path);
  CHECK(back.height == 64);
  CHECK(back.instance_mask == img.instance_mask);
  CHECK(back.class_mask == img.class_mask);
  CHECK(back.instance_class == img.instance_class);
  for (std::size_t i = 0; i < img.image.numel(); ++i)
    CHECK(back.image[i] == doctest::Approx(img.image[i]).epsilon(1e-6));

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS(load_msim(path), FormatError);
  fs::resize_file(path, 100);
  CHECK_THROWS_AS(load_msim(path), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("512 images generate within the time budget") {
  SceneSpec spec;
  const auto t0 = std::chrono::steady_clock::now();
  const auto corpus = generate(spec, 512);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("512 images: " << secs << " s");
  CHECK(corpus.size() == 512);
  CHECK(secs < 5.0);
}
