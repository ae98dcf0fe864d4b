#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "multisiam/probe.h"
#include "multisiam/trainer.h"

using namespace msiam;
namespace fs = std::filesystem;

namespace {

// Hubert-Arabie ARI from explicit pair counts, O(n^2).
double pair_count_ari(const std::vector<std::size_t>& a,
                      const std::vector<std::size_t>& b) {
  double both = 0, only_a = 0, only_b = 0, neither = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      if (sa && sb) ++both;
      else if (sa) ++only_a;
      else if (sb) ++only_b;
      else ++neither;
    }
  const double num = 2 * (both * neither - only_a * only_b);
  const double den = (both + only_a) * (only_a + neither) + (both + only_b) * (only_b + neither);
  return den == 0 ? 1.0 : num / den;
}

LabeledImage striped_image() {
  // 16x16 with three vertical bands: background, instance 1, instance 2.
  LabeledImage img;
  img.height = img.width = 16;
  img.image = Tensor::full({3, 16, 16}, 0.5);
  img.instance_mask.resize(256);
  img.class_mask.resize(256);
  img.instance_class = {2, 3};
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      const std::uint16_t id = x < 6 ? 0 : (x < 12 ? 1 : 2);
      img.instance_mask[y * 16 + x] = id;
      img.class_mask[y * 16 + x] = id == 0 ? 0 : img.instance_class[id - 1];
    }
  return img;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MULTISIAM_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream is(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) ++n;
  return n;
}

} // namespace

TEST_CASE("ARI matches a pair-counting oracle") {
  Rng rng(1);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 2 + rng.below(30);
    const std::size_t ka = 1 + rng.below(5), kb = 1 + rng.below(5);
    std::vector<std::size_t> a(n), b(n);
    for (auto& v : a) v = rng.below(ka);
    for (auto& v : b) v = rng.below(kb);
    const double got = adjusted_rand_index(a, b);
    CHECK(std::abs(got - pair_count_ari(a, b)) < 1e-12);
    CHECK(got >= -1.0);
    CHECK(got <= 1.0);
  }
}

TEST_CASE("ARI is permutation invariant") {
  const std::vector<std::size_t> a = {0, 0, 1, 1, 2, 2, 2, 0};
  std::vector<std::size_t> p;
  for (auto v : a) p.push_back((v + 1) % 3 + 10);
  CHECK(adjusted_rand_index(a, p) == 1.0);
  CHECK(adjusted_rand_index(a, a) == 1.0);
  CHECK_THROWS_AS(adjusted_rand_index(a, std::vector<std::size_t>{0, 1}), InvalidArgument);
}

TEST_CASE("one-hot mask features give a perfect probe") {
  const LabeledImage img = striped_image();
  const auto coarse = downsample_mask(img.instance_mask, 16, 16, 2);
  std::vector<double> onehot(3 * 64, 0.0);
  for (std::size_t p = 0; p < 64; ++p) onehot[coarse[p] * 64 + p] = 1.0;
  ProbeOptions o;
  o.k = 3;
  const ProbeReport r =
      probe_features({Tensor::from({3, 8, 8}, onehot)}, {img}, o);
  CHECK(r.ari_instance == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.ari_class == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.map_height == 8);
  REQUIRE(r.cluster_maps.size() == 1);
  CHECK(r.cluster_maps[0].size() == 64);
}

TEST_CASE("backbone probe reports sane values") {
  TrainConfig c;
  c.image_size = 32;
  const auto images = generate(scene_spec(c, true), 4);
  const TrainState s = init_state(c);
  ProbeOptions o;
  const ProbeReport r = probe_backbone(s.pair.online, images, o);
  CHECK(r.ari_instance >= -1.0);
  CHECK(r.ari_instance <= 1.0);
  CHECK(r.feature_std >= 0.0);
  CHECK(r.cluster_maps.size() == 4);
  for (const auto& m : r.cluster_maps) {
    CHECK(m.size() == 16);
    CHECK(std::set<std::size_t>(m.begin(), m.end()).size() <= 3);
  }
  const auto full = cluster_full_resolution(s.pair.online, images[0], o, 0);
  CHECK(full.size() == 32 * 32);
  CHECK(std::set<std::size_t>(full.begin(), full.end()).size() <= 3);
}

TEST_CASE("PPM round trip and panel colors") {
  const fs::path dir = fs::temp_directory_path() / "multisiam_ppm_test";
  fs::create_directories(dir);
  const LabeledImage img = striped_image();
  std::vector<std::size_t> labels(256);
  for (std::size_t i = 0; i < 256; ++i) labels[i] = img.instance_mask[i];
  const RgbImage panel = compose_panels(img, {labels, labels});
  CHECK(panel.width == 48);
  CHECK(panel.height == 16);
  write_ppm(dir / "p.ppm", panel);
  const RgbImage back = read_ppm(dir / "p.ppm");
  CHECK(back.width == panel.width);
  CHECK(back.height == panel.height);
  CHECK(back.pixels == panel.pixels);

  std::set<std::array<std::uint8_t, 3>> colors;
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 16; x < 32; ++x) {
      const std::size_t o = 3 * (y * 48 + x);
      colors.insert({back.pixels[o], back.pixels[o + 1], back.pixels[o + 2]});
    }
  CHECK(colors.size() == 3);
  CHECK(palette_color(1) == palette_color(9));
  CHECK(palette_color(1) != palette_color(2));

  std::ofstream(dir / "bad.ppm") << "P3\n1 1\n255\n0 0 0\n";
  CHECK_THROWS_AS(read_ppm(dir / "bad.ppm"), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("command line") {
  const fs::path dir = fs::temp_directory_path() / "multisiam_cli_test";
  fs::remove_all(dir);
  const std::string tiny =
      " --steps=4 --image_size=16 --view_size=16 --batch_size=2 --corpus_size=4"
      " --eval_size=3";
  const std::string out = " --out " + dir.string();

  CHECK(run_cli("train" + out + tiny) == 0);
  CHECK(count_lines(dir / "metrics.jsonl") == 4);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "checkpoint.msia"));

  const std::string ckpt = " --checkpoint " + (dir / "checkpoint.msia").string();
  CHECK(run_cli("eval" + out + ckpt) == 0);
  CHECK(fs::exists(dir / "probe.json"));
  CHECK(run_cli("viz" + out + ckpt + " --count 2") == 0);
  CHECK(fs::exists(dir / "viz_0.ppm"));
  CHECK(fs::exists(dir / "viz_1.ppm"));
  CHECK_NOTHROW(read_ppm(dir / "viz_1.ppm"));

  CHECK(run_cli("gen" + out + tiny) == 0);
  CHECK(fs::exists(dir / "img_00003.msim"));

  // Usage errors exit 1, runtime errors 2.
  CHECK(run_cli("train" + out + " --colour=red") == 1);
  CHECK(run_cli("train" + out + " --alignment=banana") == 1);
  CHECK(run_cli("eval" + out) == 1);
  CHECK(run_cli("bogus") == 1);
  CHECK(run_cli("eval" + out + " --checkpoint " + (dir / "none.msia").string()) == 2);
  CHECK(run_cli("train --out /proc/forbidden" + tiny) == 2);

  CHECK(run_cli("gradcheck --seeds 1" + out) == 0);
  CHECK(fs::exists(dir / "gradcheck.json"));
  CHECK(run_cli("gradcheck --seeds 1 --tolerance 1e-30" + out) == 3);
  fs::remove_all(dir);
}
