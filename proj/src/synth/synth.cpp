#include "tseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "json.hpp"
#include "tseg/corpus.hpp"
#include "tseg/error.hpp"

namespace tseg {

namespace {

constexpr std::array<double, 3> kBackground{228.0, 222.0, 226.0};

struct Blob {
  double cx, cy, radius;
  double amplitude, phase;
  int lobes;
  double stretch, angle;

  bool contains(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double u = (c * dx + s * dy) / stretch;
    const double v = (-s * dx + c * dy) * stretch;
    const double r = std::hypot(u, v);
    const double theta = std::atan2(v, u);
    return r <= radius * (1.0 + amplitude * std::sin(lobes * theta + phase));
  }
};

Blob random_blob(Rng& rng, double cx, double cy, double radius) {
  return {cx,
          cy,
          radius,
          rng.uniform(0.05, 0.2),
          rng.uniform(0.0, 2.0 * std::numbers::pi),
          2 + static_cast<int>(rng.index(3)),
          rng.uniform(0.8, 1.25),
          rng.uniform(0.0, std::numbers::pi)};
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

void paint(SyntheticImage& out, const Blob& blob, int label, const std::array<double, 3>& color) {
  const int w = out.image.width;
  const int h = out.image.height;
  const double reach = blob.radius * 1.25 * 1.25;
  const int x0 = std::max(0, static_cast<int>(std::floor(blob.cx - reach)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(blob.cx + reach)));
  const int y0 = std::max(0, static_cast<int>(std::floor(blob.cy - reach)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(blob.cy + reach)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      if (!blob.contains(x + 0.5, y + 0.5)) continue;
      out.mask.set(x, y, label);
      auto* px = &out.image.rgb[(static_cast<std::size_t>(y) * w + x) * 3];
      for (int c = 0; c < 3; ++c) px[c] = to_byte(color[c]);
    }
  }
}

void add_noise(Image& image, Rng& rng, double sigma) {
  for (auto& v : image.rgb) v = to_byte(v + rng.normal(0.0, sigma));
}

SyntheticImage blank(int w, int h) {
  SyntheticImage out{Image(w, h), RasterMask(w, h)};
  for (std::size_t i = 0; i < out.image.rgb.size(); ++i) out.image.rgb[i] = to_byte(kBackground[i % 3]);
  return out;
}

}  // namespace

const std::vector<SyntheticClass>& blob_classes() {
  static const std::vector<SyntheticClass> classes = {
      {1, "tumor", {196.0, 52.0, 60.0}},
      {2, "stroma", {70.0, 150.0, 72.0}},
      {3, "lymphocytes", {60.0, 72.0, 196.0}},
      {4, "necrosis", {200.0, 182.0, 48.0}},
  };
  return classes;
}

SyntheticImage blob_image(Rng& rng, int size) {
  if (size < 16) fail(ErrorKind::Config, "blob_image: size too small");
  SyntheticImage out = blank(size, size);
  const auto& classes = blob_classes();
  const int count = 1 + static_cast<int>(rng.index(3));
  const double s = size;
  for (int b = 0; b < count; ++b) {
    const auto& cls = classes[rng.index(classes.size())];
    const double radius = rng.uniform(0.13, 0.28) * s;
    const Blob blob = random_blob(rng, rng.uniform(0.15, 0.85) * s, rng.uniform(0.15, 0.85) * s, radius);
    std::array<double, 3> color = cls.color;
    for (auto& c : color) c += rng.normal(0.0, 8.0);
    paint(out, blob, cls.index, color);
  }
  add_noise(out.image, rng, 12.0);
  return out;
}

std::vector<SyntheticImage> blob_corpus(std::size_t count, std::uint64_t seed, int size) {
  std::vector<SyntheticImage> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(seed * 1000003ULL + i);
    out.push_back(blob_image(rng, size));
  }
  return out;
}

void write_blob_corpus(const std::filesystem::path& root, std::size_t count, std::uint64_t seed, int size) {
  std::filesystem::create_directories(root / "images");
  std::filesystem::create_directories(root / "masks");
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(seed * 1000003ULL + i);
    const auto sample = blob_image(rng, size);
    const std::string stem = "blob" + std::to_string(i);
    write_png_rgb(root / "images" / (stem + ".png"), sample.image);
    write_png_mask(root / "masks" / (stem + ".png"), sample.mask);
  }
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : blob_classes()) classes.push_back({{"index", c.index}, {"name", c.name}});
  write_text_file(root / "classes.json", classes.dump(2) + "\n");
  write_text_file(root / "dataset.json", nlohmann::json{{"dataset", "synthetic-blobs"}, {"organ", "synthetic"}}.dump(2) + "\n");
}

SyntheticImage synthetic_slide(const SlideOptions& o) {
  if (o.size < 64) fail(ErrorKind::Config, "synthetic_slide: size too small");
  if (o.classes < 1 || o.classes > static_cast<int>(blob_classes().size())) {
    fail(ErrorKind::Config, "synthetic_slide: class count out of range");
  }
  if (o.min_radius <= 0.0 || o.max_radius < o.min_radius) fail(ErrorKind::Config, "synthetic_slide: bad radii");
  Rng rng(o.seed);
  SyntheticImage out = blank(o.size, o.size);
  const auto& classes = blob_classes();
  // The shifted palette rotates the channels so each class drifts towards
  // another class's hue.
  for (int r = 0; r < o.regions; ++r) {
    const auto& cls = classes[rng.index(static_cast<std::size_t>(o.classes))];
    const double radius = rng.uniform(o.min_radius, o.max_radius);
    const Blob blob = random_blob(rng, rng.uniform(0.0, o.size), rng.uniform(0.0, o.size), radius);
    std::array<double, 3> color;
    for (int c = 0; c < 3; ++c) {
      const double shifted = cls.color[(c + 1) % 3];
      color[c] = (1.0 - o.stain_shift) * cls.color[c] + o.stain_shift * shifted + rng.normal(0.0, 6.0);
    }
    paint(out, blob, cls.index, color);
  }
  add_noise(out.image, rng, o.noise);
  return out;
}

}  // namespace tseg
