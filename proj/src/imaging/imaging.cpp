#include "tseg/imaging.hpp"

#include <algorithm>
#include <cmath>

#include "tseg/error.hpp"

namespace tseg {

Image::Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {
  if (w < 0 || h < 0) fail(ErrorKind::Input, "image extents must be non-negative");
}

RasterMask::RasterMask(int width, int height, int class_count)
    : width_(width), height_(height), class_count_(class_count) {
  if (width < 0 || height < 0) fail(ErrorKind::Input, "mask extents must be non-negative");
  if (class_count < 1 || class_count > kMaxClasses) {
    fail(ErrorKind::Input, "class count must be in [1, 256], got " + std::to_string(class_count));
  }
  labels_.assign(static_cast<std::size_t>(width) * height, 0);
}

void RasterMask::set(int x, int y, int label) {
  if (label < 0 || label >= class_count_) {
    fail(ErrorKind::Label, "label " + std::to_string(label) + " outside [0, " + std::to_string(class_count_) + ")");
  }
  labels_[static_cast<std::size_t>(y) * width_ + x] = static_cast<std::uint8_t>(label);
}

void RasterMask::assign(std::vector<std::uint8_t> labels) {
  if (labels.size() != labels_.size()) fail(ErrorKind::Dimension, "mask assign: size mismatch");
  for (auto l : labels) {
    if (l >= class_count_) fail(ErrorKind::Label, "label " + std::to_string(l) + " exceeds class count");
  }
  labels_ = std::move(labels);
}

std::vector<int> RasterMask::present_classes() const {
  std::vector<bool> seen(kMaxClasses, false);
  for (auto l : labels_) seen[l] = true;
  std::vector<int> out;
  for (int c = 0; c < kMaxClasses; ++c) {
    if (seen[c]) out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

// Shared crossing test so the scanline fill and the point query agree exactly.
inline bool crosses(const Point& a, const Point& b, double py) { return (a.y > py) != (b.y > py); }
inline double crossing_x(const Point& a, const Point& b, double py) {
  return (b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x;
}

void validate(const PolygonAnnotation& poly) {
  if (poly.vertices.size() < 3) {
    fail(ErrorKind::Annotation, "polygon of class " + std::to_string(poly.class_index) + " has " +
                                    std::to_string(poly.vertices.size()) + " vertices; need at least 3");
  }
  for (const auto& v : poly.vertices) {
    if (!std::isfinite(v.x) || !std::isfinite(v.y)) fail(ErrorKind::Annotation, "polygon vertex is not finite");
  }
  if (poly.class_index < 0 || poly.class_index >= RasterMask::kMaxClasses) {
    fail(ErrorKind::Annotation, "polygon class index out of range");
  }
}

}  // namespace

bool point_in_polygon(const std::vector<Point>& vertices, double px, double py) {
  bool inside = false;
  const std::size_t n = vertices.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point& a = vertices[i];
    const Point& b = vertices[j];
    if (crosses(a, b, py) && px < crossing_x(a, b, py)) inside = !inside;
  }
  return inside;
}

RasterMask rasterize_polygons(const std::vector<PolygonAnnotation>& polygons, int width, int height) {
  if (width < 1 || height < 1) fail(ErrorKind::Input, "rasterize: canvas must be at least 1x1");
  for (const auto& poly : polygons) validate(poly);
  RasterMask mask(width, height);
  std::vector<double> xs;
  for (const auto& poly : polygons) {
    const auto& v = poly.vertices;
    const std::size_t n = v.size();
    double y_lo = v[0].y, y_hi = v[0].y;
    for (const auto& p : v) {
      y_lo = std::min(y_lo, p.y);
      y_hi = std::max(y_hi, p.y);
    }
    const int row_start = std::max(0, static_cast<int>(std::floor(y_lo)) - 1);
    const int row_end = std::min(height - 1, static_cast<int>(std::ceil(y_hi)) + 1);
    for (int y = row_start; y <= row_end; ++y) {
      const double py = y + 0.5;
      xs.clear();
      for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        if (crosses(v[i], v[j], py)) xs.push_back(crossing_x(v[i], v[j], py));
      }
      std::sort(xs.begin(), xs.end());
      // A pixel center px is inside when an odd number of crossings lie right
      // of it, i.e. px in [xs[2k], xs[2k+1]).
      for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
        const double a = xs[k], b = xs[k + 1];
        double first = std::ceil(a - 0.5);
        while (first - 1.0 + 0.5 >= a) first -= 1.0;
        while (first + 0.5 < a) first += 1.0;
        double last = std::ceil(b - 0.5) - 1.0;
        while (last + 1.0 + 0.5 < b) last += 1.0;
        while (last + 0.5 >= b) last -= 1.0;
        const int x0 = static_cast<int>(std::max(first, 0.0));
        const int x1 = static_cast<int>(std::min(last, static_cast<double>(width - 1)));
        for (int x = x0; x <= x1; ++x) mask.set(x, y, poly.class_index);
      }
    }
  }
  return mask;
}

std::optional<BBox> tight_bbox(const std::vector<std::uint8_t>& binary, int width, int height) {
  if (binary.size() != static_cast<std::size_t>(width) * height) {
    fail(ErrorKind::Dimension, "tight_bbox: grid size mismatch");
  }
  BBox box{width, height, -1, -1};
  bool found = false;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (!binary[static_cast<std::size_t>(y) * width + x]) continue;
      found = true;
      box.x_min = std::min(box.x_min, x);
      box.y_min = std::min(box.y_min, y);
      box.x_max = std::max(box.x_max, x);
      box.y_max = std::max(box.y_max, y);
    }
  }
  if (!found) return std::nullopt;
  return box;
}

std::optional<BBox> tight_bbox(const RasterMask& mask, int class_index) {
  if (class_index < 0 || class_index >= mask.class_count()) {
    fail(ErrorKind::Label, "tight_bbox: invalid class " + std::to_string(class_index));
  }
  return tight_bbox(binary_view(mask, class_index), mask.width(), mask.height());
}

std::vector<std::uint8_t> binary_view(const RasterMask& mask, int class_index) {
  if (class_index < 0 || class_index >= mask.class_count()) {
    fail(ErrorKind::Label, "binary_view: invalid class " + std::to_string(class_index));
  }
  std::vector<std::uint8_t> out(mask.size());
  const auto& labels = mask.labels();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = labels[i] == class_index ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------

Image crop(const Image& image, int x, int y, int width, int height) {
  Image out(width, height);
  for (int yy = 0; yy < height; ++yy) {
    const int sy = y + yy;
    if (sy < 0 || sy >= image.height) continue;
    for (int xx = 0; xx < width; ++xx) {
      const int sx = x + xx;
      if (sx < 0 || sx >= image.width) continue;
      std::copy_n(image.pixel(sx, sy), 3, out.pixel(xx, yy));
    }
  }
  return out;
}

RasterMask crop(const RasterMask& mask, int x, int y, int width, int height) {
  RasterMask out(width, height, mask.class_count());
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(width) * height, 0);
  for (int yy = 0; yy < height; ++yy) {
    const int sy = y + yy;
    if (sy < 0 || sy >= mask.height()) continue;
    for (int xx = 0; xx < width; ++xx) {
      const int sx = x + xx;
      if (sx < 0 || sx >= mask.width()) continue;
      labels[static_cast<std::size_t>(yy) * width + xx] = mask.at(sx, sy);
    }
  }
  out.assign(std::move(labels));
  return out;
}

std::vector<Tile> tile(const Image& image, const RasterMask& mask, int tile_size) {
  if (tile_size < 1) fail(ErrorKind::Input, "tile size must be at least 1");
  if (image.empty()) fail(ErrorKind::Input, "cannot tile an empty image");
  const bool with_mask = mask.size() > 0;
  if (with_mask && (mask.width() != image.width || mask.height() != image.height)) {
    fail(ErrorKind::Dimension, "tile: mask and image sizes differ");
  }
  const int cols = (image.width + tile_size - 1) / tile_size;
  const int rows = (image.height + tile_size - 1) / tile_size;
  std::vector<Tile> tiles;
  tiles.reserve(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      Tile t;
      t.row = r;
      t.col = c;
      t.origin_x = c * tile_size;
      t.origin_y = r * tile_size;
      t.pad_right = std::max(0, t.origin_x + tile_size - image.width);
      t.pad_bottom = std::max(0, t.origin_y + tile_size - image.height);
      t.image = crop(image, t.origin_x, t.origin_y, tile_size, tile_size);
      if (with_mask) t.mask = crop(mask, t.origin_x, t.origin_y, tile_size, tile_size);
      tiles.push_back(std::move(t));
    }
  }
  return tiles;
}

Image reassemble_image(const std::vector<Tile>& tiles, int width, int height) {
  Image out(width, height);
  for (const auto& t : tiles) {
    const int w = t.image.width - t.pad_right;
    const int h = t.image.height - t.pad_bottom;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) std::copy_n(t.image.pixel(x, y), 3, out.pixel(t.origin_x + x, t.origin_y + y));
    }
  }
  return out;
}

namespace {

struct Tap {
  int lo, hi;
  double w_hi;
};

std::vector<Tap> taps(int in, int out) {
  std::vector<Tap> t(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in - 1);
    t[static_cast<std::size_t>(o)] = {lo, hi, hi == lo ? 0.0 : src - lo};
  }
  return t;
}

}  // namespace

Image resize_bilinear(const Image& image, int width, int height) {
  if (image.empty() || width < 1 || height < 1) fail(ErrorKind::Input, "resize: empty extent");
  if (width == image.width && height == image.height) return image;
  const auto ty = taps(image.height, height);
  const auto tx = taps(image.width, width);
  Image out(width, height);
  for (int y = 0; y < height; ++y) {
    const Tap& a = ty[static_cast<std::size_t>(y)];
    for (int x = 0; x < width; ++x) {
      const Tap& b = tx[static_cast<std::size_t>(x)];
      for (int c = 0; c < 3; ++c) {
        const double top = (1.0 - b.w_hi) * image.pixel(b.lo, a.lo)[c] + b.w_hi * image.pixel(b.hi, a.lo)[c];
        const double bottom = (1.0 - b.w_hi) * image.pixel(b.lo, a.hi)[c] + b.w_hi * image.pixel(b.hi, a.hi)[c];
        const double v = (1.0 - a.w_hi) * top + a.w_hi * bottom;
        out.pixel(x, y)[c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

RasterMask resize_nearest(const RasterMask& mask, int width, int height) {
  if (mask.size() == 0 || width < 1 || height < 1) fail(ErrorKind::Input, "resize: empty extent");
  RasterMask out(width, height, mask.class_count());
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(mask.height() - 1, static_cast<int>((y + 0.5) * mask.height() / height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(mask.width() - 1, static_cast<int>((x + 0.5) * mask.width() / width));
      labels[static_cast<std::size_t>(y) * width + x] = mask.at(sx, sy);
    }
  }
  out.assign(std::move(labels));
  return out;
}

SampledPair sample_and_resize(const Image& image, const RasterMask& mask, Rng& rng, int crop_size, int out_size) {
  if (mask.width() != image.width || mask.height() != image.height) {
    fail(ErrorKind::Dimension, "sample_and_resize: image and mask sizes differ");
  }
  if (image.width < crop_size || image.height < crop_size) {
    fail(ErrorKind::Geometry, "sample_and_resize: tile " + std::to_string(image.width) + "x" +
                                  std::to_string(image.height) + " smaller than crop " + std::to_string(crop_size));
  }
  SampledPair out;
  out.crop_x = static_cast<int>(rng.index(static_cast<std::size_t>(image.width - crop_size + 1)));
  out.crop_y = static_cast<int>(rng.index(static_cast<std::size_t>(image.height - crop_size + 1)));
  out.image = resize_bilinear(crop(image, out.crop_x, out.crop_y, crop_size, crop_size), out_size, out_size);
  out.mask = resize_nearest(crop(mask, out.crop_x, out.crop_y, crop_size, crop_size), out_size, out_size);
  return out;
}

Tensor image_to_tensor(const Image& image) {
  if (image.empty()) fail(ErrorKind::Input, "image_to_tensor: empty image");
  const std::size_t hw = static_cast<std::size_t>(image.width) * image.height;
  std::vector<double> values(3 * hw);
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t c = 0; c < 3; ++c) values[c * hw + i] = image.rgb[i * 3 + c] / 255.0;
  }
  return Tensor::from({3, static_cast<std::size_t>(image.height), static_cast<std::size_t>(image.width)},
                      std::move(values));
}

}  // namespace tseg
