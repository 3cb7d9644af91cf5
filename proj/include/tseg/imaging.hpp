#pragma once

// Raster geometry: RGB images, class-index masks, polygon rasterization,
// bounding boxes, tiling and paired crop/resize.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tseg/rng.hpp"
#include "tseg/tensor.hpp"

namespace tseg {

/// 8-bit RGB image, interleaved, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h);

  bool empty() const { return width <= 0 || height <= 0; }
  std::uint8_t* pixel(int x, int y) { return rgb.data() + 3 * (static_cast<std::size_t>(y) * width + x); }
  const std::uint8_t* pixel(int x, int y) const {
    return rgb.data() + 3 * (static_cast<std::size_t>(y) * width + x);
  }
  bool operator==(const Image&) const = default;
};

/// Per-pixel class index grid; 0 is background.
class RasterMask {
 public:
  static constexpr int kMaxClasses = 256;

  RasterMask() = default;
  RasterMask(int width, int height, int class_count = kMaxClasses);

  int width() const { return width_; }
  int height() const { return height_; }
  int class_count() const { return class_count_; }
  std::size_t size() const { return labels_.size(); }

  std::uint8_t at(int x, int y) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  void set(int x, int y, int label);
  std::uint8_t operator[](std::size_t i) const { return labels_[i]; }

  const std::vector<std::uint8_t>& labels() const { return labels_; }
  /// Replaces all labels; every value must be below class_count().
  void assign(std::vector<std::uint8_t> labels);

  /// Sorted distinct labels present (background included when present).
  std::vector<int> present_classes() const;

  bool operator==(const RasterMask&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int class_count_ = kMaxClasses;
  std::vector<std::uint8_t> labels_;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct PolygonAnnotation {
  int class_index = 1;
  std::string class_name;
  std::vector<Point> vertices;
};

/// Inclusive pixel box.
struct BBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const { return x_max - x_min + 1; }
  int height() const { return y_max - y_min + 1; }
  bool contains(int x, int y) const { return x >= x_min && x <= x_max && y >= y_min && y <= y_max; }
  bool operator==(const BBox&) const = default;
};

/// Even-odd membership of (px, py) in the closed vertex loop.
bool point_in_polygon(const std::vector<Point>& vertices, double px, double py);

/// Labels pixel (x, y) with c when its center (x + 0.5, y + 0.5) lies inside
/// polygon c; later polygons overwrite earlier ones.
RasterMask rasterize_polygons(const std::vector<PolygonAnnotation>& polygons, int width, int height);

std::optional<BBox> tight_bbox(const RasterMask& mask, int class_index);
/// Tight box of the nonzero entries of a width x height binary grid.
std::optional<BBox> tight_bbox(const std::vector<std::uint8_t>& binary, int width, int height);

/// 1 where mask == class_index, else 0.
std::vector<std::uint8_t> binary_view(const RasterMask& mask, int class_index);

struct Tile {
  int origin_x = 0;
  int origin_y = 0;
  int row = 0;
  int col = 0;
  int pad_right = 0;   // columns of padding past the source edge
  int pad_bottom = 0;  // rows of padding past the source edge
  Image image;
  RasterMask mask;
};

/// Non-overlapping grid of tile_size tiles in row-major order. Edge tiles are
/// padded with zeros (image) and background (mask). The mask may be empty.
std::vector<Tile> tile(const Image& image, const RasterMask& mask, int tile_size = 1024);

/// Inverse of tile() after dropping the padding.
Image reassemble_image(const std::vector<Tile>& tiles, int width, int height);

Image crop(const Image& image, int x, int y, int width, int height);
RasterMask crop(const RasterMask& mask, int x, int y, int width, int height);

/// Bilinear resize with half-pixel centers.
Image resize_bilinear(const Image& image, int width, int height);
/// Nearest neighbour: source index floor((dst + 0.5) * src / dst).
RasterMask resize_nearest(const RasterMask& mask, int width, int height);

struct SampledPair {
  Image image;
  RasterMask mask;
  int crop_x = 0;
  int crop_y = 0;
};

/// One random crop window applied to both image and mask, then resized to
/// out x out (bilinear image, nearest mask).
SampledPair sample_and_resize(const Image& image, const RasterMask& mask, Rng& rng, int crop_size = 512,
                              int out_size = 224);

/// [3, H, W] tensor with channels scaled to [0, 1].
Tensor image_to_tensor(const Image& image);

// File formats ---------------------------------------------------------------

Image read_png_rgb(const std::filesystem::path& path);
void write_png_rgb(const std::filesystem::path& path, const Image& image);
RasterMask read_png_mask(const std::filesystem::path& path);
void write_png_mask(const std::filesystem::path& path, const RasterMask& mask);
std::vector<std::uint8_t> encode_png_rgb(const Image& image);
std::vector<std::uint8_t> encode_png_mask(const RasterMask& mask);

/// JSON array of {class_name, class_index, points: [[x, y], ...]}.
std::vector<PolygonAnnotation> read_polygons_json(const std::filesystem::path& path);
std::vector<PolygonAnnotation> parse_polygons_json(const std::string& text);

}  // namespace tseg
