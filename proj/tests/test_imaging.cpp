#include <algorithm>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "tseg/error.hpp"
#include "tseg/imaging.hpp"

using namespace tseg;

namespace {

PolygonAnnotation rect(int cls, double x0, double y0, double x1, double y1) {
  return {cls, "c" + std::to_string(cls), {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}}};
}

// Brute force: test every pixel center against every polygon in order.
RasterMask brute_rasterize(const std::vector<PolygonAnnotation>& polys, int w, int h) {
  RasterMask m(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (const auto& p : polys)
        if (point_in_polygon(p.vertices, x + 0.5, y + 0.5)) m.set(x, y, p.class_index);
  return m;
}

Image random_image(int w, int h, Rng& rng) {
  Image img(w, h);
  for (auto& b : img.rgb) b = static_cast<std::uint8_t>(rng.index(256));
  return img;
}

}  // namespace

TEST_CASE("rasterize: empty list is background") {
  const auto m = rasterize_polygons({}, 5, 4);
  CHECK(m.width() == 5);
  CHECK(std::all_of(m.labels().begin(), m.labels().end(), [](auto v) { return v == 0; }));
}

TEST_CASE("rasterize: 4x4 square on 8x8 has 16 pixels") {
  const std::vector<PolygonAnnotation> polys{rect(1, 0, 0, 4, 4)};
  const auto m = rasterize_polygons(polys, 8, 8);
  const auto count = std::count(m.labels().begin(), m.labels().end(), 1);
  CHECK(count == 16);
  CHECK(m == brute_rasterize(polys, 8, 8));
  CHECK(m.at(3, 3) == 1);
  CHECK(m.at(4, 3) == 0);
}

TEST_CASE("rasterize: later polygons overwrite") {
  const std::vector<PolygonAnnotation> polys{rect(1, 0, 0, 5, 5), rect(2, 3, 3, 8, 8)};
  const auto m = rasterize_polygons(polys, 8, 8);
  CHECK(m.at(1, 1) == 1);
  CHECK(m.at(3, 3) == 2);
  CHECK(m.at(4, 4) == 2);
  CHECK(m.at(7, 7) == 2);
  CHECK(m == brute_rasterize(polys, 8, 8));
}

TEST_CASE("rasterize: errors") {
  PolygonAnnotation line{1, "x", {{0, 0}, {3, 3}}};
  CHECK_THROWS_AS(rasterize_polygons({line}, 4, 4), Error);
  try {
    rasterize_polygons({line}, 4, 4);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Annotation);
  }
  CHECK_THROWS_AS(rasterize_polygons({}, 0, 4), Error);
}

TEST_CASE("rasterize matches brute force on random polygons") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int w = 1 + static_cast<int>(rng.index(40));
    const int h = 1 + static_cast<int>(rng.index(40));
    std::vector<PolygonAnnotation> polys;
    const int count = 1 + static_cast<int>(rng.index(3));
    for (int p = 0; p < count; ++p) {
      PolygonAnnotation poly;
      poly.class_index = 1 + static_cast<int>(rng.index(4));
      const int n = 3 + static_cast<int>(rng.index(6));
      for (int i = 0; i < n; ++i) {
        // Mix of integer, half-integer and arbitrary coordinates, some off-canvas.
        double x = rng.uniform(-5.0, w + 5.0), y = rng.uniform(-5.0, h + 5.0);
        if (rng.index(3) == 0) x = std::round(x * 2.0) / 2.0;
        if (rng.index(3) == 0) y = std::round(y * 2.0) / 2.0;
        poly.vertices.push_back({x, y});
      }
      polys.push_back(poly);
    }
    REQUIRE(rasterize_polygons(polys, w, h) == brute_rasterize(polys, w, h));
  }
}

TEST_CASE("tight_bbox examples") {
  RasterMask m(8, 8, 4);
  CHECK_FALSE(tight_bbox(m, 2).has_value());
  m.set(3, 5, 2);
  CHECK(*tight_bbox(m, 2) == BBox{3, 5, 3, 5});
  RasterMask n(8, 8, 4);
  n.set(1, 1, 3);
  n.set(6, 2, 3);
  CHECK(*tight_bbox(n, 3) == BBox{1, 1, 6, 2});
  CHECK_THROWS_AS(tight_bbox(n, 4), Error);
}

TEST_CASE("rasterize then tight_bbox equals the box of inside pixel centers") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int w = 4 + static_cast<int>(rng.index(61));
    const int h = 4 + static_cast<int>(rng.index(61));
    // Convex polygon: points on an ellipse in angular order.
    const double cx = rng.uniform(0, w), cy = rng.uniform(0, h);
    const double rx = rng.uniform(1, w / 2.0), ry = rng.uniform(1, h / 2.0);
    const int n = 3 + static_cast<int>(rng.index(8));
    std::vector<double> angles(n);
    for (auto& a : angles) a = rng.uniform(0, 6.283185307179586);
    std::sort(angles.begin(), angles.end());
    PolygonAnnotation poly{1, "c", {}};
    for (double a : angles) poly.vertices.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
    const auto m = rasterize_polygons({poly}, w, h);
    std::optional<BBox> expect;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!point_in_polygon(poly.vertices, x + 0.5, y + 0.5)) continue;
        if (!expect) expect = BBox{x, y, x, y};
        expect->x_min = std::min(expect->x_min, x);
        expect->y_min = std::min(expect->y_min, y);
        expect->x_max = std::max(expect->x_max, x);
        expect->y_max = std::max(expect->y_max, y);
      }
    REQUIRE(tight_bbox(m, 1) == expect);
  }
}

TEST_CASE("binary_view") {
  RasterMask all(3, 3, 3);
  all.assign(std::vector<std::uint8_t>(9, 2));
  const auto ones = binary_view(all, 2);
  CHECK(std::accumulate(ones.begin(), ones.end(), 0) == 9);
  const auto none = binary_view(all, 1);
  CHECK(std::accumulate(none.begin(), none.end(), 0) == 0);

  RasterMask mixed(3, 3, 3);
  mixed.assign({1, 0, 1, 2, 1, 0, 2, 2, 1});
  const auto b = binary_view(mixed, 1);
  CHECK(std::accumulate(b.begin(), b.end(), 0) == 4);

  Rng rng(2);
  RasterMask r(17, 9, 6);
  std::vector<std::uint8_t> labels(r.size());
  for (auto& l : labels) l = static_cast<std::uint8_t>(rng.index(6));
  r.assign(labels);
  std::vector<int> cover(r.size(), 0);
  for (int c = 0; c < 6; ++c) {
    const auto v = binary_view(r, c);
    for (std::size_t i = 0; i < v.size(); ++i) cover[i] += v[i];
  }
  CHECK(std::all_of(cover.begin(), cover.end(), [](int c) { return c == 1; }));
}

TEST_CASE("tile: counts, padding and copy semantics") {
  Rng rng(1);
  {
    Image img(2048, 1024);
    const auto tiles = tile(img, RasterMask{}, 1024);
    CHECK(tiles.size() == 2);
    CHECK(tiles[1].origin_x == 1024);
    CHECK(tiles[1].pad_right == 0);
  }
  const Image img = random_image(1500, 1000, rng);
  RasterMask mask(1500, 1000, 4);
  mask.set(1499, 999, 3);
  const auto tiles = tile(img, mask, 1024);
  REQUIRE(tiles.size() == 2);
  CHECK(tiles[0].pad_right == 0);
  CHECK(tiles[0].pad_bottom == 24);
  CHECK(tiles[1].pad_right == 548);
  CHECK(tiles[1].pad_bottom == 24);
  CHECK(tiles[1].mask.at(1499 - 1024, 999) == 3);
  CHECK(tiles[1].mask.at(600, 500) == 0);
  CHECK(tiles[1].image.pixel(600, 500)[0] == 0);
  bool same = true;
  for (int y = 0; y < 1000 && same; y += 7)
    for (int x = 0; x < 476; x += 5)
      same = same && std::equal(img.pixel(1024 + x, y), img.pixel(1024 + x, y) + 3, tiles[1].image.pixel(x, y));
  CHECK(same);
  CHECK(reassemble_image(tiles, 1500, 1000) == img);
  CHECK_THROWS_AS(tile(Image{}, RasterMask{}, 16), Error);
  CHECK_THROWS_AS(tile(img, mask, 0), Error);
}

TEST_CASE("tile then reassemble reproduces random images") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int w = 1 + static_cast<int>(rng.index(90)), h = 1 + static_cast<int>(rng.index(90));
    const int ts = 1 + static_cast<int>(rng.index(40));
    const Image img = random_image(w, h, rng);
    REQUIRE(reassemble_image(tile(img, RasterMask{}, ts), w, h) == img);
  }
}

TEST_CASE("sample_and_resize") {
  Rng rng(4);
  const Image img = random_image(600, 560, rng);
  RasterMask constant(600, 560, 4);
  constant.assign(std::vector<std::uint8_t>(constant.size(), 3));

  Rng a(77), b(77);
  const auto s1 = sample_and_resize(img, constant, a);
  const auto s2 = sample_and_resize(img, constant, b);
  CHECK(s1.crop_x == s2.crop_x);
  CHECK(s1.crop_y == s2.crop_y);
  CHECK(s1.image == s2.image);
  CHECK(s1.image.width == 224);
  CHECK(std::all_of(s1.mask.labels().begin(), s1.mask.labels().end(), [](auto v) { return v == 3; }));

  // Checkerboard of 3x3 cells: compare with a pixelwise nearest-neighbour oracle.
  Image plain(512, 512);
  RasterMask checker(512, 512, 2);
  for (int y = 0; y < 512; ++y)
    for (int x = 0; x < 512; ++x) checker.set(x, y, ((x / 3) + (y / 3)) % 2);
  Rng c(9);
  const auto s = sample_and_resize(plain, checker, c);
  CHECK(s.crop_x == 0);
  std::size_t ones_expected = 0;
  for (int y = 0; y < 224; ++y)
    for (int x = 0; x < 224; ++x) {
      const int sx = static_cast<int>(std::floor((x + 0.5) * 512.0 / 224.0));
      const int sy = static_cast<int>(std::floor((y + 0.5) * 512.0 / 224.0));
      REQUIRE(s.mask.at(x, y) == checker.at(sx, sy));
      ones_expected += checker.at(sx, sy);
    }
  const auto ones = std::count(s.mask.labels().begin(), s.mask.labels().end(), 1);
  CHECK(static_cast<std::size_t>(ones) == ones_expected);

  Image small(300, 600);
  RasterMask small_mask(300, 600, 2);
  try {
    sample_and_resize(small, small_mask, c);
    FAIL("expected geometry error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Geometry);
  }
}

TEST_CASE("resize_bilinear keeps constant images and half-pixel centers") {
  Image img(4, 4);
  std::fill(img.rgb.begin(), img.rgb.end(), 90);
  const auto up = resize_bilinear(img, 9, 7);
  CHECK(std::all_of(up.rgb.begin(), up.rgb.end(), [](auto v) { return v == 90; }));
  Image row(2, 1);
  row.pixel(0, 0)[0] = 0;
  row.pixel(1, 0)[0] = 200;
  const auto r = resize_bilinear(row, 4, 1);
  CHECK(r.pixel(0, 0)[0] == 0);
  CHECK(r.pixel(1, 0)[0] == 50);
  CHECK(r.pixel(2, 0)[0] == 150);
  CHECK(r.pixel(3, 0)[0] == 200);
}

TEST_CASE("image_to_tensor layout") {
  Image img(2, 1);
  img.pixel(1, 0)[2] = 255;
  const auto t = image_to_tensor(img);
  CHECK(t.shape() == Shape{3, 1, 2});
  CHECK(t.data()[2 * 2 + 1] == doctest::Approx(1.0));
  CHECK(t.data()[1] == 0.0);
}

TEST_CASE("PNG and polygon JSON round trips") {
  const auto dir = std::filesystem::temp_directory_path() / "tseg_imaging_test";
  std::filesystem::remove_all(dir);
  Rng rng(8);
  const Image img = random_image(13, 7, rng);
  write_png_rgb(dir / "a.png", img);
  CHECK(read_png_rgb(dir / "a.png") == img);
  RasterMask m(13, 7);
  m.set(4, 4, 200);
  write_png_mask(dir / "m.png", m);
  CHECK(read_png_mask(dir / "m.png") == m);
  CHECK_THROWS_AS(read_png_rgb(dir / "missing.png"), Error);

  const auto polys = parse_polygons_json(
      R"([{"class_name":"tumor","class_index":1,"points":[[0,0],[4,0],[4,4],[0,4]]}])");
  REQUIRE(polys.size() == 1);
  CHECK(polys[0].class_name == "tumor");
  CHECK(polys[0].vertices.size() == 4);
  CHECK_THROWS_AS(parse_polygons_json("{"), Error);
  std::filesystem::remove_all(dir);
}
