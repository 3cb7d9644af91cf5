#include <png.h>

#include <cstring>
#include <fstream>

#include "json.hpp"
#include "tseg/error.hpp"
#include "tseg/imaging.hpp"

namespace tseg {

namespace {

std::vector<std::uint8_t> read_png(const std::filesystem::path& path, png_uint_32 format, int& width,
                                   int& height) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    fail(ErrorKind::Io, "cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = format;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    std::string message = img.message;
    png_image_free(&img);
    fail(ErrorKind::Io, "cannot decode PNG " + path.string() + ": " + message);
  }
  width = static_cast<int>(img.width);
  height = static_cast<int>(img.height);
  return buffer;
}

std::vector<std::uint8_t> encode_png(const std::uint8_t* pixels, int width, int height, png_uint_32 format) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = format;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, pixels, 0, nullptr)) {
    fail(ErrorKind::Io, std::string("cannot size PNG: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, pixels, 0, nullptr)) {
    fail(ErrorKind::Io, std::string("cannot encode PNG: ") + img.message);
  }
  out.resize(size);
  return out;
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

Image read_png_rgb(const std::filesystem::path& path) {
  Image image;
  image.rgb = read_png(path, PNG_FORMAT_RGB, image.width, image.height);
  return image;
}

RasterMask read_png_mask(const std::filesystem::path& path) {
  int w = 0, h = 0;
  auto labels = read_png(path, PNG_FORMAT_GRAY, w, h);
  RasterMask mask(w, h);
  mask.assign(std::move(labels));
  return mask;
}

std::vector<std::uint8_t> encode_png_rgb(const Image& image) {
  if (image.empty()) fail(ErrorKind::Input, "cannot encode an empty image");
  return encode_png(image.rgb.data(), image.width, image.height, PNG_FORMAT_RGB);
}

std::vector<std::uint8_t> encode_png_mask(const RasterMask& mask) {
  if (mask.size() == 0) fail(ErrorKind::Input, "cannot encode an empty mask");
  return encode_png(mask.labels().data(), mask.width(), mask.height(), PNG_FORMAT_GRAY);
}

void write_png_rgb(const std::filesystem::path& path, const Image& image) {
  write_bytes(path, encode_png_rgb(image));
}

void write_png_mask(const std::filesystem::path& path, const RasterMask& mask) {
  write_bytes(path, encode_png_mask(mask));
}

std::vector<PolygonAnnotation> parse_polygons_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Annotation, std::string("polygon JSON: ") + e.what());
  }
  if (!doc.is_array()) fail(ErrorKind::Annotation, "polygon JSON must be an array");
  std::vector<PolygonAnnotation> out;
  for (const auto& item : doc) {
    PolygonAnnotation poly;
    try {
      poly.class_index = item.at("class_index").get<int>();
      poly.class_name = item.value("class_name", std::string{});
      for (const auto& pt : item.at("points")) {
        if (!pt.is_array() || pt.size() != 2) fail(ErrorKind::Annotation, "polygon point must be [x, y]");
        poly.vertices.push_back({pt[0].get<double>(), pt[1].get<double>()});
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Annotation, std::string("polygon JSON: ") + e.what());
    }
    out.push_back(std::move(poly));
  }
  return out;
}

std::vector<PolygonAnnotation> read_polygons_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_polygons_json(text);
}

}  // namespace tseg
