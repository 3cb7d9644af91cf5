#include "tseg/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "tseg/error.hpp"
#include "tseg/imaging.hpp"
#include "tseg/log.hpp"
#include "tseg/rng.hpp"

namespace tseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(TissueCategory category) {
  switch (category) {
    case TissueCategory::Tumor:
      return "tumor-related";
    case TissueCategory::Microenvironment:
      return "microenvironment-related";
    case TissueCategory::Normal:
      return "normal anatomical";
  }
  return "";
}

TissueCategory parse_category(const std::string& text) {
  if (text == "tumor-related") return TissueCategory::Tumor;
  if (text == "microenvironment-related") return TissueCategory::Microenvironment;
  if (text == "normal anatomical") return TissueCategory::Normal;
  fail(ErrorKind::Manifest, "unknown tissue category '" + text + "'");
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << text;
}

std::string parent_id_from_stem(const std::string& stem) {
  const auto pos = stem.find("__r");
  return pos == std::string::npos || pos == 0 ? stem : stem.substr(0, pos);
}

std::map<int, std::string> read_classes(const fs::path& path) {
  std::map<int, std::string> names;
  try {
    const json doc = json::parse(read_text_file(path));
    for (const auto& entry : doc) {
      const int index = entry.at("index").get<int>();
      const auto name = entry.at("name").get<std::string>();
      if (index < 1 || index >= RasterMask::kMaxClasses) {
        fail(ErrorKind::Manifest, "class index " + std::to_string(index) + " out of range in " + path.string());
      }
      if (name.empty()) fail(ErrorKind::Manifest, "empty class name in " + path.string());
      names[index] = name;
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Manifest, "malformed " + path.string() + ": " + e.what());
  }
  return names;
}

std::vector<Triplet> build_manifest(const fs::path& root) {
  if (!fs::is_directory(root)) fail(ErrorKind::Manifest, "corpus root " + root.string() + " is not a directory");
  const fs::path image_dir = root / "images";
  if (!fs::exists(image_dir)) return {};

  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(image_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") images.push_back(entry.path());
  }
  std::sort(images.begin(), images.end());
  if (images.empty()) return {};

  const auto classes = read_classes(root / "classes.json");
  std::string dataset = root.filename().string(), organ;
  if (fs::exists(root / "dataset.json")) {
    try {
      const json meta = json::parse(read_text_file(root / "dataset.json"));
      dataset = meta.value("dataset", dataset);
      organ = meta.value("organ", std::string());
    } catch (const json::exception& e) {
      fail(ErrorKind::Manifest, "malformed dataset.json: " + std::string(e.what()));
    }
  }

  std::vector<Triplet> out;
  for (const auto& image_path : images) {
    const fs::path mask_path = root / "masks" / image_path.filename();
    if (!fs::exists(mask_path)) fail(ErrorKind::Manifest, "no mask for " + image_path.string());
    const Image image = read_png_rgb(image_path);
    const RasterMask mask = read_png_mask(mask_path);
    if (mask.width() != image.width || mask.height() != image.height) {
      fail(ErrorKind::Manifest, "mask " + mask_path.string() + " is " + std::to_string(mask.width()) + "x" +
                                    std::to_string(mask.height()) + ", image is " + std::to_string(image.width) +
                                    "x" + std::to_string(image.height));
    }
    double total = 0.0;
    for (auto v : image.rgb) total += v;
    const double intensity = total / (255.0 * static_cast<double>(image.rgb.size()));
    const std::string stem = image_path.stem().string();
    for (int c : mask.present_classes()) {
      if (c == 0) continue;
      const auto it = classes.find(c);
      if (it == classes.end()) {
        fail(ErrorKind::Manifest, "mask " + mask_path.string() + " uses class " + std::to_string(c) +
                                      " missing from classes.json");
      }
      out.push_back({image_path.generic_string(), mask_path.generic_string(), c, it->second, organ, dataset,
                     parent_id_from_stem(stem), intensity});
    }
  }
  return out;
}

std::pair<std::vector<Triplet>, std::vector<Triplet>> split(const std::vector<Triplet>& manifest,
                                                            const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    fail(ErrorKind::Input, "train fraction must lie strictly between 0 and 1");
  }
  if (manifest.empty()) fail(ErrorKind::Input, "cannot split an empty manifest");

  std::set<std::string> unique;
  for (const auto& t : manifest) unique.insert(t.parent_id);
  std::vector<std::string> parents(unique.begin(), unique.end());
  if (parents.size() == 1) {
    log_warning("split: only one parent image ('" + parents[0] + "'); everything goes to train");
    return {manifest, {}};
  }
  Rng rng(spec.seed);
  rng.shuffle(parents);
  const auto n = static_cast<double>(parents.size());
  auto n_train = static_cast<std::size_t>(std::llround(n * spec.train_fraction));
  n_train = std::clamp<std::size_t>(n_train, 1, parents.size() - 1);
  const std::set<std::string> train_parents(parents.begin(), parents.begin() + static_cast<long>(n_train));

  std::pair<std::vector<Triplet>, std::vector<Triplet>> result;
  for (const auto& t : manifest) {
    (train_parents.count(t.parent_id) ? result.first : result.second).push_back(t);
  }
  return result;
}

std::string prompt_text(const std::string& class_name) {
  if (class_name.empty()) fail(ErrorKind::Input, "class name must not be empty");
  return "an image of " + class_name;
}

std::string manifest_to_jsonl(const std::vector<Triplet>& manifest) {
  std::string out;
  for (const auto& t : manifest) {
    const json line = {{"image", t.image_path},   {"mask", t.mask_path},       {"class_index", t.class_index},
                       {"class_name", t.class_name}, {"organ", t.organ},        {"dataset", t.dataset},
                       {"parent_id", t.parent_id},  {"mean_intensity", t.mean_intensity}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

std::vector<Triplet> parse_manifest_jsonl(const std::string& text) {
  std::vector<Triplet> out;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      Triplet t;
      t.image_path = j.at("image").get<std::string>();
      t.mask_path = j.at("mask").get<std::string>();
      t.class_index = j.at("class_index").get<int>();
      t.class_name = j.at("class_name").get<std::string>();
      t.organ = j.value("organ", std::string());
      t.dataset = j.value("dataset", std::string());
      t.parent_id = j.at("parent_id").get<std::string>();
      t.mean_intensity = j.value("mean_intensity", 0.0);
      if (t.class_name.empty() || t.parent_id.empty()) {
        fail(ErrorKind::Manifest, "manifest line " + std::to_string(number) + ": empty class name or parent id");
      }
      out.push_back(std::move(t));
    } catch (const json::exception& e) {
      fail(ErrorKind::Manifest, "manifest line " + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

void write_manifest(const fs::path& path, const std::vector<Triplet>& manifest) {
  write_text_file(path, manifest_to_jsonl(manifest));
}

std::vector<Triplet> read_manifest(const fs::path& path) { return parse_manifest_jsonl(read_text_file(path)); }

std::vector<OntologyEntry> parse_ontology(const std::string& text) {
  std::vector<OntologyEntry> out;
  try {
    const json doc = json::parse(text);
    if (!doc.is_array()) fail(ErrorKind::Manifest, "ontology must be a JSON array");
    for (const auto& e : doc) {
      OntologyEntry entry;
      entry.class_name = e.at("class_name").get<std::string>();
      entry.organ = e.value("organ", std::string());
      entry.category = parse_category(e.at("category").get<std::string>());
      out.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Manifest, std::string("malformed ontology: ") + e.what());
  }
  return out;
}

std::vector<OntologyEntry> read_ontology(const fs::path& path) { return parse_ontology(read_text_file(path)); }

std::optional<OntologyEntry> lookup(const std::vector<OntologyEntry>& ontology, const Triplet& triplet) {
  std::optional<OntologyEntry> found;
  int matches = 0;
  for (const auto& e : ontology) {
    if (e.class_name != triplet.class_name) continue;
    if (!e.organ.empty() && e.organ != triplet.organ) continue;
    found = e;
    ++matches;
  }
  if (matches == 1) return found;
  log_warning("ontology: class '" + triplet.class_name + "' (" + (triplet.organ.empty() ? "any organ" : triplet.organ) +
              ") is " + (matches == 0 ? "unmapped" : "ambiguous"));
  return std::nullopt;
}

}  // namespace tseg
