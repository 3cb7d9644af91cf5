#pragma once

// Image-mask-text triplets: directory manifests, ontology lookup, prompt
// text and parent-image-level train/test splits.
//
// Directory layout read by build_manifest:
//   root/images/<stem>.png   RGB tiles
//   root/masks/<stem>.png    grayscale class-index masks, same size
//   root/classes.json        [{"index": 1, "name": "tumor"}, ...]
//   root/dataset.json        optional {"dataset": "...", "organ": "..."}
// The parent image id is the part of <stem> before "__r" (tiles cut from one
// slide share it), or the whole stem.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace tseg {

struct Triplet {
  std::string image_path;
  std::string mask_path;
  int class_index = 0;
  std::string class_name;
  std::string organ;
  std::string dataset;
  std::string parent_id;
  double mean_intensity = 0.0;  // mean of RGB values scaled to [0, 1]

  bool operator==(const Triplet&) const = default;
};

enum class TissueCategory { Tumor, Microenvironment, Normal };

std::string to_string(TissueCategory category);
TissueCategory parse_category(const std::string& text);

struct OntologyEntry {
  std::string class_name;
  std::string organ;  // empty matches any organ
  TissueCategory category = TissueCategory::Tumor;
};

struct SplitSpec {
  double train_fraction = 0.95;
  std::uint64_t seed = 0;
};

std::string parent_id_from_stem(const std::string& stem);

/// classes.json: [{"index": i, "name": n}, ...] -> index to name.
std::map<int, std::string> read_classes(const std::filesystem::path& path);

std::vector<Triplet> build_manifest(const std::filesystem::path& root);

/// Partition by parent id. Parents are shuffled under the seed and the first
/// round(n * fraction) go to train, clamped so both sides are non-empty when
/// there are at least two parents. Input order is kept within each side.
std::pair<std::vector<Triplet>, std::vector<Triplet>> split(const std::vector<Triplet>& manifest,
                                                            const SplitSpec& spec);

std::string prompt_text(const std::string& class_name);

std::string manifest_to_jsonl(const std::vector<Triplet>& manifest);
std::vector<Triplet> parse_manifest_jsonl(const std::string& text);
void write_manifest(const std::filesystem::path& path, const std::vector<Triplet>& manifest);
std::vector<Triplet> read_manifest(const std::filesystem::path& path);

std::vector<OntologyEntry> parse_ontology(const std::string& text);
std::vector<OntologyEntry> read_ontology(const std::filesystem::path& path);

/// The unique entry matching the triplet's class name and organ, or nothing
/// when the class is unmapped or ambiguous.
std::optional<OntologyEntry> lookup(const std::vector<OntologyEntry>& ontology, const Triplet& triplet);

// Small file helpers shared by the other modules.
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace tseg
