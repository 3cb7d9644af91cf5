#pragma once

// Seeded synthetic data: the colored-blob segmentation corpus and a large
// multi-class slide for refinement experiments.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tseg/imaging.hpp"
#include "tseg/rng.hpp"

namespace tseg {

struct SyntheticClass {
  int index = 1;
  std::string name;
  std::array<double, 3> color{};  // mean RGB, 0..255
};

/// The four blob classes (indices 1..4).
const std::vector<SyntheticClass>& blob_classes();

struct SyntheticImage {
  Image image;
  RasterMask mask;
};

/// One size x size image holding 1 to 3 irregular blobs on a noisy light
/// background; later blobs paint over earlier ones.
SyntheticImage blob_image(Rng& rng, int size = 224);

/// Image i of a corpus is generated from Rng(seed * 1000003 + i), so any
/// subset can be regenerated independently.
std::vector<SyntheticImage> blob_corpus(std::size_t count, std::uint64_t seed, int size = 224);

/// Writes root/images, root/masks and root/classes.json (the layout read by
/// build_manifest). Stems are "blob<i>".
void write_blob_corpus(const std::filesystem::path& root, std::size_t count, std::uint64_t seed, int size = 224);

struct SlideOptions {
  int size = 2048;
  int classes = 3;             // uses blob classes 1..classes
  int regions = 300;           // blob count
  double min_radius = 30.0;
  double max_radius = 70.0;
  double stain_shift = 0.5;    // 0 keeps corpus colors, 1 blends fully to the shifted palette
  double noise = 12.0;
  std::uint64_t seed = 0;
};

/// Large slide with blob regions over background; colors optionally shifted
/// away from the training palette.
SyntheticImage synthetic_slide(const SlideOptions& options);

}  // namespace tseg
