#pragma once

// Human-in-the-loop refinement: patch features, a multinomial logistic patch
// classifier, entropy-based patch selection, oracle or human annotation,
// per-window box derivation and box-prompted pixel refinement.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tseg/imaging.hpp"
#include "tseg/model.hpp"

namespace tseg {

inline constexpr int kHistogramBins = 8;
/// 3 x 8 histogram bins, per-channel mean and std, gradient-magnitude mean.
inline constexpr int kPatchFeatureLength = 3 * kHistogramBins + 6 + 1;

/// Features of the size x size window at (x0, y0); pixels outside the image
/// are ignored.
std::vector<double> extract_patch_features(const Image& image, int x0, int y0, int size);

// ---------------------------------------------------------------------------
// Classifier

struct ClassifierOptions {
  int max_iterations = 2000;
  double tolerance = 1e-6;     // stop when the gradient norm falls below this
  double learning_rate = 0.5;
  double l2 = 1e-4;
  std::uint64_t seed = 0;
};

struct PatchClassifier {
  std::vector<int> classes;        // label of each output, ascending
  std::vector<double> mean;        // feature standardization
  std::vector<double> scale;
  std::vector<std::vector<double>> weights;  // [class][feature + 1], bias last
  int iterations = 0;
  double final_loss = 0.0;

  /// Probabilities over `classes`.
  std::vector<double> probabilities(const std::vector<double>& features) const;
  int predict(const std::vector<double>& features) const;
};

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized features, starting from zero weights. A single-class label
/// set gives a constant classifier (with a warning).
PatchClassifier fit_patch_classifier(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                                     const ClassifierOptions& options = {});

// ---------------------------------------------------------------------------
// Patch grid

struct PatchGrid {
  int width = 0;
  int height = 0;
  int patch_size = 32;
  int cols = 0;
  int rows = 0;
  std::vector<int> classes;  // label space, ascending, background (0) included
  std::vector<std::vector<double>> features;
  std::vector<std::vector<double>> probabilities;  // over `classes`
  std::vector<int> predicted;
  std::vector<double> entropy;
  std::vector<int> human_label;  // -1 when unlabeled

  std::size_t size() const { return features.size(); }
  BBox patch_box(int id) const;
  /// Human label when present, otherwise the prediction.
  int label(int id) const;
};

PatchGrid make_patch_grid(const Image& slide, int patch_size, std::vector<int> classes);

/// Stores per-patch probabilities and updates predictions and entropies.
void set_predictions(PatchGrid& grid, const std::vector<std::vector<double>>& probabilities);

/// Top-budget unlabeled patches by entropy, ties by patch index.
std::vector<int> select_uncertain(const PatchGrid& grid, int budget);

/// Majority ground-truth class over each patch's pixels, ties to the lowest
/// class.
int majority_label(const RasterMask& gt, const BBox& box);
void annotate_oracle(PatchGrid& grid, const std::vector<int>& ids, const RasterMask& gt);

struct AnnotationEvent {
  int patch_id = 0;
  int class_index = 0;
  std::string timestamp;
};

std::string annotation_event_to_json(const AnnotationEvent& event);
AnnotationEvent parse_annotation_event(const std::string& text);

/// Applies events in order; a later event for the same patch overrides an
/// earlier one (logged).
void annotate_human(PatchGrid& grid, const std::vector<AnnotationEvent>& events);

/// Pixel-resolution rendering of the per-patch labels.
RasterMask render_patch_mask(const PatchGrid& grid);

// ---------------------------------------------------------------------------
// Windows and boxes

struct WindowBoxes {
  int x = 0;       // window origin in slide pixels
  int y = 0;
  int width = 0;   // window extent inside the slide
  int height = 0;
  std::vector<std::pair<int, BBox>> boxes;  // (class, slide-coordinate box)
};

/// Window origins along one axis: multiples of stride while the window fits,
/// plus a final window flush with the far edge.
std::vector<int> window_origins(int length, int window, int stride);

/// Tight box of every non-background class present in each window of the
/// mask. Windows without any class are kept with an empty box list.
std::vector<WindowBoxes> patch_mask_to_boxes(const RasterMask& mask, int window = 224, int stride = 224);

/// window x window crop at (x, y) with edge replication outside the image.
Image extract_window(const Image& image, int x, int y, int window);

// ---------------------------------------------------------------------------
// Rounds

struct DiceLogEntry {
  int round = 0;
  std::size_t annotated = 0;
  double patch_dice = 0.0;
  double pixel_dice = 0.0;
};

struct RefineOptions {
  int patch_size = 32;
  int window = 224;
  int stride = 224;
  bool average_overlaps = false;
  /// Pixels added on every side of a derived box (clamped to its window).
  int box_margin = 16;
  ClassifierOptions classifier;
};

struct RoundState {
  int round = 0;
  std::vector<int> classes;                  // slide label space incl. background
  std::vector<std::string> class_names;      // names of the non-background classes
  std::vector<int> annotated;                // in annotation order
  std::vector<int> labels;                   // human label per annotated patch
  std::optional<PatchClassifier> classifier;
  std::vector<std::vector<double>> probabilities;  // per patch, over classes
  std::vector<DiceLogEntry> dice_log;
};

std::string round_state_to_json(const RoundState& state);
RoundState parse_round_state(const std::string& text);

struct RoundOutput {
  RoundState state;
  RasterMask pixel_mask;
  RasterMask patch_mask;
};

/// Round 0: box-free segmentation of every window with all slide classes;
/// patch probabilities come from the class fractions of the pixel mask.
RoundOutput initial_round(Model& model, const Image& slide, const std::optional<RasterMask>& gt,
                          const std::vector<ClassPrompt>& classes, const RefineOptions& options = {});

/// Annotation source for one round: the oracle mask or human events.
struct AnnotationSource {
  const RasterMask* oracle = nullptr;
  std::vector<AnnotationEvent> events;
};

/// select -> annotate -> refit -> re-predict -> boxes -> box-prompted
/// segmentation per window -> stitch. With human events, the events define
/// the new annotations and budget only bounds the selection reported to the
/// caller.
RoundOutput refine_round(Model& model, const Image& slide, const std::optional<RasterMask>& gt, const RoundState& state,
                         int budget, const AnnotationSource& source, const RefineOptions& options = {});

/// Pixel-level multiclass Dice over the non-background slide classes.
double slide_dice(const RasterMask& pred, const RasterMask& gt, const std::vector<int>& classes);

}  // namespace tseg
