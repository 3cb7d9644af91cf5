#include "tseg/refine.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "json.hpp"
#include "tseg/corpus.hpp"
#include "tseg/error.hpp"
#include "tseg/log.hpp"
#include "tseg/metrics.hpp"

namespace tseg {

using json = nlohmann::json;

std::vector<double> extract_patch_features(const Image& image, int x0, int y0, int size) {
  if (size <= 0) fail(ErrorKind::Geometry, "extract_patch_features: patch size must be positive");
  const int x1 = std::min(image.width, x0 + size);
  const int y1 = std::min(image.height, y0 + size);
  x0 = std::max(0, x0);
  y0 = std::max(0, y0);
  std::vector<double> f(kPatchFeatureLength, 0.0);
  if (x1 <= x0 || y1 <= y0) return f;
  const double n = static_cast<double>(x1 - x0) * (y1 - y0);
  double sum[3] = {0, 0, 0}, sum2[3] = {0, 0, 0};
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const auto* p = image.pixel(x, y);
      for (int c = 0; c < 3; ++c) {
        f[c * kHistogramBins + p[c] * kHistogramBins / 256] += 1.0;
        sum[c] += p[c];
        sum2[c] += static_cast<double>(p[c]) * p[c];
      }
    }
  }
  for (int i = 0; i < 3 * kHistogramBins; ++i) f[i] /= n;
  for (int c = 0; c < 3; ++c) {
    const double m = sum[c] / n;
    f[3 * kHistogramBins + c] = m / 255.0;
    f[3 * kHistogramBins + 3 + c] = std::sqrt(std::max(0.0, sum2[c] / n - m * m)) / 255.0;
  }
  // Forward differences of the gray level inside the patch.
  double grad = 0.0;
  std::size_t count = 0;
  auto gray = [&](int x, int y) {
    const auto* p = image.pixel(x, y);
    return (static_cast<double>(p[0]) + p[1] + p[2]) / (3.0 * 255.0);
  };
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const double gx = x + 1 < x1 ? gray(x + 1, y) - gray(x, y) : 0.0;
      const double gy = y + 1 < y1 ? gray(x, y + 1) - gray(x, y) : 0.0;
      grad += std::hypot(gx, gy);
      ++count;
    }
  }
  f[kPatchFeatureLength - 1] = grad / static_cast<double>(count);
  return f;
}

// ---------------------------------------------------------------------------
// Classifier

namespace {

std::vector<double> softmax(std::vector<double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (auto& v : z) {
    v = std::exp(v - m);
    total += v;
  }
  for (auto& v : z) v /= total;
  return z;
}

double entropy_of(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return std::max(0.0, h);
}

}  // namespace

std::vector<double> PatchClassifier::probabilities(const std::vector<double>& features) const {
  if (classes.size() == 1) return {1.0};
  if (features.size() != mean.size()) fail(ErrorKind::Dimension, "patch classifier: feature length mismatch");
  std::vector<double> z(classes.size(), 0.0);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const auto& w = weights[k];
    double acc = w.back();
    for (std::size_t j = 0; j < features.size(); ++j) acc += w[j] * (features[j] - mean[j]) / scale[j];
    z[k] = acc;
  }
  return softmax(std::move(z));
}

int PatchClassifier::predict(const std::vector<double>& features) const {
  const auto p = probabilities(features);
  return classes[static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin())];
}

PatchClassifier fit_patch_classifier(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                                     const ClassifierOptions& options) {
  if (features.empty() || features.size() != labels.size()) {
    fail(ErrorKind::Fit, "fit_patch_classifier: need one label per feature row");
  }
  const std::size_t n = features.size();
  const std::size_t dim = features.front().size();
  for (const auto& row : features) {
    if (row.size() != dim) fail(ErrorKind::Dimension, "fit_patch_classifier: ragged feature rows");
  }
  PatchClassifier model;
  model.classes = labels;
  std::sort(model.classes.begin(), model.classes.end());
  model.classes.erase(std::unique(model.classes.begin(), model.classes.end()), model.classes.end());
  model.mean.assign(dim, 0.0);
  model.scale.assign(dim, 1.0);
  const std::size_t k_count = model.classes.size();
  model.weights.assign(k_count, std::vector<double>(dim + 1, 0.0));
  if (k_count == 1) {
    log_warning("fit_patch_classifier: single-class label set; using a constant classifier");
    return model;
  }

  for (const auto& row : features) {
    for (std::size_t j = 0; j < dim; ++j) model.mean[j] += row[j];
  }
  for (auto& m : model.mean) m /= static_cast<double>(n);
  std::vector<double> var(dim, 0.0);
  for (const auto& row : features) {
    for (std::size_t j = 0; j < dim; ++j) var[j] += (row[j] - model.mean[j]) * (row[j] - model.mean[j]);
  }
  for (std::size_t j = 0; j < dim; ++j) {
    const double s = std::sqrt(var[j] / static_cast<double>(n));
    model.scale[j] = s > 1e-12 ? s : 1.0;
  }
  std::vector<std::vector<double>> x(n, std::vector<double>(dim + 1, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim; ++j) x[i][j] = (features[i][j] - model.mean[j]) / model.scale[j];
  }
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<std::size_t>(std::lower_bound(model.classes.begin(), model.classes.end(), labels[i]) -
                                    model.classes.begin());
  }

  auto& w = model.weights;
  std::vector<std::vector<double>> grad(k_count, std::vector<double>(dim + 1));
  for (int it = 0; it < options.max_iterations; ++it) {
    for (auto& g : grad) std::fill(g.begin(), g.end(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> z(k_count);
      for (std::size_t k = 0; k < k_count; ++k) z[k] = std::inner_product(x[i].begin(), x[i].end(), w[k].begin(), 0.0);
      const auto p = softmax(std::move(z));
      loss -= std::log(std::max(p[y[i]], 1e-300));
      for (std::size_t k = 0; k < k_count; ++k) {
        const double r = p[k] - (k == y[i] ? 1.0 : 0.0);
        for (std::size_t j = 0; j <= dim; ++j) grad[k][j] += r * x[i][j];
      }
    }
    double norm2 = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) {
      for (std::size_t j = 0; j <= dim; ++j) {
        grad[k][j] /= static_cast<double>(n);
        if (j < dim) {
          grad[k][j] += options.l2 * w[k][j];
          loss += 0.5 * options.l2 * w[k][j] * w[k][j] * static_cast<double>(n);
        }
        norm2 += grad[k][j] * grad[k][j];
      }
    }
    model.final_loss = loss / static_cast<double>(n);
    model.iterations = it;
    if (std::sqrt(norm2) < options.tolerance) break;
    for (std::size_t k = 0; k < k_count; ++k) {
      for (std::size_t j = 0; j <= dim; ++j) w[k][j] -= options.learning_rate * grad[k][j];
    }
    model.iterations = it + 1;
  }
  return model;
}

// ---------------------------------------------------------------------------
// Patch grid

BBox PatchGrid::patch_box(int id) const {
  const int r = id / cols;
  const int c = id % cols;
  const int x0 = c * patch_size;
  const int y0 = r * patch_size;
  return {x0, y0, std::min(width, x0 + patch_size) - 1, std::min(height, y0 + patch_size) - 1};
}

int PatchGrid::label(int id) const {
  const auto i = static_cast<std::size_t>(id);
  return human_label[i] >= 0 ? human_label[i] : predicted[i];
}

PatchGrid make_patch_grid(const Image& slide, int patch_size, std::vector<int> classes) {
  if (slide.empty()) fail(ErrorKind::Input, "make_patch_grid: empty slide");
  if (patch_size <= 0) fail(ErrorKind::Geometry, "make_patch_grid: patch size must be positive");
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.empty()) fail(ErrorKind::Label, "make_patch_grid: empty class list");
  PatchGrid grid;
  grid.width = slide.width;
  grid.height = slide.height;
  grid.patch_size = patch_size;
  grid.cols = (slide.width + patch_size - 1) / patch_size;
  grid.rows = (slide.height + patch_size - 1) / patch_size;
  grid.classes = std::move(classes);
  const std::size_t n = static_cast<std::size_t>(grid.cols) * grid.rows;
  grid.features.reserve(n);
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      grid.features.push_back(extract_patch_features(slide, c * patch_size, r * patch_size, patch_size));
    }
  }
  const std::vector<double> uniform(grid.classes.size(), 1.0 / static_cast<double>(grid.classes.size()));
  set_predictions(grid, std::vector<std::vector<double>>(n, uniform));
  grid.human_label.assign(n, -1);
  return grid;
}

void set_predictions(PatchGrid& grid, const std::vector<std::vector<double>>& probabilities) {
  if (probabilities.size() != grid.size()) fail(ErrorKind::Dimension, "set_predictions: one row per patch required");
  grid.probabilities = probabilities;
  grid.predicted.resize(grid.size());
  grid.entropy.resize(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& p = probabilities[i];
    if (p.size() != grid.classes.size()) fail(ErrorKind::Dimension, "set_predictions: probability length mismatch");
    grid.predicted[i] = grid.classes[static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin())];
    grid.entropy[i] = entropy_of(p);
  }
}

std::vector<int> select_uncertain(const PatchGrid& grid, int budget) {
  if (budget < 1) fail(ErrorKind::Input, "select_uncertain: budget must be at least 1");
  std::vector<int> candidates;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid.human_label[i] < 0) candidates.push_back(static_cast<int>(i));
  }
  std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
    return grid.entropy[static_cast<std::size_t>(a)] > grid.entropy[static_cast<std::size_t>(b)];
  });
  if (candidates.size() > static_cast<std::size_t>(budget)) candidates.resize(static_cast<std::size_t>(budget));
  return candidates;
}

int majority_label(const RasterMask& gt, const BBox& box) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(RasterMask::kMaxClasses), 0);
  for (int y = box.y_min; y <= box.y_max; ++y) {
    for (int x = box.x_min; x <= box.x_max; ++x) ++counts[gt.at(x, y)];
  }
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

namespace {

void check_ids(const PatchGrid& grid, const std::vector<int>& ids) {
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= grid.size()) {
      fail(ErrorKind::Annotation, "patch id " + std::to_string(id) + " outside the grid");
    }
  }
}

void check_label(const PatchGrid& grid, int label) {
  if (!std::binary_search(grid.classes.begin(), grid.classes.end(), label)) {
    fail(ErrorKind::Label, "label " + std::to_string(label) + " is not a slide class");
  }
}

}  // namespace

void annotate_oracle(PatchGrid& grid, const std::vector<int>& ids, const RasterMask& gt) {
  if (gt.width() != grid.width || gt.height() != grid.height) {
    fail(ErrorKind::Dimension, "annotate_oracle: ground truth does not match the slide");
  }
  check_ids(grid, ids);
  for (int id : ids) {
    const int label = majority_label(gt, grid.patch_box(id));
    check_label(grid, label);
    grid.human_label[static_cast<std::size_t>(id)] = label;
  }
}

std::string annotation_event_to_json(const AnnotationEvent& e) {
  return json{{"patch_id", e.patch_id}, {"class_index", e.class_index}, {"timestamp", e.timestamp}}.dump();
}

AnnotationEvent parse_annotation_event(const std::string& text) {
  try {
    const auto j = json::parse(text);
    AnnotationEvent e;
    e.patch_id = j.at("patch_id").get<int>();
    e.class_index = j.at("class_index").get<int>();
    if (j.contains("timestamp")) e.timestamp = j.at("timestamp").get<std::string>();
    return e;
  } catch (const json::exception& ex) {
    fail(ErrorKind::Annotation, std::string("annotation event: ") + ex.what());
  }
}

void annotate_human(PatchGrid& grid, const std::vector<AnnotationEvent>& events) {
  std::map<int, int> seen;
  for (const auto& e : events) {
    check_ids(grid, {e.patch_id});
    check_label(grid, e.class_index);
  }
  for (const auto& e : events) {
    if (auto it = seen.find(e.patch_id); it != seen.end() && it->second != e.class_index) {
      log_warning("annotate_human: patch " + std::to_string(e.patch_id) + " relabeled from " +
                  std::to_string(it->second) + " to " + std::to_string(e.class_index) + " (last event wins)");
    }
    seen[e.patch_id] = e.class_index;
    grid.human_label[static_cast<std::size_t>(e.patch_id)] = e.class_index;
  }
}

RasterMask render_patch_mask(const PatchGrid& grid) {
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(grid.width) * grid.height);
  for (int y = 0; y < grid.height; ++y) {
    const int r = y / grid.patch_size;
    for (int x = 0; x < grid.width; ++x) {
      labels[static_cast<std::size_t>(y) * grid.width + x] =
          static_cast<std::uint8_t>(grid.label(r * grid.cols + x / grid.patch_size));
    }
  }
  RasterMask mask(grid.width, grid.height);
  mask.assign(std::move(labels));
  return mask;
}

// ---------------------------------------------------------------------------
// Windows and boxes

std::vector<int> window_origins(int length, int window, int stride) {
  if (window < 1 || stride < 1) fail(ErrorKind::Geometry, "window and stride must be at least 1");
  if (length <= 0) return {};
  std::vector<int> origins;
  int o = 0;
  for (; o + window < length; o += stride) origins.push_back(o);
  const int last = std::max(0, length - window);
  if (origins.empty() || origins.back() != last) origins.push_back(last);
  return origins;
}

std::vector<WindowBoxes> patch_mask_to_boxes(const RasterMask& mask, int window, int stride) {
  std::vector<WindowBoxes> out;
  const auto xs = window_origins(mask.width(), window, stride);
  const auto ys = window_origins(mask.height(), window, stride);
  for (int y0 : ys) {
    for (int x0 : xs) {
      WindowBoxes wb;
      wb.x = x0;
      wb.y = y0;
      wb.width = std::min(window, mask.width() - x0);
      wb.height = std::min(window, mask.height() - y0);
      std::map<int, BBox> boxes;
      for (int y = y0; y < y0 + wb.height; ++y) {
        for (int x = x0; x < x0 + wb.width; ++x) {
          const int c = mask.at(x, y);
          if (c == 0) continue;
          auto [it, fresh] = boxes.try_emplace(c, BBox{x, y, x, y});
          if (!fresh) {
            auto& b = it->second;
            b.x_min = std::min(b.x_min, x);
            b.x_max = std::max(b.x_max, x);
            b.y_min = std::min(b.y_min, y);
            b.y_max = std::max(b.y_max, y);
          }
        }
      }
      wb.boxes.assign(boxes.begin(), boxes.end());
      out.push_back(std::move(wb));
    }
  }
  return out;
}

Image extract_window(const Image& image, int x, int y, int window) {
  if (image.empty()) fail(ErrorKind::Input, "extract_window: empty image");
  Image out(window, window);
  for (int wy = 0; wy < window; ++wy) {
    const int sy = std::clamp(y + wy, 0, image.height - 1);
    for (int wx = 0; wx < window; ++wx) {
      const int sx = std::clamp(x + wx, 0, image.width - 1);
      std::copy_n(image.pixel(sx, sy), 3, out.pixel(wx, wy));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rounds

double slide_dice(const RasterMask& pred, const RasterMask& gt, const std::vector<int>& classes) {
  std::vector<int> foreground;
  for (int c : classes) {
    if (c != 0) foreground.push_back(c);
  }
  return multiclass_dice(pred, gt, foreground).mean;
}

namespace {

struct WindowRequest {
  int x, y, width, height;
  std::vector<ClassPrompt> classes;
  std::vector<std::optional<BBox>> boxes;  // slide coordinates
};

// Segments each window and stitches. Class probabilities outside a class's
// box are zeroed. Without overlap averaging, a pixel belongs to the first
// window (in request order) that covers it.
RasterMask segment_windows(Model& model, const Image& slide, const std::vector<WindowRequest>& requests,
                           const RefineOptions& options) {
  const int window = options.window;
  if (window != model.config().image_size) {
    fail(ErrorKind::Config, "refine: window size must equal the model image size");
  }
  const std::size_t n = static_cast<std::size_t>(slide.width) * slide.height;
  std::vector<std::uint8_t> labels(n, 0);
  std::vector<std::uint8_t> owned(n, 0);
  // Overlap averaging keeps per-class probability sums.
  std::map<int, std::vector<float>> prob_sum;
  std::vector<std::uint16_t> hits;
  if (options.average_overlaps) hits.assign(n, 0);

  for (const auto& req : requests) {
    if (options.average_overlaps) {
      for (int y = req.y; y < req.y + req.height; ++y) {
        for (int x = req.x; x < req.x + req.width; ++x) ++hits[static_cast<std::size_t>(y) * slide.width + x];
      }
    }
    if (req.classes.empty()) {
      if (!options.average_overlaps) {
        for (int y = req.y; y < req.y + req.height; ++y) {
          for (int x = req.x; x < req.x + req.width; ++x) owned[static_cast<std::size_t>(y) * slide.width + x] = 1;
        }
      }
      continue;
    }
    const Image crop = extract_window(slide, req.x, req.y, window);
    std::vector<std::vector<double>> probs;
    std::vector<int> indices;
    for (std::size_t k = 0; k < req.classes.size(); ++k) {
      std::optional<BoxPrompt> prompt;
      const auto& box = req.boxes[k];
      if (box) {
        const BBox local{box->x_min - req.x, box->y_min - req.y, box->x_max - req.x, box->y_max - req.y};
        prompt = BoxPrompt::from_bbox(local, window, window);
      }
      auto p = model.foreground(crop, prompt_text(req.classes[k].name), prompt);
      if (box) {
        for (int wy = 0; wy < window; ++wy) {
          for (int wx = 0; wx < window; ++wx) {
            if (!box->contains(req.x + wx, req.y + wy)) p[static_cast<std::size_t>(wy) * window + wx] = 0.0;
          }
        }
      }
      probs.push_back(std::move(p));
      indices.push_back(req.classes[k].class_index);
    }
    if (options.average_overlaps) {
      for (std::size_t k = 0; k < indices.size(); ++k) {
        auto& sum = prob_sum[indices[k]];
        if (sum.empty()) sum.assign(n, 0.0f);
        for (int wy = 0; wy < req.height; ++wy) {
          for (int wx = 0; wx < req.width; ++wx) {
            sum[static_cast<std::size_t>(req.y + wy) * slide.width + req.x + wx] +=
                static_cast<float>(probs[k][static_cast<std::size_t>(wy) * window + wx]);
          }
        }
      }
      continue;
    }
    const RasterMask local = combine_class_probabilities(probs, indices, window, window);
    for (int wy = 0; wy < req.height; ++wy) {
      for (int wx = 0; wx < req.width; ++wx) {
        const std::size_t i = static_cast<std::size_t>(req.y + wy) * slide.width + req.x + wx;
        if (owned[i]) continue;
        owned[i] = 1;
        labels[i] = local.at(wx, wy);
      }
    }
  }

  RasterMask mask(slide.width, slide.height);
  if (options.average_overlaps) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = -1.0;
      int label = 0;
      for (const auto& [c, sum] : prob_sum) {  // ascending class order
        const double p = hits[i] ? sum[i] / hits[i] : 0.0;
        if (p >= 0.5 && p > best) {
          best = p;
          label = c;
        }
      }
      labels[i] = static_cast<std::uint8_t>(label);
    }
  }
  mask.assign(std::move(labels));
  return mask;
}

std::string class_name_of(const RoundState& state, int class_index) {
  std::size_t k = 0;
  for (int c : state.classes) {
    if (c == 0) continue;
    if (c == class_index) return state.class_names.at(k);
    ++k;
  }
  fail(ErrorKind::Label, "unknown class " + std::to_string(class_index));
}

/// Patch probabilities from the class fractions of a pixel mask, lightly
/// smoothed so no class has probability exactly zero.
std::vector<std::vector<double>> fractions_as_probabilities(const PatchGrid& grid, const RasterMask& mask) {
  std::vector<std::vector<double>> out(grid.size());
  const double smoothing = 1.0;
  for (std::size_t id = 0; id < grid.size(); ++id) {
    const BBox b = grid.patch_box(static_cast<int>(id));
    std::vector<double> counts(grid.classes.size(), smoothing);
    for (int y = b.y_min; y <= b.y_max; ++y) {
      for (int x = b.x_min; x <= b.x_max; ++x) {
        const auto it = std::lower_bound(grid.classes.begin(), grid.classes.end(), static_cast<int>(mask.at(x, y)));
        if (it != grid.classes.end() && *it == mask.at(x, y)) counts[static_cast<std::size_t>(it - grid.classes.begin())] += 1.0;
      }
    }
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    for (auto& c : counts) c /= total;
    out[id] = std::move(counts);
  }
  return out;
}

PatchGrid grid_for_state(const Image& slide, const RoundState& state, const RefineOptions& options) {
  PatchGrid grid = make_patch_grid(slide, options.patch_size, state.classes);
  if (state.probabilities.size() == grid.size()) set_predictions(grid, state.probabilities);
  for (std::size_t i = 0; i < state.annotated.size(); ++i) {
    grid.human_label.at(static_cast<std::size_t>(state.annotated[i])) = state.labels[i];
  }
  return grid;
}

void validate_state(const RoundState& state) {
  if (state.classes.empty() || state.classes.front() != 0) {
    fail(ErrorKind::Validation, "round state: classes must include background 0");
  }
  if (state.class_names.size() + 1 != state.classes.size()) {
    fail(ErrorKind::Validation, "round state: one name per non-background class required");
  }
  if (state.annotated.size() != state.labels.size()) {
    fail(ErrorKind::Validation, "round state: annotated ids and labels differ in length");
  }
}

}  // namespace

RoundOutput initial_round(Model& model, const Image& slide, const std::optional<RasterMask>& gt,
                          const std::vector<ClassPrompt>& classes, const RefineOptions& options) {
  if (classes.empty()) fail(ErrorKind::Input, "initial_round: at least one class is required");
  RoundState state;
  std::vector<ClassPrompt> sorted = classes;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.class_index < b.class_index; });
  state.classes.push_back(0);
  for (const auto& c : sorted) {
    if (c.class_index <= 0) fail(ErrorKind::Label, "initial_round: class indices must be positive");
    if (c.class_index == state.classes.back()) fail(ErrorKind::Label, "initial_round: duplicate class index");
    state.classes.push_back(c.class_index);
    state.class_names.push_back(c.name);
  }
  if (gt && (gt->width() != slide.width || gt->height() != slide.height)) {
    fail(ErrorKind::Dimension, "initial_round: ground truth does not match the slide");
  }

  std::vector<WindowRequest> requests;
  for (int y : window_origins(slide.height, options.window, options.stride)) {
    for (int x : window_origins(slide.width, options.window, options.stride)) {
      WindowRequest req{x, y, std::min(options.window, slide.width - x), std::min(options.window, slide.height - y),
                        sorted, std::vector<std::optional<BBox>>(sorted.size())};
      requests.push_back(std::move(req));
    }
  }
  RoundOutput out;
  out.pixel_mask = segment_windows(model, slide, requests, options);
  PatchGrid grid = make_patch_grid(slide, options.patch_size, state.classes);
  state.probabilities = fractions_as_probabilities(grid, out.pixel_mask);
  set_predictions(grid, state.probabilities);
  out.patch_mask = render_patch_mask(grid);
  if (gt) {
    state.dice_log.push_back({0, 0, slide_dice(out.patch_mask, *gt, state.classes),
                              slide_dice(out.pixel_mask, *gt, state.classes)});
  }
  out.state = std::move(state);
  return out;
}

RoundOutput refine_round(Model& model, const Image& slide, const std::optional<RasterMask>& gt, const RoundState& state,
                         int budget, const AnnotationSource& source, const RefineOptions& options) {
  validate_state(state);
  if (gt && (gt->width() != slide.width || gt->height() != slide.height)) {
    fail(ErrorKind::Dimension, "refine_round: ground truth does not match the slide");
  }
  PatchGrid grid = grid_for_state(slide, state, options);
  RoundState next = state;

  std::vector<int> fresh;
  if (source.oracle) {
    const auto ids = select_uncertain(grid, budget);
    annotate_oracle(grid, ids, *source.oracle);
    fresh = ids;
  } else {
    annotate_human(grid, source.events);
    for (const auto& e : source.events) fresh.push_back(e.patch_id);
  }
  // Fold the new labels into the state, keeping first-annotation order.
  std::size_t added = 0;
  for (int id : fresh) {
    const int label = grid.human_label[static_cast<std::size_t>(id)];
    auto it = std::find(next.annotated.begin(), next.annotated.end(), id);
    if (it == next.annotated.end()) {
      next.annotated.push_back(id);
      next.labels.push_back(label);
      ++added;
    } else {
      const auto pos = static_cast<std::size_t>(it - next.annotated.begin());
      if (next.labels[pos] != label) ++added;
      next.labels[pos] = label;
    }
  }
  RoundOutput out;
  if (added == 0) {
    log_warning("refine_round: no new annotations; round skipped");
    out.state = state;
    return out;
  }

  std::vector<std::vector<double>> feats;
  for (int id : next.annotated) feats.push_back(grid.features[static_cast<std::size_t>(id)]);
  next.classifier = fit_patch_classifier(feats, next.labels, options.classifier);
  std::vector<std::vector<double>> probs(grid.size(), std::vector<double>(grid.classes.size(), 0.0));
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto p = next.classifier->probabilities(grid.features[i]);
    for (std::size_t k = 0; k < next.classifier->classes.size(); ++k) {
      const auto it = std::lower_bound(grid.classes.begin(), grid.classes.end(), next.classifier->classes[k]);
      probs[i][static_cast<std::size_t>(it - grid.classes.begin())] = p[k];
    }
  }
  set_predictions(grid, probs);
  next.probabilities = std::move(probs);
  out.patch_mask = render_patch_mask(grid);

  std::vector<WindowRequest> requests;
  for (const auto& wb : patch_mask_to_boxes(out.patch_mask, options.window, options.stride)) {
    WindowRequest req{wb.x, wb.y, wb.width, wb.height, {}, {}};
    for (const auto& [c, box] : wb.boxes) {
      req.classes.push_back({c, class_name_of(next, c)});
      const int m = options.box_margin;
      req.boxes.emplace_back(BBox{std::max(box.x_min - m, wb.x), std::max(box.y_min - m, wb.y),
                                  std::min(box.x_max + m, wb.x + wb.width - 1),
                                  std::min(box.y_max + m, wb.y + wb.height - 1)});
    }
    requests.push_back(std::move(req));
  }
  out.pixel_mask = segment_windows(model, slide, requests, options);
  next.round = state.round + 1;
  if (gt) {
    next.dice_log.push_back({next.round, next.annotated.size(), slide_dice(out.patch_mask, *gt, next.classes),
                             slide_dice(out.pixel_mask, *gt, next.classes)});
  }
  out.state = std::move(next);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

std::string round_state_to_json(const RoundState& s) {
  json j;
  j["round"] = s.round;
  j["classes"] = s.classes;
  j["class_names"] = s.class_names;
  j["annotated"] = s.annotated;
  j["labels"] = s.labels;
  j["probabilities"] = s.probabilities;
  if (s.classifier) {
    const auto& c = *s.classifier;
    j["classifier"] = {{"classes", c.classes}, {"mean", c.mean},           {"scale", c.scale},
                       {"weights", c.weights}, {"iterations", c.iterations}, {"final_loss", c.final_loss}};
  } else {
    j["classifier"] = nullptr;
  }
  json log = json::array();
  for (const auto& e : s.dice_log) {
    log.push_back({{"round", e.round}, {"annotated", e.annotated}, {"patch_dice", e.patch_dice}, {"pixel_dice", e.pixel_dice}});
  }
  j["dice_log"] = log;
  return j.dump();
}

RoundState parse_round_state(const std::string& text) {
  RoundState s;
  try {
    const auto j = json::parse(text);
    s.round = j.at("round").get<int>();
    s.classes = j.at("classes").get<std::vector<int>>();
    s.class_names = j.at("class_names").get<std::vector<std::string>>();
    s.annotated = j.at("annotated").get<std::vector<int>>();
    s.labels = j.at("labels").get<std::vector<int>>();
    s.probabilities = j.at("probabilities").get<std::vector<std::vector<double>>>();
    if (!j.at("classifier").is_null()) {
      const auto& c = j.at("classifier");
      PatchClassifier pc;
      pc.classes = c.at("classes").get<std::vector<int>>();
      pc.mean = c.at("mean").get<std::vector<double>>();
      pc.scale = c.at("scale").get<std::vector<double>>();
      pc.weights = c.at("weights").get<std::vector<std::vector<double>>>();
      pc.iterations = c.at("iterations").get<int>();
      pc.final_loss = c.at("final_loss").get<double>();
      s.classifier = std::move(pc);
    }
    for (const auto& e : j.at("dice_log")) {
      s.dice_log.push_back({e.at("round").get<int>(), e.at("annotated").get<std::size_t>(),
                            e.at("patch_dice").get<double>(), e.at("pixel_dice").get<double>()});
    }
  } catch (const json::exception& ex) {
    fail(ErrorKind::Validation, std::string("round state: ") + ex.what());
  }
  validate_state(s);
  return s;
}

}  // namespace tseg
