#include "tseg/service.hpp"

#include <algorithm>
#include <cmath>

#include "httplib.h"
#include "json.hpp"
#include "tseg/error.hpp"

namespace tseg {

using nlohmann::json;

namespace {

constexpr int kThumbnailSize = 64;

json dice_log_json(const std::vector<DiceLogEntry>& log) {
  json out = json::array();
  for (const auto& e : log) {
    out.push_back({{"round", e.round}, {"annotated", e.annotated}, {"patch_dice", e.patch_dice},
                   {"pixel_dice", e.pixel_dice}});
  }
  return out;
}

std::vector<AnnotationEvent> parse_events(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& ex) {
    fail(ErrorKind::Validation, std::string("annotations: ") + ex.what());
  }
  if (j.is_object() && j.contains("events")) j = j.at("events");
  if (!j.is_array()) fail(ErrorKind::Validation, "annotations: expected an array of events");
  std::vector<AnnotationEvent> events;
  for (std::size_t i = 0; i < j.size(); ++i) {
    try {
      events.push_back(parse_annotation_event(j[i].dump()));
    } catch (const Error& e) {
      fail(ErrorKind::Validation, "annotations[" + std::to_string(i) + "]: " + e.what());
    }
  }
  return events;
}

}  // namespace

HitlSession::HitlSession(Model model, Image slide, std::optional<RasterMask> gt, std::vector<ClassPrompt> classes,
                         RefineOptions options)
    : model_(std::move(model)), slide_(std::move(slide)), gt_(std::move(gt)), options_(options) {
  current_ = initial_round(model_, slide_, gt_, classes, options_);
  history_.push_back(current_.state);
  grid_ = make_patch_grid(slide_, options_.patch_size, current_.state.classes);
  thumbnails_.resize(grid_.size());
}

RoundState HitlSession::state() const {
  std::lock_guard lock(mutex_);
  return current_.state;
}

std::size_t HitlSession::pending() const {
  std::lock_guard lock(mutex_);
  return pending_.size();
}

std::string HitlSession::session_json() const {
  std::lock_guard lock(mutex_);
  const RoundState& s = current_.state;
  json classes = json::array();
  for (std::size_t k = 0; k < s.class_names.size(); ++k) {
    classes.push_back({{"index", s.classes[k + 1]}, {"name", s.class_names[k]}});
  }
  return json{{"slide", {{"width", slide_.width}, {"height", slide_.height}}},
              {"patch_size", grid_.patch_size},
              {"cols", grid_.cols},
              {"rows", grid_.rows},
              {"window", options_.window},
              {"stride", options_.stride},
              {"classes", classes},
              {"has_ground_truth", gt_.has_value()},
              {"round", s.round},
              {"annotated", s.annotated.size()},
              {"pending", pending_.size()},
              {"busy", busy_},
              {"dice_log", dice_log_json(s.dice_log)}}
      .dump();
}

std::string HitlSession::thumbnail(int id) const {
  auto& cached = thumbnails_[static_cast<std::size_t>(id)];
  if (cached.empty()) {
    const BBox b = grid_.patch_box(id);
    const Image patch = resize_bilinear(crop(slide_, b.x_min, b.y_min, b.width(), b.height()), kThumbnailSize,
                                        kThumbnailSize);
    const auto png = encode_png_rgb(patch);
    cached = "data:image/png;base64," + httplib::detail::base64_encode(std::string(png.begin(), png.end()));
  }
  return cached;
}

std::string HitlSession::patches_json(std::optional<int> round, bool thumbnails) const {
  std::lock_guard lock(mutex_);
  const int r = round.value_or(current_.state.round);
  if (r < 0 || r >= static_cast<int>(history_.size())) {
    fail(ErrorKind::Undefined, "patches: round " + std::to_string(r) + " not available");
  }
  const RoundState& s = history_[static_cast<std::size_t>(r)];
  PatchGrid grid = grid_;
  set_predictions(grid, s.probabilities);
  for (std::size_t i = 0; i < s.annotated.size(); ++i) grid.human_label[static_cast<std::size_t>(s.annotated[i])] = s.labels[i];
  if (r == current_.state.round) {
    for (const auto& e : pending_) grid.human_label[static_cast<std::size_t>(e.patch_id)] = e.class_index;
  }
  json patches = json::array();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const int id = static_cast<int>(i);
    const BBox b = grid.patch_box(id);
    json p{{"id", id},
           {"x", b.x_min},
           {"y", b.y_min},
           {"width", b.width()},
           {"height", b.height()},
           {"predicted", grid.predicted[i]},
           {"probabilities", grid.probabilities[i]},
           {"entropy", grid.entropy[i]},
           {"human_label", grid.human_label[i] < 0 ? json(nullptr) : json(grid.human_label[i])}};
    if (thumbnails) p["thumbnail"] = thumbnail(id);
    patches.push_back(std::move(p));
  }
  return json{{"round", r}, {"classes", s.classes}, {"patch_size", grid.patch_size}, {"cols", grid.cols},
              {"rows", grid.rows}, {"patches", patches}}
      .dump();
}

std::string HitlSession::submit_annotations(const std::string& body) {
  const auto events = parse_events(body);
  std::lock_guard lock(mutex_);
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    if (e.patch_id < 0 || e.patch_id >= static_cast<int>(grid_.size())) {
      fail(ErrorKind::Validation, "annotations[" + std::to_string(i) + "]: unknown patch " + std::to_string(e.patch_id));
    }
    if (!std::binary_search(grid_.classes.begin(), grid_.classes.end(), e.class_index)) {
      fail(ErrorKind::Validation, "annotations[" + std::to_string(i) + "]: unknown class " + std::to_string(e.class_index));
    }
  }
  pending_.insert(pending_.end(), events.begin(), events.end());
  return json{{"accepted", events.size()}, {"pending", pending_.size()}}.dump();
}

std::string HitlSession::run_round() {
  std::vector<AnnotationEvent> batch;
  RoundState base;
  {
    std::lock_guard lock(mutex_);
    if (busy_) fail(ErrorKind::Busy, "a round is already running");
    busy_ = true;
    batch = pending_;
    base = current_.state;
  }
  RoundOutput out;
  try {
    const int budget = std::max<int>(1, static_cast<int>(batch.size()));
    out = refine_round(model_, slide_, gt_, base, budget, AnnotationSource{nullptr, batch}, options_);
  } catch (...) {
    std::lock_guard lock(mutex_);
    busy_ = false;
    throw;
  }
  std::lock_guard lock(mutex_);
  // Events posted while the round ran stay queued for the next one.
  pending_.erase(pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(batch.size()));
  const bool advanced = out.state.round != base.round;
  if (advanced) {
    current_ = std::move(out);
    history_.push_back(current_.state);
  }
  busy_ = false;
  return json{{"noop", !advanced},
              {"round", current_.state.round},
              {"annotated", current_.state.annotated.size()},
              {"consumed", batch.size()},
              {"dice_log", dice_log_json(current_.state.dice_log)}}
      .dump();
}

std::vector<std::uint8_t> HitlSession::mask_png(const std::string& level) const {
  std::lock_guard lock(mutex_);
  if (level == "patch") return encode_png_mask(current_.patch_mask);
  if (level == "pixel") return encode_png_mask(current_.pixel_mask);
  fail(ErrorKind::Validation, "mask: level must be 'patch' or 'pixel'");
}

// ---------------------------------------------------------------------------
// HTTP binding

namespace {

int status_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Busy:
      return 409;
    case ErrorKind::Undefined:
      return 404;
    case ErrorKind::Validation:
    case ErrorKind::Annotation:
    case ErrorKind::Input:
    case ErrorKind::Label:
      return 400;
    default:
      return 500;
  }
}

template <typename F>
void guarded(httplib::Response& res, F&& body) {
  try {
    body();
  } catch (const Error& e) {
    res.status = status_for(e.kind());
    res.set_content(json{{"error", std::string(to_string(e.kind()))}, {"message", e.what()}}.dump(), "application/json");
  } catch (const std::exception& e) {
    res.status = 500;
    res.set_content(json{{"error", "internal"}, {"message", e.what()}}.dump(), "application/json");
  }
}

}  // namespace

void mount_routes(httplib::Server& server, HitlSession& session) {
  server.Get("/api/session", [&session](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { res.set_content(session.session_json(), "application/json"); });
  });
  server.Get("/api/patches", [&session](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      std::optional<int> round;
      if (req.has_param("round")) {
        const std::string text = req.get_param_value("round");
        try {
          std::size_t used = 0;
          round = std::stoi(text, &used);
          if (used != text.size()) throw std::invalid_argument(text);
        } catch (const std::exception&) {
          fail(ErrorKind::Validation, "patches: round must be an integer");
        }
      }
      const bool thumbs = !req.has_param("thumbnails") || req.get_param_value("thumbnails") != "0";
      res.set_content(session.patches_json(round, thumbs), "application/json");
    });
  });
  server.Post("/api/annotations", [&session](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { res.set_content(session.submit_annotations(req.body), "application/json"); });
  });
  server.Post("/api/round", [&session](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { res.set_content(session.run_round(), "application/json"); });
  });
  server.Get("/api/mask", [&session](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto png = session.mask_png(req.has_param("level") ? req.get_param_value("level") : "pixel");
      res.set_content(std::string(png.begin(), png.end()), "image/png");
    });
  });
}

}  // namespace tseg
