// Command-line front end: one subcommand per pipeline stage.
//
// Success prints a one-line JSON summary on stdout. Failure prints one JSON
// line {"error": kind, "message": text} on stderr and exits 1 (2 for usage
// errors). VISTA_SEED sets the default of every --seed flag.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"
#include "tseg/corpus.hpp"
#include "tseg/error.hpp"
#include "tseg/imaging.hpp"
#include "tseg/metrics.hpp"
#include "tseg/model.hpp"
#include "tseg/omics.hpp"
#include "tseg/refine.hpp"
#include "tseg/service.hpp"
#include "tseg/survival.hpp"
#include "tseg/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tseg;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t default_seed() {
  const char* env = std::getenv("VISTA_SEED");
  if (!env || !*env) return 0;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(env, &used);
    if (used != std::string(env).size()) throw std::invalid_argument(env);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("VISTA_SEED must be a non-negative integer, got '") + env + "'");
  }
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void emit(const json& summary) { std::cout << summary.dump() << "\n"; }

/// Class list from a classes.json file, "1:tumor,2:stroma", or "tumor,stroma"
/// (indices 1, 2, ... in order).
std::vector<ClassPrompt> parse_classes(const std::string& text) {
  std::vector<ClassPrompt> out;
  if (fs::is_regular_file(text)) {
    for (const auto& [index, name] : read_classes(text)) out.push_back({index, name});
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  int next = 1;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      out.push_back({next++, item});
    } else {
      try {
        out.push_back({std::stoi(item.substr(0, colon)), item.substr(colon + 1)});
      } catch (const std::exception&) {
        fail(ErrorKind::Input, "bad class entry '" + item + "'");
      }
      next = out.back().class_index + 1;
    }
  }
  if (out.empty()) fail(ErrorKind::Input, "no classes given");
  return out;
}

/// Classes present in a mask, named after the synthetic palette.
std::vector<ClassPrompt> classes_from_mask(const RasterMask& mask) {
  std::vector<ClassPrompt> out;
  for (int c : mask.present_classes()) {
    if (c == 0) continue;
    std::string name = "class" + std::to_string(c);
    for (const auto& b : blob_classes())
      if (b.index == c) name = b.name;
    out.push_back({c, name});
  }
  return out;
}

json classes_json(const std::vector<ClassPrompt>& classes) {
  json out = json::array();
  for (const auto& c : classes) out.push_back({{"index", c.class_index}, {"name", c.name}});
  return out;
}

json ci_json(const CIResult& ci) {
  return {{"mean", ci.mean}, {"lower", ci.lower}, {"upper", ci.upper}, {"resamples", ci.resamples}, {"seed", ci.seed}};
}

// ---------------------------------------------------------------------------

struct RasterizeArgs {
  std::string polygons, out;
  int width = 0, height = 0;
};

void run_rasterize(const RasterizeArgs& a) {
  const RasterMask mask = rasterize_polygons(read_polygons_json(a.polygons), a.width, a.height);
  ensure_parent(a.out);
  write_png_mask(a.out, mask);
  json counts = json::object();
  for (int c : mask.present_classes()) {
    counts[std::to_string(c)] = std::count(mask.labels().begin(), mask.labels().end(), static_cast<std::uint8_t>(c));
  }
  emit({{"mask", a.out}, {"width", a.width}, {"height", a.height}, {"pixels_per_class", counts}});
}

struct TileArgs {
  std::string image, mask, out, stem, classes;
  int size = 1024;
};

void run_tile(const TileArgs& a) {
  const Image image = read_png_rgb(a.image);
  RasterMask mask;
  if (!a.mask.empty()) mask = read_png_mask(a.mask);
  const std::string stem = a.stem.empty() ? fs::path(a.image).stem().string() : a.stem;
  const auto tiles = tile(image, mask, a.size);
  const fs::path root(a.out);
  fs::create_directories(root / "images");
  if (mask.size() != 0) fs::create_directories(root / "masks");
  for (const auto& t : tiles) {
    const std::string name = stem + "__r" + std::to_string(t.row) + "c" + std::to_string(t.col) + ".png";
    write_png_rgb(root / "images" / name, t.image);
    if (mask.size() != 0) write_png_mask(root / "masks" / name, t.mask);
  }
  if (!a.classes.empty()) {
    write_text_file(root / "classes.json", classes_json(parse_classes(a.classes)).dump(2) + "\n");
  }
  emit({{"tiles", tiles.size()}, {"out", a.out}});
}

struct ManifestArgs {
  std::string root, out;
};

void run_manifest(const ManifestArgs& a) {
  const auto manifest = build_manifest(a.root);
  ensure_parent(a.out);
  write_manifest(a.out, manifest);
  emit({{"triplets", manifest.size()}, {"out", a.out}});
}

struct SplitArgs {
  std::string manifest, train, test;
  double fraction = 0.95;
  std::uint64_t seed = 0;
};

void run_split(SplitArgs a) {
  const auto manifest = read_manifest(a.manifest);
  const auto [train, test] = split(manifest, {a.fraction, a.seed});
  const fs::path base = fs::path(a.manifest).replace_extension();
  if (a.train.empty()) a.train = base.string() + ".train.jsonl";
  if (a.test.empty()) a.test = base.string() + ".test.jsonl";
  ensure_parent(a.train);
  ensure_parent(a.test);
  write_manifest(a.train, train);
  write_manifest(a.test, test);
  emit({{"train", train.size()}, {"test", test.size()}, {"train_out", a.train}, {"test_out", a.test}});
}

struct TrainArgs {
  std::string manifest, out, config, loss;
  int epochs = 10, batch = 16, dim = 0, image = 0, patch = 0, depth = -1;
  double lr = 5e-5, dropout = 0.5, jitter = 0.0, weight_decay = 0.01;
  std::uint64_t seed = 0;
};

void run_train(const TrainArgs& a) {
  ModelConfig config;
  if (!a.config.empty()) config = config_from_json(read_text_file(a.config));
  if (a.dim > 0) config.dim = a.dim;
  if (a.image > 0) config.image_size = a.image;
  if (a.patch > 0) config.patch_size = a.patch;
  if (a.depth >= 0) config.fusion_depth = a.depth;
  config.seed = a.seed;
  config.validate();

  const auto samples = load_samples(read_manifest(a.manifest), config, a.seed);
  Model model(config);
  TrainConfig tc;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch;
  tc.optimizer.learning_rate = a.lr;
  tc.optimizer.weight_decay = a.weight_decay;
  tc.box_dropout = a.dropout;
  tc.box_jitter = a.jitter;
  tc.seed = a.seed;
  const TrainResult result = train(model, samples, tc);
  ensure_parent(a.out);
  model.save(a.out);
  if (!a.loss.empty()) {
    std::ostringstream csv;
    csv << std::setprecision(17) << "step,loss\n";
    for (std::size_t i = 0; i < result.step_loss.size(); ++i) csv << i << "," << result.step_loss[i] << "\n";
    ensure_parent(a.loss);
    write_text_file(a.loss, csv.str());
  }
  emit({{"model", a.out},
        {"samples", samples.size()},
        {"parameters", result.parameter_count},
        {"epoch_loss", result.epoch_loss}});
}

struct SegmentArgs {
  std::string model, image, classes, out, boxes;
};

void run_segment(const SegmentArgs& a) {
  Model model = Model::load(a.model);
  const Image image = read_png_rgb(a.image);
  const auto classes = parse_classes(a.classes);
  const int s = model.config().image_size;
  const Image input = image.width == s && image.height == s ? image : resize_bilinear(image, s, s);

  std::vector<std::optional<BoxPrompt>> boxes;
  if (!a.boxes.empty()) {
    // {"<class name>": [x_min, y_min, x_max, y_max]} in source pixels, inclusive.
    const json doc = json::parse(read_text_file(a.boxes));
    for (const auto& c : classes) {
      if (!doc.contains(c.name)) {
        boxes.emplace_back();
        continue;
      }
      const auto v = doc.at(c.name).get<std::vector<int>>();
      if (v.size() != 4) fail(ErrorKind::Input, "box for " + c.name + " needs 4 numbers");
      boxes.push_back(BoxPrompt::from_bbox({v[0], v[1], v[2], v[3]}, image.width, image.height));
    }
  }
  RasterMask mask = segment_multiclass(model, input, classes, boxes);
  if (mask.width() != image.width || mask.height() != image.height) {
    mask = resize_nearest(mask, image.width, image.height);
  }
  ensure_parent(a.out);
  write_png_mask(a.out, mask);
  emit({{"mask", a.out}, {"classes", classes_json(classes)}});
}

struct HitlArgs {
  std::string model, slide, gt, classes, out, pixel_mask, patch_mask;
  int rounds = 5, budget = 200, patch = 32, window = 0, stride = 0, margin = 16;
  bool average = false;
};

RefineOptions refine_options(const Model& model, int patch, int window, int stride, int margin, bool average) {
  RefineOptions o;
  o.patch_size = patch;
  o.window = window > 0 ? window : model.config().image_size;
  o.stride = stride > 0 ? stride : o.window;
  o.box_margin = margin;
  o.average_overlaps = average;
  return o;
}

void run_hitl(const HitlArgs& a) {
  Model model = Model::load(a.model);
  const Image slide = read_png_rgb(a.slide);
  const RasterMask gt = read_png_mask(a.gt);
  const auto classes = a.classes.empty() ? classes_from_mask(gt) : parse_classes(a.classes);
  const RefineOptions options = refine_options(model, a.patch, a.window, a.stride, a.margin, a.average);

  RoundOutput out = initial_round(model, slide, gt, classes, options);
  for (int r = 0; r < a.rounds; ++r) {
    out = refine_round(model, slide, gt, out.state, a.budget, AnnotationSource{&gt, {}}, options);
  }
  ensure_parent(a.out);
  write_text_file(a.out, round_state_to_json(out.state) + "\n");
  if (!a.pixel_mask.empty()) write_png_mask(a.pixel_mask, out.pixel_mask);
  if (!a.patch_mask.empty()) write_png_mask(a.patch_mask, out.patch_mask);
  json log = json::array();
  for (const auto& e : out.state.dice_log) log.push_back({{"round", e.round}, {"pixel_dice", e.pixel_dice}});
  emit({{"state", a.out}, {"round", out.state.round}, {"dice_log", log}});
}

struct ServeArgs {
  std::string model, slide, gt, classes, host = "127.0.0.1";
  int port = 8080, patch = 32, window = 0, stride = 0, margin = 16;
  bool average = false;
};

void run_serve(const ServeArgs& a) {
  Model model = Model::load(a.model);
  Image slide = read_png_rgb(a.slide);
  std::optional<RasterMask> gt;
  if (!a.gt.empty()) gt = read_png_mask(a.gt);
  std::vector<ClassPrompt> classes;
  if (!a.classes.empty()) {
    classes = parse_classes(a.classes);
  } else if (gt) {
    classes = classes_from_mask(*gt);
  } else {
    fail(ErrorKind::Input, "serve: --classes is required without --gt");
  }
  const RefineOptions options = refine_options(model, a.patch, a.window, a.stride, a.margin, a.average);
  HitlSession session(std::move(model), std::move(slide), std::move(gt), classes, options);
  httplib::Server server;
  mount_routes(server, session);
  int port = a.port;
  if (port == 0) {
    port = server.bind_to_any_port(a.host);
    if (port < 0) fail(ErrorKind::Io, "cannot bind " + a.host);
  } else if (!server.bind_to_port(a.host, port)) {
    fail(ErrorKind::Io, "cannot bind " + a.host + ":" + std::to_string(port));
  }
  emit({{"host", a.host}, {"port", port}, {"round", 0}});
  std::cout.flush();
  server.listen_after_bind();
}

struct EvaluateArgs {
  std::string pred, gt, out, classes, records;
  std::size_t resamples = 1000;
  std::uint64_t seed = 0;
};

void run_evaluate(const EvaluateArgs& a) {
  std::vector<fs::path> gt_files;
  for (const auto& entry : fs::directory_iterator(a.gt)) {
    if (entry.path().extension() == ".png") gt_files.push_back(entry.path());
  }
  std::sort(gt_files.begin(), gt_files.end());
  if (gt_files.empty()) fail(ErrorKind::Input, "evaluate: no PNG masks in " + a.gt);

  std::map<int, std::string> names;
  if (!a.classes.empty()) {
    for (const auto& c : parse_classes(a.classes)) names[c.class_index] = c.name;
  }
  std::map<int, std::vector<double>> per_class;
  std::vector<double> per_image;
  std::vector<DiceRecord> records;
  for (const auto& g : gt_files) {
    const fs::path p = fs::path(a.pred) / g.filename();
    if (!fs::exists(p)) fail(ErrorKind::Input, "evaluate: missing prediction " + p.string());
    const RasterMask gt = read_png_mask(g);
    const RasterMask pred = read_png_mask(p);
    std::set<int> present;
    for (int c : gt.present_classes()) present.insert(c);
    for (int c : pred.present_classes()) present.insert(c);
    present.erase(0);
    if (!names.empty()) {
      for (auto it = present.begin(); it != present.end();) it = names.count(*it) ? std::next(it) : present.erase(it);
    }
    if (present.empty()) continue;
    const std::vector<int> cls(present.begin(), present.end());
    const MulticlassDice d = multiclass_dice(pred, gt, cls);
    per_image.push_back(d.mean);
    for (std::size_t k = 0; k < cls.size(); ++k) {
      per_class[cls[k]].push_back(d.per_class[k]);
      const std::string name = names.count(cls[k]) ? names[cls[k]] : "class" + std::to_string(cls[k]);
      records.push_back({g.stem().string(), name, "", "", d.per_class[k]});
    }
  }
  if (per_image.empty()) fail(ErrorKind::Input, "evaluate: no foreground classes in any mask");
  json classes = json::array();
  for (const auto& [c, values] : per_class) {
    classes.push_back({{"index", c},
                       {"name", names.count(c) ? names[c] : "class" + std::to_string(c)},
                       {"images", values.size()},
                       {"dice", ci_json(bootstrap_ci(values, a.resamples, 0.95, a.seed))}});
  }
  const json report{{"images", per_image.size()},
                    {"mean_dice", ci_json(bootstrap_ci(per_image, a.resamples, 0.95, a.seed))},
                    {"classes", classes}};
  ensure_parent(a.out);
  write_text_file(a.out, report.dump(2) + "\n");
  if (!a.records.empty()) write_text_file(a.records, dice_records_to_csv(records));
  emit({{"report", a.out}, {"images", per_image.size()}, {"mean_dice", report["mean_dice"]["mean"]}});
}

struct TisArgs {
  std::string patches, patch_mask, mask, out;
  int patch_size = 32, tumor_class = 1;
};

void run_tis(const TisArgs& a) {
  const RasterMask pixel = read_png_mask(a.mask);
  TISInput input{pixel.width(), pixel.height(), {}, binary_view(pixel, a.tumor_class)};
  if (!a.patches.empty()) {
    // [[x_min, y_min, x_max, y_max], ...], inclusive pixels.
    for (const auto& p : json::parse(read_text_file(a.patches))) {
      const auto v = p.get<std::vector<int>>();
      if (v.size() != 4) fail(ErrorKind::Input, "tis: each patch needs 4 numbers");
      input.patches.push_back({v[0], v[1], v[2], v[3]});
    }
  } else if (!a.patch_mask.empty()) {
    const RasterMask pm = read_png_mask(a.patch_mask);
    if (pm.width() != pixel.width() || pm.height() != pixel.height()) {
      fail(ErrorKind::Dimension, "tis: patch mask and pixel mask sizes differ");
    }
    for (int y = 0; y < pm.height(); y += a.patch_size) {
      for (int x = 0; x < pm.width(); x += a.patch_size) {
        const BBox b{x, y, std::min(x + a.patch_size, pm.width()) - 1, std::min(y + a.patch_size, pm.height()) - 1};
        if (majority_label(pm, b) == a.tumor_class) input.patches.push_back(b);
      }
    }
  } else {
    fail(ErrorKind::Input, "tis: give --patches or --patch-mask");
  }
  const double value = tis(input);
  const json result{{"tis", value}, {"patches", input.patches.size()}};
  if (!a.out.empty()) {
    ensure_parent(a.out);
    write_text_file(a.out, result.dump(2) + "\n");
  }
  emit(result);
}

struct SurvivalArgs {
  std::string cohort, out, km, model = "linear";
  std::uint64_t seed = 0;
};

json split_json(const Cohort& cohort, StratifyBy by) {
  const auto [low, high] = stratify_median(cohort, by);
  const LogRankResult lr = logrank(low, high);
  return {{"low", low.size()}, {"high", high.size()}, {"chi_square", lr.chi_square}, {"p", lr.p}};
}

void run_survival(const SurvivalArgs& a) {
  Cohort cohort = parse_cohort_csv(read_text_file(a.cohort));
  CoxFitOptions options;
  if (a.model == "mlp") {
    options.kind = RiskModelKind::Mlp;
  } else if (a.model != "linear") {
    throw UsageError("--model must be linear or mlp");
  }
  options.seed = a.seed;
  const RiskModel risk = cox_fit(cohort, options);
  for (auto& r : cohort) r.risk = risk(r.tis);
  json report{{"model", a.model},
              {"patients", cohort.size()},
              {"iterations", risk.iterations},
              {"final_loss", risk.final_loss},
              {"c_index", c_index(cohort)},
              {"risk_split", split_json(cohort, StratifyBy::Risk)},
              {"tis_split", split_json(cohort, StratifyBy::Tis)}};
  if (options.kind == RiskModelKind::Linear) report["beta"] = risk.beta;
  ensure_parent(a.out);
  write_text_file(a.out, report.dump(2) + "\n");
  if (!a.km.empty()) {
    std::ostringstream csv;
    csv << std::setprecision(17) << "stratify,group,time,survival,at_risk,events,censored\n";
    for (const auto& [label, by] : {std::pair{"risk", StratifyBy::Risk}, std::pair{"tis", StratifyBy::Tis}}) {
      const auto [low, high] = stratify_median(cohort, by);
      for (const auto& [group, members] : {std::pair{"low", &low}, std::pair{"high", &high}}) {
        if (members->empty()) continue;
        for (const auto& p : km_curve(*members)) {
          csv << label << "," << group << "," << p.time << "," << p.survival << "," << p.at_risk << "," << p.events
              << "," << p.censored << "\n";
        }
      }
    }
    ensure_parent(a.km);
    write_text_file(a.km, csv.str());
  }
  emit({{"report", a.out}, {"c_index", report["c_index"]}, {"risk_p", report["risk_split"]["p"]}});
}

struct OmicsArgs {
  std::string bins, cells, map, out, clusters;
  int k = 0, width = 0, height = 0, hops = 3, neighbors = 6;
  std::uint64_t seed = 0;
};

void run_omics(const OmicsArgs& a) {
  if (a.bins.empty() == a.cells.empty()) throw UsageError("give exactly one of --bins or --cells");
  const ClusterClassMap map = parse_cluster_map(read_text_file(a.map));
  std::vector<Point> coords;
  Matrix features;
  std::vector<BinRecord> bins;
  std::vector<CellRecord> cells;
  if (!a.bins.empty()) {
    bins = parse_bins_csv(read_text_file(a.bins));
    features = features_of(bins);
    for (const auto& b : bins) coords.push_back({b.x, b.y});
  } else {
    cells = parse_cells_json(read_text_file(a.cells));
    features = features_of(cells);
    for (const auto& c : cells) coords.push_back(c.centroid);
  }
  const Matrix z = a.hops > 0 ? neighborhood_embed(features, coords, a.hops, a.neighbors) : features;
  KMeansOptions ko;
  ko.seed = a.seed;
  const ClusterModel model = kmeans(z, a.k, ko);
  const RasterMask mask = bins.empty() ? cells_to_mask(cells, model.assignments, map, a.width, a.height)
                                       : bins_to_mask(bins, model.assignments, map, a.width, a.height);
  ensure_parent(a.out);
  write_png_mask(a.out, mask);
  if (!a.clusters.empty()) {
    std::ostringstream csv;
    csv << "index,cluster\n";
    for (std::size_t i = 0; i < model.assignments.size(); ++i) csv << i << "," << model.assignments[i] << "\n";
    write_text_file(a.clusters, csv.str());
  }
  emit({{"mask", a.out}, {"points", z.size()}, {"objective", model.objective}, {"classes", map.class_names}});
}

struct SynthArgs {
  std::string out;
  std::size_t count = 100, patients = 200;
  int size = 0;
  SlideOptions slide;
  std::uint64_t seed = 0;
};

void run_synth_blobs(const SynthArgs& a) {
  write_blob_corpus(a.out, a.count, a.seed, a.size > 0 ? a.size : 224);
  emit({{"out", a.out}, {"images", a.count}});
}

void run_synth_slide(SynthArgs a) {
  a.slide.seed = a.seed;
  if (a.size > 0) a.slide.size = a.size;
  const SyntheticImage s = synthetic_slide(a.slide);
  const fs::path root(a.out);
  fs::create_directories(root);
  write_png_rgb(root / "slide.png", s.image);
  write_png_mask(root / "gt.png", s.mask);
  std::vector<ClassPrompt> classes;
  for (int k = 0; k < a.slide.classes; ++k) classes.push_back({blob_classes()[k].index, blob_classes()[k].name});
  write_text_file(root / "classes.json", classes_json(classes).dump(2) + "\n");
  emit({{"out", a.out}, {"size", a.slide.size}, {"classes", a.slide.classes}});
}

void run_synth_cohort(const SynthArgs& a) {
  ensure_parent(a.out);
  write_text_file(a.out, cohort_to_csv(synthetic_cohort(a.patients, a.seed)));
  emit({{"out", a.out}, {"patients", a.patients}});
}

int report_error(std::string_view kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Promptable tissue segmentation toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::uint64_t seed_default = 0;
  try {
    seed_default = default_seed();
  } catch (const UsageError& e) {
    return report_error("usage", e.what(), 2);
  }

  RasterizeArgs ra;
  auto* rasterize = app.add_subcommand("rasterize", "Rasterize polygon annotations into a class-index mask");
  rasterize->add_option("--polygons", ra.polygons, "Polygon JSON")->required()->check(CLI::ExistingFile);
  rasterize->add_option("--width", ra.width, "Mask width")->required()->check(CLI::PositiveNumber);
  rasterize->add_option("--height", ra.height, "Mask height")->required()->check(CLI::PositiveNumber);
  rasterize->add_option("--out", ra.out, "Output PNG")->required();
  rasterize->callback([&] { run_rasterize(ra); });

  TileArgs ta;
  auto* tile_cmd = app.add_subcommand("tile", "Cut an image (and mask) into aligned tiles");
  tile_cmd->add_option("--image", ta.image, "RGB PNG")->required()->check(CLI::ExistingFile);
  tile_cmd->add_option("--mask", ta.mask, "Class-index PNG")->check(CLI::ExistingFile);
  tile_cmd->add_option("--size", ta.size, "Tile side")->check(CLI::PositiveNumber);
  tile_cmd->add_option("--stem", ta.stem, "Tile name prefix (default: image stem)");
  tile_cmd->add_option("--classes", ta.classes, "Write classes.json from this class list");
  tile_cmd->add_option("--out", ta.out, "Output corpus root")->required();
  tile_cmd->callback([&] { run_tile(ta); });

  ManifestArgs ma;
  auto* manifest = app.add_subcommand("manifest", "Build a triplet manifest from a corpus directory");
  manifest->add_option("--root", ma.root, "Corpus root")->required()->check(CLI::ExistingDirectory);
  manifest->add_option("--out", ma.out, "Manifest JSONL")->required();
  manifest->callback([&] { run_manifest(ma); });

  SplitArgs sa;
  sa.seed = seed_default;
  auto* split_cmd = app.add_subcommand("split", "Split a manifest by parent image");
  split_cmd->add_option("--manifest", sa.manifest, "Manifest JSONL")->required()->check(CLI::ExistingFile);
  split_cmd->add_option("--frac", sa.fraction, "Train fraction")->check(CLI::Range(0.0, 1.0));
  split_cmd->add_option("--seed", sa.seed, "Shuffle seed");
  split_cmd->add_option("--train", sa.train, "Train manifest (default <manifest>.train.jsonl)");
  split_cmd->add_option("--test", sa.test, "Test manifest (default <manifest>.test.jsonl)");
  split_cmd->callback([&] { run_split(sa); });

  TrainArgs tr;
  tr.seed = seed_default;
  auto* train_cmd = app.add_subcommand("train", "Train the segmentation model");
  train_cmd->add_option("--manifest", tr.manifest, "Training manifest")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
  train_cmd->add_option("--config", tr.config, "Model config JSON")->check(CLI::ExistingFile);
  train_cmd->add_option("--dim", tr.dim, "Override width d");
  train_cmd->add_option("--image-size", tr.image, "Override image size");
  train_cmd->add_option("--patch-size", tr.patch, "Override patch size");
  train_cmd->add_option("--depth", tr.depth, "Override fusion depth L");
  train_cmd->add_option("--epochs", tr.epochs, "Epochs")->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch", tr.batch, "Batch size")->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", tr.lr, "AdamW learning rate");
  train_cmd->add_option("--weight-decay", tr.weight_decay, "AdamW weight decay");
  train_cmd->add_option("--box-dropout", tr.dropout, "Probability of training without a box")->check(CLI::Range(0.0, 1.0));
  train_cmd->add_option("--box-jitter", tr.jitter, "Box jitter as a fraction of its side");
  train_cmd->add_option("--seed", tr.seed, "Seed for init, shuffling and crops");
  train_cmd->add_option("--loss", tr.loss, "Write per-step loss CSV");
  train_cmd->callback([&] { run_train(tr); });

  SegmentArgs se;
  auto* segment = app.add_subcommand("segment", "Multiclass segmentation of one image");
  segment->add_option("--model", se.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  segment->add_option("--image", se.image, "RGB PNG")->required()->check(CLI::ExistingFile);
  segment->add_option("--classes", se.classes, "classes.json or list like 1:tumor,2:stroma")->required();
  segment->add_option("--boxes", se.boxes, "JSON {class name: [x0, y0, x1, y1]}")->check(CLI::ExistingFile);
  segment->add_option("--out", se.out, "Output mask PNG")->required();
  segment->callback([&] { run_segment(se); });

  HitlArgs ha;
  auto* hitl = app.add_subcommand("hitl", "Oracle-driven refinement rounds on a slide");
  hitl->add_option("--model", ha.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  hitl->add_option("--slide", ha.slide, "Slide PNG")->required()->check(CLI::ExistingFile);
  hitl->add_option("--gt", ha.gt, "Ground-truth mask PNG (oracle)")->required()->check(CLI::ExistingFile);
  hitl->add_option("--classes", ha.classes, "Class list (default: classes present in --gt)");
  hitl->add_option("--rounds", ha.rounds, "Refinement rounds")->check(CLI::NonNegativeNumber);
  hitl->add_option("--budget", ha.budget, "Patches annotated per round")->check(CLI::PositiveNumber);
  hitl->add_option("--patch-size", ha.patch, "Patch side")->check(CLI::PositiveNumber);
  hitl->add_option("--window", ha.window, "Window side (default: model image size)");
  hitl->add_option("--stride", ha.stride, "Window stride (default: window)");
  hitl->add_option("--box-margin", ha.margin, "Pixels added around derived boxes");
  hitl->add_flag("--average-overlaps", ha.average, "Average probabilities where windows overlap");
  hitl->add_option("--out", ha.out, "RoundState JSON")->required();
  hitl->add_option("--pixel-mask", ha.pixel_mask, "Write the final pixel mask PNG");
  hitl->add_option("--patch-mask", ha.patch_mask, "Write the final patch mask PNG");
  hitl->callback([&] { run_hitl(ha); });

  ServeArgs sv;
  auto* serve = app.add_subcommand("serve", "HTTP service for interactive refinement");
  serve->add_option("--model", sv.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  serve->add_option("--slide", sv.slide, "Slide PNG")->required()->check(CLI::ExistingFile);
  serve->add_option("--gt", sv.gt, "Optional ground truth for the Dice log")->check(CLI::ExistingFile);
  serve->add_option("--classes", sv.classes, "Class list");
  serve->add_option("--host", sv.host, "Bind address");
  serve->add_option("--port", sv.port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535));
  serve->add_option("--patch-size", sv.patch, "Patch side")->check(CLI::PositiveNumber);
  serve->add_option("--window", sv.window, "Window side (default: model image size)");
  serve->add_option("--stride", sv.stride, "Window stride (default: window)");
  serve->add_option("--box-margin", sv.margin, "Pixels added around derived boxes");
  serve->add_flag("--average-overlaps", sv.average, "Average probabilities where windows overlap");
  serve->callback([&] { run_serve(sv); });

  EvaluateArgs ev;
  ev.seed = seed_default;
  auto* evaluate = app.add_subcommand("evaluate", "Per-class Dice of predicted masks against ground truth");
  evaluate->add_option("--pred", ev.pred, "Prediction mask directory")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--gt", ev.gt, "Ground-truth mask directory")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--classes", ev.classes, "Restrict and name classes");
  evaluate->add_option("--resamples", ev.resamples, "Bootstrap resamples")->check(CLI::PositiveNumber);
  evaluate->add_option("--seed", ev.seed, "Bootstrap seed");
  evaluate->add_option("--records", ev.records, "Write per-image Dice records CSV");
  evaluate->add_option("--out", ev.out, "Report JSON")->required();
  evaluate->callback([&] { run_evaluate(ev); });

  TisArgs ti;
  auto* tis_cmd = app.add_subcommand("tis", "Tumor Interaction Score of a slide");
  tis_cmd->add_option("--mask", ti.mask, "Pixel-level mask PNG")->required()->check(CLI::ExistingFile);
  tis_cmd->add_option("--patches", ti.patches, "Tumor patches JSON [[x0, y0, x1, y1], ...]")->check(CLI::ExistingFile);
  tis_cmd->add_option("--patch-mask", ti.patch_mask, "Patch-level mask PNG")->check(CLI::ExistingFile);
  tis_cmd->add_option("--patch-size", ti.patch_size, "Patch side for --patch-mask")->check(CLI::PositiveNumber);
  tis_cmd->add_option("--tumor-class", ti.tumor_class, "Tumor class index");
  tis_cmd->add_option("--out", ti.out, "Result JSON");
  tis_cmd->callback([&] { run_tis(ti); });

  SurvivalArgs su;
  su.seed = seed_default;
  auto* survival = app.add_subcommand("survival", "Cox risk model, C-index and median-split log-rank tests");
  survival->add_option("--cohort", su.cohort, "Cohort CSV")->required()->check(CLI::ExistingFile);
  survival->add_option("--model", su.model, "linear or mlp");
  survival->add_option("--seed", su.seed, "Seed for the MLP initialization");
  survival->add_option("--km", su.km, "Write Kaplan-Meier step CSV");
  survival->add_option("--out", su.out, "Report JSON")->required();
  survival->callback([&] { run_survival(su); });

  OmicsArgs om;
  om.seed = seed_default;
  auto* omics = app.add_subcommand("omics", "Spatial expression clusters to a segmentation mask");
  omics->add_option("--bins", om.bins, "Bin CSV")->check(CLI::ExistingFile);
  omics->add_option("--cells", om.cells, "Cell JSON")->check(CLI::ExistingFile);
  omics->add_option("--map", om.map, "Cluster to class JSON")->required()->check(CLI::ExistingFile);
  omics->add_option("--k", om.k, "Cluster count")->required()->check(CLI::PositiveNumber);
  omics->add_option("--width", om.width, "Mask width")->required()->check(CLI::PositiveNumber);
  omics->add_option("--height", om.height, "Mask height")->required()->check(CLI::PositiveNumber);
  omics->add_option("--hops", om.hops, "Neighbourhood hops (0 disables pooling)")->check(CLI::NonNegativeNumber);
  omics->add_option("--neighbors", om.neighbors, "k of the neighbour graph")->check(CLI::PositiveNumber);
  omics->add_option("--seed", om.seed, "k-means seed");
  omics->add_option("--clusters", om.clusters, "Write cluster assignments CSV");
  omics->add_option("--out", om.out, "Output mask PNG")->required();
  omics->callback([&] { run_omics(om); });

  SynthArgs sy;
  sy.seed = seed_default;
  auto* synth = app.add_subcommand("synth", "Generate synthetic data");
  synth->require_subcommand(1);
  auto* blobs = synth->add_subcommand("blobs", "Coloured-blob corpus in the manifest layout");
  blobs->add_option("--out", sy.out, "Corpus root")->required();
  blobs->add_option("--count", sy.count, "Images")->check(CLI::PositiveNumber);
  blobs->add_option("--size", sy.size, "Image side (default 224)");
  blobs->add_option("--seed", sy.seed, "Seed");
  blobs->callback([&] { run_synth_blobs(sy); });
  auto* slide = synth->add_subcommand("slide", "Large slide with ground truth for refinement");
  slide->add_option("--out", sy.out, "Output directory")->required();
  slide->add_option("--size", sy.size, "Slide side (default 2048)");
  slide->add_option("--classes", sy.slide.classes, "Class count")->check(CLI::Range(1, 4));
  slide->add_option("--regions", sy.slide.regions, "Blob count")->check(CLI::PositiveNumber);
  slide->add_option("--stain-shift", sy.slide.stain_shift, "Palette shift in [0, 1]")->check(CLI::Range(0.0, 1.0));
  slide->add_option("--seed", sy.seed, "Seed");
  slide->callback([&] { run_synth_slide(sy); });
  auto* cohort = synth->add_subcommand("cohort", "Survival cohort CSV");
  cohort->add_option("--out", sy.out, "Cohort CSV")->required();
  cohort->add_option("--patients", sy.patients, "Patients")->check(CLI::PositiveNumber);
  cohort->add_option("--seed", sy.seed, "Seed");
  cohort->callback([&] { run_synth_cohort(sy); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), 2);
  } catch (const UsageError& e) {
    return report_error("usage", e.what(), 2);
  } catch (const Error& e) {
    return report_error(to_string(e.kind()), e.what(), 1);
  } catch (const nlohmann::json::exception& e) {
    return report_error("input", e.what(), 1);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), 1);
  }
  return 0;
}
