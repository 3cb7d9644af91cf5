#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "tseg/error.hpp"
#include "tseg/log.hpp"
#include "tseg/metrics.hpp"
#include "tseg/model.hpp"
#include "tseg/rng.hpp"
#include "tseg/synth.hpp"

using namespace tseg;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 64;
  c.patch_size = 32;
  c.dim = 16;
  c.fusion_depth = 1;
  c.encoder_depth = 1;
  c.vocab_size = 256;
  c.seed = 3;
  return c;
}

Image solid(int size, std::uint8_t v) {
  Image img(size, size);
  std::fill(img.rgb.begin(), img.rgb.end(), v);
  return img;
}

Image noisy(int size, std::uint64_t seed) {
  Rng rng(seed);
  Image img(size, size);
  for (auto& b : img.rgb) b = static_cast<std::uint8_t>(rng.index(256));
  return img;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

std::vector<double> row(const Tensor& t, std::size_t r) {
  const std::size_t d = t.dim(1);
  return {t.data().begin() + r * d, t.data().begin() + (r + 1) * d};
}

}  // namespace

TEST_CASE("config validation and JSON round trip") {
  ModelConfig c;
  CHECK(c.decoder_channels() == std::vector<int>{512, 256, 128, 64, 32});
  CHECK(c.upsample_factors() == std::vector<int>{2, 2, 2, 4});
  CHECK(c.grid() == 7);
  c.seed = 17;
  c.dim = 64;
  const ModelConfig back = config_from_json(config_to_json(c));
  CHECK(back.dim == 64);
  CHECK(back.seed == 17);
  CHECK(config_to_json(back) == config_to_json(c));

  ModelConfig bad;
  bad.image_size = 225;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = ModelConfig{};
  bad.patch_size = 20;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = ModelConfig{};
  bad.dim = 40;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(config_from_json(R"({"dim": 64, "colour": 1})"), Error);
}

TEST_CASE("default configuration shape contract") {
  Model model(ModelConfig{});
  NoGradGuard guard;
  const Tensor img = image_to_tensor(noisy(224, 1));
  const Tensor v = model.encode_image(img);
  CHECK(v.shape() == Shape{49, 512});
  const Tensor t = model.encode_text("an image of tumor");
  CHECK(t.shape() == Shape{77, 512});
  const Tensor p = model.encode_box({0.1, 0.2, 0.6, 0.9});
  CHECK(p.shape() == Shape{2, 512});
  const Tensor f = model.fuse(v, t, p);
  CHECK(f.shape() == Shape{512, 7, 7});

  DecodeTrace trace;
  const Tensor logits = model.decode(f, false, &trace);
  REQUIRE(trace.shapes.size() == 6);
  CHECK(trace.shapes[0] == Shape{512, 7, 7});
  CHECK(trace.shapes[1] == Shape{256, 14, 14});
  CHECK(trace.shapes[2] == Shape{128, 28, 28});
  CHECK(trace.shapes[3] == Shape{64, 56, 56});
  CHECK(trace.shapes[4] == Shape{32, 224, 224});
  CHECK(trace.shapes[5] == Shape{2, 224, 224});
  CHECK(logits.shape() == Shape{2, 224, 224});
}

TEST_CASE("image encoder") {
  Model model(tiny_config());
  NoGradGuard guard;
  const Tensor a = model.encode_image(image_to_tensor(noisy(64, 5)));
  const Tensor b = model.encode_image(image_to_tensor(noisy(64, 5)));
  CHECK(a.shape() == Shape{4, 16});
  CHECK(values(a) == values(b));
  const Tensor black = model.encode_image(image_to_tensor(solid(64, 0)));
  const Tensor white = model.encode_image(image_to_tensor(solid(64, 255)));
  CHECK(max_abs_diff(black, white) > 1e-3);
  CHECK_THROWS_AS(model.encode_image(image_to_tensor(noisy(32, 1))), Error);
}

TEST_CASE("text encoder") {
  Model model(tiny_config());
  NoGradGuard guard;
  const Tensor a = model.encode_text("an image of tumor");
  const Tensor b = model.encode_text("an image of tumor");
  CHECK(a.shape() == Shape{77, 16});
  CHECK(values(a) == values(b));

  const Tensor c = model.encode_text("an image of stroma");
  CHECK(row(a, 3) != row(c, 3));
  for (std::size_t r : {0u, 1u, 2u, 4u, 76u}) CHECK(row(a, r) == row(c, r));
  // Padding rows are exactly zero.
  for (double x : row(a, 10)) CHECK(x == 0.0);

  // Class names used by the synthetic corpora hash to distinct rows.
  std::set<std::vector<double>> distinct;
  for (const auto& cls : blob_classes()) distinct.insert(row(model.encode_text("an image of " + cls.name), 3));
  CHECK(distinct.size() == blob_classes().size());

  CHECK(tokenize("  an  image of\tnecrosis ") == std::vector<std::string>{"an", "image", "of", "necrosis"});
  std::string long_prompt;
  for (int i = 0; i < 100; ++i) long_prompt += "w" + std::to_string(i) + " ";
  CHECK(model.encode_text(long_prompt).shape() == Shape{77, 16});
}

TEST_CASE("box encoder") {
  Model model(tiny_config());
  NoGradGuard guard;
  const Tensor full = model.encode_box({0.0, 0.0, 1.0, 1.0});
  CHECK(full.shape() == Shape{2, 16});
  CHECK(values(full) == values(model.encode_box({0.0, 0.0, 1.0, 1.0})));
  // Regression lock for the seeded full-image box embedding.
  CHECK(full.at(0) == doctest::Approx(0.48180395953908095).epsilon(1e-12));
  CHECK(full.at(17) == doctest::Approx(1.0617519920397616).epsilon(1e-12));
  CHECK(full.at(31) == doctest::Approx(-0.64294732123493437).epsilon(1e-12));

  const Tensor moved = model.encode_box({0.1, 0.1, 0.6, 0.6});
  const Tensor base = model.encode_box({0.0, 0.0, 0.5, 0.5});
  CHECK(row(moved, 0) != row(base, 0));
  CHECK(row(moved, 1) != row(base, 1));

  WarningCapture capture;
  const Tensor clamped = model.encode_box({-0.5, 0.0, 1.5, 1.0});
  CHECK(capture.count() == 1);
  CHECK(values(clamped) == values(full));

  const BoxPrompt bp = BoxPrompt::from_bbox({10, 20, 29, 63}, 64, 64);
  CHECK(bp.x0 == doctest::Approx(10.0 / 64));
  CHECK(bp.y0 == doctest::Approx(20.0 / 64));
  CHECK(bp.x1 == doctest::Approx(30.0 / 64));
  CHECK(bp.y1 == doctest::Approx(1.0));
}

TEST_CASE("fusion") {
  Model model(tiny_config());
  NoGradGuard guard;
  const Tensor v1 = model.encode_image(image_to_tensor(noisy(64, 1)));
  const Tensor v2 = model.encode_image(image_to_tensor(noisy(64, 2)));
  const Tensor t = model.encode_text("an image of tumor");

  SUBCASE("repeated prompt token broadcasts its value") {
    const Tensor box = model.encode_box({0.2, 0.3, 0.7, 0.8});
    std::vector<double> twice = row(box, 0);
    const auto first = row(box, 0);
    twice.insert(twice.end(), first.begin(), first.end());
    const Tensor p = Tensor::from({2, 16}, twice);
    const FusionStages s1 = model.fuse_stages(v1, t, p);
    const FusionStages s2 = model.fuse_stages(v2, t, p);
    const auto ref = row(s1.prompt_attention, 0);
    for (std::size_t r = 0; r < 4; ++r) {
      const auto a = row(s1.prompt_attention, r);
      const auto b = row(s2.prompt_attention, r);
      for (std::size_t j = 0; j < 16; ++j) {
        CHECK(a[j] == doctest::Approx(ref[j]).epsilon(1e-12));
        CHECK(b[j] == doctest::Approx(ref[j]).epsilon(1e-12));
      }
    }
    CHECK(max_abs_diff(s1.prompt, add(s1.text, s1.prompt_attention)) < 1e-15);
  }

  SUBCASE("no box skips the prompt stage") {
    const FusionStages s = model.fuse_stages(v1, t, std::nullopt);
    CHECK_FALSE(s.prompt_attention.defined());
    CHECK(values(s.prompt) == values(s.text));
    const Tensor f = model.fuse(v1, t, std::nullopt);
    CHECK(f.shape() == Shape{16, 2, 2});
    CHECK(values(f) == values(model.fuse(v1, t, std::nullopt)));
  }

  SUBCASE("box changes the output") {
    const Tensor a = model.fuse(v1, t, model.encode_box({0.0, 0.0, 0.5, 0.5}));
    const Tensor b = model.fuse(v1, t, model.encode_box({0.5, 0.5, 1.0, 1.0}));
    CHECK(max_abs_diff(a, b) > 1e-6);
  }

  SUBCASE("width mismatch is rejected") {
    CHECK_THROWS_AS(model.fuse(v1, Tensor::zeros({77, 8}), std::nullopt), Error);
  }
}

TEST_CASE("decoder") {
  Model model(tiny_config());

  SUBCASE("zero conv weights give a spatially constant map") {
    for (auto& [name, p] : model.trainable_parameters())
      if (name.rfind("decoder.", 0) == 0 && name.find(".conv.weight") != std::string::npos)
        std::fill(p.mutable_data().begin(), p.mutable_data().end(), 0.0);
    NoGradGuard guard;
    Rng rng(4);
    std::vector<double> fv(16 * 2 * 2);
    for (double& x : fv) x = rng.normal();
    const Tensor logits = model.decode(Tensor::from({16, 2, 2}, fv), false);
    CHECK(logits.shape() == Shape{2, 64, 64});
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 64 * 64; ++i)
        CHECK(logits.at(c * 4096 + i) == doctest::Approx(logits.at(c * 4096)).epsilon(1e-12));
  }

  SUBCASE("gradient reaches F_final") {
    Rng rng(5);
    std::vector<double> fv(2 * 16 * 2 * 2);
    for (double& x : fv) x = rng.normal();
    const Tensor f = Tensor::from({2, 16, 2, 2}, fv, true);
    const Tensor logits = model.decode(f, true);
    CHECK(logits.shape() == Shape{2, 2, 64, 64});
    std::vector<std::uint8_t> labels(2 * 64 * 64);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = (i / 64) % 3 == 0;
    softmax_cross_entropy(logits, labels).backward();
    double norm = 0.0;
    for (double g : f.grad()) norm += g * g;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("full model gradient check on the tiny configuration") {
  Model model(tiny_config());
  const Tensor a = image_to_tensor(noisy(64, 11));
  const Tensor b = image_to_tensor(noisy(64, 12));
  std::vector<std::uint8_t> labels(2 * 64 * 64);
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) labels[(n * 64 + y) * 64 + x] = (x + n * 9 > 30) && (y > 12);
  const std::vector<std::optional<BoxPrompt>> boxes{BoxPrompt{0.4, 0.2, 1.0, 1.0}, std::nullopt};
  auto loss = [&] {
    return softmax_cross_entropy(model.forward_batch({a, b}, {"an image of tumor", "an image of stroma"}, boxes, true),
                                 labels);
  };
  std::vector<Tensor> params;
  for (auto& [name, p] : model.trainable_parameters()) params.push_back(p);
  GradCheckOptions options;
  options.eps = 1e-5;
  options.max_coordinates = 64;
  options.seed = 9;
  const GradCheckResult r = grad_check_params(loss, params, options);
  CHECK(r.coordinates_checked > 2000);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("forward determinism and output size") {
  Model model(tiny_config());
  const Image img = noisy(64, 8);
  const auto p1 = model.foreground(img, "an image of tumor", BoxPrompt{0.1, 0.1, 0.5, 0.5});
  const auto p2 = model.foreground(img, "an image of tumor", BoxPrompt{0.1, 0.1, 0.5, 0.5});
  CHECK(p1.size() == 64u * 64u);
  CHECK(p1 == p2);
  for (double p : p1) CHECK((p >= 0.0 && p <= 1.0));
}

TEST_CASE("combining class probabilities") {
  const int w = 3, h = 1;
  SUBCASE("single confident class fills the image") {
    const RasterMask m = combine_class_probabilities({{0.9, 0.8, 0.51}}, {2}, w, h);
    CHECK(m.labels() == std::vector<std::uint8_t>{2, 2, 2});
  }
  SUBCASE("highest probability wins") {
    const RasterMask m = combine_class_probabilities({{0.6, 0.9, 0.2}, {0.9, 0.6, 0.3}}, {1, 2}, w, h);
    CHECK(m.labels() == std::vector<std::uint8_t>{2, 1, 0});
  }
  SUBCASE("everything below threshold is background") {
    const RasterMask m = combine_class_probabilities({{0.4, 0.49, 0.0}, {0.3, 0.1, 0.2}}, {1, 2}, w, h);
    CHECK(m.labels() == std::vector<std::uint8_t>{0, 0, 0});
  }
  SUBCASE("ties go to the lowest class index") {
    const RasterMask m = combine_class_probabilities({{0.7, 0.7, 0.7}, {0.7, 0.7, 0.7}}, {3, 1}, w, h);
    CHECK(m.labels() == std::vector<std::uint8_t>{1, 1, 1});
  }
  CHECK_THROWS_AS(combine_class_probabilities({{0.1}}, {1}, w, h), Error);
}

TEST_CASE("training") {
  SUBCASE("empty training set") {
    Model model(tiny_config());
    CHECK_THROWS_AS(train(model, {}, TrainConfig{}), Error);
  }

  SUBCASE("balanced random labels start near ln 2") {
    Model model(tiny_config());
    Rng rng(21);
    std::vector<TrainingSample> samples;
    for (int i = 0; i < 8; ++i) {
      std::vector<std::uint8_t> mask(64 * 64);
      for (auto& m : mask) m = rng.uniform() < 0.5;
      samples.push_back({std::make_shared<Image>(noisy(64, 100 + i)), mask, "an image of tumor"});
    }
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 4;
    const TrainResult r = train(model, samples, tc);
    REQUIRE(r.epoch_loss.size() == 1);
    CHECK(std::abs(r.epoch_loss[0] - std::log(2.0)) < 0.1);
  }

  SUBCASE("frozen tensors do not move, trainable ones do") {
    Model model(tiny_config());
    std::vector<std::vector<double>> frozen_before, trainable_before;
    for (auto& [n, t] : model.frozen_tensors()) frozen_before.push_back(values(t));
    for (auto& [n, t] : model.trainable_parameters()) trainable_before.push_back(values(t));
    CHECK(model.parameter_count() > 0);

    const auto corpus = blob_corpus(4, 1, 64);
    std::vector<TrainingSample> samples;
    for (const auto& s : corpus)
      samples.push_back({std::make_shared<Image>(s.image), binary_view(s.mask, s.mask.present_classes().back()),
                         "an image of tumor"});
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 2;
    tc.optimizer.learning_rate = 1e-3;
    train(model, samples, tc);

    std::size_t i = 0;
    for (auto& [n, t] : model.frozen_tensors()) CHECK(values(t) == frozen_before[i++]);
    i = 0;
    std::size_t changed = 0;
    for (auto& [n, t] : model.trainable_parameters()) changed += values(t) != trainable_before[i++];
    CHECK(changed == trainable_before.size());
  }

  SUBCASE("single sample overfit") {
    ModelConfig c = tiny_config();
    c.patch_size = 16;
    c.dim = 32;
    Model model(c);
    std::vector<std::uint8_t> mask(64 * 64);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) mask[y * 64 + x] = (x - 30) * (x - 30) + (y - 26) * (y - 26) < 300;
    Image img = noisy(64, 3);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (mask[y * 64 + x]) img.pixel(x, y)[0] = 255;
    const std::vector<TrainingSample> samples{{std::make_shared<Image>(img), mask, "an image of tumor"}};
    TrainConfig tc;
    tc.epochs = 300;
    tc.batch_size = 1;
    tc.box_dropout = 1.0;
    tc.optimizer.learning_rate = 3e-3;
    tc.optimizer.weight_decay = 0.0;
    const TrainResult r = train(model, samples, tc);
    CHECK(r.step_loss.back() < r.step_loss.front());
    // Evaluation uses running BatchNorm statistics, which match the batch
    // statistics of the single training image after enough steps.
    const auto prob = model.foreground(img, "an image of tumor", std::nullopt);
    std::vector<std::uint8_t> pred(prob.size());
    for (std::size_t k = 0; k < prob.size(); ++k) pred[k] = prob[k] >= 0.5;
    CHECK(dice(pred, mask) > 0.99);
  }
}

TEST_CASE("checkpoint round trip") {
  Model model(tiny_config());
  const auto path = std::filesystem::temp_directory_path() / "tseg_test_model.ckpt";
  model.save(path);
  Model loaded = Model::load(path);
  CHECK(config_to_json(loaded.config()) == config_to_json(model.config()));
  const Image img = noisy(64, 30);
  CHECK(loaded.foreground(img, "an image of stroma", std::nullopt) ==
        model.foreground(img, "an image of stroma", std::nullopt));

  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACKPT";
  }
  CHECK_THROWS_AS(Model::load(path), Error);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(Model::load(path), Error);
}

TEST_CASE("multiclass segmentation interface") {
  Model model(tiny_config());
  const Image img = noisy(64, 40);
  const RasterMask m = segment_multiclass(model, img, {{1, "tumor"}, {2, "stroma"}});
  CHECK(m.width() == 64);
  CHECK(m.height() == 64);
  for (auto v : m.labels()) CHECK((v == 0 || v == 1 || v == 2));
  CHECK_THROWS_AS(segment_multiclass(model, img, {}), Error);
  CHECK_THROWS_AS(segment_multiclass(model, img, {{1, "tumor"}}, {std::nullopt, std::nullopt}), Error);
}
