#include "tseg/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "tseg/error.hpp"
#include "tseg/log.hpp"
#include "tseg/rng.hpp"

namespace tseg {

using json = nlohmann::json;

std::vector<int> ModelConfig::decoder_channels() const {
  return {dim, dim / 2, dim / 4, dim / 8, dim / 16};
}

std::vector<int> ModelConfig::upsample_factors() const { return {2, 2, 2, patch_size / 8}; }

void ModelConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::Config, "model config: " + what);
  };
  check(image_size > 0 && patch_size > 0, "sizes must be positive");
  check(image_size % patch_size == 0, "image size must be divisible by patch size");
  check(patch_size % 8 == 0, "patch size must be divisible by 8");
  check(dim >= 16 && dim % 16 == 0, "dim must be a positive multiple of 16");
  check(text_length > 0, "text length must be positive");
  check(fusion_depth >= 0 && encoder_depth >= 0, "depths must be non-negative");
  check(ffn_multiplier > 0, "ffn multiplier must be positive");
  check(vocab_size >= 2, "vocab size must be at least 2");
  check(fourier_scale > 0.0, "fourier scale must be positive");
}

std::string config_to_json(const ModelConfig& c) {
  json j = {{"image_size", c.image_size},       {"patch_size", c.patch_size},
            {"dim", c.dim},                     {"text_length", c.text_length},
            {"fusion_depth", c.fusion_depth},   {"encoder_depth", c.encoder_depth},
            {"ffn_multiplier", c.ffn_multiplier}, {"vocab_size", c.vocab_size},
            {"fourier_scale", c.fourier_scale}, {"seed", c.seed}};
  return j.dump(2);
}

ModelConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("model config: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::Config, "model config: expected an object");
  ModelConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "image_size") c.image_size = value.get<int>();
      else if (key == "patch_size") c.patch_size = value.get<int>();
      else if (key == "dim") c.dim = value.get<int>();
      else if (key == "text_length") c.text_length = value.get<int>();
      else if (key == "fusion_depth") c.fusion_depth = value.get<int>();
      else if (key == "encoder_depth") c.encoder_depth = value.get<int>();
      else if (key == "ffn_multiplier") c.ffn_multiplier = value.get<int>();
      else if (key == "vocab_size") c.vocab_size = value.get<int>();
      else if (key == "fourier_scale") c.fourier_scale = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else fail(ErrorKind::Config, "model config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

BoxPrompt BoxPrompt::from_bbox(const BBox& box, int width, int height) {
  if (width <= 0 || height <= 0) fail(ErrorKind::Geometry, "box prompt: empty image");
  return {static_cast<double>(box.x_min) / width, static_cast<double>(box.y_min) / height,
          static_cast<double>(box.x_max + 1) / width, static_cast<double>(box.y_max + 1) / height};
}

std::vector<std::string> tokenize(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> tokens;
  std::string token;
  while (in >> token) tokens.push_back(token);
  return tokens;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const auto d = static_cast<std::size_t>(config_.dim);
  const auto n = static_cast<std::size_t>(config_.tokens());
  const auto patch_in = static_cast<std::size_t>(3 * config_.patch_size * config_.patch_size);
  const auto ffn = d * static_cast<std::size_t>(config_.ffn_multiplier);

  patch_embed_ = LinearParams::init(patch_in, d, rng);
  position_ = normal_tensor({n, d}, 0.02, rng, true);
  for (int i = 0; i < config_.encoder_depth; ++i) encoder_.push_back(TransformerLayerParams::init(d, ffn, rng));
  visual_projection_ = normal_tensor({d, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng, true);

  const auto vocab = static_cast<std::size_t>(config_.vocab_size);
  token_table_ = normal_tensor({vocab, d}, 1.0, rng, false);
  std::fill_n(token_table_.mutable_data().begin(), d, 0.0);  // padding row
  text_projection_ = normal_tensor({d, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng, true);

  fourier_matrix_ = normal_tensor({2, d / 2}, config_.fourier_scale, rng, false);
  corner_embedding_ = normal_tensor({2, d}, 1.0, rng, false);

  text_attention_ = AttentionParams::init(d, rng);
  prompt_attention_ = AttentionParams::init(d, rng);
  for (int i = 0; i < config_.fusion_depth; ++i) fusion_.push_back(TransformerLayerParams::init(d, ffn, rng));

  const auto channels = config_.decoder_channels();
  for (std::size_t i = 0; i + 1 < channels.size(); ++i) {
    decoder_.push_back(ConvBnReluParams::init(static_cast<std::size_t>(channels[i]),
                                              static_cast<std::size_t>(channels[i + 1]), rng));
  }
  const auto last = static_cast<std::size_t>(channels.back());
  head_weight_ = normal_tensor({2, last, 1, 1}, 1.0 / std::sqrt(static_cast<double>(last)), rng, true);
  head_bias_ = Tensor::zeros({2}, true);
}

Tensor Model::encode_image(const Tensor& image) const {
  const auto s = static_cast<std::size_t>(config_.image_size);
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != s || image.dim(2) != s) {
    fail(ErrorKind::Config, "encode_image: expected [3, " + std::to_string(s) + ", " + std::to_string(s) +
                                "], got " + shape_str(image.shape()));
  }
  Tensor x = add(patch_embed_(patchify(image, static_cast<std::size_t>(config_.patch_size))), position_);
  for (const auto& layer : encoder_) x = transformer_encoder_layer(x, layer);
  return matmul(x, visual_projection_);
}

Tensor Model::token_embeddings(const std::string& prompt) const {
  const auto tokens = tokenize(prompt);
  if (tokens.empty()) fail(ErrorKind::Input, "encode_text: prompt is empty after tokenization (pad-only sequence)");
  const auto d = static_cast<std::size_t>(config_.dim);
  const auto length = static_cast<std::size_t>(config_.text_length);
  std::vector<double> rows(length * d, 0.0);
  const auto table = token_table_.data();
  const std::uint64_t buckets = static_cast<std::uint64_t>(config_.vocab_size - 1);
  for (std::size_t i = 0; i < std::min(length, tokens.size()); ++i) {
    const std::size_t row = 1 + static_cast<std::size_t>(fnv1a(tokens[i]) % buckets);
    std::copy_n(table.begin() + static_cast<std::ptrdiff_t>(row * d), d, rows.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return Tensor::from({length, d}, std::move(rows));
}

Tensor Model::encode_text(const std::string& prompt) const {
  return matmul(token_embeddings(prompt), text_projection_);
}

Tensor Model::fourier(double x, double y) const {
  const auto half = static_cast<std::size_t>(config_.dim / 2);
  const auto g = fourier_matrix_.data();
  const double cx = 2.0 * x - 1.0;
  const double cy = 2.0 * y - 1.0;
  std::vector<double> out(2 * half);
  for (std::size_t j = 0; j < half; ++j) {
    const double angle = 2.0 * std::numbers::pi * (cx * g[j] + cy * g[half + j]);
    out[j] = std::sin(angle);
    out[half + j] = std::cos(angle);
  }
  return Tensor::from({2 * half}, std::move(out));
}

Tensor Model::encode_box(const BoxPrompt& box) const {
  double c[4] = {box.x0, box.y0, box.x1, box.y1};
  bool clamped = false;
  for (double& v : c) {
    if (!std::isfinite(v)) fail(ErrorKind::Geometry, "encode_box: non-finite corner");
    if (v < 0.0 || v > 1.0) {
      v = std::clamp(v, 0.0, 1.0);
      clamped = true;
    }
  }
  if (clamped) log_warning("encode_box: box corners outside [0, 1] were clamped");
  const auto d = static_cast<std::size_t>(config_.dim);
  const auto corner = corner_embedding_.data();
  std::vector<double> out(2 * d);
  const Tensor tl = fourier(c[0], c[1]);
  const Tensor br = fourier(c[2], c[3]);
  for (std::size_t j = 0; j < d; ++j) {
    out[j] = tl.at(j) + corner[j];
    out[d + j] = br.at(j) + corner[d + j];
  }
  return Tensor::from({2, d}, std::move(out));
}

FusionStages Model::fuse_stages(const Tensor& v, const Tensor& t, const std::optional<Tensor>& p) const {
  const auto d = static_cast<std::size_t>(config_.dim);
  auto expect = [&](const Tensor& x, std::size_t rows, const char* what) {
    if (x.rank() != 2 || x.dim(0) != rows || x.dim(1) != d) {
      fail(ErrorKind::Dimension, std::string("fuse: ") + what + " has shape " + shape_str(x.shape()));
    }
  };
  expect(v, static_cast<std::size_t>(config_.tokens()), "V");
  expect(t, static_cast<std::size_t>(config_.text_length), "T");
  FusionStages out;
  out.text_attention = text_attention_(v, t);
  out.text = add(v, out.text_attention);
  if (p) {
    expect(*p, 2, "P");
    out.prompt_attention = prompt_attention_(out.text, *p);
    out.prompt = add(out.text, out.prompt_attention);
  } else {
    out.prompt = out.text;
  }
  return out;
}

Tensor Model::fuse(const Tensor& v, const Tensor& t, const std::optional<Tensor>& p) const {
  const auto d = static_cast<std::size_t>(config_.dim);
  Tensor f = fuse_stages(v, t, p).prompt;
  for (const auto& layer : fusion_) f = transformer_encoder_layer(f, layer);
  const auto g = static_cast<std::size_t>(config_.grid());
  return reshape(transpose(f), {d, g, g});
}

Tensor Model::decode(const Tensor& f, bool training, DecodeTrace* trace) {
  const auto d = static_cast<std::size_t>(config_.dim);
  const auto g = static_cast<std::size_t>(config_.grid());
  const bool batched = f.rank() == 4;
  const Shape& s = f.shape();
  const bool ok = batched ? (s[1] == d && s[2] == g && s[3] == g) : (f.rank() == 3 && s[0] == d && s[1] == g && s[2] == g);
  if (!ok) fail(ErrorKind::Dimension, "decode: F_final has shape " + shape_str(s));
  if (trace) trace->shapes = {s};
  const auto factors = config_.upsample_factors();
  Tensor h = f;
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    h = bilinear_upsample(conv3x3_bn_relu(h, decoder_[i], training), static_cast<std::size_t>(factors[i]));
    if (trace) trace->shapes.push_back(h.shape());
  }
  Tensor logits = conv2d(h, head_weight_, head_bias_);
  if (trace) trace->shapes.push_back(logits.shape());
  return logits;
}

Tensor Model::forward(const Tensor& image, const std::string& prompt, const std::optional<BoxPrompt>& box,
                      bool training, DecodeTrace* trace) {
  const Tensor v = encode_image(image);
  const Tensor t = encode_text(prompt);
  std::optional<Tensor> p;
  if (box) p = encode_box(*box);
  return decode(fuse(v, t, p), training, trace);
}

Tensor Model::forward_batch(const std::vector<Tensor>& images, const std::vector<std::string>& prompts,
                            const std::vector<std::optional<BoxPrompt>>& boxes, bool training) {
  if (images.empty() || images.size() != prompts.size() || images.size() != boxes.size()) {
    fail(ErrorKind::Dimension, "forward_batch: images, prompts and boxes must be non-empty and equally long");
  }
  std::vector<Tensor> fused;
  fused.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::optional<Tensor> p;
    if (boxes[i]) p = encode_box(*boxes[i]);
    fused.push_back(fuse(encode_image(images[i]), encode_text(prompts[i]), p));
  }
  return decode(stack(fused), training);
}

std::vector<double> Model::foreground(const Image& image, const std::string& prompt,
                                      const std::optional<BoxPrompt>& box) {
  NoGradGuard guard;
  return foreground_probability(forward(image_to_tensor(image), prompt, box, false));
}

std::vector<std::pair<std::string, Tensor>> Model::trainable_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  collect("image.patch_embed", patch_embed_, out);
  out.emplace_back("image.position", position_);
  for (std::size_t i = 0; i < encoder_.size(); ++i) collect("image.layer" + std::to_string(i), encoder_[i], out);
  out.emplace_back("image.projection", visual_projection_);
  out.emplace_back("text.projection", text_projection_);
  collect("fusion.text_attention", text_attention_, out);
  collect("fusion.prompt_attention", prompt_attention_, out);
  for (std::size_t i = 0; i < fusion_.size(); ++i) collect("fusion.layer" + std::to_string(i), fusion_[i], out);
  for (std::size_t i = 0; i < decoder_.size(); ++i) collect("decoder.stage" + std::to_string(i), decoder_[i], out);
  out.emplace_back("decoder.head.weight", head_weight_);
  out.emplace_back("decoder.head.bias", head_bias_);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Model::frozen_tensors() const {
  return {{"text.token_table", token_table_},
          {"box.fourier_matrix", fourier_matrix_},
          {"box.corner_embedding", corner_embedding_}};
}

std::vector<std::pair<std::string, Tensor>> Model::buffers() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < decoder_.size(); ++i) collect_buffers("decoder.stage" + std::to_string(i), decoder_[i], out);
  return out;
}

void Model::set_head_bias(double log_odds) {
  auto b = head_bias_.mutable_data();
  b[0] = -0.5 * log_odds;
  b[1] = 0.5 * log_odds;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : trainable_parameters()) n += t.numel();
  return n;
}

namespace {

constexpr char kMagic[8] = {'T', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

std::vector<std::pair<std::string, Tensor>> all_tensors(const Model& m) {
  auto out = m.trainable_parameters();
  for (auto& e : m.frozen_tensors()) out.push_back(e);
  for (auto& e : m.buffers()) out.push_back(e);
  return out;
}

}  // namespace

void Model::save(const std::filesystem::path& path) const {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  const auto tensors = all_tensors(*this);
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
  }
  const std::string header = json{{"format", 1}, {"config", json::parse(config_to_json(config_))},
                                  {"tensors", entries}}.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t header_size = header.size();
  out.write(reinterpret_cast<const char*>(&header_size), sizeof header_size);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, t] : tensors) {
    const auto data = t.data();
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) fail(ErrorKind::Io, "failed writing checkpoint " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read checkpoint " + path.string());
  char magic[8];
  std::uint64_t header_size = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&header_size), sizeof header_size);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) fail(ErrorKind::Io, "not a checkpoint: " + path.string());
  if (header_size > (1u << 26)) fail(ErrorKind::Io, "checkpoint header too large");
  std::string header(header_size, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_size));
  std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (rest.size() % sizeof(double) != 0) fail(ErrorKind::Io, "checkpoint payload is truncated");
  std::vector<double> payload(rest.size() / sizeof(double));
  std::memcpy(payload.data(), rest.data(), rest.size());

  json h;
  try {
    h = json::parse(header);
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, std::string("checkpoint header: ") + e.what());
  }
  Model model(config_from_json(h.at("config").dump()));
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : all_tensors(model)) by_name[name] = t;
  std::size_t restored = 0;
  for (const auto& e : h.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end()) fail(ErrorKind::Io, "checkpoint has unknown tensor " + name);
    const auto shape = e.at("shape").get<Shape>();
    if (shape != it->second.shape()) fail(ErrorKind::Io, "checkpoint shape mismatch for " + name);
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = shape_numel(shape);
    if (offset + count > payload.size()) fail(ErrorKind::Io, "checkpoint payload too short for " + name);
    auto dst = it->second.mutable_data();
    std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(offset), count, dst.begin());
    ++restored;
  }
  if (restored != by_name.size()) fail(ErrorKind::Io, "checkpoint is missing tensors");
  return model;
}

RasterMask combine_class_probabilities(const std::vector<std::vector<double>>& probabilities,
                                       const std::vector<int>& class_indices, int width, int height,
                                       int class_count) {
  if (probabilities.size() != class_indices.size() || probabilities.empty()) {
    fail(ErrorKind::Dimension, "combine_class_probabilities: need one probability map per class");
  }
  const auto n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  for (const auto& p : probabilities) {
    if (p.size() != n) fail(ErrorKind::Dimension, "combine_class_probabilities: map size mismatch");
  }
  // Visit classes by ascending index so the strict comparison keeps the
  // lowest index on ties.
  std::vector<std::size_t> order(class_indices.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return class_indices[a] < class_indices[b]; });
  std::vector<std::uint8_t> labels(n, 0);
  for (std::size_t px = 0; px < n; ++px) {
    double best = -1.0;
    int label = 0;
    for (std::size_t k : order) {
      const double p = probabilities[k][px];
      if (p >= 0.5 && p > best) {
        best = p;
        label = class_indices[k];
      }
    }
    labels[px] = static_cast<std::uint8_t>(label);
  }
  RasterMask mask(width, height, class_count);
  mask.assign(std::move(labels));
  return mask;
}

RasterMask segment_multiclass(Model& model, const Image& image, const std::vector<ClassPrompt>& classes,
                              const std::vector<std::optional<BoxPrompt>>& boxes) {
  if (classes.empty()) fail(ErrorKind::Input, "segment_multiclass: at least one class is required");
  if (!boxes.empty() && boxes.size() != classes.size()) {
    fail(ErrorKind::Dimension, "segment_multiclass: need one optional box per class");
  }
  std::vector<std::vector<double>> probabilities;
  std::vector<int> indices;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    if (classes[k].class_index <= 0 || classes[k].class_index >= RasterMask::kMaxClasses) {
      fail(ErrorKind::Label, "segment_multiclass: class index out of range");
    }
    const std::optional<BoxPrompt> box = boxes.empty() ? std::nullopt : boxes[k];
    probabilities.push_back(model.foreground(image, prompt_text(classes[k].name), box));
    indices.push_back(classes[k].class_index);
  }
  return combine_class_probabilities(probabilities, indices, image.width, image.height);
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(Model& model, const std::vector<TrainingSample>& samples, const TrainConfig& config) {
  if (samples.empty()) fail(ErrorKind::Training, "train: empty training set");
  if (config.epochs < 0 || config.batch_size <= 0) fail(ErrorKind::Training, "train: invalid epochs or batch size");
  if (config.box_dropout < 0.0 || config.box_dropout > 1.0) fail(ErrorKind::Training, "train: box dropout outside [0, 1]");
  const int s = model.config().image_size;
  const auto pixels = static_cast<std::size_t>(s) * static_cast<std::size_t>(s);
  for (const auto& sample : samples) {
    if (!sample.image || sample.image->width != s || sample.image->height != s || sample.mask.size() != pixels) {
      fail(ErrorKind::Training, "train: sample does not match the model image size");
    }
  }

  std::vector<Tensor> params;
  for (auto& [name, t] : model.trainable_parameters()) params.push_back(t);
  AdamWState state = AdamWState::init(params, config.optimizer);
  TrainResult result;
  result.parameter_count = model.parameter_count();

  if (config.prior_head_bias) {
    double fg = 0.0;
    for (const auto& sample : samples) for (auto v : sample.mask) fg += v;
    const double prior = std::clamp(fg / static_cast<double>(samples.size() * pixels), 1e-3, 1.0 - 1e-3);
    model.set_head_bias(std::log(prior / (1.0 - prior)));
  }
  Rng rng(config.seed);
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto batch = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_sum = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<Tensor> images;
      std::vector<std::string> prompts;
      std::vector<std::optional<BoxPrompt>> boxes;
      std::vector<std::uint8_t> labels;
      labels.reserve((end - start) * pixels);
      for (std::size_t i = start; i < end; ++i) {
        const auto& sample = samples[order[i]];
        images.push_back(image_to_tensor(*sample.image));
        prompts.push_back(sample.prompt);
        labels.insert(labels.end(), sample.mask.begin(), sample.mask.end());
        std::optional<BoxPrompt> box;
        const bool drop = rng.uniform() < config.box_dropout;
        if (auto tight = tight_bbox(sample.mask, s, s); tight && !drop) {
          box = BoxPrompt::from_bbox(*tight, s, s);
          if (config.box_jitter > 0.0) {
            const double w = box->x1 - box->x0;
            const double h = box->y1 - box->y0;
            const double j = config.box_jitter;
            box->x0 = std::clamp(box->x0 + rng.uniform(-j, j) * w, 0.0, 1.0);
            box->x1 = std::clamp(box->x1 + rng.uniform(-j, j) * w, 0.0, 1.0);
            box->y0 = std::clamp(box->y0 + rng.uniform(-j, j) * h, 0.0, 1.0);
            box->y1 = std::clamp(box->y1 + rng.uniform(-j, j) * h, 0.0, 1.0);
          }
        }
        boxes.push_back(box);
      }
      for (auto& p : params) p.zero_grad();
      const Tensor loss = softmax_cross_entropy(model.forward_batch(images, prompts, boxes, true), labels);
      const double value = loss.item();
      if (!std::isfinite(value)) fail(ErrorKind::Training, "train: loss became non-finite");
      loss.backward();
      adamw_step(params, state);
      result.step_loss.push_back(value);
      epoch_sum += value;
      ++epoch_steps;
      if (config.on_step) config.on_step(epoch, result.step_loss.size() - 1, value);
    }
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_steps));
  }
  return result;
}

std::vector<TrainingSample> load_samples(const std::vector<Triplet>& manifest, const ModelConfig& config,
                                         std::uint64_t seed) {
  if (manifest.empty()) fail(ErrorKind::Training, "load_samples: empty manifest");
  const int s = config.image_size;
  Rng rng(seed);
  struct Loaded {
    std::shared_ptr<const Image> image;
    RasterMask mask;
  };
  std::map<std::pair<std::string, std::string>, Loaded> cache;
  std::vector<TrainingSample> out;
  out.reserve(manifest.size());
  for (const auto& t : manifest) {
    const auto key = std::make_pair(t.image_path, t.mask_path);
    auto it = cache.find(key);
    if (it == cache.end()) {
      Image image = read_png_rgb(t.image_path);
      RasterMask mask = read_png_mask(t.mask_path);
      if (image.width != mask.width() || image.height != mask.height()) {
        fail(ErrorKind::Dimension, "load_samples: image and mask sizes differ for " + t.image_path);
      }
      if (image.width != s || image.height != s) {
        if (image.width >= 512 && image.height >= 512) {
          auto pair = sample_and_resize(image, mask, rng, 512, s);
          image = std::move(pair.image);
          mask = std::move(pair.mask);
        } else {
          image = resize_bilinear(image, s, s);
          mask = resize_nearest(mask, s, s);
        }
      }
      it = cache.emplace(key, Loaded{std::make_shared<const Image>(std::move(image)), std::move(mask)}).first;
    }
    out.push_back({it->second.image, binary_view(it->second.mask, t.class_index), prompt_text(t.class_name)});
  }
  return out;
}

}  // namespace tseg
