#pragma once

// Promptable class-conditioned segmentation model: image, text and box
// encoders, two-stage cross-attention fusion, transformer refinement and an
// upsampling conv decoder producing two logits per pixel.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tseg/corpus.hpp"
#include "tseg/imaging.hpp"
#include "tseg/nn.hpp"
#include "tseg/tensor.hpp"

namespace tseg {

struct ModelConfig {
  int image_size = 224;
  int patch_size = 32;      // must be divisible by 8
  int dim = 512;            // shared width d
  int text_length = 77;
  int fusion_depth = 4;     // transformer layers after fusion
  int encoder_depth = 2;    // transformer layers in the image encoder
  int ffn_multiplier = 4;
  int vocab_size = 8192;    // hashed token table rows (row 0 is padding)
  double fourier_scale = 1.0;
  std::uint64_t seed = 0;

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  /// Widths of F_final and H1..H4.
  std::vector<int> decoder_channels() const;
  /// Upsampling factor of each decoder stage.
  std::vector<int> upsample_factors() const;
  void validate() const;
};

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

/// Box corners normalized to [0, 1] (x0, y0 top-left; x1, y1 bottom-right).
struct BoxPrompt {
  double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;

  /// Inclusive pixel box on a width x height image; the right/bottom edges
  /// map to (x_max + 1) / width.
  static BoxPrompt from_bbox(const BBox& box, int width, int height);
};

/// Intermediate fusion results. Each stage adds its cross-attention output to
/// its queries; without a box the prompt stage is skipped.
struct FusionStages {
  Tensor text_attention;    // CrossAttn(V, T, T)
  Tensor text;              // F_text = V + text_attention
  Tensor prompt_attention;  // CrossAttn(F_text, P, P), undefined without P
  Tensor prompt;            // F_prompt
};

struct DecodeTrace {
  std::vector<Shape> shapes;  // F_final, H1, H2, H3, H4, logits
};

std::vector<std::string> tokenize(const std::string& text);

class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  /// image: [3, S, S] with values in [0, 1]. Returns V: [N, d].
  Tensor encode_image(const Tensor& image) const;
  /// Returns T: [text_length, d].
  Tensor encode_text(const std::string& prompt) const;
  /// Returns P: [2, d]. Out-of-range corners are clamped with a warning.
  Tensor encode_box(const BoxPrompt& box) const;
  FusionStages fuse_stages(const Tensor& v, const Tensor& t, const std::optional<Tensor>& p) const;
  /// Returns F_final: [d, g, g].
  Tensor fuse(const Tensor& v, const Tensor& t, const std::optional<Tensor>& p) const;
  /// f: [d, g, g] or [B, d, g, g]. Returns logits [2, S, S] or [B, 2, S, S].
  Tensor decode(const Tensor& f, bool training, DecodeTrace* trace = nullptr);

  Tensor forward(const Tensor& image, const std::string& prompt, const std::optional<BoxPrompt>& box,
                 bool training = false, DecodeTrace* trace = nullptr);
  /// Batched forward: per-sample encoders and fusion, one batched decoder
  /// pass (batch statistics in training mode).
  Tensor forward_batch(const std::vector<Tensor>& images, const std::vector<std::string>& prompts,
                       const std::vector<std::optional<BoxPrompt>>& boxes, bool training);

  /// Foreground probabilities [S * S] for one image and prompt (eval mode).
  std::vector<double> foreground(const Image& image, const std::string& prompt, const std::optional<BoxPrompt>& box);

  std::vector<std::pair<std::string, Tensor>> trainable_parameters() const;
  std::vector<std::pair<std::string, Tensor>> frozen_tensors() const;
  std::vector<std::pair<std::string, Tensor>> buffers() const;
  std::size_t parameter_count() const;
  /// Sets the head bias so a zero feature map predicts the given foreground
  /// log-odds.
  void set_head_bias(double log_odds);

  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

 private:
  Tensor token_embeddings(const std::string& prompt) const;
  Tensor fourier(double x, double y) const;

  ModelConfig config_;
  // Image encoder.
  LinearParams patch_embed_;
  Tensor position_;
  std::vector<TransformerLayerParams> encoder_;
  Tensor visual_projection_;  // W_proj [d, d]
  // Text encoder: frozen hashed table, trainable W_text.
  Tensor token_table_;  // [vocab, d], frozen
  Tensor text_projection_;
  // Box encoder, frozen.
  Tensor fourier_matrix_;  // [2, d / 2]
  Tensor corner_embedding_;  // [2, d]
  // Fusion and refinement.
  AttentionParams text_attention_;
  AttentionParams prompt_attention_;
  std::vector<TransformerLayerParams> fusion_;
  // Decoder.
  std::vector<ConvBnReluParams> decoder_;
  Tensor head_weight_;  // [2, C4, 1, 1]
  Tensor head_bias_;
};

/// Per-pixel argmax over class foreground probabilities; background where
/// every probability is below 0.5; ties go to the earlier class.
RasterMask combine_class_probabilities(const std::vector<std::vector<double>>& probabilities,
                                       const std::vector<int>& class_indices, int width, int height,
                                       int class_count = RasterMask::kMaxClasses);

struct ClassPrompt {
  int class_index = 1;
  std::string name;
};

/// One forward per class (eval mode), combined with combine_class_probabilities.
/// boxes, when given, has one optional box per class.
RasterMask segment_multiclass(Model& model, const Image& image, const std::vector<ClassPrompt>& classes,
                              const std::vector<std::optional<BoxPrompt>>& boxes = {});

// ---------------------------------------------------------------------------
// Training

struct TrainingSample {
  std::shared_ptr<const Image> image;  // image_size x image_size
  std::vector<std::uint8_t> mask;      // binary, same size
  std::string prompt;
};

struct TrainConfig {
  int epochs = 10;
  int batch_size = 16;
  AdamWConfig optimizer;
  double box_dropout = 0.5;
  double box_jitter = 0.0;  // fraction of box side; 0 disables
  /// Start the head bias at the foreground log-odds of the training masks.
  bool prior_head_bias = true;
  std::uint64_t seed = 0;
  std::function<void(int epoch, std::size_t step, double loss)> on_step;
};

struct TrainResult {
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;
  std::size_t parameter_count = 0;
};

TrainResult train(Model& model, const std::vector<TrainingSample>& samples, const TrainConfig& config);

/// Loads manifest triplets into samples: images already at the model size are
/// used as is, larger ones go through sample_and_resize, others are resized.
std::vector<TrainingSample> load_samples(const std::vector<Triplet>& manifest, const ModelConfig& config,
                                         std::uint64_t seed);

}  // namespace tseg
