#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mcfnet/attention.hpp"

namespace mcfnet {

// ---------------------------------------------------------------------------
// Text input

/// Word -> id map with reserved ids 0 = PAD and 1 = UNK.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr const char* kPadToken = "[PAD]";
  static constexpr const char* kUnkToken = "[UNK]";

  Vocabulary();

  /// Adds `word` if absent; returns its id.
  std::size_t add(const std::string& word);
  std::size_t id(std::string_view word) const;  // UNK when absent
  bool contains(std::string_view word) const;
  std::size_t size() const { return words_.size(); }
  const std::string& word(std::size_t id) const { return words_.at(id); }

  std::string to_json() const;
  static Vocabulary from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

 private:
  std::map<std::string, std::size_t, std::less<>> ids_;
  std::vector<std::string> words_;
};

/// Whitespace word split with UNK for out-of-vocabulary words. Expects text
/// already normalized; empty text yields a single UNK.
std::vector<std::size_t> tokenize(std::string_view text, const Vocabulary& vocab);

/// Padded token matrix. pad_mask[i] is 1 exactly where token_ids[i] is real.
struct TextBatch {
  std::size_t batch = 0;
  std::size_t length = 0;  // D, padded sentence length
  std::size_t vocab_size = 0;
  std::vector<std::size_t> token_ids;  // [batch x length]
  std::vector<unsigned char> pad_mask; // [batch x length]

  void validate() const;
};

/// Pads every sequence with PAD to max(longest, min_length).
TextBatch make_text_batch(const std::vector<std::vector<std::size_t>>& sequences,
                          std::size_t vocab_size, std::size_t min_length = 3);

// ---------------------------------------------------------------------------
// Image input

/// Pixels [batch x height x width x channels], row-major, values in [0, 1].
struct ImageBatch {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t patch_size = 0;
  std::vector<float> pixels;

  std::size_t num_patches() const;
  /// Throws ShapeError for non-divisible patch sizes and ConfigError for
  /// pixels outside [0, 1].
  void validate() const;
};

/// Splits one image [H x W x C] into N = H*W/P^2 patches [N x P*P*C].
/// Patches are ordered row-major over the patch grid; each patch is
/// flattened in (row, col, channel) order.
template <typename T>
Tensor<T> patchify(std::span<const float> image, std::size_t height, std::size_t width,
                   std::size_t channels, std::size_t patch);

/// Inverse of patchify.
std::vector<float> unpatchify(const Tensor<float>& patches, std::size_t height, std::size_t width,
                              std::size_t channels, std::size_t patch);

// ---------------------------------------------------------------------------
// Encoders

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 2;
  std::size_t n_layers = 2;
  std::size_t ffn_width = 128;
  std::size_t embedding_dim = 32;  // factorized text embedding width
  bool share_layers = true;
  std::size_t max_len = 64;

  /// One message per invalid field; empty when valid.
  std::vector<std::string> validate(const std::string& prefix) const;
};

struct ImageGeometry {
  std::size_t image_size = 32;  // square side
  std::size_t channels = 3;
  std::size_t patch_size = 8;

  std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::vector<std::string> validate(const std::string& prefix) const;
};

template <typename T>
struct EncoderOutput {
  Tensor<T> context;  // [B x L x d]
  Tensor<T> global;   // [B x d]
  Tensor<T> mask;     // [B x L], 1 at real positions
};

/// ALBERT-style text encoder: word + position + segment embeddings in a
/// factorized width, projected to d_model, then a transformer stack whose
/// layers share one set of weights when share_layers is set. The global
/// embedding is the mean of the context over non-pad positions.
template <typename T>
class TextEncoder {
 public:
  TextEncoder(const EncoderConfig& config, std::size_t vocab_size, std::mt19937_64& rng);

  EncoderOutput<T> forward(Graph<T>& g, const TextBatch& batch) const;

  void collect(ParamList<T>& out) const;
  /// Trainable parameters of the transformer stack alone.
  std::size_t layer_stack_parameter_count() const;
  const EncoderConfig& config() const { return config_; }

 private:
  EncoderConfig config_;
  std::size_t vocab_size_;
  Tensor<T> word_emb_, pos_emb_, seg_emb_, emb_ln_g_, emb_ln_b_, proj_w_, proj_b_;
  std::vector<TransformerBlock<T>> blocks_;
};

/// ViT-style image encoder: linear patch projection, learned [CLS] token
/// prepended, learned positional embedding, pre-norm transformer stack and a
/// final LayerNorm. The global embedding is the CLS output.
template <typename T>
class ImageEncoder {
 public:
  ImageEncoder(const EncoderConfig& config, const ImageGeometry& geometry, std::mt19937_64& rng);

  EncoderOutput<T> forward(Graph<T>& g, const ImageBatch& batch) const;

  void collect(ParamList<T>& out) const;
  std::size_t layer_stack_parameter_count() const;
  const EncoderConfig& config() const { return config_; }
  const ImageGeometry& geometry() const { return geometry_; }

 private:
  EncoderConfig config_;
  ImageGeometry geometry_;
  Tensor<T> patch_w_, patch_b_, cls_, pos_emb_, ln_g_, ln_b_;
  std::vector<TransformerBlock<T>> blocks_;
};

}  // namespace mcfnet
