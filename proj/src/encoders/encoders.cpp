#include "mcfnet/encoders.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace mcfnet {

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  add(kPadToken);
  add(kUnkToken);
}

std::size_t Vocabulary::add(const std::string& word) {
  if (auto it = ids_.find(word); it != ids_.end()) return it->second;
  const std::size_t id = words_.size();
  ids_.emplace(word, id);
  words_.push_back(word);
  return id;
}

std::size_t Vocabulary::id(std::string_view word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view word) const { return ids_.find(word) != ids_.end(); }

std::string Vocabulary::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < words_.size(); ++i) j[words_[i]] = i;
  return j.dump(2);
}

Vocabulary Vocabulary::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("vocabulary is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw IoError("vocabulary must be a JSON object mapping word to id");
  std::vector<std::string> words(j.size());
  std::vector<bool> seen(j.size(), false);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_number_unsigned()) {
      throw IoError("vocabulary id for '" + it.key() + "' is not a non-negative integer");
    }
    const auto id = it.value().get<std::size_t>();
    if (id >= words.size() || seen[id]) {
      throw IoError("vocabulary ids must be unique and dense in [0, " +
                    std::to_string(words.size()) + "), got " + std::to_string(id));
    }
    words[id] = it.key();
    seen[id] = true;
  }
  if (words.size() < 2 || words[kPad] != kPadToken || words[kUnk] != kUnkToken) {
    throw IoError("vocabulary must reserve id 0 for [PAD] and id 1 for [UNK]");
  }
  Vocabulary v;
  for (std::size_t i = 2; i < words.size(); ++i) v.add(words[i]);
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocabulary " + path.string());
  out << to_json() << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read vocabulary " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::vector<std::size_t> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<std::size_t> ids;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) ids.push_back(vocab.id(word));
  if (ids.empty()) ids.push_back(Vocabulary::kUnk);
  return ids;
}

// ---------------------------------------------------------------------------
// Batches

void TextBatch::validate() const {
  if (batch == 0 || length == 0) throw ShapeError("text batch is empty");
  if (token_ids.size() != batch * length || pad_mask.size() != batch * length) {
    throw ShapeError("text batch buffers do not match [" + std::to_string(batch) + " x " +
                     std::to_string(length) + "]");
  }
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    if (token_ids[i] >= vocab_size) {
      throw ShapeError("token id " + std::to_string(token_ids[i]) + " >= vocab size " +
                       std::to_string(vocab_size));
    }
    if ((pad_mask[i] != 0) != (token_ids[i] != Vocabulary::kPad)) {
      throw ShapeError("pad mask disagrees with token ids at flat index " + std::to_string(i));
    }
  }
}

TextBatch make_text_batch(const std::vector<std::vector<std::size_t>>& sequences,
                          std::size_t vocab_size, std::size_t min_length) {
  TextBatch b;
  b.batch = sequences.size();
  b.vocab_size = vocab_size;
  b.length = min_length;
  for (const auto& s : sequences) b.length = std::max(b.length, s.size());
  b.token_ids.assign(b.batch * b.length, Vocabulary::kPad);
  b.pad_mask.assign(b.batch * b.length, 0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    for (std::size_t t = 0; t < sequences[i].size(); ++t) {
      b.token_ids[i * b.length + t] = sequences[i][t];
      b.pad_mask[i * b.length + t] = sequences[i][t] != Vocabulary::kPad;
    }
  }
  return b;
}

std::size_t ImageBatch::num_patches() const {
  return (height / patch_size) * (width / patch_size);
}

void ImageBatch::validate() const {
  if (patch_size == 0 || height % patch_size != 0 || width % patch_size != 0) {
    throw ShapeError("patch size " + std::to_string(patch_size) + " does not divide image " +
                     std::to_string(height) + " x " + std::to_string(width));
  }
  if (batch == 0 || channels == 0) throw ShapeError("image batch is empty");
  if (pixels.size() != batch * height * width * channels) {
    throw ShapeError("image batch holds " + std::to_string(pixels.size()) + " values, expected " +
                     std::to_string(batch * height * width * channels));
  }
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (!(pixels[i] >= 0.0f && pixels[i] <= 1.0f)) {
      throw ConfigError("pixel value " + std::to_string(pixels[i]) + " at flat index " +
                        std::to_string(i) +
                        " is outside [0, 1]; run images through preprocess_image first");
    }
  }
}

template <typename T>
Tensor<T> patchify(std::span<const float> image, std::size_t height, std::size_t width,
                   std::size_t channels, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ShapeError("patch size " + std::to_string(patch) + " does not divide image " +
                     std::to_string(height) + " x " + std::to_string(width));
  }
  if (image.size() != height * width * channels) {
    throw ShapeError("image buffer size does not match its dimensions");
  }
  const std::size_t gw = width / patch, n = (height / patch) * gw, len = patch * patch * channels;
  Tensor<T> out({n, len});
  auto o = out.data();
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t r0 = (p / gw) * patch, c0 = (p % gw) * patch;
    for (std::size_t r = 0; r < patch; ++r) {
      const float* src = image.data() + ((r0 + r) * width + c0) * channels;
      T* dst = o.data() + p * len + r * patch * channels;
      for (std::size_t k = 0; k < patch * channels; ++k) dst[k] = static_cast<T>(src[k]);
    }
  }
  return out;
}

std::vector<float> unpatchify(const Tensor<float>& patches, std::size_t height, std::size_t width,
                              std::size_t channels, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ShapeError("patch size does not divide the image");
  }
  const std::size_t gw = width / patch, n = (height / patch) * gw, len = patch * patch * channels;
  if (patches.shape() != Shape{n, len}) {
    throw ShapeError("unpatchify expects " + shape_str({n, len}) + ", got " +
                     shape_str(patches.shape()));
  }
  std::vector<float> image(height * width * channels);
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t r0 = (p / gw) * patch, c0 = (p % gw) * patch;
    for (std::size_t r = 0; r < patch; ++r) {
      for (std::size_t k = 0; k < patch * channels; ++k) {
        image[((r0 + r) * width + c0) * channels + k] = patches[p * len + r * patch * channels + k];
      }
    }
  }
  return image;
}

// ---------------------------------------------------------------------------
// Configs

std::vector<std::string> EncoderConfig::validate(const std::string& prefix) const {
  std::vector<std::string> errs;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) errs.push_back(prefix + msg);
  };
  need(d_model > 0, "d_model must be positive");
  need(n_heads > 0, "n_heads must be positive");
  need(n_heads == 0 || d_model % n_heads == 0,
       "d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
           std::to_string(n_heads));
  need(n_layers > 0, "n_layers must be positive");
  need(ffn_width > 0, "ffn_width must be positive");
  need(embedding_dim > 0, "embedding_dim must be positive");
  need(max_len > 0, "max_len must be positive");
  return errs;
}

std::vector<std::string> ImageGeometry::validate(const std::string& prefix) const {
  std::vector<std::string> errs;
  if (image_size == 0) errs.push_back(prefix + "image_size must be positive");
  if (channels == 0) errs.push_back(prefix + "channels must be positive");
  if (patch_size == 0 || image_size % patch_size != 0) {
    errs.push_back(prefix + "patch_size " + std::to_string(patch_size) +
                   " must divide image_size " + std::to_string(image_size));
  }
  return errs;
}

namespace {

void throw_if_invalid(const std::vector<std::string>& errs) {
  if (errs.empty()) return;
  std::string msg;
  for (const auto& e : errs) msg += (msg.empty() ? "" : "; ") + e;
  throw ConfigError(msg);
}

std::vector<std::size_t> position_ids(std::size_t batch, std::size_t length) {
  std::vector<std::size_t> ids(batch * length);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i % length;
  return ids;
}

}  // namespace

// ---------------------------------------------------------------------------
// TextEncoder

template <typename T>
TextEncoder<T>::TextEncoder(const EncoderConfig& config, std::size_t vocab_size,
                            std::mt19937_64& rng)
    : config_(config), vocab_size_(vocab_size) {
  throw_if_invalid(config.validate("text encoder: "));
  if (vocab_size < 2) throw ConfigError("text encoder: vocabulary needs at least PAD and UNK");
  const std::size_t e = config.embedding_dim, d = config.d_model;
  word_emb_ = trunc_normal_param<T>({vocab_size, e}, kInitStd, rng);
  pos_emb_ = trunc_normal_param<T>({config.max_len, e}, kInitStd, rng);
  seg_emb_ = trunc_normal_param<T>({1, e}, kInitStd, rng);
  emb_ln_g_ = constant_param<T>({e}, T(1));
  emb_ln_b_ = constant_param<T>({e}, T(0));
  proj_w_ = trunc_normal_param<T>({e, d}, kInitStd, rng);
  proj_b_ = constant_param<T>({d}, T(0));
  const std::size_t distinct = config.share_layers ? 1 : config.n_layers;
  for (std::size_t i = 0; i < distinct; ++i) {
    blocks_.emplace_back(d, config.n_heads, config.ffn_width, /*pre_norm=*/false, rng);
  }
}

template <typename T>
EncoderOutput<T> TextEncoder<T>::forward(Graph<T>& g, const TextBatch& batch) const {
  batch.validate();
  if (batch.vocab_size > vocab_size_) {
    throw ShapeError("text batch vocab size " + std::to_string(batch.vocab_size) +
                     " exceeds encoder vocabulary " + std::to_string(vocab_size_));
  }
  if (batch.length > config_.max_len) {
    throw ShapeError("sentence length " + std::to_string(batch.length) + " exceeds max_len " +
                     std::to_string(config_.max_len));
  }
  const std::size_t B = batch.batch, D = batch.length;
  const Shape idx{B, D};
  auto x = ops::add(g, ops::embedding(g, word_emb_, batch.token_ids, idx),
                    ops::embedding(g, pos_emb_, position_ids(B, D), idx));
  x = ops::add(g, x, ops::embedding(g, seg_emb_, std::vector<std::size_t>(B * D, 0), idx));
  x = ops::layer_norm(g, x, emb_ln_g_, emb_ln_b_, static_cast<T>(kLayerNormEps));
  x = ops::linear(g, x, proj_w_, proj_b_);

  Tensor<T> mask(idx);
  for (std::size_t i = 0; i < B * D; ++i) mask[i] = batch.pad_mask[i] ? T(1) : T(0);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    x = blocks_[config_.share_layers ? 0 : l].forward(g, x, &mask);
  }
  return {x, ops::masked_mean(g, x, mask), mask};
}

template <typename T>
void TextEncoder<T>::collect(ParamList<T>& out) const {
  const auto grp = ParamGroup::text_encoder;
  out.push_back({"text.embed.word", word_emb_, grp});
  out.push_back({"text.embed.position", pos_emb_, grp});
  out.push_back({"text.embed.segment", seg_emb_, grp});
  out.push_back({"text.embed.ln.gain", emb_ln_g_, grp});
  out.push_back({"text.embed.ln.bias", emb_ln_b_, grp});
  out.push_back({"text.embed.proj.w", proj_w_, grp});
  out.push_back({"text.embed.proj.b", proj_b_, grp});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect(out, "text.layer" + std::to_string(i), grp);
  }
}

template <typename T>
std::size_t TextEncoder<T>::layer_stack_parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.parameter_count();
  return n;
}

// ---------------------------------------------------------------------------
// ImageEncoder

template <typename T>
ImageEncoder<T>::ImageEncoder(const EncoderConfig& config, const ImageGeometry& geometry,
                              std::mt19937_64& rng)
    : config_(config), geometry_(geometry) {
  throw_if_invalid(config.validate("image encoder: "));
  throw_if_invalid(geometry.validate("image encoder: "));
  const std::size_t d = config.d_model;
  const std::size_t patch_len = geometry.patch_size * geometry.patch_size * geometry.channels;
  patch_w_ = trunc_normal_param<T>({patch_len, d}, kInitStd, rng);
  patch_b_ = constant_param<T>({d}, T(0));
  cls_ = trunc_normal_param<T>({1, d}, kInitStd, rng);
  pos_emb_ = trunc_normal_param<T>({geometry.num_patches() + 1, d}, kInitStd, rng);
  ln_g_ = constant_param<T>({d}, T(1));
  ln_b_ = constant_param<T>({d}, T(0));
  const std::size_t distinct = config.share_layers ? 1 : config.n_layers;
  for (std::size_t i = 0; i < distinct; ++i) {
    blocks_.emplace_back(d, config.n_heads, config.ffn_width, /*pre_norm=*/true, rng);
  }
}

template <typename T>
EncoderOutput<T> ImageEncoder<T>::forward(Graph<T>& g, const ImageBatch& batch) const {
  batch.validate();
  if (batch.height != geometry_.image_size || batch.width != geometry_.image_size ||
      batch.channels != geometry_.channels || batch.patch_size != geometry_.patch_size) {
    throw ShapeError("image batch geometry " + std::to_string(batch.height) + "x" +
                     std::to_string(batch.width) + "x" + std::to_string(batch.channels) +
                     " / P=" + std::to_string(batch.patch_size) +
                     " does not match the encoder configuration");
  }
  const std::size_t B = batch.batch, N = batch.num_patches();
  const std::size_t len = geometry_.patch_size * geometry_.patch_size * geometry_.channels;
  const std::size_t img = batch.height * batch.width * batch.channels;
  Tensor<T> patches({B, N, len});
  for (std::size_t b = 0; b < B; ++b) {
    auto p = patchify<T>(std::span<const float>(batch.pixels).subspan(b * img, img), batch.height,
                         batch.width, batch.channels, batch.patch_size);
    std::copy(p.data().begin(), p.data().end(), patches.data().begin() + b * N * len);
  }
  auto tokens = ops::linear(g, patches, patch_w_, patch_b_);
  auto cls = ops::embedding(g, cls_, std::vector<std::size_t>(B, 0), Shape{B, 1});
  auto x = ops::concat(g, {cls, tokens}, 1);
  x = ops::add(g, x, ops::embedding(g, pos_emb_, position_ids(B, N + 1), Shape{B, N + 1}));
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    x = blocks_[config_.share_layers ? 0 : l].forward(g, x);
  }
  x = ops::layer_norm(g, x, ln_g_, ln_b_, static_cast<T>(kLayerNormEps));
  return {x, ops::select(g, x, 1, 0), Tensor<T>({B, N + 1}, T(1))};
}

template <typename T>
void ImageEncoder<T>::collect(ParamList<T>& out) const {
  const auto grp = ParamGroup::image_encoder;
  out.push_back({"image.patch.w", patch_w_, grp});
  out.push_back({"image.patch.b", patch_b_, grp});
  out.push_back({"image.cls", cls_, grp});
  out.push_back({"image.position", pos_emb_, grp});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect(out, "image.layer" + std::to_string(i), grp);
  }
  out.push_back({"image.ln.gain", ln_g_, grp});
  out.push_back({"image.ln.bias", ln_b_, grp});
}

template <typename T>
std::size_t ImageEncoder<T>::layer_stack_parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.parameter_count();
  return n;
}

template Tensor<float> patchify<float>(std::span<const float>, std::size_t, std::size_t,
                                       std::size_t, std::size_t);
template Tensor<double> patchify<double>(std::span<const float>, std::size_t, std::size_t,
                                         std::size_t, std::size_t);
template class TextEncoder<float>;
template class TextEncoder<double>;
template class ImageEncoder<float>;
template class ImageEncoder<double>;

}  // namespace mcfnet
