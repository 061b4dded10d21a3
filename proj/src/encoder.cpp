#include "promptlab/encoder.hpp"

#include <cctype>
#include <cmath>

#include "promptlab/digest.hpp"
#include "promptlab/errors.hpp"
#include "promptlab/rng.hpp"

namespace promptlab {

void EncoderConfig::validate() const {
  if (embed_dim == 0 || joint_dim == 0 || raw_dim == 0 || layers == 0 || heads == 0) {
    throw ConfigError("encoder config: all dimensions must be positive");
  }
  if (embed_dim % heads != 0) {
    throw ConfigError("encoder config: embed_dim " + std::to_string(embed_dim) +
                      " not divisible by heads " + std::to_string(heads));
  }
  if (vocab <= kFirstWordId) {
    throw ConfigError("encoder config: vocab must exceed the " +
                      std::to_string(kFirstWordId) + " special ids");
  }
  if (max_len < 3) {
    throw ConfigError("encoder config: max_len must fit start, end and one token");
  }
  if (raw_dim < joint_dim) {
    throw ConfigError("encoder config: raw_dim " + std::to_string(raw_dim) +
                      " smaller than joint_dim " + std::to_string(joint_dim));
  }
  if (!(temperature > 0.0)) {
    throw ConfigError("encoder config: temperature must be positive");
  }
}

namespace {

// Matrices scale with fan-in; norm gains sit around one so the residual
// stream stays near its input scale. Embeddings use a small scale while
// the mixing matrices use a larger one, keeping the map from prompt rows
// to features responsive enough for prompt tuning to make progress.
constexpr double kEmbedScale = 0.02;
constexpr double kMixScale = 0.5;

Tensor gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in,
                       double scale) {
  double stddev = scale / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> values(rows * cols);
  for (double& v : values) v = rng.gaussian(0.0, stddev);
  return Tensor::from_values({rows, cols}, std::move(values));
}

Tensor gaussian_vector(Rng& rng, std::size_t n, double mean, double stddev) {
  std::vector<double> values(n);
  for (double& v : values) v = rng.gaussian(mean, stddev);
  return Tensor::from_values({n}, std::move(values));
}

std::uint64_t fnv1a(std::string_view text) {
  Digest d;
  d.update(text.data(), text.size());
  return d.value();
}

}  // namespace

FrozenDualEncoder::FrozenDualEncoder(const EncoderConfig& config, std::uint64_t seed)
    : config_(config), seed_(seed) {
  config_.validate();
  std::size_t d = config_.embed_dim;
  std::size_t dj = config_.joint_dim;
  Rng rng(mix_seed(seed, 0x656e636f646572ULL));  // "encoder"

  token_table_ = gaussian_matrix(rng, config_.vocab, d, d, kEmbedScale);
  pos_table_ = gaussian_matrix(rng, config_.max_len, d, d, kEmbedScale);
  blocks_.reserve(config_.layers);
  for (std::size_t layer = 0; layer < config_.layers; ++layer) {
    Block b;
    b.ln1_gain = gaussian_vector(rng, d, 1.0, 0.02);
    b.ln1_bias = gaussian_vector(rng, d, 0.0, 0.02);
    b.wq = gaussian_matrix(rng, d, d, d, kMixScale);
    b.wk = gaussian_matrix(rng, d, d, d, kMixScale);
    b.wv = gaussian_matrix(rng, d, d, d, kMixScale);
    b.wo = gaussian_matrix(rng, d, d, d, kMixScale);
    b.ln2_gain = gaussian_vector(rng, d, 1.0, 0.02);
    b.ln2_bias = gaussian_vector(rng, d, 0.0, 0.02);
    b.w_up = gaussian_matrix(rng, d, 4 * d, d, kMixScale);
    b.w_down = gaussian_matrix(rng, 4 * d, d, 4 * d, kMixScale);
    blocks_.push_back(std::move(b));
  }
  final_gain_ = gaussian_vector(rng, d, 1.0, 0.02);
  final_bias_ = gaussian_vector(rng, d, 0.0, 0.02);
  text_proj_ = gaussian_matrix(rng, d, dj, d, kMixScale);
  image_weight_ = gaussian_matrix(rng, dj, config_.raw_dim, config_.raw_dim, kMixScale);
  image_bias_ = gaussian_vector(rng, dj, 0.0, kMixScale / std::sqrt(static_cast<double>(config_.raw_dim)));

  weight_digest_ = recompute_weight_digest();
}

std::vector<std::pair<std::string, const Tensor*>> FrozenDualEncoder::named_weights() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.emplace_back("token_table", &token_table_);
  out.emplace_back("pos_table", &pos_table_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block& b = blocks_[i];
    std::string prefix = "block" + std::to_string(i) + ".";
    out.emplace_back(prefix + "ln1_gain", &b.ln1_gain);
    out.emplace_back(prefix + "ln1_bias", &b.ln1_bias);
    out.emplace_back(prefix + "wq", &b.wq);
    out.emplace_back(prefix + "wk", &b.wk);
    out.emplace_back(prefix + "wv", &b.wv);
    out.emplace_back(prefix + "wo", &b.wo);
    out.emplace_back(prefix + "ln2_gain", &b.ln2_gain);
    out.emplace_back(prefix + "ln2_bias", &b.ln2_bias);
    out.emplace_back(prefix + "w_up", &b.w_up);
    out.emplace_back(prefix + "w_down", &b.w_down);
  }
  out.emplace_back("final_gain", &final_gain_);
  out.emplace_back("final_bias", &final_bias_);
  out.emplace_back("text_proj", &text_proj_);
  out.emplace_back("image_weight", &image_weight_);
  out.emplace_back("image_bias", &image_bias_);
  return out;
}

std::string FrozenDualEncoder::recompute_weight_digest() const {
  Digest digest;
  digest.update_u64(seed_);
  digest.update_u64(config_.embed_dim);
  digest.update_u64(config_.joint_dim);
  digest.update_u64(config_.raw_dim);
  digest.update_u64(config_.layers);
  digest.update_u64(config_.heads);
  digest.update_u64(config_.max_len);
  digest.update_u64(config_.vocab);
  digest.update_double(config_.temperature);
  for (const auto& [name, tensor] : named_weights()) {
    digest.update_string(name);
    for (std::size_t dim : tensor->shape()) digest.update_u64(dim);
    digest.update_doubles(tensor->values());
  }
  return digest.hex();
}

std::vector<std::uint32_t> FrozenDualEncoder::tokenize(std::string_view text) const {
  std::vector<std::uint32_t> ids;
  std::string word;
  auto flush = [&]() {
    if (word.empty()) return;
    std::uint64_t bucket = fnv1a(word) % (config_.vocab - kFirstWordId);
    ids.push_back(kFirstWordId + static_cast<std::uint32_t>(bucket));
    word.clear();
  };
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  return ids;
}

Tensor FrozenDualEncoder::token_rows(std::span<const std::uint32_t> ids) const {
  if (ids.empty()) throw ConfigError("token_rows: empty id list");
  std::size_t d = config_.embed_dim;
  std::vector<double> values;
  values.reserve(ids.size() * d);
  auto table = token_table_.values();
  for (std::uint32_t id : ids) {
    if (id >= config_.vocab) {
      throw ConfigError("token id " + std::to_string(id) + " outside vocab " +
                        std::to_string(config_.vocab));
    }
    const double* row = table.data() + static_cast<std::size_t>(id) * d;
    values.insert(values.end(), row, row + d);
  }
  return Tensor::from_values({ids.size(), d}, std::move(values));
}

TokenSequence FrozenDualEncoder::text_sequence(std::string_view text) const {
  TokenSequence seq;
  seq.ids.push_back(kStartId);
  for (std::uint32_t id : tokenize(text)) seq.ids.push_back(id);
  seq.ids.push_back(kEndId);
  if (seq.ids.size() > config_.max_len) {
    throw ConfigError("text of " + std::to_string(seq.ids.size()) +
                      " tokens exceeds max_len " + std::to_string(config_.max_len));
  }
  seq.rows = token_rows(seq.ids);
  seq.end_index = seq.ids.size() - 1;
  return seq;
}

Tensor FrozenDualEncoder::attention(const Tensor& h, const Block& block) const {
  std::size_t head_dim = config_.embed_dim / config_.heads;
  Tensor q = matmul(h, block.wq);
  Tensor k = matmul(h, block.wk);
  Tensor v = matmul(h, block.wv);
  std::vector<Tensor> merged;
  merged.reserve(config_.heads);
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (std::size_t head = 0; head < config_.heads; ++head) {
    std::size_t lo = head * head_dim;
    std::size_t hi = lo + head_dim;
    Tensor qh = slice_cols(q, lo, hi);
    Tensor kh = slice_cols(k, lo, hi);
    Tensor vh = slice_cols(v, lo, hi);
    Tensor weights = softmax_row(scale(matmul(qh, transpose(kh)), inv_sqrt));
    merged.push_back(matmul(weights, vh));
  }
  return matmul(concat_cols(merged), block.wo);
}

Tensor FrozenDualEncoder::encode_sequence(const Tensor& rows, std::size_t end_index) const {
  if (rows.rank() != 2 || rows.cols() != config_.embed_dim) {
    throw ConfigError("encode_sequence: rows of shape " + shape_string(rows.shape()) +
                      " do not match embed_dim " + std::to_string(config_.embed_dim));
  }
  std::size_t len = rows.rows();
  if (len > config_.max_len) {
    throw ConfigError("sequence of " + std::to_string(len) + " rows exceeds max_len " +
                      std::to_string(config_.max_len));
  }
  if (end_index >= len) {
    throw ConfigError("end_index " + std::to_string(end_index) + " outside sequence of " +
                      std::to_string(len) + " rows");
  }
  Tensor x = add(rows, slice_rows(pos_table_, 0, len));
  for (const Block& block : blocks_) {
    x = add(x, attention(layer_norm(x, block.ln1_gain, block.ln1_bias), block));
    Tensor h = layer_norm(x, block.ln2_gain, block.ln2_bias);
    Tensor up = relu(matmul(h, block.w_up));
    x = add(x, matmul(up, block.w_down));
  }
  x = layer_norm(x, final_gain_, final_bias_);
  Tensor pooled = take_row(x, end_index);
  return l2_normalize(matmul(pooled, text_proj_));
}

Tensor FrozenDualEncoder::encode_sequence(const TokenSequence& seq) const {
  return encode_sequence(seq.rows, seq.end_index);
}

ImageFeature FrozenDualEncoder::encode_image(std::span<const double> raw) const {
  if (raw.size() != config_.raw_dim) {
    throw ConfigError("encode_image: raw vector of length " + std::to_string(raw.size()) +
                      " does not match raw_dim " + std::to_string(config_.raw_dim));
  }
  Tensor x = Tensor::from_values({config_.raw_dim}, std::vector<double>(raw.begin(), raw.end()));
  Tensor pre = tanh(add(matmul(image_weight_, x), image_bias_));
  ImageFeature feature;
  feature.pre = pre;
  feature.joint = l2_normalize(pre);
  return feature;
}

}  // namespace promptlab
