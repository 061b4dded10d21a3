#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "promptlab/tensor.hpp"

namespace promptlab {

// Shapes and scalars that define a dual encoder. The temperature is part
// of the encoder because similarity scores are meaningless without it.
struct EncoderConfig {
  std::size_t embed_dim = 32;  // token embedding width
  std::size_t joint_dim = 32;  // shared feature space width
  std::size_t raw_dim = 128;   // raw image vector length
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t max_len = 24;
  std::size_t vocab = 512;  // bucket count, including the special ids
  double temperature = 0.01;

  void validate() const;  // throws ConfigError
};

// Special token ids; hashed words start at kFirstWordId.
inline constexpr std::uint32_t kStartId = 0;
inline constexpr std::uint32_t kEndId = 1;
inline constexpr std::uint32_t kContextId = 2;
inline constexpr std::uint32_t kFirstWordId = 3;

struct TokenSequence {
  std::vector<std::uint32_t> ids;  // [start, words..., end]
  Tensor rows;                     // len x embed_dim
  std::size_t end_index = 0;       // row pooled as the sequence feature
};

struct ImageFeature {
  Tensor joint;  // unit-norm vector in the shared space
  Tensor pre;    // pre-normalization feature, kept for conditioning
};

// Both towers of a randomly initialized, permanently frozen dual encoder.
// Text runs through a small bidirectional transformer; images through a
// saturating affine map. All weights are plain (non-gradient) tensors.
class FrozenDualEncoder {
 public:
  FrozenDualEncoder(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  double temperature() const { return config_.temperature; }

  // Digest of every weight tensor, cached at construction.
  const std::string& weight_digest() const { return weight_digest_; }
  // Digest recomputed from the live tensors; equality with
  // weight_digest() proves nothing touched the encoder.
  std::string recompute_weight_digest() const;

  // Lowercased, whitespace-split, each word hashed into a vocab bucket.
  std::vector<std::uint32_t> tokenize(std::string_view text) const;
  // Frozen embedding rows for a list of token ids.
  Tensor token_rows(std::span<const std::uint32_t> ids) const;
  // [start] + words + [end] with embedding rows attached.
  TokenSequence text_sequence(std::string_view text) const;

  // Transformer forward over explicit rows. Gradients flow to whatever
  // grad-enabled leaves produced the rows; the encoder itself never
  // accumulates gradient.
  Tensor encode_sequence(const Tensor& rows, std::size_t end_index) const;
  Tensor encode_sequence(const TokenSequence& seq) const;

  ImageFeature encode_image(std::span<const double> raw) const;

  // Raw-image map pieces, exposed so data generation can invert the map.
  const Tensor& image_weight() const { return image_weight_; }
  const Tensor& image_bias() const { return image_bias_; }

  // Stable (name, tensor) listing used by the digest.
  std::vector<std::pair<std::string, const Tensor*>> named_weights() const;

 private:
  struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;
    Tensor ln2_gain, ln2_bias;
    Tensor w_up, w_down;
  };

  Tensor attention(const Tensor& h, const Block& block) const;

  EncoderConfig config_;
  std::uint64_t seed_ = 0;
  Tensor token_table_;  // vocab x embed_dim
  Tensor pos_table_;    // max_len x embed_dim
  std::vector<Block> blocks_;
  Tensor final_gain_, final_bias_;
  Tensor text_proj_;     // embed_dim x joint_dim
  Tensor image_weight_;  // joint_dim x raw_dim
  Tensor image_bias_;    // joint_dim
  std::string weight_digest_;
};

}  // namespace promptlab
