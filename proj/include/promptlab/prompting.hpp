#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "promptlab/encoder.hpp"
#include "promptlab/tensor.hpp"

namespace promptlab {

// The three classification heads. zero_shot scores class names through a
// fixed template; static_prompt learns shared context vectors; and
// conditional_prompt additionally shifts those vectors per image.
enum class HeadKind { zero_shot, static_prompt, conditional_prompt };

std::string to_string(HeadKind kind);
HeadKind head_kind_from_string(std::string_view name);  // throws ConfigError

enum class ContextInit { word_embedding, random_gauss };

std::string to_string(ContextInit init);
ContextInit context_init_from_string(std::string_view name);  // throws ConfigError

// The phrase whose embedding rows seed the context in word_embedding mode.
inline constexpr const char* kDefaultTemplate = "a photo of a";

// Trainable context rows shared by every class prompt.
struct ContextVectors {
  Tensor vectors;  // length x embed_dim parameter leaf
  ContextInit init = ContextInit::word_embedding;
  std::size_t length() const { return vectors.rows(); }
  std::size_t dim() const { return vectors.cols(); }
};

// word_embedding mode copies the template's embedding rows and therefore
// requires context_len to equal the template's word count. random_gauss
// draws every coordinate from N(0, 0.02) and accepts any length.
ContextVectors init_context(const FrozenDualEncoder& enc, ContextInit mode,
                            std::size_t context_len, std::uint64_t seed);

// Two bias-free linear maps around a relu bottleneck. Turns the image's
// pre-normalization feature into an additive context shift.
struct MetaNet {
  Tensor w1;  // feature_dim x hidden
  Tensor w2;  // hidden x embed_dim

  static MetaNet init(std::size_t feature_dim, std::size_t embed_dim, std::uint64_t seed);

  Tensor shift(const Tensor& pre_feature) const;
  std::size_t hidden_dim() const { return w1.cols(); }
  std::size_t parameter_count() const { return w1.size() + w2.size(); }
  // Zeroes both maps in place; the head then behaves exactly like a
  // static prompt, which the tests rely on.
  void zero();
};

struct ClassEntry {
  std::uint32_t class_id = 0;
  std::string name;
  std::vector<std::uint32_t> word_ids;
  Tensor name_rows;  // frozen embedding rows for the name words
};

// An ordered label set prepared against one encoder. For the zero-shot
// head the per-class text features are computed once and cached here.
struct LabelSpace {
  std::vector<ClassEntry> classes;
  std::vector<Tensor> cached_weights;

  std::size_t size() const { return classes.size(); }
  std::optional<std::size_t> index_of(std::uint32_t class_id) const;
};

class PromptHead {
 public:
  static PromptHead make_zero_shot(const FrozenDualEncoder& enc);
  static PromptHead make_static(const FrozenDualEncoder& enc, ContextVectors ctx,
                                std::uint64_t init_seed);
  static PromptHead make_conditional(const FrozenDualEncoder& enc, ContextVectors ctx,
                                     MetaNet net, std::uint64_t init_seed);

  HeadKind kind() const { return kind_; }
  const FrozenDualEncoder& encoder() const { return *enc_; }
  std::uint64_t init_seed() const { return init_seed_; }

  // Trainable scalar count: context plus, for the conditional head, both
  // meta maps. The zero-shot head owns nothing.
  std::size_t count_parameters() const;
  std::vector<Tensor> trainable_parameters() const;

  ContextVectors& context();
  const ContextVectors& context() const;
  MetaNet& meta_net();
  const MetaNet& meta_net() const;

  // Tokenizes the names (zero-shot: also encodes and caches the class
  // weights). Order of names defines the label indices.
  LabelSpace prepare_labels(std::span<const std::string> names,
                            std::span<const std::uint32_t> class_ids) const;

  // Prompt rows for one class: start row, context rows (optionally
  // shifted), the name's word rows, end row.
  Tensor assemble_prompt(const LabelSpace& labels, std::size_t class_index,
                         const Tensor* shift) const;

  // Unit-norm text feature for one class under the current parameters.
  Tensor class_weight(const LabelSpace& labels, std::size_t class_index,
                      const Tensor* shift) const;

  // Probability vector over the label space for one image. Gradients
  // flow to the head parameters when they are grad-enabled.
  Tensor predict(const ImageFeature& image, const LabelSpace& labels) const;

  // Digest of the trainable parameter values.
  std::string parameter_digest() const;

  void save_checkpoint(const std::filesystem::path& path) const;
  // Refuses (DataError) a checkpoint written against a different encoder.
  static PromptHead load_checkpoint(const std::filesystem::path& path,
                                    const FrozenDualEncoder& enc);

 private:
  PromptHead(HeadKind kind, const FrozenDualEncoder& enc) : kind_(kind), enc_(&enc) {}

  HeadKind kind_;
  const FrozenDualEncoder* enc_;
  std::optional<ContextVectors> ctx_;
  std::optional<MetaNet> net_;
  std::uint64_t init_seed_ = 0;
};

}  // namespace promptlab
