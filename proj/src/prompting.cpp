#include "promptlab/prompting.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "promptlab/digest.hpp"
#include "promptlab/errors.hpp"
#include "promptlab/rng.hpp"

namespace promptlab {

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::zero_shot: return "zero_shot";
    case HeadKind::static_prompt: return "static_prompt";
    case HeadKind::conditional_prompt: return "conditional_prompt";
  }
  throw ConfigError("unknown head kind value");
}

HeadKind head_kind_from_string(std::string_view name) {
  if (name == "zero_shot") return HeadKind::zero_shot;
  if (name == "static_prompt") return HeadKind::static_prompt;
  if (name == "conditional_prompt") return HeadKind::conditional_prompt;
  throw ConfigError("unknown head kind '" + std::string(name) + "'");
}

std::string to_string(ContextInit init) {
  switch (init) {
    case ContextInit::word_embedding: return "word_embedding";
    case ContextInit::random_gauss: return "random_gauss";
  }
  throw ConfigError("unknown context init value");
}

ContextInit context_init_from_string(std::string_view name) {
  if (name == "word_embedding") return ContextInit::word_embedding;
  if (name == "random_gauss") return ContextInit::random_gauss;
  throw ConfigError("unknown context init '" + std::string(name) + "'");
}

ContextVectors init_context(const FrozenDualEncoder& enc, ContextInit mode,
                            std::size_t context_len, std::uint64_t seed) {
  if (context_len == 0) throw ConfigError("context length must be positive");
  std::size_t d = enc.config().embed_dim;
  ContextVectors ctx;
  ctx.init = mode;
  if (mode == ContextInit::word_embedding) {
    std::vector<std::uint32_t> ids = enc.tokenize(kDefaultTemplate);
    if (context_len != ids.size()) {
      throw ConfigError("word_embedding init fixes the context length at " +
                        std::to_string(ids.size()) + ", got " + std::to_string(context_len));
    }
    Tensor rows = enc.token_rows(ids);
    ctx.vectors = Tensor::parameter({ids.size(), d},
                                    std::vector<double>(rows.values().begin(), rows.values().end()));
  } else {
    Rng rng(mix_seed(seed, 0x637478ULL));  // "ctx"
    std::vector<double> values(context_len * d);
    for (double& v : values) v = rng.gaussian(0.0, 0.02);
    ctx.vectors = Tensor::parameter({context_len, d}, std::move(values));
  }
  return ctx;
}

MetaNet MetaNet::init(std::size_t feature_dim, std::size_t embed_dim, std::uint64_t seed) {
  if (feature_dim == 0 || embed_dim == 0) {
    throw ConfigError("meta net dimensions must be positive");
  }
  std::size_t hidden = std::max<std::size_t>(1, feature_dim / 16);
  Rng rng(mix_seed(seed, 0x6d657461ULL));  // "meta"
  MetaNet net;
  std::vector<double> v1(feature_dim * hidden);
  for (double& v : v1) v = rng.gaussian(0.0, 0.02);
  net.w1 = Tensor::parameter({feature_dim, hidden}, std::move(v1));
  std::vector<double> v2(hidden * embed_dim);
  for (double& v : v2) v = rng.gaussian(0.0, 0.02);
  net.w2 = Tensor::parameter({hidden, embed_dim}, std::move(v2));
  return net;
}

Tensor MetaNet::shift(const Tensor& pre_feature) const {
  if (pre_feature.rank() != 1 || pre_feature.size() != w1.rows()) {
    throw ConfigError("meta net input of shape " + shape_string(pre_feature.shape()) +
                      " does not match feature_dim " + std::to_string(w1.rows()));
  }
  return matmul(relu(matmul(pre_feature, w1)), w2);
}

void MetaNet::zero() {
  for (Tensor* t : {&w1, &w2}) {
    auto values = t->mutable_values();
    std::fill(values.begin(), values.end(), 0.0);
  }
}

std::optional<std::size_t> LabelSpace::index_of(std::uint32_t class_id) const {
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i].class_id == class_id) return i;
  }
  return std::nullopt;
}

PromptHead PromptHead::make_zero_shot(const FrozenDualEncoder& enc) {
  return PromptHead(HeadKind::zero_shot, enc);
}

PromptHead PromptHead::make_static(const FrozenDualEncoder& enc, ContextVectors ctx,
                                   std::uint64_t init_seed) {
  if (ctx.dim() != enc.config().embed_dim) {
    throw ConfigError("context width " + std::to_string(ctx.dim()) +
                      " does not match embed_dim " + std::to_string(enc.config().embed_dim));
  }
  PromptHead head(HeadKind::static_prompt, enc);
  head.ctx_ = std::move(ctx);
  head.init_seed_ = init_seed;
  return head;
}

PromptHead PromptHead::make_conditional(const FrozenDualEncoder& enc, ContextVectors ctx,
                                        MetaNet net, std::uint64_t init_seed) {
  if (ctx.dim() != enc.config().embed_dim) {
    throw ConfigError("context width " + std::to_string(ctx.dim()) +
                      " does not match embed_dim " + std::to_string(enc.config().embed_dim));
  }
  if (net.w1.rows() != enc.config().joint_dim || net.w2.cols() != enc.config().embed_dim ||
      net.w1.cols() != net.w2.rows()) {
    throw ConfigError("meta net shapes " + shape_string(net.w1.shape()) + " and " +
                      shape_string(net.w2.shape()) + " do not fit the encoder");
  }
  PromptHead head(HeadKind::conditional_prompt, enc);
  head.ctx_ = std::move(ctx);
  head.net_ = std::move(net);
  head.init_seed_ = init_seed;
  return head;
}

std::size_t PromptHead::count_parameters() const {
  std::size_t count = 0;
  if (ctx_) count += ctx_->vectors.size();
  if (net_) count += net_->parameter_count();
  return count;
}

std::vector<Tensor> PromptHead::trainable_parameters() const {
  std::vector<Tensor> params;
  if (ctx_) params.push_back(ctx_->vectors);
  if (net_) {
    params.push_back(net_->w1);
    params.push_back(net_->w2);
  }
  return params;
}

ContextVectors& PromptHead::context() {
  if (!ctx_) throw ConfigError("the zero-shot head has no context vectors");
  return *ctx_;
}

const ContextVectors& PromptHead::context() const {
  if (!ctx_) throw ConfigError("the zero-shot head has no context vectors");
  return *ctx_;
}

MetaNet& PromptHead::meta_net() {
  if (!net_) throw ConfigError("only the conditional head has a meta net");
  return *net_;
}

const MetaNet& PromptHead::meta_net() const {
  if (!net_) throw ConfigError("only the conditional head has a meta net");
  return *net_;
}

LabelSpace PromptHead::prepare_labels(std::span<const std::string> names,
                                      std::span<const std::uint32_t> class_ids) const {
  if (names.empty()) throw DataError("prepare_labels: empty name list");
  if (names.size() != class_ids.size()) {
    throw DataError("prepare_labels: " + std::to_string(names.size()) + " names but " +
                    std::to_string(class_ids.size()) + " class ids");
  }
  std::vector<std::uint32_t> sorted_ids(class_ids.begin(), class_ids.end());
  std::sort(sorted_ids.begin(), sorted_ids.end());
  if (std::adjacent_find(sorted_ids.begin(), sorted_ids.end()) != sorted_ids.end()) {
    throw DataError("prepare_labels: duplicate class id");
  }

  std::size_t prefix_len =
      kind_ == HeadKind::zero_shot ? enc_->tokenize(kDefaultTemplate).size() : ctx_->length();
  LabelSpace labels;
  labels.classes.reserve(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    ClassEntry entry;
    entry.class_id = class_ids[i];
    entry.name = names[i];
    entry.word_ids = enc_->tokenize(names[i]);
    if (entry.word_ids.empty()) {
      throw DataError("class name '" + names[i] + "' produced no tokens");
    }
    std::size_t total = 2 + prefix_len + entry.word_ids.size();
    if (total > enc_->config().max_len) {
      throw ConfigError("prompt for class '" + names[i] + "' needs " + std::to_string(total) +
                        " tokens, max_len is " + std::to_string(enc_->config().max_len));
    }
    entry.name_rows = enc_->token_rows(entry.word_ids);
    labels.classes.push_back(std::move(entry));
  }

  if (kind_ == HeadKind::zero_shot) {
    labels.cached_weights.reserve(labels.classes.size());
    for (std::size_t i = 0; i < labels.classes.size(); ++i) {
      labels.cached_weights.push_back(class_weight(labels, i, nullptr).detached_copy());
    }
  }
  return labels;
}

Tensor PromptHead::assemble_prompt(const LabelSpace& labels, std::size_t class_index,
                                   const Tensor* shift) const {
  if (class_index >= labels.size()) {
    throw DataError("class index " + std::to_string(class_index) + " outside label space of " +
                    std::to_string(labels.size()));
  }
  if (shift && kind_ != HeadKind::conditional_prompt) {
    throw ConfigError("only the conditional head accepts a context shift");
  }
  const ClassEntry& entry = labels.classes[class_index];
  std::vector<std::uint32_t> start = {kStartId};
  std::vector<std::uint32_t> end = {kEndId};

  Tensor middle;
  if (kind_ == HeadKind::zero_shot) {
    middle = enc_->token_rows(enc_->tokenize(kDefaultTemplate));
  } else if (shift) {
    middle = add(ctx_->vectors, repeat_row(*shift, ctx_->length()));
  } else {
    middle = ctx_->vectors;
  }
  return concat_rows(std::vector<Tensor>{enc_->token_rows(start), middle, entry.name_rows,
                                         enc_->token_rows(end)});
}

Tensor PromptHead::class_weight(const LabelSpace& labels, std::size_t class_index,
                                const Tensor* shift) const {
  Tensor rows = assemble_prompt(labels, class_index, shift);
  return enc_->encode_sequence(rows, rows.rows() - 1);
}

Tensor PromptHead::predict(const ImageFeature& image, const LabelSpace& labels) const {
  if (labels.size() == 0) throw DataError("predict: empty label space");
  if (!image.joint.defined() || image.joint.rank() != 1 ||
      image.joint.size() != enc_->config().joint_dim) {
    throw ConfigError("predict: image feature does not match joint_dim " +
                      std::to_string(enc_->config().joint_dim));
  }

  std::vector<Tensor> sims;
  sims.reserve(labels.size());
  if (kind_ == HeadKind::zero_shot) {
    if (labels.cached_weights.size() != labels.size()) {
      throw DataError("label space lacks cached weights; prepare it with the zero-shot head");
    }
    for (const Tensor& w : labels.cached_weights) {
      sims.push_back(cosine_similarity(image.joint, w));
    }
  } else if (kind_ == HeadKind::static_prompt) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      sims.push_back(cosine_similarity(image.joint, class_weight(labels, i, nullptr)));
    }
  } else {
    if (!image.pre.defined()) {
      throw ConfigError("predict: conditional head needs the pre-normalization feature");
    }
    Tensor shift = net_->shift(image.pre);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      sims.push_back(cosine_similarity(image.joint, class_weight(labels, i, &shift)));
    }
  }
  Tensor logits = scale(stack_scalars(sims), 1.0 / enc_->temperature());
  return softmax_row(logits);
}

std::string PromptHead::parameter_digest() const {
  Digest digest;
  digest.update_string(to_string(kind_));
  for (const Tensor& p : trainable_parameters()) {
    for (std::size_t dim : p.shape()) digest.update_u64(dim);
    digest.update_doubles(p.values());
  }
  return digest.hex();
}

// ---- checkpoint io ----------------------------------------------------

namespace {

constexpr char kMagic[8] = {'P', 'L', 'H', 'E', 'A', 'D', '1', '\n'};

void write_u64(std::ofstream& out, std::uint64_t value) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64(std::ifstream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw DataError("truncated checkpoint");
  std::uint64_t value = 0;
  for (int i = 7; i >= 0; --i) value = (value << 8) | bytes[i];
  return value;
}

void write_doubles(std::ofstream& out, std::span<const double> values) {
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(out, bits);
  }
}

std::vector<double> read_doubles(std::ifstream& in, std::size_t n) {
  std::vector<double> values(n);
  for (double& v : values) {
    std::uint64_t bits = read_u64(in);
    std::memcpy(&v, &bits, 8);
  }
  return values;
}

}  // namespace

void PromptHead::save_checkpoint(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_u64(out, static_cast<std::uint64_t>(kind_));
  write_u64(out, ctx_ ? static_cast<std::uint64_t>(ctx_->init) : 0);
  write_u64(out, init_seed_);
  write_u64(out, ctx_ ? ctx_->length() : 0);
  write_u64(out, enc_->config().embed_dim);
  write_u64(out, net_ ? net_->w1.rows() : 0);
  write_u64(out, net_ ? net_->hidden_dim() : 0);
  const std::string& digest = enc_->weight_digest();
  out.write(digest.data(), 16);
  std::uint64_t total = count_parameters();
  write_u64(out, total);
  if (ctx_) write_doubles(out, ctx_->vectors.values());
  if (net_) {
    write_doubles(out, net_->w1.values());
    write_doubles(out, net_->w2.values());
  }
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

PromptHead PromptHead::load_checkpoint(const std::filesystem::path& path,
                                       const FrozenDualEncoder& enc) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw DataError("not a head checkpoint: " + path.string());
  }
  std::uint64_t kind_raw = read_u64(in);
  if (kind_raw > 2) throw DataError("checkpoint head kind out of range");
  HeadKind kind = static_cast<HeadKind>(kind_raw);
  std::uint64_t init_raw = read_u64(in);
  if (init_raw > 1) throw DataError("checkpoint context init out of range");
  std::uint64_t init_seed = read_u64(in);
  std::uint64_t ctx_len = read_u64(in);
  std::uint64_t embed_dim = read_u64(in);
  std::uint64_t feature_dim = read_u64(in);
  std::uint64_t hidden_dim = read_u64(in);
  char digest[16];
  in.read(digest, 16);
  if (!in) throw DataError("truncated checkpoint");
  if (std::string_view(digest, 16) != enc.weight_digest()) {
    throw DataError("checkpoint encoder digest " + std::string(digest, 16) +
                    " does not match encoder " + enc.weight_digest());
  }
  if (embed_dim != enc.config().embed_dim) {
    throw DataError("checkpoint embed_dim " + std::to_string(embed_dim) +
                    " does not match encoder");
  }
  std::uint64_t total = read_u64(in);

  if (kind == HeadKind::zero_shot) {
    if (total != 0) throw DataError("zero-shot checkpoint carries parameters");
    return make_zero_shot(enc);
  }
  std::uint64_t expected = ctx_len * embed_dim;
  if (kind == HeadKind::conditional_prompt) {
    expected += feature_dim * hidden_dim + hidden_dim * embed_dim;
  }
  if (total != expected) {
    throw DataError("checkpoint parameter count " + std::to_string(total) +
                    " does not match header shapes");
  }

  ContextVectors ctx;
  ctx.init = static_cast<ContextInit>(init_raw);
  ctx.vectors = Tensor::parameter({ctx_len, embed_dim}, read_doubles(in, ctx_len * embed_dim));
  if (kind == HeadKind::static_prompt) {
    return make_static(enc, std::move(ctx), init_seed);
  }
  MetaNet net;
  net.w1 = Tensor::parameter({feature_dim, hidden_dim}, read_doubles(in, feature_dim * hidden_dim));
  net.w2 = Tensor::parameter({hidden_dim, embed_dim}, read_doubles(in, hidden_dim * embed_dim));
  return make_conditional(enc, std::move(ctx), std::move(net), init_seed);
}

}  // namespace promptlab
