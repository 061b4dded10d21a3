#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "promptlab/encoder.hpp"
#include "promptlab/errors.hpp"
#include "promptlab/prompting.hpp"
#include "promptlab/rng.hpp"
#include "promptlab/tensor.hpp"

using namespace promptlab;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.embed_dim = 8;
  cfg.joint_dim = 8;
  cfg.raw_dim = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.max_len = 12;
  cfg.vocab = 64;
  return cfg;
}

std::vector<double> probe_raw(const EncoderConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> raw(cfg.raw_dim);
  for (double& v : raw) v = rng.gaussian(0.0, 0.2);
  return raw;
}

struct TinyLab {
  FrozenDualEncoder enc;
  std::vector<std::string> names;
  std::vector<std::uint32_t> ids;

  TinyLab() : enc(tiny_config(), 41), names{"amber drum", "plain kite"}, ids{0, 1} {}
};

}  // namespace

TEST_CASE("word embedding init copies the template rows") {
  FrozenDualEncoder enc(tiny_config(), 4);
  ContextVectors ctx = init_context(enc, ContextInit::word_embedding, 4, 0);
  CHECK(ctx.length() == 4);
  CHECK(ctx.dim() == enc.config().embed_dim);
  CHECK(ctx.vectors.requires_grad());

  Tensor rows = enc.token_rows(enc.tokenize(kDefaultTemplate));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(ctx.vectors.values()[i] == rows.values()[i]);
  }

  CHECK_THROWS_AS(init_context(enc, ContextInit::word_embedding, 8, 0), ConfigError);
  CHECK_THROWS_AS(init_context(enc, ContextInit::word_embedding, 0, 0), ConfigError);
}

TEST_CASE("random init is seeded and sized freely") {
  FrozenDualEncoder enc(tiny_config(), 4);
  for (std::size_t m : {1, 4, 8}) {
    ContextVectors ctx = init_context(enc, ContextInit::random_gauss, m, 9);
    CHECK(ctx.length() == m);
    CHECK(ctx.init == ContextInit::random_gauss);
  }
  ContextVectors a = init_context(enc, ContextInit::random_gauss, 6, 9);
  ContextVectors b = init_context(enc, ContextInit::random_gauss, 6, 9);
  ContextVectors c = init_context(enc, ContextInit::random_gauss, 6, 10);
  bool same = true, diff = false;
  for (std::size_t i = 0; i < a.vectors.size(); ++i) {
    same = same && a.vectors.values()[i] == b.vectors.values()[i];
    diff = diff || a.vectors.values()[i] != c.vectors.values()[i];
  }
  CHECK(same);
  CHECK(diff);

  // Spread matches the declared 0.02 within sampling noise.
  ContextVectors wide = init_context(enc, ContextInit::random_gauss, 500, 3);
  double m2 = 0.0;
  for (double v : wide.vectors.values()) m2 += v * v;
  double std_hat = std::sqrt(m2 / static_cast<double>(wide.vectors.size()));
  CHECK(std_hat == doctest::Approx(0.02).epsilon(0.1));
}

TEST_CASE("meta net bottleneck sizing and parameter count") {
  MetaNet big = MetaNet::init(512, 512, 0);
  CHECK(big.hidden_dim() == 32);
  CHECK(big.parameter_count() == 512 * 32 + 32 * 512);

  MetaNet small = MetaNet::init(8, 8, 0);
  CHECK(small.hidden_dim() == 1);  // floor(8/16) clamps to 1
  CHECK(small.parameter_count() == 8 + 8);

  MetaNet mid = MetaNet::init(32, 16, 0);
  CHECK(mid.hidden_dim() == 2);
  CHECK(mid.parameter_count() == 32 * 2 + 2 * 16);

  Tensor pre = Tensor::from_values({8}, {0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2, 0.4});
  Tensor shift = small.shift(pre);
  CHECK(shift.rank() == 1);
  CHECK(shift.size() == 8);

  small.zero();
  Tensor zero_shift = small.shift(pre);
  for (double v : zero_shift.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(small.shift(Tensor::from_values({3}, {1, 2, 3})), ConfigError);
}

TEST_CASE("parameter counts per head kind") {
  TinyLab lab;
  PromptHead zs = PromptHead::make_zero_shot(lab.enc);
  CHECK(zs.count_parameters() == 0);
  CHECK(zs.trainable_parameters().empty());

  PromptHead st = PromptHead::make_static(
      lab.enc, init_context(lab.enc, ContextInit::word_embedding, 4, 1), 1);
  CHECK(st.count_parameters() == 4 * 8);
  CHECK(st.trainable_parameters().size() == 1);

  PromptHead cond = PromptHead::make_conditional(
      lab.enc, init_context(lab.enc, ContextInit::word_embedding, 4, 1),
      MetaNet::init(8, 8, 1), 1);
  CHECK(cond.count_parameters() == 4 * 8 + 8 + 8);
  CHECK(cond.trainable_parameters().size() == 3);

  CHECK_THROWS_AS(zs.context(), ConfigError);
  CHECK_THROWS_AS(st.meta_net(), ConfigError);
}

TEST_CASE("prompt assembly layout: context then class tokens") {
  TinyLab lab;
  PromptHead st = PromptHead::make_static(
      lab.enc, init_context(lab.enc, ContextInit::random_gauss, 3, 2), 2);
  LabelSpace labels = st.prepare_labels(lab.names, lab.ids);

  Tensor rows = st.assemble_prompt(labels, 0, nullptr);
  const ClassEntry& entry = labels.classes[0];
  REQUIRE(rows.rows() == 2 + 3 + entry.word_ids.size());

  std::vector<std::uint32_t> start = {kStartId};
  std::vector<std::uint32_t> end = {kEndId};
  Tensor start_row = lab.enc.token_rows(start);
  Tensor end_row = lab.enc.token_rows(end);
  std::size_t d = lab.enc.config().embed_dim;
  for (std::size_t j = 0; j < d; ++j) {
    CHECK(rows.at(0, j) == start_row.at(0, j));
    CHECK(rows.at(rows.rows() - 1, j) == end_row.at(0, j));
  }
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < d; ++j)
      CHECK(rows.at(1 + i, j) == st.context().vectors.at(i, j));
  for (std::size_t i = 0; i < entry.word_ids.size(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      CHECK(rows.at(4 + i, j) == entry.name_rows.at(i, j));

  CHECK_THROWS_AS(st.assemble_prompt(labels, 5, nullptr), DataError);
  Tensor fake_shift = Tensor::zeros({8});
  CHECK_THROWS_AS(st.assemble_prompt(labels, 0, &fake_shift), ConfigError);
}

TEST_CASE("label preparation validates input") {
  TinyLab lab;
  PromptHead st = PromptHead::make_static(
      lab.enc, init_context(lab.enc, ContextInit::word_embedding, 4, 0), 0);
  std::vector<std::string> empty;
  std::vector<std::uint32_t> no_ids;
  CHECK_THROWS_AS(st.prepare_labels(empty, no_ids), DataError);

  std::vector<std::string> two = {"a", "b"};
  std::vector<std::uint32_t> dup = {3, 3};
  CHECK_THROWS_AS(st.prepare_labels(two, dup), DataError);

  std::vector<std::string> blank = {"   "};
  std::vector<std::uint32_t> one = {0};
  CHECK_THROWS_AS(st.prepare_labels(blank, one), DataError);

  std::vector<std::string> lengthy = {"one two three four five six seven"};
  CHECK_THROWS_AS(st.prepare_labels(lengthy, one), ConfigError);
}

TEST_CASE("zero-shot predictions match a brute-force oracle") {
  TinyLab lab;
  PromptHead zs = PromptHead::make_zero_shot(lab.enc);
  LabelSpace labels = zs.prepare_labels(lab.names, lab.ids);
  REQUIRE(labels.cached_weights.size() == 2);

  for (std::uint64_t probe = 0; probe < 10; ++probe) {
    ImageFeature img = lab.enc.encode_image(probe_raw(lab.enc.config(), 100 + probe));
    Tensor probs = zs.predict(img, labels);

    // Oracle: cosine of unit vectors, divided by temperature, softmaxed
    // with plain double arithmetic.
    std::vector<double> logits(2);
    for (std::size_t k = 0; k < 2; ++k) {
      Tensor w = lab.enc.encode_sequence(
          lab.enc.text_sequence(std::string(kDefaultTemplate) + " " + lab.names[k]));
      double dot = 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) dot += img.joint.at(j) * w.at(j);
      logits[k] = dot / lab.enc.temperature();
    }
    double m = std::max(logits[0], logits[1]);
    double z0 = std::exp(logits[0] - m), z1 = std::exp(logits[1] - m);
    double total = z0 + z1;
    CHECK(std::abs(probs.at(0) - z0 / total) < 1e-10);
    CHECK(std::abs(probs.at(1) - z1 / total) < 1e-10);
  }
}

TEST_CASE("predictions are proper distributions for every head") {
  TinyLab lab;
  std::vector<PromptHead> heads;
  heads.push_back(PromptHead::make_zero_shot(lab.enc));
  heads.push_back(PromptHead::make_static(
      lab.enc, init_context(lab.enc, ContextInit::word_embedding, 4, 5), 5));
  heads.push_back(PromptHead::make_conditional(
      lab.enc, init_context(lab.enc, ContextInit::word_embedding, 4, 5),
      MetaNet::init(8, 8, 5), 5));
  ImageFeature img = lab.enc.encode_image(probe_raw(lab.enc.config(), 77));
  for (const PromptHead& head : heads) {
    LabelSpace labels = head.prepare_labels(lab.names, lab.ids);
    Tensor probs = head.predict(img, labels);
    double total = 0.0;
    for (double p : probs.values()) {
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
      total += p;
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("conditional head with a zeroed meta net equals the static head") {
  TinyLab lab;
  PromptHead st = PromptHead::make_static(
      lab.enc, init_context(lab.enc, ContextInit::word_embedding, 4, 8), 8);
  PromptHead cond = PromptHead::make_conditional(
      lab.enc, init_context(lab.enc, ContextInit::word_embedding, 4, 8),
      MetaNet::init(8, 8, 8), 8);
  cond.meta_net().zero();

  LabelSpace st_labels = st.prepare_labels(lab.names, lab.ids);
  LabelSpace cond_labels = cond.prepare_labels(lab.names, lab.ids);
  for (std::uint64_t probe = 0; probe < 20; ++probe) {
    ImageFeature img = lab.enc.encode_image(probe_raw(lab.enc.config(), 500 + probe));
    Tensor ps = st.predict(img, st_labels);
    Tensor pc = cond.predict(img, cond_labels);
    for (std::size_t k = 0; k < ps.size(); ++k) {
      CHECK(std::abs(ps.at(k) - pc.at(k)) <= 1e-9);
    }
  }
}

TEST_CASE("gradients reach every trainable parameter and check out") {
  TinyLab lab;
  ImageFeature img = lab.enc.encode_image(probe_raw(lab.enc.config(), 13));

  SUBCASE("static head") {
    PromptHead head = PromptHead::make_static(
        lab.enc, init_context(lab.enc, ContextInit::word_embedding, 4, 3), 3);
    LabelSpace labels = head.prepare_labels(lab.names, lab.ids);
    auto loss_fn = [&]() { return cross_entropy(head.predict(img, labels), 1); };
    GradientMap grads = backward(loss_fn());
    CHECK(grads.size() == 1);
    CHECK(grads.contains(head.context().vectors));
    std::vector<Tensor> params = head.trainable_parameters();
    CHECK(finite_difference_check(loss_fn, params, 1e-5) < 1e-4);
  }

  SUBCASE("conditional head") {
    PromptHead head = PromptHead::make_conditional(
        lab.enc, init_context(lab.enc, ContextInit::word_embedding, 4, 3),
        MetaNet::init(8, 8, 3), 3);
    LabelSpace labels = head.prepare_labels(lab.names, lab.ids);
    auto loss_fn = [&]() { return cross_entropy(head.predict(img, labels), 0); };
    GradientMap grads = backward(loss_fn());
    CHECK(grads.size() == 3);
    for (const Tensor& p : head.trainable_parameters()) CHECK(grads.contains(p));
    std::vector<Tensor> params = head.trainable_parameters();
    CHECK(finite_difference_check(loss_fn, params, 1e-5) < 1e-4);
  }
}

TEST_CASE("checkpoints round-trip and refuse foreign encoders") {
  TinyLab lab;
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "promptlab_ckpt_test";
  fs::create_directories(dir);

  PromptHead cond = PromptHead::make_conditional(
      lab.enc, init_context(lab.enc, ContextInit::random_gauss, 6, 21),
      MetaNet::init(8, 8, 21), 21);
  fs::path file = dir / "cond.ckpt";
  cond.save_checkpoint(file);

  PromptHead loaded = PromptHead::load_checkpoint(file, lab.enc);
  CHECK(loaded.kind() == HeadKind::conditional_prompt);
  CHECK(loaded.init_seed() == 21);
  CHECK(loaded.context().init == ContextInit::random_gauss);
  CHECK(loaded.parameter_digest() == cond.parameter_digest());

  LabelSpace labels = cond.prepare_labels(lab.names, lab.ids);
  LabelSpace labels2 = loaded.prepare_labels(lab.names, lab.ids);
  ImageFeature img = lab.enc.encode_image(probe_raw(lab.enc.config(), 1));
  Tensor before = cond.predict(img, labels);
  Tensor after = loaded.predict(img, labels2);
  for (std::size_t k = 0; k < before.size(); ++k) CHECK(before.at(k) == after.at(k));

  // Another seed means another encoder; the digest gate must hold.
  FrozenDualEncoder other(tiny_config(), 999);
  CHECK_THROWS_AS(PromptHead::load_checkpoint(file, other), DataError);

  // Truncation is detected.
  fs::path cut = dir / "cut.ckpt";
  {
    std::ifstream in(file, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    std::ofstream out(cut, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(PromptHead::load_checkpoint(cut, lab.enc), DataError);

  // Static head round trip.
  PromptHead st = PromptHead::make_static(
      lab.enc, init_context(lab.enc, ContextInit::word_embedding, 4, 2), 2);
  fs::path st_file = dir / "static.ckpt";
  st.save_checkpoint(st_file);
  PromptHead st_loaded = PromptHead::load_checkpoint(st_file, lab.enc);
  CHECK(st_loaded.kind() == HeadKind::static_prompt);
  CHECK(st_loaded.parameter_digest() == st.parameter_digest());

  fs::remove_all(dir);
}

TEST_CASE("head kind and init names round-trip") {
  for (HeadKind kind : {HeadKind::zero_shot, HeadKind::static_prompt,
                        HeadKind::conditional_prompt}) {
    CHECK(head_kind_from_string(to_string(kind)) == kind);
  }
  for (ContextInit init : {ContextInit::word_embedding, ContextInit::random_gauss}) {
    CHECK(context_init_from_string(to_string(init)) == init);
  }
  CHECK_THROWS_AS(head_kind_from_string("bogus"), ConfigError);
  CHECK_THROWS_AS(context_init_from_string("bogus"), ConfigError);
}
