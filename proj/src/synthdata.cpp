#include "promptlab/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <utility>

#include "promptlab/digest.hpp"
#include "promptlab/errors.hpp"
#include "promptlab/prompting.hpp"
#include "promptlab/rng.hpp"

namespace promptlab {

namespace {

constexpr const char* kAdjectives[] = {"red",   "blue",  "green", "amber",
                                       "violet", "ivory", "coral", "slate"};
constexpr const char* kNouns[] = {"bird", "cup",  "boat", "lantern", "beetle",
                                  "kite", "fern", "drum", "mask",    "wheel"};

constexpr double kSaturationLimit = 0.98;

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

void normalize_in_place(std::vector<double>& v) {
  double n = norm(v);
  if (n == 0.0) throw NumericError("cannot normalize a zero vector");
  for (double& x : v) x /= n;
}

// Shared directions of the encoder's text feature cloud. Every prompt
// feature is dominated by the same two components (the cone center and
// the lexicon mean's residual); class identity lives in the tiny
// differential that remains after both are projected out. The generator
// separates classes along those differentials and keeps its bias axis
// orthogonal to the shared directions, so group structure and class
// structure never mix.
struct JointGeometry {
  std::vector<double> c0;      // unit mean feature of single-noun prompts
  std::vector<double> tbar;    // mean feature over the full name lexicon
  std::vector<double> q2;      // unit residual of tbar against c0
  std::vector<double> d_bias;  // unit bias axis, orthogonal to c0 and q2

  static JointGeometry probe(const FrozenDualEncoder& enc, std::uint64_t bias_axis_seed) {
    JointGeometry g;
    std::size_t dj = enc.config().joint_dim;
    auto feature = [&](const std::string& name) {
      Tensor f = enc.encode_sequence(
          enc.text_sequence(std::string(kDefaultTemplate) + " " + name));
      return std::vector<double>(f.values().begin(), f.values().end());
    };

    g.c0.assign(dj, 0.0);
    for (const char* noun : kNouns) {
      std::vector<double> f = feature(noun);
      for (std::size_t i = 0; i < dj; ++i) g.c0[i] += f[i];
    }
    normalize_in_place(g.c0);

    g.tbar.assign(dj, 0.0);
    std::size_t pairs = 0;
    for (const char* adj : kAdjectives) {
      for (const char* noun : kNouns) {
        std::vector<double> f = feature(std::string(adj) + " " + noun);
        for (std::size_t i = 0; i < dj; ++i) g.tbar[i] += f[i];
        ++pairs;
      }
    }
    for (double& v : g.tbar) v /= static_cast<double>(pairs);

    g.q2 = g.tbar;
    double p = dot(g.q2, g.c0);
    for (std::size_t i = 0; i < dj; ++i) g.q2[i] -= p * g.c0[i];
    normalize_in_place(g.q2);

    Rng rng(mix_seed(bias_axis_seed, 0x62696173ULL));
    for (int attempt = 0; attempt < 32; ++attempt) {
      std::vector<double> v(dj);
      for (double& x : v) x = rng.gaussian();
      g.strip(v);
      double n = norm(v);
      if (n > 1e-9) {
        for (double& x : v) x /= n;
        g.d_bias = std::move(v);
        return g;
      }
    }
    throw NumericError("failed to draw a bias axis orthogonal to the text cloud");
  }

  // Removes the c0, q2 and (once set) d_bias components in place.
  void strip(std::vector<double>& v) const {
    for (const std::vector<double>* axis : {&c0, &q2, &d_bias}) {
      if (axis->empty()) continue;
      double p = dot(v, *axis);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * (*axis)[i];
    }
  }

  std::vector<double> stripped_unit(Rng& rng) const {
    for (int attempt = 0; attempt < 32; ++attempt) {
      std::vector<double> v(c0.size());
      for (double& x : v) x = rng.gaussian();
      strip(v);
      double n = norm(v);
      if (n > 1e-9) {
        for (double& x : v) x /= n;
        return v;
      }
    }
    throw NumericError("failed to draw a direction orthogonal to the text cloud");
  }
};

// Inverts the image tower: finds raw vectors with a prescribed pre-tanh
// response, via the minimum-norm solution through a Cholesky factor of
// the map's Gram matrix.
class ImageMapInverter {
 public:
  explicit ImageMapInverter(const FrozenDualEncoder& enc)
      : dj_(enc.config().joint_dim), draw_(enc.config().raw_dim) {
    auto av = enc.image_weight().values();
    a_.assign(av.begin(), av.end());
    auto bv = enc.image_bias().values();
    bias_.assign(bv.begin(), bv.end());

    // Gram matrix of the rows, then its Cholesky factor.
    std::vector<double> gram(dj_ * dj_, 0.0);
    for (std::size_t i = 0; i < dj_; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < draw_; ++k) acc += a_[i * draw_ + k] * a_[j * draw_ + k];
        gram[i * dj_ + j] = acc;
        gram[j * dj_ + i] = acc;
      }
    }
    chol_.assign(dj_ * dj_, 0.0);
    for (std::size_t i = 0; i < dj_; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        double acc = gram[i * dj_ + j];
        for (std::size_t k = 0; k < j; ++k) acc -= chol_[i * dj_ + k] * chol_[j * dj_ + k];
        if (i == j) {
          if (acc <= 0.0) throw NumericError("image map is numerically rank-deficient");
          chol_[i * dj_ + i] = std::sqrt(acc);
        } else {
          chol_[i * dj_ + j] = acc / chol_[j * dj_ + j];
        }
      }
    }
  }

  // Raw vector z with A z = delta (minimum norm).
  std::vector<double> direction(std::span<const double> delta) const {
    std::vector<double> w(dj_);
    for (std::size_t i = 0; i < dj_; ++i) {
      double acc = delta[i];
      for (std::size_t k = 0; k < i; ++k) acc -= chol_[i * dj_ + k] * w[k];
      w[i] = acc / chol_[i * dj_ + i];
    }
    std::vector<double> v(dj_);
    for (std::size_t ii = dj_; ii-- > 0;) {
      double acc = w[ii];
      for (std::size_t k = ii + 1; k < dj_; ++k) acc -= chol_[k * dj_ + ii] * v[k];
      v[ii] = acc / chol_[ii * dj_ + ii];
    }
    std::vector<double> z(draw_, 0.0);
    for (std::size_t i = 0; i < dj_; ++i) {
      double vi = v[i];
      for (std::size_t k = 0; k < draw_; ++k) z[k] += a_[i * draw_ + k] * vi;
    }
    return z;
  }

  // Raw vector whose saturating response equals the pre-feature p.
  std::vector<double> raw_for_pre(std::span<const double> p) const {
    std::vector<double> y(dj_);
    for (std::size_t i = 0; i < dj_; ++i) {
      if (std::abs(p[i]) > kSaturationLimit) {
        throw DataError("pre-feature coordinate " + format_double(p[i]) +
                        " saturates the image map; lower the geometry gains");
      }
      y[i] = std::atanh(p[i]) - bias_[i];
    }
    return direction(y);
  }

 private:
  std::size_t dj_, draw_;
  std::vector<double> a_;
  std::vector<double> bias_;
  std::vector<double> chol_;
};

std::string template_prompt(const std::string& name) {
  return std::string(kDefaultTemplate) + " " + name;
}

bool names_share_word(const std::string& a, const std::string& b) {
  std::istringstream sa(a);
  std::string wa;
  while (sa >> wa) {
    std::istringstream sb(b);
    std::string wb;
    while (sb >> wb) {
      if (wa == wb) return true;
    }
  }
  return false;
}

void audit_lexicon_overlap(const TaskBundle& task) {
  for (std::uint32_t new_id : task.split.new_ids) {
    const std::string& name = task.class_by_id(new_id).name;
    bool shared = false;
    for (std::uint32_t base_id : task.split.base_ids) {
      if (names_share_word(name, task.class_by_id(base_id).name)) {
        shared = true;
        break;
      }
    }
    if (!shared) {
      throw DataError("new class '" + name + "' shares no word with any base class name");
    }
  }
}

std::string serialize_task(const TaskBundle& task);

}  // namespace

std::span<const char* const> name_adjectives() {
  return {kAdjectives, std::size(kAdjectives)};
}

std::span<const char* const> name_nouns() { return {kNouns, std::size(kNouns)}; }

void TaskGenParams::validate() const {
  encoder.validate();
  if (num_classes < 4) throw ConfigError("task needs at least four classes");
  std::size_t pairs = std::size(kAdjectives) * std::size(kNouns);
  if (num_classes > pairs) {
    throw ConfigError("lexicon supports at most " + std::to_string(pairs) + " classes");
  }
  if (train_pool_per_class == 0 || train_pool_per_class >= instances_per_class) {
    throw ConfigError("instances_per_class must exceed train_pool_per_class, which must be positive");
  }
  if (!(feature_gain > 0.0) || feature_gain > 0.9) {
    throw ConfigError("feature_gain must lie in (0, 0.9]");
  }
  if (!(cone_spread > 0.0)) throw ConfigError("cone_spread must be positive");
  if (name_mismatch < 0.0 || nuisance_std < 0.0 || within_noise < 0.0) {
    throw ConfigError("noise magnitudes must be non-negative");
  }
  if (!(min_margin > 0.0)) throw ConfigError("min_margin must be positive");
}

FrozenDualEncoder TaskBundle::make_encoder() const {
  FrozenDualEncoder enc(params.encoder, params.encoder_seed);
  if (!encoder_digest.empty() && enc.weight_digest() != encoder_digest) {
    throw DataError("task '" + name + "' was generated against encoder " + encoder_digest +
                    ", rebuilt encoder is " + enc.weight_digest());
  }
  return enc;
}

std::vector<std::string> TaskBundle::class_names() const {
  std::vector<std::string> names;
  names.reserve(classes.size());
  for (const TaskClass& c : classes) names.push_back(c.name);
  return names;
}

std::vector<std::uint32_t> TaskBundle::class_ids() const {
  std::vector<std::uint32_t> ids;
  ids.reserve(classes.size());
  for (const TaskClass& c : classes) ids.push_back(c.id);
  return ids;
}

const TaskClass& TaskBundle::class_by_id(std::uint32_t id) const {
  for (const TaskClass& c : classes) {
    if (c.id == id) return c;
  }
  throw DataError("task '" + name + "' has no class with id " + std::to_string(id));
}

std::vector<std::string> TaskBundle::names_for(std::span<const std::uint32_t> ids) const {
  std::vector<std::string> names;
  names.reserve(ids.size());
  for (std::uint32_t id : ids) names.push_back(class_by_id(id).name);
  return names;
}

namespace {

std::vector<const TaskInstance*> filter_instances(const TaskBundle& task,
                                                  std::span<const std::uint32_t> ids,
                                                  bool want_test) {
  std::set<std::uint32_t> wanted(ids.begin(), ids.end());
  std::vector<const TaskInstance*> out;
  for (const TaskInstance& inst : task.instances) {
    if (inst.is_test == want_test && wanted.count(inst.class_id)) out.push_back(&inst);
  }
  return out;
}

}  // namespace

std::vector<const TaskInstance*> TaskBundle::train_pool(
    std::span<const std::uint32_t> ids) const {
  return filter_instances(*this, ids, false);
}

std::vector<const TaskInstance*> TaskBundle::test_instances(
    std::span<const std::uint32_t> ids) const {
  return filter_instances(*this, ids, true);
}

std::string TaskBundle::digest() const {
  Digest d;
  d.update_string(serialize_task(*this));
  return d.hex();
}

TaskBundle generate_task(std::string name, const TaskGenParams& params, std::uint64_t seed) {
  params.validate();
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
    throw ConfigError("task name must be a single non-empty token");
  }

  TaskBundle task;
  task.name = std::move(name);
  task.seed = seed;
  task.params = params;

  FrozenDualEncoder enc(params.encoder, params.encoder_seed);
  task.encoder_digest = enc.weight_digest();

  std::size_t k = params.num_classes;
  std::vector<std::uint32_t> ids(k);
  for (std::size_t i = 0; i < k; ++i) ids[i] = static_cast<std::uint32_t>(i);
  task.split = split_base_new(ids, params.split_seed);

  Rng root(mix_seed(seed, 0x7461736bULL));  // "task"
  Rng name_rng(mix_seed(root.fork(1).next_u64(), params.name_seed));
  Rng geometry_rng = root.fork(2);
  Rng instance_rng = root.fork(3);

  // Unique (adjective, noun) pairs; both pools are reused across classes
  // so names share words by construction.
  std::set<std::pair<std::size_t, std::size_t>> used;
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  while (picks.size() < k) {
    std::size_t adj = static_cast<std::size_t>(name_rng.below(std::size(kAdjectives)));
    std::size_t noun = static_cast<std::size_t>(name_rng.below(std::size(kNouns)));
    if (used.insert({adj, noun}).second) picks.push_back({adj, noun});
  }

  std::set<std::uint32_t> base_set(task.split.base_ids.begin(), task.split.base_ids.end());
  // Repair pass: a new-class name must share a word with some base name.
  for (std::size_t i = 0; i < k; ++i) {
    if (base_set.count(ids[i])) continue;
    bool shared = false;
    for (std::uint32_t base_id : task.split.base_ids) {
      auto [badj, bnoun] = picks[base_id];
      if (badj == picks[i].first || bnoun == picks[i].second) {
        shared = true;
        break;
      }
    }
    if (shared) continue;
    for (std::uint32_t base_id : task.split.base_ids) {
      std::pair<std::size_t, std::size_t> candidate = {picks[base_id].first, picks[i].second};
      if (used.insert(candidate).second) {
        used.erase(picks[i]);
        picks[i] = candidate;
        shared = true;
        break;
      }
    }
    if (!shared) throw DataError("could not arrange shared words between base and new names");
  }

  task.classes.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    task.classes[i].id = ids[i];
    task.classes[i].name =
        std::string(kAdjectives[picks[i].first]) + " " + kNouns[picks[i].second];
  }

  // Joint-space construction: class directions sit around the text cone
  // center, separated along each name's own feature differential so the
  // name predicts where the class's images land.
  std::size_t dj = params.encoder.joint_dim;
  JointGeometry geo = JointGeometry::probe(enc, params.bias_axis_seed);

  std::vector<std::vector<double>> directions(k);
  for (std::size_t i = 0; i < k; ++i) {
    Tensor t = enc.encode_sequence(enc.text_sequence(template_prompt(task.classes[i].name)));
    std::vector<double> diff(dj);
    for (std::size_t c = 0; c < dj; ++c) diff[c] = t.at(c) - geo.tbar[c];
    geo.strip(diff);
    double n = norm(diff);
    std::vector<double> mixed;
    if (n > 1e-9) {
      for (double& x : diff) x /= n;
      std::vector<double> noise = geo.stripped_unit(geometry_rng);
      mixed.resize(dj);
      for (std::size_t c = 0; c < dj; ++c) {
        mixed[c] = diff[c] + params.name_mismatch * noise[c];
      }
    } else {
      mixed = geo.stripped_unit(geometry_rng);
    }
    normalize_in_place(mixed);
    std::vector<double> dir(dj);
    for (std::size_t c = 0; c < dj; ++c) dir[c] = geo.c0[c] + params.cone_spread * mixed[c];
    normalize_in_place(dir);
    directions[i] = std::move(dir);
  }

  ImageMapInverter inverter(enc);
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> p(dj);
    for (std::size_t c = 0; c < dj; ++c) p[c] = params.feature_gain * directions[i][c];
    task.classes[i].prototype = inverter.raw_for_pre(p);
  }

  double min_dist = 0.0;
  bool first = true;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < params.encoder.raw_dim; ++c) {
        double diff = task.classes[i].prototype[c] - task.classes[j].prototype[c];
        d2 += diff * diff;
      }
      double d = std::sqrt(d2);
      if (first || d < min_dist) {
        min_dist = d;
        first = false;
      }
    }
  }
  if (min_dist < params.min_margin) {
    throw DataError("prototype margin " + format_double(min_dist) + " below required " +
                    format_double(params.min_margin) +
                    "; the geometry cannot support this many classes");
  }
  task.realized_margin = min_dist;

  // Sanity: the inverse map must reproduce the intended pre-features.
  for (std::size_t i = 0; i < k; ++i) {
    ImageFeature feat = enc.encode_image(task.classes[i].prototype);
    for (std::size_t c = 0; c < dj; ++c) {
      double want = params.feature_gain * directions[i][c];
      if (std::abs(feat.pre.at(c) - want) > 1e-6) {
        throw NumericError("image map inversion drifted by " +
                           format_double(std::abs(feat.pre.at(c) - want)));
      }
    }
  }

  // Raw-space direction whose encoder response moves along the bias axis.
  std::vector<double> bias_delta(dj);
  for (std::size_t c = 0; c < dj; ++c) bias_delta[c] = params.feature_gain * geo.d_bias[c];
  std::vector<double> bias_step = inverter.direction(bias_delta);

  // Instances are the prototype plus seeded noise: a group offset along
  // the bias axis, a per-instance nuisance on the same axis, and
  // isotropic raw-space noise.
  std::size_t draw = params.encoder.raw_dim;
  std::uint32_t next_id = 0;
  task.instances.reserve(k * params.instances_per_class);
  for (std::size_t i = 0; i < k; ++i) {
    double group = base_set.count(ids[i]) ? params.base_bias : params.new_bias;
    for (std::size_t j = 0; j < params.instances_per_class; ++j) {
      double offset = group + instance_rng.gaussian(0.0, params.nuisance_std);
      TaskInstance inst;
      inst.id = next_id++;
      inst.class_id = ids[i];
      inst.is_test = j >= params.train_pool_per_class;
      inst.raw.resize(draw);
      for (std::size_t c = 0; c < draw; ++c) {
        inst.raw[c] = task.classes[i].prototype[c] + offset * bias_step[c] +
                      instance_rng.gaussian(0.0, params.within_noise);
      }
      task.instances.push_back(std::move(inst));
    }
  }

  // The noise budget must leave every instance closest to its own
  // prototype, so nearest-prototype labeling stays exact on the clean task.
  for (const TaskInstance& inst : task.instances) {
    double best = 0.0;
    std::uint32_t best_id = 0;
    bool first_class = true;
    for (const TaskClass& c : task.classes) {
      double d2 = 0.0;
      for (std::size_t d = 0; d < draw; ++d) {
        double diff = inst.raw[d] - c.prototype[d];
        d2 += diff * diff;
      }
      if (first_class || d2 < best) {
        best = d2;
        best_id = c.id;
        first_class = false;
      }
    }
    if (best_id != inst.class_id) {
      throw DataError("instance " + std::to_string(inst.id) +
                      " lands nearer a foreign prototype; noise exceeds the margin");
    }
  }

  audit_lexicon_overlap(task);
  return task;
}

void add_shift_rungs(TaskBundle& task, std::span<const double> magnitudes,
                     double noise_per_magnitude, std::uint64_t seed) {
  if (magnitudes.empty()) throw ConfigError("add_shift_rungs: no magnitudes given");
  for (std::size_t i = 0; i < magnitudes.size(); ++i) {
    double m = magnitudes[i];
    if (!std::isfinite(m) || m < 0.0) {
      throw ConfigError("shift magnitudes must be finite and non-negative");
    }
    if (i > 0 && m < magnitudes[i - 1]) {
      throw ConfigError("shift magnitudes must be sorted ascending");
    }
  }
  if (noise_per_magnitude < 0.0) throw ConfigError("shift noise must be non-negative");

  FrozenDualEncoder enc = task.make_encoder();
  JointGeometry geo = JointGeometry::probe(enc, task.params.bias_axis_seed);
  ImageMapInverter inverter(enc);
  std::vector<double> delta(geo.d_bias.size());
  for (std::size_t c = 0; c < delta.size(); ++c) {
    delta[c] = task.params.feature_gain * geo.d_bias[c];
  }
  std::vector<double> raw_step = inverter.direction(delta);

  std::vector<const TaskInstance*> test = task.test_instances(task.class_ids());
  if (test.empty()) throw DataError("add_shift_rungs: task has no test instances");

  Rng rng(mix_seed(seed, 0x72756e67ULL));  // "rung"
  for (double m : magnitudes) {
    ShiftRung rung;
    rung.magnitude = m;
    rung.instances.reserve(test.size());
    for (const TaskInstance* src : test) {
      TaskInstance inst = *src;
      if (m != 0.0) {
        for (std::size_t c = 0; c < inst.raw.size(); ++c) {
          inst.raw[c] += m * raw_step[c] + m * noise_per_magnitude * rng.gaussian();
        }
      }
      rung.instances.push_back(std::move(inst));
    }
    task.shift_rungs.push_back(std::move(rung));
  }
}

// ---- serialization ----------------------------------------------------

namespace {

void write_doubles_line(std::ostringstream& out, std::span<const double> values) {
  for (double v : values) out << " " << format_double(v);
}

std::string serialize_task(const TaskBundle& task) {
  std::ostringstream out;
  const TaskGenParams& p = task.params;
  out << "promptlab-task 1\n";
  out << "name " << task.name << "\n";
  out << "seed " << task.seed << "\n";
  out << "counts " << p.num_classes << " " << p.instances_per_class << " "
      << p.train_pool_per_class << "\n";
  const EncoderConfig& e = p.encoder;
  out << "encoder " << e.embed_dim << " " << e.joint_dim << " " << e.raw_dim << " " << e.layers
      << " " << e.heads << " " << e.max_len << " " << e.vocab << " "
      << format_double(e.temperature) << "\n";
  out << "encoder_seed " << p.encoder_seed << "\n";
  out << "geometry " << format_double(p.feature_gain) << " " << format_double(p.cone_spread)
      << " " << format_double(p.name_mismatch) << " " << format_double(p.base_bias) << " "
      << format_double(p.new_bias) << " " << format_double(p.nuisance_std) << " "
      << format_double(p.within_noise) << " " << p.bias_axis_seed << " "
      << format_double(p.min_margin) << " " << p.split_seed << " " << p.name_seed << "\n";
  out << "margin " << format_double(task.realized_margin) << "\n";
  out << "encoder_digest " << task.encoder_digest << "\n";
  out << "classes " << task.classes.size() << "\n";
  for (const TaskClass& c : task.classes) {
    std::istringstream words(c.name);
    std::vector<std::string> parts;
    std::string w;
    while (words >> w) parts.push_back(w);
    out << "class " << c.id << " " << parts.size();
    for (const std::string& part : parts) out << " " << part;
    write_doubles_line(out, c.prototype);
    out << "\n";
  }
  out << "base " << task.split.base_ids.size();
  for (std::uint32_t id : task.split.base_ids) out << " " << id;
  out << "\n";
  out << "new " << task.split.new_ids.size();
  for (std::uint32_t id : task.split.new_ids) out << " " << id;
  out << "\n";
  out << "instances " << task.instances.size() << "\n";
  for (const TaskInstance& inst : task.instances) {
    out << "inst " << inst.id << " " << inst.class_id << " " << (inst.is_test ? "t" : "p");
    write_doubles_line(out, inst.raw);
    out << "\n";
  }
  out << "rungs " << task.shift_rungs.size() << "\n";
  for (const ShiftRung& rung : task.shift_rungs) {
    out << "rung " << format_double(rung.magnitude) << " " << rung.instances.size() << "\n";
    for (const TaskInstance& inst : rung.instances) {
      out << "rinst " << inst.id << " " << inst.class_id;
      write_doubles_line(out, inst.raw);
      out << "\n";
    }
  }
  return out.str();
}

struct LineReader {
  explicit LineReader(std::string body) : stream(std::move(body)) {}

  std::istringstream stream;
  std::size_t line_no = 0;
  std::vector<std::string> fields;

  bool next() {
    std::string line;
    if (!std::getline(stream, line)) return false;
    ++line_no;
    fields.clear();
    std::istringstream split(line);
    std::string field;
    while (split >> field) fields.push_back(std::move(field));
    return true;
  }

  [[noreturn]] void fail(const std::string& why) const {
    throw DataError("task file line " + std::to_string(line_no) + ": " + why);
  }

  void expect(const char* tag, std::size_t min_fields) {
    if (!next()) throw DataError("task file truncated; expected '" + std::string(tag) + "'");
    if (fields.empty() || fields[0] != tag) {
      fail("expected '" + std::string(tag) + "', got '" +
           (fields.empty() ? std::string("<blank>") : fields[0]) + "'");
    }
    if (fields.size() < min_fields) fail("too few fields for '" + std::string(tag) + "'");
  }

  std::uint64_t u64(std::size_t idx) const {
    const std::string& f = fields.at(idx);
    std::uint64_t value = 0;
    for (char ch : f) {
      if (ch < '0' || ch > '9') {
        throw DataError("task file line " + std::to_string(line_no) + ": bad integer '" + f + "'");
      }
      value = value * 10 + static_cast<std::uint64_t>(ch - '0');
    }
    return value;
  }

  double f64(std::size_t idx) const {
    try {
      return parse_double(fields.at(idx));
    } catch (const DataError& e) {
      throw DataError("task file line " + std::to_string(line_no) + ": " + e.what());
    }
  }

  std::vector<double> f64_tail(std::size_t start, std::size_t count) const {
    if (fields.size() != start + count) {
      throw DataError("task file line " + std::to_string(line_no) + ": expected " +
                      std::to_string(count) + " numbers");
    }
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = f64(start + i);
    return out;
  }
};

}  // namespace

void save_task(const TaskBundle& task, const std::filesystem::path& path) {
  std::string body = serialize_task(task);
  Digest digest;
  digest.update_string(body);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open task file for writing: " + path.string());
  out << body << "digest " << digest.hex() << "\n";
  if (!out) throw DataError("failed writing task file: " + path.string());
}

TaskBundle load_task(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open task file: " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  std::string file = buffer.str();

  std::size_t digest_pos = file.rfind("digest ");
  if (digest_pos == std::string::npos || (digest_pos != 0 && file[digest_pos - 1] != '\n')) {
    throw DataError("task file has no digest line: " + path.string());
  }
  std::string body = file.substr(0, digest_pos);
  std::string digest_line = file.substr(digest_pos);
  std::istringstream digest_split(digest_line);
  std::string tag, stored;
  digest_split >> tag >> stored;
  Digest recomputed;
  recomputed.update_string(body);
  if (stored != recomputed.hex()) {
    throw DataError("task file digest mismatch: stored " + stored + ", content " +
                    recomputed.hex());
  }

  LineReader reader(std::move(body));
  reader.expect("promptlab-task", 2);
  if (reader.fields[1] != "1") reader.fail("unsupported task format version");

  TaskBundle task;
  reader.expect("name", 2);
  task.name = reader.fields[1];
  reader.expect("seed", 2);
  task.seed = reader.u64(1);
  reader.expect("counts", 4);
  TaskGenParams& p = task.params;
  p.num_classes = reader.u64(1);
  p.instances_per_class = reader.u64(2);
  p.train_pool_per_class = reader.u64(3);
  reader.expect("encoder", 9);
  p.encoder.embed_dim = reader.u64(1);
  p.encoder.joint_dim = reader.u64(2);
  p.encoder.raw_dim = reader.u64(3);
  p.encoder.layers = reader.u64(4);
  p.encoder.heads = reader.u64(5);
  p.encoder.max_len = reader.u64(6);
  p.encoder.vocab = reader.u64(7);
  p.encoder.temperature = reader.f64(8);
  reader.expect("encoder_seed", 2);
  p.encoder_seed = reader.u64(1);
  reader.expect("geometry", 12);
  p.feature_gain = reader.f64(1);
  p.cone_spread = reader.f64(2);
  p.name_mismatch = reader.f64(3);
  p.base_bias = reader.f64(4);
  p.new_bias = reader.f64(5);
  p.nuisance_std = reader.f64(6);
  p.within_noise = reader.f64(7);
  p.bias_axis_seed = reader.u64(8);
  p.min_margin = reader.f64(9);
  p.split_seed = reader.u64(10);
  p.name_seed = reader.u64(11);
  reader.expect("margin", 2);
  task.realized_margin = reader.f64(1);
  reader.expect("encoder_digest", 2);
  task.encoder_digest = reader.fields[1];

  reader.expect("classes", 2);
  std::size_t k = reader.u64(1);
  if (k != p.num_classes) reader.fail("class count does not match params");
  std::set<std::uint32_t> class_ids;
  std::set<std::string> class_names;
  for (std::size_t i = 0; i < k; ++i) {
    reader.expect("class", 3);
    TaskClass c;
    c.id = static_cast<std::uint32_t>(reader.u64(1));
    std::size_t nwords = reader.u64(2);
    if (nwords == 0 || nwords > 3) reader.fail("class name must have 1 to 3 words");
    if (reader.fields.size() != 3 + nwords + p.encoder.raw_dim) {
      reader.fail("class line has the wrong field count");
    }
    for (std::size_t w = 0; w < nwords; ++w) {
      if (w) c.name += " ";
      c.name += reader.fields[3 + w];
    }
    c.prototype.resize(p.encoder.raw_dim);
    for (std::size_t d = 0; d < p.encoder.raw_dim; ++d) c.prototype[d] = reader.f64(3 + nwords + d);
    if (!class_ids.insert(c.id).second) reader.fail("duplicate class id");
    if (!class_names.insert(c.name).second) reader.fail("duplicate class name");
    task.classes.push_back(std::move(c));
  }

  auto read_id_list = [&](const char* tag) {
    reader.expect(tag, 2);
    std::size_t n = reader.u64(1);
    if (reader.fields.size() != 2 + n) reader.fail("id list has the wrong field count");
    std::vector<std::uint32_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) {
      ids[i] = static_cast<std::uint32_t>(reader.u64(2 + i));
      if (!class_ids.count(ids[i])) reader.fail("split references unknown class id");
    }
    return ids;
  };
  task.split.base_ids = read_id_list("base");
  task.split.new_ids = read_id_list("new");
  if (task.split.base_ids.size() + task.split.new_ids.size() != k) {
    throw DataError("task file: split does not partition the classes");
  }
  if (task.split.base_ids.size() != (k + 1) / 2) {
    throw DataError("task file: base half must hold ceil(K/2) classes");
  }
  {
    std::set<std::uint32_t> seen;
    for (std::uint32_t id : task.split.base_ids) seen.insert(id);
    for (std::uint32_t id : task.split.new_ids) {
      if (!seen.insert(id).second) throw DataError("task file: split halves overlap");
    }
  }

  reader.expect("instances", 2);
  std::size_t n_instances = reader.u64(1);
  if (n_instances != k * p.instances_per_class) {
    reader.fail("instance count does not match params");
  }
  std::set<std::uint32_t> instance_ids;
  std::map<std::uint32_t, std::pair<std::size_t, std::size_t>> per_class;  // pool, test
  for (std::size_t i = 0; i < n_instances; ++i) {
    reader.expect("inst", 4);
    TaskInstance inst;
    inst.id = static_cast<std::uint32_t>(reader.u64(1));
    inst.class_id = static_cast<std::uint32_t>(reader.u64(2));
    const std::string& flag = reader.fields[3];
    if (flag != "t" && flag != "p") reader.fail("instance flag must be 't' or 'p'");
    inst.is_test = flag == "t";
    inst.raw = reader.f64_tail(4, p.encoder.raw_dim);
    if (!class_ids.count(inst.class_id)) reader.fail("instance references unknown class");
    if (!instance_ids.insert(inst.id).second) reader.fail("duplicate instance id");
    auto& counts = per_class[inst.class_id];
    if (inst.is_test) {
      ++counts.second;
    } else {
      ++counts.first;
    }
    task.instances.push_back(std::move(inst));
  }
  for (const TaskClass& c : task.classes) {
    auto it = per_class.find(c.id);
    std::size_t pool = it == per_class.end() ? 0 : it->second.first;
    std::size_t test = it == per_class.end() ? 0 : it->second.second;
    if (pool != p.train_pool_per_class ||
        test != p.instances_per_class - p.train_pool_per_class) {
      throw DataError("task file: class " + std::to_string(c.id) +
                      " has a lopsided train/test split");
    }
  }

  reader.expect("rungs", 2);
  std::size_t n_rungs = reader.u64(1);
  std::size_t test_total = k * (p.instances_per_class - p.train_pool_per_class);
  for (std::size_t r = 0; r < n_rungs; ++r) {
    reader.expect("rung", 3);
    ShiftRung rung;
    rung.magnitude = reader.f64(1);
    std::size_t count = reader.u64(2);
    if (count != test_total) reader.fail("rung must cover the full test split");
    for (std::size_t i = 0; i < count; ++i) {
      reader.expect("rinst", 3);
      TaskInstance inst;
      inst.id = static_cast<std::uint32_t>(reader.u64(1));
      inst.class_id = static_cast<std::uint32_t>(reader.u64(2));
      inst.is_test = true;
      inst.raw = reader.f64_tail(3, p.encoder.raw_dim);
      if (!instance_ids.count(inst.id)) reader.fail("rung instance id unknown in the source task");
      rung.instances.push_back(std::move(inst));
    }
    task.shift_rungs.push_back(std::move(rung));
  }
  if (reader.next()) reader.fail("unexpected trailing content");

  p.validate();
  audit_lexicon_overlap(task);

  // The encoder must rebuild to exactly the recorded weights.
  FrozenDualEncoder enc(p.encoder, p.encoder_seed);
  if (enc.weight_digest() != task.encoder_digest) {
    throw DataError("task file encoder digest " + task.encoder_digest +
                    " does not match the rebuilt encoder " + enc.weight_digest());
  }
  return task;
}

}  // namespace promptlab
