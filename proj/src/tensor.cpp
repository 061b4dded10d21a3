#include "promptlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "promptlab/digest.hpp"
#include "promptlab/errors.hpp"

namespace promptlab {

namespace detail {

struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  bool requires_grad = false;
  bool is_param = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const TensorNode&)> backprop;
  std::vector<double> grad;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

}  // namespace detail

using detail::TensorNode;

namespace {

std::size_t shape_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::shared_ptr<TensorNode> make_node(std::vector<std::size_t> shape,
                                      std::vector<double> values) {
  if (shape_size(shape) != values.size()) {
    throw std::invalid_argument("tensor shape " + shape_string(shape) + " wants " +
                                std::to_string(shape_size(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  return node;
}

bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace

struct NodeAccess {
  static const std::shared_ptr<TensorNode>& ptr(const Tensor& t) { return t.node_; }
  static Tensor wrap(std::shared_ptr<TensorNode> node) { return Tensor(std::move(node)); }
};

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  out += ")";
  return out;
}

// ---- Tensor -----------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  std::size_t n = shape_size(shape);
  return NodeAccess::wrap(make_node(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double fill) {
  std::size_t n = shape_size(shape);
  return NodeAccess::wrap(make_node(std::move(shape), std::vector<double>(n, fill)));
}

Tensor Tensor::from_values(std::vector<std::size_t> shape, std::vector<double> values) {
  return NodeAccess::wrap(make_node(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) {
  return NodeAccess::wrap(make_node({}, {value}));
}

Tensor Tensor::parameter(std::vector<std::size_t> shape, std::vector<double> values) {
  auto node = make_node(std::move(shape), std::move(values));
  node->requires_grad = true;
  node->is_param = true;
  return NodeAccess::wrap(std::move(node));
}

const std::vector<std::size_t>& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->values.size(); }
std::size_t Tensor::rank() const { return node_->shape.size(); }

std::size_t Tensor::rows() const { return rank() == 2 ? node_->shape[0] : 1; }

std::size_t Tensor::cols() const {
  if (rank() == 2) return node_->shape[1];
  if (rank() == 1) return node_->shape[0];
  return 1;
}

std::span<const double> Tensor::values() const { return node_->values; }

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) {
    throw std::logic_error("mutable_values is restricted to leaf tensors");
  }
  return node_->values;
}

double Tensor::value() const {
  if (size() != 1) {
    throw std::logic_error("value() on non-scalar tensor of shape " + shape_string(shape()));
  }
  return node_->values[0];
}

double Tensor::at(std::size_t i) const { return node_->values.at(i); }

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2) throw std::logic_error("2-index access on tensor of rank " + std::to_string(rank()));
  if (r >= node_->shape[0] || c >= node_->shape[1]) {
    throw std::out_of_range("index (" + std::to_string(r) + ", " + std::to_string(c) +
                            ") outside shape " + shape_string(shape()));
  }
  return node_->values[r * node_->shape[1] + c];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_ && node_->parents.empty() && !node_->backprop; }

Tensor Tensor::detached_copy() const {
  return NodeAccess::wrap(make_node(node_->shape, node_->values));
}

// ---- GradientMap ------------------------------------------------------

bool GradientMap::contains(const Tensor& param) const {
  return grads_.find(param.node()) != grads_.end();
}

const Tensor& GradientMap::at(const Tensor& param) const {
  auto it = grads_.find(param.node());
  if (it == grads_.end()) {
    throw DataError("no gradient recorded for the requested parameter");
  }
  return it->second;
}

const Tensor* GradientMap::find(const Tensor& param) const {
  auto it = grads_.find(param.node());
  return it == grads_.end() ? nullptr : &it->second;
}

void GradientMap::insert(const detail::TensorNode* key, Tensor grad) {
  grads_.emplace(key, std::move(grad));
}

// ---- op factory -------------------------------------------------------

Tensor make_op(std::vector<std::size_t> shape, std::vector<double> values,
               std::vector<Tensor> parents,
               std::function<void(const detail::TensorNode&)> backprop) {
  auto node = make_node(std::move(shape), std::move(values));
  bool track = false;
  for (const Tensor& p : parents) track = track || p.requires_grad();
  if (track) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (Tensor& p : parents) node->parents.push_back(NodeAccess::ptr(p));
    node->backprop = std::move(backprop);
  }
  return NodeAccess::wrap(std::move(node));
}

namespace {

const std::shared_ptr<TensorNode>& node_of(const Tensor& t) { return NodeAccess::ptr(t); }

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::logic_error(std::string(op) + ": undefined tensor");
}

// ---- elementwise with scalar fallback ---------------------------------

enum class Pairing { equal, scalar_left, scalar_right };

Pairing classify_pair(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Pairing::equal;
  if (a.size() == 1) return Pairing::scalar_left;
  if (b.size() == 1) return Pairing::scalar_right;
  throw std::invalid_argument(std::string(op) + ": shapes " + shape_string(a.shape()) +
                              " and " + shape_string(b.shape()) + " do not match");
}

template <typename Fwd, typename BackA, typename BackB>
Tensor elementwise(const Tensor& a, const Tensor& b, const char* op, Fwd fwd,
                   BackA dfda, BackB dfdb) {
  require_defined(a, op);
  require_defined(b, op);
  Pairing pairing = classify_pair(a, b, op);
  const Tensor& big = pairing == Pairing::scalar_left ? b : a;
  std::size_t n = big.size();
  std::vector<double> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    double x = pairing == Pairing::scalar_left ? av[0] : av[i];
    double y = pairing == Pairing::scalar_right ? bv[0] : bv[i];
    out[i] = fwd(x, y);
  }
  auto pa = node_of(a);
  auto pb = node_of(b);
  return make_op(big.shape(), std::move(out), {a, b},
                 [pa, pb, pairing, n, dfda, dfdb](const TensorNode& self) {
                   for (std::size_t i = 0; i < n; ++i) {
                     double x = pairing == Pairing::scalar_left ? pa->values[0] : pa->values[i];
                     double y = pairing == Pairing::scalar_right ? pb->values[0] : pb->values[i];
                     double g = self.grad[i];
                     if (pa->requires_grad) {
                       pa->ensure_grad();
                       pa->grad[pairing == Pairing::scalar_left ? 0 : i] += g * dfda(x, y);
                     }
                     if (pb->requires_grad) {
                       pb->ensure_grad();
                       pb->grad[pairing == Pairing::scalar_right ? 0 : i] += g * dfdb(x, y);
                     }
                   }
                 });
}

}  // namespace

// ---- operations -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double factor) {
  require_defined(x, "scale");
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  auto px = node_of(x);
  return make_op(x.shape(), std::move(out), {x}, [px, factor](const TensorNode& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i] * factor;
  });
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  auto px = node_of(x);
  return make_op(x.shape(), std::move(out), {x}, [px](const TensorNode& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (px->values[i] > 0.0) px->grad[i] += self.grad[i];
    }
  });
}

Tensor tanh(const Tensor& x) {
  require_defined(x, "tanh");
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  auto px = node_of(x);
  return make_op(x.shape(), std::move(out), {x}, [px](const TensorNode& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      double y = self.values[i];
      px->grad[i] += self.grad[i] * (1.0 - y * y);
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() > 2 || b.rank() > 2 || a.rank() == 0 || b.rank() == 0) {
    throw std::invalid_argument("matmul: shapes " + shape_string(a.shape()) + " and " +
                                shape_string(b.shape()) + " are not rank 1 or 2");
  }
  // A rank-1 left side acts as a row, a rank-1 right side as a column.
  std::size_t r = a.rank() == 1 ? 1 : a.shape()[0];
  std::size_t k = a.rank() == 1 ? a.shape()[0] : a.shape()[1];
  std::size_t k2 = b.shape()[0];
  std::size_t c = b.rank() == 1 ? 1 : b.shape()[1];
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimensions disagree for shapes " +
                                shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  std::vector<double> out(r * c, 0.0);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      double aik = av[i * k + kk];
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] += aik * bv[kk * c + j];
    }
  }
  std::vector<std::size_t> out_shape;
  if (a.rank() == 2) out_shape.push_back(r);
  if (b.rank() == 2) out_shape.push_back(c);
  auto pa = node_of(a);
  auto pb = node_of(b);
  return make_op(std::move(out_shape), std::move(out), {a, b},
                 [pa, pb, r, k, c](const TensorNode& self) {
                   if (pa->requires_grad) {
                     pa->ensure_grad();
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t kk = 0; kk < k; ++kk) {
                         double acc = 0.0;
                         for (std::size_t j = 0; j < c; ++j)
                           acc += self.grad[i * c + j] * pb->values[kk * c + j];
                         pa->grad[i * k + kk] += acc;
                       }
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (std::size_t kk = 0; kk < k; ++kk)
                       for (std::size_t j = 0; j < c; ++j) {
                         double acc = 0.0;
                         for (std::size_t i = 0; i < r; ++i)
                           acc += pa->values[i * k + kk] * self.grad[i * c + j];
                         pb->grad[kk * c + j] += acc;
                       }
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  if (a.rank() != 2) {
    throw std::invalid_argument("transpose: want rank 2, got shape " + shape_string(a.shape()));
  }
  std::size_t r = a.shape()[0];
  std::size_t c = a.shape()[1];
  std::vector<double> out(r * c);
  auto av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  auto pa = node_of(a);
  return make_op({c, r}, std::move(out), {a}, [pa, r, c](const TensorNode& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) pa->grad[i * c + j] += self.grad[j * r + i];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layer_norm");
  require_defined(gain, "layer_norm");
  require_defined(bias, "layer_norm");
  std::size_t d = x.cols();
  std::size_t n = x.rows();
  if (x.rank() == 0 || gain.size() != d || bias.size() != d) {
    throw std::invalid_argument("layer_norm: shapes " + shape_string(x.shape()) + ", " +
                                shape_string(gain.shape()) + ", " + shape_string(bias.shape()) +
                                " are inconsistent");
  }
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(n);
  for (std::size_t row = 0; row < n; ++row) {
    const double* xr = xv.data() + row * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[row] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      double h = (xr[j] - mean) * inv;
      xhat[row * d + j] = h;
      out[row * d + j] = h * gv[j] + bv[j];
    }
  }
  auto px = node_of(x);
  auto pg = node_of(gain);
  auto pb = node_of(bias);
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [px, pg, pb, n, d, xhat = std::move(xhat),
                  inv_std = std::move(inv_std)](const TensorNode& self) {
                   for (std::size_t row = 0; row < n; ++row) {
                     const double* g = self.grad.data() + row * d;
                     const double* h = xhat.data() + row * d;
                     if (pg->requires_grad) {
                       pg->ensure_grad();
                       for (std::size_t j = 0; j < d; ++j) pg->grad[j] += g[j] * h[j];
                     }
                     if (pb->requires_grad) {
                       pb->ensure_grad();
                       for (std::size_t j = 0; j < d; ++j) pb->grad[j] += g[j];
                     }
                     if (px->requires_grad) {
                       px->ensure_grad();
                       double mean_dh = 0.0;
                       double mean_dh_h = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                         double dh = g[j] * pg->values[j];
                         mean_dh += dh;
                         mean_dh_h += dh * h[j];
                       }
                       mean_dh /= static_cast<double>(d);
                       mean_dh_h /= static_cast<double>(d);
                       for (std::size_t j = 0; j < d; ++j) {
                         double dh = g[j] * pg->values[j];
                         px->grad[row * d + j] +=
                             inv_std[row] * (dh - mean_dh - h[j] * mean_dh_h);
                       }
                     }
                   }
                 });
}

Tensor softmax_row(const Tensor& logits) {
  require_defined(logits, "softmax_row");
  if (logits.rank() == 0) {
    throw std::invalid_argument("softmax_row: scalar input");
  }
  if (!all_finite(logits.values())) {
    throw NumericError("softmax_row: input contains NaN or Inf");
  }
  std::size_t d = logits.cols();
  std::size_t n = logits.rows();
  auto lv = logits.values();
  std::vector<double> out(logits.size());
  for (std::size_t row = 0; row < n; ++row) {
    const double* lr = lv.data() + row * d;
    double m = lr[0];
    for (std::size_t j = 1; j < d; ++j) m = std::max(m, lr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double e = std::exp(lr[j] - m);
      out[row * d + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < d; ++j) out[row * d + j] /= z;
  }
  auto pl = node_of(logits);
  return make_op(logits.shape(), std::move(out), {logits},
                 [pl, n, d](const TensorNode& self) {
                   if (!pl->requires_grad) return;
                   pl->ensure_grad();
                   for (std::size_t row = 0; row < n; ++row) {
                     const double* p = self.values.data() + row * d;
                     const double* g = self.grad.data() + row * d;
                     double dot = 0.0;
                     for (std::size_t j = 0; j < d; ++j) dot += g[j] * p[j];
                     for (std::size_t j = 0; j < d; ++j)
                       pl->grad[row * d + j] += p[j] * (g[j] - dot);
                   }
                 });
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
  require_defined(u, "cosine_similarity");
  require_defined(v, "cosine_similarity");
  if (u.rank() != 1 || v.rank() != 1 || u.size() != v.size()) {
    throw std::invalid_argument("cosine_similarity: shapes " + shape_string(u.shape()) +
                                " and " + shape_string(v.shape()) + " are not equal-length vectors");
  }
  auto uv = u.values();
  auto vv = v.values();
  double dot = 0.0, nu2 = 0.0, nv2 = 0.0;
  for (std::size_t i = 0; i < uv.size(); ++i) {
    dot += uv[i] * vv[i];
    nu2 += uv[i] * uv[i];
    nv2 += vv[i] * vv[i];
  }
  if (nu2 == 0.0 || nv2 == 0.0) {
    throw NumericError("cosine_similarity: zero-norm vector");
  }
  double nu = std::sqrt(nu2);
  double nv = std::sqrt(nv2);
  double c = dot / (nu * nv);
  auto pu = node_of(u);
  auto pv = node_of(v);
  return make_op({}, {c}, {u, v}, [pu, pv, nu, nv, c](const TensorNode& self) {
    double g = self.grad[0];
    std::size_t len = pu->values.size();
    if (pu->requires_grad) {
      pu->ensure_grad();
      for (std::size_t i = 0; i < len; ++i) {
        pu->grad[i] += g * (pv->values[i] / (nu * nv) - c * pu->values[i] / (nu * nu));
      }
    }
    if (pv->requires_grad) {
      pv->ensure_grad();
      for (std::size_t i = 0; i < len; ++i) {
        pv->grad[i] += g * (pu->values[i] / (nu * nv) - c * pv->values[i] / (nv * nv));
      }
    }
  });
}

Tensor l2_normalize(const Tensor& x) {
  require_defined(x, "l2_normalize");
  if (x.rank() != 1) {
    throw std::invalid_argument("l2_normalize: want a vector, got shape " +
                                shape_string(x.shape()));
  }
  auto xv = x.values();
  double n2 = 0.0;
  for (double v : xv) n2 += v * v;
  if (n2 == 0.0) throw NumericError("l2_normalize: zero-norm vector");
  double n = std::sqrt(n2);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / n;
  auto px = node_of(x);
  return make_op(x.shape(), std::move(out), {x}, [px, n](const TensorNode& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    double gy = 0.0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gy += self.grad[i] * self.values[i];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      px->grad[i] += (self.grad[i] - self.values[i] * gy) / n;
    }
  });
}

Tensor cross_entropy(const Tensor& probs, std::size_t label) {
  require_defined(probs, "cross_entropy");
  if (probs.rank() != 1) {
    throw std::invalid_argument("cross_entropy: want a probability vector, got shape " +
                                shape_string(probs.shape()));
  }
  if (label >= probs.size()) {
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) + " outside " +
                            std::to_string(probs.size()) + " classes");
  }
  if (!all_finite(probs.values())) {
    throw NumericError("cross_entropy: probabilities contain NaN or Inf");
  }
  double total = 0.0;
  for (double p : probs.values()) total += p;
  if (std::abs(total - 1.0) > 1e-6) {
    throw NumericError("cross_entropy: probabilities sum to " + format_double(total));
  }
  constexpr double kFloor = 1e-12;
  double p = probs.values()[label];
  double loss = -std::log(std::max(p, kFloor));
  auto pp = node_of(probs);
  return make_op({}, {loss}, {probs}, [pp, label, kFloor](const TensorNode& self) {
    if (!pp->requires_grad) return;
    double p = pp->values[label];
    if (p <= kFloor) return;  // flat region below the floor
    pp->ensure_grad();
    pp->grad[label] += -self.grad[0] / p;
  });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double total = 0.0;
  for (double v : x.values()) total += v;
  auto px = node_of(x);
  return make_op({}, {total}, {x}, [px](const TensorNode& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (double& g : px->grad) g += self.grad[0];
  });
}

Tensor take_row(const Tensor& x, std::size_t row) {
  require_defined(x, "take_row");
  if (x.rank() != 2) {
    throw std::invalid_argument("take_row: want rank 2, got shape " + shape_string(x.shape()));
  }
  std::size_t r = x.shape()[0];
  std::size_t c = x.shape()[1];
  if (row >= r) {
    throw std::out_of_range("take_row: row " + std::to_string(row) + " outside shape " +
                            shape_string(x.shape()));
  }
  auto xv = x.values();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(row * c),
                          xv.begin() + static_cast<std::ptrdiff_t>((row + 1) * c));
  auto px = node_of(x);
  return make_op({c}, std::move(out), {x}, [px, row, c](const TensorNode& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t j = 0; j < c; ++j) px->grad[row * c + j] += self.grad[j];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_defined(x, "slice_rows");
  if (x.rank() != 2 || begin >= end || end > x.shape()[0]) {
    throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") invalid for shape " +
                                shape_string(x.shape()));
  }
  std::size_t c = x.shape()[1];
  auto xv = x.values();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(begin * c),
                          xv.begin() + static_cast<std::ptrdiff_t>(end * c));
  auto px = node_of(x);
  return make_op({end - begin, c}, std::move(out), {x},
                 [px, begin, c](const TensorNode& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     px->grad[begin * c + i] += self.grad[i];
                   }
                 });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_defined(x, "slice_cols");
  if (x.rank() != 2 || begin >= end || end > x.shape()[1]) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") invalid for shape " +
                                shape_string(x.shape()));
  }
  std::size_t r = x.shape()[0];
  std::size_t c = x.shape()[1];
  std::size_t w = end - begin;
  auto xv = x.values();
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = xv[i * c + begin + j];
  auto px = node_of(x);
  return make_op({r, w}, std::move(out), {x},
                 [px, begin, r, c, w](const TensorNode& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < w; ++j)
                       px->grad[i * c + begin + j] += self.grad[i * w + j];
                 });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require_defined(p, "concat_rows");
    if (p.rank() == 0 || p.cols() != c) {
      throw std::invalid_argument("concat_rows: part of shape " + shape_string(p.shape()) +
                                  " does not have " + std::to_string(c) + " columns");
    }
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * c);
  for (const Tensor& p : parts) {
    auto pv = p.values();
    out.insert(out.end(), pv.begin(), pv.end());
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  std::vector<std::shared_ptr<TensorNode>> nodes;
  nodes.reserve(parts.size());
  for (const Tensor& p : parts) nodes.push_back(node_of(p));
  return make_op({total, c}, std::move(out), std::move(parents),
                 [nodes = std::move(nodes)](const TensorNode& self) {
                   std::size_t offset = 0;
                   for (const auto& pn : nodes) {
                     std::size_t len = pn->values.size();
                     if (pn->requires_grad) {
                       pn->ensure_grad();
                       for (std::size_t i = 0; i < len; ++i) pn->grad[i] += self.grad[offset + i];
                     }
                     offset += len;
                   }
                 });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  std::size_t r = parts[0].rows();
  std::size_t total_cols = 0;
  for (const Tensor& p : parts) {
    require_defined(p, "concat_cols");
    if (p.rank() != 2 || p.rows() != r) {
      throw std::invalid_argument("concat_cols: part of shape " + shape_string(p.shape()) +
                                  " does not have " + std::to_string(r) + " rows");
    }
    total_cols += p.cols();
  }
  std::vector<double> out(r * total_cols);
  std::size_t col_offset = 0;
  for (const Tensor& p : parts) {
    auto pv = p.values();
    std::size_t w = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total_cols + col_offset + j] = pv[i * w + j];
    col_offset += w;
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  std::vector<std::shared_ptr<TensorNode>> nodes;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    nodes.push_back(node_of(p));
    widths.push_back(p.cols());
  }
  return make_op({r, total_cols}, std::move(out), std::move(parents),
                 [nodes = std::move(nodes), widths = std::move(widths), r,
                  total_cols](const TensorNode& self) {
                   std::size_t col_offset = 0;
                   for (std::size_t part = 0; part < nodes.size(); ++part) {
                     const auto& pn = nodes[part];
                     std::size_t w = widths[part];
                     if (pn->requires_grad) {
                       pn->ensure_grad();
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < w; ++j)
                           pn->grad[i * w + j] += self.grad[i * total_cols + col_offset + j];
                     }
                     col_offset += w;
                   }
                 });
}

Tensor repeat_row(const Tensor& v, std::size_t n) {
  require_defined(v, "repeat_row");
  if (v.rank() != 1 || n == 0) {
    throw std::invalid_argument("repeat_row: want a vector and n > 0, got shape " +
                                shape_string(v.shape()) + " and n = " + std::to_string(n));
  }
  std::size_t d = v.size();
  std::vector<double> out;
  out.reserve(n * d);
  auto vv = v.values();
  for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), vv.begin(), vv.end());
  auto pv = node_of(v);
  return make_op({n, d}, std::move(out), {v}, [pv, n, d](const TensorNode& self) {
    if (!pv->requires_grad) return;
    pv->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) pv->grad[j] += self.grad[i * d + j];
  });
}

Tensor stack_scalars(std::span<const Tensor> scalars) {
  if (scalars.empty()) throw std::invalid_argument("stack_scalars: no inputs");
  std::vector<double> out;
  out.reserve(scalars.size());
  for (const Tensor& s : scalars) {
    require_defined(s, "stack_scalars");
    if (s.size() != 1) {
      throw std::invalid_argument("stack_scalars: input of shape " + shape_string(s.shape()) +
                                  " is not a scalar");
    }
    out.push_back(s.values()[0]);
  }
  std::vector<Tensor> parents(scalars.begin(), scalars.end());
  std::vector<std::shared_ptr<TensorNode>> nodes;
  for (const Tensor& s : scalars) nodes.push_back(node_of(s));
  return make_op({scalars.size()}, std::move(out), std::move(parents),
                 [nodes = std::move(nodes)](const TensorNode& self) {
                   for (std::size_t i = 0; i < nodes.size(); ++i) {
                     if (!nodes[i]->requires_grad) continue;
                     nodes[i]->ensure_grad();
                     nodes[i]->grad[0] += self.grad[i];
                   }
                 });
}

// ---- backward ---------------------------------------------------------

GradientMap backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::logic_error("backward: loss must be a defined scalar");
  }
  GradientMap map;
  auto root = NodeAccess::ptr(loss);
  if (!root->requires_grad) return map;

  // Iterative post-order DFS; reversing the finish order gives a
  // topological order from the loss down to the leaves.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      TensorNode* parent = node->parents[next_child].get();
      ++next_child;
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backprop && !node->grad.empty()) node->backprop(*node);
  }

  for (TensorNode* node : order) {
    if (node->is_param && !node->grad.empty()) {
      map.insert(node, Tensor::from_values(node->shape, node->grad));
    }
  }

  // Consume the graph: drop closures and parent links so intermediate
  // nodes free as soon as outside handles let go.
  for (TensorNode* node : order) {
    node->backprop = nullptr;
    node->parents.clear();
    node->grad.clear();
  }
  return map;
}

double finite_difference_check(const std::function<Tensor()>& loss_fn,
                               std::span<const Tensor> params, double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_difference_check: step must be positive");
  Tensor loss = loss_fn();
  GradientMap grads = backward(loss);
  double worst = 0.0;
  for (const Tensor& param : params) {
    if (!param.requires_grad() || !param.is_leaf()) {
      throw std::invalid_argument("finite_difference_check: parameters must be grad-enabled leaves");
    }
    const Tensor* grad = grads.find(param);
    Tensor handle = param;  // shares the node; lets us poke values
    auto values = handle.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      double original = values[i];
      values[i] = original + step;
      double above = loss_fn().value();
      values[i] = original - step;
      double below = loss_fn().value();
      values[i] = original;
      double numeric = (above - below) / (2.0 * step);
      double analytic = grad ? grad->at(i) : 0.0;
      double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace promptlab
