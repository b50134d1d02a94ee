#include "xald/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace xald {

namespace detail {

struct Node {
  uint64_t id = 0;
  std::vector<int> shape;
  std::vector<float> data;
  bool requires_grad = false;  // set on leaves
  bool needs_grad = false;     // true if any ancestor leaf requires grad
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates d(root)/d(parent) into the per-parent double buffers given
  // d(root)/d(this). A null buffer means that parent needs no gradient.
  std::function<void(const double* up, const std::vector<double*>& parent_grads)> backward;
  std::vector<float> grad;  // last written leaf gradient, optional

  int64_t size() const { return static_cast<int64_t>(data.size()); }
};

namespace {

std::atomic<uint64_t> next_id{1};

int64_t shape_size(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

}  // namespace

}  // namespace detail

using detail::Node;

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

std::shared_ptr<Node> make_node(std::vector<int> shape, std::vector<float> data,
                                std::vector<std::shared_ptr<Node>> parents = {}) {
  auto n = std::make_shared<Node>();
  n->id = detail::next_id.fetch_add(1, std::memory_order_relaxed);
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->parents = std::move(parents);
  for (const auto& p : n->parents) {
    if (p->requires_grad || p->needs_grad) n->needs_grad = true;
  }
  return n;
}

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor operand");
}

void check_finite(const Tensor& t, const char* op) {
  for (float v : t.data()) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument(std::string(op) + ": non-finite input value");
    }
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

void check_positive_dims(const std::vector<int>& shape, const char* op) {
  if (shape.empty()) throw std::invalid_argument(std::string(op) + ": rank-0 shape");
  for (int d : shape) {
    if (d <= 0) {
      throw std::invalid_argument(std::string(op) + ": non-positive dimension in " + shape_str(shape));
    }
  }
}

Node* raw(const Tensor& t) { return t.node().get(); }

}  // namespace

// ---- Tensor ----

Tensor Tensor::zeros(std::vector<int> shape) {
  check_positive_dims(shape, "zeros");
  auto n = detail::shape_size(shape);
  return Tensor(make_node(std::move(shape), std::vector<float>(n, 0.0f)));
}

Tensor Tensor::full(std::vector<int> shape, float value) {
  check_positive_dims(shape, "full");
  auto n = detail::shape_size(shape);
  return Tensor(make_node(std::move(shape), std::vector<float>(n, value)));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data) {
  check_positive_dims(shape, "from_data");
  if (detail::shape_size(shape) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                " values for shape " + shape_str(shape));
  }
  return Tensor(make_node(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

const std::vector<int>& Tensor::shape() const { return node_->shape; }
int64_t Tensor::size() const { return node_->size(); }
std::span<const float> Tensor::data() const { return node_->data; }

float Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  return node_->data[0];
}

float Tensor::at(int64_t flat_index) const { return node_->data.at(flat_index); }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) throw std::invalid_argument("set_requires_grad: only leaves can require gradients");
  node_->requires_grad = value;
  node_->needs_grad = value;
  return *this;
}

std::span<const float> Tensor::grad() const { return node_->grad; }

Tensor Tensor::detach() const {
  check_defined(*this, "detach");
  return Tensor(make_node(node_->shape, node_->data));
}

uint64_t Tensor::id() const { return node_->id; }
bool Tensor::is_leaf() const { return node_ && node_->parents.empty(); }

// ---- elementwise ----

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Bwd make_backward) {
  check_defined(a, name);
  check_finite(a, name);
  const auto& ad = a.node()->data;
  std::vector<float> out(ad.size());
  for (size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  auto n = make_node(a.shape(), std::move(out), {a.node()});
  if (n->needs_grad) n->backward = make_backward(a.node().get(), n.get());
  return Tensor(n);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  check_same_shape(a, b, "add");
  check_finite(a, "add");
  check_finite(b, "add");
  const auto& ad = a.node()->data;
  const auto& bd = b.node()->data;
  std::vector<float> out(ad.size());
  for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[i];
  auto n = make_node(a.shape(), std::move(out), {a.node(), b.node()});
  if (n->needs_grad) {
    const int64_t sz = n->size();
    n->backward = [sz](const double* up, const std::vector<double*>& pg) {
      if (pg[0]) for (int64_t i = 0; i < sz; ++i) pg[0][i] += up[i];
      if (pg[1]) for (int64_t i = 0; i < sz; ++i) pg[1][i] += up[i];
    };
  }
  return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  check_same_shape(a, b, "sub");
  check_finite(a, "sub");
  check_finite(b, "sub");
  const auto& ad = a.node()->data;
  const auto& bd = b.node()->data;
  std::vector<float> out(ad.size());
  for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] - bd[i];
  auto n = make_node(a.shape(), std::move(out), {a.node(), b.node()});
  if (n->needs_grad) {
    const int64_t sz = n->size();
    n->backward = [sz](const double* up, const std::vector<double*>& pg) {
      if (pg[0]) for (int64_t i = 0; i < sz; ++i) pg[0][i] += up[i];
      if (pg[1]) for (int64_t i = 0; i < sz; ++i) pg[1][i] -= up[i];
    };
  }
  return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  check_same_shape(a, b, "mul");
  check_finite(a, "mul");
  check_finite(b, "mul");
  const auto& ad = a.node()->data;
  const auto& bd = b.node()->data;
  std::vector<float> out(ad.size());
  for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i];
  auto n = make_node(a.shape(), std::move(out), {a.node(), b.node()});
  if (n->needs_grad) {
    Node* an = a.node().get();
    Node* bn = b.node().get();
    const int64_t sz = n->size();
    n->backward = [an, bn, sz](const double* up, const std::vector<double*>& pg) {
      if (pg[0]) for (int64_t i = 0; i < sz; ++i) pg[0][i] += up[i] * bn->data[i];
      if (pg[1]) for (int64_t i = 0; i < sz; ++i) pg[1][i] += up[i] * an->data[i];
    };
  }
  return Tensor(n);
}

Tensor scale(const Tensor& a, float factor) {
  if (!std::isfinite(factor)) throw std::invalid_argument("scale: non-finite factor");
  return unary_op(
      a, "scale", [factor](float x) { return x * factor; },
      [factor](Node* /*an*/, Node* n) {
        const int64_t sz = n->size();
        return [factor, sz](const double* up, const std::vector<double*>& pg) {
          if (pg[0]) for (int64_t i = 0; i < sz; ++i) pg[0][i] += up[i] * factor;
        };
      });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, "exp", [](float x) { return static_cast<float>(std::exp(static_cast<double>(x))); },
      [](Node* /*an*/, Node* n) {
        const int64_t sz = n->size();
        return [n, sz](const double* up, const std::vector<double*>& pg) {
          if (pg[0]) for (int64_t i = 0; i < sz; ++i) pg[0][i] += up[i] * n->data[i];
        };
      });
}

Tensor log(const Tensor& a) {
  Tensor r = unary_op(
      a, "log", [](float x) { return static_cast<float>(std::log(static_cast<double>(x))); },
      [](Node* an, Node* n) {
        const int64_t sz = n->size();
        return [an, sz](const double* up, const std::vector<double*>& pg) {
          if (pg[0]) for (int64_t i = 0; i < sz; ++i) pg[0][i] += up[i] / an->data[i];
        };
      });
  for (float v : r.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("log: non-finite result (non-positive input)");
  }
  return r;
}

Tensor pow(const Tensor& a, float exponent) {
  if (!std::isfinite(exponent)) throw std::invalid_argument("pow: non-finite exponent");
  Tensor r = unary_op(
      a, "pow",
      [exponent](float x) {
        return static_cast<float>(std::pow(static_cast<double>(x), static_cast<double>(exponent)));
      },
      [exponent](Node* an, Node* n) {
        const int64_t sz = n->size();
        return [an, exponent, sz](const double* up, const std::vector<double*>& pg) {
          if (!pg[0]) return;
          for (int64_t i = 0; i < sz; ++i) {
            double x = an->data[i];
            pg[0][i] += up[i] * exponent * std::pow(x, static_cast<double>(exponent) - 1.0);
          }
        };
      });
  for (float v : r.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("pow: non-finite result");
  }
  return r;
}

Tensor max_with(const Tensor& a, float threshold, float slope) {
  if (!std::isfinite(threshold) || !std::isfinite(slope)) {
    throw std::invalid_argument("max_with: non-finite threshold or slope");
  }
  return unary_op(
      a, "max_with",
      [threshold, slope](float x) { return x > threshold ? x : threshold + slope * (x - threshold); },
      [threshold, slope](Node* an, Node* n) {
        const int64_t sz = n->size();
        return [an, threshold, slope, sz](const double* up, const std::vector<double*>& pg) {
          if (!pg[0]) return;
          for (int64_t i = 0; i < sz; ++i) {
            pg[0][i] += up[i] * (an->data[i] > threshold ? 1.0 : static_cast<double>(slope));
          }
        };
      });
}

Tensor leaky_relu(const Tensor& a, float slope) { return max_with(a, 0.0f, slope); }
Tensor clamp_min(const Tensor& a, float floor) { return max_with(a, floor, 0.0f); }

// ---- reductions ----

Tensor sum(const Tensor& a) {
  check_defined(a, "sum");
  check_finite(a, "sum");
  double acc = 0.0;
  for (float v : a.node()->data) acc += v;
  auto n = make_node({1}, {static_cast<float>(acc)}, {a.node()});
  if (n->needs_grad) {
    const int64_t sz = a.size();
    n->backward = [sz](const double* up, const std::vector<double*>& pg) {
      if (pg[0]) for (int64_t i = 0; i < sz; ++i) pg[0][i] += up[0];
    };
  }
  return Tensor(n);
}

Tensor sum(const Tensor& a, int axis) {
  check_defined(a, "sum");
  check_finite(a, "sum");
  const auto& shape = a.shape();
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw std::invalid_argument("sum: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(shape));
  }
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const int64_t len = shape[axis];

  std::vector<int> out_shape;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (i != axis) out_shape.push_back(shape[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);

  const auto& ad = a.node()->data;
  std::vector<float> out(outer * inner);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      for (int64_t k = 0; k < len; ++k) acc += ad[(o * len + k) * inner + i];
      out[o * inner + i] = static_cast<float>(acc);
    }
  }
  auto n = make_node(std::move(out_shape), std::move(out), {a.node()});
  if (n->needs_grad) {
    n->backward = [outer, inner, len](const double* up, const std::vector<double*>& pg) {
      if (!pg[0]) return;
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t k = 0; k < len; ++k) {
          for (int64_t i = 0; i < inner; ++i) {
            pg[0][(o * len + k) * inner + i] += up[o * inner + i];
          }
        }
      }
    };
  }
  return Tensor(n);
}

Tensor mean(const Tensor& a) {
  check_defined(a, "mean");
  check_finite(a, "mean");
  double acc = 0.0;
  for (float v : a.node()->data) acc += v;
  const int64_t sz = a.size();
  auto n = make_node({1}, {static_cast<float>(acc / sz)}, {a.node()});
  if (n->needs_grad) {
    n->backward = [sz](const double* up, const std::vector<double*>& pg) {
      if (!pg[0]) return;
      const double g = up[0] / sz;
      for (int64_t i = 0; i < sz; ++i) pg[0][i] += g;
    };
  }
  return Tensor(n);
}

// ---- structured ops ----

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  check_defined(input, "conv2d");
  check_defined(weight, "conv2d");
  check_defined(bias, "conv2d");
  check_finite(input, "conv2d");
  check_finite(weight, "conv2d");
  check_finite(bias, "conv2d");
  const auto& is = input.shape();
  const auto& ws = weight.shape();
  if (is.size() != 3 || ws.size() != 4) {
    throw std::invalid_argument("conv2d: want input [C,H,W] and weight [O,C,kh,kw], got " +
                                shape_str(is) + " and " + shape_str(ws));
  }
  const int cin = is[0], h = is[1], w = is[2];
  const int cout = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != cin) {
    throw std::invalid_argument("conv2d: input channels " + std::to_string(cin) +
                                " vs weight channels " + std::to_string(ws[1]));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw std::invalid_argument("conv2d: kernel dims must be odd, got " + shape_str(ws));
  }
  if (bias.shape() != std::vector<int>{cout}) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(bias.shape()) + " for " +
                                std::to_string(cout) + " output channels");
  }
  const int ph = kh / 2, pw = kw / 2;

  const float* in = input.node()->data.data();
  const float* wt = weight.node()->data.data();
  const float* bs = bias.node()->data.data();

  std::vector<float> out(static_cast<size_t>(cout) * h * w);
  std::vector<double> acc(static_cast<size_t>(h) * w);
  for (int o = 0; o < cout; ++o) {
    std::fill(acc.begin(), acc.end(), static_cast<double>(bs[o]));
    for (int c = 0; c < cin; ++c) {
      const float* inc = in + static_cast<size_t>(c) * h * w;
      for (int ky = 0; ky < kh; ++ky) {
        const int y0 = std::max(0, ph - ky), y1 = std::min(h, h + ph - ky);
        for (int kx = 0; kx < kw; ++kx) {
          const double wv = wt[((static_cast<size_t>(o) * cin + c) * kh + ky) * kw + kx];
          const int x0 = std::max(0, pw - kx), x1 = std::min(w, w + pw - kx);
          for (int y = y0; y < y1; ++y) {
            const float* src = inc + static_cast<size_t>(y + ky - ph) * w + (kx - pw);
            double* dst = acc.data() + static_cast<size_t>(y) * w;
            for (int x = x0; x < x1; ++x) dst[x] += wv * src[x];
          }
        }
      }
    }
    float* oc = out.data() + static_cast<size_t>(o) * h * w;
    for (size_t i = 0; i < acc.size(); ++i) oc[i] = static_cast<float>(acc[i]);
  }

  auto n = make_node({cout, h, w}, std::move(out), {input.node(), weight.node(), bias.node()});
  if (n->needs_grad) {
    Node* in_n = input.node().get();
    Node* wt_n = weight.node().get();
    n->backward = [in_n, wt_n, cin, cout, h, w, kh, kw, ph, pw](const double* up,
                                                                const std::vector<double*>& pg) {
      const float* in = in_n->data.data();
      const float* wt = wt_n->data.data();
      if (pg[0]) {  // d input: correlate upstream with flipped kernel
        for (int c = 0; c < cin; ++c) {
          double* dst_c = pg[0] + static_cast<size_t>(c) * h * w;
          for (int o = 0; o < cout; ++o) {
            const double* up_o = up + static_cast<size_t>(o) * h * w;
            for (int ky = 0; ky < kh; ++ky) {
              const int y0 = std::max(0, ky - ph), y1 = std::min(h, h + ky - ph);
              for (int kx = 0; kx < kw; ++kx) {
                const double wv = wt[((static_cast<size_t>(o) * cin + c) * kh + ky) * kw + kx];
                const int x0 = std::max(0, kx - pw), x1 = std::min(w, w + kx - pw);
                for (int y = y0; y < y1; ++y) {
                  const double* src = up_o + static_cast<size_t>(y - ky + ph) * w + (pw - kx);
                  double* dst = dst_c + static_cast<size_t>(y) * w;
                  for (int x = x0; x < x1; ++x) dst[x] += wv * src[x];
                }
              }
            }
          }
        }
      }
      if (pg[1]) {  // d weight
        for (int o = 0; o < cout; ++o) {
          const double* up_o = up + static_cast<size_t>(o) * h * w;
          for (int c = 0; c < cin; ++c) {
            const float* inc = in + static_cast<size_t>(c) * h * w;
            for (int ky = 0; ky < kh; ++ky) {
              const int y0 = std::max(0, ph - ky), y1 = std::min(h, h + ph - ky);
              for (int kx = 0; kx < kw; ++kx) {
                const int x0 = std::max(0, pw - kx), x1 = std::min(w, w + pw - kx);
                double acc = 0.0;
                for (int y = y0; y < y1; ++y) {
                  const float* src = inc + static_cast<size_t>(y + ky - ph) * w + (kx - pw);
                  const double* u = up_o + static_cast<size_t>(y) * w;
                  for (int x = x0; x < x1; ++x) acc += u[x] * src[x];
                }
                pg[1][((static_cast<size_t>(o) * cin + c) * kh + ky) * kw + kx] += acc;
              }
            }
          }
        }
      }
      if (pg[2]) {  // d bias
        for (int o = 0; o < cout; ++o) {
          const double* up_o = up + static_cast<size_t>(o) * h * w;
          double acc = 0.0;
          for (int i = 0; i < h * w; ++i) acc += up_o[i];
          pg[2][o] += acc;
        }
      }
    };
  }
  return Tensor(n);
}

Tensor avg_pool2(const Tensor& a) {
  check_defined(a, "avg_pool2");
  check_finite(a, "avg_pool2");
  const auto& s = a.shape();
  if (s.size() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0) {
    throw std::invalid_argument("avg_pool2: want [C,H,W] with even H,W, got " + shape_str(s));
  }
  const int c = s[0], h = s[1], w = s[2], oh = h / 2, ow = w / 2;
  const float* in = a.node()->data.data();
  std::vector<float> out(static_cast<size_t>(c) * oh * ow);
  for (int ch = 0; ch < c; ++ch) {
    const float* inc = in + static_cast<size_t>(ch) * h * w;
    float* oc = out.data() + static_cast<size_t>(ch) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double acc = static_cast<double>(inc[(2 * y) * w + 2 * x]) + inc[(2 * y) * w + 2 * x + 1] +
                     inc[(2 * y + 1) * w + 2 * x] + inc[(2 * y + 1) * w + 2 * x + 1];
        oc[y * ow + x] = static_cast<float>(acc * 0.25);
      }
    }
  }
  auto n = make_node({c, oh, ow}, std::move(out), {a.node()});
  if (n->needs_grad) {
    n->backward = [c, h, w, oh, ow](const double* up, const std::vector<double*>& pg) {
      if (!pg[0]) return;
      for (int ch = 0; ch < c; ++ch) {
        const double* uc = up + static_cast<size_t>(ch) * oh * ow;
        double* dc = pg[0] + static_cast<size_t>(ch) * h * w;
        for (int y = 0; y < oh; ++y) {
          for (int x = 0; x < ow; ++x) {
            const double g = uc[y * ow + x] * 0.25;
            dc[(2 * y) * w + 2 * x] += g;
            dc[(2 * y) * w + 2 * x + 1] += g;
            dc[(2 * y + 1) * w + 2 * x] += g;
            dc[(2 * y + 1) * w + 2 * x + 1] += g;
          }
        }
      }
    };
  }
  return Tensor(n);
}

Tensor upsample2(const Tensor& a) {
  check_defined(a, "upsample2");
  check_finite(a, "upsample2");
  const auto& s = a.shape();
  if (s.size() != 3) throw std::invalid_argument("upsample2: want [C,h,w], got " + shape_str(s));
  const int c = s[0], h = s[1], w = s[2], oh = 2 * h, ow = 2 * w;
  const float* in = a.node()->data.data();
  std::vector<float> out(static_cast<size_t>(c) * oh * ow);
  for (int ch = 0; ch < c; ++ch) {
    const float* inc = in + static_cast<size_t>(ch) * h * w;
    float* oc = out.data() + static_cast<size_t>(ch) * oh * ow;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const float v = inc[y * w + x];
        oc[(2 * y) * ow + 2 * x] = v;
        oc[(2 * y) * ow + 2 * x + 1] = v;
        oc[(2 * y + 1) * ow + 2 * x] = v;
        oc[(2 * y + 1) * ow + 2 * x + 1] = v;
      }
    }
  }
  auto n = make_node({c, oh, ow}, std::move(out), {a.node()});
  if (n->needs_grad) {
    n->backward = [c, h, w, oh, ow](const double* up, const std::vector<double*>& pg) {
      if (!pg[0]) return;
      for (int ch = 0; ch < c; ++ch) {
        const double* uc = up + static_cast<size_t>(ch) * oh * ow;
        double* dc = pg[0] + static_cast<size_t>(ch) * h * w;
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            dc[y * w + x] += uc[(2 * y) * ow + 2 * x] + uc[(2 * y) * ow + 2 * x + 1] +
                             uc[(2 * y + 1) * ow + 2 * x] + uc[(2 * y + 1) * ow + 2 * x + 1];
          }
        }
      }
    };
  }
  return Tensor(n);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check_defined(a, "concat_channels");
  check_defined(b, "concat_channels");
  check_finite(a, "concat_channels");
  check_finite(b, "concat_channels");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[1] != sb[1] || sa[2] != sb[2]) {
    throw std::invalid_argument("concat_channels: incompatible shapes " + shape_str(sa) + " and " +
                                shape_str(sb));
  }
  const int64_t na = a.size(), nb = b.size();
  std::vector<float> out(na + nb);
  std::copy(a.node()->data.begin(), a.node()->data.end(), out.begin());
  std::copy(b.node()->data.begin(), b.node()->data.end(), out.begin() + na);
  auto n = make_node({sa[0] + sb[0], sa[1], sa[2]}, std::move(out), {a.node(), b.node()});
  if (n->needs_grad) {
    n->backward = [na, nb](const double* up, const std::vector<double*>& pg) {
      if (pg[0]) for (int64_t i = 0; i < na; ++i) pg[0][i] += up[i];
      if (pg[1]) for (int64_t i = 0; i < nb; ++i) pg[1][i] += up[na + i];
    };
  }
  return Tensor(n);
}

Tensor softmax_channels(const Tensor& a) {
  check_defined(a, "softmax_channels");
  check_finite(a, "softmax_channels");
  const auto& s = a.shape();
  if (s.size() != 3) throw std::invalid_argument("softmax_channels: want [C,H,W], got " + shape_str(s));
  const int c = s[0];
  const int64_t hw = static_cast<int64_t>(s[1]) * s[2];
  const float* in = a.node()->data.data();
  std::vector<float> out(a.size());
  for (int64_t p = 0; p < hw; ++p) {
    float m = in[p];
    for (int ch = 1; ch < c; ++ch) m = std::max(m, in[ch * hw + p]);
    double z = 0.0;
    for (int ch = 0; ch < c; ++ch) z += std::exp(static_cast<double>(in[ch * hw + p]) - m);
    for (int ch = 0; ch < c; ++ch) {
      out[ch * hw + p] = static_cast<float>(std::exp(static_cast<double>(in[ch * hw + p]) - m) / z);
    }
  }
  auto n = make_node(s, std::move(out), {a.node()});
  if (n->needs_grad) {
    n->backward = [c, hw, self = n.get()](const double* up, const std::vector<double*>& pg) {
      if (!pg[0]) return;
      const float* y = self->data.data();
      for (int64_t p = 0; p < hw; ++p) {
        double dot = 0.0;
        for (int ch = 0; ch < c; ++ch) dot += up[ch * hw + p] * y[ch * hw + p];
        for (int ch = 0; ch < c; ++ch) {
          pg[0][ch * hw + p] += y[ch * hw + p] * (up[ch * hw + p] - dot);
        }
      }
    };
  }
  return Tensor(n);
}

// ---- backward ----

bool GradientMap::contains(const Tensor& t) const { return entries_.count(t.id()) > 0; }

const Tensor& GradientMap::at(const Tensor& t) const {
  auto it = entries_.find(t.id());
  if (it == entries_.end()) {
    throw std::invalid_argument("GradientMap: no gradient recorded for tensor id " +
                                std::to_string(t.id()));
  }
  return it->second;
}

void GradientMap::insert(uint64_t id, Tensor grad) { entries_.emplace(id, std::move(grad)); }

GradientMap backward(const Tensor& root, bool write_leaf_grads) {
  check_defined(root, "backward");
  if (root.size() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(root.shape()));
  }
  GradientMap result;
  Node* rn = root.node().get();
  if (!rn->needs_grad && !rn->requires_grad) return result;

  // Post-order over gradient-needing nodes; a node revisited while still on
  // the stack would mean a cycle.
  std::vector<Node*> topo;
  std::unordered_map<Node*, int> state;  // 1 = on stack, 2 = done
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(rn, 0);
  state[rn] = 1;
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (!p->needs_grad && !p->requires_grad) continue;
      auto it = state.find(p);
      if (it == state.end()) {
        state[p] = 1;
        stack.emplace_back(p, 0);
      } else if (it->second == 1) {
        throw std::invalid_argument("backward: cycle detected in operation graph");
      }
    } else {
      state[node] = 2;
      topo.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, std::vector<double>> buffers;
  buffers.reserve(topo.size());
  for (Node* node : topo) buffers.emplace(node, std::vector<double>(node->data.size(), 0.0));
  buffers[rn][0] = 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* node = *it;
    if (!node->backward) continue;
    std::vector<double*> pg(node->parents.size(), nullptr);
    for (size_t i = 0; i < node->parents.size(); ++i) {
      auto b = buffers.find(node->parents[i].get());
      if (b != buffers.end()) pg[i] = b->second.data();
    }
    node->backward(buffers[node].data(), pg);
  }

  for (Node* node : topo) {
    if (!node->parents.empty() || !node->requires_grad) continue;
    const auto& buf = buffers[node];
    std::vector<float> g(buf.size());
    for (size_t i = 0; i < buf.size(); ++i) g[i] = static_cast<float>(buf[i]);
    if (write_leaf_grads) node->grad = g;
    result.insert(node->id, Tensor::from_data(node->shape, std::move(g)));
  }
  return result;
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x,
                               double step) {
  check_defined(x, "finite_difference_check");
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be positive");

  Tensor leaf = x.detach().set_requires_grad(true);
  Tensor out = fn(leaf);
  if (out.size() != 1) {
    throw std::invalid_argument("finite_difference_check: fn must return a scalar");
  }
  if (!std::isfinite(out.item())) {
    throw std::invalid_argument("finite_difference_check: fn returned a non-finite value");
  }
  GradientMap gm = backward(out);
  std::vector<float> analytic(x.size(), 0.0f);
  if (gm.contains(leaf)) {
    auto g = gm.at(leaf).data();
    analytic.assign(g.begin(), g.end());
  }

  std::vector<float> base(x.data().begin(), x.data().end());
  double worst = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) {
    std::vector<float> plus = base, minus = base;
    plus[i] = static_cast<float>(base[i] + step);
    minus[i] = static_cast<float>(base[i] - step);
    const float fp = fn(Tensor::from_data(x.shape(), std::move(plus))).item();
    const float fm = fn(Tensor::from_data(x.shape(), std::move(minus))).item();
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::invalid_argument("finite_difference_check: fn returned a non-finite value");
    }
    const double central = (static_cast<double>(fp) - fm) / (2.0 * step);
    const double err = std::abs(analytic[i] - central) / (std::abs(central) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace xald
