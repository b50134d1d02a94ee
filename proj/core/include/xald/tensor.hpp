#pragma once

// Dense float32 tensors with reverse-mode differentiation.
//
// Values are immutable once created. Every operation records its parents so
// backward() can replay the graph in reverse topological order. Accumulating
// reductions (sums, conv inner products, softmax normalizers) run in double
// and are rounded to float once, so results do not depend on traversal
// order. Graphs are throwaway: build, backward, drop.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace xald {

namespace detail {
struct Node;
}

class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, float value);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data);
  static Tensor scalar(float value);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const;
  int64_t size() const;
  std::span<const float> data() const;
  float item() const;  // scalar tensors only
  float at(int64_t flat_index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);  // leaves only
  // Gradient written by the last backward(root, /*write_leaf_grads=*/true);
  // empty span if never populated.
  std::span<const float> grad() const;

  // Value copy with no operation record and no gradient requirement.
  Tensor detach() const;

  uint64_t id() const;
  bool is_leaf() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
  std::shared_ptr<detail::Node> node_;
};

// ---- primitive catalog ----
// Elementwise operations require identical shapes; shape rules for the
// structured ops are listed next to each declaration.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor pow(const Tensor& a, float exponent);

Tensor sum(const Tensor& a);            // -> scalar
Tensor sum(const Tensor& a, int axis);  // drops the given axis
Tensor mean(const Tensor& a);           // -> scalar

// y = x for x > threshold, else threshold + slope * (x - threshold).
// slope 0.01 gives the leaky rectifier, slope 0 a hard floor.
Tensor max_with(const Tensor& a, float threshold, float slope);
Tensor leaky_relu(const Tensor& a, float slope = 0.01f);
Tensor clamp_min(const Tensor& a, float floor);

// input [Cin,H,W], weight [Cout,Cin,kh,kw] (odd kh/kw, zero padded, stride
// 1), bias [Cout] -> [Cout,H,W]
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias);
// [C,H,W] with even H,W -> [C,H/2,W/2]
Tensor avg_pool2(const Tensor& a);
// [C,h,w] -> [C,2h,2w], nearest neighbor
Tensor upsample2(const Tensor& a);
// [Ca,H,W] + [Cb,H,W] -> [Ca+Cb,H,W]
Tensor concat_channels(const Tensor& a, const Tensor& b);
// [C,H,W] -> per-pixel softmax over the channel axis
Tensor softmax_channels(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

class GradientMap {
public:
  bool contains(const Tensor& t) const;
  const Tensor& at(const Tensor& t) const;
  size_t size() const { return entries_.size(); }

  void insert(uint64_t id, Tensor grad);

private:
  std::unordered_map<uint64_t, Tensor> entries_;
};

// Reverse-mode gradients of a scalar root with respect to every leaf marked
// as requiring gradients. The graph is traversed exactly once. When
// write_leaf_grads is set the result is also stored on each leaf (only safe
// when no other graph shares those leaves concurrently).
GradientMap backward(const Tensor& root, bool write_leaf_grads = false);

// Max over coordinates of |analytic - central| / (|central| + 1e-8) for a
// deterministic scalar-valued fn, with central differences of the given step.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& fn,
                               const Tensor& x, double step);

std::string shape_str(const std::vector<int>& shape);

}  // namespace xald
