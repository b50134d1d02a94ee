#include "xald/losses.hpp"

#include <stdexcept>

namespace xald {

namespace {

constexpr float kDiceSmoothing = 1e-5f;
constexpr float kLogFloor = 1e-8f;

void check_probs_pair(const Tensor& p, const Tensor& q, const char* op) {
  if (!p.defined() || !q.defined()) throw std::invalid_argument(std::string(op) + ": undefined operand");
  if (p.shape().size() != 3) {
    throw std::invalid_argument(std::string(op) + ": want [C,H,W], got " + shape_str(p.shape()));
  }
  if (p.shape() != q.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(p.shape()) +
                                " vs " + shape_str(q.shape()));
  }
}

Tensor sum_spatial(const Tensor& t) {
  // [C,H,W] -> [C]
  return sum(sum(t, 2), 1);
}

}  // namespace

Tensor dice_loss(const Tensor& p, const Tensor& q, bool stop_grad_q) {
  check_probs_pair(p, q, "dice_loss");
  const Tensor qq = stop_grad_q ? q.detach() : q;
  const int c = p.shape()[0];
  const Tensor smooth = Tensor::full({c}, kDiceSmoothing);
  Tensor inter = sum_spatial(mul(p, qq));
  Tensor denom = add(add(sum_spatial(p), sum_spatial(qq)), smooth);
  Tensor frac = mul(add(scale(inter, 2.0f), smooth), pow(denom, -1.0f));
  return mean(sub(Tensor::full({c}, 1.0f), frac));
}

Tensor kl_pixelwise(const Tensor& p, const Tensor& q) {
  check_probs_pair(p, q, "kl_pixelwise");
  const Tensor pc = clamp_min(p, kLogFloor);
  const Tensor qc = clamp_min(q.detach(), kLogFloor);
  Tensor per_channel = mul(qc, sub(log(qc), log(pc)));
  return mean(sum(per_channel, 0));
}

Tensor one_hot(std::span<const int32_t> mask, int h, int w, int num_classes) {
  if (static_cast<int64_t>(mask.size()) != static_cast<int64_t>(h) * w) {
    throw std::invalid_argument("one_hot: mask size " + std::to_string(mask.size()) +
                                " does not match " + std::to_string(h) + "x" + std::to_string(w));
  }
  std::vector<float> data(static_cast<size_t>(num_classes) * h * w, 0.0f);
  for (int64_t i = 0; i < static_cast<int64_t>(mask.size()); ++i) {
    const int32_t label = mask[i];
    if (label < 0 || label >= num_classes) {
      throw std::invalid_argument("one_hot: label " + std::to_string(label) + " out of range [0," +
                                  std::to_string(num_classes) + ")");
    }
    data[static_cast<size_t>(label) * h * w + i] = 1.0f;
  }
  return Tensor::from_data({num_classes, h, w}, std::move(data));
}

}  // namespace xald
