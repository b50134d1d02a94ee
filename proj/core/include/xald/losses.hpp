#pragma once

#include "xald/tensor.hpp"

namespace xald {

// Soft multi-class Dice discrepancy between two [C,H,W] probability maps:
// mean over classes of 1 - (2*sum(p_c q_c) + s) / (sum p_c + sum q_c + s),
// s = 1e-5. Product-form intersection keeps the gradient smooth, which the
// particle samplers rely on; the price is a nonzero value for identical soft
// predictions. stop_grad_q treats q as a constant during backward.
Tensor dice_loss(const Tensor& p, const Tensor& q, bool stop_grad_q);

// Mean over pixels of sum_c q_c (log q_c - log p_c) with q always treated as
// the constant reference; probabilities are floored at 1e-8 before the logs.
Tensor kl_pixelwise(const Tensor& p, const Tensor& q);

// Constant [C,H,W] one-hot encoding of an integer mask.
Tensor one_hot(std::span<const int32_t> mask, int h, int w, int num_classes);

}  // namespace xald
