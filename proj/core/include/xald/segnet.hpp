#pragma once

// Two-scale encoder-decoder segmentation network. Small on purpose: one
// pooling stage and one skip connection is the least structure that still
// separates "encoder features" from raw pixels, which the feature-space
// sampler needs.
//
//   conv3x3(in->w)  + leaky
//   conv3x3(w->w)   + leaky      -> skip
//   avgpool2
//   conv3x3(w->2w)  + leaky      -> features
//   upsample2, concat with skip
//   conv3x3(3w->w)  + leaky
//   conv1x1(w->C), channel softmax

#include <cstdint>
#include <map>
#include <string>

#include "xald/tensor.hpp"

namespace xald {

struct Arch {
  int in_channels = 1;
  int num_classes = 3;
  int base_width = 8;
};

struct SegModel {
  std::map<std::string, Tensor> params;  // sorted by name
  Arch arch;
  uint64_t seed = 0;

  // Copy whose parameter leaves require gradients; used to build loss graphs.
  SegModel with_grad() const;
};

// Per-pixel class probabilities, [C,H,W], each pixel on the simplex.
struct Prediction {
  Tensor probs;
};

struct ForwardTrace {
  Tensor probs;
  Tensor features;  // encoder output, [2w, H/2, W/2]
  Tensor skip;      // pre-pool activations, [w, H, W]
};

// Conv weights uniform in +-sqrt(6/fan_in), biases zero, fixed draw order.
SegModel init_model(const Arch& arch, uint64_t seed);

ForwardTrace forward_trace(const SegModel& model, const Tensor& image);
Prediction forward(const SegModel& model, const Tensor& image);
// Encoder prefix only; identical tensors to forward_trace(...).features.
Tensor features(const SegModel& model, const Tensor& image);
// Decoder half; forward_trace is exactly decode applied to the encoder outputs.
Tensor decode(const SegModel& model, const Tensor& skip, const Tensor& features);

void save_checkpoint(const SegModel& model, const std::string& path);
SegModel load_checkpoint(const std::string& path);

}  // namespace xald
