#pragma once

// Mixed-particle consistency losses: Beta-weighted mixing between the
// adversarial neighborhoods of two images, plus the plain-mixup baseline.

#include "xald/rng.hpp"
#include "xald/sampler.hpp"
#include "xald/segnet.hpp"
#include "xald/tensor.hpp"

namespace xald {

struct MixConfig {
  float alpha = 1.0f;  // Beta(alpha, alpha) concentration
  uint64_t seed = 0;

  void validate() const;
};

// Symmetric Beta draw via the ratio of two Gamma variates.
double sample_beta(double alpha, Rng& rng);

// gamma * a + (1 - gamma) * b, exact at the endpoints. Plain data, no graph.
Tensor mix(const Tensor& a, const Tensor& b, double gamma);

// Dice consistency between the mixed adversarial input and the (detached)
// prediction at the correspondingly mixed natural input. Gradients reach the
// model through the adversarial branch only.
Tensor cross_ald_loss_at(const SegModel& model, const Tensor& x_i, const Tensor& x_j,
                         const Tensor& particle_i, const Tensor& particle_j, double gamma);

// Draws gamma, then the two particle indices, then delegates. Anchors of the
// particle sets must match the given images, and x_i, x_j must be distinct.
Tensor cross_ald_loss(const SegModel& model, const Tensor& x_i, const Tensor& x_j,
                      const ParticleSet& pset_i, const ParticleSet& pset_j, const MixConfig& cfg,
                      Rng& rng);

// Mixup between natural inputs: predicts the mixed image against the mix of
// the two detached natural predictions.
Tensor ranmixup_loss(const SegModel& model, const Tensor& x_i, const Tensor& x_j,
                     const MixConfig& cfg, Rng& rng);

}  // namespace xald
