#include "xald/cross_ald.hpp"

#include <algorithm>
#include <stdexcept>

#include "xald/losses.hpp"

namespace xald {

namespace {

bool same_values(const Tensor& a, const Tensor& b) {
  if (a.id() == b.id()) return true;
  if (a.shape() != b.shape()) return false;
  const auto ad = a.data(), bd = b.data();
  return std::equal(ad.begin(), ad.end(), bd.begin());
}

}  // namespace

void MixConfig::validate() const {
  if (!(alpha > 0.0f)) throw std::invalid_argument("mix: alpha must be positive");
}

double sample_beta(double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw std::invalid_argument("sample_beta: alpha must be positive");
  return rng.beta_symmetric(alpha);
}

Tensor mix(const Tensor& a, const Tensor& b, double gamma) {
  if (!a.defined() || !b.defined()) throw std::invalid_argument("mix: undefined tensor");
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("mix: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  if (!(gamma >= 0.0 && gamma <= 1.0)) {
    throw std::invalid_argument("mix: gamma " + std::to_string(gamma) + " outside [0,1]");
  }
  const auto ad = a.data(), bd = b.data();
  std::vector<float> out(ad.size());
  for (size_t i = 0; i < ad.size(); ++i) {
    out[i] = static_cast<float>(gamma * ad[i] + (1.0 - gamma) * bd[i]);
  }
  return Tensor::from_data(a.shape(), std::move(out));
}

Tensor cross_ald_loss_at(const SegModel& model, const Tensor& x_i, const Tensor& x_j,
                         const Tensor& particle_i, const Tensor& particle_j, double gamma) {
  Tensor mixed_adv = mix(particle_i, particle_j, gamma);
  Tensor mixed_nat = mix(x_i, x_j, gamma);
  Tensor target = forward(model, mixed_nat).probs;
  return dice_loss(forward(model, mixed_adv).probs, target, /*stop_grad_q=*/true);
}

Tensor cross_ald_loss(const SegModel& model, const Tensor& x_i, const Tensor& x_j,
                      const ParticleSet& pset_i, const ParticleSet& pset_j, const MixConfig& cfg,
                      Rng& rng) {
  cfg.validate();
  if (x_i.id() == x_j.id()) {
    throw std::invalid_argument("cross_ald_loss: need two distinct input images");
  }
  if (!same_values(pset_i.anchor, x_i) || !same_values(pset_j.anchor, x_j)) {
    throw std::invalid_argument("cross_ald_loss: particle set anchor does not match its image");
  }
  if (pset_i.particles.empty() || pset_j.particles.empty()) {
    throw std::invalid_argument("cross_ald_loss: empty particle set");
  }
  const double gamma = sample_beta(cfg.alpha, rng);
  const int n = rng.uniform_int(static_cast<int>(pset_i.particles.size()));
  const int m = rng.uniform_int(static_cast<int>(pset_j.particles.size()));
  return cross_ald_loss_at(model, x_i, x_j, pset_i.particles[n], pset_j.particles[m], gamma);
}

Tensor ranmixup_loss(const SegModel& model, const Tensor& x_i, const Tensor& x_j,
                     const MixConfig& cfg, Rng& rng) {
  cfg.validate();
  if (x_i.id() == x_j.id()) {
    throw std::invalid_argument("ranmixup_loss: need two distinct input images");
  }
  const double gamma = sample_beta(cfg.alpha, rng);
  Tensor target = mix(forward(model, x_i).probs.detach(), forward(model, x_j).probs.detach(), gamma);
  Tensor mixed = mix(x_i, x_j, gamma);
  return dice_loss(forward(model, mixed).probs, target, /*stop_grad_q=*/true);
}

}  // namespace xald
