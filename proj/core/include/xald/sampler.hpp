#pragma once

// Adversarial particle generation. A particle set approximates the local
// distribution of adversarial examples around one anchor image: particles
// start as projected noise and follow kernel-weighted ascent on the model
// discrepancy, with an RBF repulsion term that keeps them apart. The kernel
// is evaluated either on raw pixels or on encoder features.

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "xald/rng.hpp"
#include "xald/segnet.hpp"
#include "xald/tensor.hpp"

namespace xald {

enum class NormOrder { l2, linf };
enum class KernelSpace { pixel, feature };

struct SamplerConfig {
  float epsilon = 0.1f;   // ball radius, normalized intensity units
  NormOrder norm_p = NormOrder::l2;
  float tau = 0.05f;      // step size along the normalized update
  int iters = 5;          // L
  float eta = 0.01f;      // initial noise factor
  int n_particles = 2;    // N
  KernelSpace kernel_space = KernelSpace::feature;
  uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

struct ParticleSet {
  Tensor anchor;
  std::vector<Tensor> particles;
  SamplerConfig config;
};

// l2: radial scaling of the displacement when it leaves the ball;
// linf: per-coordinate clamp. Inputs already inside come back unchanged.
Tensor project_ball(const Tensor& candidate, const Tensor& anchor, float epsilon, NormOrder p);

// exp(-|a-b|^2 / (2 sigma^2))
double rbf_kernel(const Tensor& a, const Tensor& b, double sigma);

// sigma from sigma^2 = median pairwise squared distance / (2 ln(N+1)),
// floored at 1e-6. Even pair counts take the midpoint of the two middle
// values.
double median_bandwidth(std::span<const Tensor> embeddings);

// anchor + eta * uniform(-1,1) noise per coordinate, projected into the ball
std::vector<Tensor> init_particles(const Tensor& anchor, const SamplerConfig& cfg, Rng& rng);

// Gradients of the log target density, one per particle.
using LogpGradFn = std::function<std::vector<Tensor>(const std::vector<Tensor>&)>;
// Graph-building embedding from an input leaf; gradients of the kernel flow
// through it via the differentiation engine.
using EmbeddingFn = std::function<Tensor(const Tensor&)>;

// cfg.iters rounds of: phi_i = (1/N) sum_j [k(e_j,e_i) g_j + grad_j k(e_j,e_i)],
// then x_i <- project(x_i + tau * phi_i / |phi_i|), all particles updated
// simultaneously. Without an embedding the kernel acts on raw particles and
// grad_j k uses its closed form k (x_i - x_j) / sigma^2; with one, grad_j k
// is pulled back through the embedding by the engine. Projection can be
// disabled with an infinite epsilon. A single particle degenerates to
// normalized projected gradient ascent.
std::vector<Tensor> svgd_generic(const LogpGradFn& logp_grad, std::vector<Tensor> particles,
                                 const std::optional<EmbeddingFn>& embedding, const Tensor& anchor,
                                 const SamplerConfig& cfg);

// Particle approximation of the local adversarial distribution whose energy
// is the Dice discrepancy against the anchor prediction. Feature-space RBF
// kernel, bandwidth re-estimated every iteration.
ParticleSet svgdf_sample(const SegModel& model, const Tensor& anchor, const SamplerConfig& cfg);
// Same, with the kernel on raw pixels.
ParticleSet svgd_sample(const SegModel& model, const Tensor& anchor, const SamplerConfig& cfg);

// Single adversarial example: projected normalized ascent on the pixelwise
// KL against the anchor prediction, from a noisy start.
Tensor vat_perturb(const SegModel& model, const Tensor& anchor, const SamplerConfig& cfg);

const char* to_string(NormOrder p);
const char* to_string(KernelSpace k);

}  // namespace xald
