#include "xald/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "xald/errors.hpp"
#include "xald/losses.hpp"
#include "xald/parallel.hpp"

namespace xald {

namespace {

double l2_norm(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

double sq_distance(const Tensor& a, const Tensor& b) {
  const auto ad = a.data(), bd = b.data();
  double acc = 0.0;
  for (size_t i = 0; i < ad.size(); ++i) {
    const double d = static_cast<double>(ad[i]) - bd[i];
    acc += d * d;
  }
  return acc;
}

}  // namespace

void SamplerConfig::validate() const {
  if (!(epsilon > 0.0f)) throw std::invalid_argument("sampler: epsilon must be positive");
  if (!(tau > 0.0f)) throw std::invalid_argument("sampler: tau must be positive");
  if (eta < 0.0f) throw std::invalid_argument("sampler: eta must be nonnegative");
  if (iters < 1) throw std::invalid_argument("sampler: iters must be >= 1");
  if (n_particles < 1) throw std::invalid_argument("sampler: n_particles must be >= 1");
  if (threads < 1) throw std::invalid_argument("sampler: threads must be >= 1");
}

Tensor project_ball(const Tensor& candidate, const Tensor& anchor, float epsilon, NormOrder p) {
  if (!candidate.defined() || !anchor.defined()) {
    throw std::invalid_argument("project_ball: undefined tensor");
  }
  if (candidate.shape() != anchor.shape()) {
    throw std::invalid_argument("project_ball: shape mismatch " + shape_str(candidate.shape()) +
                                " vs " + shape_str(anchor.shape()));
  }
  if (!(epsilon > 0.0f)) throw std::invalid_argument("project_ball: epsilon must be positive");

  const auto cd = candidate.data(), ad = anchor.data();
  if (p == NormOrder::linf) {
    bool inside = true;
    for (size_t i = 0; i < cd.size(); ++i) {
      if (std::abs(cd[i] - ad[i]) > epsilon) {
        inside = false;
        break;
      }
    }
    if (inside) return candidate;
    std::vector<float> out(cd.size());
    for (size_t i = 0; i < cd.size(); ++i) {
      out[i] = ad[i] + std::clamp(cd[i] - ad[i], -epsilon, epsilon);
    }
    return Tensor::from_data(candidate.shape(), std::move(out));
  }

  double norm_sq = 0.0;
  for (size_t i = 0; i < cd.size(); ++i) {
    const double d = static_cast<double>(cd[i]) - ad[i];
    norm_sq += d * d;
  }
  const double norm = std::sqrt(norm_sq);
  // small slack keeps the operation exactly idempotent in float arithmetic
  if (norm <= static_cast<double>(epsilon) * (1.0 + 1e-6)) return candidate;
  const double f = static_cast<double>(epsilon) / norm;
  std::vector<float> out(cd.size());
  for (size_t i = 0; i < cd.size(); ++i) {
    out[i] = static_cast<float>(ad[i] + (static_cast<double>(cd[i]) - ad[i]) * f);
  }
  return Tensor::from_data(candidate.shape(), std::move(out));
}

double rbf_kernel(const Tensor& a, const Tensor& b, double sigma) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("rbf_kernel: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  if (!(sigma > 0.0)) throw std::invalid_argument("rbf_kernel: sigma must be positive");
  return std::exp(-sq_distance(a, b) / (2.0 * sigma * sigma));
}

double median_bandwidth(std::span<const Tensor> embeddings) {
  const size_t n = embeddings.size();
  if (n < 2) throw std::invalid_argument("median_bandwidth: need at least 2 embeddings");
  std::vector<double> d2;
  d2.reserve(n * (n - 1) / 2);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) d2.push_back(sq_distance(embeddings[i], embeddings[j]));
  }
  std::sort(d2.begin(), d2.end());
  const size_t m = d2.size();
  const double median = (m % 2 == 1) ? d2[m / 2] : 0.5 * (d2[m / 2 - 1] + d2[m / 2]);
  const double sigma_sq = std::max(median / (2.0 * std::log(static_cast<double>(n) + 1.0)), 1e-6);
  return std::sqrt(sigma_sq);
}

std::vector<Tensor> init_particles(const Tensor& anchor, const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto ad = anchor.data();
  std::vector<Tensor> out;
  out.reserve(cfg.n_particles);
  for (int i = 0; i < cfg.n_particles; ++i) {
    std::vector<float> data(ad.size());
    for (size_t k = 0; k < ad.size(); ++k) {
      data[k] = static_cast<float>(ad[k] + cfg.eta * rng.uniform(-1.0, 1.0));
    }
    out.push_back(project_ball(Tensor::from_data(anchor.shape(), std::move(data)), anchor,
                               cfg.epsilon, cfg.norm_p));
  }
  return out;
}

std::vector<Tensor> svgd_generic(const LogpGradFn& logp_grad, std::vector<Tensor> particles,
                                 const std::optional<EmbeddingFn>& embedding, const Tensor& anchor,
                                 const SamplerConfig& cfg) {
  cfg.validate();
  const int n = static_cast<int>(particles.size());
  if (n < 1) throw std::invalid_argument("svgd_generic: empty particle list");
  const int64_t dim = particles[0].size();

  for (int iter = 0; iter < cfg.iters; ++iter) {
    const std::vector<Tensor> grads = logp_grad(particles);
    if (static_cast<int>(grads.size()) != n) {
      throw std::invalid_argument("svgd_generic: logp_grad returned " +
                                  std::to_string(grads.size()) + " gradients for " +
                                  std::to_string(n) + " particles");
    }
    for (const Tensor& g : grads) {
      for (float v : g.data()) {
        if (!std::isfinite(v)) {
          throw NumericError("svgd_generic: non-finite log-density gradient at iteration " +
                             std::to_string(iter));
        }
      }
    }

    // embedding values for the kernel
    std::vector<Tensor> embs(n);
    if (embedding) {
      parallel_for(n, cfg.threads, [&](int j) { embs[j] = (*embedding)(particles[j].detach()).detach(); });
    } else {
      for (int j = 0; j < n; ++j) embs[j] = particles[j];
    }
    const double sigma = n >= 2 ? median_bandwidth(embs) : 1.0;
    const double sigma_sq = sigma * sigma;

    std::vector<std::vector<double>> phi(n, std::vector<double>(dim, 0.0));
    parallel_for(n, cfg.threads, [&](int i) {
      auto& acc = phi[i];
      for (int j = 0; j < n; ++j) {
        const double k = rbf_kernel(embs[j], embs[i], sigma);
        const auto gj = grads[j].data();
        for (int64_t t = 0; t < dim; ++t) acc[t] += k * gj[t];
        if (j == i) continue;  // RBF gradient vanishes at zero displacement
        if (!embedding) {
          const auto xi = particles[i].data(), xj = particles[j].data();
          const double c = k / sigma_sq;
          for (int64_t t = 0; t < dim; ++t) {
            acc[t] += c * (static_cast<double>(xi[t]) - xj[t]);
          }
        } else {
          // grad wrt particle j of k(emb(x_j), emb(x_i)), via the engine
          Tensor leaf = particles[j].detach().set_requires_grad(true);
          Tensor emb_j = (*embedding)(leaf);
          Tensor diff = sub(emb_j, embs[i]);
          Tensor k_t = exp(scale(sum(mul(diff, diff)), static_cast<float>(-0.5 / sigma_sq)));
          GradientMap gm = backward(k_t);
          const auto g = gm.at(leaf).data();
          for (int64_t t = 0; t < dim; ++t) acc[t] += g[t];
        }
      }
      for (double& v : acc) v /= n;
      const double norm = l2_norm(acc);
      if (norm > 0.0) {
        for (double& v : acc) v /= norm;
      }
    });

    for (int i = 0; i < n; ++i) {
      const auto xd = particles[i].data();
      std::vector<float> moved(dim);
      for (int64_t t = 0; t < dim; ++t) {
        moved[t] = static_cast<float>(xd[t] + static_cast<double>(cfg.tau) * phi[i][t]);
      }
      particles[i] = project_ball(Tensor::from_data(particles[i].shape(), std::move(moved)), anchor,
                                  cfg.epsilon, cfg.norm_p);
    }
  }
  return particles;
}

namespace {

// grad of the Dice energy wrt each particle, anchor prediction held fixed
LogpGradFn dice_energy_grad(const SegModel& model, const Tensor& anchor_probs, int threads) {
  return [&model, anchor_probs, threads](const std::vector<Tensor>& parts) {
    std::vector<Tensor> out(parts.size());
    parallel_for(static_cast<int>(parts.size()), threads, [&](int j) {
      Tensor leaf = parts[j].detach().set_requires_grad(true);
      Tensor loss = dice_loss(forward(model, leaf).probs, anchor_probs, true);
      out[j] = backward(loss).at(leaf);
    });
    return out;
  };
}

ParticleSet sample_with_space(const SegModel& model, const Tensor& anchor, SamplerConfig cfg,
                              KernelSpace space) {
  cfg.kernel_space = space;
  cfg.validate();
  const Tensor anchor_probs = forward(model, anchor).probs.detach();
  Rng rng(cfg.seed);
  std::vector<Tensor> particles = init_particles(anchor, cfg, rng);
  std::optional<EmbeddingFn> embedding;
  if (space == KernelSpace::feature) {
    embedding = [&model](const Tensor& x) { return features(model, x); };
  }
  particles = svgd_generic(dice_energy_grad(model, anchor_probs, cfg.threads),
                           std::move(particles), embedding, anchor, cfg);
  return {anchor, std::move(particles), cfg};
}

}  // namespace

ParticleSet svgdf_sample(const SegModel& model, const Tensor& anchor, const SamplerConfig& cfg) {
  return sample_with_space(model, anchor, cfg, KernelSpace::feature);
}

ParticleSet svgd_sample(const SegModel& model, const Tensor& anchor, const SamplerConfig& cfg) {
  return sample_with_space(model, anchor, cfg, KernelSpace::pixel);
}

Tensor vat_perturb(const SegModel& model, const Tensor& anchor, const SamplerConfig& cfg) {
  cfg.validate();
  const Tensor anchor_probs = forward(model, anchor).probs.detach();
  SamplerConfig init_cfg = cfg;
  init_cfg.n_particles = 1;
  Rng rng(cfg.seed);
  Tensor x = init_particles(anchor, init_cfg, rng)[0];
  const int64_t dim = x.size();
  for (int iter = 0; iter < cfg.iters; ++iter) {
    Tensor leaf = x.detach().set_requires_grad(true);
    Tensor obj = kl_pixelwise(forward(model, leaf).probs, anchor_probs);
    if (!std::isfinite(obj.item())) {
      throw NumericError("vat_perturb: non-finite objective at iteration " + std::to_string(iter));
    }
    const auto g = backward(obj).at(leaf).data();
    double norm_sq = 0.0;
    for (float v : g) norm_sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(norm_sq);
    if (norm == 0.0) continue;
    const auto xd = x.data();
    std::vector<float> moved(dim);
    for (int64_t t = 0; t < dim; ++t) {
      moved[t] = static_cast<float>(xd[t] + cfg.tau * g[t] / norm);
    }
    x = project_ball(Tensor::from_data(x.shape(), std::move(moved)), anchor, cfg.epsilon,
                     cfg.norm_p);
  }
  return x;
}

const char* to_string(NormOrder p) { return p == NormOrder::l2 ? "l2" : "linf"; }
const char* to_string(KernelSpace k) { return k == KernelSpace::pixel ? "pixel" : "feature"; }

}  // namespace xald
