#include "xald/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace xald {

namespace {

struct Pixel {
  int y, x;
};

std::vector<Pixel> boundary_pixels(std::span<const int32_t> mask, int h, int w) {
  std::vector<Pixel> out;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int32_t v = mask[y * w + x];
      const bool edge = (y > 0 && mask[(y - 1) * w + x] != v) ||
                        (y + 1 < h && mask[(y + 1) * w + x] != v) ||
                        (x > 0 && mask[y * w + x - 1] != v) ||
                        (x + 1 < w && mask[y * w + x + 1] != v);
      if (edge) out.push_back({y, x});
    }
  }
  return out;
}

// nearest-boundary Euclidean distance for every pixel of `from`
std::vector<double> directed_distances(const std::vector<Pixel>& from, const std::vector<Pixel>& to) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const Pixel& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const Pixel& b : to) {
      const double dy = a.y - b.y, dx = a.x - b.x;
      best = std::min(best, dy * dy + dx * dx);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

double nearest_rank_p95(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const size_t rank = static_cast<size_t>(std::ceil(0.95 * static_cast<double>(values.size())));
  return values[std::max<size_t>(rank, 1) - 1];
}

}  // namespace

MetricReport seg_metrics(std::span<const int32_t> pred, std::span<const int32_t> gt, int h, int w,
                         int num_classes) {
  const int64_t n = static_cast<int64_t>(h) * w;
  if (static_cast<int64_t>(pred.size()) != n || static_cast<int64_t>(gt.size()) != n) {
    throw std::invalid_argument("seg_metrics: mask sizes do not match " + std::to_string(h) + "x" +
                                std::to_string(w));
  }
  if (num_classes < 2) throw std::invalid_argument("seg_metrics: need at least 2 classes");
  for (int64_t i = 0; i < n; ++i) {
    if (pred[i] < 0 || pred[i] >= num_classes || gt[i] < 0 || gt[i] >= num_classes) {
      throw std::invalid_argument("seg_metrics: label out of range [0," +
                                  std::to_string(num_classes) + ") at pixel " + std::to_string(i));
    }
  }

  MetricReport r;
  double dice_acc = 0.0, jacc_acc = 0.0;
  for (int c = 1; c < num_classes; ++c) {
    int64_t inter = 0, np = 0, ng = 0;
    for (int64_t i = 0; i < n; ++i) {
      const bool a = pred[i] == c, b = gt[i] == c;
      inter += a && b;
      np += a;
      ng += b;
    }
    if (np + ng == 0) {
      dice_acc += 1.0;
      jacc_acc += 1.0;
    } else {
      dice_acc += 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
      jacc_acc += static_cast<double>(inter) / static_cast<double>(np + ng - inter);
    }
  }
  r.dice_pct = 100.0 * dice_acc / (num_classes - 1);
  r.jaccard_pct = 100.0 * jacc_acc / (num_classes - 1);

  const auto bp = boundary_pixels(pred, h, w);
  const auto bg = boundary_pixels(gt, h, w);
  if (bp.empty() && bg.empty()) {
    r.hd95_px = 0.0;
    r.asd_px = 0.0;
  } else if (bp.empty() || bg.empty()) {
    const double diag = std::sqrt(static_cast<double>(h) * h + static_cast<double>(w) * w);
    r.hd95_px = diag;
    r.asd_px = diag;
  } else {
    auto d_pg = directed_distances(bp, bg);
    auto d_gp = directed_distances(bg, bp);
    r.hd95_px = std::max(nearest_rank_p95(d_pg), nearest_rank_p95(d_gp));
    double acc = 0.0;
    for (double d : d_pg) acc += d;
    for (double d : d_gp) acc += d;
    r.asd_px = acc / static_cast<double>(d_pg.size() + d_gp.size());
  }
  return r;
}

double mean_pairwise_sse(std::span<const Tensor> particles) {
  if (particles.size() < 2) {
    throw std::invalid_argument("mean_pairwise_sse: need at least 2 particles, got " +
                                std::to_string(particles.size()));
  }
  for (size_t i = 1; i < particles.size(); ++i) {
    if (particles[i].shape() != particles[0].shape()) {
      throw std::invalid_argument("mean_pairwise_sse: shape mismatch " +
                                  shape_str(particles[0].shape()) + " vs " +
                                  shape_str(particles[i].shape()));
    }
  }
  double total = 0.0;
  int64_t pairs = 0;
  for (size_t i = 0; i < particles.size(); ++i) {
    const auto a = particles[i].data();
    for (size_t j = i + 1; j < particles.size(); ++j) {
      const auto b = particles[j].data();
      double sse = 0.0;
      for (size_t k = 0; k < a.size(); ++k) {
        const double d = static_cast<double>(a[k]) - b[k];
        sse += d * d;
      }
      total += sse;
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

}  // namespace xald
