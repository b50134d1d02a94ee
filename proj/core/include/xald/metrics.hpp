#pragma once

// Hard-mask evaluation metrics and the particle diversity statistic.

#include <cstdint>
#include <span>
#include <vector>

#include "xald/tensor.hpp"

namespace xald {

struct MetricReport {
  double dice_pct = 0.0;     // [0,100]
  double jaccard_pct = 0.0;  // [0,100]
  double hd95_px = 0.0;
  double asd_px = 0.0;
};

// Overlap scores are averaged over foreground classes (label 0 is treated as
// background); a class absent from both masks counts as a perfect 1.
//
// Surface distances use boundary pixel sets of the full label maps: a pixel
// is boundary when any 4-neighbor inside the image carries a different
// label. 95HD is the max over both directions of the nearest-rank 95th
// percentile of nearest-boundary Euclidean distances; ASD is the mean of the
// directed distances pooled from both directions. Both boundaries empty
// gives 0; exactly one empty gives the image diagonal.
MetricReport seg_metrics(std::span<const int32_t> pred, std::span<const int32_t> gt, int h, int w,
                         int num_classes);

// Mean over unordered particle pairs of the summed squared elementwise
// difference. Needs at least two particles of equal shape.
double mean_pairwise_sse(std::span<const Tensor> particles);

}  // namespace xald
