#pragma once

// Deterministic synthetic 2D segmentation corpus: noisy shaded backgrounds
// with one bright ellipse (class 1) and one dimmer rectangle (class 2), the
// ellipse painted last. Stored in a small binary-per-sample format next to a
// JSON manifest.

#include <cstdint>
#include <string>
#include <vector>

#include "xald/tensor.hpp"

namespace xald {

struct Sample {
  Tensor image;                // [1,H,W], values in [0,1]
  std::vector<int32_t> mask;   // H*W row-major labels
  int h = 0, w = 0;
};

struct DatasetManifest {
  std::string version = "1";
  int h = 0, w = 0, c = 3;
  int n_train = 0, n_eval = 0;
  std::vector<int> labeled_indices;  // sorted subset of [0, n_train)
  uint64_t seed = 0;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> train;
  std::vector<Sample> eval;
};

// Geometry behind one generated sample, kept around so tests can rasterize
// the shapes independently.
struct SampleGeometry {
  double bg = 0.0;
  double ramp_gain = 0.0, ramp_theta = 0.0;
  int rect_r0 = 0, rect_c0 = 0, rect_r1 = 0, rect_c1 = 0;  // half-open rows/cols
  double ell_cy = 0.0, ell_cx = 0.0, ell_a = 0.0, ell_b = 0.0, ell_rot = 0.0;
};

struct GenerateParams {
  int h = 32, w = 32;
  int c = 3;
  int n_train = 40, n_eval = 16;
  double labeled_fraction = 0.05;  // split stored in the manifest
  uint64_t seed = 7;
};

// Draws geometry until every class is present (class 1 and 2 with at least 9
// pixels each); gives up after 100 attempts.
Sample generate_sample(int h, int w, uint64_t seed, SampleGeometry* geometry = nullptr);

// Writes manifest.json plus sample_%04d.bin files (train samples first, then
// eval). Byte-identical output for identical parameters.
void generate_dataset(const GenerateParams& params, const std::string& dir);

// max(1, round-half-away-from-zero(fraction * n_train)) indices drawn
// uniformly without replacement, sorted.
std::vector<int> split_labels(const DatasetManifest& manifest, double fraction, uint64_t seed);

void save_sample(const Sample& sample, const std::string& path);
Sample load_sample(const std::string& path);

Dataset load_dataset(const std::string& dir);

}  // namespace xald
