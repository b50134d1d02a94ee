#pragma once

// Semi-supervised training: supervised Dice on the labeled split plus a
// warm-up-weighted consistency regularizer over unlabeled images, SGD with
// momentum, periodic evaluation, and JSON/CSV reporting.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xald/cross_ald.hpp"
#include "xald/metrics.hpp"
#include "xald/sampler.hpp"
#include "xald/segnet.hpp"
#include "xald/synth_data.hpp"

namespace xald {

enum class Regularizer {
  none,
  vat,
  vat_mixup,
  ranmixup,
  svgd_consistency,
  svgdf_consistency,
  cross_ald,
};

const char* to_string(Regularizer r);
std::optional<Regularizer> regularizer_from_string(std::string_view name);
const std::vector<std::string>& regularizer_names();

struct TrainConfig {
  int total_iters = 2000;
  int batch_labeled = 2;
  int batch_unlabeled = 2;
  float lr = 0.01f;
  float momentum = 0.9f;
  float lambda_cross_max = 0.1f;
  float lambda_cs = 0.0f;  // weight hook only; no inter-class loss behind it
  int rampup_iters = 800;
  int eval_every = 200;
  // > 0 re-splits the train set at startup; 0 keeps the manifest's split.
  float labeled_fraction = 0.0f;
  SamplerConfig sampler;
  MixConfig mix;
  Regularizer regularizer = Regularizer::none;
  Arch arch;
  uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

struct EvalPoint {
  int iter = 0;
  double sup_loss = 0.0;
  double reg_loss = 0.0;
  double lambda = 0.0;
  MetricReport metrics;
};

struct TrainState {
  SegModel model;
  std::map<std::string, std::vector<float>> velocity;
  int iter = 0;
  Rng rng;
  std::vector<EvalPoint> history;

  explicit TrainState(SegModel m, uint64_t seed) : model(std::move(m)), rng(seed) {}
};

// lambda_max * exp(-5 (1 - min(t,T)/T)^2)
double warmup_weight(int iter, int rampup_iters, double lambda_max);

struct StepLosses {
  double supervised = 0.0;
  double regularizer = 0.0;
  double lambda = 0.0;
};

// One optimizer update: mean supervised Dice over the labeled batch plus the
// warm-up-weighted regularizer over the unlabeled batch. Particle sets are
// sampled fresh against the frozen model (no gradient to the parameters
// through sampling). Velocity update v <- mu v + g, then theta <- theta - lr v.
StepLosses train_step(TrainState& state, const TrainConfig& cfg,
                      const std::vector<Sample>& labeled_batch,
                      const std::vector<Tensor>& unlabeled_batch);

// Per-pixel argmax (ties to the lowest class), then seg_metrics averaged
// over the given samples.
MetricReport evaluate(const SegModel& model, const std::vector<Sample>& samples, int num_classes,
                      int threads = 1);

struct RunResult {
  MetricReport final_metrics;
  std::vector<EvalPoint> history;
  double runtime_sec = 0.0;
  std::string report_path, curves_path, checkpoint_path;
};

// Full loop over a dataset directory; writes report.json, curves.csv and
// checkpoint.bin into out_dir. Byte-identical outputs for identical
// (config, dataset) apart from the recorded wall-clock time.
RunResult run_training(const TrainConfig& cfg, const std::string& dataset_path,
                       const std::string& out_dir);

}  // namespace xald
