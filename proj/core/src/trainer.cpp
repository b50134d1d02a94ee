#include "xald/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "xald/config_io.hpp"
#include "xald/errors.hpp"
#include "xald/losses.hpp"
#include "xald/parallel.hpp"

namespace xald {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- regularizer names ----

namespace {

const std::vector<std::pair<Regularizer, std::string>>& regularizer_table() {
  static const std::vector<std::pair<Regularizer, std::string>> table = {
      {Regularizer::none, "none"},
      {Regularizer::vat, "vat"},
      {Regularizer::vat_mixup, "vat_mixup"},
      {Regularizer::ranmixup, "ranmixup"},
      {Regularizer::svgd_consistency, "svgd_consistency"},
      {Regularizer::svgdf_consistency, "svgdf_consistency"},
      {Regularizer::cross_ald, "cross_ald"},
  };
  return table;
}

bool is_paired(Regularizer r) {
  return r == Regularizer::vat_mixup || r == Regularizer::ranmixup || r == Regularizer::cross_ald;
}

}  // namespace

const char* to_string(Regularizer r) {
  for (const auto& [value, name] : regularizer_table()) {
    if (value == r) return name.c_str();
  }
  return "unknown";
}

std::optional<Regularizer> regularizer_from_string(std::string_view name) {
  for (const auto& [value, n] : regularizer_table()) {
    if (n == name) return value;
  }
  return std::nullopt;
}

const std::vector<std::string>& regularizer_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [value, name] : regularizer_table()) out.push_back(name);
    return out;
  }();
  return names;
}

// ---- config ----

void TrainConfig::validate() const {
  if (total_iters < 1) throw std::invalid_argument("train: total_iters must be >= 1");
  if (rampup_iters < 1 || rampup_iters > total_iters) {
    throw std::invalid_argument("train: rampup_iters must be in [1, total_iters]");
  }
  if (!(lr > 0.0f)) throw std::invalid_argument("train: lr must be positive");
  if (momentum < 0.0f || momentum >= 1.0f) {
    throw std::invalid_argument("train: momentum must be in [0,1)");
  }
  if (batch_labeled < 1) throw std::invalid_argument("train: batch_labeled must be >= 1");
  if (batch_unlabeled < 0) throw std::invalid_argument("train: batch_unlabeled must be >= 0");
  if (lambda_cross_max < 0.0f) throw std::invalid_argument("train: lambda_cross_max must be >= 0");
  if (eval_every < 1) throw std::invalid_argument("train: eval_every must be >= 1");
  if (labeled_fraction < 0.0f || labeled_fraction > 1.0f) {
    throw std::invalid_argument("train: labeled_fraction must be in [0,1]");
  }
  if (threads < 1) throw std::invalid_argument("train: threads must be >= 1");
  sampler.validate();
  mix.validate();
}

double warmup_weight(int iter, int rampup_iters, double lambda_max) {
  if (rampup_iters < 1) throw std::invalid_argument("warmup_weight: rampup_iters must be >= 1");
  const double t = std::min(iter, rampup_iters);
  const double x = 1.0 - t / static_cast<double>(rampup_iters);
  return lambda_max * std::exp(-5.0 * x * x);
}

// ---- training step ----

namespace {

Tensor mean_of(std::vector<Tensor> terms) {
  Tensor acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, 1.0f / static_cast<float>(terms.size()));
}

SamplerConfig derived_sampler(const TrainConfig& cfg, int iter, int slot) {
  SamplerConfig sc = cfg.sampler;
  sc.seed = Rng::derive(cfg.sampler.seed, static_cast<uint64_t>(iter), static_cast<uint64_t>(slot));
  sc.threads = cfg.threads;
  return sc;
}

// Consistency term over the unlabeled batch. Sampling runs against the
// frozen model; only the loss graphs touch the gradient-enabled copy.
Tensor regularizer_term(TrainState& state, const TrainConfig& cfg, const SegModel& model_g,
                        const std::vector<Tensor>& unlabeled) {
  std::vector<Tensor> terms;
  switch (cfg.regularizer) {
    case Regularizer::vat: {
      for (size_t k = 0; k < unlabeled.size(); ++k) {
        Tensor adv = vat_perturb(state.model, unlabeled[k], derived_sampler(cfg, state.iter, k));
        terms.push_back(
            kl_pixelwise(forward(model_g, adv).probs, forward(model_g, unlabeled[k]).probs));
      }
      break;
    }
    case Regularizer::ranmixup: {
      for (size_t k = 0; k + 1 < unlabeled.size(); k += 2) {
        terms.push_back(
            ranmixup_loss(model_g, unlabeled[k], unlabeled[k + 1], cfg.mix, state.rng));
      }
      break;
    }
    case Regularizer::vat_mixup: {
      for (size_t k = 0; k + 1 < unlabeled.size(); k += 2) {
        Tensor adv_a = vat_perturb(state.model, unlabeled[k], derived_sampler(cfg, state.iter, k));
        Tensor adv_b =
            vat_perturb(state.model, unlabeled[k + 1], derived_sampler(cfg, state.iter, k + 1));
        const double gamma = sample_beta(cfg.mix.alpha, state.rng);
        terms.push_back(
            cross_ald_loss_at(model_g, unlabeled[k], unlabeled[k + 1], adv_a, adv_b, gamma));
      }
      break;
    }
    case Regularizer::svgd_consistency:
    case Regularizer::svgdf_consistency: {
      const bool feature = cfg.regularizer == Regularizer::svgdf_consistency;
      for (size_t k = 0; k < unlabeled.size(); ++k) {
        const SamplerConfig sc = derived_sampler(cfg, state.iter, k);
        ParticleSet ps = feature ? svgdf_sample(state.model, unlabeled[k], sc)
                                 : svgd_sample(state.model, unlabeled[k], sc);
        Tensor target = forward(model_g, unlabeled[k]).probs;
        std::vector<Tensor> per_particle;
        for (const Tensor& particle : ps.particles) {
          per_particle.push_back(
              dice_loss(forward(model_g, particle).probs, target, /*stop_grad_q=*/true));
        }
        terms.push_back(mean_of(std::move(per_particle)));
      }
      break;
    }
    case Regularizer::cross_ald: {
      for (size_t k = 0; k + 1 < unlabeled.size(); k += 2) {
        ParticleSet ps_a =
            svgdf_sample(state.model, unlabeled[k], derived_sampler(cfg, state.iter, k));
        ParticleSet ps_b =
            svgdf_sample(state.model, unlabeled[k + 1], derived_sampler(cfg, state.iter, k + 1));
        terms.push_back(cross_ald_loss(model_g, unlabeled[k], unlabeled[k + 1], ps_a, ps_b,
                                       cfg.mix, state.rng));
      }
      break;
    }
    case Regularizer::none:
      break;
  }
  if (terms.empty()) {
    throw std::invalid_argument("train_step: regularizer got no unlabeled work");
  }
  return mean_of(std::move(terms));
}

}  // namespace

StepLosses train_step(TrainState& state, const TrainConfig& cfg,
                      const std::vector<Sample>& labeled_batch,
                      const std::vector<Tensor>& unlabeled_batch) {
  if (labeled_batch.empty()) throw std::invalid_argument("train_step: empty labeled batch");
  if (is_paired(cfg.regularizer) && unlabeled_batch.size() % 2 != 0) {
    throw std::invalid_argument("train_step: paired regularizers need an even unlabeled batch");
  }

  const double lambda = warmup_weight(state.iter, cfg.rampup_iters, cfg.lambda_cross_max);
  const bool use_reg =
      cfg.regularizer != Regularizer::none && lambda > 0.0 && !unlabeled_batch.empty();

  SegModel model_g = state.model.with_grad();

  std::vector<Tensor> sup_terms;
  for (const Sample& s : labeled_batch) {
    sup_terms.push_back(dice_loss(forward(model_g, s.image).probs,
                                  one_hot(s.mask, s.h, s.w, model_g.arch.num_classes),
                                  /*stop_grad_q=*/true));
  }
  Tensor sup = mean_of(std::move(sup_terms));
  if (!std::isfinite(sup.item())) {
    throw NumericError("train_step: non-finite supervised loss at iteration " +
                       std::to_string(state.iter));
  }

  Tensor reg;
  if (use_reg) {
    reg = regularizer_term(state, cfg, model_g, unlabeled_batch);
    if (!std::isfinite(reg.item())) {
      throw NumericError("train_step: non-finite regularizer loss at iteration " +
                         std::to_string(state.iter));
    }
  }
  Tensor total = use_reg ? add(sup, scale(reg, static_cast<float>(lambda))) : sup;

  GradientMap gm = backward(total);
  for (auto& [name, p] : state.model.params) {
    auto& vel = state.velocity[name];
    if (vel.empty()) vel.assign(static_cast<size_t>(p.size()), 0.0f);
    const auto pd = p.data();
    std::vector<float> next(pd.begin(), pd.end());
    const Tensor& leaf = model_g.params.at(name);
    if (gm.contains(leaf)) {
      const auto g = gm.at(leaf).data();
      for (size_t i = 0; i < next.size(); ++i) {
        const double v = static_cast<double>(cfg.momentum) * vel[i] + g[i];
        vel[i] = static_cast<float>(v);
        next[i] = static_cast<float>(next[i] - static_cast<double>(cfg.lr) * v);
      }
    } else {
      for (size_t i = 0; i < next.size(); ++i) {
        const double v = static_cast<double>(cfg.momentum) * vel[i];
        vel[i] = static_cast<float>(v);
        next[i] = static_cast<float>(next[i] - static_cast<double>(cfg.lr) * v);
      }
    }
    p = Tensor::from_data(p.shape(), std::move(next));
  }

  state.iter += 1;
  return {sup.item(), use_reg ? static_cast<double>(reg.item()) : 0.0, lambda};
}

MetricReport evaluate(const SegModel& model, const std::vector<Sample>& samples, int num_classes,
                      int threads) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<MetricReport> reports(samples.size());
  parallel_for(static_cast<int>(samples.size()), threads, [&](int i) {
    const Sample& s = samples[i];
    const Tensor probs = forward(model, s.image).probs;
    const auto pd = probs.data();
    const int64_t hw = static_cast<int64_t>(s.h) * s.w;
    std::vector<int32_t> pred(hw, 0);
    for (int64_t p = 0; p < hw; ++p) {
      float best = pd[p];
      int32_t cls = 0;
      for (int c = 1; c < num_classes; ++c) {
        const float v = pd[c * hw + p];
        if (v > best) {  // ties keep the lowest class
          best = v;
          cls = c;
        }
      }
      pred[p] = cls;
    }
    reports[i] = seg_metrics(pred, s.mask, s.h, s.w, num_classes);
  });
  MetricReport mean;
  for (const MetricReport& r : reports) {
    mean.dice_pct += r.dice_pct;
    mean.jaccard_pct += r.jaccard_pct;
    mean.hd95_px += r.hd95_px;
    mean.asd_px += r.asd_px;
  }
  const double n = static_cast<double>(reports.size());
  mean.dice_pct /= n;
  mean.jaccard_pct /= n;
  mean.hd95_px /= n;
  mean.asd_px /= n;
  return mean;
}

// ---- full loop ----

namespace {

std::string format_csv(const std::vector<EvalPoint>& history) {
  std::string csv = "iter,sup_loss,reg_loss,lambda,dice,jaccard,hd95,asd\n";
  char line[256];
  for (const EvalPoint& e : history) {
    std::snprintf(line, sizeof(line), "%d,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g\n", e.iter,
                  e.sup_loss, e.reg_loss, e.lambda, e.metrics.dice_pct, e.metrics.jaccard_pct,
                  e.metrics.hd95_px, e.metrics.asd_px);
    csv += line;
  }
  return csv;
}

json metrics_to_json(const MetricReport& m) {
  return json{{"dice_pct", m.dice_pct},
              {"jaccard_pct", m.jaccard_pct},
              {"hd95_px", m.hd95_px},
              {"asd_px", m.asd_px}};
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << text;
  os.flush();
  if (!os) throw IoError("write failed for '" + path + "'");
}

}  // namespace

RunResult run_training(const TrainConfig& cfg, const std::string& dataset_path,
                       const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  Dataset ds = load_dataset(dataset_path);

  TrainConfig run_cfg = cfg;
  run_cfg.arch.in_channels = 1;
  run_cfg.arch.num_classes = ds.manifest.c;
  run_cfg.validate();

  std::vector<int> labeled_idx = run_cfg.labeled_fraction > 0.0f
                                     ? split_labels(ds.manifest, run_cfg.labeled_fraction,
                                                    run_cfg.seed)
                                     : ds.manifest.labeled_indices;
  if (labeled_idx.empty()) {
    throw std::invalid_argument(
        "run_training: dataset manifest has no labeled split and labeled_fraction is 0");
  }
  std::vector<char> is_labeled(ds.manifest.n_train, 0);
  for (int idx : labeled_idx) is_labeled[idx] = 1;
  std::vector<int> unlabeled_idx;
  for (int i = 0; i < ds.manifest.n_train; ++i) {
    if (!is_labeled[i]) unlabeled_idx.push_back(i);
  }
  if (run_cfg.batch_unlabeled > static_cast<int>(unlabeled_idx.size())) {
    throw std::invalid_argument("run_training: batch_unlabeled " +
                                std::to_string(run_cfg.batch_unlabeled) + " exceeds the " +
                                std::to_string(unlabeled_idx.size()) + " unlabeled samples");
  }
  if (is_paired(run_cfg.regularizer) && run_cfg.batch_unlabeled % 2 != 0) {
    throw std::invalid_argument("run_training: paired regularizers need an even batch_unlabeled");
  }
  if (ds.eval.empty()) throw std::invalid_argument("run_training: dataset has no eval samples");

  TrainState state(init_model(run_cfg.arch, run_cfg.seed), Rng::derive(run_cfg.seed, 0x7A11));

  double win_sup = 0.0, win_reg = 0.0, win_lambda = 0.0;
  int win_count = 0;
  for (int t = 0; t < run_cfg.total_iters; ++t) {
    std::vector<Sample> labeled_batch;
    for (int b = 0; b < run_cfg.batch_labeled; ++b) {
      labeled_batch.push_back(
          ds.train[labeled_idx[state.rng.uniform_int(static_cast<int>(labeled_idx.size()))]]);
    }
    std::vector<Tensor> unlabeled_batch;
    if (run_cfg.batch_unlabeled > 0 && run_cfg.regularizer != Regularizer::none) {
      std::vector<int> order = unlabeled_idx;
      state.rng.shuffle(order);
      for (int b = 0; b < run_cfg.batch_unlabeled; ++b) {
        unlabeled_batch.push_back(ds.train[order[b]].image);
      }
    }

    StepLosses losses = train_step(state, run_cfg, labeled_batch, unlabeled_batch);
    win_sup += losses.supervised;
    win_reg += losses.regularizer;
    win_lambda += losses.lambda;
    ++win_count;

    if (state.iter % run_cfg.eval_every == 0 || state.iter == run_cfg.total_iters) {
      EvalPoint point;
      point.iter = state.iter;
      point.sup_loss = win_sup / win_count;
      point.reg_loss = win_reg / win_count;
      point.lambda = win_lambda / win_count;
      point.metrics = evaluate(state.model, ds.eval, run_cfg.arch.num_classes, run_cfg.threads);
      state.history.push_back(point);
      win_sup = win_reg = win_lambda = 0.0;
      win_count = 0;
    }
  }

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory '" + out_dir + "': " + ec.message());

  RunResult result;
  result.history = state.history;
  result.final_metrics = state.history.back().metrics;
  result.checkpoint_path = (fs::path(out_dir) / "checkpoint.bin").string();
  result.curves_path = (fs::path(out_dir) / "curves.csv").string();
  result.report_path = (fs::path(out_dir) / "report.json").string();

  save_checkpoint(state.model, result.checkpoint_path);
  write_text(result.curves_path, format_csv(state.history));

  result.runtime_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json report;
  report["config"] = to_json(run_cfg);
  json hist = json::array();
  for (const EvalPoint& e : state.history) {
    json h = metrics_to_json(e.metrics);
    h["iter"] = e.iter;
    h["sup_loss"] = e.sup_loss;
    h["reg_loss"] = e.reg_loss;
    h["lambda"] = e.lambda;
    hist.push_back(h);
  }
  report["history"] = hist;
  report["final_metrics"] = metrics_to_json(result.final_metrics);
  report["runtime_sec"] = result.runtime_sec;
  write_text(result.report_path, report.dump(2) + "\n");

  return result;
}

// ---- config json ----

json to_json(const SamplerConfig& cfg) {
  return json{{"epsilon", cfg.epsilon},
              {"norm-p", to_string(cfg.norm_p)},
              {"tau", cfg.tau},
              {"iters", cfg.iters},
              {"eta", cfg.eta},
              {"n-particles", cfg.n_particles},
              {"kernel-space", to_string(cfg.kernel_space)},
              {"seed", cfg.seed}};
}

json to_json(const MixConfig& cfg) { return json{{"alpha", cfg.alpha}, {"seed", cfg.seed}}; }

json to_json(const TrainConfig& cfg) {
  return json{{"total-iters", cfg.total_iters},
              {"batch-labeled", cfg.batch_labeled},
              {"batch-unlabeled", cfg.batch_unlabeled},
              {"lr", cfg.lr},
              {"momentum", cfg.momentum},
              {"lambda-cross-max", cfg.lambda_cross_max},
              {"lambda-cs", cfg.lambda_cs},
              {"rampup-iters", cfg.rampup_iters},
              {"eval-every", cfg.eval_every},
              {"labeled-fraction", cfg.labeled_fraction},
              {"sampler", to_json(cfg.sampler)},
              {"mix", to_json(cfg.mix)},
              {"regularizer", to_string(cfg.regularizer)},
              {"base-width", cfg.arch.base_width},
              {"num-classes", cfg.arch.num_classes},
              {"seed", cfg.seed},
              {"threads", cfg.threads}};
}

json to_json(const GenerateParams& p) {
  return json{{"h", p.h},
              {"w", p.w},
              {"n-train", p.n_train},
              {"n-eval", p.n_eval},
              {"labeled-fraction", p.labeled_fraction},
              {"seed", p.seed}};
}

namespace {

template <class T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void merge_config(const json& j, SamplerConfig& cfg) {
  maybe(j, "epsilon", cfg.epsilon);
  if (j.contains("norm-p")) {
    const std::string v = j.at("norm-p").get<std::string>();
    if (v == "l2") cfg.norm_p = NormOrder::l2;
    else if (v == "linf") cfg.norm_p = NormOrder::linf;
    else throw std::invalid_argument("config: norm-p must be 'l2' or 'linf', got '" + v + "'");
  }
  maybe(j, "tau", cfg.tau);
  maybe(j, "iters", cfg.iters);
  maybe(j, "eta", cfg.eta);
  maybe(j, "n-particles", cfg.n_particles);
  if (j.contains("kernel-space")) {
    const std::string v = j.at("kernel-space").get<std::string>();
    if (v == "pixel") cfg.kernel_space = KernelSpace::pixel;
    else if (v == "feature") cfg.kernel_space = KernelSpace::feature;
    else throw std::invalid_argument("config: kernel-space must be 'pixel' or 'feature', got '" + v + "'");
  }
  maybe(j, "seed", cfg.seed);
}

void merge_config(const json& j, MixConfig& cfg) {
  maybe(j, "alpha", cfg.alpha);
  maybe(j, "seed", cfg.seed);
}

void merge_config(const json& j, TrainConfig& cfg) {
  maybe(j, "total-iters", cfg.total_iters);
  maybe(j, "batch-labeled", cfg.batch_labeled);
  maybe(j, "batch-unlabeled", cfg.batch_unlabeled);
  maybe(j, "lr", cfg.lr);
  maybe(j, "momentum", cfg.momentum);
  maybe(j, "lambda-cross-max", cfg.lambda_cross_max);
  maybe(j, "lambda-cs", cfg.lambda_cs);
  maybe(j, "rampup-iters", cfg.rampup_iters);
  maybe(j, "eval-every", cfg.eval_every);
  maybe(j, "labeled-fraction", cfg.labeled_fraction);
  if (j.contains("sampler")) merge_config(j.at("sampler"), cfg.sampler);
  if (j.contains("mix")) merge_config(j.at("mix"), cfg.mix);
  if (j.contains("regularizer")) {
    const std::string v = j.at("regularizer").get<std::string>();
    auto r = regularizer_from_string(v);
    if (!r) {
      std::string valid;
      for (const auto& name : regularizer_names()) valid += (valid.empty() ? "" : ", ") + name;
      throw std::invalid_argument("config: unknown regularizer '" + v + "' (valid: " + valid + ")");
    }
    cfg.regularizer = *r;
  }
  maybe(j, "base-width", cfg.arch.base_width);
  maybe(j, "seed", cfg.seed);
  maybe(j, "threads", cfg.threads);
}

void merge_config(const json& j, GenerateParams& p) {
  maybe(j, "h", p.h);
  maybe(j, "w", p.w);
  maybe(j, "n-train", p.n_train);
  maybe(j, "n-eval", p.n_eval);
  maybe(j, "labeled-fraction", p.labeled_fraction);
  maybe(j, "seed", p.seed);
}

}  // namespace xald
