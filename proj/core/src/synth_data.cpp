#include "xald/synth_data.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "xald/errors.hpp"
#include "xald/rng.hpp"

namespace xald {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char kSampleMagic[] = "XDS1";
constexpr uint64_t kSampleStream = 0x5D5;

std::string sample_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%04d.bin", index);
  return buf;
}

}  // namespace

Sample generate_sample(int h, int w, uint64_t seed, SampleGeometry* geometry) {
  if (h < 16 || w < 16 || h % 2 != 0 || w % 2 != 0) {
    throw std::invalid_argument("generate_sample: H and W must be even and >= 16");
  }
  Rng rng(seed);
  const int64_t n = static_cast<int64_t>(h) * w;
  for (int attempt = 0; attempt < 100; ++attempt) {
    SampleGeometry g;
    g.bg = 0.05 + 0.2 * rng.uniform();
    std::vector<double> noise(n);
    for (auto& v : noise) v = 0.05 * rng.normal();
    g.ramp_gain = 0.2 + 0.4 * rng.uniform();
    g.ramp_theta = 2.0 * std::numbers::pi * rng.uniform();

    g.rect_r0 = 2 + rng.uniform_int(h - 12);
    g.rect_c0 = 2 + rng.uniform_int(w - 12);
    g.rect_r1 = std::min(g.rect_r0 + 4 + rng.uniform_int(8), h - 2);
    g.rect_c1 = std::min(g.rect_c0 + 4 + rng.uniform_int(8), w - 2);

    g.ell_cy = 6.0 + (h - 12) * rng.uniform();
    g.ell_cx = 6.0 + (w - 12) * rng.uniform();
    g.ell_a = 3.0 + 5.0 * rng.uniform();
    g.ell_b = 3.0 + 5.0 * rng.uniform();
    g.ell_rot = std::numbers::pi * rng.uniform();

    std::vector<int32_t> mask(n, 0);
    for (int r = g.rect_r0; r < g.rect_r1; ++r) {
      for (int c = g.rect_c0; c < g.rect_c1; ++c) mask[r * w + c] = 2;
    }
    const double cos_t = std::cos(g.ell_rot), sin_t = std::sin(g.ell_rot);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        const double dy = r - g.ell_cy, dx = c - g.ell_cx;
        const double u = dx * cos_t + dy * sin_t;
        const double v = -dx * sin_t + dy * cos_t;
        if ((u / g.ell_a) * (u / g.ell_a) + (v / g.ell_b) * (v / g.ell_b) <= 1.0) {
          mask[r * w + c] = 1;
        }
      }
    }

    int64_t counts[3] = {0, 0, 0};
    for (int32_t v : mask) ++counts[v];
    if (counts[0] < 1 || counts[1] < 9 || counts[2] < 9) continue;

    const double ramp_cos = std::cos(g.ramp_theta), ramp_sin = std::sin(g.ramp_theta);
    std::vector<float> image(n);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        const int64_t i = static_cast<int64_t>(r) * w + c;
        const double delta = mask[i] == 1 ? 0.4 : (mask[i] == 2 ? 0.25 : 0.0);
        const double ramp =
            1.0 + g.ramp_gain * ((static_cast<double>(c) / (w - 1)) * ramp_cos +
                                 (static_cast<double>(r) / (h - 1)) * ramp_sin - 0.5);
        const double value = (g.bg + noise[i] + delta) * ramp;
        image[i] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }

    if (geometry) *geometry = g;
    Sample s;
    s.image = Tensor::from_data({1, h, w}, std::move(image));
    s.mask = std::move(mask);
    s.h = h;
    s.w = w;
    return s;
  }
  throw std::runtime_error("generate_sample: degenerate geometry after 100 retries (seed " +
                           std::to_string(seed) + ")");
}

void generate_dataset(const GenerateParams& p, const std::string& dir) {
  if (p.h < 16 || p.w < 16 || p.h % 2 != 0 || p.w % 2 != 0) {
    throw std::invalid_argument("generate_dataset: H and W must be even and >= 16");
  }
  if (p.n_train < 4) throw std::invalid_argument("generate_dataset: n_train must be >= 4");
  if (p.n_eval < 1) throw std::invalid_argument("generate_dataset: n_eval must be >= 1");
  if (p.c != 3) throw std::invalid_argument("generate_dataset: the generator produces 3 classes");
  if (!(p.labeled_fraction > 0.0 && p.labeled_fraction <= 1.0)) {
    throw std::invalid_argument("generate_dataset: labeled_fraction outside (0,1]");
  }

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());

  DatasetManifest m;
  m.h = p.h;
  m.w = p.w;
  m.c = p.c;
  m.n_train = p.n_train;
  m.n_eval = p.n_eval;
  m.seed = p.seed;

  const int total = p.n_train + p.n_eval;
  for (int i = 0; i < total; ++i) {
    Sample s = generate_sample(p.h, p.w, Rng::derive(p.seed, kSampleStream, i));
    save_sample(s, (fs::path(dir) / sample_name(i)).string());
  }
  m.labeled_indices = split_labels(m, p.labeled_fraction, p.seed);

  json j;
  j["version"] = m.version;
  j["H"] = m.h;
  j["W"] = m.w;
  j["C"] = m.c;
  j["n_train"] = m.n_train;
  j["n_eval"] = m.n_eval;
  j["labeled_indices"] = m.labeled_indices;
  j["seed"] = m.seed;
  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw IoError("cannot write manifest in '" + dir + "'");
  os << j.dump(2) << "\n";
  if (!os) throw IoError("write failed for manifest in '" + dir + "'");
}

std::vector<int> split_labels(const DatasetManifest& manifest, double fraction, uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("split_labels: fraction " + std::to_string(fraction) +
                                " outside (0,1]");
  }
  const int n = manifest.n_train;
  const int count =
      static_cast<int>(std::max<long long>(1, std::llround(fraction * static_cast<double>(n))));
  std::vector<int> indices(n);
  for (int i = 0; i < n; ++i) indices[i] = i;
  Rng rng(seed);
  rng.shuffle(indices);
  indices.resize(std::min(count, n));
  std::sort(indices.begin(), indices.end());
  return indices;
}

void save_sample(const Sample& s, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(kSampleMagic, 4);
  const uint32_t h = static_cast<uint32_t>(s.h), w = static_cast<uint32_t>(s.w);
  os.write(reinterpret_cast<const char*>(&h), 4);
  os.write(reinterpret_cast<const char*>(&w), 4);
  os.write(reinterpret_cast<const char*>(s.image.data().data()),
           static_cast<std::streamsize>(s.image.size() * sizeof(float)));
  std::vector<uint8_t> bytes(s.mask.size());
  for (size_t i = 0; i < s.mask.size(); ++i) bytes[i] = static_cast<uint8_t>(s.mask[i]);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  os.flush();
  if (!os) throw IoError("write failed for '" + path + "'");
}

Sample load_sample(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::invalid_argument("sample '" + path + "': cannot open");
  char magic[4] = {};
  if (!is.read(magic, 4) || std::string(magic, 4) != kSampleMagic) {
    throw std::invalid_argument("sample '" + path + "': bad magic at offset 0");
  }
  uint32_t h = 0, w = 0;
  if (!is.read(reinterpret_cast<char*>(&h), 4) || !is.read(reinterpret_cast<char*>(&w), 4)) {
    throw std::invalid_argument("sample '" + path + "': truncated header at offset 4");
  }
  if (h == 0 || w == 0 || h > (1u << 16) || w > (1u << 16)) {
    throw std::invalid_argument("sample '" + path + "': implausible dims " + std::to_string(h) +
                                "x" + std::to_string(w));
  }
  const int64_t n = static_cast<int64_t>(h) * w;
  std::vector<float> image(n);
  if (!is.read(reinterpret_cast<char*>(image.data()), static_cast<std::streamsize>(n * 4))) {
    throw std::invalid_argument("sample '" + path + "': truncated image at offset 12");
  }
  std::vector<uint8_t> bytes(n);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n))) {
    throw std::invalid_argument("sample '" + path + "': truncated mask at offset " +
                                std::to_string(12 + n * 4));
  }
  Sample s;
  s.h = static_cast<int>(h);
  s.w = static_cast<int>(w);
  s.image = Tensor::from_data({1, s.h, s.w}, std::move(image));
  s.mask.assign(bytes.begin(), bytes.end());
  return s;
}

Dataset load_dataset(const std::string& dir) {
  const fs::path manifest_path = fs::path(dir) / "manifest.json";
  std::ifstream is(manifest_path);
  if (!is) throw std::invalid_argument("dataset '" + dir + "': missing manifest.json");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("dataset '" + dir + "': malformed manifest.json: " + e.what());
  }

  Dataset d;
  try {
    d.manifest.version = j.at("version").get<std::string>();
    d.manifest.h = j.at("H").get<int>();
    d.manifest.w = j.at("W").get<int>();
    d.manifest.c = j.at("C").get<int>();
    d.manifest.n_train = j.at("n_train").get<int>();
    d.manifest.n_eval = j.at("n_eval").get<int>();
    d.manifest.labeled_indices = j.at("labeled_indices").get<std::vector<int>>();
    d.manifest.seed = j.at("seed").get<uint64_t>();
  } catch (const json::exception& e) {
    throw std::invalid_argument("dataset '" + dir + "': manifest field error: " + e.what());
  }
  const auto& m = d.manifest;
  if (m.h < 16 || m.w < 16 || m.c < 2 || m.n_train < 1 || m.n_eval < 0) {
    throw std::invalid_argument("dataset '" + dir + "': implausible manifest values");
  }
  int prev = -1;
  for (int idx : m.labeled_indices) {
    if (idx < 0 || idx >= m.n_train || idx <= prev) {
      throw std::invalid_argument("dataset '" + dir +
                                  "': labeled_indices must be sorted, unique, in [0,n_train)");
    }
    prev = idx;
  }

  const int total = m.n_train + m.n_eval;
  for (int i = 0; i < total; ++i) {
    const std::string path = (fs::path(dir) / sample_name(i)).string();
    Sample s = load_sample(path);
    if (s.h != m.h || s.w != m.w) {
      throw std::invalid_argument("sample '" + path + "': dims disagree with manifest (" +
                                  std::to_string(s.h) + "x" + std::to_string(s.w) + " vs " +
                                  std::to_string(m.h) + "x" + std::to_string(m.w) + ")");
    }
    for (int32_t v : s.mask) {
      if (v < 0 || v >= m.c) {
        throw std::invalid_argument("sample '" + path + "': mask label " + std::to_string(v) +
                                    " outside [0," + std::to_string(m.c) + ")");
      }
    }
    (i < m.n_train ? d.train : d.eval).push_back(std::move(s));
  }
  return d;
}

}  // namespace xald
