#include "xald/segnet.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

#include "xald/errors.hpp"
#include "xald/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

namespace xald {

namespace {

constexpr const char kMagic[] = "XALD1";
constexpr size_t kMagicLen = 5;

void check_arch(const Arch& a) {
  if (a.in_channels < 1 || a.num_classes < 2 || a.base_width < 2) {
    throw std::invalid_argument("init_model: invalid arch (in_channels >= 1, num_classes >= 2, "
                                "base_width >= 2 required)");
  }
}

Tensor uniform_conv_weight(std::vector<int> shape, Rng& rng) {
  const int64_t fan_in = static_cast<int64_t>(shape[1]) * shape[2] * shape[3];
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<float> data(n);
  for (auto& v : data) v = static_cast<float>(rng.uniform(-bound, bound));
  return Tensor::from_data(std::move(shape), std::move(data));
}

void check_image(const SegModel& model, const Tensor& image) {
  const auto& s = image.shape();
  if (s.size() != 3 || s[0] != model.arch.in_channels) {
    throw std::invalid_argument("forward: want image [" + std::to_string(model.arch.in_channels) +
                                ",H,W], got " + shape_str(s));
  }
  if (s[1] < 8 || s[2] < 8 || s[1] % 2 != 0 || s[2] % 2 != 0) {
    throw std::invalid_argument("forward: spatial dims must be even and >= 8, got " + shape_str(s));
  }
}

const Tensor& param(const SegModel& m, const std::string& name) {
  auto it = m.params.find(name);
  if (it == m.params.end()) {
    throw std::invalid_argument("model is missing parameter '" + name + "'");
  }
  return it->second;
}

struct Encoded {
  Tensor skip;
  Tensor features;
};

Encoded encode(const SegModel& m, const Tensor& image) {
  Tensor a = leaky_relu(conv2d(image, param(m, "enc1.weight"), param(m, "enc1.bias")));
  Tensor skip = leaky_relu(conv2d(a, param(m, "enc2.weight"), param(m, "enc2.bias")));
  Tensor pooled = avg_pool2(skip);
  Tensor feat = leaky_relu(conv2d(pooled, param(m, "enc3.weight"), param(m, "enc3.bias")));
  return {skip, feat};
}

}  // namespace

SegModel SegModel::with_grad() const {
  SegModel m;
  m.arch = arch;
  m.seed = seed;
  for (const auto& [name, t] : params) {
    m.params.emplace(name, t.detach().set_requires_grad(true));
  }
  return m;
}

SegModel init_model(const Arch& arch, uint64_t seed) {
  check_arch(arch);
  Rng rng(seed);
  const int w = arch.base_width;
  SegModel m;
  m.arch = arch;
  m.seed = seed;
  // weights drawn in architectural order, biases are zero
  m.params.emplace("enc1.weight", uniform_conv_weight({w, arch.in_channels, 3, 3}, rng));
  m.params.emplace("enc2.weight", uniform_conv_weight({w, w, 3, 3}, rng));
  m.params.emplace("enc3.weight", uniform_conv_weight({2 * w, w, 3, 3}, rng));
  m.params.emplace("dec.weight", uniform_conv_weight({w, 3 * w, 3, 3}, rng));
  m.params.emplace("head.weight", uniform_conv_weight({arch.num_classes, w, 1, 1}, rng));
  m.params.emplace("enc1.bias", Tensor::zeros({w}));
  m.params.emplace("enc2.bias", Tensor::zeros({w}));
  m.params.emplace("enc3.bias", Tensor::zeros({2 * w}));
  m.params.emplace("dec.bias", Tensor::zeros({w}));
  m.params.emplace("head.bias", Tensor::zeros({arch.num_classes}));
  return m;
}

Tensor decode(const SegModel& m, const Tensor& skip, const Tensor& feat) {
  Tensor up = upsample2(feat);
  Tensor cat = concat_channels(up, skip);
  Tensor d = leaky_relu(conv2d(cat, param(m, "dec.weight"), param(m, "dec.bias")));
  Tensor logits = conv2d(d, param(m, "head.weight"), param(m, "head.bias"));
  return softmax_channels(logits);
}

ForwardTrace forward_trace(const SegModel& model, const Tensor& image) {
  check_image(model, image);
  Encoded e = encode(model, image);
  return {decode(model, e.skip, e.features), e.features, e.skip};
}

Prediction forward(const SegModel& model, const Tensor& image) {
  return {forward_trace(model, image).probs};
}

Tensor features(const SegModel& model, const Tensor& image) {
  check_image(model, image);
  return encode(model, image).features;
}

// ---- checkpoint ----

namespace {

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::istream& is, const std::string& path) {
  uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    throw std::invalid_argument("checkpoint '" + path + "': truncated at offset " +
                                std::to_string(is.tellg() == -1 ? -1 : static_cast<long>(is.tellg())));
  }
  return v;
}

}  // namespace

void save_checkpoint(const SegModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(kMagic, kMagicLen);
  for (const auto& [name, t] : model.params) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) write_u32(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  os.flush();
  if (!os) throw IoError("write failed for '" + path + "'");
}

SegModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::invalid_argument("checkpoint '" + path + "': cannot open");
  char magic[kMagicLen] = {};
  if (!is.read(magic, kMagicLen) || std::string(magic, kMagicLen) != kMagic) {
    throw std::invalid_argument("checkpoint '" + path + "': bad magic");
  }

  SegModel m;
  while (true) {
    uint32_t name_len = 0;
    if (!is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len))) break;  // clean EOF
    if (name_len == 0 || name_len > 4096) {
      throw std::invalid_argument("checkpoint '" + path + "': implausible name length " +
                                  std::to_string(name_len));
    }
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) {
      throw std::invalid_argument("checkpoint '" + path + "': truncated parameter name");
    }
    const uint32_t rank = read_u32(is, path);
    if (rank == 0 || rank > 8) {
      throw std::invalid_argument("checkpoint '" + path + "': implausible rank " +
                                  std::to_string(rank));
    }
    std::vector<int> shape(rank);
    int64_t n = 1;
    for (auto& d : shape) {
      d = static_cast<int>(read_u32(is, path));
      if (d <= 0 || d > (1 << 20)) {
        throw std::invalid_argument("checkpoint '" + path + "': implausible dimension");
      }
      n *= d;
    }
    std::vector<float> data(n);
    if (!is.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(n * sizeof(float)))) {
      throw std::invalid_argument("checkpoint '" + path + "': truncated data for '" + name + "'");
    }
    for (float v : data) {
      if (!std::isfinite(v)) {
        throw std::invalid_argument("checkpoint '" + path + "': non-finite value in '" + name + "'");
      }
    }
    m.params.emplace(name, Tensor::from_data(std::move(shape), std::move(data)));
  }

  for (const char* required : {"enc1.weight", "enc1.bias", "enc2.weight", "enc2.bias",
                               "enc3.weight", "enc3.bias", "dec.weight", "dec.bias",
                               "head.weight", "head.bias"}) {
    if (!m.params.count(required)) {
      throw std::invalid_argument("checkpoint '" + path + "': missing parameter '" + required + "'");
    }
  }
  const auto& e1 = m.params.at("enc1.weight").shape();
  const auto& hd = m.params.at("head.weight").shape();
  m.arch.base_width = e1[0];
  m.arch.in_channels = e1[1];
  m.arch.num_classes = hd[0];
  return m;
}

}  // namespace xald
