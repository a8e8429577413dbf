#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "recvsr/filter_bank.hpp"
#include "recvsr/hash.hpp"
#include "recvsr/hsa.hpp"
#include "recvsr/hst.hpp"
#include "recvsr/kv.hpp"
#include "recvsr/layers.hpp"
#include "recvsr/rng.hpp"

namespace recvsr {

struct ModelConfig {
  std::size_t channels = 16;
  std::size_t shallow_blocks = 2;
  std::size_t deep_blocks = 6;
  std::size_t scale = 4;
  Padding padding = Padding::kReplicate;

  ConvSpec conv_spec() const { return {padding, 1, -1}; }

  /// Pixel-shuffle factors whose product is the scale (2s first, then 3s).
  std::vector<std::size_t> upsample_stages() const {
    std::vector<std::size_t> stages;
    std::size_t r = scale;
    while (r % 2 == 0) { stages.push_back(2); r /= 2; }
    while (r % 3 == 0) { stages.push_back(3); r /= 3; }
    if (r != 1) throw Error("scale " + std::to_string(scale) + " must be a product of 2s and 3s");
    return stages;
  }

  void validate() const {
    if (channels == 0) throw Error("model: channels must be positive");
    if (shallow_blocks == 0 || deep_blocks == 0) throw Error("model: block counts must be >= 1");
    if (scale == 0) throw Error("model: scale must be positive");
    upsample_stages();
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Every learnable parameter of the network, generic over the value type.
template <class V>
struct NetParams {
  ConvLayer<V> feat_in;             // 3 -> C
  std::vector<ResBlock<V>> shallow; // RB1
  ConvLayer<V> fusion;              // 2C -> C, first conv of RB2
  std::vector<ResBlock<V>> deep;    // RB2
  std::vector<ConvLayer<V>> up;     // C -> C * f^2, one per shuffle stage
  ConvLayer<V> out;                 // C -> 3
  SCAWeights<V> sca;

  /// Stable (name, parameter) listing; the order defines serialization.
  template <class Self>
  static auto flatten_impl(Self& self) {
    using Ptr = std::conditional_t<std::is_const_v<Self>, const V*, V*>;
    std::vector<std::pair<std::string, Ptr>> out;
    auto conv = [&out](const std::string& prefix, auto& layer) {
      out.emplace_back(prefix + ".weight", &layer.weight);
      out.emplace_back(prefix + ".bias", &layer.bias);
    };
    conv("feat_in", self.feat_in);
    for (std::size_t i = 0; i < self.shallow.size(); ++i) {
      conv("shallow." + std::to_string(i) + ".conv1", self.shallow[i].conv1);
      conv("shallow." + std::to_string(i) + ".conv2", self.shallow[i].conv2);
    }
    conv("fusion", self.fusion);
    for (std::size_t i = 0; i < self.deep.size(); ++i) {
      conv("deep." + std::to_string(i) + ".conv1", self.deep[i].conv1);
      conv("deep." + std::to_string(i) + ".conv2", self.deep[i].conv2);
    }
    for (std::size_t i = 0; i < self.up.size(); ++i) conv("up." + std::to_string(i), self.up[i]);
    conv("out", self.out);
    conv("sca.query", self.sca.query);
    conv("sca.key", self.sca.key);
    conv("sca.value", self.sca.value);
    return out;
  }

  std::vector<std::pair<std::string, V*>> flatten() { return flatten_impl(*this); }
  std::vector<std::pair<std::string, const V*>> flatten() const { return flatten_impl(*this); }

  /// Same structure with every parameter replaced by f(name, param).
  template <class F>
  auto map(F&& f) const {
    using U = std::invoke_result_t<F&, const std::string&, const V&>;
    NetParams<U> r;
    auto conv = [&f](const std::string& prefix, const ConvLayer<V>& l) {
      return ConvLayer<U>{f(prefix + ".weight", l.weight), f(prefix + ".bias", l.bias)};
    };
    r.feat_in = conv("feat_in", feat_in);
    for (std::size_t i = 0; i < shallow.size(); ++i) {
      r.shallow.push_back({conv("shallow." + std::to_string(i) + ".conv1", shallow[i].conv1),
                           conv("shallow." + std::to_string(i) + ".conv2", shallow[i].conv2)});
    }
    r.fusion = conv("fusion", fusion);
    for (std::size_t i = 0; i < deep.size(); ++i) {
      r.deep.push_back({conv("deep." + std::to_string(i) + ".conv1", deep[i].conv1),
                        conv("deep." + std::to_string(i) + ".conv2", deep[i].conv2)});
    }
    for (std::size_t i = 0; i < up.size(); ++i) r.up.push_back(conv("up." + std::to_string(i), up[i]));
    r.out = conv("out", out);
    r.sca.query = conv("sca.query", sca.query);
    r.sca.key = conv("sca.key", sca.key);
    r.sca.value = conv("sca.value", sca.value);
    return r;
  }
};

template <class T>
struct BasicModel {
  ModelConfig config;
  FilterBank bank;
  NetParams<BasicTensor<T>> params;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params.flatten()) n += p->size();
    return n;
  }

  template <class U>
  BasicModel<U> cast() const {
    return {config, bank, params.map([](const std::string&, const BasicTensor<T>& t) {
              return t.template cast<U>();
            })};
  }
};

using ModelWeights = BasicModel<float>;

// ---------------------------------------------------------------------------
// Initialisation

namespace detail {
template <class T>
ConvLayer<BasicTensor<T>> he_conv(std::size_t out, std::size_t in, std::size_t k, double gain,
                                  Rng& rng) {
  const double std_dev = gain * std::sqrt(2.0 / static_cast<double>(in * k * k));
  BasicTensor<T> w({out, in, k, k});
  for (auto& v : w.data()) v = static_cast<T>(std_dev * normal(rng));
  return {std::move(w), BasicTensor<T>({out})};
}
}  // namespace detail

/// He-normal convolutions; second convs of residual blocks are scaled by 0.1.
/// Query and key start near zero, so attention starts uniform, and the value
/// projection starts as the exact identity.
template <class T = float>
BasicModel<T> init_model(const ModelConfig& cfg, std::uint64_t seed, FilterBank bank = default_bank()) {
  cfg.validate();
  Rng rng = substream(seed, "init");
  const std::size_t c = cfg.channels;
  BasicModel<T> m{cfg, std::move(bank), {}};
  auto& p = m.params;
  p.feat_in = detail::he_conv<T>(c, 3, 3, 1.0, rng);
  for (std::size_t i = 0; i < cfg.shallow_blocks; ++i) {
    p.shallow.push_back({detail::he_conv<T>(c, c, 3, 1.0, rng), detail::he_conv<T>(c, c, 3, 0.1, rng)});
  }
  p.fusion = detail::he_conv<T>(c, 2 * c, 3, 1.0, rng);
  for (std::size_t i = 0; i < cfg.deep_blocks; ++i) {
    p.deep.push_back({detail::he_conv<T>(c, c, 3, 1.0, rng), detail::he_conv<T>(c, c, 3, 0.1, rng)});
  }
  for (std::size_t f : cfg.upsample_stages()) p.up.push_back(detail::he_conv<T>(c * f * f, c, 3, 1.0, rng));
  p.out = detail::he_conv<T>(3, c, 3, 1.0, rng);
  p.sca.query = detail::he_conv<T>(c, c, 3, 0.01, rng);
  p.sca.key = detail::he_conv<T>(c, c, 3, 0.01, rng);
  p.sca.value = {BasicTensor<T>({c, c, 3, 3}), BasicTensor<T>({c})};
  for (std::size_t i = 0; i < c; ++i) p.sca.value.weight[((i * c + i) * 3 + 1) * 3 + 1] = T{1};
  return m;
}

// ---------------------------------------------------------------------------
// Model bundle: "HSTB", u32 version, u32 metadata length, key/value metadata,
// u32 record count, then (u32 name length, name, HST1 record) per tensor.
// Bank kernels are stored as records "bank.<i>" so a model pins its bank.

inline constexpr std::uint32_t kModelFormatVersion = 1;

inline std::string encode_model(const ModelWeights& m) {
  KeyValues meta;
  meta.set("channels", m.config.channels);
  meta.set("shallow_blocks", m.config.shallow_blocks);
  meta.set("deep_blocks", m.config.deep_blocks);
  meta.set("scale", m.config.scale);
  meta.set("padding", m.config.padding == Padding::kZero ? "zero" : "replicate");
  meta.set("bank.count", m.bank.size());
  for (std::size_t i = 0; i < m.bank.size(); ++i) {
    meta.set("bank." + std::to_string(i) + ".name", m.bank[i].name);
    meta.set("bank." + std::to_string(i) + ".mode", to_string(m.bank[i].mode));
  }
  const std::string meta_text = meta.to_string();

  std::vector<std::pair<std::string, const Tensor*>> records;
  for (std::size_t i = 0; i < m.bank.size(); ++i) {
    records.emplace_back("bank." + std::to_string(i), &m.bank[i].weights);
  }
  for (const auto& r : m.params.flatten()) records.push_back(r);

  std::ostringstream os(std::ios::binary);
  os.write("HSTB", 4);
  detail::put_u32(os, kModelFormatVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(meta_text.size()));
  os.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, t] : records) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_hst(os, *t);
  }
  return os.str();
}

inline ModelWeights decode_model(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "HSTB") throw Error("model: bad magic");
  const auto version = detail::get_u32(is, "model header");
  if (version != kModelFormatVersion) {
    throw Error("model: unsupported format version " + std::to_string(version));
  }
  const auto meta_len = detail::get_u32(is, "model header");
  std::string meta_text(meta_len, '\0');
  if (!is.read(meta_text.data(), meta_len)) throw Error("model: truncated metadata");
  const auto meta = KeyValues::parse(meta_text, "model metadata");

  ModelConfig cfg;
  cfg.channels = meta.require_as<std::size_t>("channels");
  cfg.shallow_blocks = meta.require_as<std::size_t>("shallow_blocks");
  cfg.deep_blocks = meta.require_as<std::size_t>("deep_blocks");
  cfg.scale = meta.require_as<std::size_t>("scale");
  cfg.padding = meta.require("padding") == "zero" ? Padding::kZero : Padding::kReplicate;
  cfg.validate();

  const auto count = detail::get_u32(is, "model header");
  std::vector<std::pair<std::string, Tensor>> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_u32(is, "model record");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw Error("model: truncated record name");
    records.emplace_back(std::move(name), read_hst(is));
  }
  auto find = [&records](const std::string& name) -> const Tensor& {
    for (const auto& [n, t] : records) {
      if (n == name) return t;
    }
    throw Error("model: missing record '" + name + "'");
  };

  std::vector<FilterKernel> kernels;
  const auto bank_count = meta.require_as<std::size_t>("bank.count");
  for (std::size_t i = 0; i < bank_count; ++i) {
    const std::string prefix = "bank." + std::to_string(i);
    kernels.push_back({meta.require(prefix + ".name"), parse_filter_mode(meta.require(prefix + ".mode")),
                       find(prefix)});
  }

  ModelWeights m = init_model<float>(cfg, 0, FilterBank(std::move(kernels)));
  for (auto& [name, param] : m.params.flatten()) {
    const Tensor& t = find(name);
    require_same_shape(param->shape(), t.shape(), name.c_str());
    *param = t;
  }
  return m;
}

inline std::string model_hash(const ModelWeights& m) {
  Fnv1a h;
  h.update(encode_model(m));
  return h.hex();
}

inline void save_model(const std::filesystem::path& path, const ModelWeights& m) {
  atomic_write(path, encode_model(m));
}

inline ModelWeights load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open model " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return decode_model(ss.str());
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

}  // namespace recvsr
