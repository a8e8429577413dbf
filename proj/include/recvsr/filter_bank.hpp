#pragma once

// Fixed filters that expand a hidden state into a pool of blurred and
// sharpened variants.
//
// Blur variant:  h * k                       (depthwise, edge-replicated)
// Sharp variant: h + (h - h * k)             (unsharp masking with base k)

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "recvsr/hash.hpp"
#include "recvsr/ops.hpp"
#include "recvsr/tensor.hpp"

namespace recvsr {

enum class FilterMode { kBlur, kSharp, kIdentity };

inline const char* to_string(FilterMode m) {
  switch (m) {
    case FilterMode::kBlur: return "blur";
    case FilterMode::kSharp: return "sharp";
    case FilterMode::kIdentity: return "identity";
  }
  return "?";
}

inline FilterMode parse_filter_mode(std::string_view s) {
  if (s == "blur") return FilterMode::kBlur;
  if (s == "sharp") return FilterMode::kSharp;
  if (s == "identity") return FilterMode::kIdentity;
  throw Error("unknown filter mode '" + std::string(s) + "'");
}

struct FilterKernel {
  std::string name;
  FilterMode mode = FilterMode::kBlur;
  Tensor weights;  // (Kh, Kw), odd dims

  template <class T>
  BasicTensor<T> weights_as() const {
    return weights.template cast<T>();
  }
  double dc_gain() const {
    double s = 0.0;
    for (float v : weights.data()) s += v;
    return s;
  }
};

class FilterBank {
 public:
  FilterBank() = default;
  explicit FilterBank(std::vector<FilterKernel> kernels) : kernels_(std::move(kernels)) {
    for (const auto& k : kernels_) validate(k);
  }

  std::size_t size() const noexcept { return kernels_.size(); }
  bool empty() const noexcept { return kernels_.empty(); }
  const FilterKernel& operator[](std::size_t i) const { return kernels_.at(i); }
  const std::vector<FilterKernel>& kernels() const noexcept { return kernels_; }

  std::vector<FilterMode> modes() const {
    std::vector<FilterMode> m;
    for (const auto& k : kernels_) m.push_back(k.mode);
    return m;
  }

  /// Bank index of the kernel_index-th kernel with the given mode.
  std::size_t index_of(FilterMode mode, std::size_t kernel_index) const {
    std::size_t seen = 0;
    for (std::size_t i = 0; i < kernels_.size(); ++i) {
      if (kernels_[i].mode != mode) continue;
      if (seen++ == kernel_index) return i;
    }
    throw Error("filter bank has no " + std::string(to_string(mode)) + " kernel with index " +
                std::to_string(kernel_index));
  }

  std::string fingerprint() const {
    Fnv1a h;
    for (const auto& k : kernels_) {
      h.update(k.name);
      h.update(to_string(k.mode));
      for (std::size_t d : k.weights.shape()) h.update_pod(static_cast<std::uint32_t>(d));
      for (float v : k.weights.data()) h.update_pod(v);
    }
    return h.hex();
  }

  friend bool operator==(const FilterBank& a, const FilterBank& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].name != b[i].name || a[i].mode != b[i].mode || !(a[i].weights == b[i].weights)) {
        return false;
      }
    }
    return true;
  }

 private:
  static void validate(const FilterKernel& k) {
    if (k.weights.rank() != 2 || k.weights.dim(0) % 2 == 0 || k.weights.dim(1) % 2 == 0) {
      throw Error("filter kernel '" + k.name + "' must be 2-D with odd dims, got " +
                  to_string(k.weights.shape()));
    }
    if (std::abs(k.dc_gain() - 1.0) > 5e-3) {
      throw Error("filter kernel '" + k.name + "' does not have unit DC gain");
    }
  }

  std::vector<FilterKernel> kernels_;
};

/// Kernel tables exactly as published, including the 5x5 sharp base whose
/// last row repeats the middle row.
struct PrintedKernels {
  static constexpr std::array<double, 9> gauss3_blur{0.1108, 0.1113, 0.1108,  //
                                                     0.1113, 0.1117, 0.1113,  //
                                                     0.1108, 0.1113, 0.1108};
  static constexpr std::array<double, 9> gauss3_sharp{0.1096, 0.1118, 0.1096,  //
                                                      0.1118, 0.1141, 0.1118,  //
                                                      0.1096, 0.1118, 0.1096};
  static constexpr std::array<double, 25> gauss5_sharp{
      0.0369, 0.0392, 0.0400, 0.0392, 0.0369,  //
      0.0392, 0.0416, 0.0424, 0.0416, 0.0392,  //
      0.0400, 0.0424, 0.0433, 0.0424, 0.0400,  //
      0.0392, 0.0416, 0.0424, 0.0416, 0.0392,  //
      0.0400, 0.0424, 0.0433, 0.0424, 0.0400};
};

/// The 5x5 sharp base with row 5 mirrored from row 1 (vertical symmetry).
inline std::array<double, 25> corrected_gauss5_sharp() {
  auto k = PrintedKernels::gauss5_sharp;
  for (std::size_t x = 0; x < 5; ++x) k[4 * 5 + x] = k[x];
  return k;
}

namespace detail {
template <std::size_t N>
Tensor unit_sum_kernel(const std::array<double, N>& values, std::size_t side) {
  double total = 0.0;
  for (double v : values) total += v;
  std::vector<float> data(N);
  for (std::size_t i = 0; i < N; ++i) data[i] = static_cast<float>(values[i] / total);
  return Tensor({side, side}, std::move(data));
}

inline Tensor mean_kernel(std::size_t side) {
  return Tensor({side, side}, static_cast<float>(1.0 / static_cast<double>(side * side)));
}
}  // namespace detail

struct BankOptions {
  /// Appends the unfiltered hidden state as an extra pool entry.
  bool include_identity = false;
};

/// Three blur and two sharp kernels, each normalised to unit DC gain.
inline FilterBank default_bank(BankOptions options = {}) {
  std::vector<FilterKernel> k;
  k.push_back({"blur-mean-3x3", FilterMode::kBlur, detail::mean_kernel(3)});
  k.push_back({"blur-mean-5x5", FilterMode::kBlur, detail::mean_kernel(5)});
  k.push_back({"blur-gauss-3x3", FilterMode::kBlur,
               detail::unit_sum_kernel(PrintedKernels::gauss3_blur, 3)});
  k.push_back({"sharp-gauss-3x3", FilterMode::kSharp,
               detail::unit_sum_kernel(PrintedKernels::gauss3_sharp, 3)});
  k.push_back({"sharp-gauss-5x5", FilterMode::kSharp,
               detail::unit_sum_kernel(corrected_gauss5_sharp(), 5)});
  if (options.include_identity) {
    k.push_back({"identity", FilterMode::kIdentity, Tensor({1, 1}, 1.0f)});
  }
  return FilterBank(std::move(k));
}

// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> blur_variant(const BasicTensor<T>& h, const FilterKernel& k) {
  if (k.mode != FilterMode::kBlur) {
    throw Error("blur_variant: kernel '" + k.name + "' is not a blur kernel");
  }
  require_rank(h.shape(), 3, "blur_variant input");
  return depthwise_filter(h, k.weights_as<T>(), Padding::kReplicate);
}

template <class T>
BasicTensor<T> sharp_variant(const BasicTensor<T>& h, const FilterKernel& k) {
  if (k.mode != FilterMode::kSharp) {
    throw Error("sharp_variant: kernel '" + k.name + "' is not a sharp kernel");
  }
  require_rank(h.shape(), 3, "sharp_variant input");
  return add(h, sub(h, depthwise_filter(h, k.weights_as<T>(), Padding::kReplicate)));
}

/// Replaces every pool entry with one chosen variant; the entry count is kept.
struct PoolOverride {
  FilterMode mode = FilterMode::kBlur;
  std::size_t kernel_index = 0;
};

/// Single pool entry for bank kernel i. Works for tensors and tape variables.
template <class V>
V pool_entry(const V& h, const FilterKernel& k) {
  using T = typename V::value_type;
  switch (k.mode) {
    case FilterMode::kBlur:
      return depthwise_filter(h, k.weights_as<T>(), Padding::kReplicate);
    case FilterMode::kSharp:
      return add(h, sub(h, depthwise_filter(h, k.weights_as<T>(), Padding::kReplicate)));
    case FilterMode::kIdentity:
      return h;
  }
  throw Error("pool_entry: bad filter mode");
}

template <class V>
std::vector<V> pool_entries(const V& h, const FilterBank& bank,
                            const std::optional<PoolOverride>& override_with = std::nullopt) {
  if (bank.empty()) throw Error("build_pool: empty filter bank");
  std::vector<V> out;
  out.reserve(bank.size());
  if (override_with) {
    const V single = pool_entry(h, bank[bank.index_of(override_with->mode, override_with->kernel_index)]);
    for (std::size_t i = 0; i < bank.size(); ++i) out.push_back(single);
    return out;
  }
  for (const auto& k : bank.kernels()) out.push_back(pool_entry(h, k));
  return out;
}

template <class T>
struct BasicHiddenStatePool {
  std::vector<BasicTensor<T>> entries;
  std::vector<FilterMode> modes;  // modes[i] is the bank mode that produced entries[i]

  std::size_t size() const noexcept { return entries.size(); }
};

using HiddenStatePool = BasicHiddenStatePool<float>;

template <class T>
BasicHiddenStatePool<T> build_pool(const BasicTensor<T>& h, const FilterBank& bank) {
  require_rank(h.shape(), 3, "build_pool input");
  check_finite(h, "build_pool input");
  return {pool_entries(h, bank), bank.modes()};
}

}  // namespace recvsr
