// SPDX-License-Identifier: Apache-2.0

// Synthetic training-graph profiles shaped after the classic image networks: plain chains,
// ResNet-50-like bottleneck graphs with skip connections, AlexNet-like compute-heavy chains and
// 3D ResNeXt-101-like graphs. Layer sizes follow the real activation shapes (float32, per
// sample); compute times come from per-kind throughput constants chosen relative to a 16 GB/s
// link, so relative costs, not absolute kernel times, are what the generator controls.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pooch/model.hpp"

namespace pooch {

enum class Shape : std::uint8_t { chain, resnet_like, alexnet_like, resnext3d_like };

inline std::optional<Shape> shape_from_string(std::string_view s) {
  if (s == "chain") return Shape::chain;
  if (s == "resnet_like") return Shape::resnet_like;
  if (s == "alexnet_like") return Shape::alexnet_like;
  if (s == "resnext3d_like") return Shape::resnext3d_like;
  return std::nullopt;
}

enum class EnvPreset : std::uint8_t { pcie_x86, nvlink_power9, custom };

inline std::optional<EnvPreset> env_preset_from_string(std::string_view s) {
  if (s == "pcie_x86") return EnvPreset::pcie_x86;
  if (s == "nvlink_power9") return EnvPreset::nvlink_power9;
  return std::nullopt;
}

inline constexpr Bytes kGiB = Bytes{1} << 30;

/// 16 GB device behind PCIe gen3 x16 (16 GB/s each way).
inline Environment pcie_x86_env() { return {16 * kGiB, 16'000'000'000, 16'000'000'000, 1 * kGiB}; }

/// 16 GB device behind NVLink 2.0 x2 (75 GB/s each way).
inline Environment nvlink_power9_env() { return {16 * kGiB, 75'000'000'000, 75'000'000'000, 1 * kGiB}; }

struct GenSpec {
  Shape shape = Shape::chain;
  /// Chain length (chain shape only).
  int n_layers = 3;
  /// Residual block count; 0 selects the reference depth (16 for resnet_like, 33 for resnext3d_like).
  int n_blocks = 0;
  /// Samples per iteration (for resnext3d_like: input volume multiplier).
  int batch = 1;
  std::uint64_t seed = 0;
  EnvPreset env_preset = EnvPreset::pcie_x86;
  Environment custom_env{};
};

namespace detail {

// Forward throughput per layer kind in bytes of output per microsecond.
struct KindRates {
  double conv;
  double norm;  // batch_norm, activation, elementwise
  double pool;
  double fc;
};

// 16 GB/s is 16000 bytes/us: a rate of 53000 makes the forward 0.3x of the PCIe transfer time
// and 1.4x of the NVLink one.
inline constexpr KindRates kResnetRates{14000.0, 53000.0, 53000.0, 800.0};
inline constexpr KindRates kAlexnetRates{4000.0, 12000.0, 12000.0, 400.0};
inline constexpr KindRates kResnext3dRates{2000.0, 10000.0, 10000.0, 400.0};

class GraphBuilder {
 public:
  GraphBuilder(KindRates rates, int batch, std::uint64_t seed) : rates_(rates), batch_(batch), rng_(seed) {}

  int add(std::string name, LayerKind kind, Bytes per_sample_bytes, std::vector<int> inputs) {
    LayerNode l;
    l.id = static_cast<int>(layers_.size());
    l.name = std::move(name);
    l.kind = kind;
    l.output_bytes = per_sample_bytes * batch_;
    l.inputs = std::move(inputs);
    const double rate = kind == LayerKind::convolution       ? rates_.conv
                        : kind == LayerKind::fully_connected ? rates_.fc
                        : kind == LayerKind::pooling         ? rates_.pool
                                                             : rates_.norm;
    const double bwd_factor = kind == LayerKind::convolution || kind == LayerKind::fully_connected ? 2.0 : 1.5;
    const double fwd = static_cast<double>(l.output_bytes) / rate * jitter();
    l.fwd_time = std::max<Micros>(1, std::llround(fwd));
    l.bwd_time = std::max<Micros>(1, std::llround(fwd * bwd_factor * jitter()));
    layers_.push_back(std::move(l));
    return layers_.back().id;
  }

  std::vector<LayerNode> take() { return std::move(layers_); }

 private:
  // Uniform in [0.85, 1.15), computed from raw engine bits so it is identical on every platform.
  double jitter() { return 0.85 + 0.3 * static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

  KindRates rates_;
  Bytes batch_;
  std::mt19937_64 rng_;
  std::vector<LayerNode> layers_;
};

struct Stage {
  int blocks;
  Bytes spatial;  // elements per channel of this stage's activations
  Bytes width;    // bottleneck width; block output has 4x channels
};

inline std::vector<Stage> split_stages(const std::vector<Stage>& reference, int n_blocks) {
  if (n_blocks <= 0) return reference;
  int ref_total = 0;
  for (const auto& s : reference) ref_total += s.blocks;
  std::vector<Stage> out;
  int assigned = 0;
  for (std::size_t k = 0; k < reference.size(); ++k) {
    int b = static_cast<int>(std::llround(static_cast<double>(n_blocks) * reference[k].blocks / ref_total));
    if (k + 1 == reference.size()) b = n_blocks - assigned;
    b = std::max(0, std::min(b, n_blocks - assigned));
    assigned += b;
    if (b > 0) out.push_back({b, reference[k].spatial, reference[k].width});
  }
  return out;
}

inline constexpr Bytes kFloat = 4;

/// ResNet-50 bottlenecks with ReLU fused into the preceding batch norm and the residual add
/// fused into the last batch norm of the block (which therefore has two inputs).
inline std::vector<LayerNode> resnet_layers(const GenSpec& spec) {
  GraphBuilder b(kResnetRates, spec.batch, spec.seed);
  const std::vector<Stage> ref = {{3, 56 * 56, 64}, {4, 28 * 28, 128}, {6, 14 * 14, 256}, {3, 7 * 7, 512}};
  int x = b.add("conv1", LayerKind::convolution, 112 * 112 * 64 * kFloat, {});
  x = b.add("bn1", LayerKind::batch_norm, 112 * 112 * 64 * kFloat, {x});
  x = b.add("pool1", LayerKind::pooling, 56 * 56 * 64 * kFloat, {x});
  Bytes channels = 64;
  int stage_no = 0;
  for (const auto& st : split_stages(ref, spec.n_blocks)) {
    ++stage_no;
    for (int k = 0; k < st.blocks; ++k) {
      const auto tag = "res" + std::to_string(stage_no + 1) + static_cast<char>('a' + k % 26);
      const Bytes inner = st.spatial * st.width * kFloat;
      const Bytes outer = st.spatial * st.width * 4 * kFloat;
      int shortcut = x;
      if (k == 0 || channels != st.width * 4) {
        shortcut = b.add(tag + "_proj", LayerKind::convolution, outer, {x});
        shortcut = b.add(tag + "_proj_bn", LayerKind::batch_norm, outer, {shortcut});
      }
      int y = b.add(tag + "_conv1", LayerKind::convolution, inner, {x});
      y = b.add(tag + "_bn1", LayerKind::batch_norm, inner, {y});
      y = b.add(tag + "_conv2", LayerKind::convolution, inner, {y});
      y = b.add(tag + "_bn2", LayerKind::batch_norm, inner, {y});
      y = b.add(tag + "_conv3", LayerKind::convolution, outer, {y});
      x = b.add(tag + "_bn3", LayerKind::batch_norm, outer, {y, shortcut});
      channels = st.width * 4;
    }
  }
  x = b.add("pool5", LayerKind::pooling, channels * kFloat, {x});
  b.add("fc", LayerKind::fully_connected, 1000 * kFloat, {x});
  return b.take();
}

inline std::vector<LayerNode> alexnet_layers(const GenSpec& spec) {
  GraphBuilder b(kAlexnetRates, spec.batch, spec.seed);
  struct L {
    const char* name;
    LayerKind kind;
    Bytes elems;
  };
  const L table[] = {
      {"conv1", LayerKind::convolution, 55 * 55 * 96},  {"relu1", LayerKind::activation, 55 * 55 * 96},
      {"pool1", LayerKind::pooling, 27 * 27 * 96},      {"conv2", LayerKind::convolution, 27 * 27 * 256},
      {"relu2", LayerKind::activation, 27 * 27 * 256},  {"pool2", LayerKind::pooling, 13 * 13 * 256},
      {"conv3", LayerKind::convolution, 13 * 13 * 384}, {"relu3", LayerKind::activation, 13 * 13 * 384},
      {"conv4", LayerKind::convolution, 13 * 13 * 384}, {"relu4", LayerKind::activation, 13 * 13 * 384},
      {"conv5", LayerKind::convolution, 13 * 13 * 256}, {"relu5", LayerKind::activation, 13 * 13 * 256},
      {"pool5", LayerKind::pooling, 6 * 6 * 256},       {"fc6", LayerKind::fully_connected, 4096},
      {"relu6", LayerKind::activation, 4096},           {"fc7", LayerKind::fully_connected, 4096},
      {"relu7", LayerKind::activation, 4096},           {"fc8", LayerKind::fully_connected, 1000},
  };
  int prev = -1;
  for (const auto& l : table) {
    std::vector<int> in;
    if (prev >= 0) in.push_back(prev);
    prev = b.add(l.name, l.kind, l.elems * kFloat, std::move(in));
  }
  return b.take();
}

/// 3D ResNeXt-101 (cardinality 32) with separate ReLU and residual-add layers.
inline std::vector<LayerNode> resnext3d_layers(const GenSpec& spec) {
  GraphBuilder b(kResnext3dRates, spec.batch, spec.seed);
  // Per-channel volume (frames x height x width) of a 16x112x112 clip.
  const std::vector<Stage> ref = {{3, 8 * 28 * 28, 128}, {4, 4 * 14 * 14, 256}, {23, 2 * 7 * 7, 512}, {3, 1 * 4 * 4, 1024}};
  const Bytes stem = 16 * 56 * 56 * 64 * kFloat;
  int x = b.add("conv1", LayerKind::convolution, stem, {});
  x = b.add("bn1", LayerKind::batch_norm, stem, {x});
  x = b.add("relu1", LayerKind::activation, stem, {x});
  x = b.add("pool1", LayerKind::pooling, 8 * 28 * 28 * 64 * kFloat, {x});
  Bytes channels = 64;
  int stage_no = 0;
  for (const auto& st : split_stages(ref, spec.n_blocks)) {
    ++stage_no;
    for (int k = 0; k < st.blocks; ++k) {
      const auto tag = "layer" + std::to_string(stage_no) + "_" + std::to_string(k);
      const Bytes inner = st.spatial * st.width * kFloat;
      const Bytes outer = st.spatial * st.width * 2 * kFloat;
      int shortcut = x;
      if (k == 0 || channels != st.width * 2) {
        shortcut = b.add(tag + "_proj", LayerKind::convolution, outer, {x});
        shortcut = b.add(tag + "_proj_bn", LayerKind::batch_norm, outer, {shortcut});
      }
      int y = b.add(tag + "_conv1", LayerKind::convolution, inner, {x});
      y = b.add(tag + "_bn1", LayerKind::batch_norm, inner, {y});
      y = b.add(tag + "_relu1", LayerKind::activation, inner, {y});
      y = b.add(tag + "_conv2", LayerKind::convolution, inner, {y});
      y = b.add(tag + "_bn2", LayerKind::batch_norm, inner, {y});
      y = b.add(tag + "_relu2", LayerKind::activation, inner, {y});
      y = b.add(tag + "_conv3", LayerKind::convolution, outer, {y});
      y = b.add(tag + "_bn3", LayerKind::batch_norm, outer, {y});
      y = b.add(tag + "_add", LayerKind::elementwise, outer, {y, shortcut});
      x = b.add(tag + "_relu3", LayerKind::activation, outer, {y});
      channels = st.width * 2;
    }
  }
  x = b.add("pool5", LayerKind::pooling, channels * kFloat, {x});
  b.add("fc", LayerKind::fully_connected, 400 * kFloat, {x});
  return b.take();
}

inline std::vector<LayerNode> chain_layers(const GenSpec& spec) {
  std::vector<LayerNode> out;
  for (int i = 0; i < spec.n_layers; ++i) {
    LayerNode l;
    l.id = i;
    l.name = "layer" + std::to_string(i);
    l.kind = LayerKind::other;
    l.fwd_time = 4 * Micros{spec.batch};
    l.bwd_time = 4 * Micros{spec.batch};
    l.output_bytes = 8 * Bytes{spec.batch};
    if (i > 0) l.inputs = {i - 1};
    out.push_back(std::move(l));
  }
  return out;
}

}  // namespace detail

inline Environment preset_env(EnvPreset preset, const Environment& custom = {}) {
  switch (preset) {
    case EnvPreset::pcie_x86: return pcie_x86_env();
    case EnvPreset::nvlink_power9: return nvlink_power9_env();
    case EnvPreset::custom: return custom;
  }
  return custom;
}

/// Deterministic in every field of `spec`. The layer list does not depend on the environment.
inline Profile generate(const GenSpec& spec) {
  if (spec.batch <= 0) throw UsageError("batch must be positive");
  if (spec.n_blocks < 0) throw UsageError("n_blocks must be >= 0");
  Profile p;
  switch (spec.shape) {
    case Shape::chain:
      if (spec.n_layers <= 0) throw UsageError("chain needs at least one layer");
      p.layers = detail::chain_layers(spec);
      break;
    case Shape::resnet_like: p.layers = detail::resnet_layers(spec); break;
    case Shape::alexnet_like: p.layers = detail::alexnet_layers(spec); break;
    case Shape::resnext3d_like: p.layers = detail::resnext3d_layers(spec); break;
  }
  p.env = preset_env(spec.env_preset, spec.custom_env);
  validate(p);
  return p;
}

}  // namespace pooch
