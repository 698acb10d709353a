// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pooch/error.hpp"

namespace pooch {

/// Durations are integer microseconds everywhere.
using Micros = std::int64_t;
/// Byte counts; signed so memory deltas share the type.
using Bytes = std::int64_t;

enum class LayerKind : std::uint8_t {
  convolution,
  batch_norm,
  pooling,
  fully_connected,
  activation,
  elementwise,
  other,
};

inline constexpr std::array<std::string_view, 7> kLayerKindNames = {
    "convolution", "batch_norm", "pooling", "fully_connected", "activation", "elementwise", "other"};

inline std::string_view to_string(LayerKind k) { return kLayerKindNames[static_cast<std::size_t>(k)]; }

inline std::optional<LayerKind> layer_kind_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kLayerKindNames.size(); ++i) {
    if (kLayerKindNames[i] == s) return static_cast<LayerKind>(i);
  }
  return std::nullopt;
}

struct LayerNode {
  int id = 0;
  std::string name;
  LayerKind kind = LayerKind::other;
  Micros fwd_time = 1;
  Micros bwd_time = 1;
  Bytes output_bytes = 1;
  /// Producers of the feature maps this layer's forward reads. All ids are smaller than `id`.
  std::vector<int> inputs;

  friend bool operator==(const LayerNode&, const LayerNode&) = default;
};

/// Device and interconnect description. A bandwidth may be absent only when the matching
/// per-layer transfer-time override list is supplied.
struct Environment {
  Bytes capacity_bytes = 0;
  std::optional<std::int64_t> d2h_bandwidth;  // bytes per second, swap-out direction
  std::optional<std::int64_t> h2d_bandwidth;  // bytes per second, swap-in direction
  /// Weights, gradients, workspace and the network input; resident for the whole iteration.
  Bytes resident_base_bytes = 0;

  friend bool operator==(const Environment&, const Environment&) = default;
};

namespace detail {

inline Micros transfer_micros(Bytes bytes, std::int64_t bytes_per_second) {
  const auto num = static_cast<__int128>(bytes) * 1'000'000;
  const auto q = num / bytes_per_second;
  return static_cast<Micros>(num % bytes_per_second == 0 ? q : q + 1);
}

}  // namespace detail

struct Profile {
  std::vector<LayerNode> layers;
  Environment env;
  std::optional<std::vector<Micros>> swap_out_time_override;
  std::optional<std::vector<Micros>> swap_in_time_override;

  [[nodiscard]] int size() const { return static_cast<int>(layers.size()); }
  [[nodiscard]] int sink() const { return size() - 1; }

  /// Device-to-host transfer time of layer i's feature map (override, else ceil(bytes / bw)).
  [[nodiscard]] Micros swap_out_time(int i) const {
    if (swap_out_time_override) return (*swap_out_time_override)[i];
    return detail::transfer_micros(layers[i].output_bytes, *env.d2h_bandwidth);
  }
  [[nodiscard]] Micros swap_in_time(int i) const {
    if (swap_in_time_override) return (*swap_in_time_override)[i];
    return detail::transfer_micros(layers[i].output_bytes, *env.h2d_bandwidth);
  }

  /// consumers()[i] lists, ascending, the layers whose forward reads layer i's output.
  [[nodiscard]] std::vector<std::vector<int>> consumers() const {
    std::vector<std::vector<int>> out(layers.size());
    for (const auto& l : layers) {
      for (int in : l.inputs) out[in].push_back(l.id);
    }
    return out;
  }

  [[nodiscard]] Bytes total_feature_bytes() const {
    Bytes sum = 0;
    for (const auto& l : layers) sum += l.output_bytes;
    return sum;
  }

  friend bool operator==(const Profile&, const Profile&) = default;
};

/// Throws ValidationError naming the first violated invariant.
inline void validate(const Profile& p) {
  auto fail = [](const std::string& msg) { throw ValidationError(msg); };
  const int n = p.size();
  if (n == 0) fail("profile has no layers");
  for (int i = 0; i < n; ++i) {
    const auto& l = p.layers[i];
    const auto tag = "layer " + std::to_string(i);
    if (l.id != i) fail(tag + " has id " + std::to_string(l.id) + ", expected dense index");
    if (l.fwd_time <= 0) fail(tag + " fwd_time must be positive");
    if (l.bwd_time <= 0) fail(tag + " bwd_time must be positive");
    if (l.output_bytes <= 0) fail(tag + " output_bytes must be positive");
    for (std::size_t k = 0; k < l.inputs.size(); ++k) {
      const int in = l.inputs[k];
      if (in < 0) fail(tag + " input " + std::to_string(in) + " is negative");
      if (in >= i) fail(tag + " input " + std::to_string(in) + " not topological");
      if (std::find(l.inputs.begin(), l.inputs.begin() + static_cast<std::ptrdiff_t>(k), in) !=
          l.inputs.begin() + static_cast<std::ptrdiff_t>(k)) {
        fail(tag + " input " + std::to_string(in) + " listed twice");
      }
    }
    if (i > 0 && l.inputs.empty()) fail(tag + " is a second source (layer 0 is the only source)");
  }
  const auto cons = p.consumers();
  for (int i = 0; i + 1 < n; ++i) {
    if (cons[i].empty()) {
      fail("layer " + std::to_string(i) + " is a second sink (layer " + std::to_string(n - 1) +
           " is the only sink)");
    }
  }

  const auto& e = p.env;
  if (e.capacity_bytes <= 0) fail("env capacity_bytes must be positive");
  if (e.resident_base_bytes <= 0) fail("env resident_base_bytes must be positive");
  if (e.resident_base_bytes >= e.capacity_bytes) fail("env resident_base_bytes must be below capacity_bytes");
  if (e.d2h_bandwidth && *e.d2h_bandwidth <= 0) fail("env d2h bandwidth must be positive");
  if (e.h2d_bandwidth && *e.h2d_bandwidth <= 0) fail("env h2d bandwidth must be positive");
  if (!e.d2h_bandwidth && !p.swap_out_time_override) fail("env d2h bandwidth missing and no swap_out_time_us");
  if (!e.h2d_bandwidth && !p.swap_in_time_override) fail("env h2d bandwidth missing and no swap_in_time_us");

  auto check_override = [&](const std::optional<std::vector<Micros>>& o, const char* name) {
    if (!o) return;
    if (static_cast<int>(o->size()) != n) {
      fail(std::string(name) + " has " + std::to_string(o->size()) + " entries, expected " + std::to_string(n));
    }
    for (int i = 0; i < n; ++i) {
      if ((*o)[i] <= 0) fail(std::string(name) + " entry " + std::to_string(i) + " must be positive");
    }
  };
  check_override(p.swap_out_time_override, "swap_out_time_us");
  check_override(p.swap_in_time_override, "swap_in_time_us");
}

/// Positive rational scaling factor.
struct Rational {
  std::int64_t num = 1;
  std::int64_t den = 1;
};

namespace detail {

/// Round-half-up of v * r, never below 1.
inline std::int64_t scale_positive(std::int64_t v, Rational r) {
  const auto num = static_cast<__int128>(v) * r.num;
  const auto q = (2 * num + r.den) / (2 * static_cast<__int128>(r.den));
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(q));
}

}  // namespace detail

/// Linear batch-size model: feature-map bytes, compute times and transfer overrides all
/// scale by `factor`. Results are rounded to the nearest integer and never drop below 1.
inline Profile scale_profile(const Profile& p, Rational factor) {
  if (factor.num <= 0 || factor.den <= 0) throw UsageError("batch factor must be positive");
  Profile out = p;
  for (auto& l : out.layers) {
    l.fwd_time = detail::scale_positive(l.fwd_time, factor);
    l.bwd_time = detail::scale_positive(l.bwd_time, factor);
    l.output_bytes = detail::scale_positive(l.output_bytes, factor);
  }
  for (auto* o : {&out.swap_out_time_override, &out.swap_in_time_override}) {
    if (!*o) continue;
    for (auto& t : **o) t = detail::scale_positive(t, factor);
  }
  return out;
}

enum class Class : std::uint8_t { keep = 0, swap = 1, recompute = 2 };

inline constexpr std::array<std::string_view, 3> kClassNames = {"keep", "swap", "recompute"};

inline std::string_view to_string(Class c) { return kClassNames[static_cast<std::size_t>(c)]; }

inline std::optional<Class> class_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kClassNames.size(); ++i) {
    if (kClassNames[i] == s) return static_cast<Class>(i);
  }
  return std::nullopt;
}

/// Swap-in issue policy used by the simulator.
enum class Schedule : std::uint8_t {
  /// Each prefetch overlaps only the compute task immediately before its first consumer.
  naive,
  /// Prefetches run in need order as soon as the copy lane and the memory budget allow.
  eager,
  /// Each prefetch starts with the closest earlier compute task of a convolution layer.
  conv_anchored,
};

inline constexpr std::array<std::string_view, 3> kScheduleNames = {"naive", "eager", "conv_anchored"};

inline std::string_view to_string(Schedule s) { return kScheduleNames[static_cast<std::size_t>(s)]; }

inline std::optional<Schedule> schedule_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kScheduleNames.size(); ++i) {
    if (kScheduleNames[i] == s) return static_cast<Schedule>(i);
  }
  return std::nullopt;
}

/// Per-feature-map class assignment. `schedule` is set by strategies whose semantics fix a
/// swap-in policy (the SuperNeurons-style plan); planners otherwise leave it empty.
struct Placement {
  std::vector<Class> classes;
  std::optional<Schedule> schedule;

  [[nodiscard]] int size() const { return static_cast<int>(classes.size()); }
  Class operator[](int i) const { return classes[i]; }

  [[nodiscard]] std::array<int, 3> counts() const {
    std::array<int, 3> c{};
    for (auto k : classes) ++c[static_cast<std::size_t>(k)];
    return c;
  }

  static Placement uniform(int n, Class c) { return Placement{std::vector<Class>(static_cast<std::size_t>(n), c), {}}; }

  friend bool operator==(const Placement&, const Placement&) = default;
};

inline void validate(const Placement& pl, const Profile& p) {
  if (pl.size() != p.size()) {
    throw ValidationError("placement has " + std::to_string(pl.size()) + " classes, profile has " +
                          std::to_string(p.size()) + " layers");
  }
  if (pl.classes.back() == Class::recompute) {
    throw ValidationError("sink layer " + std::to_string(p.sink()) + " cannot be recompute");
  }
}

}  // namespace pooch
