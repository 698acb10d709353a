// SPDX-License-Identifier: Apache-2.0

// JSON serialization of profiles and plans, plus atomic file output.

#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "pooch/model.hpp"

namespace pooch {

using json = nlohmann::ordered_json;

namespace detail {

template <typename T>
T get_field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw ParseError(where + ": missing key '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(where + ": key '" + key + "' has the wrong type (" + e.what() + ")");
  }
}

inline std::optional<std::vector<Micros>> get_override(const json& obj, const char* key) {
  if (!obj.contains(key) || obj.at(key).is_null()) return std::nullopt;
  return get_field<std::vector<Micros>>(obj, key, "profile");
}

}  // namespace detail

inline json to_json(const Profile& p) {
  json layers = json::array();
  for (const auto& l : p.layers) {
    layers.push_back({{"id", l.id},
                      {"name", l.name},
                      {"kind", std::string(to_string(l.kind))},
                      {"fwd_time_us", l.fwd_time},
                      {"bwd_time_us", l.bwd_time},
                      {"output_bytes", l.output_bytes},
                      {"inputs", l.inputs}});
  }
  json env = {{"capacity_bytes", p.env.capacity_bytes}};
  if (p.env.d2h_bandwidth) env["d2h_bw_bytes_per_s"] = *p.env.d2h_bandwidth;
  if (p.env.h2d_bandwidth) env["h2d_bw_bytes_per_s"] = *p.env.h2d_bandwidth;
  env["resident_base_bytes"] = p.env.resident_base_bytes;
  json out = {{"layers", std::move(layers)}, {"env", std::move(env)}};
  if (p.swap_out_time_override) out["swap_out_time_us"] = *p.swap_out_time_override;
  if (p.swap_in_time_override) out["swap_in_time_us"] = *p.swap_in_time_override;
  return out;
}

/// Parses and validates. Throws ParseError for structural problems, ValidationError for
/// invariant violations.
inline Profile profile_from_json(const json& j) {
  using detail::get_field;
  if (!j.is_object()) throw ParseError("profile: top level must be an object");
  Profile p;
  const auto layers = get_field<json>(j, "layers", "profile");
  if (!layers.is_array()) throw ParseError("profile: 'layers' must be an array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& lj = layers[i];
    const auto where = "layer entry " + std::to_string(i);
    LayerNode l;
    l.id = get_field<int>(lj, "id", where);
    l.name = get_field<std::string>(lj, "name", where);
    const auto kind = get_field<std::string>(lj, "kind", where);
    const auto k = layer_kind_from_string(kind);
    if (!k) throw ParseError(where + ": unknown kind '" + kind + "'");
    l.kind = *k;
    l.fwd_time = get_field<Micros>(lj, "fwd_time_us", where);
    l.bwd_time = get_field<Micros>(lj, "bwd_time_us", where);
    l.output_bytes = get_field<Bytes>(lj, "output_bytes", where);
    l.inputs = get_field<std::vector<int>>(lj, "inputs", where);
    p.layers.push_back(std::move(l));
  }
  const auto env = get_field<json>(j, "env", "profile");
  p.env.capacity_bytes = get_field<Bytes>(env, "capacity_bytes", "env");
  p.env.resident_base_bytes = get_field<Bytes>(env, "resident_base_bytes", "env");
  if (env.contains("d2h_bw_bytes_per_s")) p.env.d2h_bandwidth = get_field<std::int64_t>(env, "d2h_bw_bytes_per_s", "env");
  if (env.contains("h2d_bw_bytes_per_s")) p.env.h2d_bandwidth = get_field<std::int64_t>(env, "h2d_bw_bytes_per_s", "env");
  p.swap_out_time_override = detail::get_override(j, "swap_out_time_us");
  p.swap_in_time_override = detail::get_override(j, "swap_in_time_us");
  validate(p);
  return p;
}

inline json to_json(const Placement& pl) {
  json classes = json::array();
  for (auto c : pl.classes) classes.push_back(std::string(to_string(c)));
  json out = {{"classes", std::move(classes)}};
  if (pl.schedule) out["schedule"] = std::string(to_string(*pl.schedule));
  return out;
}

inline Placement placement_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("plan: top level must be an object");
  const auto names = detail::get_field<std::vector<std::string>>(j, "classes", "plan");
  Placement pl;
  for (const auto& s : names) {
    const auto c = class_from_string(s);
    if (!c) throw ParseError("plan: unknown class '" + s + "'");
    pl.classes.push_back(*c);
  }
  if (j.contains("schedule")) {
    const auto s = detail::get_field<std::string>(j, "schedule", "plan");
    const auto sched = schedule_from_string(s);
    if (!sched) throw ParseError("plan: unknown schedule '" + s + "'");
    pl.schedule = sched;
  }
  return pl;
}

inline json parse_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

/// Writes to a sibling temporary file and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Profile load_profile(const std::filesystem::path& path) { return profile_from_json(parse_json_file(path)); }

inline void save_profile(const Profile& p, const std::filesystem::path& path) {
  write_file_atomic(path, to_json(p).dump(2) + "\n");
}

inline Placement load_plan(const std::filesystem::path& path) { return placement_from_json(parse_json_file(path)); }

inline void save_plan(const Placement& pl, const std::filesystem::path& path) {
  write_file_atomic(path, to_json(pl).dump(2) + "\n");
}

}  // namespace pooch
