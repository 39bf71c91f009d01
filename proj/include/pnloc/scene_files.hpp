// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pnloc/io.hpp"
#include "pnloc/scene.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <string>

namespace pnloc {

// A scene directory holds field.pnpf, scene.json and, per query q,
// query_q.pnim (image), query_q.pndm (descriptors), query_q.png (preview)
// and optionally query_q.pnmk (mask). scene.json carries the renderer
// settings, cameras and poses; see docs/formats.md.

inline nlohmann::json to_json(const SyntheticSceneConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"point_count", c.point_count},
          {"descriptors", to_string(c.descriptors)},
          {"descriptor_noise", c.descriptor_noise},
          {"seed", c.seed},
          {"descriptor_dim", c.descriptor_dim},
          {"feature_dim", c.feature_dim},
          {"camera", format_camera(c.camera)},
          {"query_count", c.query_count},
          {"reference_count", c.reference_count},
          {"samples_per_ray", c.samples_per_ray},
          {"kernel_width_factor", c.kernel_width_factor},
          {"peak_optical_depth", c.peak_optical_depth},
          {"room_half_extent", {c.room_half_extent.x(), c.room_half_extent.y(), c.room_half_extent.z()}},
          {"open_faces", c.open_faces},
          {"max_keypoints", c.max_keypoints},
          {"keypoint_noise_px", c.keypoint_noise_px},
          {"structured_reliability", c.structured_reliability},
          {"unreliable_noise", c.unreliable_noise}};
}

inline std::string query_stem(std::size_t q) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "query_%03zu", q);
  return buf;
}

inline void save_scene_dir(const SceneBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_point_field(dir / "field.pnpf", bundle.field);
  const auto& s = bundle.render.sampler;
  nlohmann::json j;
  j["config"] = to_json(bundle.config);
  j["render"] = {{"near", s.near},
                 {"far", s.far},
                 {"samples_per_ray", s.n_samples},
                 {"mode", s.mode == SamplingMode::Stratified ? "stratified" : "uniform"},
                 {"seed", s.seed},
                 {"neighbors", bundle.render.neighbors.k},
                 {"radius", bundle.render.neighbors.radius}};
  j["head"] = {{"feature_dim", bundle.head.feature_dim},
               {"kernel_width", bundle.head.kernel_width},
               {"peak_density", softplus(bundle.head.density_bias)}};
  j["scene_diameter"] = bundle.diameter();
  j["reference_poses"] = nlohmann::json::array();
  for (const auto& p : bundle.reference_poses) j["reference_poses"].push_back(format_pose(p));
  j["queries"] = nlohmann::json::array();
  for (std::size_t q = 0; q < bundle.queries.size(); ++q) {
    const auto& query = bundle.queries[q];
    const auto stem = query_stem(q);
    save_image(dir / (stem + ".pnim"), query.image);
    save_png(dir / (stem + ".png"), query.image);
    save_descriptor_map(dir / (stem + ".pndm"), query.descriptors);
    if (query.mask) save_mask(dir / (stem + ".pnmk"), *query.mask);
    j["queries"].push_back({{"stem", stem},
                            {"camera", format_camera(query.camera)},
                            {"gt_pose", format_pose(query.gt_pose)},
                            {"render_seed", query.render_seed},
                            {"has_mask", query.mask.has_value()}});
  }
  write_text(dir / "scene.json", j.dump(2) + "\n");
}

/// Loads what localization needs. The generating config is restored too,
/// but point colors and reliabilities are not stored and stay empty.
inline SceneBundle load_scene_dir(const std::filesystem::path& dir) {
  const auto j = nlohmann::json::parse(read_text(dir / "scene.json"));
  SceneBundle b;
  const auto& c = j.at("config");
  b.config.kind = parse_scene_kind(c.at("kind").get<std::string>());
  b.config.point_count = c.at("point_count");
  b.config.descriptors = parse_descriptor_scheme(c.at("descriptors").get<std::string>());
  b.config.descriptor_noise = c.at("descriptor_noise");
  b.config.seed = c.at("seed");
  b.config.descriptor_dim = c.at("descriptor_dim");
  b.config.feature_dim = c.at("feature_dim");
  b.config.camera = parse_camera(c.at("camera").get<std::string>());
  b.config.query_count = c.at("query_count");
  b.config.reference_count = c.at("reference_count");
  b.config.samples_per_ray = c.at("samples_per_ray");
  b.config.kernel_width_factor = c.at("kernel_width_factor");
  b.config.peak_optical_depth = c.at("peak_optical_depth");
  const auto& e = c.at("room_half_extent");
  b.config.room_half_extent = Vec3(e.at(0), e.at(1), e.at(2));
  b.config.open_faces = c.at("open_faces");
  b.config.max_keypoints = c.at("max_keypoints");
  b.config.keypoint_noise_px = c.at("keypoint_noise_px");
  b.config.structured_reliability = c.at("structured_reliability");
  b.config.unreliable_noise = c.at("unreliable_noise");

  b.field = load_point_field(dir / "field.pnpf");
  const auto& r = j.at("render");
  auto& s = b.render.sampler;
  s.near = r.at("near");
  s.far = r.at("far");
  s.n_samples = r.at("samples_per_ray");
  s.mode = r.at("mode").get<std::string>() == "uniform" ? SamplingMode::Uniform : SamplingMode::Stratified;
  s.seed = r.at("seed");
  b.render.neighbors.k = r.at("neighbors");
  b.render.neighbors.radius = r.at("radius");
  const auto& h = j.at("head");
  b.head = RadianceHead::canonical(h.at("feature_dim"), h.at("kernel_width"), h.at("peak_density"));
  for (const auto& p : j.at("reference_poses")) b.reference_poses.push_back(parse_pose(p.get<std::string>()));
  for (const auto& qj : j.at("queries")) {
    SceneQuery q;
    const auto stem = qj.at("stem").get<std::string>();
    q.camera = parse_camera(qj.at("camera").get<std::string>());
    q.gt_pose = parse_pose(qj.at("gt_pose").get<std::string>());
    q.render_seed = qj.at("render_seed");
    q.image = load_image(dir / (stem + ".pnim"));
    q.descriptors = load_descriptor_map(dir / (stem + ".pndm"));
    if (qj.at("has_mask").get<bool>()) q.mask = load_mask(dir / (stem + ".pnmk"));
    b.queries.push_back(std::move(q));
  }
  return b;
}

}  // namespace pnloc
