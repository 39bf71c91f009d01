// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pnloc/common.hpp"
#include "pnloc/geometry.hpp"
#include "pnloc/io.hpp"
#include "pnloc/localizer.hpp"
#include "pnloc/parallel.hpp"
#include "pnloc/renderer.hpp"
#include "pnloc/scene.hpp"
#include "pnloc/warp.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace pnloc {

inline constexpr double kRadToDeg = 180.0 / 3.14159265358979323846;

/// Geodesic angle between two rotations in degrees, in [0, 180].
inline double rotation_error_deg(const Pose& a, const Pose& b) {
  const double tr = (a.rotation.transpose() * b.rotation).trace();
  return std::acos(std::clamp((tr - 1.0) / 2.0, -1.0, 1.0)) * kRadToDeg;
}

/// Distance between the camera centers in meters.
inline double translation_error(const Pose& a, const Pose& b) { return (a.center() - b.center()).norm(); }

enum class RefineMethod { None, Warping, Photometric };

inline const char* to_string(RefineMethod m) {
  switch (m) {
    case RefineMethod::None: return "none";
    case RefineMethod::Warping: return "warping";
    case RefineMethod::Photometric: return "photometric";
  }
  return "unknown";
}

struct PipelineConfig {
  MatchConfig match;
  RansacConfig ransac;
  RefineMethod method = RefineMethod::Warping;
  RefineConfig refine;
  PhotometricConfig photometric;
  std::size_t max_keypoints = 1000;
  std::uint64_t seed = 0;
  int threads = 1;  // query-level workers

  // Recall thresholds: the absolute pair and one relative to the scene
  // diameter.
  double recall_translation_m = 0.05;
  double recall_rotation_deg = 5.0;
  double scaled_translation_fraction = 0.005;
  double scaled_rotation_deg = 0.1;
};

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json j;
  j["match"] = {{"score_threshold", c.match.score_threshold},
                {"similarity_floor", c.match.similarity_floor},
                {"mutual_check", c.match.mutual_check}};
  j["ransac"] = {{"max_iterations", c.ransac.max_iterations},
                 {"inlier_threshold_px", c.ransac.inlier_threshold_px},
                 {"min_inliers", c.ransac.min_inliers},
                 {"early_exit_confidence", c.ransac.early_exit_confidence},
                 {"refine", c.ransac.refine}};
  j["method"] = to_string(c.method);
  j["refine"] = {{"n_samples", c.refine.n_samples},
                 {"iterations", c.refine.iterations},
                 {"lr", c.refine.optimizer.learning_rate},
                 {"depth_min", c.refine.depth_min},
                 {"rerender_every", c.refine.rerender_every},
                 {"use_blank_mask", c.refine.use_blank_mask},
                 {"pivot_at_centroid", c.refine.pivot_at_centroid}};
  j["photometric"] = {{"iterations", c.photometric.iterations},
                      {"lr", c.photometric.optimizer.learning_rate},
                      {"n_rays", c.photometric.n_rays},
                      {"fd_step", c.photometric.fd_step}};
  j["max_keypoints"] = c.max_keypoints;
  j["seed"] = c.seed;
  j["recall"] = {{"translation_m", c.recall_translation_m},
                 {"rotation_deg", c.recall_rotation_deg},
                 {"scaled_translation_fraction", c.scaled_translation_fraction},
                 {"scaled_rotation_deg", c.scaled_rotation_deg}};
  return j;
}

/// FNV-1a over the canonical JSON text (keys sorted), as 16 hex digits.
inline std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

struct StageTimes {
  double match = 0, ransac = 0, render = 0, refine = 0;
  double total() const { return match + ransac + render + refine; }
};

struct LocalizationResult {
  std::size_t query_id = 0;
  std::string status = "ok";  // "ok", an error code name, or a refine status
  std::optional<Pose> stage1;
  std::optional<Pose> refined;  // absent when refinement was off or skipped
  std::optional<Pose> gt;
  std::size_t keypoints = 0;
  std::size_t matches = 0;
  std::size_t inliers = 0;
  int refine_best_iter = -1;
  StageTimes seconds;

  std::optional<Pose> final_pose() const { return refined ? refined : stage1; }
};

namespace detail {

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

inline std::uint64_t query_seed(std::uint64_t seed, std::size_t q, std::uint64_t stage) {
  return derive_seed(derive_seed(seed, 0x5100 + q), stage);
}

}  // namespace detail

/// Everything one query needs; the scene supplies the map.
struct QueryInput {
  Camera camera;
  ImageD image;
  DescriptorMap descriptors;
  std::optional<Mask> mask;
  std::optional<Pose> gt;
};

struct LocalizationMap {
  const PointField* field = nullptr;
  const RadianceHead* head = nullptr;
  RenderSettings render;
};

/// Runs match -> RANSAC -> reference render -> refinement for one query.
/// Failures land in `status`; nothing is thrown for per-query problems.
inline LocalizationResult localize_query(const LocalizationMap& map, const QueryInput& query, std::size_t id,
                                         const PipelineConfig& config, const PointField* filtered = nullptr) {
  LocalizationResult out;
  out.query_id = id;
  out.gt = query.gt;
  detail::Stopwatch clock;
  try {
    const auto keypoints = keypoints_from_map(query.descriptors, config.max_keypoints);
    out.keypoints = keypoints.size();
    MatchConfig mc = config.match;
    const PointField* field = map.field;
    if (filtered) {
      field = filtered;
      mc.score_threshold = 0;
    }
    const auto matched = match_features(keypoints, *field, mc);
    out.matches = matched.matches.size();
    out.seconds.match = clock.lap();

    RansacConfig rc = config.ransac;
    rc.seed = detail::query_seed(config.seed, id, 1);
    const auto estimate = ransac_pnp(matched.matches, query.camera, rc);
    out.stage1 = estimate.pose;
    out.inliers = estimate.inlier_count;
    out.seconds.ransac = clock.lap();
  } catch (const Error& e) {
    out.status = std::string(to_string(e.code()));
    return out;
  }
  if (config.method == RefineMethod::None) return out;

  RenderSettings rs = map.render;
  rs.sampler.seed = detail::query_seed(config.seed, id, 3);
  if (config.method == RefineMethod::Photometric) {
    PhotometricConfig pc = config.photometric;
    pc.seed = detail::query_seed(config.seed, id, 4);
    const auto r = photometric_refine_baseline(*map.field, *map.head, rs, query.image, query.camera, *out.stage1, pc);
    out.seconds.refine = clock.lap();
    out.refine_best_iter = r.best_iter;
    if (r.status != RefineStatus::Ok) out.status = to_string(r.status);
    if (r.status == RefineStatus::Ok || r.status == RefineStatus::Diverged) out.refined = r.pose;
    return out;
  }

  const auto reference = render_view(*map.field, query.camera, *out.stage1, rs, *map.head);
  out.seconds.render = clock.lap();
  RefineConfig rc = config.refine;
  rc.seed = detail::query_seed(config.seed, id, 2);
  ReferenceRenderer rerender;
  if (rc.rerender_every > 0) {
    rerender = [&](const Pose& p) { return render_view(*map.field, query.camera, p, rs, *map.head); };
  }
  const auto r = refine_pose(query.image, reference, rc, *out.stage1, query.mask, rerender);
  out.seconds.refine = clock.lap();
  out.refine_best_iter = r.best_iter;
  if (r.status != RefineStatus::Ok) out.status = to_string(r.status);
  if (r.status == RefineStatus::Ok || r.status == RefineStatus::Diverged) out.refined = r.pose;
  return out;
}

inline LocalizationMap map_of(const SceneBundle& bundle) { return {&bundle.field, &bundle.head, bundle.render}; }

inline QueryInput query_input(const SceneQuery& q) { return {q.camera, q.image, q.descriptors, q.mask, q.gt_pose}; }

/// All queries of a synthetic bundle, merged in query order.
inline std::vector<LocalizationResult> run_pipeline(const SceneBundle& bundle, const PipelineConfig& config) {
  std::vector<LocalizationResult> results(bundle.queries.size());
  const auto map = map_of(bundle);
  parallel_for(bundle.queries.size(), config.threads, [&](std::size_t q) {
    results[q] = localize_query(map, query_input(bundle.queries[q]), q, config);
  });
  return results;
}

// ---------------------------------------------------------------- metrics

struct MetricsReport {
  std::string label;
  std::size_t queries = 0;
  std::size_t successes = 0;  // queries with a pose
  std::size_t failures = 0;
  double median_translation_m = std::numeric_limits<double>::quiet_NaN();
  double median_rotation_deg = std::numeric_limits<double>::quiet_NaN();
  double recall = 0;         // at (recall_translation_m, recall_rotation_deg)
  double scaled_recall = 0;  // at (fraction x diameter, scaled_rotation_deg)
  double scene_diameter = 0;
  StageTimes mean_seconds;   // not part of the deterministic outputs
  std::string config_hash;
};

struct ErrorRow {
  std::size_t query_id = 0;
  std::string status;
  bool has_pose = false;
  double translation_m = std::numeric_limits<double>::quiet_NaN();
  double rotation_deg = std::numeric_limits<double>::quiet_NaN();
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline ErrorRow error_row(const LocalizationResult& r) {
  ErrorRow row{r.query_id, r.status};
  const auto pose = r.final_pose();
  row.has_pose = pose.has_value();
  if (pose && r.gt) {
    row.translation_m = translation_error(*pose, *r.gt);
    row.rotation_deg = rotation_error_deg(*pose, *r.gt);
  }
  return row;
}

/// Medians run over queries that produced a pose; recall counts failures
/// as misses.
inline MetricsReport compute_metrics(std::span<const ErrorRow> rows, const PipelineConfig& config,
                                     double scene_diameter, std::string label = "") {
  MetricsReport m;
  m.label = std::move(label);
  m.queries = rows.size();
  m.scene_diameter = scene_diameter;
  m.config_hash = config_hash(to_json(config));
  std::vector<double> t, r;
  std::size_t hit = 0, scaled_hit = 0;
  const double scaled_t = config.scaled_translation_fraction * scene_diameter;
  for (const auto& row : rows) {
    if (!row.has_pose || !std::isfinite(row.translation_m)) continue;
    t.push_back(row.translation_m);
    r.push_back(row.rotation_deg);
    hit += row.translation_m <= config.recall_translation_m && row.rotation_deg <= config.recall_rotation_deg;
    scaled_hit += row.translation_m <= scaled_t && row.rotation_deg <= config.scaled_rotation_deg;
  }
  m.successes = t.size();
  m.failures = m.queries - m.successes;
  m.median_translation_m = median(t);
  m.median_rotation_deg = median(r);
  if (m.queries > 0) {
    m.recall = static_cast<double>(hit) / static_cast<double>(m.queries);
    m.scaled_recall = static_cast<double>(scaled_hit) / static_cast<double>(m.queries);
  }
  return m;
}

inline MetricsReport compute_metrics(std::span<const LocalizationResult> results, const PipelineConfig& config,
                                     double scene_diameter, std::string label = "") {
  std::vector<ErrorRow> rows;
  rows.reserve(results.size());
  for (const auto& r : results) rows.push_back(error_row(r));
  auto m = compute_metrics(rows, config, scene_diameter, std::move(label));
  if (!results.empty()) {
    for (const auto& r : results) {
      m.mean_seconds.match += r.seconds.match;
      m.mean_seconds.ransac += r.seconds.ransac;
      m.mean_seconds.render += r.seconds.render;
      m.mean_seconds.refine += r.seconds.refine;
    }
    const double n = static_cast<double>(results.size());
    m.mean_seconds.match /= n;
    m.mean_seconds.ransac /= n;
    m.mean_seconds.render /= n;
    m.mean_seconds.refine /= n;
  }
  return m;
}

// ---------------------------------------------------------------- outputs

namespace detail {

inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline nlohmann::json num_json(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_num(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

inline std::string pose_cells(const std::optional<Pose>& p) {
  if (!p) return ",,,,,,";
  const auto q = p->quaternion();
  const double v[7] = {q.w(), q.x(), q.y(), q.z(), p->translation.x(), p->translation.y(), p->translation.z()};
  std::string s;
  for (int i = 0; i < 7; ++i) s += (i ? "," : "") + num(v[i]);
  return s;
}

}  // namespace detail

inline const char* kResultsCsvHeader =
    "query,status,keypoints,matches,inliers,refine_best_iter,stage1_translation_m,stage1_rotation_deg,"
    "has_pose,translation_m,rotation_deg,qw,qx,qy,qz,tx,ty,tz";

/// Per-query results without timings; byte-identical across runs.
inline void write_results_csv(std::ostream& os, std::span<const LocalizationResult> results) {
  os << kResultsCsvHeader << '\n';
  for (const auto& r : results) {
    const auto row = error_row(r);
    double t1 = std::numeric_limits<double>::quiet_NaN(), r1 = t1;
    if (r.stage1 && r.gt) {
      t1 = translation_error(*r.stage1, *r.gt);
      r1 = rotation_error_deg(*r.stage1, *r.gt);
    }
    os << r.query_id << ',' << r.status << ',' << r.keypoints << ',' << r.matches << ',' << r.inliers << ','
       << r.refine_best_iter << ',' << detail::num(t1) << ',' << detail::num(r1) << ',' << (row.has_pose ? 1 : 0)
       << ',' << detail::num(row.translation_m) << ',' << detail::num(row.rotation_deg) << ','
       << detail::pose_cells(r.final_pose()) << '\n';
  }
}

inline std::vector<ErrorRow> read_results_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kResultsCsvHeader) {
    throw Error(ErrorCode::InvalidArgument, "results CSV header mismatch");
  }
  std::vector<ErrorRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != 18) throw Error(ErrorCode::InvalidArgument, "bad results row: " + line);
    ErrorRow row;
    row.query_id = std::stoul(cells[0]);
    row.status = cells[1];
    row.has_pose = cells[8] == "1";
    row.translation_m = detail::parse_num(cells[9]);
    row.rotation_deg = detail::parse_num(cells[10]);
    rows.push_back(row);
  }
  return rows;
}

inline void write_timings_csv(std::ostream& os, std::span<const LocalizationResult> results) {
  os << "query,match_s,ransac_s,render_s,refine_s,total_s\n";
  for (const auto& r : results) {
    os << r.query_id << ',' << r.seconds.match << ',' << r.seconds.ransac << ',' << r.seconds.render << ','
       << r.seconds.refine << ',' << r.seconds.total() << '\n';
  }
}

/// Deterministic metrics JSON; timings are left out.
inline nlohmann::json metrics_json(const MetricsReport& m) {
  return {{"label", m.label},
          {"queries", m.queries},
          {"successes", m.successes},
          {"failures", m.failures},
          {"median_translation_m", detail::num_json(m.median_translation_m)},
          {"median_rotation_deg", detail::num_json(m.median_rotation_deg)},
          {"recall", m.recall},
          {"scaled_recall", m.scaled_recall},
          {"scene_diameter", m.scene_diameter},
          {"config_hash", m.config_hash}};
}

inline void write_report_md(std::ostream& os, std::span<const MetricsReport> reports, const std::string& title,
                            const PipelineConfig& config) {
  os << "# " << title << "\n\n";
  os << "Recall thresholds: (" << config.recall_translation_m << " m, " << config.recall_rotation_deg
     << " deg) and scaled (" << config.scaled_translation_fraction << " x diameter, " << config.scaled_rotation_deg
     << " deg).\n\n";
  os << "| run | queries | failures | median t (m) | median R (deg) | recall | scaled recall | match s | ransac s "
        "| render s | refine s | total s |\n";
  os << "|---|---|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& m : reports) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "| %s | %zu | %zu | %.6f | %.4f | %.3f | %.3f | %.4f | %.4f | %.4f | %.4f | %.4f |\n",
                  m.label.c_str(), m.queries, m.failures, m.median_translation_m, m.median_rotation_deg, m.recall,
                  m.scaled_recall, m.mean_seconds.match, m.mean_seconds.ransac, m.mean_seconds.render,
                  m.mean_seconds.refine, m.mean_seconds.total());
    os << buf;
  }
  os << "\nTimings are per-query means in seconds. Config hash: `"
     << (reports.empty() ? std::string() : reports.front().config_hash) << "`.\n";
}

// ---------------------------------------------------------------- ablation

enum class AblationMode { NoRefine, NoBlankMask, PhotometricBaseline, Full };

inline const char* to_string(AblationMode m) {
  switch (m) {
    case AblationMode::NoRefine: return "no_refine";
    case AblationMode::NoBlankMask: return "no_blank_mask";
    case AblationMode::PhotometricBaseline: return "photometric_baseline";
    case AblationMode::Full: return "full";
  }
  return "unknown";
}

inline AblationMode parse_ablation_mode(std::string_view s) {
  for (auto m : {AblationMode::NoRefine, AblationMode::NoBlankMask, AblationMode::PhotometricBaseline,
                 AblationMode::Full}) {
    if (s == to_string(m)) return m;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown ablation mode '" + std::string(s) + "'");
}

/// The pipeline configuration a mode runs with. The photometric baseline
/// gets the same iteration count and learning rate as the warping loss.
inline PipelineConfig ablation_config(PipelineConfig base, AblationMode mode) {
  switch (mode) {
    case AblationMode::NoRefine: base.method = RefineMethod::None; break;
    case AblationMode::NoBlankMask:
      base.method = RefineMethod::Warping;
      base.refine.use_blank_mask = false;
      break;
    case AblationMode::PhotometricBaseline:
      base.method = RefineMethod::Photometric;
      base.photometric.iterations = base.refine.iterations;
      base.photometric.optimizer = base.refine.optimizer;
      break;
    case AblationMode::Full: base.method = RefineMethod::Warping; break;
  }
  return base;
}

struct AblationRun {
  AblationMode mode;
  std::vector<LocalizationResult> results;
  MetricsReport metrics;
  double wall_seconds = 0;
};

inline std::vector<AblationRun> ablate(const SceneBundle& bundle, const PipelineConfig& base,
                                       std::span<const AblationMode> modes) {
  std::vector<AblationRun> runs;
  for (const auto mode : modes) {
    const auto config = ablation_config(base, mode);
    detail::Stopwatch clock;
    AblationRun run{mode, run_pipeline(bundle, config), {}, 0};
    run.wall_seconds = clock.lap();
    run.metrics = compute_metrics(run.results, config, bundle.diameter(), to_string(mode));
    runs.push_back(std::move(run));
  }
  return runs;
}

inline void write_ablation_csv(std::ostream& os, std::span<const AblationRun> runs) {
  os << "mode,queries,failures,median_translation_m,median_rotation_deg,recall,scaled_recall\n";
  for (const auto& r : runs) {
    const auto& m = r.metrics;
    os << to_string(r.mode) << ',' << m.queries << ',' << m.failures << ',' << detail::num(m.median_translation_m)
       << ',' << detail::num(m.median_rotation_deg) << ',' << detail::num(m.recall) << ','
       << detail::num(m.scaled_recall) << '\n';
  }
}

// ---------------------------------------------------------------- score sweep

struct SweepRow {
  double threshold = 0;
  std::size_t candidates = 0;  // points with S >= threshold
  bool fell_back = false;      // nothing survived; matched the full field
  std::size_t matches = 0;     // summed over queries
  double match_seconds = 0;    // all queries, best of the repeats
  MetricsReport metrics;
};

/// Localizes every query once per threshold against the filtered field.
/// Matching is timed separately (best of `timing_repeats` passes) because
/// it is the stage the filter speeds up.
inline std::vector<SweepRow> sweep_score_threshold(const SceneBundle& bundle, std::span<const double> thresholds,
                                                   const PipelineConfig& config, int timing_repeats = 3) {
  std::vector<SweepRow> rows;
  const auto map = map_of(bundle);
  std::vector<std::vector<Keypoint>> keypoints;
  for (const auto& q : bundle.queries) keypoints.push_back(keypoints_from_map(q.descriptors, config.max_keypoints));
  for (const double st : thresholds) {
    SweepRow row;
    row.threshold = st;
    PointField filtered;
    try {
      filtered = filter_by_score(bundle.field, st);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::AllFiltered) throw;
      filtered = bundle.field;
      row.fell_back = true;
    }
    row.candidates = filtered.size();
    MatchConfig mc = config.match;
    mc.score_threshold = 0;
    row.match_seconds = std::numeric_limits<double>::infinity();
    for (int rep = 0; rep < std::max(timing_repeats, 1); ++rep) {
      detail::Stopwatch clock;
      std::size_t matches = 0;
      for (const auto& kps : keypoints) {
        try {
          matches += match_features(kps, filtered, mc).matches.size();
        } catch (const Error& e) {
          if (e.code() != ErrorCode::NoMatches) throw;
        }
      }
      row.match_seconds = std::min(row.match_seconds, clock.lap());
      row.matches = matches;
    }
    std::vector<LocalizationResult> results(bundle.queries.size());
    parallel_for(bundle.queries.size(), config.threads, [&](std::size_t q) {
      results[q] = localize_query(map, query_input(bundle.queries[q]), q, config, &filtered);
    });
    std::ostringstream label;
    label << "S_t=" << st;
    row.metrics = compute_metrics(results, config, bundle.diameter(), label.str());
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows) {
  os << "threshold,candidates,fell_back,matches,failures,median_translation_m,median_rotation_deg,recall,"
        "scaled_recall\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    os << detail::num(r.threshold) << ',' << r.candidates << ',' << (r.fell_back ? 1 : 0) << ',' << r.matches << ','
       << m.failures << ',' << detail::num(m.median_translation_m) << ',' << detail::num(m.median_rotation_deg)
       << ',' << detail::num(m.recall) << ',' << detail::num(m.scaled_recall) << '\n';
  }
}

inline void write_sweep_timings_csv(std::ostream& os, std::span<const SweepRow> rows) {
  os << "threshold,candidates,match_seconds\n";
  for (const auto& r : rows) os << r.threshold << ',' << r.candidates << ',' << r.match_seconds << '\n';
}

}  // namespace pnloc
