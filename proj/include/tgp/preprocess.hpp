// Trajectory ingestion and the geometric/statistical pipeline.
//
// The chain runs: WGS84 -> ECEF -> approach-frame projection -> gating ->
// scaling -> pole fit -> cylindrical transform.  The approach frame is
// anchored at the final approach fix: axis a points at the runway
// threshold, c is the lateral axis (down x a), and d the glide-slope
// normal (c x a).  Descent rate comes from a constant-velocity Kalman
// model smoothed over the d-coordinate, with noise covariances fitted by
// expectation-maximization.
//
// The bundled track generator produces clearly synthetic traffic (AR(1)
// deviations around the nominal approach path, dispersion depending on the
// wake category) for end-to-end pipeline tests; it stands in for real
// surveillance data and is never a source of reference numbers.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tgp/common.hpp"
#include "tgp/kalman.hpp"
#include "tgp/serialize.hpp"
#include "tgp/svgp.hpp"

namespace tgp {

// ---------------------------------------------------------------------------
// Geodesy.
// ---------------------------------------------------------------------------

inline constexpr double kWgs84SemiMajor = 6378137.0;
inline constexpr double kWgs84Flattening = 1.0 / 298.257223563;
inline constexpr double kWgs84SemiMinor = kWgs84SemiMajor * (1.0 - kWgs84Flattening);

struct Wgs84Point {
  double lat_deg = 0.0;
  double lon_deg = 0.0;
  double alt_m = 0.0;
};

inline Eigen::Vector3d wgs84_to_ecef(double lat_deg, double lon_deg, double alt_m) {
  if (!(std::abs(lat_deg) <= 90.0) || !(std::abs(lon_deg) <= 180.0))
    throw DataError("wgs84_to_ecef: latitude/longitude out of range");
  const double e2 = kWgs84Flattening * (2.0 - kWgs84Flattening);
  const double lat = lat_deg * kPi / 180.0;
  const double lon = lon_deg * kPi / 180.0;
  const double sin_lat = std::sin(lat), cos_lat = std::cos(lat);
  const double n = kWgs84SemiMajor / std::sqrt(1.0 - e2 * sin_lat * sin_lat);
  return {(n + alt_m) * cos_lat * std::cos(lon), (n + alt_m) * cos_lat * std::sin(lon),
          (n * (1.0 - e2) + alt_m) * sin_lat};
}

inline Eigen::Vector3d wgs84_to_ecef(const Wgs84Point &p) {
  return wgs84_to_ecef(p.lat_deg, p.lon_deg, p.alt_m);
}

// Bowring's closed-form inverse, sub-millimetre for terrestrial altitudes.
inline Wgs84Point ecef_to_wgs84(const Eigen::Vector3d &ecef) {
  const double a = kWgs84SemiMajor, b = kWgs84SemiMinor;
  const double e2 = (a * a - b * b) / (a * a);
  const double ep2 = (a * a - b * b) / (b * b);
  const double x = ecef.x(), y = ecef.y(), z = ecef.z();
  const double p = std::hypot(x, y);
  Wgs84Point out;
  out.lon_deg = std::atan2(y, x) * 180.0 / kPi;
  if (p < 1e-9) {  // polar axis: latitude is a sign, altitude from |z|
    out.lat_deg = z >= 0.0 ? 90.0 : -90.0;
    out.alt_m = std::abs(z) - b;
    return out;
  }
  double u = std::atan2(z * a, p * b);
  double lat = std::atan2(z + ep2 * b * std::pow(std::sin(u), 3),
                          p - e2 * a * std::pow(std::cos(u), 3));
  // One refinement of the parametric angle tightens the tail cases.
  u = std::atan2(b * std::sin(lat), a * std::cos(lat));
  lat = std::atan2(z + ep2 * b * std::pow(std::sin(u), 3),
                   p - e2 * a * std::pow(std::cos(u), 3));
  const double sin_lat = std::sin(lat), cos_lat = std::cos(lat);
  const double n = a / std::sqrt(1.0 - e2 * sin_lat * sin_lat);
  out.lat_deg = lat * 180.0 / kPi;
  out.alt_m = std::abs(cos_lat) > 1e-6 ? p / cos_lat - n : z / sin_lat - n * (1.0 - e2);
  return out;
}

// ---------------------------------------------------------------------------
// Approach frame.
// ---------------------------------------------------------------------------

struct IlsGeometry {
  Wgs84Point faf;
  Wgs84Point threshold;
  double glide_slope_deg = 3.0;
  double track_deg = 0.0;

  void validate() const {
    if (!(glide_slope_deg > 0.0 && glide_slope_deg < 10.0))
      throw DataError("ils geometry: glide slope must lie in (0, 10) degrees");
    if ((wgs84_to_ecef(faf) - wgs84_to_ecef(threshold)).norm() < 1.0)
      throw DataError("ils geometry: final approach fix and threshold coincide");
  }
};

struct IlsFrame {
  Eigen::Vector3d origin;  // ECEF position of the final approach fix
  Eigen::Vector3d a;       // unit vector towards the threshold
  Eigen::Vector3d c;       // lateral unit vector (down x a)
  Eigen::Vector3d d;       // glide-slope-normal unit vector (c x a)
};

// Geodetic down at a WGS84 point (normal to the ellipsoid, not geocentric).
inline Eigen::Vector3d local_down(const Wgs84Point &p) {
  const double lat = p.lat_deg * kPi / 180.0;
  const double lon = p.lon_deg * kPi / 180.0;
  return {-std::cos(lat) * std::cos(lon), -std::cos(lat) * std::sin(lon), -std::sin(lat)};
}

inline IlsFrame build_ils_frame(const IlsGeometry &geom) {
  geom.validate();
  IlsFrame f;
  f.origin = wgs84_to_ecef(geom.faf);
  f.a = (wgs84_to_ecef(geom.threshold) - f.origin).normalized();
  const Eigen::Vector3d down = local_down(geom.faf);
  const Eigen::Vector3d raw_c = down.cross(f.a);
  if (raw_c.norm() < 1e-8)
    throw DataError("ils geometry: approach axis is vertical, lateral axis undefined");
  f.c = raw_c.normalized();
  f.d = f.c.cross(f.a).normalized();
  return f;
}

// ---------------------------------------------------------------------------
// Tracks.
// ---------------------------------------------------------------------------

enum class WakeCategory { kMedium, kHeavy };

inline const char *wake_name(WakeCategory w) {
  return w == WakeCategory::kMedium ? "medium" : "heavy";
}

inline WakeCategory wake_from_name(const std::string &name) {
  if (name == "medium") return WakeCategory::kMedium;
  if (name == "heavy") return WakeCategory::kHeavy;
  throw DataError("unknown wake category \"" + name + "\" (expected medium or heavy)");
}

struct RawTrack {
  Eigen::VectorXd time_s;
  Eigen::VectorXd lat_deg;
  Eigen::VectorXd lon_deg;
  Eigen::VectorXd alt_m;
  Eigen::VectorXd gs_mps;
  std::string callsign;
  WakeCategory wake = WakeCategory::kMedium;

  int size() const { return static_cast<int>(time_s.size()); }

  void validate() const {
    const auto n = time_s.size();
    if (lat_deg.size() != n || lon_deg.size() != n || alt_m.size() != n || gs_mps.size() != n)
      throw DataError("track " + callsign + ": column lengths disagree");
    for (Eigen::Index i = 1; i < n; ++i)
      if (!(time_s[i] > time_s[i - 1]))
        throw DataError("track " + callsign + ": timestamps must strictly increase");
  }
};

// Rows of (lateral, glide-slope-normal, along) metres relative to the fix.
inline PointsMatrix project_to_ils(const RawTrack &track, const IlsFrame &frame) {
  PointsMatrix out(track.size(), 3);
  for (int i = 0; i < track.size(); ++i) {
    const Eigen::Vector3d delta =
        wgs84_to_ecef(track.lat_deg[i], track.lon_deg[i], track.alt_m[i]) - frame.origin;
    out(i, 0) = delta.dot(frame.c);
    out(i, 1) = delta.dot(frame.d);
    out(i, 2) = delta.dot(frame.a);
  }
  return out;
}

// Keep only samples whose along-axis coordinate lies inside the approach
// segment window.  Returns the surviving row indices in order.
inline std::vector<int> gate_along_axis(const PointsMatrix &projected, double along_min,
                                        double along_max) {
  if (!(along_min < along_max)) throw DataError("gate_along_axis: empty window");
  std::vector<int> keep;
  for (Eigen::Index i = 0; i < projected.rows(); ++i)
    if (projected(i, 2) >= along_min && projected(i, 2) <= along_max)
      keep.push_back(static_cast<int>(i));
  return keep;
}

// ---------------------------------------------------------------------------
// Descent rate: constant-velocity Kalman smoothing of the d-coordinate,
// reported positive downwards.
// ---------------------------------------------------------------------------

inline Eigen::VectorXd estimate_descent_rate(const RawTrack &track, const IlsFrame &frame,
                                             int em_iterations = 20) {
  track.validate();
  if (track.size() < 10)
    throw DataError("estimate_descent_rate: need at least 10 samples");
  const PointsMatrix projected = project_to_ils(track, frame);

  std::vector<double> gaps(static_cast<std::size_t>(track.size() - 1));
  for (int i = 0; i + 1 < track.size(); ++i) gaps[i] = track.time_s[i + 1] - track.time_s[i];
  std::nth_element(gaps.begin(), gaps.begin() + gaps.size() / 2, gaps.end());
  const double dt = gaps[gaps.size() / 2];

  Eigen::MatrixXd obs(track.size(), 1);
  obs.col(0) = projected.col(1);
  const double vel0 = (obs(1, 0) - obs(0, 0)) / dt;
  const KalmanParams initial = constant_velocity_params(dt, 0.1, 1.0, obs(0, 0), vel0);
  const KalmanEmResult em = kalman_em(obs, initial, em_iterations);
  return -em.smoothed.means.col(1);
}

// ---------------------------------------------------------------------------
// Scalers: standard (zero mean, unit deviation) on the two cross-section
// axes, min-max onto [-1, 1] for the longitudinal coordinate.
// ---------------------------------------------------------------------------

struct StandardScaler {
  double mean = 0.0;
  double std = 1.0;
  double apply(double v) const { return (v - mean) / std; }
  double invert(double v) const { return v * std + mean; }
};

struct MinMaxScaler {
  double min = -1.0;
  double max = 1.0;
  double apply(double v) const { return 2.0 * (v - min) / (max - min) - 1.0; }
  double invert(double v) const { return min + (v + 1.0) * (max - min) / 2.0; }
};

struct Scalers {
  StandardScaler x;
  StandardScaler y;
  MinMaxScaler l;
};

inline Scalers fit_scalers(const PointsMatrix &xyl) {
  if (xyl.rows() < 2) throw DataError("fit_scalers: need at least two points");
  if (xyl.cols() != 3) throw DataError("fit_scalers: expected x, y, l columns");
  Scalers s;
  for (int c = 0; c < 2; ++c) {
    const double mean = xyl.col(c).mean();
    const double var = (xyl.col(c).array() - mean).square().mean();
    if (!(var > 0.0))
      throw DataError("fit_scalers: column " + std::to_string(c) + " has zero spread");
    (c == 0 ? s.x : s.y) = {mean, std::sqrt(var)};
  }
  s.l.min = xyl.col(2).minCoeff();
  s.l.max = xyl.col(2).maxCoeff();
  if (!(s.l.max > s.l.min)) throw DataError("fit_scalers: longitudinal column has zero spread");
  return s;
}

inline PointsMatrix apply_scalers(const Scalers &s, const PointsMatrix &xyl) {
  PointsMatrix out(xyl.rows(), 3);
  for (Eigen::Index i = 0; i < xyl.rows(); ++i) {
    out(i, 0) = s.x.apply(xyl(i, 0));
    out(i, 1) = s.y.apply(xyl(i, 1));
    out(i, 2) = s.l.apply(xyl(i, 2));
  }
  return out;
}

inline PointsMatrix invert_scalers(const Scalers &s, const PointsMatrix &xyl) {
  PointsMatrix out(xyl.rows(), 3);
  for (Eigen::Index i = 0; i < xyl.rows(); ++i) {
    out(i, 0) = s.x.invert(xyl(i, 0));
    out(i, 1) = s.y.invert(xyl(i, 1));
    out(i, 2) = s.l.invert(xyl(i, 2));
  }
  return out;
}

inline Json scalers_to_json(const Scalers &s) {
  Json j;
  j["x"] = Json{{"mean", s.x.mean}, {"std", s.x.std}};
  j["y"] = Json{{"mean", s.y.mean}, {"std", s.y.std}};
  j["l"] = Json{{"min", s.l.min}, {"max", s.l.max}};
  return j;
}

inline Scalers scalers_from_json(const Json &j) {
  for (const char *key : {"x", "y", "l"}) detail::require_field(j, key, "scalers");
  Scalers s;
  s.x = {j["x"].at("mean").get<double>(), j["x"].at("std").get<double>()};
  s.y = {j["y"].at("mean").get<double>(), j["y"].at("std").get<double>()};
  s.l = {j["l"].at("min").get<double>(), j["l"].at("max").get<double>()};
  if (!(s.x.std > 0.0) || !(s.y.std > 0.0))
    throw DataError("scalers: standard deviations must be positive");
  if (!(s.l.max > s.l.min)) throw DataError("scalers: min-max range must be non-empty");
  return s;
}

// ---------------------------------------------------------------------------
// Pole: two independent 1-D sparse GP regressions x_p(l), y_p(l) fitted in
// scaled coordinates.
// ---------------------------------------------------------------------------

struct PoleModel {
  SvgpState<RbfKernel<1>> x_state;
  SvgpState<RbfKernel<1>> y_state;
};

inline PoleModel fit_pole(const PointsMatrix &xyl_scaled, const TrainConfig &config) {
  if (xyl_scaled.rows() < 2) throw DataError("fit_pole: need at least two points");
  if (xyl_scaled.cols() != 3) throw DataError("fit_pole: expected x, y, l columns");
  PointsMatrix L(xyl_scaled.rows(), 1);
  L.col(0) = xyl_scaled.col(2);

  PoleModel pole;
  TrainConfig cfg = config;
  cfg.noise_kind = NoiseKind::kConstant;
  for (int axis = 0; axis < 2; ++axis) {
    const Eigen::VectorXd targets = xyl_scaled.col(axis);
    cfg.seed = axis == 0 ? config.seed : mix_u64(config.seed, 0x706f6c65u);  // decorrelate axes
    auto st = init_state(L, targets, RbfKernel<1>(), cfg);
    auto out = train(L, targets, nullptr, st, cfg);
    (axis == 0 ? pole.x_state : pole.y_state) = std::move(out.state);
  }
  return pole;
}

inline void predict_pole(const PoleModel &pole, const Eigen::VectorXd &l, Eigen::VectorXd *x_p,
                         Eigen::VectorXd *y_p) {
  PointsMatrix L(l.size(), 1);
  L.col(0) = l;
  *x_p = predict(pole.x_state, L, false).mean;
  *y_p = predict(pole.y_state, L, false).mean;
}

inline Json pole_to_json(const PoleModel &pole) {
  Json j;
  j["format"] = "tgp-pole";
  j["version"] = 1;
  j["x"] = svgp_to_json(pole.x_state);
  j["y"] = svgp_to_json(pole.y_state);
  return j;
}

inline PoleModel pole_from_json(const Json &j) {
  detail::require_field(j, "format", "pole");
  if (j["format"] != "tgp-pole") throw DataError("pole document: wrong format tag");
  for (const char *key : {"x", "y"}) detail::require_field(j, key, "pole");
  PoleModel pole;
  pole.x_state = svgp_from_json<RbfKernel<1>>(j["x"]);
  pole.y_state = svgp_from_json<RbfKernel<1>>(j["y"]);
  return pole;
}

// ---------------------------------------------------------------------------
// Cylindrical transform.  Canonical diametral form: theta in [0, pi),
// rho signed; the antipodal representation (theta + pi, -rho) denotes the
// same Cartesian point.
// ---------------------------------------------------------------------------

struct CylindricalCloud {
  PointsMatrix points;          // rows (rho, theta, l)
  std::vector<int> source_ids;  // optional per-point trajectory identifier
};

inline CylindricalCloud to_cylindrical(const PointsMatrix &xyl_scaled, const PoleModel &pole,
                                       std::vector<int> source_ids = {}) {
  if (xyl_scaled.cols() != 3) throw DataError("to_cylindrical: expected x, y, l columns");
  if (!source_ids.empty() && static_cast<Eigen::Index>(source_ids.size()) != xyl_scaled.rows())
    throw DataError("to_cylindrical: source id count disagrees with the points");
  Eigen::VectorXd x_p, y_p;
  predict_pole(pole, xyl_scaled.col(2), &x_p, &y_p);

  CylindricalCloud cloud;
  cloud.points.resize(xyl_scaled.rows(), 3);
  cloud.source_ids = std::move(source_ids);
  for (Eigen::Index i = 0; i < xyl_scaled.rows(); ++i) {
    const double dx = xyl_scaled(i, 0) - x_p[i];
    const double dy = xyl_scaled(i, 1) - y_p[i];
    const double r = std::hypot(dx, dy);
    double theta = r > 0.0 ? std::atan2(dy, dx) : 0.0;  // wrap_angle range [-pi, pi)
    double rho = r;
    if (theta < 0.0) {  // fold onto [0, pi) and carry the sign on rho
      theta += kPi;
      rho = -r;
    }
    if (theta >= kPi) theta -= kPi;  // atan2 can return exactly pi
    cloud.points(i, 0) = rho;
    cloud.points(i, 1) = theta;
    cloud.points(i, 2) = xyl_scaled(i, 2);
  }
  return cloud;
}

inline PointsMatrix from_cylindrical(const CylindricalCloud &cloud, const PoleModel &pole) {
  Eigen::VectorXd x_p, y_p;
  predict_pole(pole, cloud.points.col(2), &x_p, &y_p);
  PointsMatrix out(cloud.points.rows(), 3);
  for (Eigen::Index i = 0; i < cloud.points.rows(); ++i) {
    const double rho = cloud.points(i, 0), theta = cloud.points(i, 1);
    out(i, 0) = x_p[i] + rho * std::cos(theta);
    out(i, 1) = y_p[i] + rho * std::sin(theta);
    out(i, 2) = cloud.points(i, 2);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic traffic generator.  AR(1) lateral and vertical deviations
// around the nominal approach, dispersion scaled up for heavy traffic.
// ---------------------------------------------------------------------------

struct TrackSimConfig {
  int n_tracks = 20;
  double dt_s = 1.0;
  double mean_ground_speed = 70.0;   // m/s
  double speed_spread = 4.0;         // per-track draw
  double heavy_fraction = 0.3;
  double medium_dispersion = 25.0;   // metres, AR(1) stationary deviation
  double heavy_dispersion = 40.0;
  double ar_coefficient = 0.95;
  std::uint64_t seed = 0;
};

inline constexpr int kStreamTracks = 31;

inline std::vector<RawTrack> simulate_tracks(const IlsGeometry &geom,
                                             const TrackSimConfig &cfg) {
  geom.validate();
  if (cfg.n_tracks < 1) throw DataError("simulate_tracks: need at least one track");
  const IlsFrame frame = build_ils_frame(geom);
  const double total = (wgs84_to_ecef(geom.threshold) - frame.origin).norm();
  const double slope = std::tan(geom.glide_slope_deg * kPi / 180.0);
  const CounterRng base(cfg.seed, kStreamTracks);

  std::vector<RawTrack> tracks(static_cast<std::size_t>(cfg.n_tracks));
  for (int k = 0; k < cfg.n_tracks; ++k) {
    CounterRng rng = base.substream(static_cast<std::uint64_t>(k));
    RawTrack &tr = tracks[static_cast<std::size_t>(k)];
    char name[16];
    std::snprintf(name, sizeof(name), "SIM%04d", k);
    tr.callsign = name;
    tr.wake = rng.uniform() <= cfg.heavy_fraction ? WakeCategory::kHeavy
                                                  : WakeCategory::kMedium;
    const double dispersion =
        tr.wake == WakeCategory::kHeavy ? cfg.heavy_dispersion : cfg.medium_dispersion;
    const double gs = cfg.mean_ground_speed + cfg.speed_spread * rng.normal();
    const int steps = static_cast<int>(std::floor(total / (gs * cfg.dt_s)));
    const int n = std::max(steps, 12);

    tr.time_s.resize(n);
    tr.lat_deg.resize(n);
    tr.lon_deg.resize(n);
    tr.alt_m.resize(n);
    tr.gs_mps.resize(n);

    const double stationary = dispersion;
    const double innovation = stationary * std::sqrt(1.0 - cfg.ar_coefficient * cfg.ar_coefficient);
    double lat_dev = stationary * rng.normal();
    double vert_dev = 0.5 * stationary * rng.normal();
    for (int t = 0; t < n; ++t) {
      const double along = std::min(gs * cfg.dt_s * t, total);
      // Height above the approach-fix level decays linearly to the threshold.
      const double height = slope * (total - along);
      const Eigen::Vector3d pos = frame.origin + frame.a * along + frame.c * lat_dev +
                                  frame.d * (height + vert_dev);
      const Wgs84Point w = ecef_to_wgs84(pos);
      tr.time_s[t] = cfg.dt_s * t;
      tr.lat_deg[t] = w.lat_deg;
      tr.lon_deg[t] = w.lon_deg;
      tr.alt_m[t] = w.alt_m;
      tr.gs_mps[t] = gs;
      lat_dev = cfg.ar_coefficient * lat_dev + innovation * rng.normal();
      vert_dev = cfg.ar_coefficient * vert_dev + 0.5 * innovation * rng.normal();
    }
  }
  return tracks;
}

// ---------------------------------------------------------------------------
// Track file formats: CSV and JSON-lines with identical fields.  Rows are
// grouped into tracks by callsign; timestamps must strictly increase
// within each track.
// ---------------------------------------------------------------------------

inline constexpr const char *kTrackCsvHeader =
    "time_s,lat_deg,lon_deg,alt_m,gs_mps,callsign,wake";

inline void write_tracks_csv(const std::string &path, const std::vector<RawTrack> &tracks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << kTrackCsvHeader << '\n';
  for (const auto &tr : tracks)
    for (int i = 0; i < tr.size(); ++i)
      out << format_double(tr.time_s[i]) << ',' << format_double(tr.lat_deg[i]) << ','
          << format_double(tr.lon_deg[i]) << ',' << format_double(tr.alt_m[i]) << ','
          << format_double(tr.gs_mps[i]) << ',' << tr.callsign << ',' << wake_name(tr.wake)
          << '\n';
  if (!out) throw DataError("failed writing " + path);
}

namespace detail {

struct TrackRow {
  double time, lat, lon, alt, gs;
  std::string callsign;
  WakeCategory wake;
};

inline std::vector<RawTrack> group_track_rows(const std::vector<TrackRow> &rows,
                                              const std::string &path) {
  std::vector<RawTrack> tracks;
  std::map<std::string, std::size_t> index;
  for (const auto &row : rows) {
    auto it = index.find(row.callsign);
    if (it == index.end()) {
      it = index.emplace(row.callsign, tracks.size()).first;
      RawTrack tr;
      tr.callsign = row.callsign;
      tr.wake = row.wake;
      tracks.push_back(std::move(tr));
    }
    RawTrack &tr = tracks[it->second];
    const auto n = tr.time_s.size();
    tr.time_s.conservativeResize(n + 1);
    tr.lat_deg.conservativeResize(n + 1);
    tr.lon_deg.conservativeResize(n + 1);
    tr.alt_m.conservativeResize(n + 1);
    tr.gs_mps.conservativeResize(n + 1);
    tr.time_s[n] = row.time;
    tr.lat_deg[n] = row.lat;
    tr.lon_deg[n] = row.lon;
    tr.alt_m[n] = row.alt;
    tr.gs_mps[n] = row.gs;
  }
  for (auto &tr : tracks) {
    try {
      tr.validate();
    } catch (const DataError &e) {
      throw DataError(path + ": " + e.what());
    }
  }
  return tracks;
}

inline double parse_double_cell(const std::string &cell, const std::string &path, int line_no,
                                const char *field) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception &) {
    throw DataError(path + ":" + std::to_string(line_no) + ": bad " + field + " value \"" +
                    cell + "\"");
  }
}

}  // namespace detail

inline std::vector<RawTrack> read_tracks_csv(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path + " for reading");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kTrackCsvHeader)
    throw DataError(path + ":1: expected header \"" + kTrackCsvHeader + "\"");

  std::vector<detail::TrackRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream split(line);
    std::string cell;
    while (std::getline(split, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7)
      throw DataError(path + ":" + std::to_string(line_no) + ": expected 7 columns, found " +
                      std::to_string(cells.size()));
    detail::TrackRow row;
    row.time = detail::parse_double_cell(cells[0], path, line_no, "time_s");
    row.lat = detail::parse_double_cell(cells[1], path, line_no, "lat_deg");
    row.lon = detail::parse_double_cell(cells[2], path, line_no, "lon_deg");
    row.alt = detail::parse_double_cell(cells[3], path, line_no, "alt_m");
    row.gs = detail::parse_double_cell(cells[4], path, line_no, "gs_mps");
    row.callsign = cells[5];
    if (row.callsign.empty())
      throw DataError(path + ":" + std::to_string(line_no) + ": empty callsign");
    try {
      row.wake = wake_from_name(cells[6]);
    } catch (const DataError &e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    rows.push_back(std::move(row));
  }
  return detail::group_track_rows(rows, path);
}

inline void write_tracks_jsonl(const std::string &path, const std::vector<RawTrack> &tracks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  for (const auto &tr : tracks)
    for (int i = 0; i < tr.size(); ++i) {
      Json j;
      j["time_s"] = tr.time_s[i];
      j["lat_deg"] = tr.lat_deg[i];
      j["lon_deg"] = tr.lon_deg[i];
      j["alt_m"] = tr.alt_m[i];
      j["gs_mps"] = tr.gs_mps[i];
      j["callsign"] = tr.callsign;
      j["wake"] = wake_name(tr.wake);
      out << j.dump() << '\n';
    }
  if (!out) throw DataError("failed writing " + path);
}

inline std::vector<RawTrack> read_tracks_jsonl(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path + " for reading");
  std::vector<detail::TrackRow> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const nlohmann::json::parse_error &e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    detail::TrackRow row;
    try {
      row.time = j.at("time_s").get<double>();
      row.lat = j.at("lat_deg").get<double>();
      row.lon = j.at("lon_deg").get<double>();
      row.alt = j.at("alt_m").get<double>();
      row.gs = j.at("gs_mps").get<double>();
      row.callsign = j.at("callsign").get<std::string>();
      row.wake = wake_from_name(j.at("wake").get<std::string>());
    } catch (const nlohmann::json::exception &e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (row.callsign.empty())
      throw DataError(path + ":" + std::to_string(line_no) + ": empty callsign");
    rows.push_back(std::move(row));
  }
  return detail::group_track_rows(rows, path);
}

// ---------------------------------------------------------------------------
// Geometry configuration block.
// ---------------------------------------------------------------------------

inline Json ils_geometry_to_json(const IlsGeometry &geom) {
  Json j;
  j["faf"] = Json{{"lat_deg", geom.faf.lat_deg},
                  {"lon_deg", geom.faf.lon_deg},
                  {"alt_m", geom.faf.alt_m}};
  j["threshold"] = Json{{"lat_deg", geom.threshold.lat_deg},
                        {"lon_deg", geom.threshold.lon_deg},
                        {"alt_m", geom.threshold.alt_m}};
  j["glide_slope_deg"] = geom.glide_slope_deg;
  j["track_deg"] = geom.track_deg;
  return j;
}

inline IlsGeometry ils_geometry_from_json(const Json &j) {
  for (const char *key : {"faf", "threshold"}) detail::require_field(j, key, "geometry");
  IlsGeometry geom;
  auto read_point = [](const Json &p, const char *name) {
    for (const char *key : {"lat_deg", "lon_deg", "alt_m"}) detail::require_field(p, key, name);
    return Wgs84Point{p["lat_deg"].get<double>(), p["lon_deg"].get<double>(),
                      p["alt_m"].get<double>()};
  };
  geom.faf = read_point(j["faf"], "geometry faf");
  geom.threshold = read_point(j["threshold"], "geometry threshold");
  geom.glide_slope_deg = j.value("glide_slope_deg", 3.0);
  geom.track_deg = j.value("track_deg", 0.0);
  geom.validate();
  return geom;
}

}  // namespace tgp
