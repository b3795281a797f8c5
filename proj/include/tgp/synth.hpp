// Synthetic tunnel structures: samplers and ground-truth densities.
//
// Three families of cross-section laws over the normalized longitudinal
// coordinate l in [-1, 1]:
//   S1 - Gaussian cross-section with a curved pole (2l^2, 2l^2) and
//        principal deviations (2 - l, 2 + l);
//   S2 - uniform density inside a five-petalled rose whose size and
//        rotation vary with l;
//   S3 - equal two-component Gaussian mixture with diagonals (9, 1) and
//        (1, 9), fixed over l.
// Sampling is seed-deterministic: sample i draws only from RNG substream i,
// so any index range can be generated independently and in parallel.
#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tgp/common.hpp"
#include "tgp/kernels.hpp"

namespace tgp {

enum class Structure { kS1, kS2, kS3 };

inline const char *structure_name(Structure s) {
  switch (s) {
    case Structure::kS1: return "S1";
    case Structure::kS2: return "S2";
    case Structure::kS3: return "S3";
  }
  throw Error("structure_name: invalid enum value");
}

inline Structure structure_from_name(const std::string &name) {
  if (name == "S1") return Structure::kS1;
  if (name == "S2") return Structure::kS2;
  if (name == "S3") return Structure::kS3;
  throw DataError("unknown structure \"" + name + "\" (expected S1, S2, or S3)");
}

// ---------------------------------------------------------------------------
// Ground-truth geometry and densities.
// ---------------------------------------------------------------------------

namespace synth_detail {

inline double normal_pdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(kTwoPi));
}

}  // namespace synth_detail

// S1 pole position (same in both coordinates) and principal deviations.
inline double s1_pole(double l) { return 2.0 * l * l; }
inline double s1_sigma_a(double l) { return 2.0 - l; }
inline double s1_sigma_b(double l) { return 2.0 + l; }

// S2 rose boundary radius and enclosed area.
inline double rose_scale(double l) { return 2.0 - std::abs(l); }
inline double rose_radius(double theta, double l) {
  const double phase = kTwoPi * l / 5.0;  // phi = 2 pi l / 5, shifted by pi phi / 5
  return rose_scale(l) * (3.0 + std::cos(5.0 * (theta + kPi * phase / 5.0)));
}
// Area = 1/2 int r^2 dtheta = 1/2 a^2 int (3 + cos 5 psi)^2 dpsi
//      = 1/2 a^2 (9 * 2pi + pi) = 9.5 pi a^2.
inline double rose_area(double l) {
  const double a = rose_scale(l);
  return 9.5 * kPi * a * a;
}

inline constexpr double kS3SigmaA = 3.0;
inline constexpr double kS3SigmaB = 1.0;

// Cross-section density of a structure at longitudinal position l.  The
// longitudinal coordinate itself is uniform on [-1, 1] and not included.
inline double true_pdf(Structure s, double l, double x, double y) {
  if (l < -1.0 || l > 1.0) throw DataError("true_pdf: l must lie in [-1, 1]");
  switch (s) {
    case Structure::kS1: {
      const double p = s1_pole(l);
      return synth_detail::normal_pdf(x, p, s1_sigma_a(l)) *
             synth_detail::normal_pdf(y, p, s1_sigma_b(l));
    }
    case Structure::kS2: {
      const double rho = std::hypot(x, y);
      if (rho > rose_radius(std::atan2(y, x), l)) return 0.0;
      return 1.0 / rose_area(l);
    }
    case Structure::kS3: {
      const double a = synth_detail::normal_pdf(x, 0.0, kS3SigmaA) *
                       synth_detail::normal_pdf(y, 0.0, kS3SigmaB);
      const double b = synth_detail::normal_pdf(x, 0.0, kS3SigmaB) *
                       synth_detail::normal_pdf(y, 0.0, kS3SigmaA);
      return 0.5 * a + 0.5 * b;
    }
  }
  throw Error("true_pdf: invalid enum value");
}

// ---------------------------------------------------------------------------
// Sampling.  Points come back as rows of (x, y, l).
// ---------------------------------------------------------------------------

inline constexpr int kStreamSynth = 21;

namespace synth_detail {

inline void sample_one(Structure s, CounterRng &rng, double *x, double *y, double *l) {
  *l = rng.uniform(-1.0, 1.0);
  switch (s) {
    case Structure::kS1: {
      const double p = s1_pole(*l);
      *x = p + s1_sigma_a(*l) * rng.normal();
      *y = p + s1_sigma_b(*l) * rng.normal();
      return;
    }
    case Structure::kS2: {
      // Uniform over the enclosed area: draw uniformly from the bounding
      // disk (radius 4a covers 3 + cos <= 4) and reject outside the rose.
      const double rmax = 4.0 * rose_scale(*l);
      for (int attempt = 0; attempt < 10000; ++attempt) {
        const double theta = rng.uniform(-kPi, kPi);
        const double rho = rmax * std::sqrt(rng.uniform());
        if (rho <= rose_radius(theta, *l)) {
          *x = rho * std::cos(theta);
          *y = rho * std::sin(theta);
          return;
        }
      }
      // Acceptance probability is ~0.59; thousands of consecutive misses
      // can only mean a broken RNG.
      throw NumericalError("rose sampler failed to accept a point");
    }
    case Structure::kS3: {
      const bool first = rng.uniform() <= 0.5;
      const double sx = first ? kS3SigmaA : kS3SigmaB;
      const double sy = first ? kS3SigmaB : kS3SigmaA;
      *x = sx * rng.normal();
      *y = sy * rng.normal();
      return;
    }
  }
  throw Error("sample_one: invalid enum value");
}

}  // namespace synth_detail

inline PointsMatrix sample_structure(Structure s, int n, std::uint64_t seed, int threads = 0) {
  if (n < 1) throw DataError("sample_structure: n must be at least 1");
  PointsMatrix out(n, 3);
  const CounterRng base(seed, kStreamSynth);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
    CounterRng sub = base.substream(static_cast<std::uint64_t>(i));
    double x, y, l;
    synth_detail::sample_one(s, sub, &x, &y, &l);
    const auto row = static_cast<Eigen::Index>(i);
    out(row, 0) = x;
    out(row, 1) = y;
    out(row, 2) = l;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Cloud persistence: CSV and JSON-lines, columns/keys x, y, l.  Both forms
// print shortest round-trip decimals so write -> read is lossless.
// ---------------------------------------------------------------------------

inline void write_cloud_csv(const std::string &path, const PointsMatrix &cloud) {
  if (cloud.cols() != 3) throw DataError("write_cloud_csv: cloud must have x, y, l columns");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << "x,y,l\n";
  for (Eigen::Index i = 0; i < cloud.rows(); ++i)
    out << format_double(cloud(i, 0)) << ',' << format_double(cloud(i, 1)) << ','
        << format_double(cloud(i, 2)) << '\n';
  if (!out) throw DataError("failed writing " + path);
}

inline PointsMatrix read_cloud_csv(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path + " for reading");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "x,y,l") throw DataError(path + ":1: expected header \"x,y,l\"");
  std::vector<double> vals;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    int got = 0;
    while (std::getline(row, cell, ',')) {
      try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
        vals.push_back(v);
      } catch (const std::exception &) {
        throw DataError(path + ":" + std::to_string(line_no) + ": bad number \"" + cell + "\"");
      }
      ++got;
    }
    if (got != 3)
      throw DataError(path + ":" + std::to_string(line_no) + ": expected 3 columns, found " +
                      std::to_string(got));
  }
  PointsMatrix cloud(static_cast<Eigen::Index>(vals.size() / 3), 3);
  for (Eigen::Index i = 0; i < cloud.rows(); ++i)
    for (int c = 0; c < 3; ++c) cloud(i, c) = vals[static_cast<std::size_t>(3 * i + c)];
  return cloud;
}

}  // namespace tgp
