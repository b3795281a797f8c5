// JSON persistence for sparse GP states.
//
// The on-disk document is versioned and self-describing: it records the
// kernel family with its fixed shape parameters, the trainable
// hyper-parameters, inducing locations, the variational mean, and the
// materialized Cholesky factor as a row-major lower triangle.  Loading
// validates structure eagerly and reports problems as DataError with the
// offending field named; a document written by save and read back
// reproduces predictions to strictly tighter than 1e-12.
#pragma once

#include <Eigen/Dense>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tgp/common.hpp"
#include "tgp/kernels.hpp"
#include "tgp/svgp.hpp"

namespace tgp {

using Json = nlohmann::ordered_json;

namespace detail {

inline void require_field(const Json &j, const char *key, const char *where) {
  if (!j.is_object() || !j.contains(key))
    throw DataError(std::string("model document: missing \"") + key + "\" in " + where);
}

inline Json vector_to_json(const Eigen::VectorXd &v) {
  Json arr = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

inline Eigen::VectorXd vector_from_json(const Json &j, const char *where) {
  if (!j.is_array()) throw DataError(std::string("model document: ") + where + " must be an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number())
      throw DataError(std::string("model document: ") + where + " holds a non-numeric entry");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

inline Json points_to_json(const PointsMatrix &m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index jj = 0; jj < m.cols(); ++jj) row.push_back(m(i, jj));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline PointsMatrix points_from_json(const Json &j, int expect_cols, const char *where) {
  if (!j.is_array()) throw DataError(std::string("model document: ") + where + " must be an array");
  const auto rows = static_cast<Eigen::Index>(j.size());
  PointsMatrix m(rows, expect_cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Json &row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<int>(row.size()) != expect_cols)
      throw DataError(std::string("model document: ") + where + " row " + std::to_string(i) +
                      " must hold " + std::to_string(expect_cols) + " coordinates");
    for (int c = 0; c < expect_cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

// Row-major lower triangle (diagonal included) of a square matrix.
inline Json lower_triangle_to_json(const Eigen::MatrixXd &L) {
  Json arr = Json::array();
  for (Eigen::Index i = 0; i < L.rows(); ++i)
    for (Eigen::Index jj = 0; jj <= i; ++jj) arr.push_back(L(i, jj));
  return arr;
}

inline Eigen::MatrixXd lower_triangle_from_json(const Json &j, Eigen::Index m,
                                                const char *where) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != m * (m + 1) / 2)
    throw DataError(std::string("model document: ") + where + " must hold " +
                    std::to_string(m * (m + 1) / 2) + " lower-triangle entries");
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(m, m);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index jj = 0; jj <= i; ++jj) L(i, jj) = j[k++].get<double>();
  return L;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Kernel codecs.  Each kernel family writes a type tag plus its fixed shape
// parameters; trainable hyper-parameters travel as one log-space array.
// Loading checks the tag so a document cannot silently be decoded into the
// wrong family.
// ---------------------------------------------------------------------------

template <class K>
struct KernelCodec;

template <int Dim>
struct KernelCodec<RbfKernel<Dim>> {
  static Json to_json(const RbfKernel<Dim> &k) {
    Json j;
    j["type"] = "rbf";
    j["dim"] = Dim;
    j["hypers"] = detail::vector_to_json(k.hypers());
    return j;
  }
  static RbfKernel<Dim> from_json(const Json &j) {
    detail::require_field(j, "type", "kernel");
    if (j["type"] != "rbf" || j.value("dim", -1) != Dim)
      throw DataError("model document: kernel is not an rbf kernel of the expected dimension");
    detail::require_field(j, "hypers", "kernel");
    RbfKernel<Dim> k;
    const Eigen::VectorXd h = detail::vector_from_json(j["hypers"], "kernel hypers");
    if (h.size() != k.num_hypers())
      throw DataError("model document: rbf kernel hyper count mismatch");
    k.set_hypers(h);
    return k;
  }
};

template <>
struct KernelCodec<TunnelKernel> {
  static Json to_json(const TunnelKernel &k) {
    Json j;
    j["type"] = "tunnel";
    j["support"] = k.support();
    j["exponent"] = k.tau();
    j["hypers"] = detail::vector_to_json(k.hypers());
    return j;
  }
  static TunnelKernel from_json(const Json &j) {
    detail::require_field(j, "type", "kernel");
    if (j["type"] != "tunnel") throw DataError("model document: kernel is not a tunnel kernel");
    detail::require_field(j, "support", "kernel");
    detail::require_field(j, "exponent", "kernel");
    detail::require_field(j, "hypers", "kernel");
    TunnelKernel k(j["support"].get<double>(), j["exponent"].get<double>(), 1.0, 1.0, 1.0);
    const Eigen::VectorXd h = detail::vector_from_json(j["hypers"], "kernel hypers");
    if (h.size() != k.num_hypers())
      throw DataError("model document: tunnel kernel hyper count mismatch");
    k.set_hypers(h);
    return k;
  }
};

template <>
struct KernelCodec<ParamKernel> {
  static Json to_json(const ParamKernel &k) {
    Json j;
    j["type"] = "param";
    j["support"] = k.support();
    j["exponent"] = k.tau();
    j["hypers"] = detail::vector_to_json(k.hypers());
    return j;
  }
  static ParamKernel from_json(const Json &j) {
    detail::require_field(j, "type", "kernel");
    if (j["type"] != "param") throw DataError("model document: kernel is not a param kernel");
    detail::require_field(j, "support", "kernel");
    detail::require_field(j, "exponent", "kernel");
    detail::require_field(j, "hypers", "kernel");
    ParamKernel k(j["support"].get<double>(), j["exponent"].get<double>(), 1.0, 1.0, 1.0, 1.0,
                  1.0);
    const Eigen::VectorXd h = detail::vector_from_json(j["hypers"], "kernel hypers");
    if (h.size() != k.num_hypers())
      throw DataError("model document: param kernel hyper count mismatch");
    k.set_hypers(h);
    return k;
  }
};

template <class Base, int Sign>
struct KernelCodec<AntipodalKernel<Base, Sign>> {
  static Json to_json(const AntipodalKernel<Base, Sign> &k) {
    Json j;
    j["type"] = "antipodal";
    j["sign"] = Sign;
    j["base"] = KernelCodec<Base>::to_json(k.base());
    return j;
  }
  static AntipodalKernel<Base, Sign> from_json(const Json &j) {
    detail::require_field(j, "type", "kernel");
    if (j["type"] != "antipodal")
      throw DataError("model document: kernel is not an antipodal kernel");
    detail::require_field(j, "sign", "kernel");
    if (j["sign"].get<int>() != Sign)
      throw DataError("model document: antipodal kernel sign mismatch");
    detail::require_field(j, "base", "kernel");
    return AntipodalKernel<Base, Sign>(KernelCodec<Base>::from_json(j["base"]));
  }
};

// ---------------------------------------------------------------------------
// Sparse GP state document.
// ---------------------------------------------------------------------------

inline constexpr const char *kSvgpFormatTag = "tgp-svgp";
inline constexpr int kSvgpFormatVersion = 1;

template <class K, class NK>
Json svgp_to_json(const SvgpState<K, NK> &st) {
  Json j;
  j["format"] = kSvgpFormatTag;
  j["version"] = kSvgpFormatVersion;
  j["kernel"] = KernelCodec<K>::to_json(st.kernel);
  j["inducing"] = detail::points_to_json(st.Z);
  j["mean"] = detail::vector_to_json(st.m);
  j["chol_lower"] = detail::lower_triangle_to_json(materialize_cholesky(st.L_raw));
  j["jitter_rel"] = st.jitter_rel;
  Json noise;
  if (st.noise_kind == NoiseKind::kConstant) {
    noise["kind"] = "constant";
    noise["log_precision"] = st.log_beta;
  } else {
    if (!st.latent.has_value())
      throw DataError("svgp_to_json: heteroscedastic state without a latent noise process");
    noise["kind"] = "heteroscedastic";
    noise["offset"] = st.latent->offset;
    noise["kernel"] = KernelCodec<NK>::to_json(st.latent->kernel);
    noise["inducing"] = detail::points_to_json(st.latent->Z);
    noise["mean"] = detail::vector_to_json(st.latent->m);
    noise["chol_lower"] = detail::lower_triangle_to_json(materialize_cholesky(st.latent->L_raw));
  }
  j["noise"] = std::move(noise);
  return j;
}

template <class K, class NK = K>
SvgpState<K, NK> svgp_from_json(const Json &j) {
  detail::require_field(j, "format", "root");
  if (j["format"] != kSvgpFormatTag)
    throw DataError("model document: format tag is not \"" + std::string(kSvgpFormatTag) + "\"");
  detail::require_field(j, "version", "root");
  if (!j["version"].is_number_integer() || j["version"].get<int>() != kSvgpFormatVersion)
    throw DataError("model document: unsupported version " + j["version"].dump());
  for (const char *key : {"kernel", "inducing", "mean", "chol_lower", "jitter_rel", "noise"})
    detail::require_field(j, key, "root");

  SvgpState<K, NK> st;
  st.kernel = KernelCodec<K>::from_json(j["kernel"]);
  st.Z = detail::points_from_json(j["inducing"], K::kDim, "inducing");
  st.m = detail::vector_from_json(j["mean"], "mean");
  if (st.m.size() != st.Z.rows())
    throw DataError("model document: mean length disagrees with the inducing count");
  st.L_raw =
      raw_from_cholesky(detail::lower_triangle_from_json(j["chol_lower"], st.Z.rows(), "chol_lower"));
  st.jitter_rel = j["jitter_rel"].get<double>();

  const Json &noise = j["noise"];
  detail::require_field(noise, "kind", "noise");
  if (noise["kind"] == "constant") {
    detail::require_field(noise, "log_precision", "noise");
    st.noise_kind = NoiseKind::kConstant;
    st.log_beta = noise["log_precision"].get<double>();
  } else if (noise["kind"] == "heteroscedastic") {
    for (const char *key : {"offset", "kernel", "inducing", "mean", "chol_lower"})
      detail::require_field(noise, key, "noise");
    st.noise_kind = NoiseKind::kHeteroscedastic;
    LatentNoiseGp<NK> lat;
    lat.offset = noise["offset"].get<double>();
    lat.kernel = KernelCodec<NK>::from_json(noise["kernel"]);
    lat.Z = detail::points_from_json(noise["inducing"], NK::kDim, "noise inducing");
    lat.m = detail::vector_from_json(noise["mean"], "noise mean");
    if (lat.m.size() != lat.Z.rows())
      throw DataError("model document: noise mean length disagrees with its inducing count");
    lat.L_raw = raw_from_cholesky(
        detail::lower_triangle_from_json(noise["chol_lower"], lat.Z.rows(), "noise chol_lower"));
    st.latent = std::move(lat);
  } else {
    throw DataError("model document: unknown noise kind " + noise["kind"].dump());
  }
  return st;
}

// ---------------------------------------------------------------------------
// File round trips.  Text output is canonical (two-space indentation plus a
// trailing newline) so identical states produce identical bytes.
// ---------------------------------------------------------------------------

inline std::string json_to_text(const Json &j) { return j.dump(2) + "\n"; }

inline Json json_from_text(const std::string &text) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error &e) {
    throw DataError(std::string("model document: ") + e.what());
  }
}

inline void save_json(const std::string &path, const Json &j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  const std::string text = json_to_text(j);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("failed writing " + path);
}

inline Json load_json(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path + " for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return json_from_text(buf.str());
}

}  // namespace tgp
