#pragma once

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "json.hpp"
#include "mbf/harness.hpp"
#include "mbf/linalg.hpp"
#include "mbf/nn.hpp"

namespace testsupport {

using mbf::linalg::Matrix;
using mbf::linalg::Vector;
using nlohmann::json;

inline const json& oracle() {
  static const json j = [] {
    std::ifstream in(std::string(MBF_FIXTURE_DIR) + "/oracle.json");
    if (!in) throw std::runtime_error("missing oracle fixture");
    return json::parse(in);
  }();
  return j;
}

inline Matrix to_matrix(const json& j) {
  const std::size_t r = j.size(), c = r ? j[0].size() : 0;
  Matrix m(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t k = 0; k < c; ++k) m(i, k) = j[i][k].get<double>();
  return m;
}

inline Vector to_vector(const json& j) { return j.get<Vector>(); }

inline mbf::nn::Params to_params(const json& j) {
  mbf::nn::Params p;
  for (const auto& l : j) p.layers.push_back({l.at("weight").get<Vector>(), l.at("bias").get<Vector>()});
  return p;
}

inline double max_abs_diff(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double rel_frobenius(const Matrix& a, const Matrix& ref) {
  return mbf::linalg::frobenius_norm(a - ref) / std::max(1e-300, mbf::linalg::frobenius_norm(ref));
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(r, c);
  for (auto& v : m.values()) v = nd(rng);
  return m;
}

inline Matrix random_spd(std::size_t d, std::mt19937_64& rng, double shift = 0.1) {
  const Matrix a = random_matrix(d, d + 2, rng);
  Matrix g = mbf::linalg::matmul(a, a, false, true);
  for (std::size_t i = 0; i < d; ++i) {
    g(i, i) += shift;
    for (std::size_t j = 0; j < i; ++j) g(i, j) = g(j, i);
  }
  return g;
}

inline Vector random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Vector v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

}  // namespace testsupport
