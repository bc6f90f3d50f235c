#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <random>

#include "mbf/harness.hpp"

#ifndef MBF_DATA_DIR
#define MBF_DATA_DIR "data"
#endif

namespace mbf::harness {

std::filesystem::path bundled_data_dir() {
  if (const char* env = std::getenv("MBF_DATA_DIR"); env && *env) return env;
  return MBF_DATA_DIR;
}

nn::Batch bundled_mnist(std::size_t limit) {
  const auto dir = bundled_data_dir() / "mnist2000";
  nn::Batch b = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  if (limit == 0 || limit >= b.size()) return b;
  std::vector<std::size_t> rows(limit);
  std::iota(rows.begin(), rows.end(), 0);
  return nn::slice_rows(b, rows);
}

SynthKind parse_synth_kind(const std::string& s) {
  if (s == "downscaled_digits_16x16") return SynthKind::downscaled_digits_16x16;
  if (s == "random_regression") return SynthKind::random_regression;
  if (s == "two_gaussians") return SynthKind::two_gaussians;
  throw ConfigError("unknown synthetic dataset '" + s + "'");
}

const char* to_string(SynthKind k) {
  switch (k) {
    case SynthKind::downscaled_digits_16x16: return "downscaled_digits_16x16";
    case SynthKind::random_regression: return "random_regression";
    case SynthKind::two_gaussians: return "two_gaussians";
  }
  return "?";
}

nn::Batch synth_dataset(SynthKind kind, std::size_t n, std::uint64_t seed, std::size_t dim) {
  if (n == 0) throw ConfigError("synth_dataset: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  switch (kind) {
    case SynthKind::downscaled_digits_16x16: {
      const nn::Batch all = bundled_mnist();
      if (n > all.size()) {
        throw ConfigError("downscaled_digits_16x16: only " + std::to_string(all.size()) + " bundled digits");
      }
      std::vector<std::size_t> rows(all.size());
      std::iota(rows.begin(), rows.end(), 0);
      std::shuffle(rows.begin(), rows.end(), rng);
      rows.resize(n);
      std::sort(rows.begin(), rows.end());
      nn::Batch picked = nn::slice_rows(all, rows);
      return {resize_area(picked.x, 28, 16), std::move(picked.y)};
    }
    case SynthKind::random_regression: {
      if (dim == 0) throw ConfigError("random_regression: dim must be >= 1");
      std::vector<double> w(dim);
      for (auto& v : w) v = normal(rng) / std::sqrt(static_cast<double>(dim));
      nn::Batch b{Matrix(n, dim), Matrix(n, 1)};
      for (std::size_t s = 0; s < n; ++s) {
        double z = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
          b.x(s, k) = normal(rng);
          z += b.x(s, k) * w[k];
        }
        b.y(s, 0) = std::tanh(z) + 0.1 * normal(rng);
      }
      return b;
    }
    case SynthKind::two_gaussians: {
      if (dim == 0) throw ConfigError("two_gaussians: dim must be >= 1");
      std::vector<double> dir(dim);
      double norm = 0.0;
      for (auto& v : dir) {
        v = normal(rng);
        norm += v * v;
      }
      norm = std::sqrt(norm);
      nn::Batch b{Matrix(n, dim), Matrix(n, 2)};
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t cls = s % 2;
        const double sign = cls == 0 ? -1.5 : 1.5;
        for (std::size_t k = 0; k < dim; ++k) b.x(s, k) = sign * dir[k] / norm + normal(rng);
        b.y(s, cls) = 1.0;
      }
      return b;
    }
  }
  throw ConfigError("unknown synthetic dataset");
}

nn::Batch load_dataset(const DatasetConfig& d, std::uint64_t seed) {
  nn::Batch b;
  if (d.source == "bundled_mnist") {
    b = bundled_mnist(d.n);
  } else if (d.source == "idx") {
    b = load_idx(d.images, d.labels);
    if (d.n > 0 && d.n < b.size()) {
      std::vector<std::size_t> rows(d.n);
      std::iota(rows.begin(), rows.end(), 0);
      b = nn::slice_rows(b, rows);
    }
  } else if (d.source == "synthetic") {
    b = synth_dataset(parse_synth_kind(d.synth_kind), d.n, seed, d.dim);
  } else {
    throw ConfigError("unknown dataset source '" + d.source + "'");
  }
  if (d.targets == "inputs") {
    b.y = b.x;
  } else if (d.targets != "labels") {
    throw ConfigError("data.targets must be 'labels' or 'inputs'");
  }
  return b;
}

}  // namespace mbf::harness
