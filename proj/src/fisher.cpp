#include "mbf/fisher.hpp"

#include <algorithm>
#include <cmath>

namespace mbf::fisher {

namespace {

// Gram products are mirrored so the result is symmetric bit-for-bit.
Matrix scaled_gram(const Matrix& rows, double scale) {
  Matrix f = linalg::matmul(rows, rows, true, false);
  const std::size_t n = f.rows();
  for (std::size_t i = 0; i < n; ++i) {
    f(i, i) *= scale;
    for (std::size_t j = i + 1; j < n; ++j) {
      f(i, j) *= scale;
      f(j, i) = f(i, j);
    }
  }
  return f;
}

}  // namespace

const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::conv_kernel: return "conv_kernel";
    case BlockKind::conv_bias: return "conv_bias";
    case BlockKind::fc_neuron: return "fc_neuron";
    case BlockKind::fc_shared: return "fc_shared";
  }
  return "?";
}

LayerPartition partition_layer(const nn::LayerSpec& layer, bool spatial_avg) {
  LayerPartition part;
  if (layer.kind == nn::LayerKind::dense) {
    const std::size_t I = layer.in_dim, O = layer.out_dim;
    const BlockKind kind = spatial_avg ? BlockKind::fc_shared : BlockKind::fc_neuron;
    part.blocks.reserve(O);
    for (std::size_t j = 0; j < O; ++j) {
      Block b{kind, "neuron(" + std::to_string(j) + ")", {}};
      b.indices.reserve(I + 1);
      for (std::size_t i = 0; i < I; ++i) b.indices.push_back(i * O + j);
      if (layer.has_bias) b.indices.push_back(I * O + j);
      part.blocks.push_back(std::move(b));
    }
  } else {
    const std::size_t J = layer.in_channels, I = layer.out_channels, K = layer.kernel_size();
    part.blocks.reserve(I * J + 1);
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t i = 0; i < I; ++i) {
        Block b{BlockKind::conv_kernel, "kernel(" + std::to_string(j) + "," + std::to_string(i) + ")", {}};
        b.indices.reserve(K);
        for (std::size_t d = 0; d < K; ++d) b.indices.push_back((j * I + i) * K + d);
        part.blocks.push_back(std::move(b));
      }
    if (layer.has_bias) {
      Block b{BlockKind::conv_bias, "bias", {}};
      for (std::size_t i = 0; i < I; ++i) b.indices.push_back(layer.weight_count() + i);
      part.blocks.push_back(std::move(b));
    }
  }
  return part;
}

NetworkPartition partition_network(const nn::NetworkSpec& spec, std::size_t shared_threshold) {
  NetworkPartition out;
  for (const auto& L : spec.layers) {
    bool shared = false;
    if (L.kind == nn::LayerKind::dense) {
      const std::size_t side = L.in_dim + (L.has_bias ? 1 : 0);
      shared = L.out_dim * side * side > shared_threshold;
    }
    out.push_back(partition_layer(L, shared));
  }
  return out;
}

void check_coverage(const LayerPartition& part, std::size_t param_count) {
  std::vector<char> seen(param_count, 0);
  for (const auto& b : part.blocks)
    for (std::size_t idx : b.indices) {
      if (idx >= param_count) throw FisherError("partition index " + std::to_string(idx) + " out of range");
      if (seen[idx]) throw FisherError("partition blocks overlap at index " + std::to_string(idx));
      seen[idx] = 1;
    }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw FisherError("partition does not cover every index");
}

Matrix gather_columns(const Matrix& rows, const std::vector<std::size_t>& indices) {
  Matrix out(rows.rows(), indices.size());
  for (std::size_t s = 0; s < rows.rows(); ++s) {
    const auto r = rows.row(s);
    for (std::size_t c = 0; c < indices.size(); ++c) out(s, c) = r[indices[c]];
  }
  return out;
}

Vector gather(std::span<const double> v, const std::vector<std::size_t>& indices) {
  Vector out(indices.size());
  for (std::size_t c = 0; c < indices.size(); ++c) out[c] = v[indices[c]];
  return out;
}

void scatter(std::span<double> v, const std::vector<std::size_t>& indices, std::span<const double> values) {
  for (std::size_t c = 0; c < indices.size(); ++c) v[indices[c]] = values[c];
}

Matrix exact_miniblock_fisher(const Matrix& jacobian_rows) {
  if (jacobian_rows.rows() == 0) throw FisherError("exact_miniblock_fisher: no samples");
  return scaled_gram(jacobian_rows, 1.0 / static_cast<double>(jacobian_rows.rows()));
}

Matrix gram(const Matrix& rows) { return scaled_gram(rows, 1.0); }

Matrix approx_miniblock_fisher(std::span<const double> g) { return linalg::outer(g, g); }

Matrix spatial_average_fc(const Matrix& per_neuron_grads) {
  if (per_neuron_grads.rows() == 0) throw FisherError("spatial_average_fc: O must be >= 1");
  return scaled_gram(per_neuron_grads, 1.0 / static_cast<double>(per_neuron_grads.rows()));
}

void update_stats_ema_in_place(Matrix& stats, const Matrix& new_stats, double beta) {
  if (stats.rows() != new_stats.rows() || stats.cols() != new_stats.cols()) {
    throw linalg::ShapeError("update_stats_ema: shape mismatch");
  }
  double* s = stats.data();
  const double* n = new_stats.data();
  for (std::size_t k = 0; k < stats.size(); ++k) s[k] = beta * s[k] + (1.0 - beta) * n[k];
}

Matrix update_stats_ema(const Matrix& old_stats, const Matrix& new_stats, double beta) {
  Matrix out = old_stats;
  update_stats_ema_in_place(out, new_stats, beta);
  return out;
}

Matrix empirical_fim(const Matrix& per_sample_grads) {
  if (per_sample_grads.cols() > kEmpiricalFimMaxParams) {
    throw FisherError("empirical_fim: " + std::to_string(per_sample_grads.cols()) +
                      " parameters exceed the dense limit of " + std::to_string(kEmpiricalFimMaxParams) +
                      "; use the mini-block statistics instead");
  }
  return exact_miniblock_fisher(per_sample_grads);
}

BlockMass block_mass_ratio(const Matrix& m, const LayerPartition& partition) {
  if (!m.square()) throw FisherError("block_mass_ratio: matrix must be square");
  const std::size_t p = m.rows();
  try {
    check_coverage(partition, p);
  } catch (const FisherError& e) {
    throw FisherError(std::string("block_mass_ratio: partition does not match matrix: ") + e.what());
  }
  std::vector<std::size_t> owner(p);
  for (std::size_t b = 0; b < partition.blocks.size(); ++b)
    for (std::size_t idx : partition.blocks[b].indices) owner[idx] = b;

  double in_sum = 0.0, off_sum = 0.0;
  std::size_t in_count = 0, off_count = 0;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      const double v = std::abs(m(i, j));
      if (owner[i] == owner[j]) {
        in_sum += v;
        ++in_count;
      } else {
        off_sum += v;
        ++off_count;
      }
    }
  BlockMass r;
  r.in_block_mean_abs = in_count ? in_sum / static_cast<double>(in_count) : 0.0;
  r.off_block_mean_abs = off_count ? off_sum / static_cast<double>(off_count) : 0.0;
  r.ratio = r.off_block_mean_abs == 0.0 ? std::numeric_limits<double>::infinity()
                                        : r.in_block_mean_abs / r.off_block_mean_abs;
  return r;
}

KfacFactors kfac_factors(const Matrix& inputs, const Matrix& preact_grads) {
  if (inputs.rows() != preact_grads.rows()) throw FisherError("kfac_factors: sample counts differ");
  if (inputs.rows() == 0) throw FisherError("kfac_factors: no samples");
  return {exact_miniblock_fisher(inputs), exact_miniblock_fisher(preact_grads)};
}

Matrix augment_with_ones(const Matrix& a) {
  Matrix out(a.rows(), a.cols() + 1);
  for (std::size_t s = 0; s < a.rows(); ++s) {
    std::copy_n(a.row(s).begin(), a.cols(), out.row(s).begin());
    out(s, a.cols()) = 1.0;
  }
  return out;
}

}  // namespace mbf::fisher
