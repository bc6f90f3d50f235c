#pragma once

// Curvature statistics: mini-block partitions of each layer, exact and
// outer-product mini-block Fisher matrices, the dense empirical FIM used as
// an oracle on tiny nets, KFAC factors, and block-mass measurement.

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "mbf/linalg.hpp"
#include "mbf/nn.hpp"

namespace mbf::fisher {

using linalg::Matrix;
using linalg::Vector;

class FisherError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class BlockKind {
  conv_kernel,  // one (j, i) kernel, |Delta| parameters
  conv_bias,    // all I biases of a conv layer, preconditioned diagonally
  fc_neuron,    // incoming weights (+ bias) of one output neuron
  fc_shared,    // fc_neuron index set whose statistics are shared layer-wide
};

const char* to_string(BlockKind k);

struct Block {
  BlockKind kind;
  std::string label;
  std::vector<std::size_t> indices;  // flat indices within the layer
};

struct LayerPartition {
  std::vector<Block> blocks;
  /// True when every dense block shares one spatially averaged statistic.
  bool shared() const { return !blocks.empty() && blocks.front().kind == BlockKind::fc_shared; }
};

using NetworkPartition = std::vector<LayerPartition>;

/// Dense layers with O*(I+1)^2 above this use one shared (I+1)x(I+1) block.
inline constexpr std::size_t kDefaultSharedThreshold = std::size_t{1} << 24;

/// Dense layers: O neuron blocks of size I(+1). Conv layers: I*J kernel
/// blocks of size |Delta| plus one diagonal bias block of size I.
/// `spatial_avg` turns dense neuron blocks into fc_shared blocks.
LayerPartition partition_layer(const nn::LayerSpec& layer, bool spatial_avg);

/// Applies partition_layer to every layer, using fc_shared for dense layers
/// whose per-neuron storage O*(I+1)^2 exceeds `shared_threshold`.
NetworkPartition partition_network(const nn::NetworkSpec& spec,
                                   std::size_t shared_threshold = kDefaultSharedThreshold);

/// Throws FisherError unless the blocks are disjoint and cover [0, param_count).
void check_coverage(const LayerPartition& part, std::size_t param_count);

/// Columns `indices` of `rows`.
Matrix gather_columns(const Matrix& rows, const std::vector<std::size_t>& indices);
Vector gather(std::span<const double> v, const std::vector<std::size_t>& indices);
void scatter(std::span<double> v, const std::vector<std::size_t>& indices, std::span<const double> values);

/// (1/n) J_b^T J_b from per-sample gradient rows restricted to one block.
Matrix exact_miniblock_fisher(const Matrix& jacobian_rows);

/// rows^T rows, mirrored so the result is exactly symmetric.
Matrix gram(const Matrix& rows);

/// g g^T for the mini-batch gradient slice of one block.
Matrix approx_miniblock_fisher(std::span<const double> batch_grad_slice);

/// (1/O) sum_j g_j g_j^T over the rows of an O x (I+1) matrix.
Matrix spatial_average_fc(const Matrix& per_neuron_grads);

/// beta*old + (1-beta)*new
Matrix update_stats_ema(const Matrix& old_stats, const Matrix& new_stats, double beta);
void update_stats_ema_in_place(Matrix& stats, const Matrix& new_stats, double beta);

inline constexpr std::size_t kEmpiricalFimMaxParams = 3000;

/// F = (1/n) J^T J over all parameters; refuses p > 3000.
Matrix empirical_fim(const Matrix& per_sample_grads);

struct BlockMass {
  double in_block_mean_abs = 0.0;
  double off_block_mean_abs = 0.0;
  double ratio = 0.0;  // +inf when off_block_mean_abs == 0
};

/// Mean |M_ij| over index pairs inside a common block vs all other pairs.
BlockMass block_mass_ratio(const Matrix& m, const LayerPartition& partition);

struct KfacFactors {
  Matrix a;      // (I+1)x(I+1) input second moment
  Matrix gamma;  // O x O pre-activation-derivative second moment
};

/// A = (1/n) sum a_i a_i^T (a already bias-augmented), Gamma = (1/n) sum dh_i dh_i^T.
KfacFactors kfac_factors(const Matrix& inputs, const Matrix& preact_grads);

/// Appends a column of ones.
Matrix augment_with_ones(const Matrix& a);

}  // namespace mbf::fisher
