#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <numeric>

#include "doctest.h"
#include "mbf/fisher.hpp"
#include "support.hpp"

using namespace mbf;
using namespace mbf::fisher;
using namespace testsupport;
using linalg::matmul;
using linalg::max_abs_diff;

namespace {

std::vector<std::vector<std::size_t>> index_sets(const LayerPartition& p) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& b : p.blocks) out.push_back(b.indices);
  return out;
}

Matrix per_sample_rows(const std::string& name, std::size_t layer) {
  const auto& o = oracle()["nn"][name];
  const auto spec = harness::network_from_json(o["network"]);
  const auto params = to_params(o["params"]);
  const Matrix x = to_matrix(o["x"]), y = to_matrix(o["y"]);
  const auto fwd = nn::forward(params, spec, x);
  const auto loss = nn::loss_eval(spec.loss, fwd.outputs, y);
  return nn::per_sample_gradients(params, spec, fwd.tape, loss.output_grad * static_cast<double>(x.rows()))[layer];
}

}  // namespace

TEST_CASE("partition_layer examples") {
  SUBCASE("conv 1->32 with 5x5 kernels") {
    const auto p = partition_layer(nn::LayerSpec::conv2d(1, 32, 2, 28, 28, nn::Activation::relu), false);
    REQUIRE(p.blocks.size() == 33);
    for (std::size_t b = 0; b < 32; ++b) {
      CHECK(p.blocks[b].kind == BlockKind::conv_kernel);
      CHECK(p.blocks[b].indices.size() == 25);
    }
    CHECK(p.blocks[32].kind == BlockKind::conv_bias);
    CHECK(p.blocks[32].indices.size() == 32);
  }
  SUBCASE("dense 20->20") {
    const auto p = partition_layer(nn::LayerSpec::dense(20, 20, nn::Activation::tanh), false);
    REQUIRE(p.blocks.size() == 20);
    for (const auto& b : p.blocks) CHECK(b.indices.size() == 21);
    CHECK_FALSE(p.shared());
    CHECK(partition_layer(nn::LayerSpec::dense(20, 20, nn::Activation::tanh), true).shared());
  }
  SUBCASE("conv 3->2 with 3x3 kernels") {
    const auto p = partition_layer(nn::LayerSpec::conv2d(3, 2, 1, 4, 4, nn::Activation::relu), false);
    CHECK(p.blocks.size() == 7);
    CHECK(p.blocks.back().indices.size() == 2);
  }
  SUBCASE("spatial averaging leaves conv layers alone") {
    const auto L = nn::LayerSpec::conv2d(3, 2, 1, 4, 4, nn::Activation::relu);
    CHECK(index_sets(partition_layer(L, true)) == index_sets(partition_layer(L, false)));
  }
  SUBCASE("layout matches the numpy oracle") {
    const auto& o = oracle()["fisher"];
    CHECK(index_sets(partition_layer(nn::LayerSpec::conv2d(2, 3, 1, 4, 3, nn::Activation::relu), false)) ==
          o["conv_layer_blocks"].get<std::vector<std::vector<std::size_t>>>());
    CHECK(index_sets(partition_layer(nn::LayerSpec::dense(36, 2, nn::Activation::identity), false)) ==
          o["dense_layer_blocks"].get<std::vector<std::vector<std::size_t>>>());
  }
}

TEST_CASE("partitions cover every parameter exactly once") {
  for (bool bias : {true, false})
    for (std::size_t r = 0; r <= 2; ++r)
      for (bool avg : {true, false}) {
        const auto conv = nn::LayerSpec::conv2d(3, 4, r, 5, 6, nn::Activation::relu, bias);
        CHECK_NOTHROW(check_coverage(partition_layer(conv, avg), conv.param_count()));
        const auto dense = nn::LayerSpec::dense(7 + r, 5, nn::Activation::tanh, bias);
        CHECK_NOTHROW(check_coverage(partition_layer(dense, avg), dense.param_count()));
      }
  LayerPartition overlap{{{BlockKind::fc_neuron, "a", {0, 1}}, {BlockKind::fc_neuron, "b", {1, 2}}}};
  CHECK_THROWS_AS(check_coverage(overlap, 3), FisherError);
  LayerPartition gap{{{BlockKind::fc_neuron, "a", {0}}}};
  CHECK_THROWS_AS(check_coverage(gap, 2), FisherError);
}

TEST_CASE("partition_network switches large dense layers to a shared block") {
  const auto spec = nn::make_mlp({784, 1000, 10}, nn::Activation::relu, nn::Activation::identity,
                                 nn::LossKind::softmax_ce);
  const auto part = partition_network(spec);
  CHECK(part[0].shared());
  CHECK_FALSE(part[1].shared());
  CHECK_FALSE(partition_network(spec, std::size_t{1} << 40)[0].shared());
}

TEST_CASE("exact mini-block Fisher matches the dense empirical FIM") {
  const auto& o = oracle()["fisher"];
  const Matrix conv_rows = per_sample_rows("cnn_squared", 0);
  const Matrix dense_rows = per_sample_rows("cnn_squared", 1);
  const auto conv_blocks = o["conv_layer_blocks"].get<std::vector<std::vector<std::size_t>>>();
  const auto dense_blocks = o["dense_layer_blocks"].get<std::vector<std::vector<std::size_t>>>();

  SUBCASE("finite-difference numpy oracle") {
    for (std::size_t b = 0; b < conv_blocks.size(); ++b)
      CHECK(rel_frobenius(exact_miniblock_fisher(gather_columns(conv_rows, conv_blocks[b])),
                          to_matrix(o["conv_layer_exact_blocks"][b])) <= 1e-7);
    for (std::size_t b = 0; b < dense_blocks.size(); ++b)
      CHECK(rel_frobenius(exact_miniblock_fisher(gather_columns(dense_rows, dense_blocks[b])),
                          to_matrix(o["dense_layer_exact_blocks"][b])) <= 1e-7);
  }
  SUBCASE("principal sub-blocks of the dense empirical FIM") {
    const Matrix f = empirical_fim(nn::concat_columns(std::vector<Matrix>{conv_rows, dense_rows}));
    auto check_blocks = [&](const Matrix& rows, const auto& blocks, std::size_t off) {
      for (auto idx : blocks) {
        const Matrix sub = exact_miniblock_fisher(gather_columns(rows, idx));
        for (auto& i : idx) i += off;
        for (std::size_t a = 0; a < idx.size(); ++a)
          for (std::size_t c = 0; c < idx.size(); ++c) CHECK(std::abs(sub(a, c) - f(idx[a], idx[c])) <= 1e-10);
      }
    };
    check_blocks(conv_rows, conv_blocks, 0);
    check_blocks(dense_rows, dense_blocks, conv_rows.cols());
  }
}

TEST_CASE("exact_miniblock_fisher examples") {
  const Matrix g{{1, -2, 3}};
  CHECK(max_abs_diff(exact_miniblock_fisher(g), linalg::outer(Vector{1, -2, 3}, Vector{1, -2, 3})) == 0.0);
  std::mt19937_64 rng(5);
  const Matrix j = random_matrix(6, 4, rng);
  CHECK(max_abs_diff(exact_miniblock_fisher(j * 2.0), exact_miniblock_fisher(j) * 4.0) <= 1e-14);
  CHECK_THROWS_AS(exact_miniblock_fisher(Matrix(0, 3)), FisherError);
}

TEST_CASE("approx_miniblock_fisher examples") {
  CHECK(linalg::max_abs(approx_miniblock_fisher(Vector(4, 0.0))) == 0.0);
  std::mt19937_64 rng(6);
  const Vector g = random_vector(5, rng);
  CHECK(max_abs_diff(approx_miniblock_fisher(g), exact_miniblock_fisher(Matrix(1, 5, g))) == 0.0);
  CHECK(linalg::min_eigenvalue(approx_miniblock_fisher(g)) >= -1e-12);
}

TEST_CASE("spatial_average_fc examples") {
  const Vector g{0.5, -1, 2};
  Matrix same(4, 3);
  for (std::size_t r = 0; r < 4; ++r) std::copy(g.begin(), g.end(), same.row(r).begin());
  CHECK(max_abs_diff(spatial_average_fc(same), linalg::outer(g, g)) <= 1e-15);

  const auto& o = oracle()["fisher"];
  const Matrix in = to_matrix(o["spatial_average_input"]);
  const Matrix avg = spatial_average_fc(in);
  CHECK(max_abs_diff(avg, to_matrix(o["spatial_average"])) <= 1e-14);
  Matrix mean(in.cols(), in.cols());
  for (std::size_t r = 0; r < in.rows(); ++r) mean += approx_miniblock_fisher(in.row(r)) * (1.0 / in.rows());
  CHECK(max_abs_diff(avg, mean) <= 1e-14);

  std::mt19937_64 rng(7);
  const Matrix big = random_matrix(16, 9, rng);
  const Matrix s = spatial_average_fc(big);
  double expected = 0.0;
  for (double v : big.values()) expected += v * v / 16.0;
  CHECK(linalg::trace(s) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(linalg::min_eigenvalue(s) >= -1e-10);
  CHECK_THROWS_AS(spatial_average_fc(Matrix(0, 3)), FisherError);
}

TEST_CASE("update_stats_ema examples") {
  std::mt19937_64 rng(8);
  const Matrix old = random_spd(4, rng), fresh = random_spd(4, rng);
  CHECK(update_stats_ema(old, fresh, 0.0) == fresh);
  CHECK(update_stats_ema(old, fresh, 1.0) == old);
  Matrix s = old;
  double dist = linalg::frobenius_norm(s - fresh);
  for (int k = 0; k < 5; ++k) {
    s = update_stats_ema(s, fresh, 0.9);
    const double next = linalg::frobenius_norm(s - fresh);
    CHECK(next == doctest::Approx(0.9 * dist).epsilon(1e-10));
    dist = next;
  }
  CHECK_THROWS_AS(update_stats_ema(old, Matrix(3, 3), 0.5), linalg::ShapeError);
}

TEST_CASE("empirical_fim examples") {
  const Vector g{1, 2, -1};
  CHECK(max_abs_diff(empirical_fim(Matrix(1, 3, g)), linalg::outer(g, g)) == 0.0);
  std::mt19937_64 rng(9);
  const Matrix j = random_matrix(10, 30, rng);
  const Matrix f = empirical_fim(j);
  CHECK(f == f.transpose());
  double expected = 0.0;
  for (double v : j.values()) expected += v * v / 10.0;
  CHECK(std::abs(linalg::trace(f) - expected) <= 1e-10 * expected);
  CHECK(linalg::min_eigenvalue(f) >= -1e-10);
  CHECK_THROWS_AS(empirical_fim(Matrix(2, 3001)), FisherError);
}

TEST_CASE("block_mass_ratio examples") {
  const LayerPartition two{{{BlockKind::fc_neuron, "a", {0, 1}}, {BlockKind::fc_neuron, "b", {2, 3}}}};
  Matrix diag(4, 4);
  diag(0, 0) = 1, diag(0, 1) = 2, diag(1, 0) = 2, diag(1, 1) = 1, diag(2, 2) = 3, diag(3, 3) = 3;
  const BlockMass bd = block_mass_ratio(diag, two);
  CHECK(bd.off_block_mean_abs == 0.0);
  CHECK(std::isinf(bd.ratio));
  CHECK(block_mass_ratio(Matrix(4, 4, 1.0), two).ratio == 1.0);

  const auto& o = oracle()["fisher"];
  CHECK(block_mass_ratio(to_matrix(o["mass_matrix"]), two).ratio ==
        doctest::Approx(o["mass_ratio"].get<double>()).epsilon(1e-12));

  CHECK_THROWS_AS(block_mass_ratio(Matrix(5, 5), two), FisherError);
  CHECK_THROWS_AS(block_mass_ratio(Matrix(4, 3), two), FisherError);
}

TEST_CASE("block_mass_ratio is invariant under partition-respecting permutations") {
  std::mt19937_64 rng(10);
  const Matrix m = random_matrix(6, 6, rng);
  const LayerPartition part{{{BlockKind::fc_neuron, "a", {0, 1, 2}}, {BlockKind::fc_neuron, "b", {3, 4}},
                             {BlockKind::fc_neuron, "c", {5}}}};
  const std::vector<std::size_t> perm{4, 3, 5, 2, 0, 1};  // new index k holds old index perm[k]
  Matrix pm(6, 6);
  for (std::size_t a = 0; a < 6; ++a)
    for (std::size_t b = 0; b < 6; ++b) pm(a, b) = m(perm[a], perm[b]);
  const LayerPartition moved{{{BlockKind::fc_neuron, "b", {0, 1}}, {BlockKind::fc_neuron, "c", {2}},
                              {BlockKind::fc_neuron, "a", {3, 4, 5}}}};
  CHECK(block_mass_ratio(pm, moved).ratio == doctest::Approx(block_mass_ratio(m, part).ratio).epsilon(1e-14));
}

TEST_CASE("kfac_factors examples") {
  std::mt19937_64 rng(11);
  const Matrix a = augment_with_ones(random_matrix(5, 3, rng));
  const Matrix dh = random_matrix(5, 2, rng);
  const KfacFactors f = kfac_factors(a, dh);
  CHECK(f.a(3, 3) == 1.0);
  CHECK(linalg::min_eigenvalue(f.a) >= -1e-10);
  CHECK(linalg::max_abs(kfac_factors(a, Matrix(5, 2)).gamma) == 0.0);
  CHECK_THROWS_AS(kfac_factors(a, Matrix(4, 2)), FisherError);
}

TEST_CASE("kfac factors of one sample reproduce the dense-layer FIM block") {
  const auto spec = nn::make_mlp({3, 4, 2}, nn::Activation::tanh, nn::Activation::identity,
                                 nn::LossKind::squared_error);
  const auto params = nn::init_params(spec, 12);
  std::mt19937_64 rng(12);
  const Matrix x = random_matrix(1, 3, rng), y = random_matrix(1, 2, rng);
  const auto fwd = nn::forward(params, spec, x);
  const auto loss = nn::loss_eval(spec.loss, fwd.outputs, y);
  const auto dh = nn::preactivation_grads(params, spec, fwd.tape, loss.output_grad);
  const auto rows = nn::per_sample_gradients(params, spec, fwd.tape, loss.output_grad);
  for (std::size_t l = 0; l < 2; ++l) {
    const KfacFactors f = kfac_factors(augment_with_ones(fwd.tape.inputs[l]), dh[l]);
    CHECK(max_abs_diff(linalg::kron(f.a, f.gamma), empirical_fim(rows[l])) <= 1e-10);
  }
}
