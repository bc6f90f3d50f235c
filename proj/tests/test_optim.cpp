#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "mbf/optim.hpp"
#include "support.hpp"

using namespace mbf;
using namespace mbf::optim;
using namespace testsupport;
using linalg::matmul;

namespace {

const auto& opt_oracle() { return oracle()["optim"]; }

nn::NetworkSpec opt_network() { return harness::network_from_json(opt_oracle()["network"]); }

std::vector<nn::Gradients> opt_grads() {
  std::vector<nn::Gradients> out;
  for (const auto& g : opt_oracle()["grads"]) out.push_back(to_params(g));
  return out;
}

OptimizerConfig config_from(Method m, const json& c) {
  OptimizerConfig cfg = OptimizerConfig::defaults(m);
  cfg.lr = c.at("lr").get<double>();
  if (c.contains("damping")) cfg.damping = c["damping"].get<double>();
  cfg.weight_decay = c.at("weight_decay").get<double>();
  if (c.contains("stats_period")) cfg.stats_period = c["stats_period"].get<std::size_t>();
  if (c.contains("inverse_period")) cfg.inverse_period = c["inverse_period"].get<std::size_t>();
  return cfg;
}

double trajectory_error(Optimizer& opt, nn::Params params, const std::vector<nn::Gradients>& grads,
                        const json& trajectory) {
  double worst = 0.0;
  for (std::size_t k = 0; k < grads.size(); ++k) {
    StepInput in;
    in.grads = &grads[k];
    opt.step(params, in, opt.config().lr);
    const Vector expected = to_vector(trajectory[k]);
    worst = std::max(worst, max_abs_diff(params.flatten(), expected));
  }
  return worst;
}

Vector step_delta(Optimizer& opt, const nn::Params& params, const nn::Gradients& g, double lr) {
  nn::Params p = params;
  StepInput in;
  in.grads = &g;
  opt.step(p, in, lr);
  Vector d = p.flatten(), w = params.flatten();
  for (std::size_t k = 0; k < d.size(); ++k) d[k] -= w[k];
  return d;
}

double rel_diff(const Vector& a, const Vector& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    num += (a[k] - b[k]) * (a[k] - b[k]);
    den += b[k] * b[k];
  }
  return std::sqrt(num / den);
}

nn::Gradients random_grads(const nn::NetworkSpec& spec, std::mt19937_64& rng) {
  nn::Gradients g = nn::zeros_like(spec);
  Vector flat = random_vector(spec.param_count(), rng);
  g.assign(flat);
  return g;
}

}  // namespace

TEST_CASE("optimizers reproduce the numpy reference trajectories") {
  const auto spec = opt_network();
  const auto params = to_params(opt_oracle()["params"]);
  const auto grads = opt_grads();
  SUBCASE("sgdm") {
    const auto& c = opt_oracle()["sgdm"];
    SgdMomentum opt(config_from(Method::sgdm, c), spec);
    CHECK(trajectory_error(opt, params, grads, c["trajectory"]) <= 1e-12);
  }
  SUBCASE("adam") {
    const auto& c = opt_oracle()["adam"];
    Adam opt(config_from(Method::adam, c), spec);
    CHECK(trajectory_error(opt, params, grads, c["trajectory"]) <= 1e-12);
  }
  SUBCASE("mbf per-neuron blocks") {
    const auto& c = opt_oracle()["mbf"];
    MiniBlockFisher opt(config_from(Method::mbf, c), spec);
    CHECK(trajectory_error(opt, params, grads, c["trajectory"]) <= 1e-10);
  }
  SUBCASE("mbf with spatial averaging") {
    const auto& c = opt_oracle()["mbf_shared"];
    OptimizerConfig cfg = config_from(Method::mbf, c);
    cfg.shared_threshold = 0;
    MiniBlockFisher opt(cfg, spec);
    CHECK(opt.layers()[1].partition.shared());
    CHECK(trajectory_error(opt, params, grads, c["trajectory"]) <= 1e-10);
  }
  SUBCASE("shampoo") {
    const auto& c = opt_oracle()["shampoo"];
    Shampoo opt(config_from(Method::shampoo, c), spec);
    CHECK(trajectory_error(opt, params, grads, c["trajectory"]) <= 1e-8);
  }
}

TEST_CASE("kfac reproduces the numpy reference trajectory") {
  const auto& c = opt_oracle()["kfac"];
  const auto spec = harness::network_from_json(c["network"]);
  nn::Params params = to_params(c["params"]);
  Kfac opt(config_from(Method::kfac, c), spec);
  double worst = 0.0;
  for (std::size_t k = 0; k < c["stream"].size(); ++k) {
    const auto& s = c["stream"][k];
    const nn::Gradients g = to_params(s["grads"]);
    nn::Tape tape;
    std::vector<Matrix> dh;
    for (const auto& a : s["inputs"]) tape.inputs.push_back(to_matrix(a));
    for (const auto& d : s["preact_grads"]) dh.push_back(to_matrix(d));
    StepInput in{&g, &tape, &dh, nullptr};
    opt.step(params, in, opt.config().lr);
    worst = std::max(worst, max_abs_diff(params.flatten(), to_vector(c["trajectory"][k])));
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("sgdm examples") {
  const auto spec = nn::make_mlp({3, 2}, nn::Activation::identity, nn::Activation::identity,
                                 nn::LossKind::squared_error);
  std::mt19937_64 rng(1);
  const nn::Params p = nn::init_params(spec, 1);
  const nn::Gradients g = random_grads(spec, rng);
  SUBCASE("mu = 0 is plain SGD") {
    OptimizerConfig cfg = OptimizerConfig::defaults(Method::sgdm);
    cfg.momentum = 0.0;
    SgdMomentum opt(cfg, spec);
    const Vector d = step_delta(opt, p, g, 0.1);
    const Vector gf = g.flatten();
    for (std::size_t k = 0; k < d.size(); ++k) CHECK(d[k] == doctest::Approx(-0.1 * gf[k]).epsilon(1e-14));
  }
  SUBCASE("constant gradient accumulates a geometric sum") {
    SgdMomentum opt(OptimizerConfig::defaults(Method::sgdm), spec);
    nn::Params q = p;
    StepInput in;
    in.grads = &g;
    for (int k = 0; k < 7; ++k) opt.step(q, in, 0.1);
    const double factor = (1 - std::pow(0.9, 7)) / (1 - 0.9);
    const Vector m = opt.momentum().flatten(), gf = g.flatten();
    for (std::size_t k = 0; k < m.size(); ++k) CHECK(m[k] == doctest::Approx(factor * gf[k]).epsilon(1e-12));
  }
}

TEST_CASE("adam examples") {
  const auto spec = nn::make_mlp({3, 2}, nn::Activation::identity, nn::Activation::identity,
                                 nn::LossKind::squared_error);
  const nn::Params p = nn::init_params(spec, 2);
  const OptimizerConfig cfg = OptimizerConfig::defaults(Method::adam);
  CHECK(cfg.adam_beta1 == 0.9);
  CHECK(cfg.adam_beta2 == 0.999);
  CHECK(cfg.damping == 1e-8);
  SUBCASE("zero gradients leave parameters unchanged") {
    Adam opt(cfg, spec);
    const nn::Gradients zero = nn::zeros_like(spec);
    for (int k = 0; k < 3; ++k)
      for (double v : step_delta(opt, p, zero, 0.01)) CHECK(v == 0.0);
  }
  SUBCASE("first step is -lr * g / (|g| + eps)") {
    Adam opt(cfg, spec);
    std::mt19937_64 rng(3);
    const nn::Gradients g = random_grads(spec, rng);
    const Vector d = step_delta(opt, p, g, 0.01), gf = g.flatten();
    for (std::size_t k = 0; k < d.size(); ++k)
      CHECK(d[k] == doctest::Approx(-0.01 * gf[k] / (std::abs(gf[k]) + 1e-8)).epsilon(1e-10));
  }
}

TEST_CASE("mbf examples") {
  const auto spec = opt_network();
  const auto params = to_params(opt_oracle()["params"]);
  const auto grads = opt_grads();
  const OptimizerConfig defaults = OptimizerConfig::defaults(Method::mbf);
  CHECK(defaults.momentum == 0.9);
  CHECK(defaults.ema == 0.9);
  CHECK(defaults.damping == 0.003);

  SUBCASE("zero statistics give a damped identity preconditioner") {
    OptimizerConfig cfg = defaults;
    cfg.stats_period = 1000;
    cfg.inverse_period = 1000;
    MiniBlockFisher opt(cfg, spec);
    const Vector d = step_delta(opt, params, grads[0], 0.05), g = grads[0].flatten();
    for (std::size_t k = 0; k < d.size(); ++k) CHECK(d[k] == doctest::Approx(-(0.05 / 0.003) * g[k]).epsilon(1e-12));
  }
  SUBCASE("cached inverses equal damped_inverse at refresh iterations") {
    OptimizerConfig cfg = defaults;
    cfg.inverse_period = 2;
    MiniBlockFisher opt(cfg, spec);
    nn::Params p = params;
    for (std::size_t k = 0; k < 4; ++k) {
      StepInput in;
      in.grads = &grads[k];
      opt.step(p, in, 0.01);
      if (opt.iteration() % 2 == 0) {
        for (const auto& st : opt.layers()) {
          CHECK(st.refreshed_at == opt.iteration());
          for (std::size_t b = 0; b < st.stats.size(); ++b)
            CHECK(st.inverses[b] == linalg::damped_inverse(st.stats[b], cfg.damping));
          for (std::size_t i = 0; i < st.bias_stats.size(); ++i)
            CHECK(st.bias_inverse[i] == 1.0 / (st.bias_stats[i] + cfg.damping));
        }
      }
    }
  }
  SUBCASE("huge damping approaches gradient descent with rate lr / lambda") {
    OptimizerConfig cfg = defaults;
    cfg.damping = 1e6;
    cfg.inverse_period = 1;
    MiniBlockFisher opt(cfg, spec);
    const Vector d = step_delta(opt, params, grads[0], 0.05);
    Vector expected = grads[0].flatten();
    for (auto& v : expected) v *= -0.05 / 1e6;
    CHECK(rel_diff(d, expected) <= 1e-4);
  }
  SUBCASE("set_statistics validates shapes") {
    MiniBlockFisher opt(defaults, spec);
    CHECK_THROWS_AS(opt.set_statistics(0, {}), OptimError);
  }
}

TEST_CASE("generic mbf examples") {
  SUBCASE("single parameter is scalar natural gradient") {
    const nn::NetworkSpec spec{{nn::LayerSpec::dense(1, 1, nn::Activation::identity, false)},
                               nn::LossKind::squared_error};
    const auto part = fisher::partition_network(spec);
    const Matrix rows{{0.5}, {-2.0}, {1.5}};
    nn::Gradients g = nn::zeros_like(spec);
    g.layers[0].weight = {0.7};
    const double f = (0.25 + 4.0 + 2.25) / 3.0;
    const Vector d = generic_mbf_direction(spec, part, {rows}, g, 0.1);
    CHECK(d[0] == doctest::Approx(0.7 / (f + 0.1)).epsilon(1e-14));
    nn::Params p = nn::zeros_like(spec);
    generic_mbf_step(p, spec, part, {rows}, g, 0.2, 0.1);
    CHECK(p.layers[0].weight[0] == doctest::Approx(-0.2 * 0.7 / (f + 0.1)).epsilon(1e-14));
  }
  SUBCASE("huge damping gives gradient descent") {
    const auto spec = opt_network();
    std::mt19937_64 rng(4);
    std::vector<Matrix> rows;
    for (const auto& L : spec.layers) rows.push_back(random_matrix(5, L.param_count(), rng));
    const nn::Gradients g = random_grads(spec, rng);
    const Vector d = generic_mbf_direction(spec, fisher::partition_network(spec), rows, g, 1e8);
    Vector expected = g.flatten();
    for (auto& v : expected) v /= 1e8;
    CHECK(rel_diff(d, expected) <= 1e-6);
  }
  SUBCASE("scale covariance with zero damping") {
    const nn::NetworkSpec spec{{nn::LayerSpec::dense(3, 1, nn::Activation::identity)}, nn::LossKind::squared_error};
    const auto part = fisher::partition_network(spec);
    std::mt19937_64 rng(5);
    const Matrix rows = random_matrix(8, 4, rng);
    const nn::Gradients g = random_grads(spec, rng);
    const double c = -3.5;
    nn::Gradients gc = g;
    for (auto& v : gc.layers[0].weight) v *= c;
    for (auto& v : gc.layers[0].bias) v *= c;
    const Vector d = generic_mbf_direction(spec, part, {rows}, g, 0.0);
    const Vector dc = generic_mbf_direction(spec, part, {rows * c}, gc, 0.0);
    for (std::size_t k = 0; k < d.size(); ++k) CHECK(std::abs(dc[k] - d[k] / c) <= 1e-10 * std::max(1.0, std::abs(d[k])));
  }
  SUBCASE("singular block without damping names the block") {
    const nn::NetworkSpec spec{{nn::LayerSpec::dense(3, 1, nn::Activation::identity)}, nn::LossKind::squared_error};
    const Matrix rows(2, 4, 0.0);
    try {
      generic_mbf_direction(spec, fisher::partition_network(spec), {rows}, nn::zeros_like(spec), 0.0);
      FAIL("expected BlockInversionError");
    } catch (const BlockInversionError& e) {
      CHECK(std::string(e.what()).find("neuron(0)") != std::string::npos);
    }
  }
}

TEST_CASE("kfac examples") {
  const auto spec = nn::make_mlp({4, 3}, nn::Activation::identity, nn::Activation::identity,
                                 nn::LossKind::squared_error);
  const nn::Params params = nn::init_params(spec, 6);
  std::mt19937_64 rng(6);
  const nn::Gradients g = random_grads(spec, rng);
  OptimizerConfig cfg = OptimizerConfig::defaults(Method::kfac);
  cfg.stats_period = 1000;
  cfg.inverse_period = 1000;

  SUBCASE("identity factors") {
    Kfac opt(cfg, spec);
    opt.set_factors(0, {Matrix::identity(5), Matrix::identity(3)});
    const Vector d = step_delta(opt, params, g, 0.05), gf = g.flatten();
    const double scale = std::pow(1.0 + std::sqrt(cfg.damping), 2);
    REQUIRE(d.size() == gf.size());
    for (std::size_t k = 0; k < d.size(); ++k) CHECK(d[k] == doctest::Approx(-0.05 * gf[k] / scale).epsilon(1e-12));
  }
  SUBCASE("Kronecker solve matches the dense system") {
    Kfac opt(cfg, spec);
    const Matrix a = random_spd(5, rng), gamma = random_spd(3, rng);
    opt.set_factors(0, {a, gamma});
    const Vector d = step_delta(opt, params, g, 1.0);
    const double s = std::sqrt(cfg.damping);
    const Matrix dense = linalg::kron(a + Matrix::identity(5) * s, gamma + Matrix::identity(3) * s);
    const Vector expected = linalg::matvec(linalg::spd_inverse(dense), g.flatten());
    for (std::size_t k = 0; k < d.size(); ++k) CHECK(std::abs(d[k] + expected[k]) <= 1e-10 * std::max(1.0, std::abs(expected[k])));
  }
  SUBCASE("conv layers are rejected") {
    const nn::NetworkSpec conv{{nn::LayerSpec::conv2d(1, 2, 1, 4, 4, nn::Activation::relu)}, nn::LossKind::squared_error};
    CHECK_THROWS_AS(Kfac(cfg, conv), ConfigError);
    CHECK_THROWS_AS(make_optimizer(cfg, conv), ConfigError);
  }
  SUBCASE("missing tape is an error") {
    OptimizerConfig c2 = cfg;
    c2.stats_period = 1;
    Kfac opt(c2, spec);
    nn::Params p = params;
    StepInput in;
    in.grads = &g;
    CHECK_THROWS_AS(opt.step(p, in, 0.1), OptimError);
  }
}

TEST_CASE("shampoo examples") {
  const auto spec = nn::make_mlp({7, 5}, nn::Activation::identity, nn::Activation::identity,
                                 nn::LossKind::squared_error);
  const nn::Params params = nn::init_params(spec, 7);
  std::mt19937_64 rng(7);
  const nn::Gradients g = random_grads(spec, rng);
  OptimizerConfig cfg = OptimizerConfig::defaults(Method::shampoo);
  CHECK(cfg.damping == 0.01);
  cfg.stats_period = 1000;
  cfg.inverse_period = 1000;

  SUBCASE("zero statistics scale the gradient by eps^(-1/2)") {
    Shampoo opt(cfg, spec);
    const Vector d = step_delta(opt, params, g, 0.05), gf = g.flatten();
    for (std::size_t k = 0; k < d.size(); ++k) CHECK(d[k] == doctest::Approx(-0.05 * gf[k] / 0.1).epsilon(1e-9));
  }
  SUBCASE("direction matches an eigendecomposition root on 8x5 statistics") {
    Shampoo opt(cfg, spec);
    const Matrix s = random_matrix(8, 5, rng);
    const Matrix left = fisher::gram(s.transpose()), right = fisher::gram(s);
    opt.set_statistics(0, left, right);
    auto eig_root = [&](const Matrix& m) {
      const auto e = linalg::sym_eig(m);
      Vector d(e.eigenvalues.size());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::pow(e.eigenvalues[i] + cfg.damping, -0.25);
      return matmul(matmul(e.eigenvectors, Matrix::diagonal(d)), e.eigenvectors, false, true);
    };
    const Matrix gm = shampoo_matricize(spec.layers[0], g.layers[0]);
    const Matrix expected = matmul(matmul(eig_root(left), gm), eig_root(right));
    const Vector d = step_delta(opt, params, g, 1.0);
    nn::LayerParams got{Vector(35), Vector(5)};
    Vector neg = d;
    for (auto& v : neg) v = -v;
    nn::Params tmp = nn::zeros_like(spec);
    tmp.assign(neg);
    CHECK(rel_frobenius(shampoo_matricize(spec.layers[0], tmp.layers[0]), expected) <= 1e-7);
    CHECK(linalg::min_eigenvalue(opt.layers()[0].left) >= -1e-10);
  }
  SUBCASE("conv matricization round-trips") {
    const auto L = nn::LayerSpec::conv2d(2, 3, 1, 4, 4, nn::Activation::relu);
    nn::LayerParams v{random_vector(L.weight_count(), rng), random_vector(3, rng)};
    const Matrix m = shampoo_matricize(L, v);
    CHECK(m.rows() == 3);
    CHECK(m.cols() == 2 * 9 + 1);
    nn::LayerParams back{Vector(v.weight.size()), Vector(3)};
    shampoo_unmatricize(L, m, back);
    CHECK(back == v);
  }
}

TEST_CASE("identity-preconditioner degeneration and decoupled weight decay") {
  const auto spec = opt_network();
  const auto grads = opt_grads();
  const auto p1 = to_params(opt_oracle()["params"]);
  nn::Params p2 = p1;
  for (auto& L : p2.layers)
    for (auto& v : L.weight) v *= 3.0;
  for (Method m : {Method::mbf, Method::shampoo}) {
    OptimizerConfig cfg = OptimizerConfig::defaults(m);
    cfg.weight_decay = 0.0;
    auto a = make_optimizer(cfg, spec), b = make_optimizer(cfg, spec);
    for (std::size_t k = 0; k < 3; ++k) CHECK(max_abs_diff(step_delta(*a, p1, grads[k], 0.01), step_delta(*b, p2, grads[k], 0.01)) <= 1e-12);
  }
}

TEST_CASE("amortized inverses match per-step refreshes at multiples of the period") {
  const auto spec = opt_network();
  std::mt19937_64 rng(8);
  OptimizerConfig every = OptimizerConfig::defaults(Method::mbf);
  every.inverse_period = 1;
  OptimizerConfig amortized = every;
  amortized.inverse_period = 20;
  MiniBlockFisher a(every, spec), b(amortized, spec);
  nn::Params pa = nn::init_params(spec, 8), pb = pa;
  for (int k = 1; k <= 40; ++k) {
    const nn::Gradients g = random_grads(spec, rng);
    StepInput in;
    in.grads = &g;
    a.step(pa, in, 1e-3);
    b.step(pb, in, 1e-3);
    if (k % 20 == 0)
      for (std::size_t l = 0; l < spec.layers.size(); ++l) {
        CHECK(a.layers()[l].inverses == b.layers()[l].inverses);
        CHECK(a.layers()[l].bias_inverse == b.layers()[l].bias_inverse);
      }
  }
}

TEST_CASE("every optimizer produces finite steps") {
  const auto spec = nn::make_mlp({4, 5, 3}, nn::Activation::tanh, nn::Activation::identity,
                                 nn::LossKind::softmax_ce);
  std::mt19937_64 rng(9);
  const Matrix x = random_matrix(6, 4, rng);
  Matrix y(6, 3);
  for (std::size_t s = 0; s < 6; ++s) y(s, s % 3) = 1;
  for (Method m : {Method::sgdm, Method::adam, Method::mbf, Method::mbf_generic, Method::kfac, Method::shampoo}) {
    CAPTURE(to_string(m));
    auto opt = make_optimizer(OptimizerConfig::defaults(m), spec);
    nn::Params p = nn::init_params(spec, 9);
    for (int k = 0; k < 5; ++k) {
      const auto fwd = nn::forward(p, spec, x);
      const auto loss = nn::loss_eval(spec.loss, fwd.outputs, y);
      const nn::Gradients g = nn::backward(p, spec, fwd.tape, loss.output_grad);
      const Matrix per = loss.output_grad * 6.0;
      const auto dh = nn::preactivation_grads(p, spec, fwd.tape, per);
      const auto rows = nn::per_sample_gradients(p, spec, fwd.tape, per);
      StepInput in{&g, &fwd.tape, &dh, &rows};
      opt->step(p, in, 0.01);
    }
    CHECK(linalg::all_finite(p.flatten()));
  }
}

TEST_CASE("lr_schedule examples") {
  const LrSchedule s{0.5, 0.1, 10};
  CHECK(lr_schedule(s, 9) == 0.5);
  CHECK(lr_schedule(s, 10) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(lr_schedule(s, 21) == doctest::Approx(0.005).epsilon(1e-15));
  CHECK(lr_schedule({0.5, 0.1, 0}, 100) == 0.5);
}

TEST_CASE("config validation") {
  OptimizerConfig c = OptimizerConfig::defaults(Method::mbf);
  CHECK_NOTHROW(c.validate());
  auto bad = [&](auto mutate) {
    OptimizerConfig b = c;
    mutate(b);
    CHECK_THROWS_AS(b.validate(), ConfigError);
  };
  bad([](OptimizerConfig& b) { b.lr = 0; });
  bad([](OptimizerConfig& b) { b.damping = -1; });
  bad([](OptimizerConfig& b) { b.damping = 0; });
  bad([](OptimizerConfig& b) { b.momentum = 1.0; });
  bad([](OptimizerConfig& b) { b.stats_period = 0; });
  bad([](OptimizerConfig& b) { b.inverse_period = 0; });
  CHECK(parse_method("shampoo") == Method::shampoo);
  CHECK_THROWS_AS(parse_method("lbfgs"), ConfigError);
  CHECK(OptimizerConfig::defaults(Method::kfac).damping == 0.03);
}

TEST_CASE("step rejects mismatched gradients") {
  const auto spec = opt_network();
  SgdMomentum opt(OptimizerConfig::defaults(Method::sgdm), spec);
  nn::Params p = nn::zeros_like(spec);
  nn::Gradients g = nn::zeros_like(spec);
  g.layers[0].bias.pop_back();
  StepInput in;
  in.grads = &g;
  CHECK_THROWS_AS(opt.step(p, in, 0.1), OptimError);
  CHECK(opt.iteration() == 0);
}

TEST_CASE("statistics storage per layer") {
  const auto spec = opt_network();
  CHECK(MiniBlockFisher(OptimizerConfig::defaults(Method::mbf), spec).statistics_floats() ==
        std::vector<std::size_t>{2 * 2 * 81 + 2, 3 * 19 * 19});
  CHECK(SgdMomentum(OptimizerConfig::defaults(Method::sgdm), spec).statistics_floats() ==
        std::vector<std::size_t>{2 * 2 * 9 + 2, 18 * 3 + 3});
}
