// mbf: train, tune and inspect mini-block Fisher optimizers.

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mbf/convergence.hpp"
#include "mbf/harness.hpp"

namespace h = mbf::harness;
namespace cv = mbf::convergence;
namespace optim = mbf::optim;
namespace nn = mbf::nn;

namespace {

struct Overrides {
  std::string config;
  std::string preset;
  std::string method;
  double lr = NAN;
  double damping = NAN;
  double weight_decay = NAN;
  long epochs = -1;
  long batch_size = -1;
  long stats_period = -1;
  long inverse_period = -1;
  bool warm_start = false;
  std::string out;
};

void add_override_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "JSON experiment config");
  app->add_option("--preset", o.preset, "autoencoder | cnn");
  app->add_option("--method", o.method, "sgdm | adam | mbf | mbf_generic | kfac | shampoo");
  app->add_option("--lr", o.lr, "learning rate");
  app->add_option("--damping", o.damping, "lambda / epsilon");
  app->add_option("--weight-decay", o.weight_decay, "decoupled weight decay");
  app->add_option("--epochs", o.epochs);
  app->add_option("--batch-size", o.batch_size);
  app->add_option("--stats-period", o.stats_period, "T1");
  app->add_option("--inverse-period", o.inverse_period, "T2");
  app->add_flag("--warm-start", o.warm_start, "initialise curvature statistics with one data pass");
  app->add_option("--out", o.out, "output path");
}

h::ExperimentConfig resolve(const Overrides& o) {
  h::json j = h::json::object();
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw h::IoError("cannot open config " + o.config);
    try {
      j = h::json::parse(in, nullptr, true, true);
    } catch (const h::json::parse_error& e) {
      throw h::ConfigError(o.config + ": " + e.what());
    }
  }
  if (!o.preset.empty()) j["preset"] = o.preset;
  if (!o.method.empty()) j["optimizer"]["method"] = o.method;
  if (!std::isnan(o.lr)) j["optimizer"]["lr"] = o.lr;
  if (!std::isnan(o.damping)) j["optimizer"]["damping"] = o.damping;
  if (!std::isnan(o.weight_decay)) j["optimizer"]["weight_decay"] = o.weight_decay;
  if (o.stats_period >= 0) j["optimizer"]["stats_period"] = o.stats_period;
  if (o.inverse_period >= 0) j["optimizer"]["inverse_period"] = o.inverse_period;
  if (o.epochs >= 0) j["epochs"] = o.epochs;
  if (o.batch_size >= 0) j["batch_size"] = o.batch_size;
  if (o.warm_start) j["warm_start"] = true;
  if (!j.contains("network") && !j.contains("preset")) throw h::ConfigError("give --config or --preset");
  return h::config_from_json(j);
}

int cmd_train(const Overrides& o, std::uint64_t seed) {
  h::ExperimentConfig c = resolve(o);
  c.seed = seed;
  const auto rec = h::train(c);
  const std::string csv = h::run_record_csv(rec);
  const std::string out = !o.out.empty() ? o.out : (!c.output_dir.empty() ? c.output_dir + "/run.csv" : "");
  if (!out.empty()) h::write_text(out, csv);
  std::cout << csv;
  return rec.failed ? h::kExitRunFailure : h::kExitOk;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw h::ConfigError("bad number '" + item + "' in list");
    }
  }
  return out;
}

int cmd_grid(const Overrides& o, std::uint64_t seed, const std::string& lrs, const std::string& seconds,
             const std::string& axis_name, const std::string& criterion_name, bool bundled) {
  h::ExperimentConfig c = resolve(o);
  c.seed = seed;
  h::SecondAxis axis;
  if (axis_name == "damping") axis = h::SecondAxis::damping;
  else if (axis_name == "weight_decay") axis = h::SecondAxis::weight_decay;
  else throw h::ConfigError("--axis must be damping or weight_decay");
  h::Criterion crit;
  if (criterion_name == "train_loss") crit = h::Criterion::train_loss;
  else if (criterion_name == "val_acc") crit = h::Criterion::val_acc;
  else throw h::ConfigError("--criterion must be train_loss or val_acc");
  std::vector<double> lr_grid, second_grid;
  if (bundled) {
    const auto g = h::mbf_autoencoder_grid();
    lr_grid = g.lrs;
    second_grid = g.seconds;
    axis = g.axis;
  }
  if (!lrs.empty()) lr_grid = parse_list(lrs);
  if (!seconds.empty()) second_grid = parse_list(seconds);
  const auto data = h::load_dataset(c.data, seed);
  try {
    const auto result = h::grid_search(c, data, lr_grid, second_grid, axis, crit);
    const std::string csv = h::grid_table_csv(result, axis);
    if (!o.out.empty()) h::write_text(o.out, csv);
    std::cout << csv;
    return h::kExitOk;
  } catch (const h::ExhaustiveFailureError& e) {
    h::GridResult partial;
    partial.table = e.table();
    std::cout << h::grid_table_csv(partial, axis);
    throw;
  }
}

int cmd_heatmap(const std::string& network, std::size_t epochs, std::size_t n, double damping, long layer,
                std::uint64_t seed, const std::string& out) {
  h::FimHeatmapOptions opt;
  opt.seed = seed;
  opt.damping = damping;
  opt.pretrain_epochs = epochs;
  if (network == "mlp") {
    opt.network = h::digits_mlp();
    opt.layer = layer >= 0 ? static_cast<std::size_t>(layer) : h::kDigitsMlpMiddleLayer;
  } else if (network == "conv") {
    opt.network.loss = nn::LossKind::softmax_ce;
    opt.network.layers = {nn::LayerSpec::conv2d(1, 32, 2, 16, 16, nn::Activation::relu),
                          nn::LayerSpec::dense(32 * 256, 10, nn::Activation::identity)};
    opt.layer = layer >= 0 ? static_cast<std::size_t>(layer) : 0;
    opt.drop_bias_block = true;
  } else {
    throw h::ConfigError("--network must be mlp or conv");
  }
  const auto data = h::synth_dataset(h::SynthKind::downscaled_digits_16x16, n, seed);
  const auto r = h::fim_heatmap_experiment(opt, data);
  h::export_heatmap(r.inverse_fim, r.partition, out);
  std::cout << "layer " << opt.layer << ": " << r.inverse_fim.rows() << "x" << r.inverse_fim.cols() << ", "
            << r.partition.blocks.size() << " blocks\n"
            << "loss " << r.initial_loss << " -> " << r.final_loss << "\n"
            << "in-block mean |M| " << r.mass.in_block_mean_abs << ", off-block " << r.mass.off_block_mean_abs
            << ", ratio " << r.mass.ratio << "\n"
            << "wrote " << out << " and " << out << ".blocks\n";
  return h::kExitOk;
}

int cmd_converge(std::uint64_t seed, std::size_t n, std::size_t dim, std::size_t hidden, std::size_t iterations,
                 double eta_cap, const std::string& out) {
  const auto spec = nn::make_mlp({dim, hidden, 1}, nn::Activation::tanh, nn::Activation::identity,
                                 nn::LossKind::squared_error);
  const auto data = h::synth_dataset(h::SynthKind::random_regression, n, seed, dim);
  const auto params = nn::init_params(spec, seed);
  const auto m = cv::assumption_metrics(spec, params, data.x);
  std::cout << "lambda0 = " << m.lambda0 << ", K = " << m.K << ", n = " << n << "\n";
  if (m.degenerate) {
    std::cerr << "warning: " << m.warning << "\n";
    return h::kExitRunFailure;
  }
  const auto s = cv::suggest_damping_and_lr(m.lambda0, n, m.K);
  const double eta = std::min(s.lr, eta_cap);
  std::cout << "suggested lambda = " << s.damping << ", eta_lambda = " << s.lr << ", using eta = " << eta << "\n";
  const auto rep = cv::run_exact_mbf(spec, params, data, s.damping, eta, iterations);
  if (!out.empty()) h::write_text(out, cv::report_to_text(rep));
  std::cout << "r0 = " << rep.residuals.front() << ", r_final = " << rep.residuals.back() << "\n"
            << "in hypothesis: " << (rep.in_hypothesis ? "yes" : "no") << ", bound: "
            << (rep.bound.pass ? "holds" : "violated at k = " + std::to_string(*rep.bound.first_violation)) << "\n";
  if (!rep.in_hypothesis) return h::kExitOk;
  return rep.bound.pass ? h::kExitOk : h::kExitRunFailure;
}

int cmd_storage(const Overrides& o) {
  const h::ExperimentConfig c = resolve(o);
  const auto audit = h::storage_audit(c.network, c.optimizer);
  const std::string csv = h::storage_audit_csv(audit);
  if (!o.out.empty()) h::write_text(o.out, csv);
  std::cout << csv;
  return audit.all_match() ? h::kExitOk : h::kExitRunFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mini-block Fisher optimizer toolkit"};
  app.require_subcommand(1);

  Overrides train_o, grid_o, storage_o;
  std::uint64_t train_seed = 0, grid_seed = 0, heat_seed = 0, conv_seed = 0;

  auto* train = app.add_subcommand("train", "run one training experiment");
  add_override_flags(train, train_o);
  train->add_option("--seed", train_seed, "RNG seed")->required();

  auto* grid = app.add_subcommand("grid-search", "evaluate an (lr, damping | weight decay) grid");
  add_override_flags(grid, grid_o);
  std::string lrs, seconds, axis = "damping", criterion = "train_loss";
  bool bundled = false;
  grid->add_option("--seed", grid_seed, "RNG seed shared by every cell");
  grid->add_option("--lrs", lrs, "comma-separated learning rates");
  grid->add_option("--seconds", seconds, "comma-separated second-axis values");
  grid->add_option("--axis", axis, "damping | weight_decay");
  grid->add_option("--criterion", criterion, "train_loss | val_acc");
  grid->add_flag("--mbf-autoencoder-grid", bundled, "use the bundled MBF autoencoder grid");

  auto* heat = app.add_subcommand("fim-heatmap", "export |inverse empirical FIM| of one layer");
  std::string network = "mlp", heat_out = "fim.csv";
  std::size_t heat_epochs = 50, heat_n = 2000;
  double heat_damping = 1e-3;
  long heat_layer = -1;
  heat->add_option("--network", network, "mlp (256-20x5-10 tanh) | conv (1->32 5x5)");
  heat->add_option("--epochs", heat_epochs, "SGD-m pretraining epochs");
  heat->add_option("--n", heat_n, "number of digits");
  heat->add_option("--damping", heat_damping);
  heat->add_option("--layer", heat_layer);
  heat->add_option("--seed", heat_seed);
  heat->add_option("--out", heat_out);

  auto* conv = app.add_subcommand("converge-check", "full-batch exact MBF linear-rate check");
  std::size_t conv_n = 20, conv_dim = 4, conv_hidden = 8, conv_iters = 200;
  double eta_cap = 0.05;
  std::string conv_out;
  conv->add_option("--seed", conv_seed);
  conv->add_option("--n", conv_n);
  conv->add_option("--dim", conv_dim);
  conv->add_option("--hidden", conv_hidden);
  conv->add_option("--iterations", conv_iters);
  conv->add_option("--eta-cap", eta_cap);
  conv->add_option("--out", conv_out, "report path");

  auto* storage = app.add_subcommand("storage-audit", "preconditioner float counts vs formulas");
  add_override_flags(storage, storage_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return h::kExitConfig;
  }
  try {
    if (train->parsed()) return cmd_train(train_o, train_seed);
    if (grid->parsed()) return cmd_grid(grid_o, grid_seed, lrs, seconds, axis, criterion, bundled);
    if (heat->parsed()) return cmd_heatmap(network, heat_epochs, heat_n, heat_damping, heat_layer, heat_seed, heat_out);
    if (conv->parsed()) return cmd_converge(conv_seed, conv_n, conv_dim, conv_hidden, conv_iters, eta_cap, conv_out);
    if (storage->parsed()) return cmd_storage(storage_o);
  } catch (const h::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return h::kExitConfig;
  } catch (const h::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return h::kExitIo;
  } catch (const h::ExhaustiveFailureError& e) {
    std::cerr << "run failure: " << e.what() << "\n";
    return h::kExitRunFailure;
  } catch (const cv::PreconditionError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return h::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "run failure: " << e.what() << "\n";
    return h::kExitRunFailure;
  }
  return h::kExitOk;
}
