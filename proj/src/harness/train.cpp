#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "mbf/harness.hpp"

namespace mbf::harness {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Everything an optimizer may ask for, computed from one mini-batch.
struct BatchWork {
  nn::Gradients grads;
  nn::Tape tape;
  std::vector<Matrix> preact;
  std::vector<Matrix> per_sample;
  double loss = 0.0;

  optim::StepInput input(const optim::Needs& needs) const {
    optim::StepInput in;
    in.grads = &grads;
    if (needs.tape || needs.preact_grads) in.tape = &tape;
    if (needs.preact_grads) in.preact_grads = &preact;
    if (needs.per_sample_grads) in.per_sample_grads = &per_sample;
    return in;
  }
};

BatchWork compute_batch(const nn::Params& params, const nn::NetworkSpec& spec, const nn::Batch& batch,
                        const optim::Needs& needs) {
  BatchWork w;
  auto fwd = nn::forward(params, spec, batch.x);
  const auto loss = nn::loss_eval(spec.loss, fwd.outputs, batch.y);
  w.loss = loss.loss;
  w.grads = nn::backward(params, spec, fwd.tape, loss.output_grad);
  if (needs.preact_grads || needs.per_sample_grads) {
    const Matrix per_sample_out = loss.output_grad * static_cast<double>(batch.size());
    if (needs.preact_grads) w.preact = nn::preactivation_grads(params, spec, fwd.tape, per_sample_out);
    if (needs.per_sample_grads) w.per_sample = nn::per_sample_gradients(params, spec, fwd.tape, per_sample_out);
  }
  w.tape = std::move(fwd.tape);
  return w;
}

struct Eval {
  double loss = kNaN;
  double acc = kNaN;
};

Eval evaluate(const nn::Params& params, const nn::NetworkSpec& spec, const nn::Batch& data) {
  if (data.size() == 0) return {};
  const auto fwd = nn::forward(params, spec, data.x);
  Eval e;
  e.loss = nn::loss_eval(spec.loss, fwd.outputs, data.y).loss;
  if (spec.loss == nn::LossKind::softmax_ce) e.acc = nn::accuracy(fwd.outputs, data.y);
  return e;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t m, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += m)
    out.emplace_back(order.begin() + static_cast<long>(s), order.begin() + static_cast<long>(std::min(n, s + m)));
  return out;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

RunRecord train(const ExperimentConfig& config, const nn::Batch& data_in) {
  config.validate();
  if (!config.seed) throw ConfigError("a seed is required");
  const std::uint64_t seed = *config.seed;
  const auto& spec = config.network;
  if (data_in.x.cols() != spec.input_dim() || data_in.y.cols() != spec.output_dim()) {
    throw ConfigError("dataset shape " + std::to_string(data_in.x.cols()) + " -> " + std::to_string(data_in.y.cols()) +
                      " does not match the network " + std::to_string(spec.input_dim()) + " -> " +
                      std::to_string(spec.output_dim()));
  }

  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  nn::Batch train_set = data_in, val_set;
  if (config.data.val_fraction > 0.0) {
    std::vector<std::size_t> order(data_in.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::floor(config.data.val_fraction * data_in.size()));
    val_set = nn::slice_rows(data_in, {order.begin(), order.begin() + static_cast<long>(n_val)});
    train_set = nn::slice_rows(data_in, {order.begin() + static_cast<long>(n_val), order.end()});
  }
  if (config.batch_size > train_set.size()) {
    throw ConfigError("batch_size " + std::to_string(config.batch_size) + " exceeds the " +
                      std::to_string(train_set.size()) + " training samples");
  }

  optim::LrSchedule schedule = config.schedule;
  schedule.initial = config.optimizer.lr;
  auto opt = optim::make_optimizer(config.optimizer, spec);
  const optim::Needs needs = opt->needs();

  RunRecord rec;
  rec.config = config_to_json(config);
  nn::Params params = nn::init_params(spec, seed);

  auto fail = [&](const std::string& reason, const std::string& detail) {
    rec.failed = true;
    rec.failure_reason = reason;
    rec.failure_detail = detail;
    rec.last_good_epoch = rec.rows.empty() ? std::nullopt : std::optional<std::size_t>(rec.rows.back().epoch);
  };

  const Eval e0 = evaluate(params, spec, train_set);
  const Eval v0 = evaluate(params, spec, val_set);
  if (!std::isfinite(e0.loss)) {
    fail("non_finite_loss", "initial loss is not finite");
    rec.final_params = params;
    return rec;
  }
  rec.rows.push_back({0, e0.loss, v0.loss, v0.acc, 0.0, lr_schedule(schedule, 0)});

  try {
    if (config.warm_start) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<std::size_t> all(train_set.size());
      std::iota(all.begin(), all.end(), 0);
      for (std::size_t s = 0; s < all.size(); s += config.batch_size) {
        const std::vector<std::size_t> rows(all.begin() + static_cast<long>(s),
                                            all.begin() + static_cast<long>(std::min(all.size(), s + config.batch_size)));
        const auto w = compute_batch(params, spec, nn::slice_rows(train_set, rows), needs);
        opt->accumulate_warm_start(w.input(needs));
      }
      opt->finish_warm_start();
      rec.warm_start_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }

    double wall = 0.0;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
      const double lr = lr_schedule(schedule, epoch - 1);
      const auto t0 = std::chrono::steady_clock::now();
      for (const auto& rows : epoch_batches(train_set.size(), config.batch_size, rng)) {
        const auto w = compute_batch(params, spec, nn::slice_rows(train_set, rows), needs);
        if (!std::isfinite(w.loss)) throw std::domain_error("mini-batch loss is not finite in epoch " + std::to_string(epoch));
        opt->step(params, w.input(needs), lr);
      }
      wall += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const Eval e = evaluate(params, spec, train_set);
      const Eval v = evaluate(params, spec, val_set);
      if (!std::isfinite(e.loss) || !linalg::all_finite(params.flatten())) {
        fail("non_finite_loss", "training loss is not finite after epoch " + std::to_string(epoch));
        break;
      }
      rec.rows.push_back({epoch, e.loss, v.loss, v.acc, wall, lr});
    }
  } catch (const optim::BlockInversionError& e) {
    fail("inversion_failure", e.what());
  } catch (const linalg::LinalgError& e) {
    fail("inversion_failure", e.what());
  } catch (const std::domain_error& e) {
    fail("non_finite_loss", e.what());
  }
  rec.final_params = std::move(params);
  return rec;
}

RunRecord train(const ExperimentConfig& config) {
  config.validate();
  if (!config.seed) throw ConfigError("a seed is required");
  return train(config, load_dataset(config.data, *config.seed));
}

std::string run_record_csv(const RunRecord& r) {
  std::ostringstream os;
  os << "# config: " << r.config.dump() << "\n";
  os << kRunLogHeader << "\n";
  for (const auto& row : r.rows) {
    os << row.epoch << ',' << fmt(row.train_loss) << ',' << fmt(row.val_loss) << ',' << fmt(row.val_acc) << ','
       << fmt(row.wall_s) << ',' << fmt(row.lr) << "\n";
  }
  if (r.failed) {
    os << "# failed: " << r.failure_reason << " last_good_epoch="
       << (r.last_good_epoch ? std::to_string(*r.last_good_epoch) : std::string("none")) << " detail=" << r.failure_detail
       << "\n";
  }
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------- grid search

GridResult grid_search(const ExperimentConfig& base, const nn::Batch& data, const std::vector<double>& lrs,
                       const std::vector<double>& seconds, SecondAxis axis, Criterion criterion) {
  if (lrs.empty() || seconds.empty()) throw ConfigError("grid_search: grids must be nonempty");
  if (criterion == Criterion::val_acc && !(base.data.val_fraction > 0.0))
    throw ConfigError("grid_search: val_acc criterion needs data.val_fraction > 0");
  GridResult result;
  std::optional<std::size_t> best;
  auto better = [&](const GridCell& a, const GridCell& b) {
    if (a.score != b.score) return criterion == Criterion::train_loss ? a.score < b.score : a.score > b.score;
    if (a.lr != b.lr) return a.lr < b.lr;
    return a.second < b.second;
  };
  for (double lr : lrs)
    for (double second : seconds) {
      ExperimentConfig c = base;
      c.optimizer.lr = lr;
      (axis == SecondAxis::damping ? c.optimizer.damping : c.optimizer.weight_decay) = second;
      GridCell cell{lr, second, kNaN, false, ""};
      try {
        const RunRecord r = train(c, data);
        if (r.failed) {
          cell.failed = true;
          cell.reason = r.failure_reason;
        } else {
          cell.score = criterion == Criterion::train_loss ? r.rows.back().train_loss : r.rows.back().val_acc;
        }
      } catch (const ConfigError& e) {
        cell.failed = true;
        cell.reason = std::string("config: ") + e.what();
      }
      result.table.push_back(cell);
      if (!cell.failed && (!best || better(cell, result.table[*best]))) best = result.table.size() - 1;
    }
  if (!best) throw ExhaustiveFailureError("grid_search: every grid cell failed", result.table);
  result.best = result.table[*best];
  return result;
}

GridPreset mbf_autoencoder_grid() {
  return {{1e-7, 3e-7, 1e-6, 3e-6, 1e-5, 3e-5, 1e-4},
          {1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 0.01},
          SecondAxis::damping};
}

std::string grid_table_csv(const GridResult& r, SecondAxis axis) {
  std::ostringstream os;
  os << "lr," << (axis == SecondAxis::damping ? "damping" : "weight_decay") << ",score,failed,reason\n";
  for (const auto& c : r.table)
    os << fmt(c.lr) << ',' << fmt(c.second) << ',' << fmt(c.score) << ',' << (c.failed ? 1 : 0) << ',' << c.reason
       << "\n";
  os << "# best: lr=" << fmt(r.best.lr) << " second=" << fmt(r.best.second) << " score=" << fmt(r.best.score) << "\n";
  return os.str();
}

}  // namespace mbf::harness
