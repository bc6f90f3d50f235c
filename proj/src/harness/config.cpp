#include <fstream>
#include <set>

#include "mbf/harness.hpp"

namespace mbf::harness {

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <class Fn>
auto translate(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const nn::NetworkError& e) {
    throw ConfigError(e.what());
  } catch (const optim::OptimError& e) {
    throw ConfigError(e.what());
  }
}

nn::LayerSpec layer_from_json(const json& j, std::size_t index) {
  const std::string where = "network.layers[" + std::to_string(index) + "]";
  std::string type = "dense", act = "identity";
  bool bias = true;
  read(j, "type", type, where);
  read(j, "activation", act, where);
  read(j, "bias", bias, where);
  const nn::Activation a = translate([&] { return nn::parse_activation(act); });
  if (type == "dense") {
    reject_unknown(j, {"type", "activation", "bias", "in", "out"}, where);
    std::size_t in = 0, out = 0;
    read(j, "in", in, where);
    read(j, "out", out, where);
    return nn::LayerSpec::dense(in, out, a, bias);
  }
  if (type == "conv2d") {
    reject_unknown(j, {"type", "activation", "bias", "in_channels", "out_channels", "radius", "height", "width"}, where);
    std::size_t J = 0, I = 0, R = 0, H = 0, W = 0;
    read(j, "in_channels", J, where);
    read(j, "out_channels", I, where);
    read(j, "radius", R, where);
    read(j, "height", H, where);
    read(j, "width", W, where);
    return nn::LayerSpec::conv2d(J, I, R, H, W, a, bias);
  }
  throw ConfigError(where + ": unknown layer type '" + type + "'");
}

}  // namespace

json network_to_json(const nn::NetworkSpec& spec) {
  json layers = json::array();
  for (const auto& L : spec.layers) {
    json l{{"activation", nn::to_string(L.activation)}, {"bias", L.has_bias}};
    if (L.kind == nn::LayerKind::dense) {
      l["type"] = "dense";
      l["in"] = L.in_dim;
      l["out"] = L.out_dim;
    } else {
      l["type"] = "conv2d";
      l["in_channels"] = L.in_channels;
      l["out_channels"] = L.out_channels;
      l["radius"] = L.radius;
      l["height"] = L.height;
      l["width"] = L.width;
    }
    layers.push_back(std::move(l));
  }
  return {{"loss", nn::to_string(spec.loss)}, {"layers", std::move(layers)}};
}

nn::NetworkSpec network_from_json(const json& j) {
  reject_unknown(j, {"loss", "layers"}, "network");
  nn::NetworkSpec spec;
  std::string loss = "squared_error";
  read(j, "loss", loss, "network");
  spec.loss = translate([&] { return nn::parse_loss(loss); });
  if (!j.contains("layers") || !j.at("layers").is_array()) throw ConfigError("network.layers must be an array");
  for (std::size_t i = 0; i < j.at("layers").size(); ++i) spec.layers.push_back(layer_from_json(j.at("layers")[i], i));
  translate([&] { spec.validate(); });
  return spec;
}

double autoencoder_preset_lr(optim::Method method) {
  switch (method) {
    case optim::Method::mbf: return 1e-5;
    case optim::Method::mbf_generic: return 1e-5;
    case optim::Method::kfac: return 0.003;
    case optim::Method::shampoo: return 3e-4;
    case optim::Method::adam: return 3e-4;
    case optim::Method::sgdm: return 0.003;
  }
  return 1e-3;
}

namespace {

// Paper-tuned second hyperparameter for the autoencoder preset.
double autoencoder_preset_damping(optim::Method method) {
  switch (method) {
    case optim::Method::mbf:
    case optim::Method::mbf_generic: return 3e-4;
    case optim::Method::kfac: return 0.3;
    case optim::Method::shampoo: return 3e-4;
    default: return optim::OptimizerConfig::defaults(method).damping;
  }
}

}  // namespace

ExperimentConfig preset(const std::string& name, optim::Method method) {
  ExperimentConfig c;
  c.optimizer = optim::OptimizerConfig::defaults(method);
  if (name == "autoencoder") {
    c.network = nn::make_mlp({784, 64, 16, 64, 784}, nn::Activation::relu, nn::Activation::identity,
                             nn::LossKind::bce_with_sigmoid);
    c.network.layers[1].activation = nn::Activation::identity;  // code layer
    c.data.source = "bundled_mnist";
    c.data.n = 2000;
    c.data.targets = "inputs";
    c.batch_size = 200;
    c.epochs = 20;
    c.warm_start = true;
    c.optimizer.stats_period = 1;
    c.optimizer.inverse_period = 20;
    c.optimizer.lr = autoencoder_preset_lr(method);
    c.optimizer.damping = autoencoder_preset_damping(method);
  } else if (name == "cnn") {
    c.network.loss = nn::LossKind::softmax_ce;
    c.network.layers = {nn::LayerSpec::conv2d(1, 8, 2, 16, 16, nn::Activation::relu),
                        nn::LayerSpec::conv2d(8, 8, 1, 16, 16, nn::Activation::relu),
                        nn::LayerSpec::dense(8 * 256, 10, nn::Activation::identity)};
    c.data.source = "synthetic";
    c.data.synth_kind = "downscaled_digits_16x16";
    c.data.n = 2000;
    c.batch_size = 100;
    c.epochs = 10;
    c.warm_start = true;
    c.optimizer.stats_period = 10;
    c.optimizer.inverse_period = 100;
    c.optimizer.lr = method == optim::Method::adam ? 1e-3 : 0.01;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected autoencoder or cnn)");
  }
  return c;
}

void ExperimentConfig::validate() const {
  translate([&] {
    network.validate();
    optimizer.validate();
  });
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(data.val_fraction >= 0.0 && data.val_fraction < 1.0)) throw ConfigError("data.val_fraction must lie in [0, 1)");
  if (!(schedule.factor > 0.0)) throw ConfigError("schedule.factor must be positive");
  if (optimizer.method == optim::Method::kfac)
    for (const auto& L : network.layers)
      if (L.kind != nn::LayerKind::dense) throw ConfigError("kfac supports dense layers only");
  if (data.source == "idx") {
    for (const auto& f : {data.images, data.labels})
      if (!std::filesystem::exists(f)) throw IoError("data file not found: " + f);
  }
}

ExperimentConfig config_from_json(const json& j) {
  reject_unknown(j, {"preset", "network", "data", "optimizer", "schedule", "batch_size", "epochs", "seed",
                     "warm_start", "output_dir"},
                 "config");
  std::string method_name = "mbf";
  if (j.contains("optimizer")) read(j.at("optimizer"), "method", method_name, "optimizer");
  const optim::Method method = translate([&] { return optim::parse_method(method_name); });

  ExperimentConfig c;
  c.optimizer = optim::OptimizerConfig::defaults(method);
  if (j.contains("preset")) c = preset(j.at("preset").get<std::string>(), method);
  if (j.contains("network")) c.network = network_from_json(j.at("network"));

  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, {"source", "images", "labels", "synth_kind", "n", "dim", "targets", "val_fraction"}, "data");
    read(d, "source", c.data.source, "data");
    read(d, "images", c.data.images, "data");
    read(d, "labels", c.data.labels, "data");
    read(d, "synth_kind", c.data.synth_kind, "data");
    read(d, "n", c.data.n, "data");
    read(d, "dim", c.data.dim, "data");
    read(d, "targets", c.data.targets, "data");
    read(d, "val_fraction", c.data.val_fraction, "data");
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    reject_unknown(o, {"method", "lr", "damping", "weight_decay", "momentum", "ema", "stats_period",
                       "inverse_period", "adam_beta1", "adam_beta2", "shared_threshold"},
                   "optimizer");
    auto& oc = c.optimizer;
    read(o, "lr", oc.lr, "optimizer");
    read(o, "damping", oc.damping, "optimizer");
    read(o, "weight_decay", oc.weight_decay, "optimizer");
    read(o, "momentum", oc.momentum, "optimizer");
    read(o, "ema", oc.ema, "optimizer");
    read(o, "stats_period", oc.stats_period, "optimizer");
    read(o, "inverse_period", oc.inverse_period, "optimizer");
    read(o, "adam_beta1", oc.adam_beta1, "optimizer");
    read(o, "adam_beta2", oc.adam_beta2, "optimizer");
    read(o, "shared_threshold", oc.shared_threshold, "optimizer");
  }
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    reject_unknown(s, {"factor", "period"}, "schedule");
    read(s, "factor", c.schedule.factor, "schedule");
    read(s, "period", c.schedule.period, "schedule");
  }
  read(j, "batch_size", c.batch_size, "config");
  read(j, "epochs", c.epochs, "config");
  if (j.contains("seed")) {
    std::uint64_t seed = 0;
    read(j, "seed", seed, "config");
    c.seed = seed;
  }
  read(j, "warm_start", c.warm_start, "config");
  read(j, "output_dir", c.output_dir, "config");
  c.schedule.initial = c.optimizer.lr;
  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  const auto& o = c.optimizer;
  json j{{"network", network_to_json(c.network)},
         {"data",
          {{"source", c.data.source},
           {"images", c.data.images},
           {"labels", c.data.labels},
           {"synth_kind", c.data.synth_kind},
           {"n", c.data.n},
           {"dim", c.data.dim},
           {"targets", c.data.targets},
           {"val_fraction", c.data.val_fraction}}},
         {"optimizer",
          {{"method", optim::to_string(o.method)},
           {"lr", o.lr},
           {"damping", o.damping},
           {"weight_decay", o.weight_decay},
           {"momentum", o.momentum},
           {"ema", o.ema},
           {"stats_period", o.stats_period},
           {"inverse_period", o.inverse_period},
           {"adam_beta1", o.adam_beta1},
           {"adam_beta2", o.adam_beta2},
           {"shared_threshold", o.shared_threshold}}},
         {"schedule", {{"factor", c.schedule.factor}, {"period", c.schedule.period}}},
         {"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"warm_start", c.warm_start},
         {"output_dir", c.output_dir}};
  if (c.seed) j["seed"] = *c.seed;
  return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace mbf::harness
