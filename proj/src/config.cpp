#include "mics/config.hpp"

#include <fstream>
#include <sstream>

namespace mics::config {

using nlohmann::json;

namespace {

// Recursively overlays `patch` on `base`; every key must already exist there.
void merge(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("config " + (path.empty() ? std::string("root") : path) + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key: " + where);
    json& slot = base[key];
    if (slot.is_object()) {
      merge(slot, value, where);
    } else if (slot.is_number() && value.is_number()) {
      if (slot.is_number_integer() && !value.is_number_integer())
        throw ConfigError("config key " + where + " expects an integer");
      if (slot.is_number_unsigned() && value.is_number_integer() && value.get<std::int64_t>() < 0)
        throw ConfigError("config key " + where + " expects a non-negative integer");
      slot = value;
    } else if (slot.type() == value.type()) {
      slot = value;
    } else {
      throw ConfigError("config key " + where + " has the wrong type");
    }
  }
}

template <class T>
void get(const json& j, const char* key, T& dst) {
  dst = j.at(key).get<T>();
}

}  // namespace

void RunConfig::validate() const {
  try {
    net.validate();
    pretrain.validate();
    finetune_settings().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (dataset.per_class <= 0) throw ConfigError("dataset.per_class must be positive");
  if (svd.per_cluster <= 0 || svd.clusters < 0 || svd.restarts <= 0 || svd.max_iter <= 0)
    throw ConfigError("svd block has a non-positive count");
  if (out.empty()) throw ConfigError("out must be a directory path");
}

finetune::FinetuneConfig RunConfig::finetune_settings() const {
  auto f = finetune;
  f.label_fraction = dataset.label_fraction;
  return f;
}

json to_json(const RunConfig& c) {
  const auto& p = c.pretrain;
  const auto& f = c.finetune;
  const auto& d = c.dataset;
  return {
      {"net", io::to_json(c.net)},
      {"pretrain",
       {{"tau", p.tau}, {"alpha", p.alpha}, {"mask_ratio", p.mask_ratio}, {"queue_size", p.queue_size},
        {"alpha_dis", p.alpha_dis}, {"alpha_res", p.alpha_res}, {"alpha_a", p.alpha_a}, {"epochs", p.epochs},
        {"batch_size", p.batch_size}, {"lr_max", p.lr_max}, {"lr_min", p.lr_min}, {"weight_decay", p.weight_decay},
        {"momentum", p.momentum}, {"masked_only", p.masked_only}}},
      {"finetune",
       {{"epochs", f.epochs}, {"batch_size", f.batch_size}, {"lr_max", f.lr_max}, {"lr_min", f.lr_min},
        {"weight_decay", f.weight_decay}, {"ema_decay", f.ema_decay}, {"ema_warmup", f.ema_warmup},
        {"theta_horizon", f.theta_horizon}, {"use_svd", f.use_svd}, {"use_tmc", f.use_tmc},
        {"freeze_encoders", f.freeze_encoders}, {"per_sample_shift", f.per_sample_shift},
        {"centered_shift", f.centered_shift}, {"modalities", finetune::to_string(f.modalities)}}},
      {"svd",
       {{"clusters", c.svd.clusters}, {"per_cluster", c.svd.per_cluster}, {"epsilon", c.svd.epsilon},
        {"max_iter", c.svd.max_iter}, {"tol", c.svd.tol}, {"restarts", c.svd.restarts}}},
      {"dataset",
       {{"root", d.root}, {"per_class", d.per_class}, {"ratios", d.ratios}, {"label_fraction", d.label_fraction}}},
      {"seeds", io::to_json(c.seeds)},
      {"out", c.out},
  };
}

RunConfig from_json(const json& patch) {
  json j = to_json(RunConfig{});
  merge(j, patch, "");
  RunConfig c;
  try {
    c.net = io::net_config_from_json(j.at("net"));
    const json& p = j.at("pretrain");
    get(p, "tau", c.pretrain.tau);
    get(p, "alpha", c.pretrain.alpha);
    get(p, "mask_ratio", c.pretrain.mask_ratio);
    get(p, "queue_size", c.pretrain.queue_size);
    get(p, "alpha_dis", c.pretrain.alpha_dis);
    get(p, "alpha_res", c.pretrain.alpha_res);
    get(p, "alpha_a", c.pretrain.alpha_a);
    get(p, "epochs", c.pretrain.epochs);
    get(p, "batch_size", c.pretrain.batch_size);
    get(p, "lr_max", c.pretrain.lr_max);
    get(p, "lr_min", c.pretrain.lr_min);
    get(p, "weight_decay", c.pretrain.weight_decay);
    get(p, "momentum", c.pretrain.momentum);
    get(p, "masked_only", c.pretrain.masked_only);
    const json& f = j.at("finetune");
    get(f, "epochs", c.finetune.epochs);
    get(f, "batch_size", c.finetune.batch_size);
    get(f, "lr_max", c.finetune.lr_max);
    get(f, "lr_min", c.finetune.lr_min);
    get(f, "weight_decay", c.finetune.weight_decay);
    get(f, "ema_decay", c.finetune.ema_decay);
    get(f, "ema_warmup", c.finetune.ema_warmup);
    get(f, "theta_horizon", c.finetune.theta_horizon);
    get(f, "use_svd", c.finetune.use_svd);
    get(f, "use_tmc", c.finetune.use_tmc);
    get(f, "freeze_encoders", c.finetune.freeze_encoders);
    get(f, "per_sample_shift", c.finetune.per_sample_shift);
    get(f, "centered_shift", c.finetune.centered_shift);
    c.finetune.modalities = finetune::modality_mode_from_string(f.at("modalities").get<std::string>());
    const json& s = j.at("svd");
    get(s, "clusters", c.svd.clusters);
    get(s, "per_cluster", c.svd.per_cluster);
    get(s, "epsilon", c.svd.epsilon);
    get(s, "max_iter", c.svd.max_iter);
    get(s, "tol", c.svd.tol);
    get(s, "restarts", c.svd.restarts);
    const json& d = j.at("dataset");
    get(d, "root", c.dataset.root);
    get(d, "per_class", c.dataset.per_class);
    const auto ratios = d.at("ratios").get<std::vector<double>>();
    if (ratios.size() != 3) throw ConfigError("dataset.ratios must hold three values");
    c.dataset.ratios = {ratios[0], ratios[1], ratios[2]};
    get(d, "label_fraction", c.dataset.label_fraction);
    c.seeds = io::seed_block_from_json(j.at("seeds"));
    get(j, "out", c.out);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& assignments) {
  json patch = json::object();
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + a);
    const std::string key = a.substr(0, eq), text = a.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &patch;
    std::stringstream parts(key);
    std::string part;
    std::vector<std::string> path;
    while (std::getline(parts, part, '.')) path.push_back(part);
    for (std::size_t i = 0; i + 1 < path.size(); ++i) node = &(*node)[path[i]];
    (*node)[path.back()] = value;
  }
  json merged = to_json(base);
  merge(merged, patch, "");
  return from_json(merged);
}

void set_all_seeds(RunConfig& c, std::uint64_t seed) { c.seeds = {seed, seed, seed, seed, seed}; }

data::DatasetSplits load_splits(const RunConfig& c) {
  if (!c.dataset.root.empty())
    return data::load_paired_dataset(c.dataset.root, c.dataset.ratios, c.seeds.data, c.net.image_side);
  data::SyntheticSpec spec{c.net.num_classes, c.dataset.per_class, c.net.image_side, c.net.patch_size, c.seeds.data};
  auto splits = data::split_dataset(data::generate_synthetic_dataset(spec), c.net.num_classes, c.dataset.ratios,
                                    c.seeds.data);
  splits.class_names = data::synthetic_class_names(c.net.num_classes);
  return splits;
}

}  // namespace mics::config
