#include "sconv/config.hpp"

#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace sconv {

using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

json parse_value(const std::string& raw) {
  json j = json::parse(raw, nullptr, false);
  if (j.is_discarded()) return json(raw);
  return j;
}

template <typename V>
V get_as(const KeyValueConfig& kv, const std::string& key) {
  try {
    return kv.at(key).get<V>();
  } catch (const json::exception& e) {
    fail(ErrorKind::config, fmt::format("config key {}: {}", key, e.what()));
  }
}

}  // namespace

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::io, "cannot read config file: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path.string());
}

KeyValueConfig KeyValueConfig::parse(std::string_view text, std::string_view origin) {
  KeyValueConfig kv;
  std::string section;
  std::istringstream is{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos && line.find('"') == std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[' && t.back() == ']' && t.find('=') == std::string::npos) {
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::config, fmt::format("{}:{}: expected key = value", origin, lineno));
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) fail(ErrorKind::config, fmt::format("{}:{}: empty key", origin, lineno));
    kv.values_[section.empty() ? key : section + "." + key] = parse_value(trim(std::string_view(t).substr(eq + 1)));
  }
  return kv;
}

void KeyValueConfig::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    fail(ErrorKind::config, fmt::format("override '{}' is not key=value", assignment));
  }
  values_[trim(assignment.substr(0, eq))] = parse_value(trim(assignment.substr(eq + 1)));
}

const json& KeyValueConfig::at(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) fail(ErrorKind::config, "missing config key " + key);
  return it->second;
}

std::vector<std::string> KeyValueConfig::keys_in(std::string_view section) const {
  std::vector<std::string> out;
  const std::string prefix = std::string(section) + ".";
  for (const auto& [k, v] : values_) {
    if (k.rfind(prefix, 0) == 0) out.push_back(k.substr(prefix.size()));
  }
  return out;
}

namespace {

std::vector<std::vector<int>> parse_policy(const json& j, int stages, int blocks) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "default") return NetworkConfig::default_policy(stages, blocks);
    if (s == "none" || s == "baseline") return NetworkConfig::empty_policy(stages);
    fail(ErrorKind::config, "sconv_policy must be default, none or a list of lists");
  }
  try {
    return j.get<std::vector<std::vector<int>>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::config, fmt::format("sconv_policy: {}", e.what()));
  }
}

}  // namespace

void apply_config(const KeyValueConfig& kv, NetworkConfig& cfg, std::string_view section) {
  const std::string s(section);
  const bool was_default = cfg.sconv_policy == NetworkConfig::default_policy(cfg.stages(), cfg.blocks);
  const bool was_empty = cfg.sconv_policy == NetworkConfig::empty_policy(cfg.stages());
  json policy;
  for (const auto& key : kv.keys_in(section)) {
    const std::string full = s + "." + key;
    if (key == "widths") cfg.widths = get_as<std::vector<int>>(kv, full);
    else if (key == "blocks") cfg.blocks = get_as<int>(kv, full);
    else if (key == "num_classes") cfg.num_classes = get_as<int>(kv, full);
    else if (key == "source") cfg.source = parse_spatial_source(get_as<std::string>(kv, full));
    else if (key == "normalize_spatial") cfg.normalize_spatial = get_as<bool>(kv, full);
    else if (key == "sconv_policy") policy = kv.at(full);
    else if (key == "deep_supervision") cfg.deep_supervision = get_as<bool>(kv, full);
    else if (key == "decoder_channels") cfg.decoder_channels = get_as<int>(kv, full);
    else if (key == "decoder_convs") cfg.decoder_convs = get_as<int>(kv, full);
    else if (key == "f_hidden") cfg.f_hidden = get_as<int>(kv, full);
    else if (key == "phi_stride") cfg.phi_stride = get_as<int>(kv, full);
    else if (key == "seed") cfg.seed = get_as<std::uint64_t>(kv, full);
    else fail(ErrorKind::config, "unknown config key " + full);
  }
  if (!policy.is_null()) {
    cfg.sconv_policy = parse_policy(policy, cfg.stages(), cfg.blocks);
  } else if (was_default) {
    cfg.sconv_policy = NetworkConfig::default_policy(cfg.stages(), cfg.blocks);
  } else if (was_empty) {
    cfg.sconv_policy = NetworkConfig::empty_policy(cfg.stages());
  }
  cfg.validate();
}

void apply_config(const KeyValueConfig& kv, TrainConfig& cfg, std::string_view section) {
  const std::string s(section);
  for (const auto& key : kv.keys_in(section)) {
    const std::string full = s + "." + key;
    if (key == "base_lr" || key == "lr") cfg.base_lr = get_as<double>(kv, full);
    else if (key == "poly_power") cfg.poly_power = get_as<double>(kv, full);
    else if (key == "weight_decay") cfg.weight_decay = get_as<double>(kv, full);
    else if (key == "momentum") cfg.momentum = get_as<double>(kv, full);
    else if (key == "batch_size") cfg.batch_size = get_as<int>(kv, full);
    else if (key == "epochs") cfg.epochs = get_as<int>(kv, full);
    else if (key == "crop") {
      const auto c = get_as<std::vector<int>>(kv, full);
      if (c.size() != 2) fail(ErrorKind::config, "train.crop must be [h, w]");
      cfg.crop_h = c[0];
      cfg.crop_w = c[1];
    } else if (key == "scale_range") {
      const auto r = get_as<std::vector<double>>(kv, full);
      if (r.size() != 2) fail(ErrorKind::config, "train.scale_range must be [lo, hi]");
      cfg.scale_min = r[0];
      cfg.scale_max = r[1];
    } else if (key == "hflip_prob") cfg.hflip_prob = get_as<double>(kv, full);
    else if (key == "augment") cfg.augment = get_as<bool>(kv, full);
    else if (key == "aux_weight") cfg.aux_weight = get_as<double>(kv, full);
    else if (key == "class_reweight") cfg.class_reweight = get_as<bool>(kv, full);
    else if (key == "lr_step_granularity") cfg.lr_step_granularity = get_as<std::string>(kv, full);
    else if (key == "offset_lr_mult") cfg.offset_lr_mult = get_as<double>(kv, full);
    else if (key == "lr_step_epochs") cfg.lr_step_epochs = get_as<int>(kv, full);
    else if (key == "max_iters") cfg.max_iters = get_as<long>(kv, full);
    else if (key == "train_subset") cfg.train_subset = get_as<int>(kv, full);
    else if (key == "seed") cfg.seed = get_as<std::uint64_t>(kv, full);
    else fail(ErrorKind::config, "unknown config key " + full);
  }
  cfg.validate();
}

void apply_config(const KeyValueConfig& kv, SynthConfig& cfg, std::string_view section) {
  const std::string s(section);
  for (const auto& key : kv.keys_in(section)) {
    const std::string full = s + "." + key;
    if (key == "height") cfg.height = get_as<int>(kv, full);
    else if (key == "width") cfg.width = get_as<int>(kv, full);
    else if (key == "train_scenes") cfg.train_scenes = get_as<int>(kv, full);
    else if (key == "val_scenes") cfg.val_scenes = get_as<int>(kv, full);
    else if (key == "num_classes") cfg.num_classes = get_as<int>(kv, full);
    else if (key == "min_objects") cfg.min_objects = get_as<int>(kv, full);
    else if (key == "max_objects") cfg.max_objects = get_as<int>(kv, full);
    else if (key == "min_size") cfg.min_size = get_as<int>(kv, full);
    else if (key == "max_size") cfg.max_size = get_as<int>(kv, full);
    else if (key == "confusable_pairs") {
      cfg.confusable_pairs = get_as<std::vector<std::pair<int, int>>>(kv, full);
    } else if (key == "depth_noise") cfg.depth_noise = get_as<double>(kv, full);
    else if (key == "depth_margin") cfg.depth_margin = get_as<double>(kv, full);
    else if (key == "hole_fraction") cfg.hole_fraction = get_as<double>(kv, full);
    else if (key == "seed") cfg.seed = get_as<std::uint64_t>(kv, full);
    else fail(ErrorKind::config, "unknown config key " + full);
  }
}

json to_json(const NetworkConfig& cfg) {
  return json{{"widths", cfg.widths},
              {"blocks", cfg.blocks},
              {"num_classes", cfg.num_classes},
              {"source", std::string(spatial_source_name(cfg.source))},
              {"normalize_spatial", cfg.normalize_spatial},
              {"sconv_policy", cfg.sconv_policy},
              {"deep_supervision", cfg.deep_supervision},
              {"decoder_channels", cfg.decoder_channels},
              {"decoder_convs", cfg.decoder_convs},
              {"f_hidden", cfg.f_hidden},
              {"phi_stride", cfg.phi_stride},
              {"seed", cfg.seed}};
}

json to_json(const TrainConfig& cfg) {
  return json{{"base_lr", cfg.base_lr},
              {"poly_power", cfg.poly_power},
              {"weight_decay", cfg.weight_decay},
              {"momentum", cfg.momentum},
              {"batch_size", cfg.batch_size},
              {"epochs", cfg.epochs},
              {"crop", {cfg.crop_h, cfg.crop_w}},
              {"scale_range", {cfg.scale_min, cfg.scale_max}},
              {"hflip_prob", cfg.hflip_prob},
              {"augment", cfg.augment},
              {"aux_weight", cfg.aux_weight},
              {"class_reweight", cfg.class_reweight},
              {"lr_step_granularity", cfg.lr_step_granularity},
              {"offset_lr_mult", cfg.offset_lr_mult},
              {"lr_step_epochs", cfg.lr_step_epochs},
              {"max_iters", cfg.max_iters},
              {"train_subset", cfg.train_subset},
              {"seed", cfg.seed}};
}

json to_json(const SynthConfig& cfg) {
  return json{{"height", cfg.height},
              {"width", cfg.width},
              {"train_scenes", cfg.train_scenes},
              {"val_scenes", cfg.val_scenes},
              {"num_classes", cfg.num_classes},
              {"min_objects", cfg.min_objects},
              {"max_objects", cfg.max_objects},
              {"min_size", cfg.min_size},
              {"max_size", cfg.max_size},
              {"confusable_pairs", cfg.confusable_pairs},
              {"depth_noise", cfg.depth_noise},
              {"depth_margin", cfg.depth_margin},
              {"hole_fraction", cfg.hole_fraction},
              {"seed", cfg.seed}};
}

NetworkConfig network_config_from_json(const json& j) {
  KeyValueConfig kv;
  for (const auto& [k, v] : j.items()) kv.set("network." + k, v);
  NetworkConfig cfg;
  apply_config(kv, cfg);
  return cfg;
}

}  // namespace sconv
