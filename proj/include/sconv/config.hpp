#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "sconv/data_io.hpp"
#include "sconv/sgnet.hpp"
#include "sconv/training.hpp"

namespace sconv {

// Flat "section.key" -> value store read from a TOML-style text file:
//
//   # comment
//   [network]
//   widths = [16, 32, 64, 128]
//   source = "depth"
//
// Values are parsed as JSON when possible (numbers, bools, arrays, quoted
// strings) and kept as bare strings otherwise.
class KeyValueConfig {
 public:
  static KeyValueConfig load(const std::filesystem::path& path);
  static KeyValueConfig parse(std::string_view text, std::string_view origin = "<string>");

  // "section.key=value"
  void apply_override(std::string_view assignment);
  void set(const std::string& key, const nlohmann::json& value) { values_[key] = value; }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const nlohmann::json& at(const std::string& key) const;
  std::vector<std::string> keys_in(std::string_view section) const;
  const std::map<std::string, nlohmann::json>& values() const { return values_; }

 private:
  std::map<std::string, nlohmann::json> values_;
};

// Each reads "<section>.*" keys and rejects unknown ones.
void apply_config(const KeyValueConfig& kv, NetworkConfig& cfg, std::string_view section = "network");
void apply_config(const KeyValueConfig& kv, TrainConfig& cfg, std::string_view section = "train");
void apply_config(const KeyValueConfig& kv, SynthConfig& cfg, std::string_view section = "synth");

nlohmann::json to_json(const NetworkConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const SynthConfig& cfg);
NetworkConfig network_config_from_json(const nlohmann::json& j);

}  // namespace sconv
