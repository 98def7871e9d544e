#include "sconv/checkpoint.hpp"

#include <fstream>

#include <fmt/format.h>

#include "sconv/config.hpp"

namespace sconv {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

std::string file_for(const std::string& name) {
  std::string f = name;
  for (auto& c : f) {
    if (c == '/') c = '@';
  }
  return f + ".sct";
}

}  // namespace

template <typename T>
void save_checkpoint(SegModel<T>& model, const fs::path& dir, const SgdState<T>* optimizer,
                     const json& train_state) {
  fs::create_directories(dir);
  json tensors = json::array();
  auto put = [&](const std::string& name, const Tensor<T>& t) {
    const auto file = file_for(name);
    save_tensor(t, dir / file);
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", dtype_name<T>()}, {"file", file}});
  };
  const auto params = model.params();
  for (auto* p : model.state()) put(p->name, p->value);
  if (optimizer != nullptr && !optimizer->velocity.empty()) {
    if (optimizer->velocity.size() != params.size()) {
      fail(ErrorKind::state, "optimizer state does not mirror the parameter registry");
    }
    for (std::size_t i = 0; i < params.size(); ++i) put("momentum/" + params[i]->name, optimizer->velocity[i]);
  }
  json manifest{{"format", "sconv-checkpoint-1"},
                {"precision", dtype_name<T>()},
                {"network", to_json(model.config())},
                {"tensors", tensors},
                {"train_state", train_state}};
  if (optimizer != nullptr) manifest["train_state"]["iteration"] = optimizer->iteration;
  std::ofstream os(dir / "manifest.json");
  if (!os) fail(ErrorKind::io, "cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

json read_checkpoint_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream is(path);
  if (!is) fail(ErrorKind::io, "cannot read checkpoint manifest " + path.string());
  json j = json::parse(is, nullptr, false);
  if (j.is_discarded() || !j.contains("tensors") || !j.contains("network")) {
    fail(ErrorKind::data, "malformed checkpoint manifest " + path.string());
  }
  return j;
}

template <typename T>
void load_checkpoint_into(SegModel<T>& model, const fs::path& dir, SgdState<T>* optimizer,
                          json* train_state) {
  const json manifest = read_checkpoint_manifest(dir);
  std::map<std::string, std::string> files;
  std::size_t stored = 0;
  for (const auto& t : manifest["tensors"]) {
    const auto name = t["name"].get<std::string>();
    files[name] = t["file"].get<std::string>();
    if (!name.starts_with("momentum/")) ++stored;
  }
  const auto state = model.state();
  if (stored != state.size()) {
    fail(ErrorKind::data, fmt::format("checkpoint holds {} tensors, model expects {}", stored, state.size()));
  }
  for (auto* p : state) {
    auto it = files.find(p->name);
    if (it == files.end()) fail(ErrorKind::data, fmt::format("checkpoint lacks tensor {}", p->name));
    auto t = load_tensor<T>(dir / it->second);
    if (t.shape() != p->value.shape()) {
      fail(ErrorKind::dimension, fmt::format("checkpoint tensor {} has shape {}, model expects {}",
                                             p->name, shape_str(t.shape()), shape_str(p->value.shape())));
    }
    p->value = std::move(t);
  }
  if (optimizer != nullptr) {
    optimizer->velocity.clear();
    const auto params = model.params();
    const bool have = files.count("momentum/" + params.front()->name) != 0;
    if (have) {
      for (auto* p : params) {
        auto it = files.find("momentum/" + p->name);
        if (it == files.end()) fail(ErrorKind::data, "checkpoint lacks momentum for " + p->name);
        optimizer->velocity.push_back(load_tensor<T>(dir / it->second));
      }
    }
    optimizer->iteration = manifest["train_state"].value("iteration", 0L);
  }
  if (train_state != nullptr) *train_state = manifest["train_state"];
}

template <typename T>
std::unique_ptr<SegModel<T>> load_checkpoint(const fs::path& dir, SgdState<T>* optimizer,
                                             json* train_state) {
  const json manifest = read_checkpoint_manifest(dir);
  auto model = std::make_unique<SegModel<T>>(network_config_from_json(manifest["network"]));
  load_checkpoint_into(*model, dir, optimizer, train_state);
  return model;
}

template void save_checkpoint(SegModel<float>&, const fs::path&, const SgdState<float>*, const json&);
template void save_checkpoint(SegModel<double>&, const fs::path&, const SgdState<double>*, const json&);
template void load_checkpoint_into(SegModel<float>&, const fs::path&, SgdState<float>*, json*);
template void load_checkpoint_into(SegModel<double>&, const fs::path&, SgdState<double>*, json*);
template std::unique_ptr<SegModel<float>> load_checkpoint(const fs::path&, SgdState<float>*, json*);
template std::unique_ptr<SegModel<double>> load_checkpoint(const fs::path&, SgdState<double>*, json*);

}  // namespace sconv
