#pragma once

#include <filesystem>
#include <memory>

#include "json.hpp"
#include "sconv/sgnet.hpp"
#include "sconv/training.hpp"

namespace sconv {

// A checkpoint directory holds one SCT1 file per tensor and manifest.json:
// {"format", "precision", "network": {...}, "tensors": [{name, shape, dtype,
// file}], "train_state": {...}}. Optimizer velocities are stored under
// "momentum/<param name>".
template <typename T>
void save_checkpoint(SegModel<T>& model, const std::filesystem::path& dir,
                     const SgdState<T>* optimizer = nullptr,
                     const nlohmann::json& train_state = nlohmann::json::object());

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir);

// Rebuilds the model from the stored network config and loads every tensor.
template <typename T>
std::unique_ptr<SegModel<T>> load_checkpoint(const std::filesystem::path& dir,
                                             SgdState<T>* optimizer = nullptr,
                                             nlohmann::json* train_state = nullptr);

// Loads tensors into an existing model with a matching registry.
template <typename T>
void load_checkpoint_into(SegModel<T>& model, const std::filesystem::path& dir,
                          SgdState<T>* optimizer = nullptr, nlohmann::json* train_state = nullptr);

}  // namespace sconv
