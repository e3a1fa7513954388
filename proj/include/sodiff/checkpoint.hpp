#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

// Single-file archive: 8-byte magic "SODIFFCK", little-endian u64 header length, a JSON
// header (kind, config, config_hash, tensor table, free-form meta), then raw tensor bytes.
namespace sodiff {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using TensorMap = std::map<std::string, torch::Tensor>;

struct Checkpoint {
    std::string kind;
    nlohmann::json config;
    std::string config_hash;
    nlohmann::json meta = nlohmann::json::object();
    TensorMap tensors;
};

/// Stable FNV-1a hash of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters and buffers of `module` whose names pass `keep`, prefixed with `prefix`.
TensorMap module_state(const torch::nn::Module& module, const std::string& prefix = "",
                       const std::function<bool(const std::string&)>& keep = {});

/// Copies matching entries into `module`. With `strict`, every parameter/buffer passing
/// `keep` must be present with the same shape.
void load_module_state(torch::nn::Module& module, const TensorMap& tensors, const std::string& prefix = "",
                       bool strict = true, const std::function<bool(const std::string&)>& keep = {});

/// Round-trips an optimizer through LibTorch serialization as a byte tensor.
torch::Tensor serialize_optimizer(torch::optim::Optimizer& optimizer);
void deserialize_optimizer(torch::optim::Optimizer& optimizer, const torch::Tensor& bytes);

torch::Tensor string_to_tensor(const std::string& text);
std::string tensor_to_string(const torch::Tensor& bytes);

}  // namespace sodiff
