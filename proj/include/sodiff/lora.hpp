#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace sodiff::diffusion {

struct LoraConfig {
    bool enabled = true;
    int64_t rank = 16;
    double scale = 1.0;
    std::vector<std::string> targets = {"to_q", "to_k", "to_v", "to_out"};
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LoraConfig, enabled, rank, scale, targets)

/// Linear layer with an optional additive low-rank delta: y = W x + b + scale * B (A x).
/// B starts at zero so a fresh adapter leaves the base output bit-identical.
class LoraLinearImpl : public torch::nn::Module {
public:
    LoraLinearImpl(int64_t in, int64_t out, int64_t rank, double scale, bool bias = true);

    torch::Tensor forward(const torch::Tensor& x);

    bool has_adapter() const { return rank_ > 0; }
    torch::nn::Linear& base() { return base_; }

private:
    int64_t rank_;
    double scale_;
    torch::nn::Linear base_{nullptr};
    torch::Tensor down_;  // A: [rank, in]
    torch::Tensor up_;    // B: [out, rank]
};
TORCH_MODULE(LoraLinear);

/// Parameter names that belong to adapters carry this marker.
inline constexpr const char* kLoraMarker = "lora_";

bool is_adapter_parameter(const std::string& name);
std::vector<torch::Tensor> adapter_parameters(const torch::nn::Module& module);
std::vector<torch::Tensor> base_parameters(const torch::nn::Module& module);

/// Checksum over base (non-adapter) parameters only.
uint64_t base_checksum(const torch::nn::Module& module);

/// Freezes base weights and leaves adapters trainable.
void freeze_base(torch::nn::Module& module);

}  // namespace sodiff::diffusion
