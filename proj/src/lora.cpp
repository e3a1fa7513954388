#include "sodiff/lora.hpp"

#include <cmath>

#include "sodiff/tensor_util.hpp"

namespace sodiff::diffusion {

LoraLinearImpl::LoraLinearImpl(int64_t in, int64_t out, int64_t rank, double scale, bool bias)
    : rank_(rank), scale_(scale) {
    base_ = register_module("base", torch::nn::Linear(torch::nn::LinearOptions(in, out).bias(bias)));
    if (rank_ > 0) {
        down_ = register_parameter("lora_down", torch::empty({rank_, in}));
        up_ = register_parameter("lora_up", torch::zeros({out, rank_}));
        torch::NoGradGuard guard;
        down_.normal_(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    }
}

torch::Tensor LoraLinearImpl::forward(const torch::Tensor& x) {
    auto y = base_(x);
    if (rank_ == 0) return y;
    return y + scale_ * torch::nn::functional::linear(torch::nn::functional::linear(x, down_), up_);
}

bool is_adapter_parameter(const std::string& name) { return name.find(kLoraMarker) != std::string::npos; }

std::vector<torch::Tensor> adapter_parameters(const torch::nn::Module& module) {
    std::vector<torch::Tensor> out;
    for (const auto& item : module.named_parameters()) {
        if (is_adapter_parameter(item.key())) out.push_back(item.value());
    }
    return out;
}

std::vector<torch::Tensor> base_parameters(const torch::nn::Module& module) {
    std::vector<torch::Tensor> out;
    for (const auto& item : module.named_parameters()) {
        if (!is_adapter_parameter(item.key())) out.push_back(item.value());
    }
    return out;
}

uint64_t base_checksum(const torch::nn::Module& module) {
    uint64_t h = 1469598103934665603ULL;
    for (const auto& p : base_parameters(module)) h = h * 31 + tensor_checksum(p);
    return h;
}

void freeze_base(torch::nn::Module& module) {
    for (auto& item : module.named_parameters()) {
        item.value().set_requires_grad(is_adapter_parameter(item.key()));
    }
}

}  // namespace sodiff::diffusion
