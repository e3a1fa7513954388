#pragma once

#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "sodiff/autoencoder.hpp"
#include "sodiff/lora.hpp"

namespace sodiff::diffusion {

struct UnetConfig {
    std::vector<int64_t> channels = {64, 128, 256};
    int64_t latent_channels = 4;
    int64_t context_dim = 64;
    int64_t heads = 4;
    int64_t groups = 8;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(UnetConfig, channels, latent_channels, context_dim, heads, groups)

/// Multi-head attention whose q/k/v/out projections may carry low-rank adapters.
class AttentionImpl : public torch::nn::Module {
public:
    AttentionImpl(int64_t dim, int64_t context_dim, int64_t heads, const LoraConfig& lora);
    /// x: [N,S,dim]; context: [N,L,context_dim] (self-attention when undefined)
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context = {});

private:
    int64_t dim_;
    int64_t heads_;
    LoraLinear to_q_{nullptr};
    LoraLinear to_k_{nullptr};
    LoraLinear to_v_{nullptr};
    LoraLinear to_out_{nullptr};
};
TORCH_MODULE(Attention);

/// Spatial transformer: self-attention, cross-attention on the prompt, feed-forward.
class TransformerBlockImpl : public torch::nn::Module {
public:
    TransformerBlockImpl(int64_t channels, int64_t context_dim, int64_t heads, int64_t groups, const LoraConfig& lora);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

private:
    torch::nn::GroupNorm norm_{nullptr};
    torch::nn::Conv2d proj_in_{nullptr};
    torch::nn::LayerNorm ln1_{nullptr};
    torch::nn::LayerNorm ln2_{nullptr};
    torch::nn::LayerNorm ln3_{nullptr};
    Attention self_attn_{nullptr};
    Attention cross_attn_{nullptr};
    torch::nn::Sequential ff_{nullptr};
    torch::nn::Conv2d proj_out_{nullptr};
};
TORCH_MODULE(TransformerBlock);

/// Shared time embedding: sinusoidal code of the (real) timestep followed by an MLP.
class TimeEmbeddingImpl : public torch::nn::Module {
public:
    TimeEmbeddingImpl(int64_t base, int64_t dim);
    torch::Tensor forward(const torch::Tensor& tau);

private:
    int64_t base_;
    torch::nn::Linear fc1_{nullptr};
    torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(TimeEmbedding);

/// Down path (conv_in, per level: residual block + transformer block, stride-2 downsample).
/// Also serves as the discriminator backbone.
class UnetEncoderImpl : public torch::nn::Module {
public:
    UnetEncoderImpl(const UnetConfig& cfg, const LoraConfig& lora);
    /// Returns per-level skip activations; the last entry is the deepest feature map.
    std::vector<torch::Tensor> forward(const torch::Tensor& z, const torch::Tensor& temb, const torch::Tensor& context);

private:
    torch::nn::Conv2d conv_in_{nullptr};
    torch::nn::ModuleList res_{nullptr};
    torch::nn::ModuleList attn_{nullptr};
    torch::nn::ModuleList down_{nullptr};
};
TORCH_MODULE(UnetEncoder);

/// epsilon_theta(z; e_img, tau): conditional noise-prediction UNet.
class UnetImpl : public torch::nn::Module {
public:
    UnetImpl(UnetConfig cfg, LoraConfig lora);

    torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& tau, const torch::Tensor& prompt);

    const UnetConfig& config() const { return cfg_; }
    const LoraConfig& lora_config() const { return lora_; }
    UnetEncoder& encoder() { return encoder_; }
    TimeEmbedding& time_embedding() { return time_; }

private:
    UnetConfig cfg_;
    LoraConfig lora_;
    TimeEmbedding time_{nullptr};
    UnetEncoder encoder_{nullptr};
    ResBlock mid_{nullptr};
    torch::nn::ModuleList up_res_{nullptr};
    torch::nn::ModuleList up_attn_{nullptr};
    torch::nn::ModuleList upsample_{nullptr};
    torch::nn::GroupNorm out_norm_{nullptr};
    torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(Unet);

/// Standard epsilon-prediction denoising objective, used to pre-train the base UNet prior.
torch::Tensor denoising_loss(Unet& unet, const torch::Tensor& z_clean, const torch::Tensor& prompt,
                             const torch::Tensor& alpha_bar_table, torch::Generator& gen);

}  // namespace sodiff::diffusion
