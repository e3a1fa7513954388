#pragma once

#include <json.hpp>
#include <torch/torch.h>

namespace sodiff::diffusion {

struct AutoencoderConfig {
    int64_t latent_channels = 4;
    int64_t base_channels = 32;
    int64_t groups = 8;
    double kl_weight = 1e-6;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AutoencoderConfig, latent_channels, base_channels, groups, kl_weight)

/// GroupNorm-SiLU-conv residual block, optionally conditioned on a time embedding.
class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(int64_t in, int64_t out, int64_t groups, int64_t time_dim = 0);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb = {});

private:
    torch::nn::GroupNorm norm1_{nullptr};
    torch::nn::Conv2d conv1_{nullptr};
    torch::nn::GroupNorm norm2_{nullptr};
    torch::nn::Conv2d conv2_{nullptr};
    torch::nn::Linear time_proj_{nullptr};
    torch::nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(ResBlock);

struct Posterior {
    torch::Tensor mean;
    torch::Tensor logvar;
};

/// Small 4x-downsampling VAE standing in for the latent-diffusion autoencoder.
/// Latents returned by encode()/accepted by decode() are multiplied by `latent_scale`
/// (fixed after pre-training) so the diffusion prior sees roughly unit variance.
class AutoencoderImpl : public torch::nn::Module {
public:
    explicit AutoencoderImpl(AutoencoderConfig cfg);

    static constexpr int64_t kFactor = 4;

    Posterior posterior(const torch::Tensor& image);
    torch::Tensor encode(const torch::Tensor& image);   // scaled posterior mean
    torch::Tensor decode(const torch::Tensor& latent);  // expects scaled latents

    double latent_scale() const;
    void set_latent_scale(double scale);

    const AutoencoderConfig& config() const { return cfg_; }

private:
    torch::Tensor decode_unscaled(const torch::Tensor& z);

    AutoencoderConfig cfg_;
    torch::nn::Sequential enc_{nullptr};
    torch::nn::Conv2d to_moments_{nullptr};
    torch::nn::Sequential dec_{nullptr};
    torch::Tensor scale_;  // buffer [1]
};
TORCH_MODULE(Autoencoder);

struct AutoencoderLoss {
    torch::Tensor total;
    torch::Tensor recon;
    torch::Tensor kl;
};

/// L2 reconstruction on a reparameterised sample plus a small KL to N(0, I).
AutoencoderLoss autoencoder_loss(Autoencoder& ae, const torch::Tensor& image, torch::Generator& gen);

}  // namespace sodiff::diffusion
