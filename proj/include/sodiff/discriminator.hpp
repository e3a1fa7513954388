#pragma once

#include <json.hpp>
#include <torch/torch.h>

#include "sodiff/diffusion.hpp"
#include "sodiff/losses.hpp"
#include "sodiff/unet.hpp"

namespace sodiff::losses {

struct DiscriminatorConfig {
    int64_t prompt_features = 32;  // width of the pooled e_img projection fed to the head
    bool init_from_unet = true;    // start from the base UNet's encoder half
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DiscriminatorConfig, prompt_features, init_from_unet)

/// D(F(z, t)): the UNet encoder half over noised latents, conditioned on t through the
/// same sinusoidal time embedding, followed by a pooled sigmoid head that also sees a
/// pooled projection of e_img.
class DiscriminatorImpl : public torch::nn::Module {
public:
    DiscriminatorImpl(const diffusion::UnetConfig& unet_cfg, DiscriminatorConfig cfg);

    /// Copies encoder-half and time-embedding weights from a trained UNet (adapters excluded).
    void load_backbone(diffusion::Unet& unet);

    /// Probability that each noised latent is real, [N].
    torch::Tensor forward(const torch::Tensor& noised, const torch::Tensor& t, const torch::Tensor& prompt);

    const DiscriminatorConfig& config() const { return cfg_; }

private:
    DiscriminatorConfig cfg_;
    diffusion::TimeEmbedding time_{nullptr};
    diffusion::UnetEncoder encoder_{nullptr};
    torch::nn::Linear prompt_proj_{nullptr};
    torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(Discriminator);

struct GanLosses {
    torch::Tensor generator;      // L_G, differentiable w.r.t. the fake latent
    torch::Tensor discriminator;  // L_D, fake latent detached
};

/// Samples one t per batch element for each expectation and evaluates both terms.
GanLosses gan_losses(const torch::Tensor& fake, const torch::Tensor& real, const torch::Tensor& prompt,
                     Discriminator& disc, const diffusion::NoiseSchedule& schedule, torch::Generator& gen);

/// L_G only (no discriminator graph for L_D is built).
torch::Tensor gan_generator_loss(const torch::Tensor& fake, const torch::Tensor& prompt, Discriminator& disc,
                                 const diffusion::NoiseSchedule& schedule, torch::Generator& gen);

/// L_D only, with `fake` detached.
torch::Tensor gan_discriminator_loss(const torch::Tensor& fake, const torch::Tensor& real, const torch::Tensor& prompt,
                                     Discriminator& disc, const diffusion::NoiseSchedule& schedule,
                                     torch::Generator& gen);

}  // namespace sodiff::losses
