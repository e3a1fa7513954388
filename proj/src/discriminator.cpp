#include "sodiff/discriminator.hpp"

#include "sodiff/lora.hpp"
#include "sodiff/tensor_util.hpp"

namespace sodiff::losses {

namespace {

diffusion::LoraConfig no_adapters() {
    diffusion::LoraConfig cfg;
    cfg.enabled = false;
    return cfg;
}

torch::Tensor noised_at_random_t(const torch::Tensor& z, const diffusion::NoiseSchedule& schedule,
                                 torch::Generator& gen, torch::Tensor& t_out) {
    const auto n = z.size(0);
    t_out = torch::randint(0, schedule.timesteps(), {n}, gen, torch::TensorOptions().dtype(torch::kLong));
    auto eps = torch::randn(z.sizes(), gen, z.options());
    auto a = schedule.alpha_bar().index({t_out}).to(z.scalar_type());
    return diffusion::add_noise(z, eps, a);
}

}  // namespace

DiscriminatorImpl::DiscriminatorImpl(const diffusion::UnetConfig& unet_cfg, DiscriminatorConfig cfg) : cfg_(cfg) {
    const auto base = unet_cfg.channels.front();
    time_ = register_module("time", diffusion::TimeEmbedding(base, 4 * base));
    encoder_ = register_module("encoder", diffusion::UnetEncoder(unet_cfg, no_adapters()));
    prompt_proj_ = register_module("prompt_proj", torch::nn::Linear(unet_cfg.context_dim, cfg_.prompt_features));
    head_ = register_module("head", torch::nn::Linear(unet_cfg.channels.back() + cfg_.prompt_features, 1));
}

void DiscriminatorImpl::load_backbone(diffusion::Unet& unet) {
    torch::NoGradGuard guard;
    auto copy_from = [](torch::nn::Module& dst, torch::nn::Module& src) {
        auto source = src.named_parameters();
        for (auto& item : dst.named_parameters()) {
            if (auto* p = source.find(item.key())) item.value().copy_(*p);
        }
    };
    copy_from(*time_, *unet->time_embedding());
    copy_from(*encoder_, *unet->encoder());
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& noised, const torch::Tensor& t, const torch::Tensor& prompt) {
    auto temb = time_(t.to(noised.scalar_type()));
    auto deepest = encoder_(noised, temb, prompt).back().mean({2, 3});
    auto pooled_prompt = prompt_proj_(prompt.mean(1));
    return torch::sigmoid(head_(torch::cat({deepest, pooled_prompt}, 1)).squeeze(-1));
}

torch::Tensor gan_generator_loss(const torch::Tensor& fake, const torch::Tensor& prompt, Discriminator& disc,
                                 const diffusion::NoiseSchedule& schedule, torch::Generator& gen) {
    torch::Tensor t;
    auto noised = noised_at_random_t(fake, schedule, gen, t);
    return generator_loss(disc->forward(noised, t, prompt));
}

torch::Tensor gan_discriminator_loss(const torch::Tensor& fake, const torch::Tensor& real, const torch::Tensor& prompt,
                                     Discriminator& disc, const diffusion::NoiseSchedule& schedule,
                                     torch::Generator& gen) {
    torch::Tensor t_fake;
    torch::Tensor t_real;
    auto noised_fake = noised_at_random_t(fake.detach(), schedule, gen, t_fake);
    auto noised_real = noised_at_random_t(real.detach(), schedule, gen, t_real);
    return discriminator_loss(disc->forward(noised_fake, t_fake, prompt.detach()),
                              disc->forward(noised_real, t_real, prompt.detach()));
}

GanLosses gan_losses(const torch::Tensor& fake, const torch::Tensor& real, const torch::Tensor& prompt,
                     Discriminator& disc, const diffusion::NoiseSchedule& schedule, torch::Generator& gen) {
    require_same_shape(fake, real, "gan_losses");
    auto g = gan_generator_loss(fake, prompt, disc, schedule, gen);
    auto d = gan_discriminator_loss(fake, real, prompt, disc, schedule, gen);
    return {g, d};
}

}  // namespace sodiff::losses
