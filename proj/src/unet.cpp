#include "sodiff/unet.hpp"

#include <algorithm>
#include <cmath>

#include "sodiff/diffusion.hpp"
#include "sodiff/tensor_util.hpp"

namespace sodiff::diffusion {

namespace nn = torch::nn;

namespace {

int64_t rank_for(const LoraConfig& lora, const std::string& name) {
    if (!lora.enabled) return 0;
    return std::find(lora.targets.begin(), lora.targets.end(), name) != lora.targets.end() ? lora.rank : 0;
}

}  // namespace

AttentionImpl::AttentionImpl(int64_t dim, int64_t context_dim, int64_t heads, const LoraConfig& lora)
    : dim_(dim), heads_(heads) {
    if (dim % heads != 0) throw std::invalid_argument("attention: dim must be divisible by heads");
    to_q_ = register_module("to_q", LoraLinear(dim, dim, rank_for(lora, "to_q"), lora.scale, false));
    to_k_ = register_module("to_k", LoraLinear(context_dim, dim, rank_for(lora, "to_k"), lora.scale, false));
    to_v_ = register_module("to_v", LoraLinear(context_dim, dim, rank_for(lora, "to_v"), lora.scale, false));
    to_out_ = register_module("to_out", LoraLinear(dim, dim, rank_for(lora, "to_out"), lora.scale, true));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
    const auto& ctx = context.defined() ? context : x;
    const auto n = x.size(0);
    const auto hd = dim_ / heads_;
    auto q = to_q_(x).view({n, -1, heads_, hd}).transpose(1, 2);
    auto k = to_k_(ctx).view({n, -1, heads_, hd}).transpose(1, 2);
    auto v = to_v_(ctx).view({n, -1, heads_, hd}).transpose(1, 2);
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
    return to_out_(torch::matmul(attn, v).transpose(1, 2).reshape({n, -1, dim_}));
}

TransformerBlockImpl::TransformerBlockImpl(int64_t channels, int64_t context_dim, int64_t heads, int64_t groups,
                                           const LoraConfig& lora) {
    norm_ = register_module("norm", nn::GroupNorm(nn::GroupNormOptions(std::min(groups, channels), channels)));
    proj_in_ = register_module("proj_in", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)));
    ln1_ = register_module("ln1", nn::LayerNorm(nn::LayerNormOptions({channels})));
    ln2_ = register_module("ln2", nn::LayerNorm(nn::LayerNormOptions({channels})));
    ln3_ = register_module("ln3", nn::LayerNorm(nn::LayerNormOptions({channels})));
    self_attn_ = register_module("self_attn", Attention(channels, channels, heads, lora));
    cross_attn_ = register_module("cross_attn", Attention(channels, context_dim, heads, lora));
    ff_ = register_module("ff", nn::Sequential(nn::Linear(channels, 4 * channels), nn::GELU(),
                                               nn::Linear(4 * channels, channels)));
    proj_out_ = register_module("proj_out", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
    const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    auto tokens = proj_in_(norm_(x)).flatten(2).transpose(1, 2);
    tokens = tokens + self_attn_(ln1_(tokens));
    tokens = tokens + cross_attn_(ln2_(tokens), context);
    tokens = tokens + ff_->forward(ln3_(tokens));
    return x + proj_out_(tokens.transpose(1, 2).reshape({n, c, h, w}));
}

TimeEmbeddingImpl::TimeEmbeddingImpl(int64_t base, int64_t dim) : base_(base) {
    fc1_ = register_module("fc1", nn::Linear(base, dim));
    fc2_ = register_module("fc2", nn::Linear(dim, dim));
}

torch::Tensor TimeEmbeddingImpl::forward(const torch::Tensor& tau) {
    return fc2_(torch::silu(fc1_(timestep_embedding(tau, base_))));
}

UnetEncoderImpl::UnetEncoderImpl(const UnetConfig& cfg, const LoraConfig& lora) {
    const auto& ch = cfg.channels;
    const auto time_dim = 4 * ch.front();
    conv_in_ = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(cfg.latent_channels, ch.front(), 3).padding(1)));
    res_ = register_module("res", nn::ModuleList());
    attn_ = register_module("attn", nn::ModuleList());
    down_ = register_module("down", nn::ModuleList());
    int64_t prev = ch.front();
    for (size_t i = 0; i < ch.size(); ++i) {
        res_->push_back(ResBlock(prev, ch[i], cfg.groups, time_dim));
        attn_->push_back(TransformerBlock(ch[i], cfg.context_dim, cfg.heads, cfg.groups, lora));
        if (i + 1 < ch.size()) down_->push_back(nn::Conv2d(nn::Conv2dOptions(ch[i], ch[i], 3).stride(2).padding(1)));
        prev = ch[i];
    }
}

std::vector<torch::Tensor> UnetEncoderImpl::forward(const torch::Tensor& z, const torch::Tensor& temb,
                                                    const torch::Tensor& context) {
    std::vector<torch::Tensor> skips;
    auto h = conv_in_(z);
    for (size_t i = 0; i < res_->size(); ++i) {
        h = res_[i]->as<ResBlock>()->forward(h, temb);
        h = attn_[i]->as<TransformerBlock>()->forward(h, context);
        skips.push_back(h);
        if (i < down_->size()) h = down_[i]->as<nn::Conv2d>()->forward(h);
    }
    return skips;
}

UnetImpl::UnetImpl(UnetConfig cfg, LoraConfig lora) : cfg_(std::move(cfg)), lora_(std::move(lora)) {
    const auto& ch = cfg_.channels;
    if (ch.empty()) throw std::invalid_argument("UnetConfig: channels must not be empty");
    const auto time_dim = 4 * ch.front();
    time_ = register_module("time", TimeEmbedding(ch.front(), time_dim));
    encoder_ = register_module("encoder", UnetEncoder(cfg_, lora_));
    mid_ = register_module("mid", ResBlock(ch.back(), ch.back(), cfg_.groups, time_dim));
    up_res_ = register_module("up_res", nn::ModuleList());
    up_attn_ = register_module("up_attn", nn::ModuleList());
    upsample_ = register_module("upsample", nn::ModuleList());
    for (size_t j = 0; j < ch.size(); ++j) {
        const auto i = ch.size() - 1 - j;
        up_res_->push_back(ResBlock(2 * ch[i], ch[i], cfg_.groups, time_dim));
        up_attn_->push_back(TransformerBlock(ch[i], cfg_.context_dim, cfg_.heads, cfg_.groups, lora_));
        if (i > 0) upsample_->push_back(nn::Conv2d(nn::Conv2dOptions(ch[i], ch[i - 1], 3).padding(1)));
    }
    out_norm_ = register_module("out_norm", nn::GroupNorm(nn::GroupNormOptions(std::min(cfg_.groups, ch.front()), ch.front())));
    conv_out_ = register_module("conv_out", nn::Conv2d(nn::Conv2dOptions(ch.front(), cfg_.latent_channels, 3).padding(1)));
}

torch::Tensor UnetImpl::forward(const torch::Tensor& z, const torch::Tensor& tau, const torch::Tensor& prompt) {
    require_rank(z, 4, "predict_noise latent");
    require_rank(prompt, 3, "predict_noise prompt");
    if (z.size(1) != cfg_.latent_channels) throw ShapeError("predict_noise: latent channel mismatch " + shape_string(z));
    if (prompt.size(2) != cfg_.context_dim) {
        throw ShapeError("predict_noise: prompt width " + std::to_string(prompt.size(2)) + " does not match UNet context " +
                         std::to_string(cfg_.context_dim));
    }
    const auto levels = static_cast<int64_t>(cfg_.channels.size());
    const auto factor = int64_t{1} << (levels - 1);
    if (z.size(2) % factor != 0 || z.size(3) % factor != 0) {
        throw ShapeError("predict_noise: latent size must be divisible by " + std::to_string(factor));
    }
    auto t = tau.reshape({-1}).to(z.scalar_type());
    if (t.size(0) == 1 && z.size(0) > 1) t = t.expand({z.size(0)});
    auto temb = time_(t);
    auto skips = encoder_(z, temb, prompt);
    auto h = mid_(skips.back(), temb);
    for (size_t j = 0; j < up_res_->size(); ++j) {
        const auto i = skips.size() - 1 - j;
        h = up_res_[j]->as<ResBlock>()->forward(torch::cat({h, skips[i]}, 1), temb);
        h = up_attn_[j]->as<TransformerBlock>()->forward(h, prompt);
        if (j < upsample_->size()) {
            h = torch::upsample_nearest2d(h, std::vector<int64_t>{h.size(2) * 2, h.size(3) * 2});
            h = upsample_[j]->as<nn::Conv2d>()->forward(h);
        }
    }
    return conv_out_(torch::silu(out_norm_(h)));
}

torch::Tensor denoising_loss(Unet& unet, const torch::Tensor& z_clean, const torch::Tensor& prompt,
                             const torch::Tensor& alpha_bar_table, torch::Generator& gen) {
    const auto n = z_clean.size(0);
    auto t = torch::randint(0, alpha_bar_table.size(0), {n}, gen, torch::TensorOptions().dtype(torch::kLong));
    auto eps = torch::randn(z_clean.sizes(), gen, z_clean.options());
    auto a = alpha_bar_table.index({t}).to(z_clean.scalar_type());
    auto noisy = add_noise(z_clean, eps, a);
    return (unet->forward(noisy, t.to(z_clean.scalar_type()), prompt) - eps).pow(2).mean();
}

}  // namespace sodiff::diffusion
