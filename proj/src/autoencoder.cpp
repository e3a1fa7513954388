#include "sodiff/autoencoder.hpp"

#include "sodiff/tensor_util.hpp"

namespace sodiff::diffusion {

namespace nn = torch::nn;

ResBlockImpl::ResBlockImpl(int64_t in, int64_t out, int64_t groups, int64_t time_dim) {
    norm1_ = register_module("norm1", nn::GroupNorm(nn::GroupNormOptions(std::min(groups, in), in)));
    conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
    norm2_ = register_module("norm2", nn::GroupNorm(nn::GroupNormOptions(std::min(groups, out), out)));
    conv2_ = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)));
    if (time_dim > 0) time_proj_ = register_module("time_proj", nn::Linear(time_dim, out));
    if (in != out) skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
    auto h = conv1_(torch::silu(norm1_(x)));
    if (!time_proj_.is_empty() && temb.defined()) h = h + time_proj_(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2_(torch::silu(norm2_(h)));
    return (skip_.is_empty() ? x : skip_(x)) + h;
}

namespace {

// Wraps ResBlock so it can live inside an nn::Sequential (single-argument forward).
class PlainResImpl : public nn::Module {
public:
    PlainResImpl(int64_t in, int64_t out, int64_t groups) { block_ = register_module("block", ResBlock(in, out, groups)); }
    torch::Tensor forward(const torch::Tensor& x) { return block_(x); }

private:
    ResBlock block_{nullptr};
};
TORCH_MODULE(PlainRes);

}  // namespace

AutoencoderImpl::AutoencoderImpl(AutoencoderConfig cfg) : cfg_(cfg) {
    const auto c = cfg_.base_channels;
    const auto g = cfg_.groups;
    enc_ = register_module(
        "encoder",
        nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, c, 3).padding(1)), PlainRes(c, c, g),
                       nn::Conv2d(nn::Conv2dOptions(c, 2 * c, 3).stride(2).padding(1)), PlainRes(2 * c, 2 * c, g),
                       nn::Conv2d(nn::Conv2dOptions(2 * c, 2 * c, 3).stride(2).padding(1)), PlainRes(2 * c, 2 * c, g),
                       nn::GroupNorm(nn::GroupNormOptions(g, 2 * c)), nn::SiLU()));
    to_moments_ = register_module("to_moments",
                                  nn::Conv2d(nn::Conv2dOptions(2 * c, 2 * cfg_.latent_channels, 3).padding(1)));
    dec_ = register_module(
        "decoder",
        nn::Sequential(nn::Conv2d(nn::Conv2dOptions(cfg_.latent_channels, 2 * c, 3).padding(1)),
                       PlainRes(2 * c, 2 * c, g),
                       nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2, 2}).mode(torch::kNearest)),
                       nn::Conv2d(nn::Conv2dOptions(2 * c, 2 * c, 3).padding(1)), PlainRes(2 * c, 2 * c, g),
                       nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2, 2}).mode(torch::kNearest)),
                       nn::Conv2d(nn::Conv2dOptions(2 * c, c, 3).padding(1)), PlainRes(c, c, g),
                       nn::GroupNorm(nn::GroupNormOptions(g, c)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(c, 3, 3).padding(1))));
    scale_ = register_buffer("latent_scale", torch::ones({1}));
}

Posterior AutoencoderImpl::posterior(const torch::Tensor& image) {
    auto x = as_batch(image);
    if (x.size(1) != 3 || x.size(2) % kFactor != 0 || x.size(3) % kFactor != 0) {
        throw ShapeError("ae_encode: expected [N,3,H,W] with H, W divisible by 4, got " + shape_string(x));
    }
    auto moments = to_moments_(enc_->forward(x * 2.0 - 1.0));
    auto parts = moments.chunk(2, 1);
    return {parts[0], parts[1].clamp(-30.0, 20.0)};
}

torch::Tensor AutoencoderImpl::encode(const torch::Tensor& image) { return posterior(image).mean * scale_; }

torch::Tensor AutoencoderImpl::decode_unscaled(const torch::Tensor& z) { return (dec_->forward(z) + 1.0) * 0.5; }

torch::Tensor AutoencoderImpl::decode(const torch::Tensor& latent) {
    require_rank(latent, 4, "ae_decode");
    if (latent.size(1) != cfg_.latent_channels) {
        throw ShapeError("ae_decode: expected " + std::to_string(cfg_.latent_channels) + " latent channels, got " +
                         shape_string(latent));
    }
    return decode_unscaled(latent / scale_);
}

double AutoencoderImpl::latent_scale() const { return scale_.item<double>(); }

void AutoencoderImpl::set_latent_scale(double scale) {
    torch::NoGradGuard guard;
    scale_.fill_(scale);
}

AutoencoderLoss autoencoder_loss(Autoencoder& ae, const torch::Tensor& image, torch::Generator& gen) {
    auto post = ae->posterior(image);
    auto noise = torch::randn(post.mean.sizes(), gen, post.mean.options());
    auto z = post.mean + torch::exp(0.5 * post.logvar) * noise;
    // decode() divides by the latent scale; undo it so training sees raw posterior samples.
    auto recon = ae->decode(z * ae->latent_scale());
    auto l2 = (recon - as_batch(image)).pow(2).mean();
    auto kl = 0.5 * (post.mean.pow(2) + post.logvar.exp() - 1.0 - post.logvar).mean();
    return {l2 + ae->config().kl_weight * kl, l2, kl};
}

}  // namespace sodiff::diffusion
