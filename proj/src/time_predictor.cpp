#include "sodiff/time_predictor.hpp"

#include <stdexcept>

#include "sodiff/tensor_util.hpp"

namespace sodiff::timestep {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

// Residual block with a stride-2 main path and a strided 1x1 projection skip.
class DownResImpl : public nn::Module {
public:
    DownResImpl(int64_t in, int64_t out, int64_t groups) {
        conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(2).padding(1)));
        norm1_ = register_module("norm1", nn::GroupNorm(nn::GroupNormOptions(std::min(groups, out), out)));
        conv2_ = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)));
        norm2_ = register_module("norm2", nn::GroupNorm(nn::GroupNormOptions(std::min(groups, out), out)));
        skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(2)));
    }
    torch::Tensor forward(const torch::Tensor& x) {
        auto h = torch::silu(norm1_(conv1_(x)));
        h = norm2_(conv2_(h));
        return torch::silu(h + skip_(x));
    }

private:
    nn::Conv2d conv1_{nullptr};
    nn::GroupNorm norm1_{nullptr};
    nn::Conv2d conv2_{nullptr};
    nn::GroupNorm norm2_{nullptr};
    nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(DownRes);

}  // namespace

torch::Tensor sample_gumbel(at::IntArrayRef shape, torch::Generator& gen, const torch::TensorOptions& opts) {
    auto u = torch::rand(shape, gen, opts).clamp(1e-10, 1.0 - 1e-10);
    return -torch::log(-torch::log(u));
}

torch::Tensor combine(const torch::Tensor& logits, const torch::Tensor& noise, double temperature) {
    if (!(temperature > 0.0)) throw std::domain_error("gumbel_combine: temperature must be > 0");
    auto perturbed = noise.defined() ? logits + noise : logits;
    auto weights = torch::softmax(perturbed / temperature, -1);
    auto index = torch::arange(logits.size(-1), logits.options());
    return (weights * index).sum(-1).clamp(0.0, static_cast<double>(logits.size(-1) - 1));
}

torch::Tensor gumbel_combine(const torch::Tensor& logits, double temperature, uint64_t seed) {
    if (!(temperature > 0.0)) throw std::domain_error("gumbel_combine: temperature must be > 0");
    auto gen = torch::make_generator<at::CPUGeneratorImpl>(seed);
    return combine(logits, sample_gumbel(logits.sizes(), gen, logits.options()), temperature);
}

torch::Tensor bins_to_timesteps(const torch::Tensor& tau_bins, int64_t bins, int64_t timesteps) {
    if (bins < 2) return torch::zeros_like(tau_bins);
    return tau_bins * (static_cast<double>(timesteps - 1) / static_cast<double>(bins - 1));
}

torch::Tensor qf_loss(const torch::Tensor& qf_pred, const torch::Tensor& qf_gt) {
    require_same_shape(qf_pred, qf_gt, "qf_loss");
    return (qf_pred - qf_gt).abs().mean();
}

TimePredictorImpl::TimePredictorImpl(PredictorConfig cfg) : cfg_(cfg) {
    if (cfg_.bins < 1 || cfg_.blocks < 1 || cfg_.channels < 1) throw std::invalid_argument("PredictorConfig: sizes must be positive");
    if (!(cfg_.temperature > 0.0) || !(cfg_.anneal_to > 0.0)) throw std::invalid_argument("PredictorConfig: temperatures must be > 0");
    stem_ = register_module("stem", nn::Conv2d(nn::Conv2dOptions(6, cfg_.channels, 3).padding(1)));
    blocks_ = register_module("blocks", nn::ModuleList());
    int64_t width = cfg_.channels;
    for (int64_t i = 0; i < cfg_.blocks; ++i) {
        const auto next = i == 0 ? width : std::min<int64_t>(width * 2, cfg_.channels * 4);
        blocks_->push_back(DownRes(width, next, cfg_.groups));
        width = next;
    }
    qf_head_ = register_module("qf_head", nn::Linear(width, 1));
    logit_head_ = register_module("logit_head", nn::Linear(width, cfg_.bins));
}

TimestepDistribution TimePredictorImpl::forward(const torch::Tensor& image, torch::Generator* gen,
                                                std::optional<double> temperature) {
    auto x = as_batch(image);
    if (x.size(1) != 3) throw ShapeError("time predictor: expected 3-channel image, got " + shape_string(x));
    // The trunk sees the image and its high-pass residual; codec artifacts live almost entirely in the latter.
    auto blurred = torch::avg_pool2d(F::pad(x, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate)), 3, 1);
    auto h = stem_(torch::cat({x - 0.5, 10.0 * (x - blurred)}, 1));
    for (auto& block : *blocks_) h = block->as<DownRes>()->forward(h);
    auto pooled = h.mean({2, 3});
    auto qf = 1.0 + 99.0 * torch::sigmoid(qf_head_(pooled).squeeze(-1));
    auto logits = logit_head_(pooled);
    torch::Tensor noise;
    if (gen != nullptr) noise = sample_gumbel(logits.sizes(), *gen, logits.options());
    auto tau = combine(logits, noise, temperature.value_or(cfg_.temperature));
    return {logits, tau, qf};
}

}  // namespace sodiff::timestep
