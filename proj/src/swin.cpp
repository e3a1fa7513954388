#include "sodiff/swin.hpp"

#include <cmath>
#include <stdexcept>

#include "sodiff/tensor_util.hpp"

namespace sodiff::saipe {

namespace F = torch::nn::functional;

namespace {

// [B,H,W,C] -> [B*nW, w*w, C]
torch::Tensor partition(const torch::Tensor& x, int64_t w) {
    const auto b = x.size(0), h = x.size(1), wd = x.size(2), c = x.size(3);
    return x.view({b, h / w, w, wd / w, w, c}).permute({0, 1, 3, 2, 4, 5}).reshape({-1, w * w, c});
}

torch::Tensor merge(const torch::Tensor& windows, int64_t w, int64_t b, int64_t h, int64_t wd) {
    const auto c = windows.size(-1);
    return windows.view({b, h / w, wd / w, w, w, c}).permute({0, 1, 3, 2, 4, 5}).reshape({b, h, wd, c});
}

}  // namespace

WindowAttentionImpl::WindowAttentionImpl(int64_t dim, int64_t window, int64_t heads)
    : dim_(dim), window_(window), heads_(heads) {
    if (dim % heads != 0) throw std::invalid_argument("window attention: dim must be divisible by heads");
    scale_ = 1.0 / std::sqrt(static_cast<double>(dim / heads));
    qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
    proj_ = register_module("proj", torch::nn::Linear(dim, dim));
    bias_table_ = register_parameter("relative_position_bias", torch::zeros({(2 * window - 1) * (2 * window - 1), heads}));
    trunc_normal_(bias_table_);

    auto coords = torch::stack(torch::meshgrid({torch::arange(window), torch::arange(window)}, "ij")).flatten(1);
    auto rel = (coords.unsqueeze(2) - coords.unsqueeze(1)).permute({1, 2, 0}) + (window - 1);
    auto index = rel.select(2, 0) * (2 * window - 1) + rel.select(2, 1);
    bias_index_ = register_buffer("relative_position_index", index.flatten().to(torch::kLong));
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& windows, const torch::Tensor& mask) {
    const auto bn = windows.size(0);
    const auto n = windows.size(1);
    const auto head_dim = dim_ / heads_;
    auto qkv = qkv_(windows).view({bn, n, 3, heads_, head_dim}).permute({2, 0, 3, 1, 4});
    auto q = qkv[0] * scale_;
    auto k = qkv[1];
    auto v = qkv[2];
    auto attn = torch::matmul(q, k.transpose(-2, -1));
    auto bias = bias_table_.index_select(0, bias_index_.to(torch::kLong)).view({n, n, heads_}).permute({2, 0, 1});
    attn = attn + bias.unsqueeze(0);
    if (mask.defined()) {
        const auto nw = mask.size(0);
        attn = attn.view({bn / nw, nw, heads_, n, n}) + mask.unsqueeze(1).unsqueeze(0);
        attn = attn.view({bn, heads_, n, n});
    }
    attn = torch::softmax(attn, -1);
    auto out = torch::matmul(attn, v).transpose(1, 2).reshape({bn, n, dim_});
    return proj_(out);
}

SwinLayerImpl::SwinLayerImpl(int64_t dim, int64_t heads, int64_t window, bool shifted, double mlp_ratio)
    : window_(window), shifted_(shifted) {
    norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn_ = register_module("attn", WindowAttention(dim, window, heads));
    const auto hidden = static_cast<int64_t>(std::lround(dim * mlp_ratio));
    mlp_ = register_module("mlp", torch::nn::Sequential(torch::nn::Linear(dim, hidden), torch::nn::GELU(),
                                                        torch::nn::Linear(hidden, dim)));
}

torch::Tensor SwinLayerImpl::attention_mask(int64_t ph, int64_t pw, const torch::TensorOptions& opts) {
    const auto key = std::make_pair(ph, pw);
    auto it = mask_cache_.find(key);
    if (it != mask_cache_.end() && it->second.dtype() == opts.dtype()) return it->second;

    const auto shift = window_ / 2;
    auto regions = torch::zeros({1, ph, pw, 1}, opts);
    const int64_t hs[4] = {0, ph - window_, ph - shift, ph};
    const int64_t ws[4] = {0, pw - window_, pw - shift, pw};
    double label = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            regions.slice(1, hs[i], hs[i + 1]).slice(2, ws[j], ws[j + 1]).fill_(label);
            label += 1.0;
        }
    auto ids = partition(regions, window_).squeeze(-1);  // [nW, N]
    auto diff = ids.unsqueeze(1) - ids.unsqueeze(2);
    auto mask = torch::where(diff != 0, torch::full_like(diff, -100.0), torch::zeros_like(diff));
    mask_cache_[key] = mask;
    return mask;
}

torch::Tensor SwinLayerImpl::forward(const torch::Tensor& x) {
    const auto b = x.size(0), h = x.size(1), w = x.size(2);
    auto y = norm1_(x);
    const auto pad_h = (window_ - h % window_) % window_;
    const auto pad_w = (window_ - w % window_) % window_;
    if (pad_h > 0 || pad_w > 0) y = F::pad(y, F::PadFuncOptions({0, 0, 0, pad_w, 0, pad_h}));
    const auto ph = h + pad_h, pw = w + pad_w;
    const bool shift = shifted_ && ph > window_ && pw > window_;
    torch::Tensor mask;
    if (shift) {
        y = torch::roll(y, {-window_ / 2, -window_ / 2}, {1, 2});
        mask = attention_mask(ph, pw, y.options());
    }
    auto windows = attn_(partition(y, window_), mask);
    y = merge(windows, window_, b, ph, pw);
    if (shift) y = torch::roll(y, {window_ / 2, window_ / 2}, {1, 2});
    y = y.slice(1, 0, h).slice(2, 0, w);
    auto out = x + y;
    return out + mlp_->forward(norm2_(out));
}

ResidualSwinBlockImpl::ResidualSwinBlockImpl(int64_t dim, int64_t depth, int64_t heads, int64_t window,
                                             double mlp_ratio) {
    layers_ = register_module("layers", torch::nn::ModuleList());
    for (int64_t i = 0; i < depth; ++i) {
        layers_->push_back(SwinLayer(dim, heads, window, i % 2 == 1, mlp_ratio));
    }
    conv_ = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 3).padding(1)));
}

torch::Tensor ResidualSwinBlockImpl::forward(const torch::Tensor& x) {
    auto tokens = x.permute({0, 2, 3, 1});
    for (auto& layer : *layers_) tokens = layer->as<SwinLayer>()->forward(tokens);
    return conv_(tokens.permute({0, 3, 1, 2}).contiguous()) + x;
}

ChannelNormImpl::ChannelNormImpl(int64_t channels) {
    norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
}

torch::Tensor ChannelNormImpl::forward(const torch::Tensor& x) {
    return norm_(x.permute({0, 2, 3, 1})).permute({0, 3, 1, 2}).contiguous();
}

}  // namespace sodiff::saipe
