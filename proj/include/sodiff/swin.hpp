#pragma once

#include <map>
#include <utility>

#include <torch/torch.h>

// Window-attention transformer blocks in the SwinIR layout. Feature maps cross module
// boundaries as NCHW; tokens are NHWC inside a layer.
namespace sodiff::saipe {

class WindowAttentionImpl : public torch::nn::Module {
public:
    WindowAttentionImpl(int64_t dim, int64_t window, int64_t heads);

    /// windows: [B*nW, window*window, C]; mask: [nW, N, N] additive, or undefined.
    torch::Tensor forward(const torch::Tensor& windows, const torch::Tensor& mask);

private:
    int64_t dim_;
    int64_t window_;
    int64_t heads_;
    double scale_;
    torch::nn::Linear qkv_{nullptr};
    torch::nn::Linear proj_{nullptr};
    torch::Tensor bias_table_;     // [(2w-1)^2, heads]
    torch::Tensor bias_index_;     // [N*N] long buffer
};
TORCH_MODULE(WindowAttention);

/// One Swin transformer layer (STL): (shifted) window attention then MLP, both pre-norm
/// with residuals.
class SwinLayerImpl : public torch::nn::Module {
public:
    SwinLayerImpl(int64_t dim, int64_t heads, int64_t window, bool shifted, double mlp_ratio);

    /// x: [B,H,W,C]
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::Tensor attention_mask(int64_t padded_h, int64_t padded_w, const torch::TensorOptions& opts);

    int64_t window_;
    bool shifted_;
    torch::nn::LayerNorm norm1_{nullptr};
    torch::nn::LayerNorm norm2_{nullptr};
    WindowAttention attn_{nullptr};
    torch::nn::Sequential mlp_{nullptr};
    std::map<std::pair<int64_t, int64_t>, torch::Tensor> mask_cache_;
};
TORCH_MODULE(SwinLayer);

/// Residual Swin transformer block: `depth` STLs alternating regular/shifted windows,
/// a 3x3 conv, and a skip connection around the whole group.
class ResidualSwinBlockImpl : public torch::nn::Module {
public:
    ResidualSwinBlockImpl(int64_t dim, int64_t depth, int64_t heads, int64_t window, double mlp_ratio);

    /// x: [B,C,H,W]
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::ModuleList layers_{nullptr};
    torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(ResidualSwinBlock);

/// LayerNorm over the channel axis of an NCHW tensor.
class ChannelNormImpl : public torch::nn::Module {
public:
    explicit ChannelNormImpl(int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(ChannelNorm);

}  // namespace sodiff::saipe
