#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "sodiff/swin.hpp"

// Semantic-aligned image prompt extractor: a Swin encoder producing the shared feature
// map, a reconstruction decoder, and a guidance embedder that turns the feature map
// into a token sequence shaped like a text-encoder output.
namespace sodiff::saipe {

struct SaipeConfig {
    int64_t feature_channels = 180;
    int64_t rstb_count = 2;
    int64_t stl_per_rstb = 2;
    int64_t decoder_stl = 1;  // "reduced" decoder: half the encoder's STLs per block
    int64_t heads = 6;
    int64_t window = 8;
    double mlp_ratio = 2.0;

    int64_t query_count = 77;
    int64_t embed_dim = 64;
    int64_t embed_hidden = 64;
    int64_t embed_heads = 4;
    std::vector<int64_t> conv_scales = {1, 3, 5};
    bool position_encoding = true;
    bool linear_attention = true;  // false: exact softmax attention in the embedder encoder
    int64_t random_features = 64;
    uint64_t feature_seed = 7;

    double align_weight = 0.5;

    void validate() const;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SaipeConfig, feature_channels, rstb_count, stl_per_rstb,
                                                decoder_stl, heads, window, mlp_ratio, query_count, embed_dim,
                                                embed_hidden, embed_heads, conv_scales, position_encoding,
                                                linear_attention, random_features, feature_seed, align_weight)

/// F_mid = E_down(I_L): 4x patch stem to C_f channels, residual Swin blocks, global skip.
class EncoderImpl : public torch::nn::Module {
public:
    explicit EncoderImpl(const SaipeConfig& cfg);
    /// image: [N,3,H,W] with H, W divisible by 4 -> [N,C_f,H/4,W/4]
    torch::Tensor forward(const torch::Tensor& image);

private:
    torch::nn::Conv2d stem_{nullptr};
    torch::nn::ModuleList blocks_{nullptr};
    ChannelNorm norm_{nullptr};
    torch::nn::Conv2d body_conv_{nullptr};
};
TORCH_MODULE(Encoder);

/// Î_rec = D_up(F_mid): lighter residual Swin blocks, LayerNorm, pixel-shuffle upsampling.
class DecoderImpl : public torch::nn::Module {
public:
    explicit DecoderImpl(const SaipeConfig& cfg);
    torch::Tensor forward(const torch::Tensor& features);

private:
    int64_t channels_;
    torch::nn::ModuleList blocks_{nullptr};
    ChannelNorm norm_{nullptr};
    torch::nn::Conv2d to_pixels_{nullptr};
    torch::nn::PixelShuffle shuffle_{nullptr};
};
TORCH_MODULE(Decoder);

/// Token self-attention with either positive-random-feature (linear) or softmax kernel.
class TokenAttentionImpl : public torch::nn::Module {
public:
    TokenAttentionImpl(int64_t dim, int64_t heads, bool linear, int64_t features, uint64_t seed);
    torch::Tensor forward(const torch::Tensor& tokens);

private:
    int64_t dim_;
    int64_t heads_;
    bool linear_;
    torch::nn::Linear qkv_{nullptr};
    torch::nn::Linear proj_{nullptr};
    torch::Tensor projection_;  // [heads, features, head_dim], fixed
};
TORCH_MODULE(TokenAttention);

/// e_img = T_align(F_mid): input MLP, linear-attention encoder layer, multi-scale
/// convolutions yielding keys/values, multi-head attention pooling against learnable queries.
class GuidanceEmbedderImpl : public torch::nn::Module {
public:
    explicit GuidanceEmbedderImpl(const SaipeConfig& cfg);
    /// features: [N,C_f,h,w] -> [N,L,D]
    torch::Tensor forward(const torch::Tensor& features);

private:
    SaipeConfig cfg_;
    torch::nn::Sequential input_mlp_{nullptr};
    torch::nn::LayerNorm enc_norm1_{nullptr};
    torch::nn::LayerNorm enc_norm2_{nullptr};
    TokenAttention enc_attn_{nullptr};
    torch::nn::Sequential enc_mlp_{nullptr};
    torch::nn::ModuleList scale_convs_{nullptr};
    torch::nn::LayerNorm kv_norm_{nullptr};
    torch::Tensor queries_;
    torch::nn::Linear q_proj_{nullptr};
    torch::nn::Linear k_proj_{nullptr};
    torch::nn::Linear v_proj_{nullptr};
    torch::nn::Linear out_proj_{nullptr};
    torch::nn::Linear query_skip_{nullptr};
};
TORCH_MODULE(GuidanceEmbedder);

/// 2D sinusoidal position code, [h*w, dim], row-major over (y, x).
torch::Tensor position_code_2d(int64_t h, int64_t w, int64_t dim, const torch::TensorOptions& opts);

struct SaipeOutput {
    torch::Tensor features;        // F_mid
    torch::Tensor reconstruction;  // Î_rec
    torch::Tensor embedding;       // e_img
};

class SaipeImpl : public torch::nn::Module {
public:
    explicit SaipeImpl(SaipeConfig cfg);

    torch::Tensor encode(const torch::Tensor& image);
    torch::Tensor decode(const torch::Tensor& features);
    torch::Tensor embed_guidance(const torch::Tensor& features);
    SaipeOutput forward(const torch::Tensor& image);

    const SaipeConfig& config() const { return cfg_; }

private:
    SaipeConfig cfg_;
    Encoder encoder_{nullptr};
    Decoder decoder_{nullptr};
    GuidanceEmbedder embedder_{nullptr};
};
TORCH_MODULE(Saipe);

struct SaipeLoss {
    torch::Tensor total;
    torch::Tensor rec;    // L1(Î_rec, I_H)
    torch::Tensor align;  // MSE(e_img, e_text)
};

/// L = L_rec + λ_align · L_align.
SaipeLoss saipe_loss(const torch::Tensor& reconstruction, const torch::Tensor& target, const torch::Tensor& e_img,
                     const torch::Tensor& e_text, double align_weight);

}  // namespace sodiff::saipe
