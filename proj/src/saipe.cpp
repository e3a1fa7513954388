#include "sodiff/saipe.hpp"

#include <cmath>
#include <stdexcept>

#include "sodiff/tensor_util.hpp"

namespace sodiff::saipe {

void SaipeConfig::validate() const {
    if (feature_channels <= 0 || rstb_count <= 0 || stl_per_rstb <= 0 || decoder_stl <= 0 || heads <= 0 ||
        window <= 0 || query_count <= 0 || embed_dim <= 0 || embed_hidden <= 0 || embed_heads <= 0 ||
        random_features <= 0 || mlp_ratio <= 0.0) {
        throw std::invalid_argument("SaipeConfig: all sizes must be positive");
    }
    if (align_weight < 0.0) throw std::invalid_argument("SaipeConfig: align_weight must be >= 0");
    if (feature_channels % heads != 0) throw std::invalid_argument("SaipeConfig: feature_channels % heads != 0");
    if (embed_hidden % embed_heads != 0 || embed_dim % embed_heads != 0) {
        throw std::invalid_argument("SaipeConfig: embed widths must be divisible by embed_heads");
    }
    if (conv_scales.empty()) throw std::invalid_argument("SaipeConfig: conv_scales must not be empty");
    for (auto k : conv_scales) {
        if (k <= 0 || k % 2 == 0) throw std::invalid_argument("SaipeConfig: conv_scales must be odd and positive");
    }
}

EncoderImpl::EncoderImpl(const SaipeConfig& cfg) {
    const auto c = cfg.feature_channels;
    stem_ = register_module("stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, c, 4).stride(4)));
    blocks_ = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < cfg.rstb_count; ++i) {
        blocks_->push_back(ResidualSwinBlock(c, cfg.stl_per_rstb, cfg.heads, cfg.window, cfg.mlp_ratio));
    }
    norm_ = register_module("norm", ChannelNorm(c));
    body_conv_ = register_module("body_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 3).padding(1)));
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& image) {
    auto shallow = stem_(image - 0.5);
    auto x = shallow;
    for (auto& block : *blocks_) x = block->as<ResidualSwinBlock>()->forward(x);
    return body_conv_(norm_(x)) + shallow;
}

DecoderImpl::DecoderImpl(const SaipeConfig& cfg) : channels_(cfg.feature_channels) {
    const auto c = cfg.feature_channels;
    blocks_ = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < cfg.rstb_count; ++i) {
        blocks_->push_back(ResidualSwinBlock(c, cfg.decoder_stl, cfg.heads, cfg.window, cfg.mlp_ratio));
    }
    norm_ = register_module("norm", ChannelNorm(c));
    to_pixels_ = register_module("to_pixels", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, 3 * 16, 3).padding(1)));
    shuffle_ = register_module("shuffle", torch::nn::PixelShuffle(4));
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& features) {
    auto x = features;
    for (auto& block : *blocks_) x = block->as<ResidualSwinBlock>()->forward(x);
    return shuffle_(to_pixels_(norm_(x))) + 0.5;
}

TokenAttentionImpl::TokenAttentionImpl(int64_t dim, int64_t heads, bool linear, int64_t features, uint64_t seed)
    : dim_(dim), heads_(heads), linear_(linear) {
    qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
    proj_ = register_module("proj", torch::nn::Linear(dim, dim));
    auto gen = torch::make_generator<at::CPUGeneratorImpl>(seed);
    projection_ = register_buffer("random_features", torch::randn({heads, features, dim / heads}, gen, torch::kFloat32));
}

torch::Tensor TokenAttentionImpl::forward(const torch::Tensor& tokens) {
    const auto b = tokens.size(0);
    const auto n = tokens.size(1);
    const auto hd = dim_ / heads_;
    auto qkv = qkv_(tokens).view({b, n, 3, heads_, hd}).permute({2, 0, 3, 1, 4});
    auto q = qkv[0];
    auto k = qkv[1];
    auto v = qkv[2];
    torch::Tensor out;
    if (linear_) {
        // Positive random features: phi(x) = exp(w.x - |x|^2/2) / sqrt(m), so that
        // E[phi(q).phi(k)] = exp(q.k). Stabilisers cancel between numerator and denominator.
        const double scale = std::pow(static_cast<double>(hd), -0.25);
        const auto m = static_cast<double>(projection_.size(1));
        auto omega = projection_.to(q.dtype()).unsqueeze(0);  // [1,h,m,hd]
        auto features = [&](const torch::Tensor& x, bool is_query) {
            auto xs = x * scale;
            auto proj = torch::matmul(xs, omega.transpose(-2, -1));  // [b,h,n,m]
            auto sq = 0.5 * xs.pow(2).sum(-1, true);
            auto logits = proj - sq;
            auto stab = is_query ? std::get<0>(logits.max(-1, true)).detach()
                                 : std::get<0>(logits.flatten(2).max(-1, true)).detach().unsqueeze(-1);
            return torch::exp(logits - stab) / std::sqrt(m);
        };
        auto fq = features(q, true);
        auto fk = features(k, false);
        auto kv = torch::matmul(fk.transpose(-2, -1), v);          // [b,h,m,hd]
        auto norm = fk.sum(2).unsqueeze(-1);                        // [b,h,m,1]
        auto num = torch::matmul(fq, kv);
        auto den = torch::matmul(fq, norm).clamp_min(1e-12);
        out = num / den;
    } else {
        auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
        out = torch::matmul(attn, v);
    }
    return proj_(out.transpose(1, 2).reshape({b, n, dim_}));
}

torch::Tensor position_code_2d(int64_t h, int64_t w, int64_t dim, const torch::TensorOptions& opts) {
    const auto half = dim / 2;
    auto ys = timestep_embedding(torch::arange(h, opts), half, 100.0);          // [h, half]
    auto xs = timestep_embedding(torch::arange(w, opts), dim - half, 100.0);    // [w, dim-half]
    auto code = torch::cat({ys.unsqueeze(1).expand({h, w, half}), xs.unsqueeze(0).expand({h, w, dim - half})}, -1);
    return code.reshape({h * w, dim});
}

GuidanceEmbedderImpl::GuidanceEmbedderImpl(const SaipeConfig& cfg) : cfg_(cfg) {
    const auto c = cfg.feature_channels;
    const auto e = cfg.embed_hidden;
    input_mlp_ = register_module("input_mlp", torch::nn::Sequential(torch::nn::Linear(c, e), torch::nn::GELU(),
                                                                    torch::nn::Linear(e, e)));
    enc_norm1_ = register_module("enc_norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({e})));
    enc_norm2_ = register_module("enc_norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({e})));
    enc_attn_ = register_module("enc_attn", TokenAttention(e, cfg.embed_heads, cfg.linear_attention,
                                                           cfg.random_features, cfg.feature_seed));
    enc_mlp_ = register_module("enc_mlp", torch::nn::Sequential(torch::nn::Linear(e, 2 * e), torch::nn::GELU(),
                                                                torch::nn::Linear(2 * e, e)));
    scale_convs_ = register_module("scale_convs", torch::nn::ModuleList());
    for (auto k : cfg.conv_scales) {
        scale_convs_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(e, e, k).padding(k / 2)));
    }
    kv_norm_ = register_module("kv_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({e})));
    queries_ = register_parameter("queries", torch::zeros({cfg.query_count, cfg.embed_dim}));
    trunc_normal_(queries_);
    q_proj_ = register_module("q_proj", torch::nn::Linear(cfg.embed_dim, cfg.embed_dim));
    k_proj_ = register_module("k_proj", torch::nn::Linear(e, cfg.embed_dim));
    v_proj_ = register_module("v_proj", torch::nn::Linear(e, cfg.embed_dim));
    out_proj_ = register_module("out_proj", torch::nn::Linear(cfg.embed_dim, cfg.embed_dim));
    query_skip_ = register_module("query_skip", torch::nn::Linear(cfg.embed_dim, cfg.embed_dim));
}

torch::Tensor GuidanceEmbedderImpl::forward(const torch::Tensor& features) {
    require_rank(features, 4, "embed_guidance");
    if (features.size(1) != cfg_.feature_channels) {
        throw ShapeError("embed_guidance: expected " + std::to_string(cfg_.feature_channels) + " channels, got " +
                         shape_string(features));
    }
    const auto b = features.size(0);
    const auto h = features.size(2);
    const auto w = features.size(3);
    const auto e = cfg_.embed_hidden;
    auto tokens = input_mlp_->forward(features.flatten(2).transpose(1, 2));  // [b, hw, e]
    if (cfg_.position_encoding) tokens = tokens + position_code_2d(h, w, e, tokens.options()).unsqueeze(0);
    tokens = tokens + enc_attn_(enc_norm1_(tokens));
    tokens = tokens + enc_mlp_->forward(enc_norm2_(tokens));

    auto grid = tokens.transpose(1, 2).reshape({b, e, h, w});
    std::vector<torch::Tensor> scales;
    for (auto& conv : *scale_convs_) scales.push_back(conv->as<torch::nn::Conv2d>()->forward(grid).flatten(2));
    auto kv = kv_norm_(torch::cat(scales, 2).transpose(1, 2));  // [b, S*hw, e]

    const auto heads = cfg_.embed_heads;
    const auto d = cfg_.embed_dim;
    const auto hd = d / heads;
    const auto lq = cfg_.query_count;
    auto q = q_proj_(queries_).view({1, lq, heads, hd}).transpose(1, 2);               // [1,H,L,hd]
    auto k = k_proj_(kv).view({b, -1, heads, hd}).transpose(1, 2);                     // [b,H,S,hd]
    auto v = v_proj_(kv).view({b, -1, heads, hd}).transpose(1, 2);
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
    auto pooled = torch::matmul(attn, v).transpose(1, 2).reshape({b, lq, d});
    return out_proj_(pooled) + query_skip_(queries_).unsqueeze(0);
}

SaipeImpl::SaipeImpl(SaipeConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    encoder_ = register_module("encoder", Encoder(cfg_));
    decoder_ = register_module("decoder", Decoder(cfg_));
    embedder_ = register_module("embedder", GuidanceEmbedder(cfg_));
    init_weights(*this);
}

torch::Tensor SaipeImpl::encode(const torch::Tensor& image) {
    auto x = as_batch(image);
    if (x.size(1) != 3 || x.size(2) % 4 != 0 || x.size(3) % 4 != 0) {
        throw ShapeError("saipe encode: expected [N,3,H,W] with H, W divisible by 4, got " + shape_string(x));
    }
    return encoder_(x);
}

torch::Tensor SaipeImpl::decode(const torch::Tensor& features) {
    require_rank(features, 4, "saipe decode");
    if (features.size(1) != cfg_.feature_channels) {
        throw ShapeError("saipe decode: expected " + std::to_string(cfg_.feature_channels) + " channels, got " +
                         shape_string(features));
    }
    require_finite(features, "saipe decode");
    return decoder_(features);
}

torch::Tensor SaipeImpl::embed_guidance(const torch::Tensor& features) { return embedder_(features); }

SaipeOutput SaipeImpl::forward(const torch::Tensor& image) {
    auto features = encode(image);
    return {features, decoder_(features), embedder_(features)};
}

SaipeLoss saipe_loss(const torch::Tensor& reconstruction, const torch::Tensor& target, const torch::Tensor& e_img,
                     const torch::Tensor& e_text, double align_weight) {
    require_same_shape(reconstruction, target, "saipe_loss reconstruction");
    require_same_shape(e_img, e_text, "saipe_loss embeddings");
    if (align_weight < 0.0) throw std::invalid_argument("saipe_loss: align_weight must be >= 0");
    auto rec = (reconstruction - target).abs().mean();
    auto align = (e_img - e_text).pow(2).mean();
    // A zero weight keeps L_align out of the graph entirely; it is still reported.
    auto total = align_weight == 0.0 ? rec : rec + align_weight * align;
    if (align_weight == 0.0) align = align.detach();
    return {total, rec, align};
}

}  // namespace sodiff::saipe
