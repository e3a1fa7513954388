#pragma once

#include <array>
#include <string>

#include <torch/torch.h>

// JPEG-style degradation: block DCT plus table quantization, no entropy coding.
// Quantization is the only lossy step, so decoded pixels match a baseline JPEG
// round trip up to rounding conventions.
namespace sodiff::jpeg {

constexpr int kBlock = 8;
using Table = std::array<int, kBlock * kBlock>;
using Block = std::array<double, kBlock * kBlock>;

/// Frequency-domain 8x8 block, row-major (vertical frequency, horizontal frequency).
struct DctBlock {
    Block coeffs{};
};

struct QuantTableSet {
    Table luma{};
    Table chroma{};
    int qf = 50;
};

enum class Subsampling { k444, k420 };

Subsampling parse_subsampling(const std::string& text);
std::string to_string(Subsampling mode);

/// Annex-K base tables (the qf=50 tables).
const Table& base_luma_table();
const Table& base_chroma_table();

/// IJG quality scaling of the Annex-K tables. Throws std::domain_error outside [1,100].
QuantTableSet quant_tables(int qf);

/// Orthonormal DCT-II basis, entry (k, n) at index k*8+n.
const Block& dct_basis();

DctBlock dct2(const Block& spatial);
Block idct2(const DctBlock& block);

/// JFIF full-range colour transforms on [0,255]-scaled planes, channel axis -3.
torch::Tensor rgb_to_ycbcr(const torch::Tensor& rgb255);
torch::Tensor ycbcr_to_rgb(const torch::Tensor& ycc255);

/// Quantize-dequantize every 8x8 block of a single plane batch [N,H,W] (H, W multiples of 8,
/// values level-shifted around 0).
torch::Tensor quantize_planes(const torch::Tensor& planes, const Table& table);

/// Encode/decode round trip at the given quality factor. Accepts [3,H,W] or [N,3,H,W]
/// RGB in [0,1] and returns the same shape and dtype, clamped and on the 1/255 grid.
torch::Tensor degrade(const torch::Tensor& rgb, int qf, Subsampling mode = Subsampling::k444);

}  // namespace sodiff::jpeg
