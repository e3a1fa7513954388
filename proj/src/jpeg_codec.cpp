#include "sodiff/jpeg_codec.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "sodiff/tensor_util.hpp"

namespace sodiff::jpeg {

namespace {

constexpr Table kLumaBase = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99,
};

constexpr Table kChromaBase = {
    17, 18, 24, 47, 99, 99, 99, 99,  //
    18, 21, 26, 66, 99, 99, 99, 99,  //
    24, 26, 56, 99, 99, 99, 99, 99,  //
    47, 66, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,
};

Block make_basis() {
    Block basis{};
    for (int k = 0; k < kBlock; ++k) {
        const double scale = k == 0 ? std::sqrt(1.0 / kBlock) : std::sqrt(2.0 / kBlock);
        for (int n = 0; n < kBlock; ++n) {
            basis[k * kBlock + n] = scale * std::cos((2 * n + 1) * k * std::numbers::pi / (2.0 * kBlock));
        }
    }
    return basis;
}

Table scale_table(const Table& base, int scale) {
    Table out{};
    for (size_t i = 0; i < base.size(); ++i) {
        const long v = (static_cast<long>(base[i]) * scale + 50) / 100;
        out[i] = static_cast<int>(std::clamp(v, 1L, 255L));
    }
    return out;
}

torch::Tensor basis_tensor() {
    const auto& b = dct_basis();
    return torch::from_blob(const_cast<double*>(b.data()), {kBlock, kBlock}, torch::kFloat64).clone();
}

torch::Tensor table_tensor(const Table& table) {
    auto t = torch::empty({kBlock, kBlock}, torch::kFloat64);
    auto acc = t.accessor<double, 2>();
    for (int i = 0; i < kBlock * kBlock; ++i) acc[i / kBlock][i % kBlock] = table[i];
    return t;
}

torch::Tensor pad_replicate(const torch::Tensor& x, int64_t multiple) {
    const int64_t h = x.size(-2);
    const int64_t w = x.size(-1);
    const int64_t ph = (multiple - h % multiple) % multiple;
    const int64_t pw = (multiple - w % multiple) % multiple;
    if (ph == 0 && pw == 0) return x;
    namespace F = torch::nn::functional;
    return F::pad(x, F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate));
}

}  // namespace

Subsampling parse_subsampling(const std::string& text) {
    if (text == "444" || text == "4:4:4") return Subsampling::k444;
    if (text == "420" || text == "4:2:0") return Subsampling::k420;
    throw std::invalid_argument("unknown subsampling mode '" + text + "' (expected 444 or 420)");
}

std::string to_string(Subsampling mode) { return mode == Subsampling::k444 ? "444" : "420"; }

const Table& base_luma_table() { return kLumaBase; }
const Table& base_chroma_table() { return kChromaBase; }

QuantTableSet quant_tables(int qf) {
    if (qf < 1 || qf > 100) {
        throw std::domain_error("quality factor " + std::to_string(qf) + " outside [1,100]");
    }
    const int scale = qf < 50 ? 5000 / qf : 200 - 2 * qf;
    return QuantTableSet{scale_table(kLumaBase, scale), scale_table(kChromaBase, scale), qf};
}

const Block& dct_basis() {
    static const Block basis = make_basis();
    return basis;
}

DctBlock dct2(const Block& spatial) {
    const auto& c = dct_basis();
    Block tmp{};
    // rows: tmp = C * X
    for (int k = 0; k < kBlock; ++k)
        for (int n = 0; n < kBlock; ++n) {
            double acc = 0.0;
            for (int m = 0; m < kBlock; ++m) acc += c[k * kBlock + m] * spatial[m * kBlock + n];
            tmp[k * kBlock + n] = acc;
        }
    DctBlock out;
    // columns: out = tmp * C^T
    for (int k = 0; k < kBlock; ++k)
        for (int l = 0; l < kBlock; ++l) {
            double acc = 0.0;
            for (int n = 0; n < kBlock; ++n) acc += tmp[k * kBlock + n] * c[l * kBlock + n];
            out.coeffs[k * kBlock + l] = acc;
        }
    return out;
}

Block idct2(const DctBlock& block) {
    const auto& c = dct_basis();
    Block tmp{};
    // tmp = C^T * Y
    for (int m = 0; m < kBlock; ++m)
        for (int l = 0; l < kBlock; ++l) {
            double acc = 0.0;
            for (int k = 0; k < kBlock; ++k) acc += c[k * kBlock + m] * block.coeffs[k * kBlock + l];
            tmp[m * kBlock + l] = acc;
        }
    Block out{};
    // out = tmp * C
    for (int m = 0; m < kBlock; ++m)
        for (int n = 0; n < kBlock; ++n) {
            double acc = 0.0;
            for (int l = 0; l < kBlock; ++l) acc += tmp[m * kBlock + l] * c[l * kBlock + n];
            out[m * kBlock + n] = acc;
        }
    return out;
}

// JFIF luma weights; the chroma scales follow from them, so the pair of transforms is exact.
constexpr double kR = 0.299, kG = 0.587, kB = 0.114;
constexpr double kCb = 2.0 * (1.0 - kB);  // 1.772
constexpr double kCr = 2.0 * (1.0 - kR);  // 1.402

torch::Tensor rgb_to_ycbcr(const torch::Tensor& rgb255) {
    auto r = rgb255.select(-3, 0);
    auto g = rgb255.select(-3, 1);
    auto b = rgb255.select(-3, 2);
    auto y = kR * r + kG * g + kB * b;
    auto cb = (b - y) / kCb + 128.0;
    auto cr = (r - y) / kCr + 128.0;
    return torch::stack({y, cb, cr}, -3);
}

torch::Tensor ycbcr_to_rgb(const torch::Tensor& ycc255) {
    auto y = ycc255.select(-3, 0);
    auto cb = ycc255.select(-3, 1) - 128.0;
    auto cr = ycc255.select(-3, 2) - 128.0;
    auto r = y + kCr * cr;
    auto b = y + kCb * cb;
    auto g = (y - kR * r - kB * b) / kG;
    return torch::stack({r, g, b}, -3);
}

torch::Tensor quantize_planes(const torch::Tensor& planes, const Table& table) {
    require_rank(planes, 3, "quantize_planes");
    const int64_t n = planes.size(0);
    const int64_t h = planes.size(1);
    const int64_t w = planes.size(2);
    if (h % kBlock != 0 || w % kBlock != 0) {
        throw ShapeError("quantize_planes: plane size not a multiple of 8: " + shape_string(planes));
    }
    const auto basis = basis_tensor();
    const auto q = table_tensor(table);
    auto blocks = planes.reshape({n, h / kBlock, kBlock, w / kBlock, kBlock}).permute({0, 1, 3, 2, 4});
    auto coeffs = torch::matmul(torch::matmul(basis, blocks), basis.t());
    auto dequant = torch::round(coeffs / q) * q;
    auto spatial = torch::matmul(torch::matmul(basis.t(), dequant), basis);
    return spatial.permute({0, 1, 3, 2, 4}).reshape({n, h, w});
}

torch::Tensor degrade(const torch::Tensor& rgb, int qf, Subsampling mode) {
    const auto tables = quant_tables(qf);
    const bool batched = rgb.dim() == 4;
    auto x = as_batch(rgb).detach().to(torch::kFloat64);
    if (x.size(1) != 3) throw ShapeError("degrade: expected 3 RGB channels, got " + shape_string(rgb));
    const int64_t h = x.size(2);
    const int64_t w = x.size(3);

    const int64_t multiple = mode == Subsampling::k420 ? 2 * kBlock : kBlock;
    auto ycc = pad_replicate(rgb_to_ycbcr(x * 255.0), multiple) - 128.0;
    const int64_t n = ycc.size(0);
    const int64_t ph = ycc.size(2);
    const int64_t pw = ycc.size(3);

    auto luma = quantize_planes(ycc.select(1, 0), tables.luma);
    auto chroma = ycc.slice(1, 1, 3);
    if (mode == Subsampling::k420) {
        chroma = torch::avg_pool2d(chroma, 2);
        chroma = quantize_planes(chroma.reshape({-1, ph / 2, pw / 2}), tables.chroma).reshape({n, 2, ph / 2, pw / 2});
        chroma = chroma.repeat_interleave(2, 2).repeat_interleave(2, 3);
    } else {
        chroma = quantize_planes(chroma.reshape({-1, ph, pw}), tables.chroma).reshape({n, 2, ph, pw});
    }
    auto decoded = torch::cat({luma.unsqueeze(1), chroma}, 1) + 128.0;
    decoded = decoded.slice(2, 0, h).slice(3, 0, w);
    auto out = (ycbcr_to_rgb(decoded) / 255.0).clamp(0.0, 1.0);
    out = ((out * 255.0).round() / 255.0).to(rgb.scalar_type());
    return batched ? out : out.squeeze(0);
}

}  // namespace sodiff::jpeg
