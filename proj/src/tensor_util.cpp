#include "sodiff/tensor_util.hpp"

#include <cmath>
#include <sstream>

namespace sodiff {

std::string shape_string(const torch::Tensor& t) {
    std::ostringstream out;
    out << t.sizes();
    return out.str();
}

void require_rank(const torch::Tensor& t, int64_t rank, const char* what) {
    if (!t.defined() || t.dim() != rank) {
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         (t.defined() ? shape_string(t) : std::string("undefined")));
    }
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (a.sizes() != b.sizes()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
    }
}

void require_finite(const torch::Tensor& t, const char* what) {
    if (!torch::isfinite(t).all().item<bool>()) {
        throw NumericError(std::string(what) + ": tensor contains NaN or Inf");
    }
}

torch::Tensor as_batch(const torch::Tensor& image) {
    if (image.dim() == 3) return image.unsqueeze(0);
    if (image.dim() == 4) return image;
    throw ShapeError("expected CHW or NCHW image, got " + shape_string(image));
}

namespace {

constexpr uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr uint64_t kFnvPrime = 1099511628211ULL;

void fnv_mix(uint64_t& h, const torch::Tensor& t) {
    auto c = t.detach().contiguous().cpu();
    const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
    const auto n = static_cast<size_t>(c.numel()) * c.element_size();
    for (size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= kFnvPrime;
    }
}

}  // namespace

uint64_t tensor_checksum(const torch::Tensor& t) {
    uint64_t h = kFnvOffset;
    fnv_mix(h, t);
    return h;
}

uint64_t parameter_checksum(const torch::nn::Module& module) {
    uint64_t h = kFnvOffset;
    for (const auto& p : module.parameters()) fnv_mix(h, p);
    for (const auto& b : module.buffers()) fnv_mix(h, b);
    return h;
}

void set_requires_grad(torch::nn::Module& module, bool flag) {
    for (auto& p : module.parameters()) p.set_requires_grad(flag);
}

void trunc_normal_(torch::Tensor& t, double stddev) {
    torch::NoGradGuard guard;
    t.normal_(0.0, stddev);
    t.clamp_(-2.0 * stddev, 2.0 * stddev);
}

void init_weights(torch::nn::Module& module, double stddev) {
    torch::NoGradGuard guard;
    auto visit = [stddev](torch::nn::Module& m) {
        if (auto* linear = m.as<torch::nn::Linear>()) {
            trunc_normal_(linear->weight, stddev);
            if (linear->bias.defined()) linear->bias.zero_();
        } else if (auto* conv = m.as<torch::nn::Conv2d>()) {
            trunc_normal_(conv->weight, stddev);
            if (conv->bias.defined()) conv->bias.zero_();
        }
    };
    // include_self would require `module` to already be owned by a shared_ptr
    visit(module);
    for (auto& child : module.modules(/*include_self=*/false)) visit(*child);
}

torch::Tensor mse_per_image(const torch::Tensor& x, const torch::Tensor& y) {
    require_same_shape(x, y, "mse");
    auto d = (as_batch(x) - as_batch(y)).pow(2);
    return d.flatten(1).mean(1);
}

double psnr(const torch::Tensor& x, const torch::Tensor& y) {
    const double mse = (x.to(torch::kFloat64) - y.to(torch::kFloat64)).pow(2).mean().item<double>();
    if (mse <= 0.0) return std::numeric_limits<double>::infinity();
    return -10.0 * std::log10(mse);
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim, double max_period) {
    const int64_t half = dim / 2;
    auto opts = torch::TensorOptions().dtype(t.scalar_type()).device(t.device());
    auto freqs = torch::exp(-std::log(max_period) * torch::arange(half, opts) / static_cast<double>(half));
    auto args = t.reshape({-1, 1}) * freqs.unsqueeze(0);
    auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
    if (dim % 2 == 1) emb = torch::cat({emb, torch::zeros({emb.size(0), 1}, opts)}, 1);
    return emb;
}

}  // namespace sodiff
