#include "sodiff/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "sodiff/tensor_util.hpp"

namespace sodiff::losses {

namespace F = torch::nn::functional;

namespace {

constexpr double kSobelEps = 1e-12;
constexpr double kStatEps = 1e-6;
constexpr double kProbEps = 1e-6;

}  // namespace

torch::Tensor sobel(const torch::Tensor& image) {
    auto x = as_batch(image);
    if (x.size(2) < 3 || x.size(3) < 3) throw ShapeError("sobel: image must be at least 3x3, got " + shape_string(image));
    const auto c = x.size(1);
    auto opts = x.options();
    auto gx = torch::tensor({-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0}, opts).view({1, 1, 3, 3});
    auto gy = gx.transpose(2, 3).contiguous();
    auto padded = F::pad(x, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
    auto dx = F::conv2d(padded, gx.repeat({c, 1, 1, 1}), F::Conv2dFuncOptions().groups(c));
    auto dy = F::conv2d(padded, gy.repeat({c, 1, 1, 1}), F::Conv2dFuncOptions().groups(c));
    auto mag = torch::sqrt(dx.pow(2) + dy.pow(2) + kSobelEps) - std::sqrt(kSobelEps);
    return image.dim() == 3 ? mag.squeeze(0) : mag;
}

DistsLiteImpl::DistsLiteImpl(uint64_t seed, std::vector<int64_t> channels) {
    auto gen = torch::make_generator<at::CPUGeneratorImpl>(seed);
    int64_t in = 3;
    for (size_t i = 0; i < channels.size(); ++i) {
        const auto fan_in = static_cast<double>(in * 9);
        auto w = torch::randn({channels[i], in, 3, 3}, gen, torch::kFloat32) * std::sqrt(2.0 / fan_in);
        weights_.push_back(register_buffer("stage" + std::to_string(i), w));
        in = channels[i];
    }
}

std::vector<torch::Tensor> DistsLiteImpl::features(const torch::Tensor& x) {
    std::vector<torch::Tensor> out{x};
    auto h = x;
    for (const auto& w : weights_) {
        h = torch::relu(F::conv2d(h, w.to(x.scalar_type()), F::Conv2dFuncOptions().stride(2).padding(1)));
        out.push_back(h);
    }
    return out;
}

torch::Tensor DistsLiteImpl::per_image(const torch::Tensor& x, const torch::Tensor& y) {
    require_same_shape(x, y, "dists");
    auto fx = features(as_batch(x));
    auto fy = features(as_batch(y));
    const auto stages = static_cast<double>(fx.size());
    torch::Tensor similarity;
    for (size_t s = 0; s < fx.size(); ++s) {
        auto a = fx[s].flatten(2);
        auto b = fy[s].flatten(2);
        auto mu_a = a.mean(-1);
        auto mu_b = b.mean(-1);
        auto da = a - mu_a.unsqueeze(-1);
        auto db = b - mu_b.unsqueeze(-1);
        auto var_a = da.pow(2).mean(-1);
        auto var_b = db.pow(2).mean(-1);
        auto cov = (da * db).mean(-1);
        auto texture = (2.0 * mu_a * mu_b + kStatEps) / (mu_a.pow(2) + mu_b.pow(2) + kStatEps);
        auto structure = (2.0 * cov + kStatEps) / (var_a + var_b + kStatEps);
        auto stage = (texture + structure).mean(-1) / (2.0 * stages);
        similarity = similarity.defined() ? similarity + stage : stage;
    }
    return 1.0 - similarity;
}

torch::Tensor DistsLiteImpl::forward(const torch::Tensor& x, const torch::Tensor& y) { return per_image(x, y).mean(); }

ReconLoss recon_loss(DistsLite& dists, const torch::Tensor& restored, const torch::Tensor& target, bool edge_aware) {
    require_same_shape(restored, target, "recon_loss");
    auto mse = (restored - target).pow(2).mean();
    if (!edge_aware) {
        auto zero = torch::zeros({}, mse.options());
        return {mse, mse, zero, zero};
    }
    auto edge = dists->forward(sobel(restored), sobel(target));
    auto image = dists->forward(restored, target);
    return {mse + edge + image, mse, edge, image};
}

torch::Tensor generator_loss(const torch::Tensor& d_fake) {
    return -torch::log(d_fake.clamp(kProbEps, 1.0 - kProbEps)).mean();
}

torch::Tensor discriminator_loss(const torch::Tensor& d_fake, const torch::Tensor& d_real) {
    auto fake = d_fake.clamp(kProbEps, 1.0 - kProbEps);
    auto real = d_real.clamp(kProbEps, 1.0 - kProbEps);
    return -torch::log(1.0 - fake).mean() - torch::log(real).mean();
}

LossReport total_loss(const ReconLoss& recon, const torch::Tensor& gan, const torch::Tensor& qf,
                      const LossWeights& weights) {
    if (weights.alpha < 0.0 || weights.beta < 0.0) throw std::invalid_argument("LossWeights must be non-negative");
    auto mse = recon.mse.to(torch::kFloat64);
    auto edge = recon.edge.to(torch::kFloat64);
    auto image = recon.image.to(torch::kFloat64);
    auto g = gan.to(torch::kFloat64);
    auto q = qf.to(torch::kFloat64);
    auto recon_total = mse + edge + image;
    LossReport report;
    report.total = recon_total + weights.alpha * g + weights.beta * q;
    report.recon_mse = mse.item<double>();
    report.recon_edge = edge.item<double>();
    report.recon_image = image.item<double>();
    report.recon = recon_total.item<double>();
    report.gan = g.item<double>();
    report.qf = q.item<double>();
    return report;
}

}  // namespace sodiff::losses
