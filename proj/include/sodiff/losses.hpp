#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace sodiff::losses {

struct LossWeights {
    double alpha = 1e-2;  // adversarial
    double beta = 1e-3;   // QF regression
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, alpha, beta)

/// Per-channel Sobel gradient magnitude with replicate padding; same shape as the input.
/// The magnitude is sqrt(gx^2 + gy^2 + eps) - sqrt(eps), which is exactly zero on flat
/// regions and keeps a finite gradient there.
torch::Tensor sobel(const torch::Tensor& image);

/// DISTS-style structure/texture distance over a fixed, seeded, untrained conv pyramid
/// (stage 0 is the input itself; then three stride-2 conv+ReLU stages of 16/32/64 channels).
class DistsLiteImpl : public torch::nn::Module {
public:
    explicit DistsLiteImpl(uint64_t seed = 20240601, std::vector<int64_t> channels = {16, 32, 64});

    /// Distance per batch element, [N].
    torch::Tensor per_image(const torch::Tensor& x, const torch::Tensor& y);
    /// Batch mean.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& y);

private:
    std::vector<torch::Tensor> features(const torch::Tensor& x);

    std::vector<torch::Tensor> weights_;  // buffers
};
TORCH_MODULE(DistsLite);

struct ReconLoss {
    torch::Tensor total;
    torch::Tensor mse;
    torch::Tensor edge;   // DISTS(S(x), S(y))
    torch::Tensor image;  // DISTS(x, y)
};

/// L_recon = MSE + DISTS(S(x), S(y)) + DISTS(x, y); with `edge_aware` off only the MSE term
/// is used and the DISTS components are reported as zero.
ReconLoss recon_loss(DistsLite& dists, const torch::Tensor& restored, const torch::Tensor& target,
                     bool edge_aware = true);

/// Generator term -mean log D(fake); probabilities are clamped to [1e-6, 1-1e-6].
torch::Tensor generator_loss(const torch::Tensor& d_fake);
/// Discriminator term -mean log(1 - D(fake)) - mean log D(real).
torch::Tensor discriminator_loss(const torch::Tensor& d_fake, const torch::Tensor& d_real);

struct LossReport {
    torch::Tensor total;  // float64 scalar
    double recon_mse = 0.0;
    double recon_edge = 0.0;
    double recon_image = 0.0;
    double recon = 0.0;
    double gan = 0.0;
    double qf = 0.0;

    /// recon + alpha*gan + beta*qf recomputed from the reported components.
    double recombined(const LossWeights& w) const { return recon + w.alpha * gan + w.beta * qf; }
};

/// L_total = L_recon + alpha * L_G + beta * L_qf. Components are combined in float64.
LossReport total_loss(const ReconLoss& recon, const torch::Tensor& gan, const torch::Tensor& qf,
                      const LossWeights& weights);

}  // namespace sodiff::losses
