#pragma once

#include <cstdint>
#include <optional>

#include <json.hpp>
#include <torch/torch.h>

namespace sodiff::timestep {

struct PredictorConfig {
    int64_t channels = 32;
    int64_t blocks = 4;
    int64_t bins = 50;
    double temperature = 1.0;
    double anneal_to = 1.0;  // final temperature of a linear anneal; equal to `temperature` disables it
    int64_t groups = 8;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PredictorConfig, channels, blocks, bins, temperature, anneal_to,
                                                groups)

struct TimestepDistribution {
    torch::Tensor logits;    // [N, bins]
    torch::Tensor tau_pred;  // [N], in [0, bins-1]
    torch::Tensor qf_pred;   // [N], in [1, 100]
};

/// Standard Gumbel(0,1) samples, deterministic for a given generator state.
torch::Tensor sample_gumbel(at::IntArrayRef shape, torch::Generator& gen, const torch::TensorOptions& opts);

/// tau = sum_i i * softmax((l_i + g_i) / temperature). `noise` may be undefined (g = 0).
torch::Tensor combine(const torch::Tensor& logits, const torch::Tensor& noise, double temperature);

/// Seeded Gumbel-Softmax combination; identical seeds give identical tau.
torch::Tensor gumbel_combine(const torch::Tensor& logits, double temperature, uint64_t seed);

/// Affine map from predictor bins [0, bins-1] onto schedule timesteps [0, timesteps-1].
torch::Tensor bins_to_timesteps(const torch::Tensor& tau_bins, int64_t bins, int64_t timesteps);

/// L_qf = |QF_pred - QF_gt|, averaged over the batch.
torch::Tensor qf_loss(const torch::Tensor& qf_pred, const torch::Tensor& qf_gt);

/// Residual conv trunk shared by a QF regression head and a timestep-logit head.
class TimePredictorImpl : public torch::nn::Module {
public:
    explicit TimePredictorImpl(PredictorConfig cfg);

    /// Stochastic when `gen` is given (training), deterministic g = 0 otherwise.
    TimestepDistribution forward(const torch::Tensor& image, torch::Generator* gen = nullptr,
                                 std::optional<double> temperature = std::nullopt);

    const PredictorConfig& config() const { return cfg_; }

private:
    PredictorConfig cfg_;
    torch::nn::Conv2d stem_{nullptr};
    torch::nn::ModuleList blocks_{nullptr};
    torch::nn::Linear qf_head_{nullptr};
    torch::nn::Linear logit_head_{nullptr};
};
TORCH_MODULE(TimePredictor);

}  // namespace sodiff::timestep
