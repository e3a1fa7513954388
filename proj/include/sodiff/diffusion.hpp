#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>

#include <json.hpp>
#include <torch/torch.h>

namespace sodiff::diffusion {

struct ScheduleConfig {
    int64_t timesteps = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ScheduleConfig, timesteps, beta_start, beta_end)

/// Cumulative signal fraction alpha_bar[t] = prod_{s<=t} (1 - beta_s), linear betas.
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    explicit NoiseSchedule(torch::Tensor alpha_bar);

    int64_t timesteps() const { return alpha_bar_.size(0); }
    const torch::Tensor& alpha_bar() const { return alpha_bar_; }  // float64, [T_max]
    double alpha_bar(int64_t t) const;

    /// alpha_bar at real-valued timesteps, linearly interpolated between floor and ceil.
    /// Differentiable with respect to `tau`; result has tau's dtype.
    torch::Tensor alpha_bar_at(const torch::Tensor& tau) const;

private:
    torch::Tensor alpha_bar_;
};

/// Throws std::domain_error unless 0 < beta_start <= beta_end < 1 and timesteps >= 1.
NoiseSchedule build_schedule(int64_t timesteps, double beta_start, double beta_end);
NoiseSchedule build_schedule(const ScheduleConfig& cfg);

/// Noise predictor epsilon_theta(z; cond, tau).
using NoisePredictor = std::function<torch::Tensor(const torch::Tensor& z, const torch::Tensor& tau)>;

/// z_hat = (z_L - sqrt(1 - abar_tau) * eps) / sqrt(abar_tau), single application, no iteration.
/// `tau` is [N] (or scalar), broadcast over each latent in the batch.
torch::Tensor one_step_restore(const torch::Tensor& z_low, const torch::Tensor& tau, const NoiseSchedule& schedule,
                               const NoisePredictor& predict_noise);

/// Same step with a precomputed noise estimate.
torch::Tensor restore_with_noise(const torch::Tensor& z_low, const torch::Tensor& eps, const torch::Tensor& alpha_bar);

/// Forward noising F(z, t) = sqrt(abar_t) z + sqrt(1 - abar_t) eps.
torch::Tensor add_noise(const torch::Tensor& z, const torch::Tensor& eps, const torch::Tensor& alpha_bar);

}  // namespace sodiff::diffusion
