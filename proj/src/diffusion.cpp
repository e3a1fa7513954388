#include "sodiff/diffusion.hpp"

#include <string>

#include "sodiff/tensor_util.hpp"

namespace sodiff::diffusion {

namespace {

torch::Tensor per_sample(const torch::Tensor& values, const torch::Tensor& like) {
    auto v = values.reshape({-1});
    std::vector<int64_t> shape(static_cast<size_t>(like.dim()), 1);
    shape[0] = v.size(0);
    return v.view(shape);
}

}  // namespace

NoiseSchedule::NoiseSchedule(torch::Tensor alpha_bar) : alpha_bar_(alpha_bar.to(torch::kFloat64).contiguous()) {
    require_rank(alpha_bar_, 1, "NoiseSchedule");
}

double NoiseSchedule::alpha_bar(int64_t t) const {
    if (t < 0 || t >= timesteps()) throw std::out_of_range("timestep " + std::to_string(t) + " outside schedule");
    return alpha_bar_[t].item<double>();
}

torch::Tensor NoiseSchedule::alpha_bar_at(const torch::Tensor& tau) const {
    const auto last = static_cast<double>(timesteps() - 1);
    if ((tau.detach() < 0).any().item<bool>() || (tau.detach() > last).any().item<bool>()) {
        throw std::domain_error("timestep outside [0, T_max-1]");
    }
    auto table = alpha_bar_.to(tau.scalar_type());
    auto lo = tau.detach().floor().clamp(0, last).to(torch::kLong);
    auto hi = (lo + 1).clamp_max(timesteps() - 1);
    auto frac = tau - lo.to(tau.scalar_type());
    auto a0 = table.index({lo});
    auto a1 = table.index({hi});
    return a0 + frac * (a1 - a0);
}

NoiseSchedule build_schedule(int64_t timesteps, double beta_start, double beta_end) {
    if (timesteps < 1) throw std::domain_error("build_schedule: timesteps must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw std::domain_error("build_schedule: require 0 < beta_start <= beta_end < 1");
    }
    auto betas = timesteps == 1 ? torch::full({1}, beta_start, torch::kFloat64)
                                : torch::linspace(beta_start, beta_end, timesteps, torch::kFloat64);
    return NoiseSchedule(torch::cumprod(1.0 - betas, 0));
}

NoiseSchedule build_schedule(const ScheduleConfig& cfg) {
    return build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end);
}

torch::Tensor restore_with_noise(const torch::Tensor& z_low, const torch::Tensor& eps, const torch::Tensor& alpha_bar) {
    require_same_shape(z_low, eps, "one_step_restore");
    if ((alpha_bar.detach() <= 0).any().item<bool>()) {
        throw std::domain_error("one_step_restore: alpha_bar must be positive");
    }
    auto a = per_sample(alpha_bar, z_low);
    return (z_low - torch::sqrt(1.0 - a) * eps) / torch::sqrt(a);
}

torch::Tensor one_step_restore(const torch::Tensor& z_low, const torch::Tensor& tau, const NoiseSchedule& schedule,
                               const NoisePredictor& predict_noise) {
    auto t = tau.dim() == 0 ? tau.expand({z_low.size(0)}) : tau;
    auto eps = predict_noise(z_low, t);
    return restore_with_noise(z_low, eps, schedule.alpha_bar_at(t));
}

torch::Tensor add_noise(const torch::Tensor& z, const torch::Tensor& eps, const torch::Tensor& alpha_bar) {
    auto a = per_sample(alpha_bar, z);
    return torch::sqrt(a) * z + torch::sqrt(1.0 - a) * eps;
}

}  // namespace sodiff::diffusion
