#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace sodiff {

/// Raised when tensor shapes do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a tensor that must be finite carries NaN or Inf.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string shape_string(const torch::Tensor& t);

void require_rank(const torch::Tensor& t, int64_t rank, const char* what);
void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what);
void require_finite(const torch::Tensor& t, const char* what);

/// Adds a leading batch axis to a CHW tensor; NCHW passes through.
torch::Tensor as_batch(const torch::Tensor& image);

/// FNV-1a over the raw bytes of every parameter and buffer, in registration order.
uint64_t parameter_checksum(const torch::nn::Module& module);
uint64_t tensor_checksum(const torch::Tensor& t);

void set_requires_grad(torch::nn::Module& module, bool flag);

/// Truncated normal (±2σ) in place, the init used for every learned tensor.
void trunc_normal_(torch::Tensor& t, double stddev = 0.02);

/// Re-initialises every Linear/Conv weight with trunc_normal_ and zeroes biases.
void init_weights(torch::nn::Module& module, double stddev = 0.02);

/// Mean-squared error and PSNR (peak 1.0) per batch element.
torch::Tensor mse_per_image(const torch::Tensor& x, const torch::Tensor& y);
double psnr(const torch::Tensor& x, const torch::Tensor& y);

/// Sinusoidal embedding of real-valued (possibly fractional) timesteps.
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim, double max_period = 10000.0);

}  // namespace sodiff
