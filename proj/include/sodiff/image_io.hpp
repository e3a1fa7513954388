#pragma once

#include <filesystem>
#include <stdexcept>

#include <torch/torch.h>

namespace sodiff {

class ImageIoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Reads any PNG as an RGB float32 tensor of shape [3,H,W] in [0,1].
torch::Tensor read_png(const std::filesystem::path& path);

/// Writes a [3,H,W] tensor in [0,1] as an 8-bit RGB PNG (values are clamped and rounded).
void write_png(const std::filesystem::path& path, const torch::Tensor& image);

/// Rounds to the nearest 1/255 level, the grid every 8-bit image lives on.
torch::Tensor quantize_8bit(const torch::Tensor& image);

}  // namespace sodiff
