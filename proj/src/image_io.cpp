#include "sodiff/image_io.hpp"

#include <cstring>
#include <vector>

#include <png.h>

#include "sodiff/tensor_util.hpp"

namespace sodiff {

torch::Tensor read_png(const std::filesystem::path& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw ImageIoError("cannot read PNG " + path.string() + ": " + image.message);
    }
    image.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&image);
        throw ImageIoError("cannot decode PNG " + path.string() + ": " + image.message);
    }
    const auto h = static_cast<int64_t>(image.height);
    const auto w = static_cast<int64_t>(image.width);
    auto hwc = torch::from_blob(buffer.data(), {h, w, 3}, torch::kUInt8).clone();
    return hwc.permute({2, 0, 1}).contiguous().to(torch::kFloat32) / 255.0;
}

void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
    require_rank(image, 3, "write_png");
    if (image.size(0) != 3) throw ShapeError("write_png: expected 3 channels, got " + shape_string(image));
    auto bytes = (image.detach().to(torch::kFloat64).clamp(0.0, 1.0) * 255.0)
                     .round()
                     .to(torch::kUInt8)
                     .permute({1, 2, 0})
                     .contiguous();
    png_image out;
    std::memset(&out, 0, sizeof(out));
    out.version = PNG_IMAGE_VERSION;
    out.width = static_cast<png_uint_32>(image.size(2));
    out.height = static_cast<png_uint_32>(image.size(1));
    out.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&out, path.c_str(), 0, bytes.data_ptr<uint8_t>(), 0, nullptr)) {
        throw ImageIoError("cannot write PNG " + path.string() + ": " + out.message);
    }
}

torch::Tensor quantize_8bit(const torch::Tensor& image) {
    return (image.clamp(0.0, 1.0) * 255.0).round() / 255.0;
}

}  // namespace sodiff
