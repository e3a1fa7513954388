#include "sodiff/dataset.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "sodiff/image_io.hpp"
#include "sodiff/tensor_util.hpp"

namespace sodiff::harness {

IngestResult ingest(const std::filesystem::path& dir, int64_t min_size) {
    if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    IngestResult result;
    for (const auto& file : files) {
        try {
            auto image = read_png(file);
            if (image.size(1) < min_size || image.size(2) < min_size) {
                ++result.skipped;
                result.warnings.push_back(file.filename().string() + ": smaller than " + std::to_string(min_size));
                continue;
            }
            result.data.ids.push_back(file.stem().string());
            result.data.images.push_back(image);
        } catch (const ImageIoError& e) {
            ++result.skipped;
            result.warnings.push_back(e.what());
        }
    }
    if (result.data.images.empty()) throw std::runtime_error("no usable images in " + dir.string());
    return result;
}

torch::Tensor crop_and_flip(const torch::Tensor& image, int64_t crop, int64_t top, int64_t left, bool flip) {
    auto out = image.slice(1, top, top + crop).slice(2, left, left + crop);
    if (flip) out = out.flip({2});
    return out.contiguous();
}

DataPipeline::DataPipeline(const Dataset& data, int64_t crop, bool flip, std::array<int, 2> qf_range,
                           std::string qf_sampling, uint64_t seed)
    : data_(&data), crop_(crop), flip_(flip), qf_range_(qf_range), qf_sampling_(std::move(qf_sampling)), rng_(seed) {
    if (data.images.empty()) throw std::runtime_error("no usable images");
    for (const auto& img : data.images) {
        if (img.size(1) < crop || img.size(2) < crop) throw ShapeError("DataPipeline: image smaller than crop");
    }
}

std::vector<int> DataPipeline::draw_qf(int64_t n) {
    std::vector<int> out;
    const int lo = qf_range_[0];
    const int hi = qf_range_[1];
    if (qf_sampling_ == "stratified") {
        const double width = static_cast<double>(hi - lo + 1) / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) {
            const int a = lo + static_cast<int>(width * static_cast<double>(i));
            const int b = std::max(a, lo + static_cast<int>(width * static_cast<double>(i + 1)) - 1);
            out.push_back(std::uniform_int_distribution<int>(a, std::min(b, hi))(rng_));
        }
        std::shuffle(out.begin(), out.end(), rng_);
    } else {
        std::uniform_int_distribution<int> dist(lo, hi);
        for (int64_t i = 0; i < n; ++i) out.push_back(dist(rng_));
    }
    return out;
}

Batch DataPipeline::next(int64_t batch) {
    Batch out;
    std::vector<torch::Tensor> crops;
    for (int64_t i = 0; i < batch; ++i) {
        if (cursor_ >= order_.size()) {
            order_.resize(data_->size());
            for (size_t k = 0; k < order_.size(); ++k) order_[k] = k;
            std::shuffle(order_.begin(), order_.end(), rng_);
            cursor_ = 0;
        }
        const auto idx = order_[cursor_++];
        const auto& img = data_->images[idx];
        const auto top = std::uniform_int_distribution<int64_t>(0, img.size(1) - crop_)(rng_);
        const auto left = std::uniform_int_distribution<int64_t>(0, img.size(2) - crop_)(rng_);
        const bool flip = flip_ && std::bernoulli_distribution(0.5)(rng_);
        crops.push_back(crop_and_flip(img, crop_, top, left, flip));
        out.index.push_back(idx);
    }
    out.hq = torch::stack(crops);
    out.qf = draw_qf(batch);
    return out;
}

std::string DataPipeline::state() const {
    std::ostringstream out;
    out << rng_ << "\n" << cursor_ << " " << order_.size();
    for (auto v : order_) out << " " << v;
    return out.str();
}

void DataPipeline::restore(const std::string& state) {
    std::istringstream in(state);
    in >> rng_;
    size_t n = 0;
    in >> cursor_ >> n;
    order_.resize(n);
    for (auto& v : order_) in >> v;
    if (!in) throw std::runtime_error("corrupt data pipeline state");
}

}  // namespace sodiff::harness
