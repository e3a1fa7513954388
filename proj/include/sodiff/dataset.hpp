#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace sodiff::harness {

struct Dataset {
    std::vector<std::string> ids;      // file stems
    std::vector<torch::Tensor> images;  // [3,H,W] float32 in [0,1]

    size_t size() const { return images.size(); }
};

struct IngestResult {
    Dataset data;
    size_t skipped = 0;
    std::vector<std::string> warnings;
};

/// Loads every PNG in `dir` (sorted by name) whose sides are >= `min_size`. Undersized or
/// unreadable files are skipped and counted. Throws std::runtime_error("no usable images")
/// when nothing remains.
IngestResult ingest(const std::filesystem::path& dir, int64_t min_size);

struct Batch {
    torch::Tensor hq;          // [B,3,crop,crop]
    std::vector<int> qf;       // per-sample quality factor
    std::vector<size_t> index;  // dataset positions
};

/// Seeded epoch shuffling, random crops, optional horizontal flips and QF draws.
/// The whole sample sequence is a function of the seed.
class DataPipeline {
public:
    DataPipeline(const Dataset& data, int64_t crop, bool flip, std::array<int, 2> qf_range, std::string qf_sampling,
                 uint64_t seed);

    Batch next(int64_t batch);

    std::string state() const;
    void restore(const std::string& state);

private:
    std::vector<int> draw_qf(int64_t n);

    const Dataset* data_;
    int64_t crop_;
    bool flip_;
    std::array<int, 2> qf_range_;
    std::string qf_sampling_;
    std::mt19937_64 rng_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
};

/// Deterministic random crop + flip of one image (used by the pipeline and by tests).
torch::Tensor crop_and_flip(const torch::Tensor& image, int64_t crop, int64_t top, int64_t left, bool flip);

}  // namespace sodiff::harness
