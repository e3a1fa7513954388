#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "sodiff/config.hpp"
#include "sodiff/dataset.hpp"
#include "sodiff/losses.hpp"
#include "sodiff/text_prompt.hpp"
#include "sodiff/training.hpp"

namespace sodiff::harness {

/// Maps a degraded image [1,3,H,W] to a restoration of the same shape. `hq` and the
/// image id are passed for oracle restorers and caption lookups; real restorers ignore `hq`.
using Restorer = std::function<torch::Tensor(const torch::Tensor& lq, const torch::Tensor& hq, int qf,
                                             const std::string& id)>;

struct Metrics {
    double psnr = 0.0;
    double mse = 0.0;
    double dists = 0.0;
    double l1 = 0.0;
};

struct EvalRow {
    std::string id;
    int qf = 0;
    Metrics restored;
    Metrics input;  // the degraded image itself
};

struct EvalAggregate {
    Metrics restored;
    Metrics input;
    size_t count = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::map<int, EvalAggregate> per_qf;
    EvalAggregate overall;
    std::string method = "restored";
};

Metrics measure(losses::DistsLite& dists, const torch::Tensor& x, const torch::Tensor& y);

/// Degrades every image at every QF, restores, and scores against the original.
EvalReport evaluate(const Restorer& restore, const Dataset& data, const std::vector<int>& qf_list,
                    const std::string& subsample = "444");

/// Recomputes per-QF and overall means from the rows.
void aggregate(EvalReport& report);

void write_csv(const EvalReport& report, const std::filesystem::path& path);
/// Methods as rows, QF groups as columns (JPEG input first, then the restorer).
std::string to_markdown(const EvalReport& report);

struct Restoration {
    torch::Tensor image;    // [N,3,H,W]
    torch::Tensor tau;      // [N] schedule timesteps used
    torch::Tensor qf_pred;  // [N] (zeros without a predictor)
};

/// Single-step restoration with in-memory modules. Inputs are replicate-padded to a multiple
/// of 16 and cropped back; the predictor runs without Gumbel noise at its final temperature.
Restoration restore_image(const TrainConfig& cfg, FrozenModules& modules, timestep::TimePredictor& predictor,
                          const diffusion::NoiseSchedule& schedule, const torch::Tensor& lq,
                          const torch::Tensor& prompt = {});

/// Loads a stage-2 checkpoint set (ckpt_set.json) with its frozen sources and restores images.
class SodiffPipeline {
public:
    /// Throws CheckpointError when any referenced checkpoint's config hash differs from the recorded one.
    explicit SodiffPipeline(const std::filesystem::path& ckpt_set);

    /// `prompt` overrides the SAIPE prompt (required for text-prompted checkpoints).
    Restoration restore(const torch::Tensor& lq, const torch::Tensor& prompt = {});
    torch::Tensor predict_qf(const torch::Tensor& lq);
    /// Predicted quality factor and timestep without running the generator (image left undefined).
    Restoration estimate(const torch::Tensor& lq);

    FrozenModules& modules() { return modules_; }

    const TrainConfig& config() const { return cfg_; }
    bool text_prompted() const { return cfg_.prompt_source == "text"; }

    /// Restorer view; text-prompted sets look up captions by image id.
    Restorer restorer(const text::CaptionMap* captions = nullptr);

private:
    TrainConfig cfg_;
    FrozenModules modules_;
    timestep::TimePredictor predictor_{nullptr};
    diffusion::NoiseSchedule schedule_;
};

}  // namespace sodiff::harness
