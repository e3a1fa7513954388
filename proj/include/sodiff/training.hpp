#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "sodiff/autoencoder.hpp"
#include "sodiff/checkpoint.hpp"
#include "sodiff/config.hpp"
#include "sodiff/dataset.hpp"
#include "sodiff/diffusion.hpp"
#include "sodiff/discriminator.hpp"
#include "sodiff/losses.hpp"
#include "sodiff/saipe.hpp"
#include "sodiff/text_prompt.hpp"
#include "sodiff/time_predictor.hpp"
#include "sodiff/unet.hpp"

namespace sodiff::harness {

class FrozenDriftError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Append-only CSV log; rows are also kept in memory. An empty path keeps them in memory only.
class CsvLog {
public:
    CsvLog(std::filesystem::path path, std::vector<std::string> columns);
    void append(const std::vector<double>& row);
    const std::vector<std::vector<double>>& rows() const { return rows_; }
    const std::vector<std::string>& columns() const { return columns_; }

private:
    std::filesystem::path path_;
    std::vector<std::string> columns_;
    std::vector<std::vector<double>> rows_;
};

std::unique_ptr<torch::optim::Optimizer> make_optimizer(const std::string& kind, std::vector<torch::Tensor> params,
                                                        double lr, double weight_decay);

std::unique_ptr<text::PromptProvider> make_provider(const TextConfig& cfg);

/// [M, L, D] text embeddings in dataset order; throws MissingCaptionsError if any id lacks one.
torch::Tensor caption_embeddings(const Dataset& data, const text::CaptionMap& captions);

/// Degrades each sample of a batch at its own quality factor.
torch::Tensor degrade_batch(const torch::Tensor& hq, const std::vector<int>& qf, const std::string& subsample);

// ---- autoencoder + base prior -------------------------------------------------------------

struct AutoencoderStep {
    int64_t step = 0;
    double loss = 0.0;
    double recon = 0.0;
    double kl = 0.0;
};

class AutoencoderTrainer {
public:
    AutoencoderTrainer(const TrainConfig& cfg, const Dataset& data);
    AutoencoderStep step();
    /// Sets the latent scale to 1/std of posterior means over the dataset.
    void calibrate_scale();
    diffusion::Autoencoder& model() { return ae_; }

private:
    TrainConfig cfg_;
    const Dataset* data_;
    DataPipeline pipeline_;
    diffusion::Autoencoder ae_{nullptr};
    std::unique_ptr<torch::optim::Optimizer> opt_;
    torch::Generator gen_;
    int64_t step_ = 0;
};

/// Pre-trains the base UNet as an epsilon-predictor on frozen HQ latents; the prompt for
/// each image is its caption embedding (or zeros when none are given).
class PriorTrainer {
public:
    PriorTrainer(const TrainConfig& cfg, diffusion::Autoencoder ae, const Dataset& data, torch::Tensor prompts);
    double step();
    diffusion::Unet& model() { return unet_; }

private:
    TrainConfig cfg_;
    DataPipeline pipeline_;
    diffusion::Autoencoder ae_;
    diffusion::Unet unet_{nullptr};
    torch::Tensor prompts_;
    diffusion::NoiseSchedule schedule_;
    std::unique_ptr<torch::optim::Optimizer> opt_;
    torch::Generator gen_;
};

// ---- stage 1 ---------------------------------------------------------------------------

struct SaipeStep {
    int64_t step = 0;
    double total = 0.0;
    double rec = 0.0;
    double align = 0.0;
};

class SaipeTrainer {
public:
    SaipeTrainer(const TrainConfig& cfg, const Dataset& data, torch::Tensor text_embeddings);

    SaipeStep step();
    int64_t steps_done() const { return step_; }

    /// Model weights plus optimizer, pipeline and RNG state, so training resumes exactly.
    void save(const std::filesystem::path& path);
    void resume(const std::filesystem::path& path);

    saipe::Saipe& model() { return model_; }

private:
    TrainConfig cfg_;
    const Dataset* data_;
    DataPipeline pipeline_;
    saipe::Saipe model_{nullptr};
    torch::Tensor text_;
    std::unique_ptr<torch::optim::Optimizer> opt_;
    int64_t step_ = 0;
};

// ---- stage 2 ---------------------------------------------------------------------------

struct FrozenModules {
    saipe::Saipe saipe{nullptr};
    diffusion::Autoencoder autoencoder{nullptr};
    diffusion::Unet unet{nullptr};  // base weights frozen, adapters trainable
};

struct SodiffStep {
    int64_t step = 0;
    losses::LossReport report;
    losses::LossWeights effective;  // weights actually applied this step
    double total = 0.0;
    double disc_loss = 0.0;
    double tau_mean = 0.0;
    double qf_pred_mean = 0.0;
    double qf_gt_mean = 0.0;
    bool disc_updated = false;
};

class SodiffTrainer {
public:
    /// `text_embeddings` ([M,L,D], dataset order) is required only for prompt_source == "text".
    SodiffTrainer(const TrainConfig& cfg, const Dataset& data, FrozenModules frozen, torch::Tensor text_embeddings = {});

    SodiffStep step();
    int64_t steps_done() const { return step_; }

    /// Throws FrozenDriftError when a frozen module's checksum moved.
    void verify_frozen() const;
    std::map<std::string, uint64_t> frozen_checksums() const;
    uint64_t generator_checksum() const;
    uint64_t discriminator_checksum() const;

    diffusion::Unet& unet() { return frozen_.unet; }
    timestep::TimePredictor& predictor() { return predictor_; }
    losses::Discriminator& discriminator() { return disc_; }
    const diffusion::NoiseSchedule& schedule() const { return schedule_; }

    /// Writes adapters.ckpt, predictor.ckpt, discriminator.ckpt and ckpt_set.json into `dir`.
    /// `sources` names the checkpoints of the frozen modules (autoencoder, unet, saipe).
    void save(const std::filesystem::path& dir, const std::map<std::string, std::filesystem::path>& sources) const;

private:
    double temperature() const;

    TrainConfig cfg_;
    const Dataset* data_;
    DataPipeline pipeline_;
    FrozenModules frozen_;
    timestep::TimePredictor predictor_{nullptr};
    losses::Discriminator disc_{nullptr};
    losses::DistsLite dists_{nullptr};
    diffusion::NoiseSchedule schedule_;
    torch::Tensor text_;
    std::unique_ptr<torch::optim::Optimizer> gen_opt_;
    std::unique_ptr<torch::optim::Optimizer> disc_opt_;
    torch::Generator gen_;
    std::map<std::string, uint64_t> frozen_sums_;
    int64_t step_ = 0;
};

// ---- checkpoint helpers --------------------------------------------------------------------

void save_saipe(const std::filesystem::path& path, saipe::Saipe& model);
saipe::Saipe load_saipe(const std::filesystem::path& path);

void save_autoencoder(const std::filesystem::path& path, diffusion::Autoencoder& model);
diffusion::Autoencoder load_autoencoder(const std::filesystem::path& path);

/// Base UNet weights only (adapters excluded).
void save_unet_base(const std::filesystem::path& path, diffusion::Unet& model);
/// Builds a UNet with `lora` adapters and loads base weights (and adapters, if a path is given).
diffusion::Unet load_unet(const std::filesystem::path& base, const diffusion::LoraConfig& lora,
                          const std::optional<std::filesystem::path>& adapters = std::nullopt);

timestep::TimePredictor load_predictor(const std::filesystem::path& path);

/// Hash recorded in a checkpoint header.
std::string checkpoint_hash(const std::filesystem::path& path);

// ---- file-driven runs (CLI) ----------------------------------------------------------------

/// Trains and freezes the autoencoder, then pre-trains the base UNet prior for prior_iters.
/// Writes autoencoder.ckpt, unet_base.ckpt and autoencoder_log.csv into `out_dir`.
void run_autoencoder(const TrainConfig& cfg, const std::filesystem::path& data_dir,
                     const std::optional<std::filesystem::path>& caption_file, const std::filesystem::path& out_dir);

/// Stage 1. Fails fast (MissingCaptionsError) if any training image lacks a caption.
/// With `resume`, model and training state are restored from that checkpoint first.
void run_stage1(const TrainConfig& cfg, const std::filesystem::path& data_dir, const std::filesystem::path& caption_file,
                const std::filesystem::path& out_ckpt,
                const std::optional<std::filesystem::path>& resume = std::nullopt);

/// Stage 2 with frozen SAIPE, autoencoder and base UNet.
void run_stage2(const TrainConfig& cfg, const std::filesystem::path& data_dir, const std::filesystem::path& saipe_ckpt,
                const std::filesystem::path& ae_ckpt, const std::filesystem::path& unet_ckpt,
                const std::filesystem::path& out_dir,
                const std::optional<std::filesystem::path>& caption_file = std::nullopt);

}  // namespace sodiff::harness
