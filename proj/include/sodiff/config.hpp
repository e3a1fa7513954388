#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sodiff/autoencoder.hpp"
#include "sodiff/diffusion.hpp"
#include "sodiff/discriminator.hpp"
#include "sodiff/lora.hpp"
#include "sodiff/losses.hpp"
#include "sodiff/saipe.hpp"
#include "sodiff/time_predictor.hpp"
#include "sodiff/unet.hpp"

namespace sodiff::harness {

struct TextConfig {
    int64_t tokens = 77;
    int64_t dim = 64;
    int64_t vocab = 4096;
    uint64_t seed = 1234;
    std::string precomputed;  // path to a precomputed embedding file; empty selects the hashed provider
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TextConfig, tokens, dim, vocab, seed, precomputed)

struct TrainConfig {
    std::string stage = "saipe";  // saipe | sodiff | autoencoder
    std::string optimizer = "adam";
    double lr = 2e-4;
    double weight_decay = 0.0;
    int64_t batch = 4;
    int64_t iters = 1000;
    uint64_t seed = 0;
    std::array<int, 2> qf_range = {5, 95};
    std::string qf_sampling = "uniform";  // uniform | stratified
    int64_t crop = 64;
    bool flip = true;
    std::string subsample = "444";
    int64_t log_every = 10;
    int64_t checkpoint_every = 0;
    int64_t verify_every = 10;

    // autoencoder stage: the base UNet prior is pre-trained on frozen latents afterwards
    int64_t prior_iters = 0;
    double prior_lr = 1e-3;

    // sodiff stage
    double disc_lr = 1e-4;
    int64_t disc_steps = 1;
    bool use_time_predictor = true;
    double fixed_timestep = -1.0;  // used without the predictor; negative selects T_max/2
    bool use_qf_loss = true;
    bool use_edge_aware = true;
    bool use_gan = true;
    std::string prompt_source = "saipe";  // saipe | text

    diffusion::ScheduleConfig schedule;
    saipe::SaipeConfig saipe;
    diffusion::AutoencoderConfig autoencoder;
    diffusion::UnetConfig unet;
    diffusion::LoraConfig lora;
    timestep::PredictorConfig predictor;
    losses::DiscriminatorConfig discriminator;
    losses::LossWeights weights;
    TextConfig text;

    void validate() const;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, stage, optimizer, lr, weight_decay, batch, iters, seed,
                                                qf_range, qf_sampling, crop, flip, subsample, log_every,
                                                checkpoint_every, verify_every, prior_iters, prior_lr, disc_lr,
                                                disc_steps, use_time_predictor, fixed_timestep, use_qf_loss,
                                                use_edge_aware, use_gan, prompt_source, schedule, saipe, autoencoder,
                                                unet, lora, predictor, discriminator, weights, text)

/// Stage defaults: saipe -> Adam 2e-4; sodiff -> AdamW 1e-5; autoencoder -> Adam 1e-3.
TrainConfig stage_defaults(const std::string& stage);

/// Starts from the defaults of the file's "stage" (or `stage` when given) and overlays the file.
TrainConfig load_config(const std::filesystem::path& path, const std::string& stage = "");

/// Applies `key=value` overrides; keys are dotted paths ("saipe.embed_dim"), values are
/// parsed as JSON and fall back to plain strings.
TrainConfig apply_overrides(const TrainConfig& cfg, const std::vector<std::string>& assignments);

/// Ablation presets: wo_align, text_prompt, wo_tp, wo_qf, wo_ea, wo_gan.
const std::vector<std::string>& ablation_names();
TrainConfig ablation_config(const TrainConfig& base, const std::string& name);

/// A small, fast configuration of every module (used by tests and the synthetic demo).
TrainConfig toy_config(const std::string& stage);

}  // namespace sodiff::harness
