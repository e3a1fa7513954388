#include "sodiff/training.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "sodiff/jpeg_codec.hpp"
#include "sodiff/tensor_util.hpp"

namespace sodiff::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

torch::Generator seeded(uint64_t seed) { return torch::make_generator<at::CPUGeneratorImpl>(seed); }

std::vector<torch::Tensor> trainable(const torch::nn::Module& module) {
    std::vector<torch::Tensor> out;
    for (const auto& p : module.parameters()) {
        if (p.requires_grad()) out.push_back(p);
    }
    return out;
}

void freeze(torch::nn::Module& module) {
    set_requires_grad(module, false);
    module.eval();
}

torch::Tensor index_rows(const torch::Tensor& table, const std::vector<size_t>& index) {
    std::vector<int64_t> idx(index.begin(), index.end());
    return table.index_select(0, torch::tensor(idx, torch::kLong));
}

DataPipeline make_pipeline(const TrainConfig& cfg, const Dataset& data, uint64_t salt) {
    return DataPipeline(data, cfg.crop, cfg.flip, cfg.qf_range, cfg.qf_sampling, cfg.seed * 7919 + salt);
}

void log_line(const std::string& stage, int64_t step, const std::vector<std::pair<std::string, double>>& values) {
    std::cerr << "[" << stage << "] step " << step;
    for (const auto& [k, v] : values) std::cerr << " " << k << "=" << std::setprecision(6) << v;
    std::cerr << "\n";
}

torch::Tensor crop_to_multiple(const torch::Tensor& image, int64_t m) {
    auto h = image.size(-2) / m * m;
    auto w = image.size(-1) / m * m;
    return image.slice(-2, 0, h).slice(-1, 0, w);
}

}  // namespace

// ---- utilities -------------------------------------------------------------------------------

CsvLog::CsvLog(fs::path path, std::vector<std::string> columns) : path_(std::move(path)), columns_(std::move(columns)) {
    if (path_.empty()) return;
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open log " + path_.string());
    for (size_t i = 0; i < columns_.size(); ++i) out << (i ? "," : "") << columns_[i];
    out << "\n";
}

void CsvLog::append(const std::vector<double>& row) {
    if (row.size() != columns_.size()) throw std::invalid_argument("CsvLog: row width does not match the header");
    rows_.push_back(row);
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::app);
    out << std::setprecision(10);
    for (size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << "\n";
}

std::unique_ptr<torch::optim::Optimizer> make_optimizer(const std::string& kind, std::vector<torch::Tensor> params,
                                                        double lr, double weight_decay) {
    if (params.empty()) throw std::invalid_argument("make_optimizer: nothing to optimise");
    if (kind == "adam") {
        return std::make_unique<torch::optim::Adam>(params, torch::optim::AdamOptions(lr).weight_decay(weight_decay));
    }
    if (kind == "adamw") {
        return std::make_unique<torch::optim::AdamW>(params,
                                                     torch::optim::AdamWOptions(lr).weight_decay(weight_decay));
    }
    throw std::invalid_argument("unknown optimizer '" + kind + "'");
}

std::unique_ptr<text::PromptProvider> make_provider(const TextConfig& cfg) {
    std::unique_ptr<text::PromptProvider> provider;
    if (cfg.precomputed.empty()) {
        provider = std::make_unique<text::HashedTokenProvider>(cfg.tokens, cfg.dim, cfg.vocab, cfg.seed);
    } else {
        provider = std::make_unique<text::PrecomputedProvider>(cfg.precomputed);
    }
    if (provider->tokens() != cfg.tokens || provider->dim() != cfg.dim) {
        throw std::invalid_argument("text provider yields [" + std::to_string(provider->tokens()) + "," +
                                    std::to_string(provider->dim()) + "] but the config expects [" +
                                    std::to_string(cfg.tokens) + "," + std::to_string(cfg.dim) + "]");
    }
    return provider;
}

torch::Tensor caption_embeddings(const Dataset& data, const text::CaptionMap& captions) {
    text::require_captions(captions, data.ids);
    std::vector<torch::Tensor> rows;
    rows.reserve(data.size());
    for (const auto& id : data.ids) rows.push_back(captions.at(id).embedding.to(torch::kFloat32));
    return torch::stack(rows);
}

torch::Tensor degrade_batch(const torch::Tensor& hq, const std::vector<int>& qf, const std::string& subsample) {
    if (static_cast<int64_t>(qf.size()) != hq.size(0)) throw ShapeError("degrade_batch: one QF per sample required");
    const auto mode = jpeg::parse_subsampling(subsample);
    std::vector<torch::Tensor> out;
    out.reserve(qf.size());
    for (size_t i = 0; i < qf.size(); ++i) out.push_back(jpeg::degrade(hq[static_cast<int64_t>(i)], qf[i], mode));
    return torch::stack(out);
}

// ---- autoencoder + prior -----------------------------------------------------------------

AutoencoderTrainer::AutoencoderTrainer(const TrainConfig& cfg, const Dataset& data)
    : cfg_(cfg), data_(&data), pipeline_(make_pipeline(cfg, data, 11)), gen_(seeded(cfg.seed + 101)) {
    torch::manual_seed(cfg_.seed);
    ae_ = diffusion::Autoencoder(cfg_.autoencoder);
    opt_ = make_optimizer(cfg_.optimizer, ae_->parameters(), cfg_.lr, cfg_.weight_decay);
}

AutoencoderStep AutoencoderTrainer::step() {
    ae_->train();
    auto batch = pipeline_.next(cfg_.batch);
    auto loss = diffusion::autoencoder_loss(ae_, batch.hq, gen_);
    opt_->zero_grad();
    loss.total.backward();
    opt_->step();
    ++step_;
    return {step_, loss.total.item<double>(), loss.recon.item<double>(), loss.kl.item<double>()};
}

void AutoencoderTrainer::calibrate_scale() {
    torch::NoGradGuard guard;
    ae_->eval();
    std::vector<torch::Tensor> means;
    for (const auto& image : data_->images) {
        auto x = crop_to_multiple(image, diffusion::AutoencoderImpl::kFactor).unsqueeze(0);
        means.push_back(ae_->posterior(x).mean.flatten());
    }
    const double std = torch::cat(means).std().item<double>();
    ae_->set_latent_scale(std > 1e-8 ? 1.0 / std : 1.0);
}

PriorTrainer::PriorTrainer(const TrainConfig& cfg, diffusion::Autoencoder ae, const Dataset& data, torch::Tensor prompts)
    : cfg_(cfg),
      pipeline_(make_pipeline(cfg, data, 23)),
      ae_(std::move(ae)),
      prompts_(std::move(prompts)),
      schedule_(diffusion::build_schedule(cfg.schedule)),
      gen_(seeded(cfg.seed + 202)) {
    freeze(*ae_);
    torch::manual_seed(cfg_.seed + 1);
    auto base = cfg_.lora;
    base.enabled = false;
    unet_ = diffusion::Unet(cfg_.unet, base);
    opt_ = make_optimizer("adam", unet_->parameters(), cfg_.prior_lr, 0.0);
}

double PriorTrainer::step() {
    unet_->train();
    auto batch = pipeline_.next(cfg_.batch);
    torch::Tensor z;
    {
        torch::NoGradGuard guard;
        z = ae_->encode(batch.hq);
    }
    auto loss = diffusion::denoising_loss(unet_, z, index_rows(prompts_, batch.index), schedule_.alpha_bar(), gen_);
    opt_->zero_grad();
    loss.backward();
    opt_->step();
    return loss.item<double>();
}

// ---- stage 1 ---------------------------------------------------------------------------

SaipeTrainer::SaipeTrainer(const TrainConfig& cfg, const Dataset& data, torch::Tensor text_embeddings)
    : cfg_(cfg), data_(&data), pipeline_(make_pipeline(cfg, data, 31)), text_(std::move(text_embeddings)) {
    if (!text_.defined() || text_.dim() != 3 || text_.size(0) != static_cast<int64_t>(data.size())) {
        throw ShapeError("SaipeTrainer: text embeddings must be [images, L, D]");
    }
    if (text_.size(1) != cfg_.saipe.query_count || text_.size(2) != cfg_.saipe.embed_dim) {
        throw ShapeError("SaipeTrainer: e_text is " + shape_string(text_) + " but SAIPE emits [" +
                         std::to_string(cfg_.saipe.query_count) + "," + std::to_string(cfg_.saipe.embed_dim) + "]");
    }
    torch::manual_seed(cfg_.seed);
    model_ = saipe::Saipe(cfg_.saipe);
    opt_ = make_optimizer(cfg_.optimizer, model_->parameters(), cfg_.lr, cfg_.weight_decay);
}

SaipeStep SaipeTrainer::step() {
    model_->train();
    auto batch = pipeline_.next(cfg_.batch);
    auto lq = degrade_batch(batch.hq, batch.qf, cfg_.subsample);
    auto out = model_->forward(lq);
    auto loss = saipe::saipe_loss(out.reconstruction, batch.hq, out.embedding, index_rows(text_, batch.index),
                                  cfg_.saipe.align_weight);
    opt_->zero_grad();
    loss.total.backward();
    opt_->step();
    ++step_;
    return {step_, loss.total.item<double>(), loss.rec.item<double>(), loss.align.item<double>()};
}

void SaipeTrainer::save(const fs::path& path) {
    Checkpoint ck;
    ck.kind = "saipe";
    ck.config = cfg_.saipe;
    ck.tensors = module_state(*model_);
    ck.tensors["train.optimizer"] = serialize_optimizer(*opt_);
    ck.tensors["train.pipeline"] = string_to_tensor(pipeline_.state());
    ck.meta = {{"step", step_}, {"train_config", cfg_}};
    save_checkpoint(path, ck);
}

void SaipeTrainer::resume(const fs::path& path) {
    auto ck = load_checkpoint(path);
    if (ck.kind != "saipe") throw CheckpointError(path.string() + " is not a SAIPE checkpoint");
    if (ck.config_hash != config_hash(json(cfg_.saipe))) {
        throw CheckpointError("SAIPE config of " + path.string() + " differs from the current run");
    }
    load_module_state(*model_, ck.tensors);
    if (!ck.tensors.count("train.optimizer") || !ck.tensors.count("train.pipeline")) {
        throw CheckpointError(path.string() + " carries no training state");
    }
    deserialize_optimizer(*opt_, ck.tensors.at("train.optimizer"));
    pipeline_.restore(tensor_to_string(ck.tensors.at("train.pipeline")));
    step_ = ck.meta.value("step", int64_t{0});
}

// ---- stage 2 ---------------------------------------------------------------------------

SodiffTrainer::SodiffTrainer(const TrainConfig& cfg, const Dataset& data, FrozenModules frozen,
                             torch::Tensor text_embeddings)
    : cfg_(cfg),
      data_(&data),
      pipeline_(make_pipeline(cfg, data, 47)),
      frozen_(std::move(frozen)),
      schedule_(diffusion::build_schedule(cfg.schedule)),
      text_(std::move(text_embeddings)),
      gen_(seeded(cfg.seed + 303)) {
    cfg_.validate();
    if (cfg_.prompt_source == "text") {
        if (!text_.defined() || text_.size(0) != static_cast<int64_t>(data.size())) {
            throw ShapeError("SodiffTrainer: text prompts need one embedding per image");
        }
    } else if (cfg_.prompt_source != "saipe") {
        throw std::invalid_argument("unknown prompt_source '" + cfg_.prompt_source + "'");
    }
    freeze(*frozen_.saipe);
    freeze(*frozen_.autoencoder);
    diffusion::freeze_base(*frozen_.unet);

    torch::manual_seed(cfg_.seed + 2);
    predictor_ = timestep::TimePredictor(cfg_.predictor);
    disc_ = losses::Discriminator(cfg_.unet, cfg_.discriminator);
    if (cfg_.discriminator.init_from_unet) disc_->load_backbone(frozen_.unet);
    dists_ = losses::DistsLite();

    auto params = diffusion::adapter_parameters(*frozen_.unet);
    if (cfg_.use_time_predictor) {
        for (auto& p : predictor_->parameters()) params.push_back(p);
    } else {
        set_requires_grad(*predictor_, false);
    }
    gen_opt_ = make_optimizer(cfg_.optimizer, params, cfg_.lr, cfg_.weight_decay);
    if (cfg_.use_gan) {
        disc_opt_ = make_optimizer("adam", disc_->parameters(), cfg_.disc_lr, 0.0);
    } else {
        set_requires_grad(*disc_, false);
    }
    frozen_sums_ = frozen_checksums();
}

std::map<std::string, uint64_t> SodiffTrainer::frozen_checksums() const {
    return {{"saipe", parameter_checksum(*frozen_.saipe)},
            {"autoencoder", parameter_checksum(*frozen_.autoencoder)},
            {"unet_base", diffusion::base_checksum(*frozen_.unet)}};
}

void SodiffTrainer::verify_frozen() const {
    for (const auto& [name, sum] : frozen_checksums()) {
        if (sum != frozen_sums_.at(name)) {
            throw FrozenDriftError("frozen module '" + name + "' changed during stage-2 training");
        }
    }
}

uint64_t SodiffTrainer::generator_checksum() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& p : diffusion::adapter_parameters(*frozen_.unet)) h = (h ^ tensor_checksum(p)) * 1099511628211ull;
    return (h ^ parameter_checksum(*predictor_)) * 1099511628211ull;
}

uint64_t SodiffTrainer::discriminator_checksum() const { return parameter_checksum(*disc_); }

double SodiffTrainer::temperature() const {
    const auto& p = cfg_.predictor;
    const double frac = cfg_.iters > 0 ? std::min(1.0, static_cast<double>(step_) / static_cast<double>(cfg_.iters)) : 1.0;
    return p.temperature + (p.anneal_to - p.temperature) * frac;
}

SodiffStep SodiffTrainer::step() {
    frozen_.unet->train();
    predictor_->train();
    auto batch = pipeline_.next(cfg_.batch);
    const auto n = batch.hq.size(0);
    auto lq = degrade_batch(batch.hq, batch.qf, cfg_.subsample);
    std::vector<float> qf_values(batch.qf.begin(), batch.qf.end());
    auto qf_gt = torch::tensor(qf_values);

    torch::Tensor prompt, z_low, z_high;
    {
        torch::NoGradGuard guard;
        prompt = cfg_.prompt_source == "text" ? index_rows(text_, batch.index) : frozen_.saipe->forward(lq).embedding;
        z_low = frozen_.autoencoder->encode(lq);
        z_high = frozen_.autoencoder->encode(batch.hq);
    }

    const auto T = schedule_.timesteps();
    torch::Tensor tau, qf_term, qf_pred;
    if (cfg_.use_time_predictor) {
        auto dist = predictor_->forward(lq, &gen_, temperature());
        tau = timestep::bins_to_timesteps(dist.tau_pred, cfg_.predictor.bins, T);
        qf_pred = dist.qf_pred;
        qf_term = timestep::qf_loss(qf_pred, qf_gt);
    } else {
        const double fixed = cfg_.fixed_timestep >= 0 ? cfg_.fixed_timestep : static_cast<double>(T / 2);
        tau = torch::full({n}, std::min(fixed, static_cast<double>(T - 1)));
        qf_pred = torch::zeros({n});
        qf_term = torch::zeros({});
    }

    auto eps = frozen_.unet->forward(z_low, tau, prompt);
    auto z_hat = diffusion::restore_with_noise(z_low, eps, schedule_.alpha_bar_at(tau));
    auto restored = frozen_.autoencoder->decode(z_hat);
    auto recon = losses::recon_loss(dists_, restored, batch.hq, cfg_.use_edge_aware);

    losses::LossWeights eff = cfg_.weights;
    if (!cfg_.use_gan) eff.alpha = 0.0;
    if (!cfg_.use_time_predictor || !cfg_.use_qf_loss) eff.beta = 0.0;

    auto gan = cfg_.use_gan ? losses::gan_generator_loss(z_hat, prompt, disc_, schedule_, gen_) : torch::zeros({});
    auto report = losses::total_loss(recon, gan, qf_term, eff);

    gen_opt_->zero_grad();
    report.total.backward();
    gen_opt_->step();

    SodiffStep out;
    if (cfg_.use_gan) {
        auto fake = z_hat.detach();
        for (int64_t k = 0; k < std::max<int64_t>(1, cfg_.disc_steps); ++k) {
            disc_opt_->zero_grad();
            auto ld = losses::gan_discriminator_loss(fake, z_high, prompt, disc_, schedule_, gen_);
            ld.backward();
            disc_opt_->step();
            out.disc_loss = ld.item<double>();
        }
        out.disc_updated = true;
    }

    ++step_;
    if (cfg_.verify_every > 0 && step_ % cfg_.verify_every == 0) verify_frozen();

    out.step = step_;
    out.total = report.total.item<double>();
    out.report = std::move(report);
    out.effective = eff;
    out.tau_mean = tau.mean().item<double>();
    out.qf_pred_mean = qf_pred.mean().item<double>();
    out.qf_gt_mean = qf_gt.mean().item<double>();
    return out;
}

void SodiffTrainer::save(const fs::path& dir, const std::map<std::string, fs::path>& sources) const {
    fs::create_directories(dir);
    json hashes = json::object();
    json paths = json::object();
    for (const auto& [name, path] : sources) {
        hashes[name] = checkpoint_hash(path);
        paths[name] = fs::absolute(path).string();
    }

    Checkpoint adapters;
    adapters.kind = "adapters";
    adapters.config = cfg_.lora;
    adapters.tensors = module_state(*frozen_.unet, "", diffusion::is_adapter_parameter);
    adapters.meta = {{"upstream", hashes}, {"step", step_}};
    save_checkpoint(dir / "adapters.ckpt", adapters);

    Checkpoint pred;
    pred.kind = "predictor";
    pred.config = cfg_.predictor;
    pred.tensors = module_state(*predictor_);
    pred.meta = {{"trained", cfg_.use_time_predictor}, {"step", step_}};
    save_checkpoint(dir / "predictor.ckpt", pred);

    Checkpoint disc;
    disc.kind = "discriminator";
    disc.config = {{"unet", cfg_.unet}, {"discriminator", cfg_.discriminator}};
    disc.tensors = module_state(*disc_);
    disc.meta = {{"trained", cfg_.use_gan}, {"step", step_}};
    save_checkpoint(dir / "discriminator.ckpt", disc);

    json set = {{"config", cfg_},
                {"sources", paths},
                {"hashes", hashes},
                {"adapters", "adapters.ckpt"},
                {"predictor", "predictor.ckpt"},
                {"discriminator", "discriminator.ckpt"}};
    std::ofstream out(dir / "ckpt_set.json");
    out << set.dump(2) << "\n";
}

// ---- checkpoint helpers --------------------------------------------------------------------

namespace {

Checkpoint expect(const fs::path& path, const std::string& kind) {
    auto ck = load_checkpoint(path);
    if (ck.kind != kind) {
        throw CheckpointError(path.string() + " holds a '" + ck.kind + "' checkpoint, expected '" + kind + "'");
    }
    return ck;
}

}  // namespace

void save_saipe(const fs::path& path, saipe::Saipe& model) {
    Checkpoint ck;
    ck.kind = "saipe";
    ck.config = model->config();
    ck.tensors = module_state(*model);
    save_checkpoint(path, ck);
}

saipe::Saipe load_saipe(const fs::path& path) {
    auto ck = expect(path, "saipe");
    saipe::Saipe model(ck.config.get<saipe::SaipeConfig>());
    load_module_state(*model, ck.tensors);
    model->eval();
    return model;
}

void save_autoencoder(const fs::path& path, diffusion::Autoencoder& model) {
    Checkpoint ck;
    ck.kind = "autoencoder";
    ck.config = model->config();
    ck.tensors = module_state(*model);
    save_checkpoint(path, ck);
}

diffusion::Autoencoder load_autoencoder(const fs::path& path) {
    auto ck = expect(path, "autoencoder");
    diffusion::Autoencoder model(ck.config.get<diffusion::AutoencoderConfig>());
    load_module_state(*model, ck.tensors);
    model->eval();
    return model;
}

void save_unet_base(const fs::path& path, diffusion::Unet& model) {
    Checkpoint ck;
    ck.kind = "unet";
    ck.config = model->config();
    ck.tensors = module_state(*model, "", [](const std::string& n) { return !diffusion::is_adapter_parameter(n); });
    save_checkpoint(path, ck);
}

diffusion::Unet load_unet(const fs::path& base, const diffusion::LoraConfig& lora,
                          const std::optional<fs::path>& adapters) {
    auto ck = expect(base, "unet");
    diffusion::Unet model(ck.config.get<diffusion::UnetConfig>(), lora);
    load_module_state(*model, ck.tensors, "", true, [](const std::string& n) { return !diffusion::is_adapter_parameter(n); });
    if (adapters) {
        auto ad = expect(*adapters, "adapters");
        if (ad.config_hash != config_hash(json(lora))) {
            throw CheckpointError("adapter checkpoint " + adapters->string() + " was built with a different LoRA config");
        }
        load_module_state(*model, ad.tensors, "", true, diffusion::is_adapter_parameter);
    }
    model->eval();
    return model;
}

timestep::TimePredictor load_predictor(const fs::path& path) {
    auto ck = expect(path, "predictor");
    timestep::TimePredictor model(ck.config.get<timestep::PredictorConfig>());
    load_module_state(*model, ck.tensors);
    model->eval();
    return model;
}

std::string checkpoint_hash(const fs::path& path) { return load_checkpoint(path).config_hash; }

// ---- file-driven runs --------------------------------------------------------------------

namespace {

Dataset load_dataset(const fs::path& dir, int64_t crop) {
    auto result = ingest(dir, crop);
    for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
    return std::move(result.data);
}

torch::Tensor load_text(const TrainConfig& cfg, const Dataset& data, const fs::path& caption_file) {
    auto provider = make_provider(cfg.text);
    return caption_embeddings(data, text::load_caption_file(caption_file, *provider));
}

}  // namespace

void run_autoencoder(const TrainConfig& cfg, const fs::path& data_dir, const std::optional<fs::path>& caption_file,
                     const fs::path& out_dir) {
    cfg.validate();
    auto data = load_dataset(data_dir, cfg.crop);
    fs::create_directories(out_dir);

    AutoencoderTrainer trainer(cfg, data);
    CsvLog log(out_dir / "autoencoder_log.csv", {"step", "loss", "recon", "kl"});
    for (int64_t i = 0; i < cfg.iters; ++i) {
        auto s = trainer.step();
        log.append({static_cast<double>(s.step), s.loss, s.recon, s.kl});
        if (cfg.log_every > 0 && s.step % cfg.log_every == 0) {
            log_line("autoencoder", s.step, {{"loss", s.loss}, {"recon", s.recon}});
        }
    }
    trainer.calibrate_scale();
    save_autoencoder(out_dir / "autoencoder.ckpt", trainer.model());

    torch::Tensor prompts = caption_file
                                ? load_text(cfg, data, *caption_file)
                                : torch::zeros({static_cast<int64_t>(data.size()), cfg.text.tokens, cfg.text.dim});
    PriorTrainer prior(cfg, trainer.model(), data, prompts);
    CsvLog prior_log(out_dir / "prior_log.csv", {"step", "loss"});
    for (int64_t i = 1; i <= cfg.prior_iters; ++i) {
        const double loss = prior.step();
        prior_log.append({static_cast<double>(i), loss});
        if (cfg.log_every > 0 && i % cfg.log_every == 0) log_line("prior", i, {{"loss", loss}});
    }
    save_unet_base(out_dir / "unet_base.ckpt", prior.model());
}

void run_stage1(const TrainConfig& cfg, const fs::path& data_dir, const fs::path& caption_file, const fs::path& out_ckpt,
                const std::optional<fs::path>& resume) {
    cfg.validate();
    auto data = load_dataset(data_dir, cfg.crop);
    SaipeTrainer trainer(cfg, data, load_text(cfg, data, caption_file));
    if (resume) trainer.resume(*resume);

    auto log_path = out_ckpt;
    log_path.replace_extension(".csv");
    CsvLog log(log_path, {"step", "total", "rec", "align"});
    while (trainer.steps_done() < cfg.iters) {
        auto s = trainer.step();
        log.append({static_cast<double>(s.step), s.total, s.rec, s.align});
        if (cfg.log_every > 0 && s.step % cfg.log_every == 0) {
            log_line("saipe", s.step, {{"total", s.total}, {"rec", s.rec}, {"align", s.align}});
        }
        if (cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0) trainer.save(out_ckpt);
    }
    trainer.save(out_ckpt);
}

void run_stage2(const TrainConfig& cfg, const fs::path& data_dir, const fs::path& saipe_ckpt, const fs::path& ae_ckpt,
                const fs::path& unet_ckpt, const fs::path& out_dir, const std::optional<fs::path>& caption_file) {
    cfg.validate();
    auto data = load_dataset(data_dir, cfg.crop);

    FrozenModules frozen;
    frozen.saipe = load_saipe(saipe_ckpt);
    frozen.autoencoder = load_autoencoder(ae_ckpt);
    frozen.unet = load_unet(unet_ckpt, cfg.lora);
    if (frozen.saipe->config().embed_dim != frozen.unet->config().context_dim) {
        throw CheckpointError("SAIPE embedding width does not match the UNet context width");
    }

    torch::Tensor text;
    if (cfg.prompt_source == "text") {
        if (!caption_file) throw std::invalid_argument("prompt_source=text needs a caption file");
        text = load_text(cfg, data, *caption_file);
    }

    SodiffTrainer trainer(cfg, data, frozen, text);
    fs::create_directories(out_dir);
    CsvLog log(out_dir / "sodiff_log.csv", {"step", "total", "recon", "mse", "edge", "image", "gan", "qf", "disc",
                                            "tau", "qf_pred", "qf_gt"});
    const std::map<std::string, fs::path> sources = {
        {"saipe", saipe_ckpt}, {"autoencoder", ae_ckpt}, {"unet", unet_ckpt}};
    for (int64_t i = 0; i < cfg.iters; ++i) {
        auto s = trainer.step();
        const auto& r = s.report;
        log.append({static_cast<double>(s.step), s.total, r.recon, r.recon_mse, r.recon_edge, r.recon_image, r.gan,
                    r.qf, s.disc_loss, s.tau_mean, s.qf_pred_mean, s.qf_gt_mean});
        if (cfg.log_every > 0 && s.step % cfg.log_every == 0) {
            log_line("sodiff", s.step, {{"total", s.total}, {"recon", r.recon}, {"tau", s.tau_mean}});
        }
        if (cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0) trainer.save(out_dir, sources);
    }
    trainer.verify_frozen();
    trainer.save(out_dir, sources);
}

}  // namespace sodiff::harness
