#include "sodiff/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sodiff::harness {

void TrainConfig::validate() const {
    if (stage != "saipe" && stage != "sodiff" && stage != "autoencoder") {
        throw std::invalid_argument("TrainConfig: unknown stage '" + stage + "'");
    }
    if (optimizer != "adam" && optimizer != "adamw") throw std::invalid_argument("TrainConfig: optimizer must be adam or adamw");
    if (!(lr > 0.0) || batch < 1 || iters < 0 || crop < 16 || crop % 16 != 0) {
        throw std::invalid_argument("TrainConfig: need lr > 0, batch >= 1, iters >= 0, crop a positive multiple of 16");
    }
    if (qf_range[0] < 1 || qf_range[1] > 100 || qf_range[0] > qf_range[1]) {
        throw std::invalid_argument("TrainConfig: qf_range must satisfy 1 <= lo <= hi <= 100");
    }
    if (qf_sampling != "uniform" && qf_sampling != "stratified") {
        throw std::invalid_argument("TrainConfig: qf_sampling must be uniform or stratified");
    }
    if (prompt_source != "saipe" && prompt_source != "text") {
        throw std::invalid_argument("TrainConfig: prompt_source must be saipe or text");
    }
    if (weights.alpha < 0.0 || weights.beta < 0.0) throw std::invalid_argument("TrainConfig: loss weights must be >= 0");
    if (text.dim != saipe.embed_dim || text.tokens != saipe.query_count) {
        throw std::invalid_argument("TrainConfig: text embedding shape must equal the SAIPE embedding shape");
    }
    if (unet.context_dim != saipe.embed_dim) throw std::invalid_argument("TrainConfig: unet.context_dim must equal saipe.embed_dim");
    if (unet.latent_channels != autoencoder.latent_channels) {
        throw std::invalid_argument("TrainConfig: unet.latent_channels must equal autoencoder.latent_channels");
    }
    saipe.validate();
}

TrainConfig stage_defaults(const std::string& stage) {
    TrainConfig cfg;
    cfg.stage = stage;
    if (stage == "saipe") {
        cfg.optimizer = "adam";
        cfg.lr = 2e-4;
    } else if (stage == "sodiff") {
        cfg.optimizer = "adamw";
        cfg.lr = 1e-5;
        cfg.weight_decay = 1e-2;
    } else if (stage == "autoencoder") {
        cfg.optimizer = "adam";
        cfg.lr = 1e-3;
    } else {
        throw std::invalid_argument("unknown stage '" + stage + "'");
    }
    return cfg;
}

TrainConfig load_config(const std::filesystem::path& path, const std::string& stage) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    const auto file = nlohmann::json::parse(in);
    const auto chosen = stage.empty() ? file.value("stage", std::string("saipe")) : stage;
    nlohmann::json merged = stage_defaults(chosen);
    merged.merge_patch(file);
    merged["stage"] = chosen;
    auto cfg = merged.get<TrainConfig>();
    cfg.validate();
    return cfg;
}

TrainConfig apply_overrides(const TrainConfig& cfg, const std::vector<std::string>& assignments) {
    nlohmann::json j = cfg;
    for (const auto& assignment : assignments) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must be key=value: " + assignment);
        const auto key = assignment.substr(0, eq);
        const auto raw = assignment.substr(eq + 1);
        std::string pointer;
        std::stringstream parts(key);
        for (std::string part; std::getline(parts, part, '.');) pointer += "/" + part;
        const nlohmann::json::json_pointer ptr(pointer);
        if (!j.contains(ptr)) throw std::invalid_argument("unknown config key '" + key + "'");
        auto value = nlohmann::json::parse(raw, nullptr, /*allow_exceptions=*/false);
        if (value.is_discarded() || (j.at(ptr).is_string() && !value.is_string())) value = raw;
        j[ptr] = value;
    }
    auto out = j.get<TrainConfig>();
    out.validate();
    return out;
}

const std::vector<std::string>& ablation_names() {
    static const std::vector<std::string> names = {"wo_align", "text_prompt", "wo_tp", "wo_qf", "wo_ea", "wo_gan"};
    return names;
}

TrainConfig ablation_config(const TrainConfig& base, const std::string& name) {
    auto cfg = base;
    if (name == "wo_align") {
        cfg.saipe.align_weight = 0.0;
    } else if (name == "text_prompt") {
        cfg.prompt_source = "text";
    } else if (name == "wo_tp") {
        cfg.use_time_predictor = false;
    } else if (name == "wo_qf") {
        cfg.use_qf_loss = false;
    } else if (name == "wo_ea") {
        cfg.use_edge_aware = false;
    } else if (name == "wo_gan") {
        cfg.use_gan = false;
    } else {
        throw std::invalid_argument("unknown ablation '" + name + "'");
    }
    return cfg;
}

TrainConfig toy_config(const std::string& stage) {
    auto cfg = stage_defaults(stage);
    cfg.crop = 64;
    cfg.batch = 4;
    cfg.saipe.feature_channels = 48;
    cfg.saipe.heads = 4;
    cfg.saipe.stl_per_rstb = 2;
    cfg.saipe.decoder_stl = 1;
    cfg.saipe.query_count = 77;
    cfg.saipe.embed_dim = 64;
    cfg.saipe.embed_hidden = 64;
    cfg.text.tokens = 77;
    cfg.text.dim = 64;
    cfg.unet.channels = {32, 64, 128};
    cfg.unet.context_dim = 64;
    cfg.autoencoder.base_channels = 32;
    cfg.predictor.channels = 16;
    return cfg;
}

}  // namespace sodiff::harness
