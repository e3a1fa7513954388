// Command-line front end: data preparation, the three training stages, inference and evaluation.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <regex>

#include <CLI11.hpp>

#include "sodiff/evaluate.hpp"
#include "sodiff/image_io.hpp"
#include "sodiff/jpeg_codec.hpp"
#include "sodiff/synthetic.hpp"
#include "sodiff/training.hpp"

namespace fs = std::filesystem;
using namespace sodiff;
using namespace sodiff::harness;

namespace {

struct ConfigArgs {
    std::string file;
    bool toy = false;
    std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--config", args.file, "JSON config file")->check(CLI::ExistingFile);
    cmd->add_flag("--toy", args.toy, "start from the small desk-scale configuration");
    cmd->add_option("--set", args.overrides, "key=value override (dotted keys), repeatable");
}

TrainConfig resolve(const ConfigArgs& args, const std::string& stage) {
    TrainConfig cfg;
    if (!args.file.empty()) {
        cfg = load_config(args.file, stage);
    } else {
        cfg = args.toy ? toy_config(stage) : stage_defaults(stage);
    }
    cfg = apply_overrides(cfg, args.overrides);
    cfg.validate();
    return cfg;
}

std::vector<fs::path> png_files(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

std::vector<int> parse_qf_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stoi(item));
    if (out.empty()) throw CLI::ValidationError("--qf", "empty list");
    return out;
}

/// "30" or "5-95".
std::array<int, 2> parse_qf_range(const std::string& text) {
    static const std::regex pattern(R"(^\s*(\d+)\s*(?:-\s*(\d+))?\s*$)");
    std::smatch m;
    if (!std::regex_match(text, m, pattern)) throw CLI::ValidationError("--qf", "expected INT or LO-HI");
    const int lo = std::stoi(m[1]);
    const int hi = m[2].matched ? std::stoi(m[2]) : lo;
    if (lo < 1 || hi > 100 || lo > hi) throw CLI::ValidationError("--qf", "range must lie in [1,100]");
    return {lo, hi};
}

std::optional<fs::path> optional_path(const std::string& s) {
    return s.empty() ? std::nullopt : std::optional<fs::path>(s);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SODiff: semantic-prompted one-step diffusion for JPEG artifact removal"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "intra-op threads (0 keeps the LibTorch default)");

    // synth
    auto* synth = app.add_subcommand("synth", "write a procedural image corpus with captions");
    std::string synth_out;
    int64_t synth_count = 100, synth_size = 64;
    uint64_t synth_seed = 0;
    synth->add_option("--out", synth_out)->required();
    synth->add_option("--count", synth_count);
    synth->add_option("--size", synth_size);
    synth->add_option("--seed", synth_seed);

    // degrade
    auto* degrade = app.add_subcommand("degrade", "JPEG-degrade a directory of PNGs");
    std::string deg_in, deg_out, deg_qf = "10", deg_sub = "444";
    uint64_t deg_seed = 0;
    degrade->add_option("--in", deg_in)->required()->check(CLI::ExistingDirectory);
    degrade->add_option("--out", deg_out)->required();
    degrade->add_option("--qf", deg_qf, "quality factor or LO-HI range sampled per image");
    degrade->add_option("--subsample", deg_sub)->check(CLI::IsMember({"444", "420"}));
    degrade->add_option("--seed", deg_seed);

    // train-ae
    auto* train_ae = app.add_subcommand("train-ae", "train the autoencoder, then pre-train the base UNet prior");
    ConfigArgs ae_cfg;
    std::string ae_data, ae_captions, ae_out;
    add_config_options(train_ae, ae_cfg);
    train_ae->add_option("--data", ae_data)->required()->check(CLI::ExistingDirectory);
    train_ae->add_option("--captions", ae_captions)->check(CLI::ExistingFile);
    train_ae->add_option("--out", ae_out)->required();

    // train-saipe
    auto* train_saipe = app.add_subcommand("train-saipe", "stage 1: train the image prompt extractor");
    ConfigArgs s1_cfg;
    std::string s1_data, s1_captions, s1_out, s1_resume;
    add_config_options(train_saipe, s1_cfg);
    train_saipe->add_option("--data", s1_data)->required()->check(CLI::ExistingDirectory);
    train_saipe->add_option("--captions,--manifest", s1_captions)->required()->check(CLI::ExistingFile);
    train_saipe->add_option("--out", s1_out, "checkpoint path")->required();
    train_saipe->add_option("--resume", s1_resume)->check(CLI::ExistingFile);

    // train-sodiff
    auto* train_sodiff = app.add_subcommand("train-sodiff", "stage 2: adapters, timestep predictor, discriminator");
    ConfigArgs s2_cfg;
    std::string s2_data, s2_saipe, s2_ae, s2_unet, s2_out, s2_captions;
    add_config_options(train_sodiff, s2_cfg);
    train_sodiff->add_option("--data", s2_data)->required()->check(CLI::ExistingDirectory);
    train_sodiff->add_option("--saipe", s2_saipe)->required()->check(CLI::ExistingFile);
    train_sodiff->add_option("--ae", s2_ae)->required()->check(CLI::ExistingFile);
    train_sodiff->add_option("--unet", s2_unet)->required()->check(CLI::ExistingFile);
    train_sodiff->add_option("--captions", s2_captions)->check(CLI::ExistingFile);
    train_sodiff->add_option("--out", s2_out)->required();
    std::string s2_ablation;
    train_sodiff->add_option("--ablation", s2_ablation)->check(CLI::IsMember(ablation_names()));

    // infer
    auto* infer = app.add_subcommand("infer", "restore every PNG in a directory");
    std::string inf_ckpt, inf_in, inf_out, inf_captions;
    infer->add_option("--ckpt", inf_ckpt, "ckpt_set.json")->required()->check(CLI::ExistingFile);
    infer->add_option("--in", inf_in)->required()->check(CLI::ExistingDirectory);
    infer->add_option("--out", inf_out)->required();
    infer->add_option("--captions", inf_captions)->check(CLI::ExistingFile);

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "degrade, restore and score a test set");
    std::string ev_ckpt, ev_test, ev_out = "eval", ev_qf = "5,10,20", ev_captions, ev_sub = "444";
    bool ev_identity = false;
    eval->add_option("--ckpt", ev_ckpt, "ckpt_set.json");
    eval->add_option("--test", ev_test)->required()->check(CLI::ExistingDirectory);
    eval->add_option("--qf", ev_qf, "comma-separated quality factors");
    eval->add_option("--out", ev_out, "directory for report.csv and report.md");
    eval->add_option("--captions", ev_captions)->check(CLI::ExistingFile);
    eval->add_option("--subsample", ev_sub)->check(CLI::IsMember({"444", "420"}));
    eval->add_flag("--identity", ev_identity, "score the JPEG input itself (no checkpoint needed)");

    // predict-qf
    auto* pqf = app.add_subcommand("predict-qf", "estimate the JPEG quality factor of each PNG");
    std::string pq_ckpt, pq_in, pq_out;
    pqf->add_option("--ckpt", pq_ckpt, "ckpt_set.json")->required()->check(CLI::ExistingFile);
    pqf->add_option("--in", pq_in)->required()->check(CLI::ExistingDirectory);
    pqf->add_option("--out", pq_out, "CSV output (stdout when omitted)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (threads > 0) torch::set_num_threads(threads);

        if (*synth) {
            write_corpus(synthetic_corpus(synth_count, synth_size, synth_seed), synth_out);
            std::cout << "wrote " << synth_count << " images to " << synth_out << "\n";
        } else if (*degrade) {
            const auto range = parse_qf_range(deg_qf);
            const auto mode = jpeg::parse_subsampling(deg_sub);
            fs::create_directories(deg_out);
            std::mt19937_64 rng(deg_seed);
            std::uniform_int_distribution<int> draw(range[0], range[1]);
            std::ofstream manifest(fs::path(deg_out) / "manifest.csv");
            manifest << "file,qf,subsample\n";
            for (const auto& file : png_files(deg_in)) {
                const int qf = draw(rng);
                write_png(fs::path(deg_out) / file.filename(), jpeg::degrade(read_png(file), qf, mode));
                manifest << file.filename().string() << "," << qf << "," << to_string(mode) << "\n";
            }
        } else if (*train_ae) {
            run_autoencoder(resolve(ae_cfg, "autoencoder"), ae_data, optional_path(ae_captions), ae_out);
        } else if (*train_saipe) {
            run_stage1(resolve(s1_cfg, "saipe"), s1_data, s1_captions, s1_out, optional_path(s1_resume));
        } else if (*train_sodiff) {
            auto cfg = resolve(s2_cfg, "sodiff");
            if (!s2_ablation.empty()) cfg = ablation_config(cfg, s2_ablation);
            run_stage2(cfg, s2_data, s2_saipe, s2_ae, s2_unet, s2_out, optional_path(s2_captions));
        } else if (*infer) {
            SodiffPipeline pipe(inf_ckpt);
            text::CaptionMap captions;
            if (!inf_captions.empty()) captions = text::load_caption_file(inf_captions, *make_provider(pipe.config().text));
            auto restore = pipe.restorer(&captions);
            fs::create_directories(inf_out);
            for (const auto& file : png_files(inf_in)) {
                auto lq = read_png(file);
                write_png(fs::path(inf_out) / file.filename(), restore(lq, lq, 0, file.stem().string()));
            }
        } else if (*eval) {
            const auto qf_list = parse_qf_list(ev_qf);
            auto data = ingest(ev_test, 8).data;
            EvalReport report;
            if (ev_identity) {
                report = evaluate([](const torch::Tensor& lq, const torch::Tensor&, int, const std::string&) { return lq; },
                                  data, qf_list, ev_sub);
                report.method = "identity";
            } else {
                if (ev_ckpt.empty()) throw CLI::ValidationError("--ckpt", "required unless --identity is given");
                SodiffPipeline pipe(ev_ckpt);
                text::CaptionMap captions;
                if (!ev_captions.empty()) {
                    captions = text::load_caption_file(ev_captions, *make_provider(pipe.config().text));
                }
                report = evaluate(pipe.restorer(&captions), data, qf_list, ev_sub);
                report.method = "SODiff";
            }
            fs::create_directories(ev_out);
            write_csv(report, fs::path(ev_out) / "report.csv");
            const auto md = to_markdown(report);
            std::ofstream(fs::path(ev_out) / "report.md") << md;
            std::cout << md;
        } else if (*pqf) {
            SodiffPipeline pipe(pq_ckpt);
            std::ofstream file;
            if (!pq_out.empty()) file.open(pq_out);
            std::ostream& out = pq_out.empty() ? std::cout : file;
            out << "file,qf_pred,tau_pred\n";
            for (const auto& path : png_files(pq_in)) {
                const auto est = pipe.estimate(read_png(path));
                out << path.filename().string() << "," << est.qf_pred.item<double>() << "," << est.tau.item<double>()
                    << "\n";
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
