#include "sodiff/evaluate.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "sodiff/checkpoint.hpp"
#include "sodiff/jpeg_codec.hpp"
#include "sodiff/tensor_util.hpp"
#include "sodiff/training.hpp"

namespace sodiff::harness {

namespace fs = std::filesystem;
using nlohmann::json;
namespace F = torch::nn::functional;

Metrics measure(losses::DistsLite& dists, const torch::Tensor& x, const torch::Tensor& y) {
    torch::NoGradGuard guard;
    require_same_shape(x, y, "measure");
    auto a = as_batch(x).to(torch::kFloat64);
    auto b = as_batch(y).to(torch::kFloat64);
    Metrics m;
    m.mse = (a - b).pow(2).mean().item<double>();
    m.psnr = psnr(a, b);
    m.l1 = (a - b).abs().mean().item<double>();
    m.dists = dists->forward(a, b).item<double>();
    return m;
}

namespace {

void accumulate(Metrics& sum, const Metrics& m) {
    sum.psnr += m.psnr;
    sum.mse += m.mse;
    sum.dists += m.dists;
    sum.l1 += m.l1;
}

Metrics divide(Metrics m, size_t n) {
    const auto d = static_cast<double>(n);
    return {m.psnr / d, m.mse / d, m.dists / d, m.l1 / d};
}

std::string fmt(double v, int precision) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

}  // namespace

void aggregate(EvalReport& report) {
    std::map<int, EvalAggregate> sums;
    EvalAggregate total;
    for (const auto& row : report.rows) {
        auto& s = sums[row.qf];
        accumulate(s.restored, row.restored);
        accumulate(s.input, row.input);
        ++s.count;
        accumulate(total.restored, row.restored);
        accumulate(total.input, row.input);
        ++total.count;
    }
    report.per_qf.clear();
    for (auto& [qf, s] : sums) {
        report.per_qf[qf] = {divide(s.restored, s.count), divide(s.input, s.count), s.count};
    }
    report.overall = total.count ? EvalAggregate{divide(total.restored, total.count), divide(total.input, total.count),
                                                 total.count}
                                 : EvalAggregate{};
}

EvalReport evaluate(const Restorer& restore, const Dataset& data, const std::vector<int>& qf_list,
                    const std::string& subsample) {
    if (qf_list.empty()) throw std::invalid_argument("evaluate: empty QF list");
    const auto mode = jpeg::parse_subsampling(subsample);
    losses::DistsLite dists;
    EvalReport report;
    for (int qf : qf_list) {
        for (size_t i = 0; i < data.size(); ++i) {
            auto hq = data.images[i].unsqueeze(0);
            auto lq = jpeg::degrade(hq, qf, mode);
            torch::Tensor out;
            {
                torch::NoGradGuard guard;
                out = restore(lq, hq, qf, data.ids[i]);
            }
            if (out.sizes() != hq.sizes()) {
                throw ShapeError("restorer returned " + shape_string(out) + " for input " + shape_string(hq));
            }
            report.rows.push_back({data.ids[i], qf, measure(dists, out, hq), measure(dists, lq, hq)});
        }
    }
    aggregate(report);
    return report;
}

void write_csv(const EvalReport& report, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << std::setprecision(12);
    out << "id,qf,psnr,mse,dists,l1,input_psnr,input_mse,input_dists,input_l1\n";
    auto line = [&](const std::string& id, const std::string& qf, const Metrics& r, const Metrics& in) {
        out << id << "," << qf << "," << r.psnr << "," << r.mse << "," << r.dists << "," << r.l1 << "," << in.psnr
            << "," << in.mse << "," << in.dists << "," << in.l1 << "\n";
    };
    for (const auto& row : report.rows) line(row.id, std::to_string(row.qf), row.restored, row.input);
    for (const auto& [qf, agg] : report.per_qf) line("mean", std::to_string(qf), agg.restored, agg.input);
    line("mean", "all", report.overall.restored, report.overall.input);
}

std::string to_markdown(const EvalReport& report) {
    std::ostringstream md;
    md << "| Method |";
    for (const auto& [qf, agg] : report.per_qf) {
        (void)agg;
        md << " QF=" << qf << " PSNR | QF=" << qf << " MSE | QF=" << qf << " DISTS-lite | QF=" << qf << " L1 |";
    }
    md << "\n|---|";
    for (size_t i = 0; i < report.per_qf.size(); ++i) md << "---|---|---|---|";
    md << "\n";
    auto row = [&](const std::string& name, bool restored) {
        md << "| " << name << " |";
        for (const auto& [qf, agg] : report.per_qf) {
            (void)qf;
            const auto& m = restored ? agg.restored : agg.input;
            md << " " << fmt(m.psnr, 2) << " | " << fmt(m.mse, 6) << " | " << fmt(m.dists, 4) << " | " << fmt(m.l1, 4)
               << " |";
        }
        md << "\n";
    };
    row("JPEG", false);
    row(report.method, true);
    return md.str();
}

// ---- pipeline --------------------------------------------------------------------------------

SodiffPipeline::SodiffPipeline(const fs::path& ckpt_set) {
    std::ifstream in(ckpt_set);
    if (!in) throw CheckpointError("cannot open " + ckpt_set.string());
    json set;
    try {
        in >> set;
    } catch (const json::exception& e) {
        throw CheckpointError("malformed checkpoint set " + ckpt_set.string() + ": " + e.what());
    }
    cfg_ = set.at("config").get<TrainConfig>();
    const auto dir = ckpt_set.parent_path();
    const auto& sources = set.at("sources");
    const auto& hashes = set.at("hashes");

    auto check = [&](const std::string& name, const json& expected_config) {
        const fs::path path = sources.at(name).get<std::string>();
        const auto actual = checkpoint_hash(path);
        if (actual != hashes.at(name).get<std::string>() || actual != config_hash(expected_config)) {
            throw CheckpointError("incompatible config hash for " + name + " checkpoint " + path.string());
        }
        return path;
    };
    auto saipe_path = check("saipe", cfg_.saipe);
    auto ae_path = check("autoencoder", cfg_.autoencoder);
    auto unet_path = check("unet", cfg_.unet);

    const auto adapters = dir / set.at("adapters").get<std::string>();
    auto ad = load_checkpoint(adapters);
    if (ad.meta.value("upstream", json::object()) != hashes) {
        throw CheckpointError("incompatible config hash: adapters were trained against other base checkpoints");
    }

    modules_.saipe = load_saipe(saipe_path);
    modules_.autoencoder = load_autoencoder(ae_path);
    modules_.unet = load_unet(unet_path, cfg_.lora, adapters);
    predictor_ = load_predictor(dir / set.at("predictor").get<std::string>());
    schedule_ = diffusion::build_schedule(cfg_.schedule);
    for (torch::nn::Module* m : std::initializer_list<torch::nn::Module*>{modules_.saipe.get(), modules_.autoencoder.get(), modules_.unet.get(), predictor_.get()}) {
        set_requires_grad(*m, false);
        m->eval();
    }
}

Restoration restore_image(const TrainConfig& cfg, FrozenModules& modules, timestep::TimePredictor& predictor,
                          const diffusion::NoiseSchedule& schedule, const torch::Tensor& lq, const torch::Tensor& prompt) {
    torch::NoGradGuard guard;
    auto x = as_batch(lq).to(torch::kFloat32);
    require_rank(x, 4, "restore");
    const auto n = x.size(0);
    const auto h = x.size(2), w = x.size(3);
    constexpr int64_t kMultiple = 16;
    const auto ph = (kMultiple - h % kMultiple) % kMultiple;
    const auto pw = (kMultiple - w % kMultiple) % kMultiple;
    auto padded = (ph || pw) ? F::pad(x, F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate)) : x;

    torch::Tensor e;
    if (prompt.defined()) {
        e = prompt.dim() == 2 ? prompt.unsqueeze(0).expand({n, -1, -1}) : prompt;
    } else if (cfg.prompt_source == "text") {
        throw std::invalid_argument("this checkpoint set is text-prompted; pass a caption embedding");
    } else {
        e = modules.saipe->forward(padded).embedding;
    }

    const auto T = schedule.timesteps();
    torch::Tensor tau, qf_pred;
    if (cfg.use_time_predictor) {
        auto dist = predictor->forward(padded, nullptr, cfg.predictor.anneal_to);
        tau = timestep::bins_to_timesteps(dist.tau_pred, cfg.predictor.bins, T);
        qf_pred = dist.qf_pred;
    } else {
        const double fixed = cfg.fixed_timestep >= 0 ? cfg.fixed_timestep : static_cast<double>(T / 2);
        tau = torch::full({n}, std::min(fixed, static_cast<double>(T - 1)));
        qf_pred = torch::zeros({n});
    }
    auto z = modules.autoencoder->encode(padded);
    auto eps = modules.unet->forward(z, tau, e);
    auto z_hat = diffusion::restore_with_noise(z, eps, schedule.alpha_bar_at(tau));
    auto out = modules.autoencoder->decode(z_hat).clamp(0.0, 1.0).slice(2, 0, h).slice(3, 0, w);
    return {lq.dim() == 3 ? out.squeeze(0) : out, tau, qf_pred};
}

Restoration SodiffPipeline::restore(const torch::Tensor& lq, const torch::Tensor& prompt) {
    return restore_image(cfg_, modules_, predictor_, schedule_, lq, prompt);
}

torch::Tensor SodiffPipeline::predict_qf(const torch::Tensor& lq) {
    torch::NoGradGuard guard;
    return predictor_->forward(as_batch(lq).to(torch::kFloat32)).qf_pred;
}

Restoration SodiffPipeline::estimate(const torch::Tensor& lq) {
    torch::NoGradGuard guard;
    auto x = as_batch(lq).to(torch::kFloat32);
    const auto T = schedule_.timesteps();
    if (!cfg_.use_time_predictor) {
        const double fixed = cfg_.fixed_timestep >= 0 ? cfg_.fixed_timestep : static_cast<double>(T / 2);
        return {{}, torch::full({x.size(0)}, std::min(fixed, static_cast<double>(T - 1))), torch::zeros({x.size(0)})};
    }
    auto dist = predictor_->forward(x, nullptr, cfg_.predictor.anneal_to);
    return {{}, timestep::bins_to_timesteps(dist.tau_pred, cfg_.predictor.bins, T), dist.qf_pred};
}

Restorer SodiffPipeline::restorer(const text::CaptionMap* captions) {
    return [this, captions](const torch::Tensor& lq, const torch::Tensor&, int, const std::string& id) {
        torch::Tensor prompt;
        if (text_prompted()) {
            if (!captions || !captions->count(id)) throw text::MissingCaptionsError({id});
            prompt = captions->at(id).embedding;
        }
        return restore(lq, prompt).image;
    };
}

}  // namespace sodiff::harness
