#include <fstream>
#include <sstream>

#include "sodiff/evaluate.hpp"
#include "sodiff/image_io.hpp"
#include "sodiff/jpeg_codec.hpp"
#include "sodiff/lora.hpp"
#include "sodiff/synthetic.hpp"
#include "sodiff/tensor_util.hpp"
#include "sodiff/training.hpp"
#include "support.hpp"

using namespace sodiff;
using namespace sodiff::harness;
using testing::TempDir;

namespace {

// Smallest configuration that still exercises every module.
TrainConfig tiny(const std::string& stage) {
    auto cfg = stage_defaults(stage);
    cfg.crop = 32;
    cfg.batch = 2;
    cfg.iters = 3;
    cfg.log_every = 0;
    cfg.verify_every = 1;
    cfg.saipe.feature_channels = 8;
    cfg.saipe.heads = 2;
    cfg.saipe.window = 4;
    cfg.saipe.rstb_count = 1;
    cfg.saipe.stl_per_rstb = 2;
    cfg.saipe.query_count = 6;
    cfg.saipe.embed_dim = 8;
    cfg.saipe.embed_hidden = 8;
    cfg.saipe.embed_heads = 2;
    cfg.saipe.random_features = 8;
    cfg.saipe.conv_scales = {1, 3};
    cfg.text.tokens = 6;
    cfg.text.dim = 8;
    cfg.unet.channels = {8, 16, 16};
    cfg.unet.context_dim = 8;
    cfg.unet.heads = 2;
    cfg.unet.groups = 4;
    cfg.autoencoder.base_channels = 8;
    cfg.autoencoder.groups = 4;
    cfg.predictor.channels = 8;
    cfg.predictor.blocks = 2;
    cfg.predictor.bins = 10;
    cfg.predictor.groups = 4;
    cfg.discriminator.prompt_features = 4;
    cfg.lora.rank = 2;
    cfg.validate();
    return cfg;
}

FrozenModules fresh_modules(const TrainConfig& cfg) {
    torch::manual_seed(5);
    FrozenModules m;
    m.saipe = saipe::Saipe(cfg.saipe);
    m.autoencoder = diffusion::Autoencoder(cfg.autoencoder);
    m.unet = diffusion::Unet(cfg.unet, cfg.lora);
    return m;
}

void write_captions(const SyntheticCorpus& corpus, const std::filesystem::path& path, size_t skip_last = 0) {
    std::ofstream out(path);
    for (size_t i = 0; i + skip_last < corpus.data.size(); ++i) out << corpus.data.ids[i] << "\t" << corpus.captions[i] << "\n";
}

}  // namespace

TEST_SUITE("train_eval_harness") {

TEST_CASE("stage defaults carry the training recipe") {
    auto s1 = stage_defaults("saipe");
    CHECK(s1.optimizer == "adam");
    CHECK(s1.lr == doctest::Approx(2e-4));
    auto s2 = stage_defaults("sodiff");
    CHECK(s2.optimizer == "adamw");
    CHECK(s2.lr == doctest::Approx(1e-5));
    CHECK(s2.qf_range == std::array<int, 2>{5, 95});
    CHECK(s2.use_time_predictor);
    CHECK(s2.use_gan);
    CHECK_THROWS_AS(stage_defaults("stage3"), std::invalid_argument);
}

TEST_CASE("overrides use dotted keys and reject unknown ones") {
    auto cfg = apply_overrides(tiny("sodiff"), {"lr=0.001", "lora.rank=4", "subsample=420", "use_gan=false"});
    CHECK(cfg.lr == doctest::Approx(1e-3));
    CHECK(cfg.lora.rank == 4);
    CHECK(cfg.subsample == "420");
    CHECK_FALSE(cfg.use_gan);
    CHECK_THROWS_AS(apply_overrides(cfg, {"lora.rnak=4"}), std::invalid_argument);
    CHECK_THROWS_AS(apply_overrides(cfg, {"noequals"}), std::invalid_argument);
    CHECK_THROWS(apply_overrides(cfg, {"crop=40"}));
}

TEST_CASE("validation catches inconsistent widths") {
    auto cfg = tiny("sodiff");
    cfg.text.dim = 16;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny("sodiff");
    cfg.unet.latent_channels = 8;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny("sodiff");
    cfg.qf_range = {50, 10};
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("config files overlay the stage defaults") {
    TempDir tmp("cfgfile");
    std::ofstream(tmp / "c.json") << R"({"stage": "sodiff", "iters": 7, "lora": {"rank": 3}})";
    auto cfg = load_config(tmp / "c.json");
    CHECK(cfg.stage == "sodiff");
    CHECK(cfg.iters == 7);
    CHECK(cfg.lora.rank == 3);
    CHECK(cfg.optimizer == "adamw");
}

TEST_CASE("ablation presets switch exactly one component") {
    auto base = tiny("sodiff");
    CHECK(ablation_names().size() == 6);
    CHECK(ablation_config(base, "wo_align").saipe.align_weight == 0.0);
    CHECK(ablation_config(base, "text_prompt").prompt_source == "text");
    CHECK_FALSE(ablation_config(base, "wo_tp").use_time_predictor);
    CHECK_FALSE(ablation_config(base, "wo_qf").use_qf_loss);
    CHECK_FALSE(ablation_config(base, "wo_ea").use_edge_aware);
    auto g = ablation_config(base, "wo_gan");
    CHECK_FALSE(g.use_gan);
    CHECK(g.use_time_predictor);
    CHECK_THROWS_AS(ablation_config(base, "wo_everything"), std::invalid_argument);
}

TEST_CASE("ingest skips undersized and unreadable files") {
    TempDir tmp("ingest");
    CHECK_THROWS_WITH_AS(ingest(tmp.path(), 16), doctest::Contains("no usable images"), std::runtime_error);

    auto corpus = synthetic_corpus(10, 32, 3);
    write_corpus(corpus, tmp.path());
    write_png(tmp / "tiny_a.png", torch::rand({3, 8, 8}));
    write_png(tmp / "tiny_b.png", torch::rand({3, 12, 40}));
    auto result = ingest(tmp.path(), 16);
    CHECK(result.data.size() == 10);
    CHECK(result.skipped == 2);
    CHECK(result.warnings.size() == 2);

    std::ofstream(tmp / "broken.png") << "not a png";
    CHECK(ingest(tmp.path(), 16).skipped == 3);
}

TEST_CASE("pipeline samples are a function of the seed") {
    auto corpus = synthetic_corpus(5, 48, 1);
    DataPipeline a(corpus.data, 32, true, {5, 95}, "uniform", 9);
    DataPipeline b(corpus.data, 32, true, {5, 95}, "uniform", 9);
    DataPipeline c(corpus.data, 32, true, {5, 95}, "uniform", 10);
    bool differs = false;
    for (int i = 0; i < 4; ++i) {
        auto x = a.next(3), y = b.next(3), z = c.next(3);
        CHECK(torch::equal(x.hq, y.hq));
        CHECK(x.qf == y.qf);
        CHECK(x.index == y.index);
        differs = differs || !torch::equal(x.hq, z.hq) || x.qf != z.qf;
        for (int q : x.qf) CHECK((q >= 5 && q <= 95));
    }
    CHECK(differs);

    auto saved = a.state();
    auto next = a.next(3);
    DataPipeline d(corpus.data, 32, true, {5, 95}, "uniform", 0);
    d.restore(saved);
    auto replay = d.next(3);
    CHECK(torch::equal(next.hq, replay.hq));
    CHECK(next.qf == replay.qf);
}

TEST_CASE("stratified QF draws cover the range") {
    auto corpus = synthetic_corpus(2, 32, 1);
    DataPipeline p(corpus.data, 32, false, {1, 100}, "stratified", 4);
    auto qf = p.next(10).qf;
    std::sort(qf.begin(), qf.end());
    for (int i = 0; i < 10; ++i) {
        CHECK(qf[i] >= 1 + 10 * i);
        CHECK(qf[i] <= 10 + 10 * i);
    }
}

TEST_CASE("checkpoint archives round trip") {
    TempDir tmp("ckpt");
    Checkpoint c;
    c.kind = "unit";
    c.config = {{"width", 3}};
    c.config_hash = config_hash(c.config);
    c.meta = {{"step", 12}};
    c.tensors["a"] = torch::randn({2, 3});
    c.tensors["b"] = torch::arange(5, torch::kInt64);
    c.tensors["c"] = torch::randn({4}, torch::kFloat64);
    save_checkpoint(tmp / "x.ckpt", c);
    auto r = load_checkpoint(tmp / "x.ckpt");
    CHECK(r.kind == "unit");
    CHECK(r.config == c.config);
    CHECK(r.config_hash == c.config_hash);
    CHECK(r.meta.at("step") == 12);
    for (const auto& [name, t] : c.tensors) CHECK(torch::equal(r.tensors.at(name), t));

    CHECK(config_hash({{"width", 3}}) == c.config_hash);
    CHECK(config_hash({{"width", 4}}) != c.config_hash);
    std::ofstream(tmp / "junk.ckpt") << "garbage bytes";
    CHECK_THROWS_AS(load_checkpoint(tmp / "junk.ckpt"), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(tmp / "absent.ckpt"), CheckpointError);
}

TEST_CASE("strict module loading reports missing and mismatched tensors") {
    torch::nn::Linear a(3, 2), b(3, 2), c(4, 2);
    auto state = module_state(*a);
    load_module_state(*b, state);
    CHECK(torch::equal(a->weight, b->weight));
    CHECK_THROWS_AS(load_module_state(*c, state), CheckpointError);
    state.erase("bias");
    CHECK_THROWS_AS(load_module_state(*b, state), CheckpointError);
    CHECK_NOTHROW(load_module_state(*b, state, "", false));
}

TEST_CASE("module checkpoints reject a different configuration") {
    TempDir tmp("modules");
    auto cfg = tiny("sodiff");
    auto m = fresh_modules(cfg);
    save_saipe(tmp / "s.ckpt", m.saipe);
    save_autoencoder(tmp / "a.ckpt", m.autoencoder);
    save_unet_base(tmp / "u.ckpt", m.unet);
    CHECK(parameter_checksum(*load_saipe(tmp / "s.ckpt")) == parameter_checksum(*m.saipe));
    CHECK(parameter_checksum(*load_autoencoder(tmp / "a.ckpt")) == parameter_checksum(*m.autoencoder));
    auto u = load_unet(tmp / "u.ckpt", cfg.lora);
    CHECK(diffusion::base_checksum(*u) == diffusion::base_checksum(*m.unet));
    CHECK(checkpoint_hash(tmp / "s.ckpt") == config_hash(cfg.saipe));
    CHECK_THROWS_AS(load_predictor(tmp / "s.ckpt"), CheckpointError);
}

TEST_CASE("identity and perfect restorers give exact metrics") {
    auto corpus = synthetic_corpus(3, 32, 2);
    auto id_report = evaluate([](const torch::Tensor& lq, const torch::Tensor&, int, const std::string&) { return lq; },
                              corpus.data, {5, 10}, "444");
    REQUIRE(id_report.rows.size() == 6);
    for (const auto& row : id_report.rows) {
        CHECK(row.restored.psnr == row.input.psnr);
        CHECK(row.restored.mse == row.input.mse);
        CHECK(row.restored.dists == row.input.dists);
    }
    auto perfect = evaluate([](const torch::Tensor&, const torch::Tensor& hq, int, const std::string&) { return hq; },
                            corpus.data, {10}, "444");
    for (const auto& row : perfect.rows) {
        CHECK(row.restored.mse == 0.0);
        CHECK(row.restored.l1 == 0.0);
        CHECK(row.restored.dists == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(row.input.mse > 0.0);
    }
}

TEST_CASE("aggregates equal the mean of per-image rows") {
    auto corpus = synthetic_corpus(4, 32, 5);
    auto report = evaluate([](const torch::Tensor& lq, const torch::Tensor&, int, const std::string&) { return lq; },
                           corpus.data, {5, 20}, "420");
    for (int qf : {5, 20}) {
        double psnr = 0, dists = 0;
        int n = 0;
        for (const auto& row : report.rows) {
            if (row.qf != qf) continue;
            psnr += row.restored.psnr;
            dists += row.restored.dists;
            ++n;
        }
        CHECK(report.per_qf.at(qf).count == 4);
        CHECK(std::abs(report.per_qf.at(qf).restored.psnr - psnr / n) < 1e-9);
        CHECK(std::abs(report.per_qf.at(qf).restored.dists - dists / n) < 1e-9);
    }
    CHECK(report.overall.count == 8);
    CHECK(report.per_qf.at(5).input.psnr < report.per_qf.at(20).input.psnr);
    CHECK_THROWS_AS(evaluate([](const torch::Tensor& lq, const torch::Tensor&, int, const std::string&) { return lq; },
                             corpus.data, {}, "444"),
                    std::invalid_argument);
    CHECK_THROWS_AS(evaluate([](const torch::Tensor& lq, const torch::Tensor&, int, const std::string&) {
                        return lq.slice(2, 0, 16);
                    },
                             corpus.data, {10}, "444"),
                    ShapeError);
}

TEST_CASE("reports serialize to CSV and markdown") {
    TempDir tmp("report");
    auto corpus = synthetic_corpus(2, 32, 5);
    auto report = evaluate([](const torch::Tensor& lq, const torch::Tensor&, int, const std::string&) { return lq; },
                           corpus.data, {10, 30}, "444");
    report.method = "identity";
    write_csv(report, tmp / "r.csv");
    std::ifstream in(tmp / "r.csv");
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    REQUIRE(lines.size() == 1 + 4 + 2 + 1);
    CHECK(lines[0].rfind("id,qf,psnr,mse,dists,l1", 0) == 0);
    CHECK(lines.back().rfind("mean,all,", 0) == 0);
    auto md = to_markdown(report);
    CHECK(md.find("| JPEG |") != std::string::npos);
    CHECK(md.find("| identity |") != std::string::npos);
    CHECK(md.find("QF=30 PSNR") != std::string::npos);
    CHECK(md.find("QF=10 DISTS-lite") != std::string::npos);
}

TEST_CASE("CSV logs append rows with a header") {
    TempDir tmp("csvlog");
    {
        CsvLog log(tmp / "log.csv", {"step", "loss"});
        log.append({1, 0.5});
        log.append({2, 0.25});
        CHECK(log.rows().size() == 2);
        CHECK_THROWS(log.append({1.0}));
    }
    std::ifstream in(tmp / "log.csv");
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    CHECK(header == "step,loss");
    CHECK(first.rfind("1,0.5", 0) == 0);
}

TEST_CASE("stage 1 resumes to a bitwise identical next step") {
    TempDir tmp("resume");
    auto cfg = tiny("saipe");
    auto corpus = synthetic_corpus(4, 32, 8);
    auto text = torch::randn({4, cfg.text.tokens, cfg.text.dim});

    SaipeTrainer a(cfg, corpus.data, text);
    a.step();
    a.step();
    a.save(tmp / "s1.ckpt");
    auto expected = a.step();

    SaipeTrainer b(cfg, corpus.data, text);
    b.resume(tmp / "s1.ckpt");
    CHECK(b.steps_done() == 2);
    auto got = b.step();
    CHECK(got.step == expected.step);
    CHECK(got.total == expected.total);
    CHECK(parameter_checksum(*a.model()) == parameter_checksum(*b.model()));

    auto other = cfg;
    other.saipe.embed_hidden = 16;
    SaipeTrainer c(other, corpus.data, text);
    CHECK_THROWS_AS(c.resume(tmp / "s1.ckpt"), CheckpointError);
}

TEST_CASE("stage 1 with zero alignment weight leaves the embedder untouched") {
    auto cfg = tiny("saipe");
    cfg.saipe.align_weight = 0.0;
    auto corpus = synthetic_corpus(4, 32, 8);
    SaipeTrainer t(cfg, corpus.data, torch::randn({4, cfg.text.tokens, cfg.text.dim}));
    auto embedder_sum = [&] {
        torch::NoGradGuard guard;
        double s = 0;
        for (const auto& p : t.model()->named_parameters()) {
            if (p.key().rfind("embedder.", 0) == 0) s += p.value().to(torch::kFloat64).abs().sum().item<double>();
        }
        return s;
    };
    const double before = embedder_sum();
    const auto enc_before = t.model()->named_parameters()["encoder.stem.weight"].clone();
    for (int i = 0; i < 2; ++i) {
        auto s = t.step();
        CHECK(s.align > 0.0);
        CHECK(s.total == doctest::Approx(s.rec));
    }
    CHECK(embedder_sum() == before);
    CHECK_FALSE(torch::equal(enc_before, t.model()->named_parameters()["encoder.stem.weight"]));
}

TEST_CASE("stage 1 fails fast on missing captions") {
    TempDir tmp("captions");
    auto corpus = synthetic_corpus(4, 32, 8);
    write_corpus(corpus, tmp / "data");
    write_captions(corpus, tmp / "partial.tsv", 1);
    auto cfg = tiny("saipe");
    try {
        run_stage1(cfg, tmp / "data", tmp / "partial.tsv", tmp / "out.ckpt");
        FAIL("expected MissingCaptionsError");
    } catch (const text::MissingCaptionsError& e) {
        REQUIRE(e.ids().size() == 1);
        CHECK(e.ids()[0] == corpus.data.ids.back());
    }
    CHECK_FALSE(std::filesystem::exists(tmp / "out.ckpt"));
}

TEST_CASE("stage 2 keeps frozen modules fixed and accounts for every loss term") {
    auto cfg = tiny("sodiff");
    cfg.lr = 1e-3;
    auto corpus = synthetic_corpus(4, 32, 8);
    auto modules = fresh_modules(cfg);
    SodiffTrainer t(cfg, corpus.data, modules);
    const auto frozen = t.frozen_checksums();
    const auto disc = t.discriminator_checksum();
    const auto gen = t.generator_checksum();
    for (int i = 0; i < 3; ++i) {
        auto s = t.step();
        CHECK(s.disc_updated);
        CHECK(std::abs(s.total - s.report.recombined(s.effective)) <= 1e-12 * std::max(1.0, std::abs(s.total)));
        CHECK(s.effective.alpha == cfg.weights.alpha);
        CHECK(s.effective.beta == cfg.weights.beta);
        CHECK(s.tau_mean >= 0.0);
        CHECK(s.tau_mean <= cfg.schedule.timesteps - 1);
    }
    CHECK(t.frozen_checksums() == frozen);
    CHECK(t.discriminator_checksum() != disc);
    CHECK(t.generator_checksum() != gen);
    CHECK_NOTHROW(t.verify_frozen());

    {
        torch::NoGradGuard guard;
        modules.autoencoder->parameters()[0].add_(1e-3);
    }
    CHECK_THROWS_AS(t.verify_frozen(), FrozenDriftError);
}

TEST_CASE("stage 2 without the adversarial term never touches the discriminator") {
    auto cfg = ablation_config(tiny("sodiff"), "wo_gan");
    auto corpus = synthetic_corpus(4, 32, 8);
    SodiffTrainer t(cfg, corpus.data, fresh_modules(cfg));
    const auto disc = t.discriminator_checksum();
    for (int i = 0; i < 2; ++i) {
        auto s = t.step();
        CHECK_FALSE(s.disc_updated);
        CHECK(s.effective.alpha == 0.0);
        CHECK(std::abs(s.total - s.report.recombined(s.effective)) <= 1e-12 * std::max(1.0, std::abs(s.total)));
    }
    CHECK(t.discriminator_checksum() == disc);
}

TEST_CASE("stage 2 without the predictor uses the fixed timestep") {
    auto cfg = ablation_config(tiny("sodiff"), "wo_tp");
    cfg.fixed_timestep = 200;
    auto corpus = synthetic_corpus(4, 32, 8);
    SodiffTrainer t(cfg, corpus.data, fresh_modules(cfg));
    const auto pred = parameter_checksum(*t.predictor());
    auto s = t.step();
    CHECK(s.tau_mean == 200.0);
    CHECK(s.effective.beta == 0.0);
    CHECK(parameter_checksum(*t.predictor()) == pred);
}

TEST_CASE("text-prompted stage 2 needs one embedding per image") {
    auto cfg = ablation_config(tiny("sodiff"), "text_prompt");
    auto corpus = synthetic_corpus(4, 32, 8);
    CHECK_THROWS(SodiffTrainer(cfg, corpus.data, fresh_modules(cfg)));
    SodiffTrainer t(cfg, corpus.data, fresh_modules(cfg), torch::randn({4, cfg.text.tokens, cfg.text.dim}));
    CHECK(std::isfinite(t.step().total));
}

TEST_CASE("checkpoint sets load into a working pipeline and reject foreign bases") {
    TempDir tmp("ckptset");
    auto cfg = tiny("sodiff");
    auto corpus = synthetic_corpus(4, 32, 8);
    auto modules = fresh_modules(cfg);
    save_saipe(tmp / "saipe.ckpt", modules.saipe);
    save_autoencoder(tmp / "ae.ckpt", modules.autoencoder);
    save_unet_base(tmp / "unet.ckpt", modules.unet);
    SodiffTrainer t(cfg, corpus.data, modules);
    t.step();
    const std::map<std::string, std::filesystem::path> sources{
        {"saipe", tmp / "saipe.ckpt"}, {"autoencoder", tmp / "ae.ckpt"}, {"unet", tmp / "unet.ckpt"}};
    t.save(tmp / "set", sources);

    SodiffPipeline pipe(tmp / "set" / "ckpt_set.json");
    auto lq = jpeg::degrade(synthesize_scene(3, 48).image.slice(2, 0, 40), 10);
    auto r1 = pipe.restore(lq);
    auto r2 = pipe.restore(lq);
    CHECK(r1.image.sizes() == lq.sizes());
    CHECK(r1.image.min().item<double>() >= 0.0);
    CHECK(r1.image.max().item<double>() <= 1.0);
    CHECK(torch::equal(r1.image, r2.image));
    auto qf = pipe.predict_qf(lq);
    CHECK(qf.item<double>() >= 1.0);
    CHECK(qf.item<double>() <= 100.0);
    CHECK(diffusion::base_checksum(*pipe.modules().unet) == diffusion::base_checksum(*modules.unet));

    auto other = cfg;
    other.saipe.feature_channels = 16;
    saipe::Saipe foreign(other.saipe);
    save_saipe(tmp / "saipe.ckpt", foreign);
    CHECK_THROWS_WITH_AS(SodiffPipeline(tmp / "set" / "ckpt_set.json"), doctest::Contains("incompatible config hash"),
                         CheckpointError);
}

}  // TEST_SUITE
