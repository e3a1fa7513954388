#include "sodiff/losses.hpp"

#include <random>

#include "sodiff/discriminator.hpp"
#include "sodiff/jpeg_codec.hpp"
#include "sodiff/lora.hpp"
#include "sodiff/synthetic.hpp"
#include "sodiff/tensor_util.hpp"
#include "sodiff/unet.hpp"
#include "support.hpp"

using namespace sodiff;
using namespace sodiff::losses;

namespace {

diffusion::UnetConfig small_unet() {
    diffusion::UnetConfig c;
    c.channels = {8, 16, 16};
    c.context_dim = 8;
    c.heads = 2;
    c.groups = 4;
    return c;
}

torch::Tensor scalar(double v) { return torch::tensor(v, torch::kFloat64); }

ReconLoss fixed_recon(double v) {
    auto t = scalar(v);
    return {t, t, scalar(0.0), scalar(0.0)};
}

}  // namespace

TEST_SUITE("losses") {
    TEST_CASE("sobel of a constant image is exactly zero") {
        auto img = torch::full({3, 9, 11}, 0.4, torch::kFloat64);
        CHECK(sobel(img).abs().max().item<double>() == 0.0);
    }

    TEST_CASE("sobel responds 4x the height of a vertical step") {
        const double delta = 0.3;
        auto img = torch::zeros({1, 1, 8, 8}, torch::kFloat64);
        img.slice(3, 4).fill_(delta);
        auto s = sobel(img);
        for (int64_t y = 0; y < 8; ++y) {
            CHECK(s[0][0][y][3].item<double>() == doctest::Approx(4 * delta).epsilon(1e-6));
            CHECK(s[0][0][y][4].item<double>() == doctest::Approx(4 * delta).epsilon(1e-6));
            CHECK(std::abs(s[0][0][y][1].item<double>()) < 1e-12);
        }
    }

    TEST_CASE("sobel commutes with transposition and keeps shape") {
        auto x = torch::rand({2, 3, 10, 13}, torch::kFloat64);
        CHECK(sobel(x).sizes() == x.sizes());
        CHECK(testing::max_abs(sobel(x.transpose(2, 3)), sobel(x).transpose(2, 3)) < 1e-12);
        CHECK(sobel(torch::rand({3, 4, 4})).sizes() == torch::IntArrayRef({3, 4, 4}));
    }

    TEST_CASE("sobel rejects images smaller than 3x3") {
        CHECK_THROWS_AS(sobel(torch::rand({1, 3, 2, 5})), ShapeError);
        CHECK_THROWS_AS(sobel(torch::rand({1, 3, 5, 2})), ShapeError);
    }

    TEST_CASE("dists is a pseudo-metric on feature statistics") {
        DistsLite d;
        auto x = torch::rand({2, 3, 32, 32});
        auto y = torch::rand({2, 3, 32, 32});
        CHECK(std::abs(d->forward(x, x).item<double>()) < 1e-6);
        CHECK(std::abs(d->forward(x, y).item<double>() - d->forward(y, x).item<double>()) < 1e-6);
        auto per = d->per_image(x, y);
        CHECK(per.sizes() == torch::IntArrayRef({2}));
        CHECK((per >= 0).all().item<bool>());
        CHECK((per <= 1.0).all().item<bool>());
        CHECK_THROWS_AS(d->forward(x, y.slice(2, 0, 16)), ShapeError);
    }

    TEST_CASE("dists ranks heavy compression above light compression") {
        DistsLite d;
        for (uint64_t seed : {1, 2, 3}) {
            auto x = harness::synthesize_scene(seed, 64).image.unsqueeze(0);
            const double heavy = d->forward(x, jpeg::degrade(x, 5)).item<double>();
            const double light = d->forward(x, jpeg::degrade(x, 50)).item<double>();
            MESSAGE("seed " << seed << ": qf5=" << heavy << " qf50=" << light);
            CHECK(heavy > light);
        }
    }

    TEST_CASE("reconstruction loss examples") {
        DistsLite d;
        auto x = torch::rand({2, 3, 16, 16});
        auto same = recon_loss(d, x, x);
        CHECK(std::abs(same.total.item<double>()) < 1e-6);

        auto a = torch::full({1, 3, 16, 16}, 0.2, torch::kFloat64);
        auto b = torch::full({1, 3, 16, 16}, 0.7, torch::kFloat64);
        auto flat = recon_loss(d, a, b);
        CHECK(std::abs(flat.edge.item<double>()) < 1e-9);
        CHECK(flat.total.item<double>() ==
              doctest::Approx(0.25 + d->forward(a, b).item<double>()).epsilon(1e-12));

        auto y = torch::rand({2, 3, 16, 16}, torch::kFloat64);
        auto z = torch::rand({2, 3, 16, 16}, torch::kFloat64);
        auto r = recon_loss(d, y, z);
        CHECK(std::abs(r.total.item<double>() - (r.mse + r.edge + r.image).item<double>()) < 1e-8);

        auto plain = recon_loss(d, y, z, false);
        CHECK(plain.total.item<double>() == plain.mse.item<double>());
        CHECK(plain.edge.item<double>() == 0.0);
        CHECK(plain.image.item<double>() == 0.0);
    }

    TEST_CASE("reconstruction loss gradient matches finite differences") {
        DistsLite d;
        auto target = torch::rand({1, 3, 12, 12}, torch::kFloat64);
        auto base = torch::rand({1, 3, 12, 12}, torch::kFloat64);
        auto x = base.clone().requires_grad_(true);
        recon_loss(d, x, target).total.backward();
        auto grad = x.grad();
        std::mt19937_64 rng(1);
        std::uniform_int_distribution<int64_t> pick(0, base.numel() - 1);
        for (int n = 0; n < 20; ++n) {
            const auto i = pick(rng);
            const double h = 1e-6;
            auto up = base.clone(), down = base.clone();
            up.view(-1)[i] += h;
            down.view(-1)[i] -= h;
            const double numeric =
                (recon_loss(d, up, target).total.item<double>() - recon_loss(d, down, target).total.item<double>()) /
                (2 * h);
            const double analytic = grad.view(-1)[i].item<double>();
            INFO("index " << i << " analytic=" << analytic << " numeric=" << numeric);
            CHECK(testing::rel_err(analytic, numeric) < 1e-3);
        }
    }

    TEST_CASE("adversarial terms at an undecided discriminator") {
        auto half = torch::full({8}, 0.5, torch::kFloat64);
        CHECK(generator_loss(half).item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
        CHECK(discriminator_loss(half, half).item<double>() == doctest::Approx(2 * std::log(2.0)).epsilon(1e-12));
    }

    TEST_CASE("adversarial limits") {
        auto one = torch::ones({4}, torch::kFloat64);
        auto zero = torch::zeros({4}, torch::kFloat64);
        const double g = generator_loss(one).item<double>();
        CHECK(g > 0.0);
        CHECK(g < 1e-5);
        const double dl = discriminator_loss(zero, one).item<double>();
        CHECK(dl > 0.0);
        CHECK(dl < 1e-5);
        // clamping keeps the losing side finite
        CHECK(std::isfinite(generator_loss(zero).item<double>()));
        CHECK(generator_loss(zero).item<double>() == doctest::Approx(-std::log(1e-6)).epsilon(1e-9));
    }

    TEST_CASE("total loss arithmetic") {
        LossWeights paper;
        CHECK(paper.alpha == 1e-2);
        CHECK(paper.beta == 1e-3);
        auto r = total_loss(fixed_recon(1.0), scalar(std::log(2.0)), scalar(30.0), paper);
        CHECK(std::abs(r.total.item<double>() - 1.036931) < 1e-6);
        CHECK(std::abs(r.total.item<double>() - r.recombined(paper)) < 1e-12);

        auto zero = total_loss(fixed_recon(0.0), scalar(0.0), scalar(0.0), paper);
        CHECK(zero.total.item<double>() == 0.0);

        auto only_recon = total_loss(fixed_recon(0.8), scalar(5.0), scalar(7.0), LossWeights{0.0, 0.0});
        CHECK(only_recon.total.item<double>() == 0.8);
        CHECK((only_recon.total.scalar_type() == torch::kFloat64));
    }

    TEST_CASE("discriminator outputs probabilities and can start from the UNet encoder") {
        torch::manual_seed(2);
        diffusion::Unet unet(small_unet(), diffusion::LoraConfig{});
        Discriminator disc(small_unet(), DiscriminatorConfig{});
        auto z = torch::randn({3, 4, 8, 8});
        auto p = disc->forward(z, torch::tensor({0, 10, 999}), torch::randn({3, 5, 8}));
        CHECK(p.sizes() == torch::IntArrayRef({3}));
        CHECK((p > 0).all().item<bool>());
        CHECK((p < 1).all().item<bool>());

        disc->load_backbone(unet);
        auto theirs = unet->named_parameters();
        int copied = 0;
        for (const auto& item : disc->named_parameters()) {
            const std::string key = item.key();
            if (key.rfind("encoder.", 0) != 0 && key.rfind("time.", 0) != 0) continue;
            auto* src = theirs.find(key);
            REQUIRE(src != nullptr);
            CHECK(torch::equal(item.value(), *src));
            ++copied;
        }
        CHECK(copied > 0);
    }

    TEST_CASE("alternating updates never touch the other player") {
        torch::manual_seed(4);
        auto schedule = diffusion::build_schedule(diffusion::ScheduleConfig{});
        Discriminator disc(small_unet(), DiscriminatorConfig{});
        auto generator = torch::nn::Linear(8, 8);
        auto gen = torch::make_generator<at::CPUGeneratorImpl>(0);
        torch::optim::Adam g_opt(generator->parameters(), 1e-2);
        torch::optim::Adam d_opt(disc->parameters(), 1e-2);
        auto prompt = torch::randn({2, 5, 8});
        auto real = torch::randn({2, 4, 8, 8});
        auto noise = torch::randn({2, 4, 8, 8});
        auto fake = [&] { return generator(noise.permute({0, 2, 3, 1}).reshape({-1, 4}).repeat({1, 2})).slice(1, 0, 4)
                                     .reshape({2, 8, 8, 4}).permute({0, 3, 1, 2}); };

        const auto g0 = parameter_checksum(*generator);
        d_opt.zero_grad();
        gan_discriminator_loss(fake(), real, prompt, disc, schedule, gen).backward();
        d_opt.step();
        CHECK(parameter_checksum(*generator) == g0);
        for (auto& p : generator->parameters()) CHECK((!p.grad().defined() || p.grad().abs().sum().item<double>() == 0.0));

        const auto d0 = parameter_checksum(*disc);
        g_opt.zero_grad();
        gan_generator_loss(fake(), prompt, disc, schedule, gen).backward();
        g_opt.step();
        CHECK(parameter_checksum(*disc) == d0);
        CHECK(parameter_checksum(*generator) != g0);
    }

    TEST_CASE("both gan terms at once agree with the single-term helpers in structure") {
        auto schedule = diffusion::build_schedule(diffusion::ScheduleConfig{});
        Discriminator disc(small_unet(), DiscriminatorConfig{});
        auto gen = torch::make_generator<at::CPUGeneratorImpl>(5);
        auto fake = torch::randn({2, 4, 8, 8}, torch::TensorOptions().requires_grad(true));
        auto out = gan_losses(fake, torch::randn({2, 4, 8, 8}), torch::randn({2, 3, 8}), disc, schedule, gen);
        CHECK(out.generator.requires_grad());
        CHECK(out.generator.item<double>() > 0.0);
        CHECK(out.discriminator.item<double>() > 0.0);
        out.discriminator.backward();
        CHECK((!fake.grad().defined() || fake.grad().abs().sum().item<double>() == 0.0));
    }
}
