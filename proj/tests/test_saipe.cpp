#include "sodiff/saipe.hpp"

#include <random>

#include "sodiff/tensor_util.hpp"
#include "support.hpp"

using namespace sodiff;
using namespace sodiff::saipe;

namespace {

SaipeConfig small_config() {
    SaipeConfig c;
    c.feature_channels = 16;
    c.heads = 2;
    c.window = 4;
    c.query_count = 6;
    c.embed_dim = 8;
    c.embed_hidden = 8;
    c.embed_heads = 2;
    c.random_features = 16;
    return c;
}

SaipeConfig tiny_config() {
    auto c = small_config();
    c.feature_channels = 8;
    c.rstb_count = 1;
    c.stl_per_rstb = 2;
    c.query_count = 3;
    c.embed_dim = 4;
    c.embed_hidden = 4;
    c.random_features = 8;
    return c;
}

}  // namespace

TEST_SUITE("saipe") {
    TEST_CASE("paper-width encoder: 64x64 input gives a 16x16x180 feature map") {
        torch::NoGradGuard guard;
        Saipe model(SaipeConfig{});
        auto f = model->encode(torch::rand({1, 3, 64, 64}));
        CHECK(f.sizes() == torch::IntArrayRef({1, 180, 16, 16}));
        auto img = model->decode(f);
        CHECK(img.sizes() == torch::IntArrayRef({1, 3, 64, 64}));
        auto e = model->embed_guidance(f);
        CHECK(e.sizes() == torch::IntArrayRef({1, 77, 64}));
    }

    TEST_CASE("encoder and decoder are shape-inverse for multiples of 4") {
        torch::NoGradGuard guard;
        Saipe model(small_config());
        for (auto [h, w] : std::vector<std::pair<int64_t, int64_t>>{{4, 4}, {12, 20}, {36, 28}, {64, 64}}) {
            auto x = torch::rand({2, 3, h, w});
            auto f = model->encode(x);
            CHECK(f.sizes() == torch::IntArrayRef({2, 16, h / 4, w / 4}));
            CHECK(model->decode(f).sizes() == x.sizes());
        }
    }

    TEST_CASE("non-divisible sizes are shape errors") {
        Saipe model(small_config());
        CHECK_THROWS_AS(model->encode(torch::rand({1, 3, 30, 32})), ShapeError);
        CHECK_THROWS_AS(model->encode(torch::rand({1, 1, 32, 32})), ShapeError);
    }

    TEST_CASE("zero image yields finite features and outputs") {
        torch::NoGradGuard guard;
        Saipe model(small_config());
        auto out = model->forward(torch::zeros({1, 3, 32, 32}));
        CHECK(torch::isfinite(out.features).all().item<bool>());
        CHECK(torch::isfinite(out.reconstruction).all().item<bool>());
        CHECK(torch::isfinite(out.embedding).all().item<bool>());
    }

    TEST_CASE("shifted windows carry information across window borders") {
        torch::NoGradGuard guard;
        torch::manual_seed(3);
        Saipe model(small_config());
        auto a = torch::rand({1, 3, 64, 64});
        auto b = a.clone();
        // window 4 at 1/4 scale: the top-left window sees pixels [0,16)^2; perturb only its diagonal neighbour
        b.index_put_({0, torch::indexing::Slice(), torch::indexing::Slice(16, 32), torch::indexing::Slice(16, 32)},
                     torch::rand({3, 16, 16}));
        auto fa = model->encode(a), fb = model->encode(b);
        CHECK(!torch::equal(fa, fb));
        auto corner_a = fa.slice(2, 0, 4).slice(3, 0, 4);
        auto corner_b = fb.slice(2, 0, 4).slice(3, 0, 4);
        CHECK(testing::max_abs(corner_a, corner_b) > 0.0);
    }

    TEST_CASE("decode rejects mismatched channels and non-finite features") {
        Saipe model(small_config());
        CHECK_THROWS_AS(model->decode(torch::rand({1, 15, 4, 4})), ShapeError);
        auto f = torch::rand({1, 16, 4, 4});
        f[0][3][1][1] = std::numeric_limits<float>::quiet_NaN();
        CHECK_THROWS_AS(model->decode(f), NumericError);
    }

    TEST_CASE("guidance embedding is [L, D] regardless of the feature map size") {
        torch::NoGradGuard guard;
        Saipe model(small_config());
        for (int64_t s : {1, 3, 8, 16}) {
            CHECK(model->embed_guidance(torch::randn({2, 16, s, s + 1})).sizes() == torch::IntArrayRef({2, 6, 8}));
        }
        CHECK_THROWS_AS(model->embed_guidance(torch::randn({1, 9, 4, 4})), ShapeError);
    }

    TEST_CASE("guidance embedding is deterministic") {
        torch::NoGradGuard guard;
        Saipe model(small_config());
        auto f = torch::randn({1, 16, 8, 8});
        CHECK(torch::equal(model->embed_guidance(f), model->embed_guidance(f)));
    }

    TEST_CASE("softmax fallback has the same interface") {
        torch::NoGradGuard guard;
        auto c = small_config();
        c.linear_attention = false;
        Saipe model(c);
        CHECK(model->embed_guidance(torch::randn({2, 16, 5, 5})).sizes() == torch::IntArrayRef({2, 6, 8}));
    }

    TEST_CASE("without position codes and with pointwise scales the embedding ignores spatial order") {
        torch::NoGradGuard guard;
        for (bool linear : {true, false}) {
            auto c = small_config();
            c.position_encoding = false;
            c.conv_scales = {1};
            c.linear_attention = linear;
            torch::manual_seed(9);
            Saipe model(c);
            auto f = torch::randn({1, 16, 6, 6}, torch::kFloat64);
            model->to(torch::kFloat64);
            auto perm = torch::randperm(36, torch::TensorOptions().dtype(torch::kLong));
            auto shuffled = f.flatten(2).index_select(2, perm).view({1, 16, 6, 6});
            CHECK(testing::max_abs(model->embed_guidance(f), model->embed_guidance(shuffled)) < 1e-10);

            auto pc = c;
            pc.position_encoding = true;
            torch::manual_seed(9);
            Saipe positional(pc);
            positional->to(torch::kFloat64);
            CHECK(testing::max_abs(positional->embed_guidance(f), positional->embed_guidance(shuffled)) > 1e-8);
        }
    }

    TEST_CASE("2d position code is bounded and distinct per position") {
        auto p = position_code_2d(4, 5, 8, torch::TensorOptions().dtype(torch::kFloat64));
        CHECK(p.sizes() == torch::IntArrayRef({20, 8}));
        CHECK(p.abs().max().item<double>() <= 1.0);
        for (int i = 0; i < 20; ++i) {
            for (int j = i + 1; j < 20; ++j) CHECK(testing::max_abs(p[i], p[j]) > 1e-6);
        }
    }

    TEST_CASE("loss examples") {
        auto target = torch::rand({2, 3, 8, 8}, torch::kFloat64);
        auto text = torch::randn({2, 5, 4}, torch::kFloat64);

        auto zero = saipe_loss(target, target, text, text, 0.5);
        CHECK(zero.total.item<double>() == 0.0);

        auto off = saipe_loss(target + 0.1, target, text + 0.2, text, 0.5);
        CHECK(off.rec.item<double>() == doctest::Approx(0.1).epsilon(1e-12));
        CHECK(off.align.item<double>() == doctest::Approx(0.04).epsilon(1e-12));
        CHECK(off.total.item<double>() == doctest::Approx(0.12).epsilon(1e-12));

        auto unweighted = saipe_loss(target + 0.1, target, text + 0.2, text, 0.0);
        CHECK(unweighted.total.item<double>() == unweighted.rec.item<double>());
        CHECK(unweighted.align.item<double>() == doctest::Approx(0.04).epsilon(1e-12));

        CHECK_THROWS_AS(saipe_loss(target, target.slice(3, 0, 4), text, text, 0.5), ShapeError);
        CHECK_THROWS_AS(saipe_loss(target, target, text, text.slice(1, 0, 4), 0.5), ShapeError);
    }

    TEST_CASE("a zero align weight keeps the alignment term out of the gradient") {
        Saipe model(tiny_config());
        auto x = torch::rand({1, 3, 16, 16});
        auto out = model->forward(x);
        auto loss = saipe_loss(out.reconstruction, x, out.embedding, torch::randn_like(out.embedding), 0.0);
        loss.total.backward();
        for (const auto& item : model->named_parameters()) {
            if (item.key().rfind("embedder.", 0) == 0) {
                auto g = item.value().grad();
                CHECK((!g.defined() || g.abs().sum().item<double>() == 0.0));
            }
        }
        CHECK_FALSE(loss.align.requires_grad());
    }

    TEST_CASE("loss gradient matches finite differences at float64") {
        torch::manual_seed(17);
        Saipe model(tiny_config());
        model->to(torch::kFloat64);
        auto x = torch::rand({1, 3, 16, 16}, torch::kFloat64);
        auto target = torch::rand({1, 3, 16, 16}, torch::kFloat64);
        auto text = torch::randn({1, 3, 4}, torch::kFloat64);
        auto eval = [&] {
            auto out = model->forward(x);
            return saipe_loss(out.reconstruction, target, out.embedding, text, 0.5).total;
        };
        model->zero_grad();
        eval().backward();

        auto params = model->named_parameters();
        std::mt19937_64 rng(4);
        int checked = 0;
        for (int attempt = 0; attempt < 200 && checked < 10; ++attempt) {
            auto& p = params[std::uniform_int_distribution<size_t>(0, params.size() - 1)(rng)];
            auto flat = p.value().view(-1);
            const auto i = std::uniform_int_distribution<int64_t>(0, flat.numel() - 1)(rng);
            const double analytic = p.value().grad().view(-1)[i].item<double>();
            if (std::abs(analytic) < 1e-6) continue;  // L1 kinks make tiny gradients noise-dominated
            const double h = 1e-6;
            torch::NoGradGuard guard;
            const double orig = flat[i].item<double>();
            flat[i] = orig + h;
            const double up = eval().item<double>();
            flat[i] = orig - h;
            const double down = eval().item<double>();
            flat[i] = orig;
            const double numeric = (up - down) / (2 * h);
            INFO(p.key() << "[" << i << "] analytic=" << analytic << " numeric=" << numeric);
            CHECK(testing::rel_err(analytic, numeric) < 1e-3);
            ++checked;
        }
        CHECK(checked == 10);
    }

    TEST_CASE("config validation") {
        auto c = small_config();
        c.align_weight = -1.0;
        CHECK_THROWS(c.validate());
        c = small_config();
        c.heads = 3;
        CHECK_THROWS(c.validate());
        c = small_config();
        c.conv_scales = {2};
        CHECK_THROWS(c.validate());
        CHECK_NOTHROW(small_config().validate());
    }
}
