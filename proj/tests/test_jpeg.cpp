#include "sodiff/jpeg_codec.hpp"

#include <cmath>
#include <random>

#include "sodiff/synthetic.hpp"
#include "sodiff/tensor_util.hpp"
#include "support.hpp"

using namespace sodiff;
using namespace sodiff::jpeg;

namespace {

// Reference tables produced by libjpeg (via Pillow) at the given qualities, natural order.
const Table kLumaQ5 = {160, 110, 100, 160, 240, 255, 255, 255, 120, 120, 140, 190, 255, 255, 255, 255,
                       140, 130, 160, 240, 255, 255, 255, 255, 140, 170, 220, 255, 255, 255, 255, 255,
                       180, 220, 255, 255, 255, 255, 255, 255, 240, 255, 255, 255, 255, 255, 255, 255,
                       255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255};
const Table kChromaQ5 = {170, 180, 240, 255, 255, 255, 255, 255, 180, 210, 255, 255, 255, 255, 255, 255,
                         240, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255,
                         255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255,
                         255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255};
const Table kLumaQ20 = {40,  28,  25,  40,  60,  100, 128, 153, 30,  30,  35,  48,  65,  145, 150, 138,
                        35,  33,  40,  60,  100, 143, 173, 140, 35,  43,  55,  73,  128, 218, 200, 155,
                        45,  55,  93,  140, 170, 255, 255, 193, 60,  88,  138, 160, 203, 255, 255, 230,
                        123, 160, 195, 218, 255, 255, 255, 253, 180, 230, 238, 245, 255, 250, 255, 248};
const Table kChromaQ20 = {43,  45,  60,  118, 248, 248, 248, 248, 45,  53,  65,  165, 248, 248, 248, 248,
                          60,  65,  140, 248, 248, 248, 248, 248, 118, 165, 248, 248, 248, 248, 248, 248,
                          248, 248, 248, 248, 248, 248, 248, 248, 248, 248, 248, 248, 248, 248, 248, 248,
                          248, 248, 248, 248, 248, 248, 248, 248, 248, 248, 248, 248, 248, 248, 248, 248};

// Direct O(N^4) orthonormal DCT-II, independent of the library's matrix form.
Block direct_dct(const Block& x) {
    Block out{};
    const double pi = std::acos(-1.0);
    for (int u = 0; u < 8; ++u) {
        for (int v = 0; v < 8; ++v) {
            double sum = 0.0;
            for (int i = 0; i < 8; ++i) {
                for (int j = 0; j < 8; ++j) {
                    sum += x[i * 8 + j] * std::cos((2 * i + 1) * u * pi / 16.0) * std::cos((2 * j + 1) * v * pi / 16.0);
                }
            }
            const double cu = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
            const double cv = v == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
            out[u * 8 + v] = cu * cv * sum;
        }
    }
    return out;
}

Block random_block(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(-128.0, 127.0);
    Block b{};
    for (auto& v : b) v = d(rng);
    return b;
}

double mse(const torch::Tensor& a, const torch::Tensor& b) {
    return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
}

}  // namespace

TEST_SUITE("jpeg_codec") {
    TEST_CASE("qf 50 reproduces the base tables") {
        auto t = quant_tables(50);
        CHECK(t.luma == base_luma_table());
        CHECK(t.chroma == base_chroma_table());
        CHECK(t.qf == 50);
    }

    TEST_CASE("qf 100 collapses every entry to one") {
        auto t = quant_tables(100);
        for (int i = 0; i < 64; ++i) {
            CHECK(t.luma[i] == 1);
            CHECK(t.chroma[i] == 1);
        }
    }

    TEST_CASE("tables match libjpeg at qf 5 and 20") {
        CHECK(quant_tables(5).luma[0] == 160);
        CHECK(quant_tables(5).luma == kLumaQ5);
        CHECK(quant_tables(5).chroma == kChromaQ5);
        CHECK(quant_tables(20).luma == kLumaQ20);
        CHECK(quant_tables(20).chroma == kChromaQ20);
    }

    TEST_CASE("tables are monotone non-increasing in qf") {
        for (int qf = 5; qf < 95; ++qf) {
            auto lo = quant_tables(qf);
            auto hi = quant_tables(qf + 1);
            for (int i = 0; i < 64; ++i) {
                REQUIRE(lo.luma[i] >= hi.luma[i]);
                REQUIRE(lo.chroma[i] >= hi.chroma[i]);
            }
        }
    }

    TEST_CASE("entries stay in [1,255]") {
        for (int qf = 1; qf <= 100; ++qf) {
            auto t = quant_tables(qf);
            for (int i = 0; i < 64; ++i) {
                REQUIRE(t.luma[i] >= 1);
                REQUIRE(t.luma[i] <= 255);
                REQUIRE(t.chroma[i] >= 1);
                REQUIRE(t.chroma[i] <= 255);
            }
        }
    }

    TEST_CASE("qf outside [1,100] is a domain error") {
        CHECK_THROWS_AS(quant_tables(0), std::domain_error);
        CHECK_THROWS_AS(quant_tables(101), std::domain_error);
        auto img = torch::rand({3, 8, 8});
        CHECK_THROWS_AS(degrade(img, 0), std::domain_error);
        CHECK_THROWS_AS(degrade(img, 150), std::domain_error);
    }

    TEST_CASE("constant block has only a DC term") {
        Block x{};
        x.fill(3.5);
        auto c = dct2(x);
        CHECK(c.coeffs[0] == doctest::Approx(8 * 3.5).epsilon(1e-12));
        for (int i = 1; i < 64; ++i) CHECK(std::abs(c.coeffs[i]) < 1e-12);
    }

    TEST_CASE("zero block maps to zero") {
        Block z{};
        auto c = dct2(z);
        auto back = idct2(c);
        for (int i = 0; i < 64; ++i) {
            CHECK(c.coeffs[i] == 0.0);
            CHECK(back[i] == 0.0);
        }
    }

    TEST_CASE("dct2 agrees with direct summation and round-trips") {
        std::mt19937_64 rng(42);
        double worst_oracle = 0.0, worst_trip = 0.0;
        for (int n = 0; n < 1000; ++n) {
            auto x = random_block(rng);
            auto c = dct2(x);
            auto ref = direct_dct(x);
            auto back = idct2(c);
            for (int i = 0; i < 64; ++i) {
                worst_oracle = std::max(worst_oracle, std::abs(c.coeffs[i] - ref[i]));
                worst_trip = std::max(worst_trip, std::abs(back[i] - x[i]));
            }
        }
        CHECK(worst_oracle < 1e-9);
        CHECK(worst_trip < 1e-10);
    }

    TEST_CASE("colour transforms invert each other") {
        auto rgb = torch::rand({3, 16, 16}, torch::kFloat64) * 255.0;
        CHECK(testing::max_abs(ycbcr_to_rgb(rgb_to_ycbcr(rgb)), rgb) < 1e-9);
    }

    TEST_CASE("exact multiples of the qf 100 table survive unchanged") {
        // Integer DCT coefficients in every plane: quantization by an all-ones table is the identity.
        std::mt19937_64 rng(5);
        std::uniform_int_distribution<int> coef(-6, 6);
        auto planes = torch::zeros({3, 16, 16}, torch::kFloat64);
        for (int c = 0; c < 3; ++c) {
            for (int by = 0; by < 2; ++by) {
                for (int bx = 0; bx < 2; ++bx) {
                    DctBlock blk;
                    for (int i = 1; i < 10; ++i) blk.coeffs[i] = coef(rng);
                    auto px = idct2(blk);
                    for (int i = 0; i < 64; ++i) planes[c][by * 8 + i / 8][bx * 8 + i % 8] = px[i];
                }
            }
        }
        auto ycc = planes + 128.0;
        auto rgb = ycbcr_to_rgb(ycc) / 255.0;
        REQUIRE(rgb.min().item<double>() > 0.0);
        REQUIRE(rgb.max().item<double>() < 1.0);
        auto out = degrade(rgb, 100);
        CHECK(testing::max_abs(out, rgb) <= 1.0 / 255.0);
    }

    TEST_CASE("constant colour stays constant up to the DC step") {
        for (int qf : {5, 30, 75}) {
            auto img = torch::empty({3, 24, 40});
            img[0].fill_(0.3);
            img[1].fill_(0.62);
            img[2].fill_(0.81);
            auto out = degrade(img, qf);
            // Half a DC step in each plane (DC gain 8), pushed through the inverse colour transform, plus rounding.
            const auto t = quant_tables(qf);
            const double bound = (t.luma[0] / 16.0 + 1.772 * t.chroma[0] / 16.0 + 0.5) / 255.0;
            CHECK(testing::max_abs(out, img) <= bound + 1e-6);
            for (int c = 0; c < 3; ++c) CHECK((out[c].max() - out[c].min()).item<double>() < 1e-6);
        }
    }

    TEST_CASE("output keeps shape and dtype, values on the 8-bit grid") {
        auto img = torch::rand({2, 3, 21, 37});
        for (auto mode : {Subsampling::k444, Subsampling::k420}) {
            auto out = degrade(img, 30, mode);
            CHECK(out.sizes() == img.sizes());
            CHECK((out.scalar_type() == torch::kFloat32));
            CHECK(out.min().item<double>() >= 0.0);
            CHECK(out.max().item<double>() <= 1.0);
            auto grid = out.to(torch::kFloat64) * 255.0;
            CHECK(testing::max_abs(grid, grid.round()) < 1e-4);
        }
    }

    TEST_CASE("degrade is deterministic") {
        auto img = harness::synthesize_scene(3, 64).image;
        CHECK(torch::equal(degrade(img, 12), degrade(img, 12)));
    }

    TEST_CASE("distortion ordering on a natural-like crop") {
        auto x = harness::synthesize_scene(11, 64).image;
        const double m5 = mse(degrade(x, 5), x), m20 = mse(degrade(x, 20), x), m50 = mse(degrade(x, 50), x);
        MESSAGE("MSE qf5=" << m5 << " qf20=" << m20 << " qf50=" << m50);
        CHECK(m5 > m20);
        CHECK(m20 > m50);
    }

    TEST_CASE("mean distortion strictly decreases with qf over a 10-image corpus") {
        auto corpus = harness::synthetic_corpus(10, 64, 77);
        double prev = std::numeric_limits<double>::infinity();
        for (int qf : {5, 10, 20, 50, 90}) {
            double sum = 0.0;
            for (const auto& img : corpus.data.images) sum += mse(degrade(img, qf), img);
            CHECK(sum / 10.0 < prev);
            prev = sum / 10.0;
        }
    }

    TEST_CASE("second pass at the same qf moves the image less than the first") {
        auto corpus = harness::synthetic_corpus(4, 64, 8);
        for (const auto& x : corpus.data.images) {
            for (int qf : {10, 40, 80}) {
                auto once = degrade(x, qf);
                auto twice = degrade(once, qf);
                CHECK(mse(twice, once) < mse(once, x));
            }
        }
    }

    TEST_CASE("4:2:0 loses more chroma detail than 4:4:4") {
        auto x = harness::synthesize_scene(21, 64).image;
        CHECK(mse(degrade(x, 60, Subsampling::k420), x) > mse(degrade(x, 60, Subsampling::k444), x));
        CHECK(parse_subsampling("420") == Subsampling::k420);
        CHECK(parse_subsampling("4:4:4") == Subsampling::k444);
        CHECK_THROWS(parse_subsampling("422"));
    }
}
