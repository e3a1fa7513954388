#include "sodiff/synthetic.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "sodiff/image_io.hpp"

namespace sodiff::harness {

namespace {

struct NamedColor {
    const char* name;
    std::array<double, 3> rgb;
};

constexpr std::array<NamedColor, 12> kPalette = {{
    {"red", {0.85, 0.15, 0.12}},    {"green", {0.20, 0.65, 0.25}},  {"blue", {0.15, 0.30, 0.85}},
    {"yellow", {0.95, 0.85, 0.20}}, {"orange", {0.95, 0.55, 0.10}}, {"purple", {0.55, 0.25, 0.70}},
    {"cyan", {0.20, 0.80, 0.85}},   {"white", {0.95, 0.95, 0.93}},  {"black", {0.08, 0.08, 0.10}},
    {"gray", {0.50, 0.50, 0.52}},   {"pink", {0.95, 0.60, 0.70}},   {"brown", {0.50, 0.32, 0.18}},
}};

torch::Tensor color(const NamedColor& c) {
    return torch::tensor({c.rgb[0], c.rgb[1], c.rgb[2]}, torch::kFloat64).view({3, 1, 1});
}

}  // namespace

Scene synthesize_scene(uint64_t seed, int64_t size) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto pick = [&](size_t n) { return std::uniform_int_distribution<size_t>(0, n - 1)(rng); };
    const auto s = static_cast<double>(size);

    auto grid = torch::meshgrid({torch::arange(size, torch::kFloat64), torch::arange(size, torch::kFloat64)}, "ij");
    const auto& ys = grid[0];
    const auto& xs = grid[1];

    const auto& bg1 = kPalette[pick(kPalette.size())];
    const auto& bg2 = kPalette[pick(kPalette.size())];
    const double angle = unit(rng) * 2.0 * std::numbers::pi;
    auto ramp = (xs * std::cos(angle) + ys * std::sin(angle)) / s;
    ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min() + 1e-9);
    auto image = color(bg1) * (1.0 - ramp) + color(bg2) * ramp;

    static const char* kTextures[] = {"stripes", "checks", "ripples", "a plain finish"};
    const auto texture = pick(4);
    const double freq = 2.0 * std::numbers::pi * (0.06 + 0.18 * unit(rng));
    const double phi = unit(rng) * std::numbers::pi;
    const double amp = 0.06 + 0.10 * unit(rng);
    torch::Tensor pattern;
    if (texture == 0) {
        pattern = torch::sin(freq * (xs * std::cos(phi) + ys * std::sin(phi)));
    } else if (texture == 1) {
        pattern = torch::tanh(3.0 * torch::sin(freq * xs) * torch::sin(freq * ys));
    } else if (texture == 2) {
        const double cx = unit(rng) * s, cy = unit(rng) * s;
        pattern = torch::sin(freq * torch::sqrt((xs - cx).pow(2) + (ys - cy).pow(2)));
    }
    if (pattern.defined()) image = image + amp * pattern.unsqueeze(0);

    static const char* kShapes[] = {"circle", "square", "ring"};
    std::string caption = "a";
    const int shapes = 1 + static_cast<int>(pick(2));
    for (int k = 0; k < shapes; ++k) {
        const auto& fill = kPalette[pick(kPalette.size())];
        const auto shape = pick(3);
        const double cx = (0.2 + 0.6 * unit(rng)) * s;
        const double cy = (0.2 + 0.6 * unit(rng)) * s;
        const double r = (0.10 + 0.18 * unit(rng)) * s;
        torch::Tensor dist;  // signed distance in pixels, negative inside
        if (shape == 0) {
            dist = torch::sqrt((xs - cx).pow(2) + (ys - cy).pow(2)) - r;
        } else if (shape == 1) {
            dist = torch::maximum((xs - cx).abs(), (ys - cy).abs()) - r;
        } else {
            dist = (torch::sqrt((xs - cx).pow(2) + (ys - cy).pow(2)) - r).abs() - 0.3 * r;
        }
        auto alpha = (0.5 - dist).clamp(0.0, 1.0).unsqueeze(0);
        image = image * (1.0 - alpha) + color(fill) * alpha;
        caption += std::string(k == 0 ? " " : " and a ") + fill.name + " " + kShapes[shape];
    }
    caption += std::string(" on a ") + bg1.name + " and " + bg2.name + " background with " + kTextures[texture];
    return {quantize_8bit(image).to(torch::kFloat32), caption};
}

SyntheticCorpus synthetic_corpus(int64_t count, int64_t size, uint64_t seed) {
    SyntheticCorpus corpus;
    for (int64_t i = 0; i < count; ++i) {
        auto scene = synthesize_scene(seed * 1000003ULL + static_cast<uint64_t>(i), size);
        char id[32];
        std::snprintf(id, sizeof(id), "img_%04lld", static_cast<long long>(i));
        corpus.data.ids.emplace_back(id);
        corpus.data.images.push_back(scene.image);
        corpus.captions.push_back(scene.caption);
    }
    return corpus;
}

void write_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream captions(dir / "captions.tsv");
    for (size_t i = 0; i < corpus.data.size(); ++i) {
        write_png(dir / (corpus.data.ids[i] + ".png"), corpus.data.images[i]);
        captions << corpus.data.ids[i] << '\t' << corpus.captions[i] << '\n';
    }
}

}  // namespace sodiff::harness
