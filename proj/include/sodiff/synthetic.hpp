#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "sodiff/dataset.hpp"

// Procedural stand-in for a natural-image corpus: colour gradients, anti-aliased shapes and
// periodic textures, each scene paired with a caption naming what it contains.
namespace sodiff::harness {

struct Scene {
    torch::Tensor image;  // [3,S,S] on the 1/255 grid
    std::string caption;
};

Scene synthesize_scene(uint64_t seed, int64_t size);

struct SyntheticCorpus {
    Dataset data;
    std::vector<std::string> captions;  // aligned with data.ids
};

/// Scene i uses seed `seed * 1000003 + i`; ids are img_0000, img_0001, ...
SyntheticCorpus synthetic_corpus(int64_t count, int64_t size, uint64_t seed);

/// Writes `<id>.png` files and a `captions.tsv` (id TAB caption) into `dir`.
void write_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

}  // namespace sodiff::harness
