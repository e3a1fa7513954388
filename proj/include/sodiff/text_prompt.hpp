#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <torch/torch.h>

namespace sodiff::text {

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& message, size_t line)
        : std::runtime_error(message + " (line " + std::to_string(line) + ")"), line_(line) {}
    size_t line() const noexcept { return line_; }

private:
    size_t line_;
};

class MissingCaptionsError : public std::runtime_error {
public:
    explicit MissingCaptionsError(std::vector<std::string> ids);
    const std::vector<std::string>& ids() const noexcept { return ids_; }

private:
    std::vector<std::string> ids_;
};

/// Trims, lowercases and collapses internal whitespace runs to one space.
std::string normalize_caption(const std::string& caption);

/// Source of e_text. Implementations must be deterministic and always return [tokens(), dim()].
class PromptProvider {
public:
    virtual ~PromptProvider() = default;
    virtual torch::Tensor embed(const std::string& caption) const = 0;
    virtual int64_t tokens() const = 0;
    virtual int64_t dim() const = 0;
};

/// Desk-scale stand-in for a T2I text encoder: a fixed BOS row, then one seeded random
/// table row per whitespace token (FNV-1a hash modulo vocabulary), zero rows as padding.
class HashedTokenProvider final : public PromptProvider {
public:
    HashedTokenProvider(int64_t tokens = 77, int64_t dim = 64, int64_t vocab = 4096, uint64_t seed = 1234);

    torch::Tensor embed(const std::string& caption) const override;
    int64_t tokens() const override { return tokens_; }
    int64_t dim() const override { return dim_; }

    /// The padding row appended after the last caption token.
    torch::Tensor padding_vector() const { return torch::zeros({dim_}); }
    static uint64_t token_hash(const std::string& token);

private:
    int64_t tokens_;
    int64_t dim_;
    torch::Tensor bos_;
    torch::Tensor table_;
};

/// Embeddings produced offline by a real text encoder. The binary file holds a raw
/// little-endian array; the JSON sidecar (`<file>.json`) declares
/// {"dtype": "float32"|"float64", "shape": [N, L, D], "captions": [N strings]}.
class PrecomputedProvider final : public PromptProvider {
public:
    explicit PrecomputedProvider(const std::filesystem::path& binary);

    torch::Tensor embed(const std::string& caption) const override;
    int64_t tokens() const override { return tokens_; }
    int64_t dim() const override { return dim_; }

    static void write(const std::filesystem::path& binary, const std::vector<std::string>& captions,
                      const torch::Tensor& embeddings);

private:
    int64_t tokens_ = 0;
    int64_t dim_ = 0;
    std::unordered_map<std::string, torch::Tensor> by_caption_;
};

torch::Tensor embed_text(const PromptProvider& provider, const std::string& caption);

struct CaptionRecord {
    std::string image_id;
    std::string caption;
    torch::Tensor embedding;  // [L_text, D]
};

using CaptionMap = std::map<std::string, CaptionRecord>;

/// Parses `image_id<TAB>caption` lines and embeds every caption with `provider`.
CaptionMap load_caption_file(const std::filesystem::path& path, const PromptProvider& provider);

/// Throws MissingCaptionsError listing every id without a caption.
void require_captions(const CaptionMap& captions, const std::vector<std::string>& image_ids);

}  // namespace sodiff::text
