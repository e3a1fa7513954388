#include "sodiff/text_prompt.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "sodiff/tensor_util.hpp"

namespace sodiff::text {

namespace {

std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) {
        if (!out.empty()) out += ", ";
        out += id;
    }
    return out;
}

std::vector<std::string> split_tokens(const std::string& normalized) {
    std::vector<std::string> tokens;
    std::istringstream in(normalized);
    for (std::string tok; in >> tok;) tokens.push_back(tok);
    return tokens;
}

}  // namespace

MissingCaptionsError::MissingCaptionsError(std::vector<std::string> ids)
    : std::runtime_error("missing captions for: " + join_ids(ids)), ids_(std::move(ids)) {}

std::string normalize_caption(const std::string& caption) {
    std::string out;
    out.reserve(caption.size());
    bool pending_space = false;
    for (unsigned char ch : caption) {
        if (std::isspace(ch)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(ch)));
    }
    return out;
}

HashedTokenProvider::HashedTokenProvider(int64_t tokens, int64_t dim, int64_t vocab, uint64_t seed)
    : tokens_(tokens), dim_(dim) {
    if (tokens < 2 || dim < 1 || vocab < 1) {
        throw std::invalid_argument("HashedTokenProvider: tokens >= 2, dim >= 1, vocab >= 1 required");
    }
    auto gen = torch::make_generator<at::CPUGeneratorImpl>(seed);
    bos_ = torch::randn({dim}, gen, torch::kFloat32);
    table_ = torch::randn({vocab, dim}, gen, torch::kFloat32);
}

uint64_t HashedTokenProvider::token_hash(const std::string& token) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : token) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

torch::Tensor HashedTokenProvider::embed(const std::string& caption) const {
    const auto tokens = split_tokens(normalize_caption(caption));
    if (tokens.empty()) throw std::domain_error("embed_text: empty caption");
    auto out = torch::zeros({tokens_, dim_});
    out[0] = bos_;
    const auto vocab = static_cast<uint64_t>(table_.size(0));
    const auto count = std::min<int64_t>(static_cast<int64_t>(tokens.size()), tokens_ - 1);
    for (int64_t i = 0; i < count; ++i) {
        out[i + 1] = table_[static_cast<int64_t>(token_hash(tokens[i]) % vocab)];
    }
    return out;
}

PrecomputedProvider::PrecomputedProvider(const std::filesystem::path& binary) {
    auto sidecar_path = binary;
    sidecar_path += ".json";
    std::ifstream sidecar(sidecar_path);
    if (!sidecar) throw std::runtime_error("missing embedding sidecar " + sidecar_path.string());
    const auto meta = nlohmann::json::parse(sidecar);
    const auto shape = meta.at("shape").get<std::vector<int64_t>>();
    const auto dtype = meta.at("dtype").get<std::string>();
    const auto captions = meta.at("captions").get<std::vector<std::string>>();
    if (shape.size() != 3) throw ShapeError("precomputed embeddings must be [N, L, D]");
    if (static_cast<int64_t>(captions.size()) != shape[0]) {
        throw ShapeError("precomputed embeddings: caption count does not match shape[0]");
    }
    torch::ScalarType type;
    if (dtype == "float32") {
        type = torch::kFloat32;
    } else if (dtype == "float64") {
        type = torch::kFloat64;
    } else {
        throw std::runtime_error("precomputed embeddings: unsupported dtype " + dtype);
    }
    auto data = torch::empty(shape, type);
    std::ifstream in(binary, std::ios::binary);
    const auto bytes = static_cast<std::streamsize>(data.numel() * data.element_size());
    if (!in.read(static_cast<char*>(data.data_ptr()), bytes)) {
        throw std::runtime_error("precomputed embeddings: short read from " + binary.string());
    }
    data = data.to(torch::kFloat32);
    tokens_ = shape[1];
    dim_ = shape[2];
    for (size_t i = 0; i < captions.size(); ++i) {
        by_caption_[normalize_caption(captions[i])] = data[static_cast<int64_t>(i)].clone();
    }
}

torch::Tensor PrecomputedProvider::embed(const std::string& caption) const {
    const auto key = normalize_caption(caption);
    if (key.empty()) throw std::domain_error("embed_text: empty caption");
    auto it = by_caption_.find(key);
    if (it == by_caption_.end()) throw std::out_of_range("no precomputed embedding for caption '" + key + "'");
    return it->second.clone();
}

void PrecomputedProvider::write(const std::filesystem::path& binary, const std::vector<std::string>& captions,
                                const torch::Tensor& embeddings) {
    require_rank(embeddings, 3, "PrecomputedProvider::write");
    auto data = embeddings.to(torch::kFloat32).contiguous();
    std::ofstream out(binary, std::ios::binary);
    out.write(static_cast<const char*>(data.data_ptr()), static_cast<std::streamsize>(data.numel() * 4));
    nlohmann::json meta = {{"dtype", "float32"}, {"shape", data.sizes().vec()}, {"captions", captions}};
    auto sidecar = binary;
    sidecar += ".json";
    std::ofstream(sidecar) << meta.dump(2) << "\n";
}

torch::Tensor embed_text(const PromptProvider& provider, const std::string& caption) {
    return provider.embed(caption);
}

CaptionMap load_caption_file(const std::filesystem::path& path, const PromptProvider& provider) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open caption file " + path.string());
    CaptionMap out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw ParseError("caption line has no TAB separator", line_no);
        auto id = line.substr(0, tab);
        auto caption = line.substr(tab + 1);
        if (id.empty()) throw ParseError("caption line has an empty image id", line_no);
        if (normalize_caption(caption).empty()) throw ParseError("caption for '" + id + "' is empty", line_no);
        if (out.contains(id)) throw ParseError("duplicate image id '" + id + "'", line_no);
        auto embedding = provider.embed(caption);
        out.emplace(id, CaptionRecord{id, std::move(caption), std::move(embedding)});
    }
    return out;
}

void require_captions(const CaptionMap& captions, const std::vector<std::string>& image_ids) {
    std::vector<std::string> missing;
    for (const auto& id : image_ids) {
        if (!captions.contains(id)) missing.push_back(id);
    }
    if (!missing.empty()) throw MissingCaptionsError(std::move(missing));
}

}  // namespace sodiff::text
