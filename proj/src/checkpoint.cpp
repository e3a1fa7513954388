#include "sodiff/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace sodiff {

namespace {

constexpr char kMagic[8] = {'S', 'O', 'D', 'I', 'F', 'F', 'C', 'K'};

std::string dtype_name(torch::ScalarType t) {
    switch (t) {
        case torch::kFloat32: return "float32";
        case torch::kFloat64: return "float64";
        case torch::kInt64: return "int64";
        case torch::kUInt8: return "uint8";
        default: throw CheckpointError("checkpoint: unsupported dtype " + std::string(c10::toString(t)));
    }
}

torch::ScalarType dtype_from(const std::string& name) {
    if (name == "float32") return torch::kFloat32;
    if (name == "float64") return torch::kFloat64;
    if (name == "int64") return torch::kInt64;
    if (name == "uint8") return torch::kUInt8;
    throw CheckpointError("checkpoint: unknown dtype " + name);
}

}  // namespace

std::string config_hash(const nlohmann::json& config) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : config.dump()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << h;
    return out.str();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json table = nlohmann::json::array();
    std::vector<torch::Tensor> blobs;
    uint64_t offset = 0;
    for (const auto& [name, tensor] : ckpt.tensors) {
        auto t = tensor.detach().cpu().contiguous();
        const auto bytes = static_cast<uint64_t>(t.numel()) * t.element_size();
        table.push_back({{"name", name}, {"dtype", dtype_name(t.scalar_type())}, {"shape", t.sizes().vec()},
                         {"offset", offset}, {"nbytes", bytes}});
        offset += bytes;
        blobs.push_back(t);
    }
    nlohmann::json header = {{"format", "sodiff-ckpt"}, {"version", 1},      {"kind", ckpt.kind},
                             {"config", ckpt.config},   {"config_hash", ckpt.config_hash.empty() ? config_hash(ckpt.config) : ckpt.config_hash},
                             {"meta", ckpt.meta},       {"tensors", table}};
    const auto text = header.dump();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    uint64_t len = text.size();
    unsigned char len_bytes[8];
    for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(len_bytes), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : blobs) {
        out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
    }
    if (!out) throw CheckpointError("short write to checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    char magic[8];
    unsigned char len_bytes[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
        throw CheckpointError(path.string() + " is not a checkpoint archive");
    }
    in.read(reinterpret_cast<char*>(len_bytes), 8);
    uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<uint64_t>(len_bytes[i]) << (8 * i);
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw CheckpointError("truncated checkpoint header");
    const auto header = nlohmann::json::parse(text);
    const auto data_start = in.tellg();

    Checkpoint ckpt;
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.config = header.at("config");
    ckpt.config_hash = header.at("config_hash").get<std::string>();
    ckpt.meta = header.value("meta", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
        auto t = torch::empty(entry.at("shape").get<std::vector<int64_t>>(), dtype_from(entry.at("dtype")));
        const auto offset = entry.at("offset").get<uint64_t>();
        const auto bytes = entry.at("nbytes").get<uint64_t>();
        in.seekg(data_start + static_cast<std::streamoff>(offset));
        if (!in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(bytes))) {
            throw CheckpointError("truncated tensor data for " + entry.at("name").get<std::string>());
        }
        ckpt.tensors.emplace(entry.at("name").get<std::string>(), t);
    }
    return ckpt;
}

TensorMap module_state(const torch::nn::Module& module, const std::string& prefix,
                       const std::function<bool(const std::string&)>& keep) {
    TensorMap out;
    for (const auto& item : module.named_parameters()) {
        if (!keep || keep(item.key())) out.emplace(prefix + item.key(), item.value().detach().clone());
    }
    for (const auto& item : module.named_buffers()) {
        if (!keep || keep(item.key())) out.emplace(prefix + item.key(), item.value().detach().clone());
    }
    return out;
}

void load_module_state(torch::nn::Module& module, const TensorMap& tensors, const std::string& prefix, bool strict,
                       const std::function<bool(const std::string&)>& keep) {
    torch::NoGradGuard guard;
    auto assign = [&](const std::string& name, torch::Tensor& target) {
        if (keep && !keep(name)) return;
        auto it = tensors.find(prefix + name);
        if (it == tensors.end()) {
            if (strict) throw CheckpointError("checkpoint is missing tensor " + prefix + name);
            return;
        }
        if (it->second.sizes() != target.sizes()) {
            throw CheckpointError("shape mismatch for " + prefix + name);
        }
        target.copy_(it->second);
    };
    for (auto& item : module.named_parameters()) assign(item.key(), item.value());
    for (auto& item : module.named_buffers()) assign(item.key(), item.value());
}

torch::Tensor string_to_tensor(const std::string& text) {
    auto t = torch::empty({static_cast<int64_t>(text.size())}, torch::kUInt8);
    if (!text.empty()) std::memcpy(t.data_ptr(), text.data(), text.size());
    return t;
}

std::string tensor_to_string(const torch::Tensor& bytes) {
    auto t = bytes.contiguous();
    return std::string(static_cast<const char*>(t.data_ptr()), static_cast<size_t>(t.numel()));
}

torch::Tensor serialize_optimizer(torch::optim::Optimizer& optimizer) {
    std::ostringstream out;
    torch::serialize::OutputArchive archive;
    optimizer.save(archive);
    archive.save_to(out);
    return string_to_tensor(out.str());
}

void deserialize_optimizer(torch::optim::Optimizer& optimizer, const torch::Tensor& bytes) {
    std::istringstream in(tensor_to_string(bytes));
    torch::serialize::InputArchive archive;
    archive.load_from(in);
    optimizer.load(archive);
}

}  // namespace sodiff
