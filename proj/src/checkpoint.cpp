#include "histovit/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "histovit/error.hpp"

namespace histovit {

namespace {

constexpr std::string_view kMagic = "histovit-checkpoint 1";

void write_doubles_le(std::ostream& out, std::span<const double> values) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size() * sizeof(double)));
    } else {
        for (double v : values) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            char buf[8];
            for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
            out.write(buf, 8);
        }
    }
}

void read_doubles_le(std::istream& in, std::span<double> values) {
    if constexpr (std::endian::native == std::endian::little) {
        in.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(double)));
    } else {
        for (double& v : values) {
            char buf[8];
            in.read(buf, 8);
            std::uint64_t bits = 0;
            for (int i = 0; i < 8; ++i)
                bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
            std::memcpy(&v, &bits, sizeof(v));
        }
    }
}

std::string head_kind_name(TransformerConfig::HeadKind kind) {
    return kind == TransformerConfig::HeadKind::two_layer_gelu ? "two_layer_gelu"
                                                               : "single_linear";
}

TransformerConfig::HeadKind parse_head_kind(const std::string& name) {
    if (name == "two_layer_gelu") return TransformerConfig::HeadKind::two_layer_gelu;
    if (name == "single_linear") return TransformerConfig::HeadKind::single_linear;
    throw Error(ErrorCategory::checkpoint, "unknown head kind '" + name + "'");
}

std::size_t parse_size(const std::string& value, const std::string& key) {
    try {
        return static_cast<std::size_t>(std::stoull(value));
    } catch (const std::exception&) {
        throw Error(ErrorCategory::checkpoint, "bad value for " + key + ": '" + value + "'");
    }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelWeights& weights) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCategory::io, "cannot open " + path.string() + " for writing");

    const TransformerConfig& cfg = weights.config;
    const auto named = weights.named();
    out << kMagic << "\n";
    out << "image_size=" << cfg.image_size << "\n";
    out << "patch_size=" << cfg.patch_size << "\n";
    out << "channels=" << cfg.channels << "\n";
    out << "embed_dim=" << cfg.embed_dim << "\n";
    out << "num_heads=" << cfg.num_heads << "\n";
    out << "num_blocks=" << cfg.num_blocks << "\n";
    out << "mlp_hidden_dim=" << cfg.mlp_hidden_dim << "\n";
    out << "num_classes=" << cfg.num_classes << "\n";
    out << "use_distillation_token=" << (cfg.use_distillation_token ? 1 : 0) << "\n";
    out << "head=" << head_kind_name(cfg.head) << "\n";
    out << "head_hidden_dim=" << cfg.head_hidden_dim << "\n";
    out << "gelu_tanh_approx=" << (cfg.gelu_tanh_approx ? 1 : 0) << "\n";
    out << "tensors=" << named.size() << "\n";
    for (const auto& [name, tensor] : named) {
        out << "tensor " << name << " " << tensor.rank();
        for (std::size_t d : tensor.shape()) out << " " << d;
        out << "\n";
        write_doubles_le(out, tensor.values());
        out << "\n";
    }
    if (!out) throw Error(ErrorCategory::io, "write failed for " + path.string());
}

ModelWeights load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCategory::io, "cannot open " + path.string());

    std::string line;
    if (!std::getline(in, line) || line != kMagic)
        throw Error(ErrorCategory::checkpoint, path.string() + ": not a checkpoint file");

    TransformerConfig cfg;
    std::size_t tensor_count = 0;
    bool saw_tensors = false;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(ErrorCategory::checkpoint, "malformed header line '" + line + "'");
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "image_size") cfg.image_size = parse_size(value, key);
        else if (key == "patch_size") cfg.patch_size = parse_size(value, key);
        else if (key == "channels") cfg.channels = parse_size(value, key);
        else if (key == "embed_dim") cfg.embed_dim = parse_size(value, key);
        else if (key == "num_heads") cfg.num_heads = parse_size(value, key);
        else if (key == "num_blocks") cfg.num_blocks = parse_size(value, key);
        else if (key == "mlp_hidden_dim") cfg.mlp_hidden_dim = parse_size(value, key);
        else if (key == "num_classes") cfg.num_classes = parse_size(value, key);
        else if (key == "use_distillation_token") cfg.use_distillation_token = value == "1";
        else if (key == "head") cfg.head = parse_head_kind(value);
        else if (key == "head_hidden_dim") cfg.head_hidden_dim = parse_size(value, key);
        else if (key == "gelu_tanh_approx") cfg.gelu_tanh_approx = value == "1";
        else if (key == "tensors") {
            tensor_count = parse_size(value, key);
            saw_tensors = true;
            break;
        } else {
            throw Error(ErrorCategory::checkpoint, "unknown header key '" + key + "'");
        }
    }
    if (!saw_tensors) throw Error(ErrorCategory::checkpoint, "missing tensors= header");
    try {
        cfg.validate();
    } catch (const Error& e) {
        throw Error(ErrorCategory::checkpoint, std::string("invalid config: ") + e.what());
    }

    ModelWeights weights = ModelWeights::zeros(cfg);
    std::map<std::string, Tensor> expected;
    for (auto& [name, tensor] : weights.named()) expected.emplace(name, tensor);
    if (tensor_count != expected.size())
        throw Error(ErrorCategory::checkpoint,
                    "tensor count " + std::to_string(tensor_count) + " does not match config (" +
                        std::to_string(expected.size()) + " expected)");

    std::map<std::string, bool> seen;
    for (std::size_t t = 0; t < tensor_count; ++t) {
        if (!std::getline(in, line))
            throw Error(ErrorCategory::checkpoint, "truncated checkpoint: missing tensor header");
        std::istringstream hs(line);
        std::string tok, name;
        std::size_t rank = 0;
        hs >> tok >> name >> rank;
        if (!hs || tok != "tensor")
            throw Error(ErrorCategory::checkpoint, "malformed tensor header '" + line + "'");
        std::vector<std::size_t> shape(rank);
        for (std::size_t i = 0; i < rank; ++i) {
            if (!(hs >> shape[i]))
                throw Error(ErrorCategory::checkpoint, "malformed tensor header '" + line + "'");
        }
        auto it = expected.find(name);
        if (it == expected.end())
            throw Error(ErrorCategory::checkpoint, "unexpected tensor '" + name + "'");
        if (seen[name])
            throw Error(ErrorCategory::checkpoint, "duplicate tensor '" + name + "'");
        seen[name] = true;
        if (it->second.shape() != shape)
            throw Error(ErrorCategory::checkpoint, "shape mismatch for '" + name + "'");
        Tensor dest = it->second;
        read_doubles_le(in, dest.mutable_values());
        if (!in) throw Error(ErrorCategory::checkpoint, "truncated payload for '" + name + "'");
        char nl = 0;
        in.read(&nl, 1);
        if (!in || nl != '\n')
            throw Error(ErrorCategory::checkpoint, "malformed payload terminator for '" + name + "'");
    }
    for (const auto& [name, tensor] : expected) {
        if (!seen[name])
            throw Error(ErrorCategory::checkpoint, "missing tensor '" + name + "'");
    }
    return weights;
}

}  // namespace histovit
