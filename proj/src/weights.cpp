#include "fencepipe/weights.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>

#include "fencepipe/error.hpp"
#include "fencepipe/io.hpp"

namespace fencepipe {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "weights I/O assumes a little-endian host");

namespace {

const char kMagic[4] = {'W', 'F', 'P', 'V'};

std::string padding_name(Padding p) { return p == Padding::same ? "same" : "valid"; }

Padding parse_padding(const std::string& s) {
    if (s == "same") return Padding::same;
    if (s == "valid") return Padding::valid;
    throw ConfigError("unknown padding '" + s + "' (same|valid)");
}

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    explicit Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string get_string(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const { return end_ - pos_; }

private:
    void need(std::size_t n) const {
        if (end_ - pos_ < n) {
            throw CorruptionError("weights file is truncated");
        }
    }

    const std::string& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

std::uint32_t crc_of(const char* data, std::size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed large buffers in chunks.
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

}  // namespace

json to_json(const ModelConfig& config) {
    if (const auto* u = std::get_if<UNetConfig>(&config)) {
        return {{"kind", "unet"},
                {"in_channels", u->in_channels},
                {"out_channels", u->out_channels},
                {"depth", u->depth},
                {"base_filters", u->base_filters},
                {"padding", padding_name(u->padding)}};
    }
    if (const auto* c = std::get_if<ClassifierConfig>(&config)) {
        return {{"kind", c->kind == ClassifierKind::cnn ? "cnn" : "residual"},
                {"in_channels", c->in_channels},
                {"num_classes", c->num_classes},
                {"blocks", c->blocks},
                {"base_filters", c->base_filters},
                {"input_size", c->input_size}};
    }
    return {{"kind", "custom"}};
}

ModelConfig model_config_from_json(const json& j) {
    try {
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "unet") {
            UNetConfig u;
            u.in_channels = j.value("in_channels", u.in_channels);
            u.out_channels = j.value("out_channels", u.out_channels);
            u.depth = j.value("depth", u.depth);
            u.base_filters = j.value("base_filters", u.base_filters);
            u.padding = parse_padding(j.value("padding", std::string("same")));
            return u;
        }
        if (kind == "cnn" || kind == "residual") {
            ClassifierConfig c;
            c.kind = kind == "cnn" ? ClassifierKind::cnn : ClassifierKind::residual;
            c.in_channels = j.value("in_channels", c.in_channels);
            c.num_classes = j.value("num_classes", c.num_classes);
            c.blocks = j.value("blocks", c.blocks);
            c.base_filters = j.value("base_filters", c.base_filters);
            c.input_size = j.value("input_size", c.input_size);
            return c;
        }
        throw ConfigError("unknown model kind '" + kind + "'");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad model config: ") + e.what());
    }
}

std::string serialize_weights(const ModelGraph& model) {
    if (std::holds_alternative<std::monostate>(model.config)) {
        throw ContractError("only models built from a config can be saved");
    }
    json header = to_json(model.config);
    header["seed"] = model.seed;
    header["epoch"] = model.epoch;
    const std::string config = header.dump();

    std::string out(kMagic, 4);
    put<std::uint32_t>(out, kWeightsVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
    out += config;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(model.weight_names().size()));
    for (const std::string& name : model.weight_names()) {
        const Tensor& w = model.weight(name);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(w.rank()));
        for (std::size_t d : w.shape()) {
            put<std::uint64_t>(out, d);
        }
        const auto data = w.data();
        out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
    }
    put<std::uint32_t>(out, crc_of(out.data(), out.size()));
    return out;
}

ModelGraph deserialize_weights(const std::string& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw CorruptionError("not a weights file (bad magic)");
    }
    if (bytes.size() < 4 + 4 + 4) {
        throw CorruptionError("weights file is truncated");
    }
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored = 0;
    std::memcpy(&stored, bytes.data() + body, 4);
    if (crc_of(bytes.data(), body) != stored) {
        throw CorruptionError("weights file CRC mismatch (corrupt or truncated)");
    }
    Reader r(bytes, body);
    r.get_string(4);
    const auto version = r.get<std::uint32_t>();
    if (version != kWeightsVersion) {
        throw VersionError("weights format version " + std::to_string(version) + " is not supported (expected " +
                           std::to_string(kWeightsVersion) + ")");
    }
    const auto config_len = r.get<std::uint32_t>();
    json header;
    try {
        header = json::parse(r.get_string(config_len));
    } catch (const json::parse_error& e) {
        throw CorruptionError(std::string("weights header is not JSON: ") + e.what());
    }
    ModelConfig config;
    std::uint64_t seed = 0;
    int epoch = 0;
    try {
        config = model_config_from_json(header);
        seed = header.at("seed").get<std::uint64_t>();
        epoch = header.at("epoch").get<int>();
    } catch (const json::exception& e) {
        throw CorruptionError(std::string("weights header is incomplete: ") + e.what());
    } catch (const ConfigError& e) {
        throw CorruptionError(std::string("weights header is invalid: ") + e.what());
    }
    ModelGraph model = build_model(config, seed);
    model.epoch = epoch;
    const auto count = r.get<std::uint32_t>();
    if (count != model.weight_names().size()) {
        throw CorruptionError("weights file holds " + std::to_string(count) + " tensors, architecture needs " +
                              std::to_string(model.weight_names().size()));
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.get_string(r.get<std::uint32_t>());
        if (!model.has_weight(name)) {
            throw CorruptionError("unexpected tensor '" + name + "' in weights file");
        }
        Tensor& w = model.weight(name);
        const auto rank = r.get<std::uint32_t>();
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
        }
        if (shape != w.shape()) {
            throw CorruptionError("tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                                  shape_str(w.shape()));
        }
        auto dst = w.mutable_data();
        for (double& v : dst) {
            v = r.get<double>();
        }
    }
    if (r.remaining() != 0) {
        throw CorruptionError("trailing bytes in weights file");
    }
    return model;
}

void save_weights(const std::filesystem::path& path, const ModelGraph& model) {
    write_file_atomic(path, serialize_weights(model));
}

ModelGraph load_weights(const std::filesystem::path& path) { return deserialize_weights(read_file(path)); }

}  // namespace fencepipe
