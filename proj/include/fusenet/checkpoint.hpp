// checkpoint.hpp -- binary model snapshots: magic, version, JSON config
// block, named tensor records, trailing CRC32.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "fusenet/errors.hpp"
#include "fusenet/model.hpp"

namespace fusenet {

inline constexpr std::array<char, 8> kCheckpointMagic{'F', 'U', 'S', 'E', 'N', 'E', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    std::size_t epoch = 0;
    double val_accuracy = 0.0;
    std::uint64_t seed = 0;
};

namespace detail {

inline std::uint32_t crc32(const std::string& bytes) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (unsigned char ch : bytes) crc = table[(crc ^ ch) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(char(v)); }
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xFFu));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xFFu));
}

template <typename T>
void put_value(std::string& out, T v) {
    if constexpr (sizeof(T) == 4)
        put_u32(out, std::bit_cast<std::uint32_t>(v));
    else
        put_u64(out, std::bit_cast<std::uint64_t>(v));
}

class ByteReader {
  public:
    explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}
    std::uint8_t u8() { return std::uint8_t(take(1)[0]); }
    std::uint32_t u32() {
        const char* p = take(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(p[i])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        const char* p = take(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(p[i])) << (8 * i);
        return v;
    }
    std::string str(std::size_t n) { return std::string(take(n), n); }
    template <typename T>
    T value() {
        if constexpr (sizeof(T) == 4)
            return std::bit_cast<T>(u32());
        else
            return std::bit_cast<T>(u64());
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

  private:
    const char* take(std::size_t n) {
        if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated file");
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

inline nlohmann::ordered_json spec_to_json(const BackboneSpec& s) {
    nlohmann::ordered_json j;
    j["kind"] = kind_name(s.kind);
    j["stem_channels"] = s.stem_channels;
    nlohmann::ordered_json stages = nlohmann::ordered_json::array();
    for (const auto& st : s.stages) stages.push_back({st.blocks, st.channels});
    j["stages"] = stages;
    j["feature_dim"] = s.feature_dim;
    j["groups"] = s.groups;
    j["input"] = {s.input_h, s.input_w};
    return j;
}

// Reads the tensor-record section into an existing parameter store; every
// record must match an existing parameter's path, precision and shape, and
// every parameter must be covered.
template <typename T>
void read_tensor_records(ByteReader& r, ParamStore<T>& params) {
    const std::uint32_t count = r.u32();
    if (count != params.keys().size())
        throw CheckpointError("checkpoint: holds " + std::to_string(count) +
                              " tensors, model has " + std::to_string(params.keys().size()));
    std::vector<char> seen(count, 0);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string key = r.str(r.u32());
        if (!params.contains(key))
            throw CheckpointError("checkpoint: unknown parameter path \"" + key + "\"");
        auto& t = params.at(key);
        const std::uint8_t tag = r.u8();
        if (tag != sizeof(T))
            throw CheckpointError("checkpoint: parameter \"" + key + "\" stored with " +
                                  std::to_string(tag) + "-byte precision, expected " +
                                  std::to_string(sizeof(T)));
        const std::uint32_t rank = r.u32();
        Shape dims(rank);
        for (auto& d : dims) d = std::size_t(r.u64());
        if (dims != t.shape())
            throw CheckpointError("checkpoint: parameter \"" + key + "\" has shape " +
                                  shape_str(dims) + ", model expects " + shape_str(t.shape()));
        auto dst = t.values_mut();
        for (auto& v : dst) v = r.template value<T>();
        const std::size_t idx =
            std::size_t(std::find(params.keys().begin(), params.keys().end(), key) -
                        params.keys().begin());
        if (seen[idx]) throw CheckpointError("checkpoint: duplicate record for \"" + key + "\"");
        seen[idx] = 1;
    }
    if (r.remaining() != 4)
        throw CheckpointError("checkpoint: trailing bytes after tensor records");
}

inline BackboneSpec spec_from_json(const nlohmann::json& j) {
    BackboneSpec s;
    try {
        s.kind = parse_kind(j.at("kind").get<std::string>());
        s.stem_channels = j.at("stem_channels").get<std::size_t>();
        for (const auto& st : j.at("stages"))
            s.stages.push_back({st.at(0).get<std::size_t>(), st.at(1).get<std::size_t>()});
        s.feature_dim = j.at("feature_dim").get<std::size_t>();
        s.groups = j.at("groups").get<std::size_t>();
        s.input_h = j.at("input").at(0).get<std::size_t>();
        s.input_w = j.at("input").at(1).get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: bad backbone config: ") + e.what());
    }
    return s;
}

} // namespace detail

template <typename T>
std::string serialize_checkpoint(const FusionModel<T>& model, const CheckpointMeta& meta) {
    std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    detail::put_u32(out, kCheckpointVersion);

    nlohmann::ordered_json cfg;
    cfg["classes"] = model.class_count();
    cfg["dropout"] = model.dropout_p();
    cfg["model_seed"] = model.seed();
    nlohmann::ordered_json order = nlohmann::ordered_json::array();
    nlohmann::ordered_json backbones = nlohmann::ordered_json::array();
    for (const auto& s : model.specs()) {
        order.push_back(kind_name(s.kind));
        backbones.push_back(detail::spec_to_json(s));
    }
    cfg["concat_order"] = order;
    cfg["backbones"] = backbones;
    cfg["metadata"] = {{"epoch", meta.epoch},
                       {"val_accuracy", meta.val_accuracy},
                       {"seed", meta.seed}};
    const std::string cfg_text = cfg.dump();
    detail::put_u32(out, std::uint32_t(cfg_text.size()));
    out += cfg_text;

    const auto& params = model.params();
    detail::put_u32(out, std::uint32_t(params.keys().size()));
    for (const auto& key : params.keys()) {
        const auto& t = params.at(key);
        detail::put_u32(out, std::uint32_t(key.size()));
        out += key;
        detail::put_u8(out, std::uint8_t(sizeof(T)));
        detail::put_u32(out, std::uint32_t(t.rank()));
        for (std::size_t d = 0; d < t.rank(); ++d) detail::put_u64(out, t.dim(d));
        for (T v : t.values()) detail::put_value(out, v);
    }
    detail::put_u32(out, detail::crc32(out));
    return out;
}

template <typename T>
void save_checkpoint(const FusionModel<T>& model, const CheckpointMeta& meta,
                     const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot write " + path);
    const std::string bytes = serialize_checkpoint(model, meta);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw CheckpointError("checkpoint: short write to " + path);
}

template <typename T>
std::pair<FusionModel<T>, CheckpointMeta> deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < kCheckpointMagic.size() ||
        !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
        throw CheckpointError("checkpoint: bad magic");
    if (bytes.size() < kCheckpointMagic.size() + 4 + 4 + 4 + 4)
        throw CheckpointError("checkpoint: truncated file");
    {
        const std::string body = bytes.substr(0, bytes.size() - 4);
        detail::ByteReader tail(bytes);
        (void)tail.str(bytes.size() - 4);
        const std::uint32_t stored = tail.u32();
        if (detail::crc32(body) != stored) throw CheckpointError("checkpoint: checksum mismatch");
    }

    detail::ByteReader r(bytes);
    (void)r.str(kCheckpointMagic.size());
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint: version " + std::to_string(version) +
                              ", expected " + std::to_string(kCheckpointVersion));
    nlohmann::json cfg;
    try {
        cfg = nlohmann::json::parse(r.str(r.u32()));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: bad config block: ") + e.what());
    }

    CheckpointMeta meta;
    std::vector<BackboneSpec> specs;
    std::size_t classes = 2;
    double dropout_p = 0.2;
    std::uint64_t model_seed = 0;
    try {
        classes = cfg.at("classes").get<std::size_t>();
        dropout_p = cfg.at("dropout").get<double>();
        model_seed = cfg.at("model_seed").get<std::uint64_t>();
        for (const auto& b : cfg.at("backbones")) specs.push_back(detail::spec_from_json(b));
        const auto& md = cfg.at("metadata");
        meta.epoch = md.at("epoch").get<std::size_t>();
        meta.val_accuracy = md.at("val_accuracy").get<double>();
        meta.seed = md.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: bad config block: ") + e.what());
    }

    auto model = FusionModel<T>::make(std::move(specs), classes, dropout_p, model_seed);
    detail::read_tensor_records(r, model.params());
    return {std::move(model), meta};
}

template <typename T>
std::pair<FusionModel<T>, CheckpointMeta> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint<T>(bytes);
}

// Loads parameter values into an existing model. The records are matched
// against the model's own key set, so a configuration conflict surfaces as
// an error naming the first mismatching parameter.
template <typename T>
CheckpointMeta load_checkpoint_into(FusionModel<T>& model, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < kCheckpointMagic.size() ||
        !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
        throw CheckpointError("checkpoint: bad magic");
    {
        const std::string body = bytes.substr(0, bytes.size() >= 4 ? bytes.size() - 4 : 0);
        detail::ByteReader tail(bytes);
        (void)tail.str(body.size());
        if (detail::crc32(body) != tail.u32())
            throw CheckpointError("checkpoint: checksum mismatch");
    }
    detail::ByteReader r(bytes);
    (void)r.str(kCheckpointMagic.size());
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint: version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
    CheckpointMeta meta;
    try {
        const auto cfg = nlohmann::json::parse(r.str(r.u32()));
        const auto& md = cfg.at("metadata");
        meta.epoch = md.at("epoch").get<std::size_t>();
        meta.val_accuracy = md.at("val_accuracy").get<double>();
        meta.seed = md.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: bad config block: ") + e.what());
    }
    detail::read_tensor_records(r, model.params());
    return meta;
}

} // namespace fusenet
