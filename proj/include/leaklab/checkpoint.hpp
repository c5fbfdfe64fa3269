#ifndef LEAKLAB_CHECKPOINT_HPP
#define LEAKLAB_CHECKPOINT_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leaklab/errors.hpp"
#include "leaklab/lora.hpp"
#include "leaklab/model.hpp"

namespace leaklab {

// Binary checkpoint: 8-byte magic, u64 little-endian metadata length, JSON
// metadata, then a raw little-endian IEEE-754 payload. Round trips are
// bit-exact at the stored precision (f64 by default, f32 downcast optional).
inline constexpr char kCheckpointMagic[9] = "LKLB0001";

enum class CheckpointDtype { f64, f32 };

inline const char* to_string(CheckpointDtype d) { return d == CheckpointDtype::f64 ? "f64" : "f32"; }

inline CheckpointDtype checkpoint_dtype_from_string(const std::string& s) {
    if (s == "f64") return CheckpointDtype::f64;
    if (s == "f32") return CheckpointDtype::f32;
    throw FormatError("unknown checkpoint dtype: " + s);
}

namespace detail {

inline void put_u64_le(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline uint64_t get_u64_le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

inline void append_tensor(std::string& payload, const Matrix& w, CheckpointDtype dtype) {
    if (dtype == CheckpointDtype::f64) {
        for (size_t i = 0; i < w.size(); ++i) {
            put_u64_le(payload, std::bit_cast<uint64_t>(w.data()[i]));
        }
    } else {
        for (size_t i = 0; i < w.size(); ++i) {
            const uint32_t bits = std::bit_cast<uint32_t>(static_cast<float>(w.data()[i]));
            for (int b = 0; b < 4; ++b) payload.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
        }
    }
}

inline void read_tensor(const unsigned char* p, Matrix& w, CheckpointDtype dtype) {
    if (dtype == CheckpointDtype::f64) {
        for (size_t i = 0; i < w.size(); ++i) {
            w.data()[i] = std::bit_cast<double>(get_u64_le(p + 8 * i));
        }
    } else {
        for (size_t i = 0; i < w.size(); ++i) {
            uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) bits |= static_cast<uint32_t>(p[4 * i + b]) << (8 * b);
            w.data()[i] = static_cast<double>(std::bit_cast<float>(bits));
        }
    }
}

inline nlohmann::json model_config_json(const ModelConfig& cfg) {
    return nlohmann::json{
        {"n_layers", cfg.n_layers}, {"d_model", cfg.d_model},     {"n_heads", cfg.n_heads},
        {"d_ff", cfg.d_ff},         {"vocab_size", cfg.vocab_size}, {"max_seq", cfg.max_seq},
        {"seed", cfg.seed},         {"activation", to_string(cfg.activation)},
    };
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_ff = j.at("d_ff").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.max_seq = j.at("max_seq").get<int>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.activation = activation_from_string(j.at("activation").get<std::string>());
    return cfg;
}

} // namespace detail

struct LoadedCheckpoint {
    std::string stage;
    CheckpointDtype dtype = CheckpointDtype::f64;
    DecoderModel model; // the base model for adapted checkpoints
    std::optional<AdaptedModel> adapted;
};

namespace detail {

inline void write_checkpoint_file(
    const std::string& path, const std::string& stage, CheckpointDtype dtype,
    const ModelConfig& cfg, const std::vector<std::pair<std::string, const Matrix*>>& tensors,
    const nlohmann::json& adapters_meta) {
    const size_t elem = dtype == CheckpointDtype::f64 ? 8 : 4;
    nlohmann::json meta;
    meta["format_version"] = 1;
    meta["stage"] = stage;
    meta["dtype"] = to_string(dtype);
    meta["model_config"] = model_config_json(cfg);
    if (!adapters_meta.is_null()) meta["adapters"] = adapters_meta;
    nlohmann::json list = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, w] : tensors) {
        list.push_back({{"name", name}, {"rows", w->rows()}, {"cols", w->cols()}, {"offset", offset}});
        offset += w->size() * elem;
    }
    meta["tensors"] = std::move(list);

    std::string out;
    out.append(kCheckpointMagic, 8);
    const std::string meta_str = meta.dump();
    put_u64_le(out, meta_str.size());
    out += meta_str;
    out.reserve(out.size() + offset);
    for (const auto& [name, w] : tensors) {
        (void)name;
        append_tensor(out, *w, dtype);
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write to " + path);
}

} // namespace detail

inline void save_checkpoint(const DecoderModel& m, const std::string& path,
                            const std::string& stage = "model",
                            CheckpointDtype dtype = CheckpointDtype::f64) {
    detail::write_checkpoint_file(path, stage, dtype, m.cfg, m.named_weights(), nullptr);
}

inline void save_checkpoint(const AdaptedModel& am, const std::string& path,
                            const std::string& stage = "finetuned",
                            CheckpointDtype dtype = CheckpointDtype::f64) {
    std::vector<std::pair<std::string, const Matrix*>> tensors = am.base.named_weights();
    nlohmann::json ad_meta;
    ad_meta["scaling"] = to_string(am.scaling);
    nlohmann::json list = nlohmann::json::array();
    for (const auto& [target, ad] : am.adapters) {
        tensors.emplace_back("adapters." + target + ".A", &ad.A);
        tensors.emplace_back("adapters." + target + ".B", &ad.B);
        list.push_back({{"target", target}, {"rank", ad.rank}, {"alpha", ad.alpha}});
    }
    ad_meta["list"] = std::move(list);
    detail::write_checkpoint_file(path, stage, dtype, am.base.cfg, tensors, ad_meta);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16 || bytes.compare(0, 8, kCheckpointMagic, 8) != 0) {
        throw FormatError("bad checkpoint magic in " + path);
    }
    const uint64_t meta_len =
        detail::get_u64_le(reinterpret_cast<const unsigned char*>(bytes.data()) + 8);
    if (16 + meta_len > bytes.size()) throw FormatError("truncated checkpoint metadata in " + path);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(bytes.substr(16, meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint metadata: ") + e.what());
    }

    LoadedCheckpoint out;
    out.stage = meta.at("stage").get<std::string>();
    out.dtype = checkpoint_dtype_from_string(meta.at("dtype").get<std::string>());
    const size_t elem = out.dtype == CheckpointDtype::f64 ? 8 : 4;
    const ModelConfig cfg = detail::model_config_from_json(meta.at("model_config"));
    out.model = DecoderModel::zeros_like(cfg);

    // Index the stored tensor table.
    struct Entry {
        int rows, cols;
        uint64_t offset;
    };
    std::map<std::string, Entry> table;
    for (const auto& t : meta.at("tensors")) {
        table[t.at("name").get<std::string>()] = {t.at("rows").get<int>(), t.at("cols").get<int>(),
                                                  t.at("offset").get<uint64_t>()};
    }
    const unsigned char* payload =
        reinterpret_cast<const unsigned char*>(bytes.data()) + 16 + meta_len;
    const uint64_t payload_size = bytes.size() - 16 - meta_len;

    const auto fill = [&](const std::string& name, Matrix& w) {
        auto it = table.find(name);
        if (it == table.end()) throw FormatError("checkpoint missing tensor " + name);
        if (it->second.rows != w.rows() || it->second.cols != w.cols()) {
            throw FormatError("checkpoint tensor " + name + " has shape " +
                              std::to_string(it->second.rows) + "x" + std::to_string(it->second.cols) +
                              ", expected " + w.shape_str());
        }
        if (it->second.offset + w.size() * elem > payload_size) {
            throw FormatError("checkpoint payload truncated at tensor " + name);
        }
        detail::read_tensor(payload + it->second.offset, w, out.dtype);
    };

    for (auto& [name, w] : out.model.named_weights()) fill(name, *w);

    if (meta.contains("adapters")) {
        AdaptedModel am;
        am.base = out.model;
        am.scaling = lora_scaling_from_string(meta["adapters"].at("scaling").get<std::string>());
        for (const auto& ad_meta : meta["adapters"].at("list")) {
            LoraAdapter ad;
            ad.target_path = ad_meta.at("target").get<std::string>();
            ad.rank = ad_meta.at("rank").get<int>();
            ad.alpha = ad_meta.at("alpha").get<double>();
            const Matrix& w = am.base.linear_weight(ad.target_path);
            ad.A = Matrix(ad.rank, w.cols());
            ad.B = Matrix(w.rows(), ad.rank);
            fill("adapters." + ad.target_path + ".A", ad.A);
            fill("adapters." + ad.target_path + ".B", ad.B);
            am.adapters.emplace(ad.target_path, std::move(ad));
        }
        am.refresh_all();
        out.adapted = std::move(am);
    }
    return out;
}

} // namespace leaklab

#endif
