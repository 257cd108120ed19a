#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "acam/backbone.hpp"
#include "acam/contrast.hpp"
#include "acam/tensor.hpp"

namespace acam {

// Weight checkpoint container.
//
// Layout (all integers little-endian):
//   bytes 0..3   magic "ACKP"
//   bytes 4..7   format version (u32), currently 1
//   bytes 8..15  manifest length in bytes (u64)
//   manifest     UTF-8 JSON: {"meta": {...}, "tensors": [{"name": str,
//                "shape": [u64...], "dtype": "f32"|"f64", "offset": u64}]}
//   payload      raw little-endian float data; each tensor starts at
//                `offset` bytes into the payload
//
// Offsets are contiguous in manifest order. Save/load round-trips are
// bit-exact.

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

struct Checkpoint {
    nlohmann::json meta;
    NamedTensors tensors;

    const Tensor<float>& at(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw std::runtime_error("checkpoint has no tensor named '" + name + "'");
    }
};

inline void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                            const NamedTensors& tensors) {
    nlohmann::json manifest;
    manifest["meta"] = meta;
    manifest["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        nlohmann::json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["dtype"] = "f32";
        entry["offset"] = offset;
        manifest["tensors"].push_back(entry);
        offset += t.size() * sizeof(float);
    }
    std::string mstr = manifest.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f.write("ACKP", 4);
    std::uint32_t version = 1;
    std::uint64_t mlen = mstr.size();
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&mlen), 8);
    f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto& [name, t] : tensors)
        f.write(reinterpret_cast<const char*>(t.data().data()),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    std::uint32_t version = 0;
    std::uint64_t mlen = 0;
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&mlen), 8);
    if (!f || std::memcmp(magic, "ACKP", 4) != 0)
        throw std::runtime_error(path + ": not an ACKP checkpoint");
    if (version != 1)
        throw std::runtime_error(path + ": unsupported checkpoint version " +
                                 std::to_string(version));
    std::string mstr(mlen, '\0');
    f.read(mstr.data(), static_cast<std::streamsize>(mlen));
    auto manifest = nlohmann::json::parse(mstr);

    Checkpoint ckpt;
    ckpt.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
        Shape shape = entry.at("shape").get<Shape>();
        if (entry.at("dtype").get<std::string>() != "f32")
            throw std::runtime_error(path + ": unsupported dtype for tensor '" +
                                     entry.at("name").get<std::string>() + "'");
        std::vector<float> data(shape_numel(shape));
        f.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(float)));
        if (!f) throw std::runtime_error(path + ": truncated checkpoint payload");
        ckpt.tensors.emplace_back(entry.at("name").get<std::string>(),
                                  Tensor<float>::from_data(shape, std::move(data)));
    }
    return ckpt;
}

// --- model <-> named-tensor packing ---

inline NamedTensors pack_classifier(Classifier<float>& c) {
    NamedTensors out;
    out.emplace_back("stem.w", c.stem.w.detach_copy());
    out.emplace_back("stem.b", c.stem.b.detach_copy());
    for (std::size_t i = 0; i < c.downs.size(); ++i) {
        out.emplace_back("down" + std::to_string(i + 1) + ".w", c.downs[i].w.detach_copy());
        out.emplace_back("down" + std::to_string(i + 1) + ".b", c.downs[i].b.detach_copy());
    }
    for (std::size_t s = 0; s < c.blocks.size(); ++s)
        for (std::size_t j = 0; j < c.blocks[s].size(); ++j)
            for (std::size_t k = 0; k < c.blocks[s][j].size(); ++k) {
                std::string base = "stage" + std::to_string(s) + ".block" +
                                   std::to_string(j) + ".conv" + std::to_string(k);
                out.emplace_back(base + ".w", c.blocks[s][j][k].w.detach_copy());
                out.emplace_back(base + ".b", c.blocks[s][j][k].b.detach_copy());
            }
    out.emplace_back("head.w", c.head_w.detach_copy());
    out.emplace_back("head.b", c.head_b.detach_copy());
    return out;
}

inline nlohmann::json backbone_config_json(const BackboneConfig& cfg) {
    return {{"name", cfg.name},
            {"in_channels", cfg.in_channels},
            {"num_classes", cfg.num_classes},
            {"widths", cfg.widths},
            {"blocks_per_stage", cfg.blocks_per_stage},
            {"use_residual", cfg.use_residual}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
    BackboneConfig cfg;
    cfg.name = j.at("name").get<std::string>();
    cfg.in_channels = j.at("in_channels").get<std::size_t>();
    cfg.num_classes = j.at("num_classes").get<std::size_t>();
    cfg.widths = j.at("widths").get<std::vector<std::size_t>>();
    cfg.blocks_per_stage = j.at("blocks_per_stage").get<std::size_t>();
    cfg.use_residual = j.at("use_residual").get<bool>();
    return cfg;
}

inline Classifier<float> unpack_classifier(const Checkpoint& ckpt) {
    BackboneConfig cfg = backbone_config_from_json(ckpt.meta.at("backbone"));
    Classifier<float> c = build_backbone<float>(cfg, 0);
    auto restore = [&](Tensor<float>& dst, const std::string& name) {
        const auto& src = ckpt.at(name);
        if (src.shape() != dst.shape())
            throw std::runtime_error("checkpoint tensor '" + name + "' has shape " +
                                     shape_str(src.shape()) + ", expected " +
                                     shape_str(dst.shape()));
        dst = src.detach_copy();
    };
    restore(c.stem.w, "stem.w");
    restore(c.stem.b, "stem.b");
    for (std::size_t i = 0; i < c.downs.size(); ++i) {
        restore(c.downs[i].w, "down" + std::to_string(i + 1) + ".w");
        restore(c.downs[i].b, "down" + std::to_string(i + 1) + ".b");
    }
    for (std::size_t s = 0; s < c.blocks.size(); ++s)
        for (std::size_t j = 0; j < c.blocks[s].size(); ++j)
            for (std::size_t k = 0; k < c.blocks[s][j].size(); ++k) {
                std::string base = "stage" + std::to_string(s) + ".block" +
                                   std::to_string(j) + ".conv" + std::to_string(k);
                restore(c.blocks[s][j][k].w, base + ".w");
                restore(c.blocks[s][j][k].b, base + ".b");
            }
    restore(c.head_w, "head.w");
    restore(c.head_b, "head.b");
    return c;
}

inline NamedTensors pack_predictor(PredictorWeights<float>& w) {
    return {{"acam.conv1.w", w.conv1_w.detach_copy()},
            {"acam.conv1.b", w.conv1_b.detach_copy()},
            {"acam.conv2.w", w.conv2_w.detach_copy()},
            {"acam.conv2.b", w.conv2_b.detach_copy()},
            {"acam.fc.w", w.fc_w.detach_copy()},
            {"acam.fc.b", w.fc_b.detach_copy()}};
}

inline PredictorWeights<float> unpack_predictor(const Checkpoint& ckpt) {
    PredictorWeights<float> w;
    w.conv1_w = ckpt.at("acam.conv1.w").detach_copy();
    w.conv1_b = ckpt.at("acam.conv1.b").detach_copy();
    w.conv2_w = ckpt.at("acam.conv2.w").detach_copy();
    w.conv2_b = ckpt.at("acam.conv2.b").detach_copy();
    w.fc_w = ckpt.at("acam.fc.w").detach_copy();
    w.fc_b = ckpt.at("acam.fc.b").detach_copy();
    return w;
}

} // namespace acam
