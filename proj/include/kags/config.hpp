#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "kags/errors.hpp"

namespace kags {

// Every knob a run needs. Serialized into checkpoints so a model can always
// be rebuilt exactly as it was trained.
struct RunConfig {
    int d_model = 1024;
    int d_hidden = 512;
    int n_heads = 8;
    int cca_layers = 6;
    int k_relations = 20;
    int m_boxes = 36;
    int n_images = 5;
    int beam_size = 3;
    double lr = 4e-4;
    double weight_decay = 5e-4;
    int batch_size = 50;
    int epochs = 21;
    int vocab_min_count = 3;
    int sop_reduced_channels = 0; // 0 means d_model / 8
    int max_sentence_len = 25;
    std::uint64_t seed = 0;
    std::string regional_ca_keys = "full";    // or "flattened"
    std::string flatten_activation = "relu";  // or "none"

    int sop_channels() const {
        return sop_reduced_channels > 0 ? sop_reduced_channels : d_model / 8;
    }

    void validate() const {
        auto positive = [](int v, const char* name) {
            if (v <= 0) throw ConfigError(std::string("config: ") + name + " must be positive");
        };
        positive(d_model, "d_model");
        positive(d_hidden, "d_hidden");
        positive(n_heads, "n_heads");
        positive(cca_layers, "cca_layers");
        positive(k_relations, "k_relations");
        positive(m_boxes, "m_boxes");
        positive(n_images, "n_images");
        positive(beam_size, "beam_size");
        positive(batch_size, "batch_size");
        positive(epochs, "epochs");
        positive(max_sentence_len, "max_sentence_len");
        if (vocab_min_count < 0)
            throw ConfigError("config: vocab_min_count must be non-negative");
        if (sop_reduced_channels < 0)
            throw ConfigError("config: sop_reduced_channels must be non-negative");
        if (d_model % n_heads != 0)
            throw ConfigError("config: n_heads=" + std::to_string(n_heads) +
                              " does not divide d_model=" + std::to_string(d_model));
        if (d_hidden % n_heads != 0)
            throw ConfigError("config: n_heads=" + std::to_string(n_heads) +
                              " does not divide d_hidden=" + std::to_string(d_hidden));
        if (sop_channels() <= 0)
            throw ConfigError("config: sop channel count must be positive");
        if (!(lr > 0.0)) throw ConfigError("config: lr must be positive");
        if (weight_decay < 0.0) throw ConfigError("config: weight_decay must be non-negative");
        if (regional_ca_keys != "full" && regional_ca_keys != "flattened")
            throw ConfigError("config: regional_ca_keys must be 'full' or 'flattened', got '" +
                              regional_ca_keys + "'");
        if (flatten_activation != "relu" && flatten_activation != "none")
            throw ConfigError("config: flatten_activation must be 'relu' or 'none', got '" +
                              flatten_activation + "'");
    }
};

namespace detail {

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object())
        throw ParseError("config: expected a JSON object");
    static const char* known[] = {
        "d_model", "d_hidden", "n_heads", "cca_layers", "k_relations", "m_boxes",
        "n_images", "beam_size", "lr", "weight_decay", "batch_size", "epochs",
        "vocab_min_count", "sop_reduced_channels", "max_sentence_len", "seed",
        "regional_ca_keys", "flatten_activation"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || (it.key() == k);
        if (!ok) throw ParseError("config: unknown key '" + it.key() + "'");
    }
    RunConfig c;
    try {
        detail::read_key(j, "d_model", c.d_model);
        detail::read_key(j, "d_hidden", c.d_hidden);
        detail::read_key(j, "n_heads", c.n_heads);
        detail::read_key(j, "cca_layers", c.cca_layers);
        detail::read_key(j, "k_relations", c.k_relations);
        detail::read_key(j, "m_boxes", c.m_boxes);
        detail::read_key(j, "n_images", c.n_images);
        detail::read_key(j, "beam_size", c.beam_size);
        detail::read_key(j, "lr", c.lr);
        detail::read_key(j, "weight_decay", c.weight_decay);
        detail::read_key(j, "batch_size", c.batch_size);
        detail::read_key(j, "epochs", c.epochs);
        detail::read_key(j, "vocab_min_count", c.vocab_min_count);
        detail::read_key(j, "sop_reduced_channels", c.sop_reduced_channels);
        detail::read_key(j, "max_sentence_len", c.max_sentence_len);
        detail::read_key(j, "seed", c.seed);
        detail::read_key(j, "regional_ca_keys", c.regional_ca_keys);
        detail::read_key(j, "flatten_activation", c.flatten_activation);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline nlohmann::ordered_json config_to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["d_model"] = c.d_model;
    j["d_hidden"] = c.d_hidden;
    j["n_heads"] = c.n_heads;
    j["cca_layers"] = c.cca_layers;
    j["k_relations"] = c.k_relations;
    j["m_boxes"] = c.m_boxes;
    j["n_images"] = c.n_images;
    j["beam_size"] = c.beam_size;
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["batch_size"] = c.batch_size;
    j["epochs"] = c.epochs;
    j["vocab_min_count"] = c.vocab_min_count;
    j["sop_reduced_channels"] = c.sop_reduced_channels;
    j["max_sentence_len"] = c.max_sentence_len;
    j["seed"] = c.seed;
    j["regional_ca_keys"] = c.regional_ca_keys;
    j["flatten_activation"] = c.flatten_activation;
    return j;
}

inline RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ValidationError("config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("config: " + path + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

} // namespace kags
