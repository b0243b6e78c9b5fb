#pragma once

// Checkpoint container ("KAGC"): magic, version, a JSON metadata block
// (config, vocabulary, raw feature width, optimizer step), a sequence of
// named float32 tensor records, and a trailing CRC32 of everything before it.
// Loads are validated end to end; a flipped bit anywhere is a located error,
// never garbage tensors.

#include <array>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kags/config.hpp"
#include "kags/data_io.hpp"
#include "kags/errors.hpp"
#include "kags/model.hpp"
#include "kags/vocab.hpp"

namespace kags {

namespace detail {

constexpr std::array<std::uint32_t, 256> make_crc32_table() {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1u) ? (0xEDB88320u ^ (c >> 1)) : (c >> 1);
        t[i] = c;
    }
    return t;
}

inline std::uint32_t crc32(const unsigned char* p, std::size_t n) {
    static constexpr auto table = make_crc32_table();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xffu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

} // namespace detail

inline constexpr char kCheckpointMagic[4] = {'K', 'A', 'G', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct CheckpointData {
    RunConfig config;
    Vocabulary vocab;
    std::int64_t step = 0;
    std::size_t raw_dim = 0;
    std::vector<CheckpointRecord> records;

    const CheckpointRecord* find(const std::string& name) const {
        for (const auto& r : records)
            if (r.name == name) return &r;
        return nullptr;
    }
};

inline std::string encode_checkpoint(const CheckpointData& data) {
    std::string out;
    out.append(kCheckpointMagic, 4);
    detail::put_u16(out, kCheckpointVersion);

    nlohmann::ordered_json meta;
    meta["config"] = config_to_json(data.config);
    meta["vocab"] = data.vocab.tokens();
    meta["step"] = data.step;
    meta["raw_dim"] = data.raw_dim;
    std::string meta_str = meta.dump();
    detail::put_u32(out, static_cast<std::uint32_t>(meta_str.size()));
    out += meta_str;

    for (const auto& r : data.records) {
        if (r.name.empty() || r.name.size() > 0xffff)
            throw ContractError("checkpoint: record name length out of range");
        if (r.shape.size() > 8)
            throw ContractError("checkpoint: record " + r.name + " has rank above 8");
        if (r.data.size() != shape_numel(r.shape))
            throw ContractError("checkpoint: record " + r.name + " data/shape mismatch");
        detail::put_u16(out, static_cast<std::uint16_t>(r.name.size()));
        out += r.name;
        out.push_back(static_cast<char>(r.shape.size()));
        for (std::size_t e : r.shape) detail::put_u32(out, static_cast<std::uint32_t>(e));
        for (float f : r.data) detail::put_f32(out, f);
    }

    std::uint32_t crc =
        detail::crc32(reinterpret_cast<const unsigned char*>(out.data()), out.size());
    detail::put_u32(out, crc);
    return out;
}

inline void save_checkpoint(const std::string& path, const CheckpointData& data) {
    detail::write_binary_file(path, encode_checkpoint(data), "checkpoint");
}

inline CheckpointData decode_checkpoint(const std::string& bytes, const std::string& origin) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    std::size_t n = bytes.size();
    if (n < 14)
        throw FormatError("checkpoint: " + origin + " truncated at byte " + std::to_string(n));
    if (std::memcmp(p, kCheckpointMagic, 4) != 0)
        throw FormatError("checkpoint: " + origin + " has bad magic bytes");
    std::uint16_t version = detail::get_u16(p + 4);
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: " + origin + " has unsupported version " +
                          std::to_string(version));

    std::uint32_t stored_crc = detail::get_u32(p + n - 4);
    std::uint32_t actual_crc = detail::crc32(p, n - 4);
    if (stored_crc != actual_crc)
        throw FormatError("checkpoint: " + origin + " checksum mismatch, file is corrupt");

    std::size_t off = 6;
    std::size_t body_end = n - 4;
    auto need = [&](std::size_t count, const char* what) {
        if (off + count > body_end)
            throw FormatError("checkpoint: " + origin + " truncated at byte " +
                              std::to_string(off) + " while reading " + what);
    };

    need(4, "metadata length");
    std::uint32_t meta_len = detail::get_u32(p + off);
    off += 4;
    need(meta_len, "metadata");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(bytes.substr(off, meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint: " + origin + " has invalid metadata JSON: " + e.what());
    }
    off += meta_len;

    CheckpointData data;
    try {
        data.config = config_from_json(meta.at("config"));
        data.vocab = Vocabulary::from_tokens(meta.at("vocab").get<std::vector<std::string>>());
        data.step = meta.at("step").get<std::int64_t>();
        data.raw_dim = meta.at("raw_dim").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint: " + origin + " metadata is incomplete: " + e.what());
    }

    while (off < body_end) {
        need(2, "record name length");
        std::uint16_t name_len = detail::get_u16(p + off);
        off += 2;
        need(name_len, "record name");
        std::string name = bytes.substr(off, name_len);
        off += name_len;
        need(1, "record rank");
        std::size_t rank = p[off];
        ++off;
        if (rank == 0 || rank > 8)
            throw FormatError("checkpoint: " + origin + " record " + name +
                              " has invalid rank " + std::to_string(rank));
        need(rank * 4, "record extents");
        Shape shape(rank);
        unsigned long long numel = 1;
        for (std::size_t i = 0; i < rank; ++i) {
            shape[i] = detail::get_u32(p + off + 4 * i);
            if (shape[i] == 0)
                throw FormatError("checkpoint: " + origin + " record " + name +
                                  " has a zero extent");
            numel *= shape[i];
            if (numel > (1ull << 34))
                throw FormatError("checkpoint: " + origin + " record " + name +
                                  " declares an implausible element count");
        }
        off += rank * 4;
        need(static_cast<std::size_t>(numel) * 4, "record payload");
        CheckpointRecord rec;
        rec.name = std::move(name);
        rec.shape = std::move(shape);
        rec.data.resize(static_cast<std::size_t>(numel));
        for (std::size_t i = 0; i < rec.data.size(); ++i)
            rec.data[i] = detail::get_f32(p + off + 4 * i);
        off += rec.data.size() * 4;
        for (const auto& existing : data.records)
            if (existing.name == rec.name)
                throw FormatError("checkpoint: " + origin + " has duplicate record " + rec.name);
        data.records.push_back(std::move(rec));
    }
    return data;
}

inline CheckpointData load_checkpoint(const std::string& path) {
    return decode_checkpoint(detail::read_binary_file(path, "checkpoint"), path);
}

// First config key whose value differs, if any.
inline std::optional<std::string> config_diff_key(const RunConfig& a, const RunConfig& b) {
    nlohmann::ordered_json ja = config_to_json(a);
    nlohmann::ordered_json jb = config_to_json(b);
    for (auto it = ja.begin(); it != ja.end(); ++it)
        if (jb.at(it.key()) != it.value()) return it.key();
    return std::nullopt;
}

// Snapshot of every store entry (parameters and batch-norm statistics) in
// registration order; optimizer records are appended by the trainer.
template <typename S>
CheckpointData snapshot_store(const ParameterStore<S>& store, const RunConfig& config,
                              const Vocabulary& vocab, std::size_t raw_dim,
                              std::int64_t step) {
    CheckpointData data;
    data.config = config;
    data.vocab = vocab;
    data.raw_dim = raw_dim;
    data.step = step;
    for (const auto& e : store.entries()) {
        CheckpointRecord rec;
        rec.name = e.name;
        rec.shape = e.tensor.shape();
        rec.data.reserve(e.tensor.numel());
        for (S v : e.tensor.values()) rec.data.push_back(static_cast<float>(v));
        data.records.push_back(std::move(rec));
    }
    return data;
}

// Copies checkpoint values into an existing store. Every store entry must be
// present with a matching shape; optimizer records ("adam.*") are ignored
// here and unknown non-optimizer records are an error.
template <typename S>
void restore_store(ParameterStore<S>& store, const CheckpointData& data) {
    for (auto& e : store.entries()) {
        const CheckpointRecord* rec = data.find(e.name);
        if (!rec)
            throw FormatError("checkpoint: missing record " + e.name);
        if (rec->shape != e.tensor.shape())
            throw FormatError("checkpoint: record " + e.name + " has shape " +
                              shape_str(rec->shape) + ", model expects " +
                              shape_str(e.tensor.shape()));
        auto& vals = e.tensor.values();
        for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<S>(rec->data[i]);
    }
    for (const auto& rec : data.records) {
        if (rec.name.rfind("adam.", 0) == 0) continue;
        if (!store.find(rec.name))
            throw FormatError("checkpoint: record " + rec.name +
                              " does not correspond to any model parameter");
    }
}

// Rebuilds the model a checkpoint was saved from and loads its weights.
template <typename S>
KagsModel<S> model_from_checkpoint(const CheckpointData& data) {
    KagsModel<S> model(data.config, data.vocab, data.raw_dim);
    restore_store(model.params(), data);
    return model;
}

} // namespace kags
