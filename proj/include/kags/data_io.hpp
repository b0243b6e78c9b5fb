#pragma once

// File-based ingestion. Feature tensors live in a small binary container
// ("KAGF": magic, version, rank, u32 extents, little-endian float32 payload),
// datasets are described by a JSONL manifest of albums, and predictions are
// JSONL of album stories.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "kags/errors.hpp"
#include "kags/tensor.hpp"
#include "kags/vocab.hpp"

namespace kags {

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

inline std::uint16_t get_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline float get_f32(const unsigned char* p) {
    std::uint32_t bits = get_u32(p);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

inline std::string read_binary_file(const std::string& path, const char* what) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ValidationError(std::string(what) + ": cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_binary_file(const std::string& path, const std::string& bytes,
                              const char* what) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw ValidationError(std::string(what) + ": cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw ValidationError(std::string(what) + ": short write to " + path);
}

} // namespace detail

inline constexpr char kFeatureMagic[4] = {'K', 'A', 'G', 'F'};
inline constexpr std::uint16_t kFeatureVersion = 1;

inline std::string encode_feature(const Shape& shape, const std::vector<float>& data) {
    check_shape_valid("feature", shape);
    if (shape.size() > 8)
        throw ShapeError("feature: rank " + std::to_string(shape.size()) + " exceeds 8");
    if (data.size() != shape_numel(shape))
        throw ShapeError("feature: data length does not match shape " + shape_str(shape));
    std::string out;
    out.append(kFeatureMagic, 4);
    detail::put_u16(out, kFeatureVersion);
    out.push_back(static_cast<char>(shape.size()));
    for (std::size_t e : shape) {
        if (e > 0xffffffffull)
            throw ShapeError("feature: extent too large for the container");
        detail::put_u32(out, static_cast<std::uint32_t>(e));
    }
    for (float f : data) detail::put_f32(out, f);
    return out;
}

inline void write_feature_file(const std::string& path, const Shape& shape,
                               const std::vector<float>& data) {
    detail::write_binary_file(path, encode_feature(shape, data), "feature");
}

inline std::pair<Shape, std::vector<float>> decode_feature(const std::string& bytes,
                                                           const std::string& origin) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    std::size_t n = bytes.size();
    if (n < 7)
        throw FormatError("feature: " + origin + " truncated at byte " + std::to_string(n) +
                          ", header needs 7");
    if (std::memcmp(p, kFeatureMagic, 4) != 0)
        throw FormatError("feature: " + origin + " has bad magic bytes");
    std::uint16_t version = detail::get_u16(p + 4);
    if (version != kFeatureVersion)
        throw FormatError("feature: " + origin + " has unsupported version " +
                          std::to_string(version));
    std::size_t rank = p[6];
    if (rank == 0 || rank > 8)
        throw FormatError("feature: " + origin + " has invalid rank " + std::to_string(rank));
    std::size_t need = 7 + rank * 4;
    if (n < need)
        throw FormatError("feature: " + origin + " truncated at byte " + std::to_string(n) +
                          ", extents need " + std::to_string(need));
    Shape shape(rank);
    unsigned long long numel = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        std::uint32_t e = detail::get_u32(p + 7 + 4 * i);
        if (e == 0)
            throw FormatError("feature: " + origin + " has a zero extent");
        shape[i] = e;
        numel *= e;
        if (numel > (1ull << 34))
            throw FormatError("feature: " + origin + " declares an implausible element count");
    }
    std::size_t expected = need + static_cast<std::size_t>(numel) * 4;
    if (n != expected)
        throw FormatError("feature: " + origin + " payload is " + std::to_string(n - need) +
                          " bytes, expected " + std::to_string(expected - need));
    std::vector<float> data(static_cast<std::size_t>(numel));
    for (std::size_t i = 0; i < data.size(); ++i)
        data[i] = detail::get_f32(p + need + 4 * i);
    return {shape, data};
}

inline std::pair<Shape, std::vector<float>> read_feature_file(const std::string& path) {
    return decode_feature(detail::read_binary_file(path, "feature"), path);
}

template <typename S>
Tensor<S> load_feature_tensor(const std::string& path) {
    auto [shape, data] = read_feature_file(path);
    std::vector<S> converted(data.begin(), data.end());
    return Tensor<S>::leaf(std::move(shape), std::move(converted));
}

// ---------------------------------------------------------------------------
// manifest

struct ImageEntry {
    std::string image_id;
    std::string conv_path;
    std::string regions_path;
    std::vector<std::string> labels;
};

struct AlbumRecord {
    std::string album_id;
    std::vector<ImageEntry> images;
    std::vector<std::vector<std::string>> references; // story = one sentence per image
};

// JSONL, one album per line:
// {"album_id": ..., "images": [{"image_id", "conv", "regions", "labels"}...],
//  "references": [[sentence per image]...]}
// Feature paths are resolved relative to the manifest's directory and must
// exist. If expected_images > 0, album size and story lengths must match it.
inline std::vector<AlbumRecord> parse_manifest(const std::string& path, int expected_images) {
    std::ifstream in(path);
    if (!in)
        throw ValidationError("manifest: cannot open " + path);
    std::filesystem::path base = std::filesystem::path(path).parent_path();
    std::vector<AlbumRecord> albums;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("manifest: line " + std::to_string(lineno) + " of " + path +
                             " is not valid JSON: " + e.what());
        }
        AlbumRecord album;
        try {
            album.album_id = j.at("album_id").get<std::string>();
            for (const auto& ji : j.at("images")) {
                ImageEntry img;
                img.image_id = ji.at("image_id").get<std::string>();
                img.conv_path = (base / ji.at("conv").get<std::string>()).string();
                img.regions_path = (base / ji.at("regions").get<std::string>()).string();
                if (ji.contains("labels"))
                    img.labels = ji.at("labels").get<std::vector<std::string>>();
                album.images.push_back(std::move(img));
            }
            album.references =
                j.at("references").get<std::vector<std::vector<std::string>>>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("manifest: line " + std::to_string(lineno) + " of " + path +
                             ": " + e.what());
        }
        if (album.images.empty())
            throw ValidationError("manifest: album " + album.album_id + " has no images");
        if (album.references.empty())
            throw ValidationError("manifest: album " + album.album_id + " has no references");
        if (expected_images > 0) {
            if (album.images.size() != static_cast<std::size_t>(expected_images))
                throw ValidationError("manifest: album " + album.album_id + " has " +
                                      std::to_string(album.images.size()) + " images, expected " +
                                      std::to_string(expected_images));
            for (const auto& story : album.references)
                if (story.size() != static_cast<std::size_t>(expected_images))
                    throw ValidationError("manifest: album " + album.album_id +
                                          " has a story with " + std::to_string(story.size()) +
                                          " sentences, expected " +
                                          std::to_string(expected_images));
        }
        for (const auto& img : album.images) {
            for (const std::string& fp : {img.conv_path, img.regions_path})
                if (!std::filesystem::exists(fp))
                    throw ValidationError("manifest: album " + album.album_id +
                                          " references missing feature file " + fp);
        }
        albums.push_back(std::move(album));
    }
    if (albums.empty())
        throw ValidationError("manifest: " + path + " contains no albums");
    return albums;
}

template <typename S>
struct AlbumFeatures {
    std::vector<Tensor<S>> conv;    // per image, [h x w x raw]
    std::vector<Tensor<S>> regions; // per image, [m_boxes x raw]
    std::vector<std::vector<std::string>> labels;
};

template <typename S>
AlbumFeatures<S> load_album_features(const AlbumRecord& album, int expected_boxes) {
    AlbumFeatures<S> out;
    std::size_t raw_width = 0;
    for (const auto& img : album.images) {
        Tensor<S> conv = load_feature_tensor<S>(img.conv_path);
        if (conv.rank() != 3)
            throw FormatError("feature: " + img.conv_path + " should be [h x w x d], got " +
                              shape_str(conv.shape()));
        Tensor<S> regions = load_feature_tensor<S>(img.regions_path);
        if (regions.rank() != 2)
            throw FormatError("feature: " + img.regions_path + " should be [m x d], got " +
                              shape_str(regions.shape()));
        if (expected_boxes > 0 &&
            regions.rows() != static_cast<std::size_t>(expected_boxes))
            throw ValidationError("feature: " + img.regions_path + " has " +
                                  std::to_string(regions.rows()) + " regions, expected " +
                                  std::to_string(expected_boxes));
        if (conv.shape()[2] != regions.cols())
            throw ValidationError("feature: " + img.image_id +
                                  " conv and region widths disagree");
        if (raw_width == 0) raw_width = regions.cols();
        else if (regions.cols() != raw_width)
            throw ValidationError("feature: album " + album.album_id +
                                  " mixes feature widths");
        out.conv.push_back(std::move(conv));
        out.regions.push_back(std::move(regions));
        out.labels.push_back(img.labels);
    }
    return out;
}

// Applies a linear map to the trailing dimension of a rank-2 or rank-3 tensor.
template <typename S>
Tensor<S> project_feature(const Tensor<S>& x, const LinearParams<S>& p) {
    if (x.rank() == 2) return linear(x, p);
    if (x.rank() == 3) {
        std::size_t h = x.shape()[0], w = x.shape()[1], d = x.shape()[2];
        Tensor<S> flat = linear(reshape(x, {h * w, d}), p);
        return reshape(flat, {h, w, flat.cols()});
    }
    throw ShapeError("project_feature: expected rank 2 or 3, got " + shape_str(x.shape()));
}

// Token counts over every reference sentence of every album.
inline Vocabulary build_vocabulary(const std::vector<AlbumRecord>& albums,
                                   std::size_t min_count) {
    std::map<std::string, std::size_t> counts;
    for (const auto& album : albums)
        for (const auto& story : album.references)
            for (const auto& sentence : story)
                for (const auto& tok : tokenize(sentence)) ++counts[tok];
    return Vocabulary::from_counts(counts, min_count);
}

// ---------------------------------------------------------------------------
// predictions

struct PredictedStory {
    std::string album_id;
    std::vector<std::string> sentences;
};

inline void write_predictions(const std::string& path,
                              const std::vector<PredictedStory>& stories) {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw ValidationError("predictions: cannot open " + path + " for writing");
    for (const auto& s : stories) {
        nlohmann::ordered_json j;
        j["album_id"] = s.album_id;
        j["story"] = s.sentences;
        out << j.dump() << "\n";
    }
}

inline std::vector<PredictedStory> read_predictions(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ValidationError("predictions: cannot open " + path);
    std::vector<PredictedStory> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            PredictedStory s;
            s.album_id = j.at("album_id").get<std::string>();
            s.sentences = j.at("story").get<std::vector<std::string>>();
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("predictions: line " + std::to_string(lineno) + " of " + path +
                             ": " + e.what());
        }
    }
    if (out.empty())
        throw ValidationError("predictions: " + path + " contains no stories");
    return out;
}

} // namespace kags
