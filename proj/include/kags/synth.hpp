#pragma once

// Synthetic desk-scale dataset: random feature tensors plus label-driven
// sentences, so a model can be trained, overfit, and evaluated end to end
// with no external data. Everything derives from one seed; rerunning with the
// same spec produces byte-identical files.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kags/data_io.hpp"
#include "kags/errors.hpp"
#include "kags/rng.hpp"

namespace kags {

struct SynthSpec {
    int albums = 4;
    int n_images = 5;
    int m_regions = 36;
    int grid = 7;     // conv maps are grid x grid
    int raw_dim = 2048;
    int refs = 1;     // reference stories per album
    std::uint64_t seed = 0;

    void validate() const {
        if (albums <= 0 || n_images <= 0 || m_regions <= 0 || grid <= 0 || raw_dim <= 0 ||
            refs <= 0)
            throw ValidationError("synth: all size fields must be positive");
    }
};

struct SynthPaths {
    std::string manifest;
    std::string knowledge;
    std::string features_dir;
};

namespace synthwords {

inline const std::vector<std::string>& subjects() {
    static const std::vector<std::string> v = {"dog", "cat", "girl", "boy", "man",
                                               "woman", "bird", "horse", "baby", "artist"};
    return v;
}
inline const std::vector<std::string>& places() {
    static const std::vector<std::string> v = {"park",   "beach",  "house", "garden",
                                               "market", "forest", "lake",  "street"};
    return v;
}
inline const std::vector<std::string>& verbs() {
    static const std::vector<std::string> v = {"walked", "played", "smiled", "jumped",
                                               "waited", "danced", "rested", "sang"};
    return v;
}
inline const std::vector<std::string>& adjectives() {
    static const std::vector<std::string> v = {"happy", "quiet", "bright",
                                               "small", "tired", "proud"};
    return v;
}

} // namespace synthwords

// Fixed commonsense rows covering every subject and place, with seeded
// weights. Written before the albums so the token set is independent of
// album count.
inline std::string render_knowledge_tsv(Rng& rng) {
    std::string out;
    out += "# synthetic commonsense triples: head\trelation\ttail\tweight\n";
    auto weight = [&rng] {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.1f", rng.uniform(0.5, 9.9));
        return std::string(buf);
    };
    for (const auto& s : synthwords::subjects()) {
        out += s + "\tisa\tliving_thing\t" + weight() + "\n";
        out += s + "\tcapableof\tmoving\t" + weight() + "\n";
    }
    for (const auto& p : synthwords::places()) {
        out += p + "\tisa\tplace\t" + weight() + "\n";
        out += p + "\tatlocation\toutdoors\t" + weight() + "\n";
    }
    return out;
}

namespace detail {

inline std::vector<float> random_floats(Rng& rng, std::size_t n) {
    std::vector<float> v(n);
    for (auto& f : v) f = static_cast<float>(rng.normal());
    return v;
}

struct ImagePlan {
    std::string subject;
    std::string place;
};

inline std::string render_sentence(Rng& rng, const ImagePlan& plan) {
    const auto& verbs = synthwords::verbs();
    const auto& adjs = synthwords::adjectives();
    const std::string& verb = verbs[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(verbs.size()) - 1))];
    const std::string& adj = adjs[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(adjs.size()) - 1))];
    switch (rng.uniform_int(0, 2)) {
        case 0:
            return "the " + adj + " " + plan.subject + " " + verb + " in the " + plan.place + " .";
        case 1:
            return "the " + plan.subject + " " + verb + " at the " + plan.place + " .";
        default:
            return "a " + adj + " " + plan.subject + " " + verb + " near the " + plan.place + " .";
    }
}

} // namespace detail

// Generates the whole dataset under out_dir: features/*.kagf, manifest.jsonl,
// knowledge.tsv. Within an album every image gets a distinct subject and a
// distinct place, so sentences are discriminative.
inline SynthPaths generate_synthetic_dataset(const SynthSpec& spec, const std::string& out_dir) {
    spec.validate();
    namespace fs = std::filesystem;
    fs::path root(out_dir);
    fs::create_directories(root / "features");

    Rng rng = Rng::stream(spec.seed, "synth");

    SynthPaths paths;
    paths.manifest = (root / "manifest.jsonl").string();
    paths.knowledge = (root / "knowledge.tsv").string();
    paths.features_dir = (root / "features").string();

    {
        std::ofstream out(paths.knowledge, std::ios::trunc);
        if (!out) throw ValidationError("synth: cannot write " + paths.knowledge);
        out << render_knowledge_tsv(rng);
    }

    std::ofstream manifest(paths.manifest, std::ios::trunc);
    if (!manifest) throw ValidationError("synth: cannot write " + paths.manifest);

    const auto& subjects = synthwords::subjects();
    const auto& places = synthwords::places();
    std::size_t h = static_cast<std::size_t>(spec.grid);
    std::size_t raw = static_cast<std::size_t>(spec.raw_dim);
    std::size_t boxes = static_cast<std::size_t>(spec.m_regions);

    for (int a = 0; a < spec.albums; ++a) {
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "album_%04d", a);
        std::string album_id(idbuf);

        // Distinct subjects/places per image, drawn without replacement.
        std::vector<std::size_t> subj_order(subjects.size());
        std::vector<std::size_t> place_order(places.size());
        for (std::size_t i = 0; i < subj_order.size(); ++i) subj_order[i] = i;
        for (std::size_t i = 0; i < place_order.size(); ++i) place_order[i] = i;
        rng.shuffle(subj_order);
        rng.shuffle(place_order);

        nlohmann::ordered_json jalbum;
        jalbum["album_id"] = album_id;
        jalbum["images"] = nlohmann::ordered_json::array();
        std::vector<detail::ImagePlan> plans;
        for (int i = 0; i < spec.n_images; ++i) {
            detail::ImagePlan plan;
            plan.subject = subjects[subj_order[static_cast<std::size_t>(i) % subjects.size()]];
            plan.place = places[place_order[static_cast<std::size_t>(i) % places.size()]];
            plans.push_back(plan);

            std::string stem = album_id + "_img_" + std::to_string(i);
            std::string conv_rel = "features/" + stem + "_conv.kagf";
            std::string regions_rel = "features/" + stem + "_regions.kagf";
            write_feature_file((root / conv_rel).string(), {h, h, raw},
                               detail::random_floats(rng, h * h * raw));
            write_feature_file((root / regions_rel).string(), {boxes, raw},
                               detail::random_floats(rng, boxes * raw));

            nlohmann::ordered_json jimg;
            jimg["image_id"] = stem;
            jimg["conv"] = conv_rel;
            jimg["regions"] = regions_rel;
            jimg["labels"] = {plan.subject, plan.place};
            jalbum["images"].push_back(std::move(jimg));
        }

        jalbum["references"] = nlohmann::ordered_json::array();
        for (int r = 0; r < spec.refs; ++r) {
            nlohmann::ordered_json story = nlohmann::ordered_json::array();
            for (const auto& plan : plans) story.push_back(detail::render_sentence(rng, plan));
            jalbum["references"].push_back(std::move(story));
        }
        manifest << jalbum.dump() << "\n";
    }
    manifest.close();
    return paths;
}

} // namespace kags
