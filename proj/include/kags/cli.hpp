#pragma once

// Command line front end. Subcommands: synth, train, generate, eval,
// gradcheck, cam. Exit codes: 0 success, 1 bad input (paths, formats,
// configuration, arguments), 2 internal failure (numeric trouble, broken
// invariants, unexpected exceptions).

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kags/checkpoint.hpp"
#include "kags/config.hpp"
#include "kags/data_io.hpp"
#include "kags/errors.hpp"
#include "kags/gradcheck_suite.hpp"
#include "kags/knowledge.hpp"
#include "kags/metrics.hpp"
#include "kags/model.hpp"
#include "kags/synth.hpp"
#include "kags/trainer.hpp"

namespace kags {
namespace clidetail {

inline std::size_t thread_count(std::size_t jobs) {
    const char* env = std::getenv("KAGS_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    char* end = nullptr;
    unsigned long n = std::strtoul(env, &end, 10);
    if (end == nullptr || *end != '\0' || n == 0)
        throw ValidationError("KAGS_THREADS must be a positive integer, got '" +
                              std::string(env) + "'");
    return std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1));
}

inline std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

struct SynthOpts {
    std::string out;
    int albums = 4;
    int images = 5;
    int regions = 36;
    int grid = 7;
    int raw_dim = 2048;
    int refs = 1;
    std::uint64_t seed = 20240817;
};

inline int run_synth(const SynthOpts& o) {
    SynthSpec spec;
    spec.albums = o.albums;
    spec.n_images = o.images;
    spec.m_regions = o.regions;
    spec.grid = o.grid;
    spec.raw_dim = o.raw_dim;
    spec.refs = o.refs;
    spec.seed = o.seed;
    SynthPaths paths = generate_synthetic_dataset(spec, o.out);
    std::cout << "wrote " << paths.manifest << "\n";
    std::cout << "wrote " << paths.knowledge << "\n";
    std::cout << "features under " << paths.features_dir << "\n";
    return 0;
}

struct TrainOpts {
    std::string manifest;
    std::string knowledge;
    std::string out;
    std::string config;
    int epochs = -1;
    int batch_size = -1;
    double lr = -1.0;
    long long seed = -1;
};

inline int run_train(const TrainOpts& o) {
    RunConfig cfg;
    if (!o.config.empty()) cfg = load_config_file(o.config);
    if (o.epochs >= 0) cfg.epochs = o.epochs;
    if (o.batch_size >= 0) cfg.batch_size = o.batch_size;
    if (o.lr > 0) cfg.lr = o.lr;
    if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
    cfg.validate();

    auto records = parse_manifest(o.manifest, cfg.n_images);
    if (records.empty()) throw ValidationError("train: manifest lists no albums");
    KnowledgeGraph graph = load_knowledge_graph(o.knowledge);
    Vocabulary vocab =
        extend_vocabulary(build_vocabulary(records, cfg.vocab_min_count), graph);
    auto data = prepare_albums<float>(records, vocab, cfg.m_boxes);
    std::size_t raw_dim = data.front().features.regions.front().cols();

    KagsModel<float> model(cfg, vocab, raw_dim);
    Trainer<float> trainer(model, graph);

    std::filesystem::create_directories(o.out);
    std::string ckpt_path = (std::filesystem::path(o.out) / "checkpoint.kagc").string();
    std::string log_path = (std::filesystem::path(o.out) / "train_log.jsonl").string();
    std::ofstream log_out(log_path, std::ios::trunc);
    if (!log_out) throw ValidationError("train: cannot write " + log_path);

    std::cout << "training on " << data.size() << " albums, vocab " << vocab.size()
              << ", raw width " << raw_dim << "\n";
    for (int e = 0; e < cfg.epochs; ++e) {
        EpochLog log = trainer.run_epoch(data, e + 1);
        nlohmann::ordered_json j;
        j["epoch"] = log.epoch;
        j["mean_loss"] = log.mean_loss;
        j["accuracy"] = log.accuracy;
        j["tokens"] = log.tokens;
        j["seconds"] = log.seconds;
        log_out << j.dump() << "\n";
        log_out.flush();
        save_checkpoint(ckpt_path, trainer.snapshot(raw_dim));
        std::cout << "epoch " << log.epoch << "/" << cfg.epochs << "  loss "
                  << fmt("%.4f", log.mean_loss) << "  acc " << fmt("%.3f", log.accuracy)
                  << "  (" << fmt("%.1f", log.seconds) << "s)\n";
    }
    std::cout << "checkpoint: " << ckpt_path << "\n";
    return 0;
}

struct GenerateOpts {
    std::string checkpoint;
    std::string manifest;
    std::string knowledge;
    std::string out;
    int beam = 0;    // 0 means use the checkpoint config
    int max_len = 0; // ditto
};

inline int run_generate(const GenerateOpts& o) {
    CheckpointData data = load_checkpoint(o.checkpoint);
    KagsModel<float> model = model_from_checkpoint<float>(data);
    const RunConfig& cfg = model.config();
    auto records = parse_manifest(o.manifest, cfg.n_images);
    if (records.empty()) throw ValidationError("generate: manifest lists no albums");
    KnowledgeGraph graph = load_knowledge_graph(o.knowledge);
    std::size_t beam = o.beam > 0 ? o.beam : cfg.beam_size;
    std::size_t max_len = o.max_len > 0 ? o.max_len : cfg.max_sentence_len;

    std::vector<PredictedStory> stories(records.size());
    std::atomic<std::size_t> cursor{0};
    std::mutex fail_mutex;
    std::exception_ptr failure;
    auto worker = [&]() {
        try {
            while (true) {
                std::size_t i = cursor.fetch_add(1);
                if (i >= records.size()) break;
                AlbumFeatures<float> features =
                    load_album_features<float>(records[i], cfg.m_boxes);
                EncodedAlbum<float> enc =
                    model.encode(features, graph, ForwardMode::eval());
                auto g = model.generate(enc, beam, max_len);
                PredictedStory s;
                s.album_id = records[i].album_id;
                for (const auto& ids : g.sentences) s.sentences.push_back(model.detokenize(ids));
                stories[i] = std::move(s);
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(fail_mutex);
            if (!failure) failure = std::current_exception();
        }
    };

    std::size_t n_threads = thread_count(records.size());
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);

    write_predictions(o.out, stories);
    std::cout << "wrote " << o.out << " (" << stories.size() << " albums, beam " << beam
              << ")\n";
    return 0;
}

struct EvalOpts {
    std::string predictions;
    std::string manifest;
    std::string json_out;
    bool per_sentence = false;
};

inline int run_eval(const EvalOpts& o) {
    MetricReport report = evaluate_stories(o.predictions, o.manifest, o.per_sentence);
    std::cout << render_text_table(report);
    if (!o.json_out.empty()) {
        std::ofstream out(o.json_out, std::ios::trunc);
        if (!out) throw ValidationError("eval: cannot write " + o.json_out);
        out << report_to_json(report).dump(2) << "\n";
        std::cout << "wrote " << o.json_out << "\n";
    }
    return 0;
}

struct GradcheckOpts {
    std::string module;
    std::string op;
    std::uint64_t seed = 20240817;
    double step = 1e-5;
    double tol = 1e-4;
};

inline int run_gradcheck(const GradcheckOpts& o) {
    auto suite = build_gradcheck_suite();
    int ran = 0, failed = 0;
    for (const auto& check : suite) {
        if (!o.module.empty() && check.module != o.module) continue;
        if (!o.op.empty() && check.name != o.op) continue;
        ++ran;
        GradCheckReport r = check.run(o.seed, o.step, o.tol);
        if (!r.passed) ++failed;
        std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << check.module << "/" << check.name
                  << "  max_rel " << fmt("%.3e", r.max_rel_error) << "  ("
                  << r.element_count << " elements)\n";
    }
    if (ran == 0)
        throw ValidationError("gradcheck: no checks match module='" + o.module + "' op='" +
                              o.op + "'");
    std::cout << ran << " checks, " << (ran - failed) << " passed\n";
    return failed == 0 ? 0 : 1;
}

struct CamOpts {
    std::string checkpoint;
    std::string manifest;
    std::string knowledge;
    std::string album;
    std::string out;
    int image = 0;
};

inline int run_cam(const CamOpts& o) {
    CheckpointData data = load_checkpoint(o.checkpoint);
    KagsModel<float> model = model_from_checkpoint<float>(data);
    const RunConfig& cfg = model.config();
    auto records = parse_manifest(o.manifest, cfg.n_images);
    const AlbumRecord* record = nullptr;
    for (const auto& r : records)
        if (r.album_id == o.album) record = &r;
    if (record == nullptr)
        throw ValidationError("cam: album '" + o.album + "' not in manifest");
    if (o.image < 0 || o.image >= static_cast<int>(record->images.size()))
        throw ValidationError("cam: image index " + std::to_string(o.image) +
                              " out of range, album has " +
                              std::to_string(record->images.size()) + " images");
    KnowledgeGraph graph = load_knowledge_graph(o.knowledge);
    AlbumFeatures<float> features = load_album_features<float>(*record, cfg.m_boxes);
    EncodedAlbum<float> enc = model.encode(features, graph, ForwardMode::eval());
    Tensor<float> map = model.activation_map(enc, static_cast<std::size_t>(o.image));
    write_feature_file(o.out, map.shape(), map.values());
    std::cout << "wrote " << o.out << " " << shape_str(map.shape()) << "\n";
    return 0;
}

} // namespace clidetail

inline int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"knowledge augmented visual storytelling"};
    app.name("kags");
    app.require_subcommand(1);

    clidetail::SynthOpts so;
    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--out", so.out, "output directory")->required();
    synth->add_option("--albums", so.albums, "album count");
    synth->add_option("--images", so.images, "images per album");
    synth->add_option("--regions", so.regions, "region boxes per image");
    synth->add_option("--grid", so.grid, "conv grid side");
    synth->add_option("--raw-dim", so.raw_dim, "raw feature width");
    synth->add_option("--refs", so.refs, "reference stories per album");
    synth->add_option("--seed", so.seed, "random seed");

    clidetail::TrainOpts to;
    CLI::App* train = app.add_subcommand("train", "train a model");
    train->add_option("--manifest", to.manifest, "dataset manifest (jsonl)")->required();
    train->add_option("--knowledge", to.knowledge, "knowledge graph (tsv)")->required();
    train->add_option("--out", to.out, "output directory")->required();
    train->add_option("--config", to.config, "config json");
    train->add_option("--epochs", to.epochs, "override epoch count");
    train->add_option("--batch-size", to.batch_size, "override batch size");
    train->add_option("--lr", to.lr, "override learning rate");
    train->add_option("--seed", to.seed, "override seed");

    clidetail::GenerateOpts go;
    CLI::App* gen = app.add_subcommand("generate", "write stories for a manifest");
    gen->add_option("--checkpoint", go.checkpoint, "checkpoint file")->required();
    gen->add_option("--manifest", go.manifest, "dataset manifest (jsonl)")->required();
    gen->add_option("--knowledge", go.knowledge, "knowledge graph (tsv)")->required();
    gen->add_option("--out", go.out, "predictions file (jsonl)")->required();
    gen->add_option("--beam", go.beam, "override beam width");
    gen->add_option("--max-len", go.max_len, "override sentence length cap");

    clidetail::EvalOpts eo;
    CLI::App* eval = app.add_subcommand("eval", "score predictions against references");
    eval->add_option("--predictions", eo.predictions, "predictions file (jsonl)")->required();
    eval->add_option("--manifest", eo.manifest, "dataset manifest (jsonl)")->required();
    eval->add_option("--json", eo.json_out, "also write scores as json");
    eval->add_flag("--per-sentence", eo.per_sentence, "score sentence pairs, not stories");

    clidetail::GradcheckOpts ko;
    CLI::App* grad = app.add_subcommand("gradcheck", "numeric gradient checks");
    grad->add_option("--module", ko.module, "filter: autodiff, attention, gsm, decoder");
    grad->add_option("--op", ko.op, "filter by check name");
    grad->add_option("--seed", ko.seed, "random seed");
    grad->add_option("--step", ko.step, "finite difference step");
    grad->add_option("--tol", ko.tol, "relative error tolerance");

    clidetail::CamOpts co;
    CLI::App* cam = app.add_subcommand("cam", "write an activation map for one image");
    cam->add_option("--checkpoint", co.checkpoint, "checkpoint file")->required();
    cam->add_option("--manifest", co.manifest, "dataset manifest (jsonl)")->required();
    cam->add_option("--knowledge", co.knowledge, "knowledge graph (tsv)")->required();
    cam->add_option("--album", co.album, "album id")->required();
    cam->add_option("--image", co.image, "image index within the album");
    cam->add_option("--out", co.out, "output map file")->required();

    try {
        std::vector<const char*> argv;
        argv.push_back("kags");
        for (const auto& a : args) argv.push_back(a.c_str());
        app.parse(static_cast<int>(argv.size()), argv.data());
        if (app.got_subcommand(synth)) return clidetail::run_synth(so);
        if (app.got_subcommand(train)) return clidetail::run_train(to);
        if (app.got_subcommand(gen)) return clidetail::run_generate(go);
        if (app.got_subcommand(eval)) return clidetail::run_eval(eo);
        if (app.got_subcommand(grad)) return clidetail::run_gradcheck(ko);
        if (app.got_subcommand(cam)) return clidetail::run_cam(co);
        return 1;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
}

inline int run_cli(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args);
}

} // namespace kags
