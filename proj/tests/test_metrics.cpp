#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kags/data_io.hpp"
#include "kags/metrics.hpp"

using namespace kags;
using Catch::Approx;

namespace fs = std::filesystem;

namespace {

EvalPair pair_of(const std::string& cand, const std::vector<std::string>& refs) {
    EvalPair p;
    p.candidate = tokenize(cand);
    for (const auto& r : refs) p.references.push_back(tokenize(r));
    return p;
}

} // namespace

TEST_CASE("perfect candidates score perfectly") {
    std::vector<EvalPair> corpus = {
        pair_of("the red dog ran quickly .", {"the red dog ran quickly ."}),
        pair_of("a small cat slept deeply", {"a small cat slept deeply"}),
    };
    MetricReport r = score_corpus(corpus);
    REQUIRE(r.bleu1 == Approx(1.0).margin(1e-12));
    REQUIRE(r.bleu4 == Approx(1.0).margin(1e-12));
    REQUIRE(r.rouge_l == Approx(1.0).margin(1e-12));
    REQUIRE(r.cider == Approx(10.0).margin(1e-9));
}

TEST_CASE("bleu and rouge match hand-computed values") {
    std::vector<EvalPair> corpus = {pair_of("the cat sat", {"the cat sat down"})};
    // brevity penalty exp(1 - 4/3), all matched n-gram precisions equal 1
    REQUIRE(bleu(corpus, 1) == Approx(0.716531310574).margin(1e-9));
    REQUIRE(bleu(corpus, 2) == Approx(0.716531310574).margin(1e-9));
    REQUIRE(bleu(corpus, 3) == Approx(0.716531310574).margin(1e-9));
    // no 4-gram exists in a 3-token candidate
    REQUIRE(bleu(corpus, 4) == 0.0);
    // recall 3/4, precision 1, beta 1.2
    REQUIRE(rouge_l(corpus) == Approx(0.835616438356).margin(1e-9));
}

TEST_CASE("clipping caps candidate n-gram credit at reference counts") {
    std::vector<EvalPair> corpus = {pair_of("the the the the", {"the cat"})};
    // only one 'the' is creditable out of four; candidate is longer, no penalty
    REQUIRE(bleu(corpus, 1) == Approx(0.25).margin(1e-12));
}

TEST_CASE("the closest reference length drives the brevity penalty") {
    // candidate length 2; references of length 2 and 9: closest is 2, no penalty
    EvalPair p;
    p.candidate = tokenize("green light");
    p.references = {tokenize("green light"),
                    tokenize("the long reference sentence that keeps going on")};
    REQUIRE(bleu({p}, 1) == Approx(1.0).margin(1e-12));
}

TEST_CASE("disjoint candidates score zero") {
    std::vector<EvalPair> corpus = {pair_of("alpha beta gamma", {"delta epsilon zeta"})};
    REQUIRE(bleu(corpus, 1) == 0.0);
    REQUIRE(bleu(corpus, 4) == 0.0);
    REQUIRE(rouge_l(corpus) == 0.0);
}

TEST_CASE("metric argument contracts") {
    REQUIRE_THROWS_AS(score_corpus({}), ValidationError);
    std::vector<EvalPair> one = {pair_of("a b", {"a b"})};
    REQUIRE_THROWS_AS(cider_d(one), ValidationError); // needs corpus statistics
    REQUIRE_THROWS_AS(bleu(one, 0), ValidationError);
    REQUIRE_THROWS_AS(bleu(one, 10), ValidationError);
    EvalPair no_refs;
    no_refs.candidate = tokenize("a b");
    REQUIRE_THROWS_AS(bleu({no_refs}, 1), ValidationError);
}

TEST_CASE("the twenty-entry fixture reproduces its frozen scores") {
    std::string path = std::string(KAGS_REPO_DIR) + "/tests/fixtures/metrics_20.json";
    std::ifstream in(path);
    REQUIRE(in.good());
    nlohmann::json j = nlohmann::json::parse(in);

    std::vector<EvalPair> corpus;
    for (const auto& je : j.at("entries")) {
        EvalPair p;
        p.candidate = je.at("candidate").get<std::vector<std::string>>();
        p.references = je.at("references").get<std::vector<std::vector<std::string>>>();
        corpus.push_back(std::move(p));
    }
    REQUIRE(corpus.size() == 20);
    MetricReport r = score_corpus(corpus);
    const auto& want = j.at("expected");
    REQUIRE(r.bleu1 == Approx(want.at("bleu1").get<double>()).margin(1e-4));
    REQUIRE(r.bleu2 == Approx(want.at("bleu2").get<double>()).margin(1e-4));
    REQUIRE(r.bleu3 == Approx(want.at("bleu3").get<double>()).margin(1e-4));
    REQUIRE(r.bleu4 == Approx(want.at("bleu4").get<double>()).margin(1e-4));
    REQUIRE(r.rouge_l == Approx(want.at("rouge_l").get<double>()).margin(1e-4));
    REQUIRE(r.cider == Approx(want.at("cider").get<double>()).margin(1e-4));
}

TEST_CASE("story evaluation joins predictions to albums by id") {
    std::vector<AlbumRecord> albums(2);
    albums[0].album_id = "A";
    albums[0].images.resize(2);
    albums[0].references = {{"the red dog ran quickly .", "the bright park hummed gently ."}};
    albums[1].album_id = "B";
    albums[1].images.resize(2);
    albums[1].references = {{"a small cat slept deeply", "warm waves rolled over stones"}};

    std::vector<PredictedStory> perfect(2);
    perfect[0].album_id = "A";
    perfect[0].sentences = albums[0].references[0];
    perfect[1].album_id = "B";
    perfect[1].sentences = albums[1].references[0];

    SECTION("identical stories score perfectly at the story level") {
        auto corpus = build_eval_corpus(perfect, albums, false);
        REQUIRE(corpus.size() == 2);
        MetricReport r = score_corpus(corpus);
        REQUIRE(r.bleu4 == Approx(1.0).margin(1e-12));
        REQUIRE(r.cider == Approx(10.0).margin(1e-9));
    }

    SECTION("per-sentence pairing splits each story") {
        auto corpus = build_eval_corpus(perfect, albums, true);
        REQUIRE(corpus.size() == 4);
    }

    SECTION("join errors are loud") {
        auto dup = perfect;
        dup[1].album_id = "A";
        REQUIRE_THROWS_AS(build_eval_corpus(dup, albums, false), ValidationError);

        auto missing = perfect;
        missing.pop_back();
        REQUIRE_THROWS_AS(build_eval_corpus(missing, albums, false), ValidationError);

        auto extra = perfect;
        extra.push_back(perfect[0]);
        extra.back().album_id = "C";
        REQUIRE_THROWS_AS(build_eval_corpus(extra, albums, false), ValidationError);
    }

    SECTION("the file-level entry point agrees") {
        fs::path dir = fs::temp_directory_path() / "kags_metrics_eval";
        fs::remove_all(dir);
        fs::create_directories(dir / "features");
        for (const std::string stem : {"a0", "a1", "b0", "b1"}) {
            write_feature_file((dir / "features" / (stem + ".conv.kagf")).string(), {1, 1, 2},
                               {0.1f, 0.2f});
            write_feature_file((dir / "features" / (stem + ".reg.kagf")).string(), {2, 2},
                               {0.1f, 0.2f, 0.3f, 0.4f});
        }
        auto img = [](const std::string& stem) {
            return "{\"image_id\":\"" + stem + "\",\"conv\":\"features/" + stem +
                   ".conv.kagf\",\"regions\":\"features/" + stem + ".reg.kagf\"}";
        };
        std::ofstream mf(dir / "manifest.jsonl");
        mf << "{\"album_id\":\"A\",\"images\":[" << img("a0") << "," << img("a1")
           << "],\"references\":[[\"the red dog ran quickly .\","
              "\"the bright park hummed gently .\"]]}\n"
           << "{\"album_id\":\"B\",\"images\":[" << img("b0") << "," << img("b1")
           << "],\"references\":[[\"a small cat slept deeply\","
              "\"warm waves rolled over stones\"]]}\n";
        mf.close();
        write_predictions((dir / "pred.jsonl").string(), perfect);

        MetricReport r = evaluate_stories((dir / "pred.jsonl").string(),
                                          (dir / "manifest.jsonl").string(), false);
        REQUIRE(r.bleu4 == Approx(1.0).margin(1e-12));
        REQUIRE(r.rouge_l == Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("reports render as a table and as json") {
    MetricReport r;
    r.bleu1 = 0.5;
    r.bleu4 = 0.25;
    r.rouge_l = 0.3;
    r.cider = 0.8;
    std::string table = render_text_table(r);
    REQUIRE(table.find("BLEU-1") != std::string::npos);
    REQUIRE(table.find("50.0") != std::string::npos);
    REQUIRE(table.find("METEOR") != std::string::npos); // not computed, shown as a dash
    REQUIRE(table.find("CIDEr") != std::string::npos);

    auto j = report_to_json(r);
    REQUIRE(j.at("bleu1").get<double>() == Approx(50.0));
    REQUIRE(j.at("bleu4").get<double>() == Approx(25.0));
    REQUIRE(j.at("cider").get<double>() == Approx(80.0));
}
