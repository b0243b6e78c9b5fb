// End-to-end acceptance suite. Each numbered check exercises one contract the
// library is expected to honour; run with no arguments for all eight, or pass
// check numbers to run a subset. One [PASS]/[FAIL] line is printed per check
// and the exit status is the number of failures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include <json.hpp>

#include "kags/beam.hpp"
#include "kags/checkpoint.hpp"
#include "kags/cli.hpp"
#include "kags/data_io.hpp"
#include "kags/decoder.hpp"
#include "kags/gradcheck_suite.hpp"
#include "kags/metrics.hpp"
#include "kags/model.hpp"
#include "kags/synth.hpp"
#include "kags/trainer.hpp"

namespace fs = std::filesystem;
using namespace kags;

namespace {

struct Outcome {
    bool ok = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

fs::path scratch_dir(const std::string& leaf) {
    fs::path dir = fs::temp_directory_path() / "kags_acceptance" / leaf;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("acceptance: cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

template <typename S>
Tensor<S> random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
    std::vector<S> v(rows * cols);
    for (auto& x : v) x = static_cast<S>(rng.uniform(-scale, scale));
    return Tensor<S>::leaf({rows, cols}, std::move(v));
}

template <typename S>
Tensor<S> permute_rows(const Tensor<S>& x, const std::vector<std::size_t>& perm) {
    std::size_t cols = x.cols();
    std::vector<S> out(perm.size() * cols);
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t j = 0; j < cols; ++j)
            out[i * cols + j] = x.values()[perm[i] * cols + j];
    return Tensor<S>::leaf({perm.size(), cols}, std::move(out));
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw OracleError("acceptance: comparing tensors of different shapes");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst,
                         std::fabs(static_cast<double>(a.values()[i]) -
                                   static_cast<double>(b.values()[i])));
    return worst;
}

// Eigenvalues of a small dense symmetric matrix via cyclic Jacobi rotations.
std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double apq = a[p * n + q];
                if (std::fabs(apq) < 1e-18) continue;
                double theta = 0.5 * std::atan2(2.0 * apq, a[q * n + q] - a[p * n + p]);
                double c = std::cos(theta), s = std::sin(theta);
                for (std::size_t k = 0; k < n; ++k) {
                    double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
    return eig;
}

// ---------------------------------------------------------------------------
// 1. analytic gradients against central finite differences

Outcome check_gradients() {
    auto t0 = Clock::now();
    auto suite = build_gradcheck_suite();
    std::size_t failed = 0;
    double worst = 0.0;
    std::string failed_names;
    for (const auto& spec : suite) {
        GradCheckReport rep = spec.run(20240817, 1e-5, 1e-4);
        worst = std::max(worst, rep.max_rel_error);
        if (!rep.passed) {
            ++failed;
            failed_names += " " + spec.module + "/" + spec.name;
        }
    }
    double secs = seconds_since(t0);
    Outcome out;
    out.ok = failed == 0 && secs < 120.0;
    out.detail = std::to_string(suite.size()) + " ops, max rel err " + num(worst) + ", " +
                 num(secs) + "s";
    if (failed) out.detail += ", failing:" + failed_names;
    if (secs >= 120.0) out.detail += ", over the 120s budget";
    return out;
}

// ---------------------------------------------------------------------------
// 2. structural invariances

Outcome check_invariances() {
    Rng rng = Rng::stream(20240817, "init");
    std::vector<std::string> problems;
    auto expect = [&](bool cond, const std::string& what) {
        if (!cond) problems.push_back(what);
    };

    {
        // probability rows out of softmax and attention, in float32
        Tensor<float> x = random_matrix<float>(rng, 8, 33, 3.0);
        Tensor<float> s = softmax_rows(x);
        double worst = 0.0;
        for (std::size_t i = 0; i < 8; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 33; ++j) sum += s.values()[i * 33 + j];
            worst = std::max(worst, std::fabs(sum - 1.0));
        }
        expect(worst <= 1e-6, "softmax row sums off by " + num(worst));

        Tensor<float> q = random_matrix<float>(rng, 6, 16, 1.0);
        Tensor<float> k = random_matrix<float>(rng, 10, 16, 1.0);
        Tensor<float> v = random_matrix<float>(rng, 10, 16, 1.0);
        AttnTrace<float> trace;
        scaled_dot_attention(q, k, v, &trace);
        worst = 0.0;
        for (const auto& w : trace.weights) {
            for (std::size_t i = 0; i < w.rows(); ++i) {
                double sum = 0.0;
                for (std::size_t j = 0; j < w.cols(); ++j) sum += w.values()[i * w.cols() + j];
                worst = std::max(worst, std::fabs(sum - 1.0));
            }
        }
        expect(worst <= 1e-6, "attention row sums off by " + num(worst));
    }

    {
        // self attention commutes with row permutation
        ParameterStore<float> store;
        auto unit = init::make_attn_unit<float>(store, rng, "sa", 16, 16, 2);
        Tensor<float> f = random_matrix<float>(rng, 6, 16, 0.8);
        std::vector<std::size_t> perm{4, 2, 0, 5, 1, 3};
        Tensor<float> direct = permute_rows(self_attention_unit(f, unit, ForwardMode::eval()), perm);
        Tensor<float> shuffled = self_attention_unit(permute_rows(f, perm), unit, ForwardMode::eval());
        double diff = max_abs_diff(direct, shuffled);
        expect(diff <= 1e-5, "self-attention permutation gap " + num(diff));
    }

    {
        // cross attention ignores the order of its keys/values
        ParameterStore<float> store;
        auto unit = init::make_attn_unit<float>(store, rng, "ca", 16, 16, 2);
        Tensor<float> q = random_matrix<float>(rng, 3, 16, 0.8);
        Tensor<float> kv = random_matrix<float>(rng, 7, 16, 0.8);
        std::vector<std::size_t> perm{6, 0, 3, 1, 5, 2, 4};
        Tensor<float> a = cross_attention_unit(q, kv, unit, ForwardMode::eval());
        Tensor<float> b = cross_attention_unit(q, permute_rows(kv, perm), unit, ForwardMode::eval());
        double diff = max_abs_diff(a, b);
        expect(diff <= 1e-5, "cross-attention key order gap " + num(diff));
    }

    {
        // second-order pooling ignores spatial order
        ParameterStore<float> store;
        auto sop = init::make_sop<float>(store, rng, "sop", 12, 3);
        std::size_t h = 3, w = 4, d = 12, cells = h * w;
        Tensor<float> x = random_matrix<float>(rng, cells, d, 0.9);
        std::vector<std::size_t> perm(cells);
        for (std::size_t i = 0; i < cells; ++i) perm[i] = (i * 5 + 3) % cells;
        Tensor<float> y = permute_rows(x, perm);
        Tensor<float> a = sop_forward(reshape(x, {h, w, d}), sop);
        Tensor<float> b = sop_forward(reshape(y, {h, w, d}), sop);
        double diff = max_abs_diff(a, b);
        expect(diff <= 1e-5, "sop spatial permutation gap " + num(diff));

        // and the album-level stage ignores image order
        auto sop2 = init::make_sop<float>(store, rng, "sop2", 8, 2);
        auto sop3 = init::make_sop<float>(store, rng, "sop3", 8, 2);
        std::vector<Tensor<float>> maps;
        for (int i = 0; i < 3; ++i)
            maps.push_back(reshape(random_matrix<float>(rng, 4, 8, 0.9), {2, 2, 8}));
        Tensor<float> fwd = gsm_forward(maps, sop2, sop3);
        std::vector<Tensor<float>> rot{maps[2], maps[0], maps[1]};
        Tensor<float> rotated = gsm_forward(rot, sop2, sop3);
        diff = max_abs_diff(fwd, rotated);
        expect(diff <= 1e-5, "gsm album order gap " + num(diff));
    }

    {
        // the pooled covariance is symmetric and positive semi-definite
        ParameterStore<double> store;
        auto sop = init::make_sop<double>(store, rng, "cov", 10, 4);
        Tensor<double> x = random_matrix<double>(rng, 9, 10, 1.1);
        Tensor<double> y = linear(x, sop.reduce);
        Tensor<double> cov = matmul(transpose(y), y);
        std::size_t c = 4;
        double asym = 0.0;
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < c; ++j)
                asym = std::max(asym, std::fabs(cov.values()[i * c + j] - cov.values()[j * c + i]));
        expect(asym <= 1e-6, "covariance asymmetry " + num(asym));

        std::vector<double> dense(cov.values().begin(), cov.values().end());
        auto eig = symmetric_eigenvalues(dense, c);
        double min_eig = *std::min_element(eig.begin(), eig.end());
        expect(min_eig >= -1e-6, "covariance min eigenvalue " + num(min_eig));
    }

    Outcome out;
    out.ok = problems.empty();
    if (out.ok) {
        out.detail = "row sums, permutation laws, covariance spectrum all within tolerance";
    } else {
        for (std::size_t i = 0; i < problems.size(); ++i)
            out.detail += (i ? "; " : "") + problems[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// 3. a small model memorizes a 4-album synthetic set

Outcome check_memorization() {
    auto t0 = Clock::now();
    fs::path dir = scratch_dir("memorize");

    SynthSpec spec;
    spec.albums = 4;
    spec.n_images = 5;
    spec.m_regions = 8;
    spec.grid = 4;
    spec.raw_dim = 32;
    spec.refs = 1;
    spec.seed = 20240817;
    SynthPaths paths = generate_synthetic_dataset(spec, dir.string());

    auto records = parse_manifest(paths.manifest, spec.n_images);
    KnowledgeGraph graph = load_knowledge_graph(paths.knowledge);

    RunConfig cfg;
    cfg.d_model = 64;
    cfg.d_hidden = 32;
    cfg.n_heads = 2;
    cfg.cca_layers = 2;
    cfg.k_relations = 5;
    cfg.m_boxes = 8;
    cfg.n_images = 5;
    cfg.beam_size = 1;
    cfg.lr = 2e-3;
    cfg.weight_decay = 0.0;
    cfg.batch_size = 4;
    cfg.epochs = 500;
    cfg.vocab_min_count = 0;
    cfg.max_sentence_len = 25;
    cfg.seed = 20240817;
    cfg.validate();

    Vocabulary vocab = extend_vocabulary(build_vocabulary(records, cfg.vocab_min_count), graph);
    auto data = prepare_albums<float>(records, vocab, cfg.m_boxes);
    std::size_t raw_dim = data.front().features.regions.front().cols();
    KagsModel<float> model(cfg, vocab, raw_dim);
    Trainer<float> trainer(model, graph);

    // Probed at the trained operating point: normalization layers see each
    // album's rows normalized by that album's own batch statistics, which is
    // what the optimizer actually fit. A single running average cannot stand
    // in for four albums whose eight-row region sets have distinct statistics,
    // so eval-mode stats would measure the estimator gap, not memorization.
    auto probe = [&]() {
        std::size_t tokens = 0, correct = 0;
        int exact = 0;
        for (auto& album : data) {
            auto enc = model.encode(album.features, graph, ForwardMode::train_frozen());
            auto r = model.teacher_forced_loss(enc, album.references[0], ForwardMode::train_frozen());
            tokens += r.tokens;
            correct += r.correct;
            auto story = model.generate(enc, 1, static_cast<std::size_t>(cfg.max_sentence_len));
            if (story.sentences == album.references[0]) ++exact;
        }
        double acc = static_cast<double>(correct) / static_cast<double>(tokens);
        return std::make_pair(acc, exact);
    };

    double acc = 0.0;
    int exact = 0;
    int epochs_used = 0;
    for (int e = 1; e <= cfg.epochs; ++e) {
        trainer.run_epoch(data, e);
        epochs_used = e;
        if (e % 25 == 0) {
            std::tie(acc, exact) = probe();
            if (acc >= 0.95 && exact >= 3) break;
        }
    }
    if (acc < 0.95 || exact < 3) std::tie(acc, exact) = probe();

    double secs = seconds_since(t0);
    Outcome out;
    out.ok = acc >= 0.95 && exact >= 3 && secs < 300.0;
    out.detail = "vocab " + std::to_string(vocab.size()) + ", " + std::to_string(epochs_used) +
                 " epochs, teacher-forced acc " + num(acc) + ", " + std::to_string(exact) +
                 "/4 stories reproduced, " + num(secs) + "s";
    return out;
}

// ---------------------------------------------------------------------------
// 4. beam search equivalences

struct TableMachine {
    std::map<std::vector<int>, std::vector<double>> table;
    std::vector<double> fallback{-0.5, -2.0, -2.0};

    const std::vector<double>& logprobs(const std::vector<int>& prefix) const {
        auto it = table.find(prefix);
        return it == table.end() ? fallback : it->second;
    }
};

void enumerate_sequences(const TableMachine& m, std::vector<int>& prefix, double acc,
                         std::size_t max_len, std::vector<GenResult>& out) {
    const auto& lp = m.logprobs(prefix);
    if (prefix.size() == max_len) {
        out.push_back({prefix, acc}); // truncated: no end-marker bonus
        return;
    }
    out.push_back({prefix, acc + lp[0]}); // stop here
    for (int tok = 1; tok < static_cast<int>(lp.size()); ++tok) {
        prefix.push_back(tok);
        enumerate_sequences(m, prefix, acc + lp[static_cast<std::size_t>(tok)], max_len, out);
        prefix.pop_back();
    }
}

Outcome check_beam() {
    int identical = 0, monotone = 0;
    const int trials = 100;
    const std::size_t d = 8, hidden = 4, heads = 2, vsize = 12, max_len = 8;
    for (int trial = 0; trial < trials; ++trial) {
        Rng rng = Rng::stream(1000 + static_cast<std::uint64_t>(trial), "init");
        ParameterStore<float> store;
        DecoderParams<float> p;
        p.d_model = d;
        p.hidden = hidden;
        p.lstm_regional = init::make_lstm<float>(store, rng, "lr", 3 * d, hidden);
        p.lstm_global = init::make_lstm<float>(store, rng, "lg", 3 * d, hidden);
        p.ca_regional = init::make_attn_unit<float>(store, rng, "cr", hidden, d, heads);
        p.ca_global = init::make_attn_unit<float>(store, rng, "cg", hidden, d, heads);
        p.embed_regional = init::make_linear<float>(store, rng, "er", hidden, d);
        p.embed_global = init::make_linear<float>(store, rng, "eg", hidden, d);
        p.fuse = init::make_linear<float>(store, rng, "fu", d + hidden, d);
        p.out_proj = init::make_linear<float>(store, rng, "out", d, vsize);
        Tensor<float> embedding = init::xavier<float>(rng, vsize, d);

        IndicatorVectors<float> ind;
        ind.knowledge = random_matrix<float>(rng, 1, d, 0.8);
        ind.regional = random_matrix<float>(rng, 1, d, 0.8);
        ind.global_ctx = random_matrix<float>(rng, 1, d, 0.8);
        Tensor<float> rows = random_matrix<float>(rng, 3, d, 0.8);
        ForwardMode mode = ForwardMode::eval();

        auto step = [&](const DecoderState<float>& s) {
            auto [logits, next] = decode_step(s, ind, rows, p, mode);
            Tensor<float> logp = log_softmax_rows(logits);
            StepResult<DecoderState<float>> r;
            r.logprobs.assign(logp.values().begin(), logp.values().end());
            r.state = std::move(next);
            return r;
        };
        auto advance = [&](DecoderState<float>& s, int tok) {
            s.w_prev = embedding_rows(embedding, {tok});
        };
        auto start = [&]() {
            return init_decoder_state(p, embedding_rows(embedding, {Vocabulary::bos_id}));
        };

        GenResult greedy = greedy_search(start(), step, advance, Vocabulary::eos_id, max_len);
        GenResult beam1 = beam_search(start(), step, advance, Vocabulary::eos_id, max_len, 1);
        GenResult beam3 = beam_search(start(), step, advance, Vocabulary::eos_id, max_len, 3);
        if (beam1.tokens == greedy.tokens) ++identical;
        if (beam3.logprob >= greedy.logprob - 1e-9) ++monotone;
    }

    // delayed-reward toy model where greedy is suboptimal
    TableMachine machine;
    machine.table[{}] = {-9.0, -1.0, -1.1};
    machine.table[{1}] = {-3.0, -3.0, -3.0};
    machine.table[{2}] = {-0.1, -9.0, -9.0};
    auto tm_step = [&](const std::vector<int>& prefix) {
        StepResult<std::vector<int>> r;
        r.logprobs = machine.logprobs(prefix);
        r.state = prefix;
        return r;
    };
    auto tm_advance = [](std::vector<int>& prefix, int tok) { prefix.push_back(tok); };

    std::vector<GenResult> all;
    std::vector<int> scratch;
    enumerate_sequences(machine, scratch, 0.0, 3, all);
    GenResult best = all.front();
    for (const auto& cand : all) {
        if (cand.logprob > best.logprob + 1e-12) best = cand;
        else if (std::fabs(cand.logprob - best.logprob) <= 1e-12 &&
                 std::lexicographical_compare(cand.tokens.begin(), cand.tokens.end(),
                                              best.tokens.begin(), best.tokens.end()))
            best = cand;
    }
    GenResult beam2 = beam_search(std::vector<int>{}, tm_step, tm_advance, 0, 3, 2);
    GenResult toy_greedy = greedy_search(std::vector<int>{}, tm_step, tm_advance, 0, 3);
    bool toy_ok = beam2.tokens == best.tokens &&
                  std::fabs(beam2.logprob - best.logprob) <= 1e-12 &&
                  toy_greedy.logprob < best.logprob - 1e-9;

    Outcome out;
    out.ok = identical == trials && monotone == trials && toy_ok;
    out.detail = "beam1==greedy " + std::to_string(identical) + "/" + std::to_string(trials) +
                 ", beam3>=greedy " + std::to_string(monotone) + "/" + std::to_string(trials) +
                 ", toy beam2 " + (toy_ok ? "matches exhaustive optimum" : "MISSES optimum");
    return out;
}

// ---------------------------------------------------------------------------
// 5. text metrics against frozen oracles

Outcome check_metrics() {
    std::string path = std::string(KAGS_REPO_DIR) + "/tests/fixtures/metrics_20.json";
    std::ifstream in(path);
    if (!in) throw ValidationError("acceptance: missing fixture " + path);
    nlohmann::json j;
    in >> j;

    std::vector<EvalPair> corpus;
    for (const auto& entry : j.at("entries")) {
        EvalPair pair;
        pair.candidate = entry.at("candidate").get<std::vector<std::string>>();
        for (const auto& ref : entry.at("references"))
            pair.references.push_back(ref.get<std::vector<std::string>>());
        corpus.push_back(std::move(pair));
    }
    const auto& want = j.at("expected");

    struct Row {
        const char* name;
        double got;
        double want;
    };
    std::vector<Row> rows{
        {"bleu1", bleu(corpus, 1), want.at("bleu1").get<double>()},
        {"bleu2", bleu(corpus, 2), want.at("bleu2").get<double>()},
        {"bleu3", bleu(corpus, 3), want.at("bleu3").get<double>()},
        {"bleu4", bleu(corpus, 4), want.at("bleu4").get<double>()},
        {"rouge_l", rouge_l(corpus), want.at("rouge_l").get<double>()},
        {"cider", cider_d(corpus), want.at("cider").get<double>()},
    };
    double worst = 0.0;
    std::string bad;
    for (const auto& r : rows) {
        double gap = std::fabs(r.got - r.want);
        worst = std::max(worst, gap);
        if (gap > 1e-4) bad += std::string(" ") + r.name + " off by " + num(gap);
    }

    // hand-computed pair
    EvalPair hand;
    hand.candidate = tokenize("the cat sat");
    hand.references.push_back(tokenize("the cat sat down"));
    double b1 = bleu({hand}, 1);
    double rl = rouge_l({hand});
    double b1_gap = std::fabs(b1 - std::exp(-1.0 / 3.0));
    double rl_gap = std::fabs(rl - 0.8356);
    if (b1_gap > 1e-4) bad += " short-candidate bleu1 off by " + num(b1_gap);
    if (rl_gap > 1e-4) bad += " short-candidate rouge off by " + num(rl_gap);

    Outcome out;
    out.ok = bad.empty();
    out.detail = out.ok ? "fixture corpus worst gap " + num(worst) + ", hand cases within 1e-4"
                        : "mismatches:" + bad;
    return out;
}

// ---------------------------------------------------------------------------
// 6. binary formats round trip and fail loudly when damaged

Outcome check_formats() {
    fs::path dir = scratch_dir("formats");
    std::string bad;

    {
        // feature file: write/read identity, bit for bit
        Shape shape{2, 3, 4};
        std::vector<float> data(24);
        for (std::size_t i = 0; i < data.size(); ++i)
            data[i] = static_cast<float>(i) * 0.37f - 1.2f;
        fs::path file = dir / "grid.kagf";
        write_feature_file(file.string(), shape, data);
        auto [rt_shape, rt_data] = read_feature_file(file.string());
        if (rt_shape != shape || rt_data != data) bad += " feature round trip not bitwise;";
        if (encode_feature(shape, data) != slurp(file)) bad += " feature bytes differ on disk;";
    }

    {
        // checkpoint: save/load identity, bit for bit
        RunConfig cfg;
        cfg.d_model = 8;
        cfg.d_hidden = 4;
        cfg.n_heads = 2;
        cfg.cca_layers = 1;
        cfg.k_relations = 2;
        cfg.m_boxes = 2;
        cfg.n_images = 1;
        cfg.vocab_min_count = 0;
        Vocabulary vocab =
            Vocabulary::from_tokens({"<pad>", "<bos>", "<eos>", "<unk>", "dog", "ran", "."});
        KagsModel<float> model(cfg, vocab, 6);
        fs::path file = dir / "model.kagc";
        CheckpointData snap = snapshot_store(model.params(), cfg, vocab, 6, 3);
        save_checkpoint(file.string(), snap);
        CheckpointData back = load_checkpoint(file.string());
        if (encode_checkpoint(back) != slurp(file)) bad += " checkpoint round trip not bitwise;";
    }

    {
        // every corruption is met with a located error, not a crash
        std::string kagf = encode_feature({2, 2}, {1.f, 2.f, 3.f, 4.f});
        struct Damage {
            const char* label;
            std::string bytes;
        };
        std::vector<Damage> wounds;
        std::string t = kagf;
        t[0] = 'X';
        wounds.push_back({"feature bad magic", t});
        wounds.push_back({"feature header cut", kagf.substr(0, 5)});
        wounds.push_back({"feature payload cut", kagf.substr(0, kagf.size() - 3)});
        t = kagf;
        t[4] = 9;
        wounds.push_back({"feature unknown version", t});
        t = kagf;
        t[7] = t[8] = t[9] = t[10] = 0;
        wounds.push_back({"feature zero extent", t});
        for (const auto& w : wounds) {
            try {
                decode_feature(w.bytes, "fixture");
                bad += std::string(" ") + w.label + " was accepted;";
            } catch (const FormatError&) {
            } catch (const std::exception& e) {
                bad += std::string(" ") + w.label + " raised the wrong family: " + e.what() + ";";
            }
        }

        RunConfig cfg;
        cfg.d_model = 8;
        cfg.d_hidden = 4;
        cfg.n_heads = 2;
        cfg.cca_layers = 1;
        cfg.k_relations = 2;
        cfg.m_boxes = 2;
        cfg.n_images = 1;
        Vocabulary vocab =
            Vocabulary::from_tokens({"<pad>", "<bos>", "<eos>", "<unk>", "dog", "ran", "."});
        KagsModel<float> model(cfg, vocab, 6);
        std::string kagc =
            encode_checkpoint(snapshot_store(model.params(), cfg, vocab, 6, 1));
        std::vector<Damage> cpt;
        t = kagc;
        t[kagc.size() / 2] = static_cast<char>(t[kagc.size() / 2] ^ 0x20);
        cpt.push_back({"checkpoint flipped byte", t});
        cpt.push_back({"checkpoint truncated", kagc.substr(0, kagc.size() / 4)});
        t = kagc;
        t[1] = 'Z';
        cpt.push_back({"checkpoint bad magic", t});
        for (const auto& w : cpt) {
            try {
                decode_checkpoint(w.bytes, "fixture");
                bad += std::string(" ") + w.label + " was accepted;";
            } catch (const FormatError&) {
            } catch (const std::exception& e) {
                bad += std::string(" ") + w.label + " raised the wrong family: " + e.what() + ";";
            }
        }
    }

    Outcome out;
    out.ok = bad.empty();
    out.detail = out.ok ? "bitwise round trips, 8 corruptions all rejected with format errors"
                        : bad;
    return out;
}

// ---------------------------------------------------------------------------
// 7. the full pipeline is deterministic under a fixed seed

Outcome check_determinism() {
    fs::path base = scratch_dir("determinism");

    RunConfig cfg;
    cfg.d_model = 16;
    cfg.d_hidden = 8;
    cfg.n_heads = 2;
    cfg.cca_layers = 1;
    cfg.k_relations = 3;
    cfg.m_boxes = 4;
    cfg.n_images = 3;
    cfg.beam_size = 2;
    cfg.lr = 4e-4;
    cfg.batch_size = 2;
    cfg.epochs = 5;
    cfg.vocab_min_count = 0;
    cfg.max_sentence_len = 12;
    cfg.seed = 4242;
    cfg.validate();
    fs::path cfg_path = base / "config.json";
    {
        std::ofstream out(cfg_path);
        out << config_to_json(cfg).dump(2) << "\n";
    }

    auto run_pipeline = [&](const std::string& tag) {
        fs::path dir = base / tag;
        fs::path data = dir / "data";
        fs::path run = dir / "run";
        auto call = [&](std::vector<std::string> args) {
            // The tool runs in-process; park its progress chatter so the
            // acceptance report stays one line per criterion.
            std::fflush(stdout);
            int saved = dup(1);
            int devnull = open("/dev/null", O_WRONLY);
            dup2(devnull, 1);
            int rc = run_cli(args);
            std::fflush(stdout);
            dup2(saved, 1);
            close(saved);
            close(devnull);
            if (rc != 0)
                throw OracleError("acceptance: pipeline step '" + args[0] + "' exited with " +
                                  std::to_string(rc));
        };
        call({"synth", "--out", data.string(), "--albums", "4", "--images", "3", "--regions",
              "4", "--grid", "3", "--raw-dim", "16", "--refs", "1", "--seed", "777"});
        std::string manifest = (data / "manifest.jsonl").string();
        std::string knowledge = (data / "knowledge.tsv").string();
        call({"train", "--manifest", manifest, "--knowledge", knowledge, "--config",
              cfg_path.string(), "--out", run.string()});
        call({"generate", "--checkpoint", (run / "checkpoint.kagc").string(), "--manifest",
              manifest, "--knowledge", knowledge, "--out", (dir / "pred.jsonl").string()});
        call({"eval", "--predictions", (dir / "pred.jsonl").string(), "--manifest", manifest,
              "--json", (dir / "metrics.json").string()});
        return dir;
    };

    fs::path first = run_pipeline("a");
    fs::path second = run_pipeline("b");

    struct Artifact {
        const char* label;
        fs::path rel;
    };
    std::vector<Artifact> artifacts{
        {"checkpoint", fs::path("run") / "checkpoint.kagc"},
        {"predictions", "pred.jsonl"},
        {"metrics", "metrics.json"},
    };
    std::string bad;
    for (const auto& a : artifacts)
        if (slurp(first / a.rel) != slurp(second / a.rel))
            bad += std::string(" ") + a.label + " differs;";

    Outcome out;
    out.ok = bad.empty();
    out.detail = out.ok ? "checkpoint, predictions and metrics byte-identical across two runs"
                        : bad;
    return out;
}

// ---------------------------------------------------------------------------
// 8. the full-width configuration trains one step

Outcome check_full_width() {
    auto t0 = Clock::now();
    fs::path dir = scratch_dir("full_width");

    SynthSpec spec;
    spec.albums = 1;
    spec.n_images = 5;
    spec.m_regions = 36;
    spec.grid = 7;
    spec.raw_dim = 2048;
    spec.refs = 1;
    spec.seed = 5;
    SynthPaths paths = generate_synthetic_dataset(spec, dir.string());
    auto records = parse_manifest(paths.manifest, spec.n_images);
    KnowledgeGraph graph = load_knowledge_graph(paths.knowledge);

    RunConfig cfg; // stock widths: d 1024, hidden 512, 8 heads, 6 cascade layers, K 20, M 36
    cfg.vocab_min_count = 0;
    Vocabulary vocab = extend_vocabulary(build_vocabulary(records, cfg.vocab_min_count), graph);
    auto data = prepare_albums<float>(records, vocab, cfg.m_boxes);

    KagsModel<float> model(cfg, vocab, static_cast<std::size_t>(spec.raw_dim));
    auto enc = model.encode(data.front().features, graph, ForwardMode::train());
    auto loss = model.teacher_forced_loss(enc, data.front().references[0], ForwardMode::train());
    backward(loss.loss);
    double per_token = static_cast<double>(loss.loss.item()) / static_cast<double>(loss.tokens);
    double gnorm = global_grad_norm(model.params());
    double secs = seconds_since(t0);

    Outcome out;
    out.ok = std::isfinite(per_token) && gnorm > 0.0 && std::isfinite(gnorm);
    out.detail = std::to_string(model.parameter_count()) + " parameters, loss/token " +
                 num(per_token) + ", grad norm " + num(gnorm) + ", " + num(secs) + "s";
    return out;
}

struct Check {
    int id;
    const char* label;
    Outcome (*fn)();
};

const std::vector<Check>& checks() {
    static const std::vector<Check> table{
        {1, "gradients match finite differences", check_gradients},
        {2, "structural invariances hold", check_invariances},
        {3, "small model memorizes the synthetic set", check_memorization},
        {4, "beam search honours its equivalences", check_beam},
        {5, "metrics match frozen oracles", check_metrics},
        {6, "binary formats round trip and reject damage", check_formats},
        {7, "seeded pipeline is byte-deterministic", check_determinism},
        {8, "full-width configuration trains one step", check_full_width},
    };
    return table;
}

} // namespace

int main(int argc, char** argv) {
    std::vector<int> selected;
    for (int i = 1; i < argc; ++i) {
        int id = std::atoi(argv[i]);
        if (id < 1 || id > static_cast<int>(checks().size())) {
            std::fprintf(stderr, "unknown check '%s' (valid: 1..%zu)\n", argv[i],
                         checks().size());
            return 2;
        }
        selected.push_back(id);
    }
    if (selected.empty())
        for (const auto& c : checks()) selected.push_back(c.id);

    int failures = 0;
    for (int id : selected) {
        const Check& c = checks()[static_cast<std::size_t>(id - 1)];
        Outcome out;
        try {
            out = c.fn();
        } catch (const std::exception& e) {
            out.ok = false;
            out.detail = std::string("exception: ") + e.what();
        }
        std::printf("[%s] %d. %s  (%s)\n", out.ok ? "PASS" : "FAIL", c.id, c.label,
                    out.detail.c_str());
        std::fflush(stdout);
        if (!out.ok) ++failures;
    }
    return failures;
}
