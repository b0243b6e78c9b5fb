#pragma once

// Corpus metrics for generated stories: BLEU-1..4 (modified n-gram precision
// with multi-reference clipping and brevity penalty), ROUGE-L (LCS-based
// F-measure, beta = 1.2), and CIDEr-D (tf-idf n-gram cosine agreement with a
// gaussian length penalty, scaled to [0, 10]).

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "kags/data_io.hpp"
#include "kags/errors.hpp"
#include "kags/vocab.hpp"

namespace kags {

struct EvalPair {
    std::vector<std::string> candidate;
    std::vector<std::vector<std::string>> references;
};

namespace detail {

// N-grams as '\x1f'-joined keys; tokens never contain control characters.
inline std::unordered_map<std::string, std::size_t> ngram_counts(
    const std::vector<std::string>& tokens, std::size_t n) {
    std::unordered_map<std::string, std::size_t> counts;
    if (tokens.size() < n) return counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        std::string key = tokens[i];
        for (std::size_t j = 1; j < n; ++j) {
            key.push_back('\x1f');
            key += tokens[i + j];
        }
        ++counts[key];
    }
    return counts;
}

inline std::size_t lcs_length(const std::vector<std::string>& a,
                              const std::vector<std::string>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < b.size(); ++j)
            cur[j + 1] = a[i] == b[j] ? prev[j] + 1 : std::max(prev[j + 1], cur[j]);
        std::swap(prev, cur);
        std::fill(cur.begin(), cur.end(), 0);
    }
    return prev[b.size()];
}

inline void require_corpus(const std::vector<EvalPair>& corpus, const char* metric) {
    if (corpus.empty())
        throw ValidationError(std::string(metric) + ": empty corpus");
    for (const auto& e : corpus)
        if (e.references.empty())
            throw ValidationError(std::string(metric) + ": entry with no references");
}

} // namespace detail

// Corpus-level BLEU-n: geometric mean of clipped precisions for orders
// 1..max_n times the brevity penalty. Any empty order zeroes the score.
inline double bleu(const std::vector<EvalPair>& corpus, std::size_t max_n) {
    if (max_n == 0 || max_n > 9)
        throw ValidationError("bleu: order must be in 1..9");
    detail::require_corpus(corpus, "bleu");
    std::vector<std::size_t> numer(max_n, 0), denom(max_n, 0);
    std::size_t cand_len = 0, ref_len = 0;
    for (const auto& e : corpus) {
        cand_len += e.candidate.size();
        // closest reference length; ties prefer the shorter reference
        std::size_t best_ref = e.references[0].size();
        for (const auto& r : e.references) {
            auto dist = [&](std::size_t len) {
                return len > e.candidate.size() ? len - e.candidate.size()
                                                : e.candidate.size() - len;
            };
            if (dist(r.size()) < dist(best_ref) ||
                (dist(r.size()) == dist(best_ref) && r.size() < best_ref))
                best_ref = r.size();
        }
        ref_len += best_ref;
        for (std::size_t n = 1; n <= max_n; ++n) {
            auto counts = detail::ngram_counts(e.candidate, n);
            std::unordered_map<std::string, std::size_t> max_ref;
            for (const auto& r : e.references)
                for (const auto& [g, c] : detail::ngram_counts(r, n)) {
                    auto& slot = max_ref[g];
                    slot = std::max(slot, c);
                }
            for (const auto& [g, c] : counts) {
                denom[n - 1] += c;
                auto it = max_ref.find(g);
                if (it != max_ref.end()) numer[n - 1] += std::min(c, it->second);
            }
        }
    }
    double log_sum = 0.0;
    for (std::size_t n = 0; n < max_n; ++n) {
        if (denom[n] == 0 || numer[n] == 0) return 0.0;
        log_sum += std::log(static_cast<double>(numer[n]) / static_cast<double>(denom[n]));
    }
    double bp = 1.0;
    if (cand_len <= ref_len)
        bp = std::exp(1.0 - static_cast<double>(ref_len) /
                                static_cast<double>(std::max<std::size_t>(1, cand_len)));
    return bp * std::exp(log_sum / static_cast<double>(max_n));
}

// Mean over entries of the best-per-reference LCS F-measure with beta = 1.2.
inline double rouge_l(const std::vector<EvalPair>& corpus, double beta = 1.2) {
    detail::require_corpus(corpus, "rouge_l");
    const double b2 = beta * beta;
    double total = 0.0;
    for (const auto& e : corpus) {
        double best = 0.0;
        for (const auto& r : e.references) {
            std::size_t l = detail::lcs_length(e.candidate, r);
            if (l == 0 || e.candidate.empty() || r.empty()) continue;
            double prec = static_cast<double>(l) / static_cast<double>(e.candidate.size());
            double rec = static_cast<double>(l) / static_cast<double>(r.size());
            double f = ((1.0 + b2) * rec * prec) / (rec + b2 * prec);
            best = std::max(best, f);
        }
        total += best;
    }
    return total / static_cast<double>(corpus.size());
}

// CIDEr-D. Document frequencies come from the reference sides of the corpus,
// which therefore must hold at least two entries.
inline double cider_d(const std::vector<EvalPair>& corpus, std::size_t max_n = 4,
                      double sigma = 6.0) {
    detail::require_corpus(corpus, "cider_d");
    if (corpus.size() < 2)
        throw ValidationError("cider_d: corpus must have at least 2 entries for idf");

    std::unordered_map<std::string, double> doc_freq;
    for (const auto& e : corpus) {
        std::unordered_map<std::string, bool> seen;
        for (const auto& r : e.references)
            for (std::size_t n = 1; n <= max_n; ++n)
                for (const auto& [g, c] : detail::ngram_counts(r, n)) seen[g] = true;
        for (const auto& [g, f] : seen) doc_freq[g] += 1.0;
    }
    const double log_corpus = std::log(static_cast<double>(corpus.size()));

    struct Vec {
        std::vector<std::map<std::string, double>> v;
        std::vector<double> norm;
        std::size_t length = 0; // bigram count, used by the length penalty
    };
    auto to_vec = [&](const std::vector<std::string>& tokens) {
        Vec out;
        out.v.resize(max_n);
        out.norm.assign(max_n, 0.0);
        for (std::size_t n = 1; n <= max_n; ++n) {
            for (const auto& [g, tf] : detail::ngram_counts(tokens, n)) {
                double df = std::log(std::max(1.0, doc_freq.count(g) ? doc_freq.at(g) : 0.0));
                double w = static_cast<double>(tf) * (log_corpus - df);
                out.v[n - 1][g] = w;
                out.norm[n - 1] += w * w;
                if (n == 2) out.length += tf;
            }
        }
        for (auto& x : out.norm) x = std::sqrt(x);
        return out;
    };

    double total = 0.0;
    for (const auto& e : corpus) {
        Vec ch = to_vec(e.candidate);
        double entry = 0.0;
        for (const auto& r : e.references) {
            Vec cr = to_vec(r);
            double delta = static_cast<double>(ch.length) - static_cast<double>(cr.length);
            double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
            for (std::size_t n = 0; n < max_n; ++n) {
                double val = 0.0;
                for (const auto& [g, w] : ch.v[n]) {
                    auto it = cr.v[n].find(g);
                    if (it != cr.v[n].end()) val += std::min(w, it->second) * it->second;
                }
                if (ch.norm[n] != 0.0 && cr.norm[n] != 0.0) val /= ch.norm[n] * cr.norm[n];
                entry += val * penalty;
            }
        }
        total += entry / static_cast<double>(max_n) /
                 static_cast<double>(e.references.size()) * 10.0;
    }
    return total / static_cast<double>(corpus.size());
}

struct MetricReport {
    double bleu1 = 0.0, bleu2 = 0.0, bleu3 = 0.0, bleu4 = 0.0;
    double rouge_l = 0.0;
    double cider = 0.0;
};

inline MetricReport score_corpus(const std::vector<EvalPair>& corpus) {
    MetricReport r;
    r.bleu1 = bleu(corpus, 1);
    r.bleu2 = bleu(corpus, 2);
    r.bleu3 = bleu(corpus, 3);
    r.bleu4 = bleu(corpus, 4);
    r.rouge_l = rouge_l(corpus);
    r.cider = cider_d(corpus);
    return r;
}

// Joins predictions to manifest references by album id. Story-level scoring
// concatenates the sentences of a story into one token stream; per-sentence
// scoring makes each (prediction sentence, reference sentences) a corpus
// entry of its own.
inline std::vector<EvalPair> build_eval_corpus(const std::vector<PredictedStory>& predictions,
                                               const std::vector<AlbumRecord>& albums,
                                               bool per_sentence) {
    std::map<std::string, const PredictedStory*> by_id;
    for (const auto& p : predictions) {
        if (!by_id.emplace(p.album_id, &p).second)
            throw ValidationError("eval: duplicate prediction for album " + p.album_id);
    }
    std::vector<EvalPair> corpus;
    std::size_t used = 0;
    for (const auto& album : albums) {
        auto it = by_id.find(album.album_id);
        if (it == by_id.end())
            throw ValidationError("eval: no prediction for album " + album.album_id);
        ++used;
        const auto& story = it->second->sentences;
        if (!per_sentence) {
            EvalPair e;
            for (const auto& s : story)
                for (auto& t : tokenize(s)) e.candidate.push_back(std::move(t));
            for (const auto& ref : album.references) {
                std::vector<std::string> toks;
                for (const auto& s : ref)
                    for (auto& t : tokenize(s)) toks.push_back(std::move(t));
                e.references.push_back(std::move(toks));
            }
            corpus.push_back(std::move(e));
        } else {
            if (story.size() != album.images.size())
                throw ValidationError("eval: story for album " + album.album_id + " has " +
                                      std::to_string(story.size()) + " sentences, expected " +
                                      std::to_string(album.images.size()));
            for (std::size_t i = 0; i < story.size(); ++i) {
                EvalPair e;
                e.candidate = tokenize(story[i]);
                for (const auto& ref : album.references)
                    if (i < ref.size()) e.references.push_back(tokenize(ref[i]));
                corpus.push_back(std::move(e));
            }
        }
    }
    if (used != predictions.size())
        throw ValidationError("eval: predictions cover albums absent from the manifest");
    return corpus;
}

inline MetricReport evaluate_stories(const std::string& predictions_path,
                                     const std::string& manifest_path,
                                     bool per_sentence = false) {
    auto predictions = read_predictions(predictions_path);
    auto albums = parse_manifest(manifest_path, 0);
    return score_corpus(build_eval_corpus(predictions, albums, per_sentence));
}

// Fixed-width table, values scaled by 100 to one decimal. METEOR is not
// implemented and prints as a dash.
inline std::string render_text_table(const MetricReport& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "metric    score\n"
                  "BLEU-1    %6.1f\n"
                  "BLEU-2    %6.1f\n"
                  "BLEU-3    %6.1f\n"
                  "BLEU-4    %6.1f\n"
                  "METEOR         -\n"
                  "ROUGE-L   %6.1f\n"
                  "CIDEr     %6.1f\n",
                  r.bleu1 * 100.0, r.bleu2 * 100.0, r.bleu3 * 100.0, r.bleu4 * 100.0,
                  r.rouge_l * 100.0, r.cider * 100.0);
    return buf;
}

inline nlohmann::ordered_json report_to_json(const MetricReport& r) {
    nlohmann::ordered_json j;
    j["bleu1"] = r.bleu1 * 100.0;
    j["bleu2"] = r.bleu2 * 100.0;
    j["bleu3"] = r.bleu3 * 100.0;
    j["bleu4"] = r.bleu4 * 100.0;
    j["rouge_l"] = r.rouge_l * 100.0;
    j["cider"] = r.cider * 100.0;
    return j;
}

} // namespace kags
