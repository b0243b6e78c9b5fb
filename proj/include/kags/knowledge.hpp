#pragma once

// Commonsense lookup table: a TSV of weighted (head, relation, tail) triples
// indexed by head. Retrieval merges the triples of a set of query labels,
// keeps the strongest k_max, and embeds each as the mean of its three token
// embeddings pushed through a learned projection.

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kags/errors.hpp"
#include "kags/tensor.hpp"
#include "kags/vocab.hpp"

namespace kags {

struct ConceptTriple {
    std::string head;
    std::string relation;
    std::string tail;
    double weight = 0.0;
};

class KnowledgeGraph {
public:
    void insert(ConceptTriple t) {
        auto& list = index_[t.head];
        for (auto& existing : list) {
            if (existing.relation == t.relation && existing.tail == t.tail) {
                existing.weight = std::max(existing.weight, t.weight);
                return;
            }
        }
        list.push_back(std::move(t));
        ++count_;
    }

    // Sorts every per-head list: strongest first, ties by (relation, tail).
    void finalize() {
        for (auto& [head, list] : index_) {
            std::sort(list.begin(), list.end(), [](const ConceptTriple& a, const ConceptTriple& b) {
                if (a.weight != b.weight) return a.weight > b.weight;
                if (a.relation != b.relation) return a.relation < b.relation;
                return a.tail < b.tail;
            });
        }
        recount();
    }

    const std::vector<ConceptTriple>* lookup(const std::string& head) const {
        auto it = index_.find(head);
        return it == index_.end() ? nullptr : &it->second;
    }

    std::size_t size() const { return count_; }

    // Every distinct token used by any triple, sorted.
    std::vector<std::string> all_tokens() const {
        std::set<std::string> toks;
        for (const auto& [head, list] : index_) {
            toks.insert(head);
            for (const auto& t : list) {
                toks.insert(t.relation);
                toks.insert(t.tail);
            }
        }
        return {toks.begin(), toks.end()};
    }

private:
    void recount() {
        count_ = 0;
        for (const auto& [head, list] : index_) count_ += list.size();
    }

    std::map<std::string, std::vector<ConceptTriple>> index_;
    std::size_t count_ = 0;
};

// TSV columns: head, relation, tail, weight. '#' starts a comment line.
// Duplicate (head, relation, tail) rows keep the largest weight.
inline KnowledgeGraph load_knowledge_graph(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ValidationError("knowledge: cannot open " + path);
    KnowledgeGraph g;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            std::size_t tab = line.find('\t', start);
            if (tab == std::string::npos) {
                fields.push_back(line.substr(start));
                break;
            }
            fields.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        if (fields.size() != 4)
            throw ParseError("knowledge: line " + std::to_string(lineno) + " of " + path +
                             " has " + std::to_string(fields.size()) + " fields, expected 4");
        for (int i = 0; i < 3; ++i)
            if (fields[i].empty())
                throw ParseError("knowledge: line " + std::to_string(lineno) + " of " + path +
                                 " has an empty field");
        double w = 0.0;
        try {
            std::size_t used = 0;
            w = std::stod(fields[3], &used);
            if (used != fields[3].size()) throw std::invalid_argument("trailing garbage");
        } catch (const std::exception&) {
            throw ParseError("knowledge: line " + std::to_string(lineno) + " of " + path +
                             " has a non-numeric weight '" + fields[3] + "'");
        }
        if (w < 0.0)
            throw ParseError("knowledge: line " + std::to_string(lineno) + " of " + path +
                             " has a negative weight");
        g.insert({fields[0], fields[1], fields[2], w});
    }
    g.finalize();
    return g;
}

// Gathers the triples of the (deduplicated) query labels, orders them by
// weight descending with ties broken by query position then (relation, tail),
// and truncates to k_max. Labels absent from the graph contribute nothing.
inline std::vector<ConceptTriple> retrieve_concepts(const KnowledgeGraph& g,
                                                    const std::vector<std::string>& labels,
                                                    std::size_t k_max) {
    struct Scored {
        ConceptTriple triple;
        std::size_t label_pos;
    };
    std::vector<Scored> pool;
    std::set<std::string> seen;
    std::size_t pos = 0;
    for (const auto& label : labels) {
        if (!seen.insert(label).second) continue;
        if (const auto* list = g.lookup(label))
            for (const auto& t : *list) pool.push_back({t, pos});
        ++pos;
    }
    std::sort(pool.begin(), pool.end(), [](const Scored& a, const Scored& b) {
        if (a.triple.weight != b.triple.weight) return a.triple.weight > b.triple.weight;
        if (a.label_pos != b.label_pos) return a.label_pos < b.label_pos;
        if (a.triple.relation != b.triple.relation) return a.triple.relation < b.triple.relation;
        return a.triple.tail < b.triple.tail;
    });
    if (pool.size() > k_max) pool.resize(k_max);
    std::vector<ConceptTriple> out;
    out.reserve(pool.size());
    for (auto& s : pool) out.push_back(std::move(s.triple));
    return out;
}

// Embeds up to k_max triples into a fixed [k_max x d] matrix: each triple is
// the mean of its head/relation/tail embeddings through a learned d -> d map,
// and unused rows stay zero. An empty list yields the all-zero matrix.
template <typename S>
Tensor<S> embed_concepts(const std::vector<ConceptTriple>& triples,
                         const Vocabulary& vocab,
                         const Tensor<S>& embedding_table,
                         const LinearParams<S>& proj,
                         std::size_t k_max) {
    if (k_max == 0)
        throw ValidationError("embed_concepts: k_max must be positive");
    if (triples.size() > k_max)
        throw ContractError("embed_concepts: " + std::to_string(triples.size()) +
                            " triples exceed k_max=" + std::to_string(k_max));
    std::size_t d = embedding_table.cols();
    if (triples.empty())
        return Tensor<S>::zeros({k_max, d});
    std::vector<Tensor<S>> rows;
    rows.reserve(triples.size());
    for (const auto& t : triples) {
        std::vector<int> ids = {vocab.id(t.head), vocab.id(t.relation), vocab.id(t.tail)};
        rows.push_back(mean_rows(embedding_rows(embedding_table, ids)));
    }
    Tensor<S> stacked = rows.size() == 1 ? rows[0] : concat_rows(rows);
    Tensor<S> projected = linear(stacked, proj);
    if (triples.size() == k_max) return projected;
    Tensor<S> pad = Tensor<S>::zeros({k_max - triples.size(), d});
    return concat_rows<S>({projected, pad});
}

// Appends every graph token missing from the vocabulary, in sorted order, so
// repeated extension is a no-op and existing ids never move.
inline Vocabulary extend_vocabulary(const Vocabulary& vocab, const KnowledgeGraph& g) {
    Vocabulary out = Vocabulary::from_tokens(vocab.tokens());
    for (const auto& tok : g.all_tokens())
        out.add(tok);
    return out;
}

} // namespace kags
