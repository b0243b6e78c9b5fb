#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kags/errors.hpp"

namespace kags {

inline bool is_standalone_punct(char c) {
    return c == '.' || c == ',' || c == '!' || c == '?' || c == '\'' || c == '"';
}

// Lowercases, splits on whitespace, and breaks . , ! ? ' " out as their own
// tokens. The same tokenizer is used for references, predictions, metric
// inputs, and vocabulary building, so token streams always agree.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (char ch : text) {
        unsigned char uc = static_cast<unsigned char>(ch);
        if (std::isspace(uc)) {
            flush();
        } else if (is_standalone_punct(ch)) {
            flush();
            out.emplace_back(1, ch);
        } else {
            cur.push_back(static_cast<char>(std::tolower(uc)));
        }
    }
    flush();
    return out;
}

class Vocabulary {
public:
    static constexpr int pad_id = 0;
    static constexpr int bos_id = 1;
    static constexpr int eos_id = 2;
    static constexpr int unk_id = 3;

    Vocabulary() {
        for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) append(s);
    }

    // Rebuilds from a serialized token list; the four specials must lead.
    static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
        static const std::vector<std::string> specials = {"<pad>", "<bos>", "<eos>", "<unk>"};
        if (tokens.size() < specials.size())
            throw FormatError("vocabulary: token list shorter than the special set");
        for (std::size_t i = 0; i < specials.size(); ++i)
            if (tokens[i] != specials[i])
                throw FormatError("vocabulary: token " + std::to_string(i) +
                                  " should be " + specials[i] + ", got " + tokens[i]);
        Vocabulary v;
        for (std::size_t i = specials.size(); i < tokens.size(); ++i) {
            if (v.contains(tokens[i]))
                throw FormatError("vocabulary: duplicate token " + tokens[i]);
            v.append(tokens[i]);
        }
        return v;
    }

    // Frequency-built vocabulary: tokens seen more than min_count times,
    // ordered by descending count then lexicographically.
    static Vocabulary from_counts(const std::map<std::string, std::size_t>& counts,
                                  std::size_t min_count) {
        std::vector<std::pair<std::string, std::size_t>> kept;
        for (const auto& [tok, cnt] : counts)
            if (cnt > min_count) kept.emplace_back(tok, cnt);
        std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        Vocabulary v;
        for (const auto& [tok, cnt] : kept)
            if (!v.contains(tok)) v.append(tok);
        return v;
    }

    // Appends a token if absent; returns its id either way.
    int add(const std::string& token) {
        auto it = token_to_id_.find(token);
        if (it != token_to_id_.end()) return it->second;
        return append(token);
    }

    bool contains(const std::string& token) const {
        return token_to_id_.count(token) != 0;
    }

    // Lookup with <unk> fallback.
    int id(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? unk_id : it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
            throw ContractError("vocabulary: id " + std::to_string(id) + " out of range");
        return id_to_token_[static_cast<std::size_t>(id)];
    }

    std::size_t size() const { return id_to_token_.size(); }
    const std::vector<std::string>& tokens() const { return id_to_token_; }

    std::vector<int> encode(const std::vector<std::string>& toks) const {
        std::vector<int> ids;
        ids.reserve(toks.size());
        for (const auto& t : toks) ids.push_back(id(t));
        return ids;
    }

private:
    int append(const std::string& token) {
        int id = static_cast<int>(id_to_token_.size());
        id_to_token_.push_back(token);
        token_to_id_.emplace(token, id);
        return id;
    }

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

} // namespace kags
