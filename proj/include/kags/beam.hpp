#pragma once

// Length-wise beam search over cumulative log-probability, generic in the
// recurrent state. The model is exposed as two callables:
//   step(state)            -> {logprobs over vocab, state after the step}
//   advance(state, token)  -> plants `token` as the next input
// Ties are broken by token-sequence lexicographic order, which makes beam
// width 1 reproduce greedy decoding exactly (argmax ties pick the lowest id).

#include <algorithm>
#include <cstddef>
#include <vector>

#include "kags/errors.hpp"

namespace kags {

template <typename State>
struct StepResult {
    std::vector<double> logprobs;
    State state;
};

struct GenResult {
    std::vector<int> tokens; // eos marker excluded
    double logprob = 0.0;
};

namespace detail {

inline bool tokens_less(const std::vector<int>& a, int a_last,
                        const std::vector<int>& b, int b_last) {
    std::size_t n = std::min(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i)
        if (a[i] != b[i]) return a[i] < b[i];
    if (a.size() != b.size()) return a.size() < b.size();
    return a_last < b_last;
}

} // namespace detail

template <typename State, typename StepFn, typename AdvanceFn>
GenResult greedy_search(State init, StepFn&& step, AdvanceFn&& advance,
                        int eos_id, std::size_t max_len) {
    if (max_len == 0) throw ValidationError("greedy_search: max_len must be positive");
    GenResult res;
    State state = std::move(init);
    for (std::size_t t = 0; t < max_len; ++t) {
        StepResult<State> sr = step(state);
        if (sr.logprobs.empty() || eos_id < 0 ||
            static_cast<std::size_t>(eos_id) >= sr.logprobs.size())
            throw ContractError("greedy_search: eos id outside the step distribution");
        std::size_t best = 0;
        for (std::size_t v = 1; v < sr.logprobs.size(); ++v)
            if (sr.logprobs[v] > sr.logprobs[best]) best = v;
        res.logprob += sr.logprobs[best];
        if (static_cast<int>(best) == eos_id) return res;
        res.tokens.push_back(static_cast<int>(best));
        state = std::move(sr.state);
        advance(state, static_cast<int>(best));
    }
    return res;
}

template <typename State, typename StepFn, typename AdvanceFn>
GenResult beam_search(State init, StepFn&& step, AdvanceFn&& advance,
                      int eos_id, std::size_t max_len, std::size_t beam) {
    if (beam == 0) throw ValidationError("beam_search: beam width must be positive");
    if (max_len == 0) throw ValidationError("beam_search: max_len must be positive");

    struct Hyp {
        std::vector<int> tokens;
        double logprob = 0.0;
        State state;
    };
    State start = init;
    std::vector<Hyp> live;
    live.push_back({{}, 0.0, std::move(init)});
    std::vector<GenResult> done;

    for (std::size_t t = 0; t < max_len && !live.empty(); ++t) {
        std::vector<StepResult<State>> steps;
        steps.reserve(live.size());
        for (const Hyp& h : live) steps.push_back(step(h.state));

        struct Cand {
            std::size_t parent;
            int token;
            double logprob;
        };
        std::vector<Cand> cands;
        for (std::size_t p = 0; p < live.size(); ++p) {
            const auto& lp = steps[p].logprobs;
            if (lp.empty() || eos_id < 0 || static_cast<std::size_t>(eos_id) >= lp.size())
                throw ContractError("beam_search: eos id outside the step distribution");
            for (std::size_t v = 0; v < lp.size(); ++v)
                cands.push_back({p, static_cast<int>(v), live[p].logprob + lp[v]});
        }
        std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
            if (a.logprob != b.logprob) return a.logprob > b.logprob;
            return detail::tokens_less(live[a.parent].tokens, a.token,
                                       live[b.parent].tokens, b.token);
        });

        // Top `beam` candidates survive the level. A hypothesis that emits the
        // end marker retires with the marker's log-probability folded in; one
        // that hits max_len retires without any end bonus.
        std::vector<Hyp> next;
        std::size_t selected = 0;
        for (const Cand& c : cands) {
            if (selected >= beam) break;
            ++selected;
            if (c.token == eos_id) {
                done.push_back({live[c.parent].tokens, c.logprob});
                continue;
            }
            Hyp h;
            h.tokens = live[c.parent].tokens;
            h.tokens.push_back(c.token);
            h.logprob = c.logprob;
            if (h.tokens.size() >= max_len) {
                done.push_back({std::move(h.tokens), h.logprob});
            } else {
                h.state = steps[c.parent].state;
                advance(h.state, c.token);
                next.push_back(std::move(h));
            }
        }
        live = std::move(next);
    }

    // A finished hypothesis only enters `done` while it ranks inside the beam
    // cut, so a narrow beam can discard a stop that would have won overall
    // (and with it, the whole greedy ray). Scoring one greedy rollout and
    // keeping the better of the two makes the result never worse than greedy
    // decoding at any width. At width 1 the rollout retraces the single
    // surviving ray with the same float sums, so the tie-break leaves the
    // classic result untouched.
    GenResult floor = greedy_search(std::move(start), step, advance, eos_id, max_len);
    if (done.empty()) return floor;
    std::size_t best = 0;
    for (std::size_t i = 1; i < done.size(); ++i) {
        if (done[i].logprob > done[best].logprob ||
            (done[i].logprob == done[best].logprob &&
             detail::tokens_less(done[i].tokens, -1, done[best].tokens, -1)))
            best = i;
    }
    if (floor.logprob > done[best].logprob ||
        (floor.logprob == done[best].logprob &&
         detail::tokens_less(floor.tokens, -1, done[best].tokens, -1)))
        return floor;
    return done[best];
}

} // namespace kags
