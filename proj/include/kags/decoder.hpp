#pragma once

// Two-stream story decoder. Each stream is an LSTM fed with the knowledge
// indicator, the previous word embedding, and its own visual indicator
// (regional or album-global). The hidden states query their feature rows
// through cross attention, the attended contexts are lifted back to model
// width, and a gated fusion of all four signals produces the word logits.

#include <cstddef>
#include <utility>
#include <vector>

#include "kags/attention.hpp"
#include "kags/errors.hpp"
#include "kags/tensor.hpp"

namespace kags {

template <typename S>
struct LstmParams {
    std::size_t hidden = 0;
    Tensor<S> w; // [in x 4*hidden], gate blocks ordered i, f, g, o
    Tensor<S> u; // [hidden x 4*hidden]
    Tensor<S> b; // [1 x 4*hidden]
};

template <typename S>
std::pair<Tensor<S>, Tensor<S>> lstm_step(const Tensor<S>& x, const Tensor<S>& h,
                                          const Tensor<S>& c, const LstmParams<S>& p) {
    std::size_t hd = p.hidden;
    if (h.cols() != hd || c.cols() != hd)
        throw ShapeError("lstm_step: state width does not match hidden size " +
                         std::to_string(hd));
    if (x.cols() != p.w.rows())
        throw ShapeError("lstm_step: input width " + shape_str(x.shape()) +
                         " does not match weights " + shape_str(p.w.shape()));
    Tensor<S> pre = add_rowvec(add(matmul(x, p.w), matmul(h, p.u)), p.b);
    Tensor<S> i = sigmoid(slice_cols(pre, 0 * hd, hd));
    Tensor<S> f = sigmoid(slice_cols(pre, 1 * hd, hd));
    Tensor<S> g = tanh_elem(slice_cols(pre, 2 * hd, hd));
    Tensor<S> o = sigmoid(slice_cols(pre, 3 * hd, hd));
    Tensor<S> c_next = add(mul(f, c), mul(i, g));
    Tensor<S> h_next = mul(o, tanh_elem(c_next));
    return {h_next, c_next};
}

// Gated linear unit over columns: the left half of each row is gated by the
// sigmoid of the right half. No parameters; width must be even.
template <typename S>
Tensor<S> glu_cols(const Tensor<S>& x) {
    detail::require_matrix("glu_cols", x);
    if (x.cols() % 2 != 0)
        throw ShapeError("glu_cols: odd width " + shape_str(x.shape()));
    std::size_t half = x.cols() / 2;
    return mul(slice_cols(x, 0, half), sigmoid(slice_cols(x, half, half)));
}

// Collapses a feature matrix [m x d] to a single indicator row: a two-layer
// scorer assigns each row a weight, softmax normalizes the weights, and the
// output is the weighted sum of the rows.
template <typename S>
struct FlattenParams {
    LinearParams<S> score_hidden; // d -> d
    LinearParams<S> score_out;    // d -> 1
    bool use_relu = true;
};

template <typename S>
Tensor<S> flatten_indicator(const Tensor<S>& x, const FlattenParams<S>& p) {
    detail::require_matrix("flatten_indicator", x);
    Tensor<S> hidden = linear(x, p.score_hidden);
    if (p.use_relu) hidden = relu(hidden);
    Tensor<S> scores = linear(hidden, p.score_out);         // [m x 1]
    Tensor<S> weights = softmax_rows(transpose(scores));    // [1 x m]
    return matmul(weights, x);                               // [1 x d]
}

// The three flattened context rows every decode step consumes.
template <typename S>
struct IndicatorVectors {
    Tensor<S> knowledge;  // [1 x d]
    Tensor<S> regional;   // [1 x d]
    Tensor<S> global_ctx; // [1 x d]
};

template <typename S>
struct DecoderParams {
    std::size_t d_model = 0;
    std::size_t hidden = 0;
    LstmParams<S> lstm_regional;
    LstmParams<S> lstm_global;
    AttnUnitParams<S> ca_regional; // queries [1 x hidden], keys/values [* x d]
    AttnUnitParams<S> ca_global;
    LinearParams<S> embed_regional; // hidden -> d
    LinearParams<S> embed_global;   // hidden -> d
    LinearParams<S> fuse;           // (d + hidden) -> d, applied after the GLU halving
    LinearParams<S> out_proj;       // d -> vocab (untied from the input embedding)
    bool regional_keys_full = true; // attend over all regional rows vs. the flattened row
};

template <typename S>
struct DecoderState {
    Tensor<S> h_regional, c_regional;
    Tensor<S> h_global, c_global;
    Tensor<S> w_prev; // embedding of the previously emitted word, [1 x d]
};

template <typename S>
DecoderState<S> init_decoder_state(const DecoderParams<S>& p, Tensor<S> w_start) {
    DecoderState<S> s;
    s.h_regional = Tensor<S>::zeros({1, p.hidden});
    s.c_regional = Tensor<S>::zeros({1, p.hidden});
    s.h_global = Tensor<S>::zeros({1, p.hidden});
    s.c_global = Tensor<S>::zeros({1, p.hidden});
    s.w_prev = std::move(w_start);
    return s;
}

// One decode step. regional_rows carries the refined per-box features for the
// sentence's image; the returned state has everything advanced except w_prev,
// which the caller fills once the next token is chosen.
template <typename S>
std::pair<Tensor<S>, DecoderState<S>> decode_step(const DecoderState<S>& state,
                                                  const IndicatorVectors<S>& ind,
                                                  const Tensor<S>& regional_rows,
                                                  DecoderParams<S>& p, ForwardMode mode) {
    std::size_t d = p.d_model;
    if (ind.knowledge.cols() != d || ind.regional.cols() != d || ind.global_ctx.cols() != d)
        throw ShapeError("decode_step: indicator width does not match model width " +
                         std::to_string(d));
    if (!state.w_prev.valid())
        throw ContractError("decode_step: w_prev is unset; the caller must fill it after "
                            "choosing a token");
    if (state.w_prev.cols() != d)
        throw ShapeError("decode_step: word embedding width " + shape_str(state.w_prev.shape()) +
                         " does not match model width");
    if (regional_rows.cols() != d)
        throw ShapeError("decode_step: regional rows " + shape_str(regional_rows.shape()) +
                         " do not match model width");

    Tensor<S> x_regional = concat_cols<S>({ind.knowledge, state.w_prev, ind.regional});
    Tensor<S> x_global = concat_cols<S>({ind.knowledge, state.w_prev, ind.global_ctx});

    DecoderState<S> next;
    auto [hr, cr] = lstm_step(x_regional, state.h_regional, state.c_regional, p.lstm_regional);
    auto [hg, cg] = lstm_step(x_global, state.h_global, state.c_global, p.lstm_global);
    next.h_regional = hr;
    next.c_regional = cr;
    next.h_global = hg;
    next.c_global = cg;

    const Tensor<S>& regional_kv = p.regional_keys_full ? regional_rows : ind.regional;
    Tensor<S> att_regional = cross_attention_unit(hr, regional_kv, p.ca_regional, mode);
    Tensor<S> att_global = cross_attention_unit(hg, ind.global_ctx, p.ca_global, mode);
    Tensor<S> v_regional = linear(att_regional, p.embed_regional);
    Tensor<S> v_global = linear(att_global, p.embed_global);

    Tensor<S> gathered = concat_cols<S>({v_regional, hr, v_global, hg});
    Tensor<S> gated = glu_cols(gathered);
    Tensor<S> fused = linear(gated, p.fuse);
    Tensor<S> logits = linear(fused, p.out_proj);
    return {logits, std::move(next)};
}

} // namespace kags
