#pragma once

// Attention stack: scaled dot-product attention, multi-head projections, the
// add -> linear -> batchnorm stabilization block, self/cross attention units,
// and the cascade that enriches knowledge rows with visual context layer by
// layer while the visual stream refines itself in parallel.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "kags/errors.hpp"
#include "kags/tensor.hpp"

namespace kags {

// Optional probe: collects attention weight matrices as they are produced
// (one per scaled-dot call, i.e. one per head inside multi-head attention).
template <typename S>
struct AttnTrace {
    std::vector<Tensor<S>> weights;
};

// softmax(q k^T / sqrt(width(k))) v
template <typename S>
Tensor<S> scaled_dot_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                               AttnTrace<S>* trace = nullptr) {
    detail::require_matrix("scaled_dot_attention", q);
    detail::require_matrix("scaled_dot_attention", k);
    detail::require_matrix("scaled_dot_attention", v);
    if (q.cols() != k.cols())
        throw ShapeError("scaled_dot_attention: query width " + shape_str(q.shape()) +
                         " does not match key width " + shape_str(k.shape()));
    if (k.rows() != v.rows())
        throw ShapeError("scaled_dot_attention: key count " + shape_str(k.shape()) +
                         " does not match value count " + shape_str(v.shape()));
    S inv_sqrt_d = static_cast<S>(1.0 / std::sqrt(static_cast<double>(k.cols())));
    Tensor<S> scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
    Tensor<S> weights = softmax_rows(scores);
    if (trace) trace->weights.push_back(weights);
    return matmul(weights, v);
}

// Head projections. Queries and keys/values may come from streams of
// different widths (the decoder queries 512-wide states against 1024-wide
// feature rows); the default builder uses one width everywhere.
template <typename S>
struct MultiHeadParams {
    std::size_t heads = 1;
    std::size_t head_dim = 1;
    Tensor<S> wq; // [q_width  x heads*head_dim]
    Tensor<S> wk; // [kv_width x heads*head_dim]
    Tensor<S> wv; // [kv_width x heads*head_dim]
    Tensor<S> wo; // [heads*head_dim x out_width]
};

template <typename S>
Tensor<S> multi_head_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                               const MultiHeadParams<S>& p, AttnTrace<S>* trace = nullptr) {
    detail::require_matrix("multi_head_attention", q);
    detail::require_matrix("multi_head_attention", k);
    detail::require_matrix("multi_head_attention", v);
    if (k.shape() != v.shape())
        throw ShapeError("multi_head_attention: key/value shape mismatch " +
                         shape_str(k.shape()) + " vs " + shape_str(v.shape()));
    if (q.cols() != p.wq.rows() || k.cols() != p.wk.rows() || v.cols() != p.wv.rows())
        throw ShapeError("multi_head_attention: input widths do not match projections");
    std::size_t inner = p.heads * p.head_dim;
    if (p.wq.cols() != inner || p.wk.cols() != inner || p.wv.cols() != inner ||
        p.wo.rows() != inner)
        throw ShapeError("multi_head_attention: projection widths disagree with head layout");
    Tensor<S> qp = matmul(q, p.wq);
    Tensor<S> kp = matmul(k, p.wk);
    Tensor<S> vp = matmul(v, p.wv);
    std::vector<Tensor<S>> heads;
    heads.reserve(p.heads);
    for (std::size_t h = 0; h < p.heads; ++h) {
        std::size_t off = h * p.head_dim;
        heads.push_back(scaled_dot_attention(slice_cols(qp, off, p.head_dim),
                                             slice_cols(kp, off, p.head_dim),
                                             slice_cols(vp, off, p.head_dim), trace));
    }
    Tensor<S> cat = heads.size() == 1 ? heads[0] : concat_cols(heads);
    return matmul(cat, p.wo);
}

// Stabilization applied to every attention unit's output: residual add of the
// query stream, then a linear map, then batch normalization over rows.
template <typename S>
struct LsParams {
    LinearParams<S> lin;
    BnParams<S> bn;
    BnState<S> bn_state;
};

template <typename S>
Tensor<S> ls_block(const Tensor<S>& residual, const Tensor<S>& attended, LsParams<S>& p,
                   ForwardMode mode) {
    Tensor<S> summed = add(residual, attended);
    Tensor<S> mapped = linear(summed, p.lin);
    return batchnorm_rows(mapped, p.bn, p.bn_state, mode);
}

template <typename S>
struct AttnUnitParams {
    MultiHeadParams<S> mha;
    LsParams<S> ls;
};

// SA(F) = LS(MultiHead(F, F, F))
template <typename S>
Tensor<S> self_attention_unit(const Tensor<S>& f, AttnUnitParams<S>& p, ForwardMode mode,
                              AttnTrace<S>* trace = nullptr) {
    return ls_block(f, multi_head_attention(f, f, f, p.mha, trace), p.ls, mode);
}

// CA(Ft, Fv) = LS(MultiHead(Ft, Fv, Fv)); the residual is the query stream.
template <typename S>
Tensor<S> cross_attention_unit(const Tensor<S>& ft, const Tensor<S>& fv,
                               AttnUnitParams<S>& p, ForwardMode mode,
                               AttnTrace<S>* trace = nullptr) {
    return ls_block(ft, multi_head_attention(ft, fv, fv, p.mha, trace), p.ls, mode);
}

// One cascade layer refines both streams:
//   K' = CA(SA(K), SA(R)),  R' = SA(R)
template <typename S>
struct CcaLayerParams {
    AttnUnitParams<S> sa_knowledge;
    AttnUnitParams<S> sa_regional;
    AttnUnitParams<S> ca;
};

template <typename S>
struct CcaParams {
    std::vector<CcaLayerParams<S>> layers; // no weight sharing across depth
};

// Runs the full cascade and returns the final (knowledge, regional) pair.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> cca_forward(const Tensor<S>& knowledge,
                                            const Tensor<S>& regional,
                                            CcaParams<S>& p, ForwardMode mode,
                                            AttnTrace<S>* trace = nullptr) {
    detail::require_matrix("cca_forward", knowledge);
    detail::require_matrix("cca_forward", regional);
    if (knowledge.cols() != regional.cols())
        throw ShapeError("cca_forward: stream widths differ, " + shape_str(knowledge.shape()) +
                         " vs " + shape_str(regional.shape()));
    Tensor<S> k = knowledge;
    Tensor<S> r = regional;
    for (auto& layer : p.layers) {
        Tensor<S> k_sa = self_attention_unit(k, layer.sa_knowledge, mode, trace);
        Tensor<S> r_sa = self_attention_unit(r, layer.sa_regional, mode, trace);
        k = cross_attention_unit(k_sa, r_sa, layer.ca, mode, trace);
        r = r_sa;
    }
    return {k, r};
}

} // namespace kags
