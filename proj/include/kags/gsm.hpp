#pragma once

// Second-order pooling. One image's [h x w x d] feature map is reduced to a
// channel covariance and squeezed back to a [1 x 1 x d] descriptor; an album
// stacks the per-image descriptors and pools them the same way again, which
// makes the summary invariant to both spatial layout and image order.

#include <cstddef>
#include <vector>

#include "kags/errors.hpp"
#include "kags/tensor.hpp"

namespace kags {

template <typename S>
struct SopParams {
    std::size_t reduced = 1;   // c: covariance side length
    LinearParams<S> reduce;    // 1x1 conv, d -> c
    Tensor<S> row_weight;      // [c x c], one length-c filter per covariance row
    Tensor<S> row_bias;        // [1 x c]
    LinearParams<S> expand;    // 1x1 conv, c -> d
};

// x: [h x w x d] -> [1 x 1 x d].
// Pipeline: 1x1 conv to c channels, raw (uncentered) covariance y^T y over
// the h*w positions, a per-row filter collapsing each covariance row to a
// scalar, then a 1x1 conv back up to d.
template <typename S>
Tensor<S> sop_forward(const Tensor<S>& x, const SopParams<S>& p) {
    if (x.rank() != 3)
        throw ShapeError("sop_forward: expected [h x w x d], got " + shape_str(x.shape()));
    std::size_t h = x.shape()[0], w = x.shape()[1], d = x.shape()[2];
    if (p.reduce.weight.rows() != d)
        throw ShapeError("sop_forward: input depth " + std::to_string(d) +
                         " does not match parameters built for depth " +
                         std::to_string(p.reduce.weight.rows()));
    Tensor<S> flat = reshape(x, {h * w, d});
    Tensor<S> y = linear(flat, p.reduce);                    // [hw x c]
    Tensor<S> cov = matmul(transpose(y), y);                 // [c x c]
    Tensor<S> filtered = mul(cov, p.row_weight);             // [c x c]
    Tensor<S> ones = Tensor<S>::full({p.reduced, 1}, S(1));
    Tensor<S> rowsum = transpose(matmul(filtered, ones));    // [1 x c]
    Tensor<S> pooled = add(rowsum, p.row_bias);
    Tensor<S> out = linear(pooled, p.expand);                // [1 x d]
    return reshape(out, {std::size_t(1), std::size_t(1), d});
}

// Album-level pooling: per-image descriptors stacked as a [1 x N x d] map and
// pooled again. Returns the album summary as [1 x 1 x d].
template <typename S>
Tensor<S> gsm_forward(const std::vector<Tensor<S>>& conv_maps,
                      const SopParams<S>& per_image, const SopParams<S>& per_album) {
    if (conv_maps.empty())
        throw ShapeError("gsm_forward: empty album");
    std::vector<Tensor<S>> rows;
    rows.reserve(conv_maps.size());
    std::size_t d = 0;
    for (const auto& c : conv_maps) {
        if (c.rank() != 3)
            throw ShapeError("gsm_forward: expected [h x w x d] maps, got " +
                             shape_str(c.shape()));
        if (d == 0) d = c.shape()[2];
        else if (c.shape()[2] != d)
            throw ShapeError("gsm_forward: images disagree on depth");
        Tensor<S> desc = sop_forward(c, per_image);
        rows.push_back(reshape(desc, {std::size_t(1), d}));
    }
    Tensor<S> stacked = rows.size() == 1 ? rows[0] : concat_rows(rows);
    Tensor<S> album = reshape(stacked, {std::size_t(1), conv_maps.size(), d});
    return sop_forward(album, per_album);
}

// Correlation heat map between one image's projected features and the album
// summary: [h x w x d] against [1 x d] (or [1 x 1 x d]) -> [h x w].
template <typename S>
Tensor<S> class_activation_map(const Tensor<S>& conv_map, const Tensor<S>& album_summary) {
    if (conv_map.rank() != 3)
        throw ShapeError("class_activation_map: expected [h x w x d], got " +
                         shape_str(conv_map.shape()));
    std::size_t h = conv_map.shape()[0], w = conv_map.shape()[1], d = conv_map.shape()[2];
    if (album_summary.numel() != d)
        throw ShapeError("class_activation_map: summary " + shape_str(album_summary.shape()) +
                         " does not match depth " + std::to_string(d));
    Tensor<S> flat = reshape(conv_map, {h * w, d});
    Tensor<S> col = reshape(album_summary, {d, std::size_t(1)});
    Tensor<S> scores = matmul(flat, col);
    return reshape(scores, {h, w});
}

} // namespace kags
