#pragma once

// Named catalogue of double-precision gradient checks covering every
// differentiable block: core primitives, the attention stack, pooling, and
// the decoder path through the story loss. Each check owns its tensors,
// weights its output by a fixed random mask (so constant-sum outputs like
// softmax still exercise the backward path), and runs the central-difference
// harness.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kags/attention.hpp"
#include "kags/decoder.hpp"
#include "kags/gradcheck.hpp"
#include "kags/gsm.hpp"
#include "kags/model.hpp"
#include "kags/rng.hpp"
#include "kags/tensor.hpp"
#include "kags/trainer.hpp"

namespace kags {

struct CheckSpec {
    std::string module;
    std::string name;
    std::function<GradCheckReport(std::uint64_t seed, double step, double tol)> run;
};

namespace gcdetail {

inline Tensor<double> rand_leaf(Rng& rng, Shape shape, double scale = 0.8) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(-scale, scale);
    return Tensor<double>::leaf(std::move(shape), std::move(v), true);
}

inline Tensor<double> rand_const(Rng& rng, Shape shape, double scale = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(-scale, scale);
    return Tensor<double>::leaf(std::move(shape), std::move(v), false);
}

// Scalar readout: sum(x .* mask), with x flattened to a matrix if needed.
inline Tensor<double> masked_sum(const Tensor<double>& x, const Tensor<double>& mask) {
    Tensor<double> flat = x.rank() == 2 ? x : reshape(x, {std::size_t(1), x.numel()});
    return sum_all(mul(flat, mask));
}

inline std::vector<Tensor<double>> store_inputs(const ParameterStore<double>& store) {
    std::vector<Tensor<double>> out;
    for (const auto& e : store.entries())
        if (e.trainable) out.push_back(e.tensor);
    return out;
}

} // namespace gcdetail

inline std::vector<CheckSpec> build_gradcheck_suite() {
    using gcdetail::masked_sum;
    using gcdetail::rand_const;
    using gcdetail::rand_leaf;
    std::vector<CheckSpec> suite;

    suite.push_back({"autodiff", "matmul", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.matmul");
        auto a = rand_leaf(rng, {3, 4});
        auto b = rand_leaf(rng, {4, 2});
        auto mask = rand_const(rng, {3, 2});
        auto f = [=]() { return masked_sum(matmul(a, b), mask); };
        return grad_check<double>("matmul", f, {a, b}, step, tol);
    }});

    suite.push_back({"autodiff", "softmax_rows", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.softmax");
        auto x = rand_leaf(rng, {3, 5}, 2.0);
        auto mask = rand_const(rng, {3, 5});
        auto f = [=]() { return masked_sum(softmax_rows(x), mask); };
        return grad_check<double>("softmax_rows", f, {x}, step, tol);
    }});

    suite.push_back({"autodiff", "log_softmax_rows", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.logsoftmax");
        auto x = rand_leaf(rng, {2, 6}, 2.0);
        auto mask = rand_const(rng, {2, 6});
        auto f = [=]() { return masked_sum(log_softmax_rows(x), mask); };
        return grad_check<double>("log_softmax_rows", f, {x}, step, tol);
    }});

    suite.push_back({"autodiff", "batchnorm_rows", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.batchnorm");
        auto x = rand_leaf(rng, {5, 4}, 1.5);
        BnParams<double> p;
        p.gamma = rand_leaf(rng, {1, 4});
        p.beta = rand_leaf(rng, {1, 4});
        auto state = std::make_shared<BnState<double>>();
        state->running_mean = Tensor<double>::zeros({1, 4});
        state->running_var = Tensor<double>::full({1, 4}, 1.0);
        auto mask = rand_const(rng, {5, 4});
        auto f = [=]() {
            return masked_sum(batchnorm_rows(x, p, *state, ForwardMode::train_frozen()), mask);
        };
        return grad_check<double>("batchnorm_rows", f, {x, p.gamma, p.beta}, step, tol);
    }});

    suite.push_back({"attention", "scaled_dot_attention", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.sdpa");
        auto q = rand_leaf(rng, {3, 4});
        auto k = rand_leaf(rng, {5, 4});
        auto v = rand_leaf(rng, {5, 6});
        auto mask = rand_const(rng, {3, 6});
        auto f = [=]() { return masked_sum(scaled_dot_attention(q, k, v), mask); };
        return grad_check<double>("scaled_dot_attention", f, {q, k, v}, step, tol);
    }});

    suite.push_back({"attention", "multi_head_attention", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.mha");
        ParameterStore<double> store;
        auto p = init::make_mha<double>(store, rng, "mha", 8, 8, 8, 2, 4);
        auto q = rand_leaf(rng, {3, 8});
        auto kv = rand_leaf(rng, {4, 8});
        auto mask = rand_const(rng, {3, 8});
        auto inputs = gcdetail::store_inputs(store);
        inputs.push_back(q);
        inputs.push_back(kv);
        auto f = [=]() { return masked_sum(multi_head_attention(q, kv, kv, p), mask); };
        return grad_check<double>("multi_head_attention", f, inputs, step, tol);
    }});

    suite.push_back({"attention", "self_attention_unit", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.sa");
        auto store = std::make_shared<ParameterStore<double>>();
        auto p = std::make_shared<AttnUnitParams<double>>(
            init::make_attn_unit<double>(*store, rng, "sa", 6, 6, 2));
        auto x = rand_leaf(rng, {4, 6});
        auto mask = rand_const(rng, {4, 6});
        auto inputs = gcdetail::store_inputs(*store);
        inputs.push_back(x);
        auto f = [=]() {
            return masked_sum(self_attention_unit(x, *p, ForwardMode::train_frozen()), mask);
        };
        return grad_check<double>("self_attention_unit", f, inputs, step, tol);
    }});

    suite.push_back({"attention", "cross_attention_unit", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.ca");
        auto store = std::make_shared<ParameterStore<double>>();
        auto p = std::make_shared<AttnUnitParams<double>>(
            init::make_attn_unit<double>(*store, rng, "ca", 6, 6, 2));
        auto ft = rand_leaf(rng, {3, 6});
        auto fv = rand_leaf(rng, {5, 6});
        auto mask = rand_const(rng, {3, 6});
        auto inputs = gcdetail::store_inputs(*store);
        inputs.push_back(ft);
        inputs.push_back(fv);
        auto f = [=]() {
            return masked_sum(cross_attention_unit(ft, fv, *p, ForwardMode::train_frozen()), mask);
        };
        return grad_check<double>("cross_attention_unit", f, inputs, step, tol);
    }});

    suite.push_back({"attention", "cca_forward_2layer", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.cca");
        auto store = std::make_shared<ParameterStore<double>>();
        auto p = std::make_shared<CcaParams<double>>();
        for (int l = 0; l < 2; ++l) {
            std::string base = "cca." + std::to_string(l);
            CcaLayerParams<double> layer;
            layer.sa_knowledge = init::make_attn_unit<double>(*store, rng, base + ".sa_k", 6, 6, 2);
            layer.sa_regional = init::make_attn_unit<double>(*store, rng, base + ".sa_r", 6, 6, 2);
            layer.ca = init::make_attn_unit<double>(*store, rng, base + ".ca", 6, 6, 2);
            p->layers.push_back(std::move(layer));
        }
        auto k = rand_leaf(rng, {3, 6});
        auto r = rand_leaf(rng, {4, 6});
        auto mask_k = rand_const(rng, {3, 6});
        auto mask_r = rand_const(rng, {4, 6});
        auto inputs = gcdetail::store_inputs(*store);
        inputs.push_back(k);
        inputs.push_back(r);
        auto f = [=]() {
            auto [ko, ro] = cca_forward(k, r, *p, ForwardMode::train_frozen());
            return add(masked_sum(ko, mask_k), masked_sum(ro, mask_r));
        };
        return grad_check<double>("cca_forward_2layer", f, inputs, step, tol);
    }});

    suite.push_back({"gsm", "sop_forward", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.sop");
        auto store = std::make_shared<ParameterStore<double>>();
        auto p = std::make_shared<SopParams<double>>(
            init::make_sop<double>(*store, rng, "sop", 6, 3));
        auto x = rand_leaf(rng, {2, 2, 6});
        auto mask = rand_const(rng, {1, 6});
        auto inputs = gcdetail::store_inputs(*store);
        inputs.push_back(x);
        auto f = [=]() { return masked_sum(sop_forward(x, *p), mask); };
        return grad_check<double>("sop_forward", f, inputs, step, tol);
    }});

    suite.push_back({"gsm", "gsm_forward", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.gsm");
        auto store = std::make_shared<ParameterStore<double>>();
        auto inner = std::make_shared<SopParams<double>>(
            init::make_sop<double>(*store, rng, "sop.image", 6, 3));
        auto outer = std::make_shared<SopParams<double>>(
            init::make_sop<double>(*store, rng, "sop.album", 6, 3));
        auto a = rand_leaf(rng, {2, 2, 6});
        auto b = rand_leaf(rng, {2, 2, 6});
        auto mask = rand_const(rng, {1, 6});
        auto inputs = gcdetail::store_inputs(*store);
        inputs.push_back(a);
        inputs.push_back(b);
        auto f = [=]() {
            return masked_sum(gsm_forward<double>({a, b}, *inner, *outer), mask);
        };
        return grad_check<double>("gsm_forward", f, inputs, step, tol);
    }});

    suite.push_back({"decoder", "lstm_step", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.lstm");
        auto store = std::make_shared<ParameterStore<double>>();
        auto p = std::make_shared<LstmParams<double>>(
            init::make_lstm<double>(*store, rng, "lstm", 7, 5));
        auto x = rand_leaf(rng, {1, 7});
        auto h = rand_leaf(rng, {1, 5});
        auto c = rand_leaf(rng, {1, 5});
        auto mask_h = rand_const(rng, {1, 5});
        auto mask_c = rand_const(rng, {1, 5});
        auto inputs = gcdetail::store_inputs(*store);
        inputs.push_back(x);
        inputs.push_back(h);
        inputs.push_back(c);
        auto f = [=]() {
            auto [hn, cn] = lstm_step(x, h, c, *p);
            return add(masked_sum(hn, mask_h), masked_sum(cn, mask_c));
        };
        return grad_check<double>("lstm_step", f, inputs, step, tol);
    }});

    suite.push_back({"decoder", "glu_fusion", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.glu");
        auto store = std::make_shared<ParameterStore<double>>();
        std::size_t d = 8, hidden = 4;
        auto fuse = std::make_shared<LinearParams<double>>(
            init::make_linear<double>(*store, rng, "fuse", (d + hidden), d));
        auto vr = rand_leaf(rng, {1, d});
        auto hr = rand_leaf(rng, {1, hidden});
        auto va = rand_leaf(rng, {1, d});
        auto ha = rand_leaf(rng, {1, hidden});
        auto mask = rand_const(rng, {1, d});
        auto inputs = gcdetail::store_inputs(*store);
        inputs.insert(inputs.end(), {vr, hr, va, ha});
        auto f = [=]() {
            Tensor<double> gathered = concat_cols<double>({vr, hr, va, ha});
            return masked_sum(linear(glu_cols(gathered), *fuse), mask);
        };
        return grad_check<double>("glu_fusion", f, inputs, step, tol);
    }});

    suite.push_back({"decoder", "flatten_indicator", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.flatten");
        auto store = std::make_shared<ParameterStore<double>>();
        auto p = std::make_shared<FlattenParams<double>>(
            init::make_flatten<double>(*store, rng, "flatten", 6, true));
        auto x = rand_leaf(rng, {4, 6});
        auto mask = rand_const(rng, {1, 6});
        auto inputs = gcdetail::store_inputs(*store);
        inputs.push_back(x);
        auto f = [=]() { return masked_sum(flatten_indicator(x, *p), mask); };
        return grad_check<double>("flatten_indicator", f, inputs, step, tol);
    }});

    suite.push_back({"decoder", "decode_step_story_loss", [](std::uint64_t seed, double step, double tol) {
        Rng rng = Rng::stream(seed, "gc.decode");
        auto store = std::make_shared<ParameterStore<double>>();
        std::size_t d = 8, hidden = 4, vocab = 12;
        auto p = std::make_shared<DecoderParams<double>>();
        p->d_model = d;
        p->hidden = hidden;
        p->regional_keys_full = true;
        p->lstm_regional = init::make_lstm<double>(*store, rng, "lstm_r", 3 * d, hidden);
        p->lstm_global = init::make_lstm<double>(*store, rng, "lstm_g", 3 * d, hidden);
        p->ca_regional = init::make_attn_unit<double>(*store, rng, "ca_r", hidden, d, 2);
        p->ca_global = init::make_attn_unit<double>(*store, rng, "ca_g", hidden, d, 2);
        p->embed_regional = init::make_linear<double>(*store, rng, "embed_r", hidden, d);
        p->embed_global = init::make_linear<double>(*store, rng, "embed_g", hidden, d);
        p->fuse = init::make_linear<double>(*store, rng, "fuse", d + hidden, d);
        p->out_proj = init::make_linear<double>(*store, rng, "out", d, vocab);
        auto emb = rand_leaf(rng, {vocab, d});
        auto ind = std::make_shared<IndicatorVectors<double>>();
        ind->knowledge = rand_leaf(rng, {1, d});
        ind->regional = rand_leaf(rng, {1, d});
        ind->global_ctx = rand_leaf(rng, {1, d});
        auto regional_rows = rand_leaf(rng, {3, d});
        std::vector<int> targets = {5, 9, 2};
        auto inputs = gcdetail::store_inputs(*store);
        inputs.insert(inputs.end(),
                      {emb, ind->knowledge, ind->regional, ind->global_ctx, regional_rows});
        auto f = [=]() {
            DecoderState<double> state =
                init_decoder_state(*p, embedding_rows(emb, {Vocabulary::bos_id}));
            std::vector<Tensor<double>> logits_steps;
            for (int target : targets) {
                auto [logits, next] =
                    decode_step(state, *ind, regional_rows, *p, ForwardMode::train_frozen());
                logits_steps.push_back(logits);
                state = std::move(next);
                state.w_prev = embedding_rows(emb, {target});
            }
            return story_loss(logits_steps, targets);
        };
        return grad_check<double>("decode_step_story_loss", f, inputs, step, tol);
    }});

    return suite;
}

} // namespace kags
