#pragma once

// Full model assembly. Owns every parameter in a named store (the checkpoint
// and optimizer both key off those names), wires the encoder (feature
// projections, per-image knowledge retrieval, the attention cascade, album
// pooling) to the two-stream decoder, and exposes teacher-forced loss and
// beam-search generation over encoded albums.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kags/attention.hpp"
#include "kags/beam.hpp"
#include "kags/config.hpp"
#include "kags/data_io.hpp"
#include "kags/decoder.hpp"
#include "kags/errors.hpp"
#include "kags/gsm.hpp"
#include "kags/knowledge.hpp"
#include "kags/rng.hpp"
#include "kags/tensor.hpp"
#include "kags/vocab.hpp"

namespace kags {

template <typename S>
class ParameterStore {
public:
    struct Entry {
        std::string name;
        Tensor<S> tensor;
        bool trainable = true;
    };

    Tensor<S> add(const std::string& name, Tensor<S> t, bool trainable = true) {
        if (index_.count(name))
            throw ContractError("parameters: duplicate name " + name);
        index_.emplace(name, entries_.size());
        entries_.push_back({name, t, trainable});
        return t;
    }

    const Tensor<S>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &entries_[it->second].tensor;
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

    std::size_t trainable_scalars() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.tensor.numel();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace init {

template <typename S>
Tensor<S> xavier(Rng& rng, std::size_t rows, std::size_t cols) {
    double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::vector<S> v(rows * cols);
    for (auto& x : v) x = static_cast<S>(rng.uniform(-limit, limit));
    return Tensor<S>::leaf({rows, cols}, std::move(v), true);
}

template <typename S>
LinearParams<S> make_linear(ParameterStore<S>& store, Rng& rng, const std::string& name,
                            std::size_t in, std::size_t out) {
    LinearParams<S> p;
    p.weight = store.add(name + ".W", xavier<S>(rng, in, out));
    p.bias = store.add(name + ".b", Tensor<S>::zeros({1, out}, true));
    return p;
}

template <typename S>
void make_bn(ParameterStore<S>& store, const std::string& name, std::size_t d,
             BnParams<S>& p, BnState<S>& state) {
    p.gamma = store.add(name + ".gamma", Tensor<S>::full({1, d}, S(1), true));
    p.beta = store.add(name + ".beta", Tensor<S>::zeros({1, d}, true));
    state.running_mean = store.add(name + ".running_mean", Tensor<S>::zeros({1, d}), false);
    state.running_var = store.add(name + ".running_var", Tensor<S>::full({1, d}, S(1)), false);
}

template <typename S>
MultiHeadParams<S> make_mha(ParameterStore<S>& store, Rng& rng, const std::string& name,
                            std::size_t q_in, std::size_t kv_in, std::size_t out,
                            std::size_t heads, std::size_t head_dim) {
    MultiHeadParams<S> p;
    p.heads = heads;
    p.head_dim = head_dim;
    std::size_t inner = heads * head_dim;
    p.wq = store.add(name + ".wq", xavier<S>(rng, q_in, inner));
    p.wk = store.add(name + ".wk", xavier<S>(rng, kv_in, inner));
    p.wv = store.add(name + ".wv", xavier<S>(rng, kv_in, inner));
    p.wo = store.add(name + ".wo", xavier<S>(rng, inner, out));
    return p;
}

// Attention unit whose query stream has width q_d and key/value stream kv_d;
// the stabilization block keeps everything at q_d.
template <typename S>
AttnUnitParams<S> make_attn_unit(ParameterStore<S>& store, Rng& rng, const std::string& name,
                                 std::size_t q_d, std::size_t kv_d, std::size_t heads) {
    if (q_d % heads != 0)
        throw ConfigError("attention: " + std::to_string(heads) +
                          " heads do not divide width " + std::to_string(q_d));
    AttnUnitParams<S> p;
    p.mha = make_mha<S>(store, rng, name + ".mha", q_d, kv_d, q_d, heads, q_d / heads);
    p.ls.lin = make_linear<S>(store, rng, name + ".ls", q_d, q_d);
    make_bn<S>(store, name + ".ls.bn", q_d, p.ls.bn, p.ls.bn_state);
    return p;
}

template <typename S>
LstmParams<S> make_lstm(ParameterStore<S>& store, Rng& rng, const std::string& name,
                        std::size_t in, std::size_t hidden) {
    LstmParams<S> p;
    p.hidden = hidden;
    p.w = store.add(name + ".w", xavier<S>(rng, in, 4 * hidden));
    p.u = store.add(name + ".u", xavier<S>(rng, hidden, 4 * hidden));
    // forget-gate bias starts at 1 so memory persists early in training
    std::vector<S> b(4 * hidden, S(0));
    for (std::size_t i = hidden; i < 2 * hidden; ++i) b[i] = S(1);
    p.b = store.add(name + ".b", Tensor<S>::leaf({1, 4 * hidden}, std::move(b), true));
    return p;
}

template <typename S>
SopParams<S> make_sop(ParameterStore<S>& store, Rng& rng, const std::string& name,
                      std::size_t d, std::size_t c) {
    SopParams<S> p;
    p.reduced = c;
    p.reduce = make_linear<S>(store, rng, name + ".reduce", d, c);
    p.row_weight = store.add(name + ".row.W", xavier<S>(rng, c, c));
    p.row_bias = store.add(name + ".row.b", Tensor<S>::zeros({1, c}, true));
    p.expand = make_linear<S>(store, rng, name + ".expand", c, d);
    return p;
}

template <typename S>
FlattenParams<S> make_flatten(ParameterStore<S>& store, Rng& rng, const std::string& name,
                              std::size_t d, bool use_relu) {
    FlattenParams<S> p;
    p.score_hidden = make_linear<S>(store, rng, name + ".h", d, d);
    p.score_out = make_linear<S>(store, rng, name + ".out", d, 1);
    p.use_relu = use_relu;
    return p;
}

} // namespace init

template <typename S>
struct EncodedAlbum {
    std::vector<IndicatorVectors<S>> indicators; // per image
    std::vector<Tensor<S>> regional_rows;        // per image, [m x d] refined
    std::vector<Tensor<S>> conv_projected;       // per image, [h x w x d]
    Tensor<S> album_summary;                     // [1 x d]
};

template <typename S>
struct StoryLossResult {
    Tensor<S> loss;          // scalar graph node: summed token NLL
    std::size_t tokens = 0;
    std::size_t correct = 0; // teacher-forced argmax hits
};

template <typename S>
class KagsModel {
public:
    KagsModel(RunConfig cfg, Vocabulary vocab, std::size_t raw_dim)
        : cfg_(std::move(cfg)), vocab_(std::move(vocab)), raw_dim_(raw_dim) {
        cfg_.validate();
        if (raw_dim_ == 0)
            throw ConfigError("model: raw feature width must be positive");
        if (vocab_.size() < 5)
            throw ConfigError("model: vocabulary holds nothing beyond the specials");
        build();
    }

    const RunConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return vocab_; }
    std::size_t raw_dim() const { return raw_dim_; }
    ParameterStore<S>& params() { return params_; }
    const ParameterStore<S>& params() const { return params_; }
    std::size_t parameter_count() const { return params_.trainable_scalars(); }

    EncodedAlbum<S> encode(const AlbumFeatures<S>& album, const KnowledgeGraph& graph,
                           ForwardMode mode) {
        if (album.conv.size() != static_cast<std::size_t>(cfg_.n_images))
            throw ValidationError("model: album has " + std::to_string(album.conv.size()) +
                                  " images, configured for " + std::to_string(cfg_.n_images));
        std::size_t d = static_cast<std::size_t>(cfg_.d_model);
        EncodedAlbum<S> out;
        for (std::size_t i = 0; i < album.conv.size(); ++i) {
            if (album.conv[i].shape()[2] != raw_dim_ || album.regions[i].cols() != raw_dim_)
                throw ValidationError("model: feature width does not match the " +
                                      std::to_string(raw_dim_) + " the model was built for");
            Tensor<S> conv_p = project_feature(album.conv[i], proj_conv_);
            Tensor<S> regions_p = project_feature(album.regions[i], proj_regions_);

            auto triples = retrieve_concepts(graph, album.labels[i],
                                             static_cast<std::size_t>(cfg_.k_relations));
            Tensor<S> k0 = embed_concepts<S>(triples, vocab_, embedding_, knowledge_proj_,
                                             static_cast<std::size_t>(cfg_.k_relations));

            auto [k_fin, r_fin] = cca_forward(k0, regions_p, cca_, mode);

            IndicatorVectors<S> ind;
            ind.knowledge = flatten_indicator(k_fin, flatten_knowledge_);
            ind.regional = flatten_indicator(r_fin, flatten_regional_);
            out.indicators.push_back(std::move(ind));
            out.regional_rows.push_back(std::move(r_fin));
            out.conv_projected.push_back(std::move(conv_p));
        }
        Tensor<S> summary = gsm_forward(out.conv_projected, sop_image_, sop_album_);
        out.album_summary = reshape(summary, {std::size_t(1), d});
        for (auto& ind : out.indicators) ind.global_ctx = out.album_summary;
        return out;
    }

    // Teacher-forced negative log-likelihood over one reference story; the
    // decoder restarts per sentence, sentences are truncated to the config
    // cap, and the end marker is always the final target.
    StoryLossResult<S> teacher_forced_loss(const EncodedAlbum<S>& enc,
                                           const std::vector<std::vector<int>>& sentences,
                                           ForwardMode mode) {
        if (sentences.size() != enc.indicators.size())
            throw ValidationError("model: story has " + std::to_string(sentences.size()) +
                                  " sentences for " + std::to_string(enc.indicators.size()) +
                                  " images");
        StoryLossResult<S> res;
        std::vector<Tensor<S>> terms;
        int vsize = static_cast<int>(vocab_.size());
        for (std::size_t n = 0; n < sentences.size(); ++n) {
            std::vector<int> targets = sentences[n];
            if (targets.size() > static_cast<std::size_t>(cfg_.max_sentence_len))
                targets.resize(static_cast<std::size_t>(cfg_.max_sentence_len));
            targets.push_back(Vocabulary::eos_id);
            DecoderState<S> state = init_decoder_state(
                decoder_, embedding_rows(embedding_, {Vocabulary::bos_id}));
            for (int target : targets) {
                if (target < 0 || target >= vsize)
                    throw ContractError("model: target id " + std::to_string(target) +
                                        " outside vocabulary of " + std::to_string(vsize));
                auto [logits, next] = decode_step(state, enc.indicators[n],
                                                  enc.regional_rows[n], decoder_, mode);
                Tensor<S> logp = log_softmax_rows(logits);
                terms.push_back(neg(slice_cols(logp, static_cast<std::size_t>(target), 1)));
                ++res.tokens;
                if (argmax(logits.values()) == static_cast<std::size_t>(target)) ++res.correct;
                state = std::move(next);
                state.w_prev = embedding_rows(embedding_, {target});
            }
        }
        Tensor<S> stacked = terms.size() == 1 ? terms[0] : concat_cols(terms);
        res.loss = sum_all(stacked);
        return res;
    }

    struct GeneratedStory {
        std::vector<std::vector<int>> sentences; // token ids, no specials
        double logprob = 0.0;                    // summed over sentences
    };

    // Beam search per image (width 1 falls back to greedy argmax semantics).
    GeneratedStory generate(const EncodedAlbum<S>& enc, std::size_t beam_width,
                            std::size_t max_len) {
        GeneratedStory story;
        ForwardMode mode = ForwardMode::eval();
        for (std::size_t n = 0; n < enc.indicators.size(); ++n) {
            auto step = [&](const DecoderState<S>& state) {
                auto [logits, next] = decode_step(state, enc.indicators[n],
                                                  enc.regional_rows[n], decoder_, mode);
                Tensor<S> logp = log_softmax_rows(logits);
                StepResult<DecoderState<S>> sr;
                sr.logprobs.assign(logp.values().begin(), logp.values().end());
                sr.state = std::move(next);
                return sr;
            };
            auto advance = [&](DecoderState<S>& state, int token) {
                state.w_prev = embedding_rows(embedding_, {token});
            };
            DecoderState<S> start = init_decoder_state(
                decoder_, embedding_rows(embedding_, {Vocabulary::bos_id}));
            GenResult r = beam_search(std::move(start), step, advance, Vocabulary::eos_id,
                                      max_len, beam_width);
            story.logprob += r.logprob;
            story.sentences.push_back(std::move(r.tokens));
        }
        return story;
    }

    std::string detokenize(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (!out.empty()) out.push_back(' ');
            out += vocab_.token(id);
        }
        return out;
    }

    // Heat map of one image's projected features against the album summary.
    Tensor<S> activation_map(const EncodedAlbum<S>& enc, std::size_t image_idx) {
        if (image_idx >= enc.conv_projected.size())
            throw ValidationError("model: image index " + std::to_string(image_idx) +
                                  " out of range");
        return class_activation_map(enc.conv_projected[image_idx], enc.album_summary);
    }

private:
    void build() {
        Rng rng = Rng::stream(cfg_.seed, "init");
        std::size_t d = static_cast<std::size_t>(cfg_.d_model);
        std::size_t hidden = static_cast<std::size_t>(cfg_.d_hidden);
        std::size_t heads = static_cast<std::size_t>(cfg_.n_heads);
        std::size_t vsize = vocab_.size();

        embedding_ = params_.add("embedding", init::xavier<S>(rng, vsize, d));
        proj_conv_ = init::make_linear<S>(params_, rng, "proj.conv", raw_dim_, d);
        proj_regions_ = init::make_linear<S>(params_, rng, "proj.regions", raw_dim_, d);
        knowledge_proj_ = init::make_linear<S>(params_, rng, "knowledge.proj", d, d);

        cca_.layers.clear();
        for (int l = 0; l < cfg_.cca_layers; ++l) {
            std::string base = "cca." + std::to_string(l);
            CcaLayerParams<S> layer;
            layer.sa_knowledge = init::make_attn_unit<S>(params_, rng, base + ".sa_k", d, d, heads);
            layer.sa_regional = init::make_attn_unit<S>(params_, rng, base + ".sa_r", d, d, heads);
            layer.ca = init::make_attn_unit<S>(params_, rng, base + ".ca", d, d, heads);
            cca_.layers.push_back(std::move(layer));
        }

        std::size_t c = static_cast<std::size_t>(cfg_.sop_channels());
        sop_image_ = init::make_sop<S>(params_, rng, "sop.image", d, c);
        sop_album_ = init::make_sop<S>(params_, rng, "sop.album", d, c);

        flatten_knowledge_ = init::make_flatten<S>(params_, rng, "flatten.knowledge", d,
                                                   cfg_.flatten_activation == "relu");
        flatten_regional_ = init::make_flatten<S>(params_, rng, "flatten.regional", d,
                                                  cfg_.flatten_activation == "relu");

        decoder_.d_model = d;
        decoder_.hidden = hidden;
        decoder_.regional_keys_full = cfg_.regional_ca_keys == "full";
        decoder_.lstm_regional = init::make_lstm<S>(params_, rng, "decoder.lstm_r", 3 * d, hidden);
        decoder_.lstm_global = init::make_lstm<S>(params_, rng, "decoder.lstm_g", 3 * d, hidden);
        decoder_.ca_regional = init::make_attn_unit<S>(params_, rng, "decoder.ca_r", hidden, d, heads);
        decoder_.ca_global = init::make_attn_unit<S>(params_, rng, "decoder.ca_g", hidden, d, heads);
        decoder_.embed_regional = init::make_linear<S>(params_, rng, "decoder.embed_r", hidden, d);
        decoder_.embed_global = init::make_linear<S>(params_, rng, "decoder.embed_g", hidden, d);
        decoder_.fuse = init::make_linear<S>(params_, rng, "decoder.fuse", d + hidden, d);
        decoder_.out_proj = init::make_linear<S>(params_, rng, "decoder.out", d, vsize);
    }

    RunConfig cfg_;
    Vocabulary vocab_;
    std::size_t raw_dim_;
    ParameterStore<S> params_;

    Tensor<S> embedding_;
    LinearParams<S> proj_conv_, proj_regions_, knowledge_proj_;
    CcaParams<S> cca_;
    SopParams<S> sop_image_, sop_album_;
    FlattenParams<S> flatten_knowledge_, flatten_regional_;
    DecoderParams<S> decoder_;
};

} // namespace kags
