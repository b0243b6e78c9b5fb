#pragma once

// Optimization: summed-NLL story loss, global-norm clipping, Adam with bias
// correction and decoupled weight decay, and the epoch loop that stitches
// them together over (album, reference) samples.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kags/checkpoint.hpp"
#include "kags/data_io.hpp"
#include "kags/errors.hpp"
#include "kags/knowledge.hpp"
#include "kags/model.hpp"
#include "kags/rng.hpp"
#include "kags/tensor.hpp"
#include "kags/vocab.hpp"

namespace kags {

// Sum over steps of -log p(target); logits_steps[i] is a [1 x V] row.
template <typename S>
Tensor<S> story_loss(const std::vector<Tensor<S>>& logits_steps, const std::vector<int>& targets) {
    if (logits_steps.empty() || logits_steps.size() != targets.size())
        throw ContractError("story_loss: need one target per step");
    std::vector<Tensor<S>> terms;
    terms.reserve(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const Tensor<S>& logits = logits_steps[i];
        if (logits.rows() != 1)
            throw ShapeError("story_loss: logits must be a single row, got " +
                             shape_str(logits.shape()));
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= logits.cols())
            throw ContractError("story_loss: target id " + std::to_string(targets[i]) +
                                " outside vocabulary of " + std::to_string(logits.cols()));
        terms.push_back(
            neg(slice_cols(log_softmax_rows(logits), static_cast<std::size_t>(targets[i]), 1)));
    }
    Tensor<S> stacked = terms.size() == 1 ? terms[0] : concat_cols(terms);
    return sum_all(stacked);
}

template <typename S>
struct AdamState {
    std::int64_t step = 0;
    std::vector<std::vector<S>> m; // aligned with trainable store entries
    std::vector<std::vector<S>> v;
};

template <typename S>
AdamState<S> make_adam_state(const ParameterStore<S>& store) {
    AdamState<S> st;
    for (const auto& e : store.entries())
        if (e.trainable) {
            st.m.emplace_back(e.tensor.numel(), S(0));
            st.v.emplace_back(e.tensor.numel(), S(0));
        }
    return st;
}

template <typename S>
double global_grad_norm(const ParameterStore<S>& store) {
    double sq = 0.0;
    for (const auto& e : store.entries()) {
        if (!e.trainable) continue;
        for (S g : e.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    if (!std::isfinite(sq))
        throw NumericError("gradients: non-finite global norm");
    return std::sqrt(sq);
}

template <typename S>
void clip_global_norm(ParameterStore<S>& store, double max_norm) {
    double norm = global_grad_norm(store); // also materializes every grad buffer
    if (norm <= max_norm || norm == 0.0) return;
    S factor = static_cast<S>(max_norm / norm);
    for (auto& e : store.entries()) {
        if (!e.trainable) continue;
        auto& g = e.tensor.node()->grad;
        for (auto& x : g) x *= factor;
    }
}

struct AdamConfig {
    double lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 5e-4; // decoupled: p *= (1 - lr * wd) before the update
};

template <typename S>
void adam_step(ParameterStore<S>& store, AdamState<S>& st, const AdamConfig& cfg) {
    ++st.step;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    std::size_t slot = 0;
    for (auto& e : store.entries()) {
        if (!e.trainable) continue;
        if (slot >= st.m.size())
            throw ContractError("adam: optimizer state does not match the store");
        auto& m = st.m[slot];
        auto& v = st.v[slot];
        auto& vals = e.tensor.values();
        const auto& grad = e.tensor.grad();
        if (m.size() != vals.size())
            throw ContractError("adam: moment size mismatch for " + e.name);
        S decay = static_cast<S>(1.0 - cfg.lr * cfg.weight_decay);
        for (std::size_t i = 0; i < vals.size(); ++i) {
            double g = static_cast<double>(grad[i]);
            double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
            double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
            m[i] = static_cast<S>(mi);
            v[i] = static_cast<S>(vi);
            double mhat = mi / bc1;
            double vhat = vi / bc2;
            double update = cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            vals[i] = decay * vals[i] - static_cast<S>(update);
        }
        ++slot;
    }
    if (slot != st.m.size())
        throw ContractError("adam: optimizer state does not match the store");
}

// ---------------------------------------------------------------------------
// epoch loop

template <typename S>
struct PreparedAlbum {
    std::string album_id;
    AlbumFeatures<S> features;
    std::vector<std::vector<std::vector<int>>> references; // story -> sentence -> ids
};

template <typename S>
std::vector<PreparedAlbum<S>> prepare_albums(const std::vector<AlbumRecord>& records,
                                             const Vocabulary& vocab, int expected_boxes) {
    std::vector<PreparedAlbum<S>> out;
    out.reserve(records.size());
    for (const auto& rec : records) {
        PreparedAlbum<S> p;
        p.album_id = rec.album_id;
        p.features = load_album_features<S>(rec, expected_boxes);
        for (const auto& story : rec.references) {
            std::vector<std::vector<int>> ids;
            for (const auto& sentence : story) ids.push_back(vocab.encode(tokenize(sentence)));
            p.references.push_back(std::move(ids));
        }
        out.push_back(std::move(p));
    }
    return out;
}

struct EpochLog {
    int epoch = 0;
    double mean_loss = 0.0; // per token
    double accuracy = 0.0;  // teacher-forced argmax hits per token
    std::size_t tokens = 0;
    double seconds = 0.0;
};

template <typename S>
class Trainer {
public:
    Trainer(KagsModel<S>& model, const KnowledgeGraph& graph)
        : model_(model), graph_(graph), adam_state_(make_adam_state(model.params())),
          shuffle_rng_(Rng::stream(model.config().seed, "shuffle")) {
        adam_cfg_.lr = model.config().lr;
        adam_cfg_.weight_decay = model.config().weight_decay;
    }

    AdamState<S>& adam_state() { return adam_state_; }
    const AdamConfig& adam_config() const { return adam_cfg_; }

    EpochLog run_epoch(std::vector<PreparedAlbum<S>>& data, int epoch_index) {
        auto t0 = std::chrono::steady_clock::now();
        struct Sample {
            std::size_t album;
            std::size_t ref;
        };
        std::vector<Sample> samples;
        for (std::size_t a = 0; a < data.size(); ++a)
            for (std::size_t r = 0; r < data[a].references.size(); ++r)
                samples.push_back({a, r});
        if (samples.empty())
            throw ValidationError("trainer: no training samples");
        shuffle_rng_.shuffle(samples);

        double total_loss = 0.0;
        std::size_t total_tokens = 0, total_correct = 0;
        std::size_t batch = static_cast<std::size_t>(model_.config().batch_size);
        for (std::size_t start = 0; start < samples.size(); start += batch) {
            std::size_t end = std::min(samples.size(), start + batch);
            model_.params().zero_grads();
            for (std::size_t i = start; i < end; ++i) {
                auto& album = data[samples[i].album];
                EncodedAlbum<S> enc =
                    model_.encode(album.features, graph_, ForwardMode::train());
                StoryLossResult<S> r = model_.teacher_forced_loss(
                    enc, album.references[samples[i].ref], ForwardMode::train());
                backward(r.loss);
                total_loss += static_cast<double>(r.loss.item());
                total_tokens += r.tokens;
                total_correct += r.correct;
            }
            clip_global_norm(model_.params(), 5.0);
            adam_step(model_.params(), adam_state_, adam_cfg_);
        }

        EpochLog log;
        log.epoch = epoch_index;
        log.tokens = total_tokens;
        log.mean_loss = total_loss / static_cast<double>(total_tokens);
        log.accuracy = static_cast<double>(total_correct) / static_cast<double>(total_tokens);
        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return log;
    }

    // Snapshot including optimizer moments, so training can resume bit-exactly.
    CheckpointData snapshot(std::size_t raw_dim) const {
        CheckpointData data = snapshot_store(model_.params(), model_.config(), model_.vocab(),
                                             raw_dim, adam_state_.step);
        std::size_t slot = 0;
        for (const auto& e : model_.params().entries()) {
            if (!e.trainable) continue;
            CheckpointRecord m{"adam.m/" + e.name, e.tensor.shape(), {}};
            CheckpointRecord v{"adam.v/" + e.name, e.tensor.shape(), {}};
            m.data.reserve(adam_state_.m[slot].size());
            v.data.reserve(adam_state_.v[slot].size());
            for (S x : adam_state_.m[slot]) m.data.push_back(static_cast<float>(x));
            for (S x : adam_state_.v[slot]) v.data.push_back(static_cast<float>(x));
            data.records.push_back(std::move(m));
            data.records.push_back(std::move(v));
            ++slot;
        }
        return data;
    }

    void restore_optimizer(const CheckpointData& data) {
        adam_state_ = make_adam_state(model_.params());
        adam_state_.step = data.step;
        std::size_t slot = 0;
        for (const auto& e : model_.params().entries()) {
            if (!e.trainable) continue;
            const CheckpointRecord* m = data.find("adam.m/" + e.name);
            const CheckpointRecord* v = data.find("adam.v/" + e.name);
            if (!m || !v)
                throw FormatError("checkpoint: missing optimizer moments for " + e.name);
            for (std::size_t i = 0; i < m->data.size(); ++i)
                adam_state_.m[slot][i] = static_cast<S>(m->data[i]);
            for (std::size_t i = 0; i < v->data.size(); ++i)
                adam_state_.v[slot][i] = static_cast<S>(v->data[i]);
            ++slot;
        }
    }

private:
    KagsModel<S>& model_;
    const KnowledgeGraph& graph_;
    AdamState<S> adam_state_;
    AdamConfig adam_cfg_;
    Rng shuffle_rng_;
};

} // namespace kags
