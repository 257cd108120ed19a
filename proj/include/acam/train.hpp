#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "acam/backbone.hpp"
#include "acam/contrast.hpp"
#include "acam/data.hpp"
#include "acam/ops.hpp"
#include "acam/tensor.hpp"

namespace acam {

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double lr = 0.001;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    bool use_acam = false;
    std::size_t k = 10;
    bool freeze_stage1 = false;
    std::uint64_t seed = 0;
    RangeSpec range;

    void validate() const {
        if (epochs < 1) throw std::domain_error("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::domain_error("TrainConfig: batch_size must be >= 1");
        if (!(lr >= 0.0)) throw std::domain_error("TrainConfig: lr must be >= 0");
        if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
            throw std::domain_error("TrainConfig: betas must be in [0,1)");
        if (use_acam && k < 1) throw std::domain_error("TrainConfig: K must be >= 1");
        if (freeze_stage1 && !use_acam)
            throw std::domain_error("TrainConfig: freeze_stage1 requires use_acam");
        range.validate();
    }
};

// Adam with bias correction:
//   m <- b1*m + (1-b1)*g,  v <- b2*v + (1-b2)*g^2,
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m, v;
    std::uint64_t t = 0;

    explicit AdamState(const std::vector<Tensor<T>*>& params) {
        for (auto* p : params) {
            m.emplace_back(p->size(), T(0));
            v.emplace_back(p->size(), T(0));
        }
    }
};

template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, AdamState<T>& state,
               const TrainConfig& cfg) {
    if (params.size() != state.m.size())
        throw std::invalid_argument("adam_step: state tracks " +
                                    std::to_string(state.m.size()) +
                                    " parameters, got " + std::to_string(params.size()));
    state.t += 1;
    const T b1 = static_cast<T>(cfg.adam_beta1), b2 = static_cast<T>(cfg.adam_beta2);
    const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.adam_eps);
    const T c1 = T(1) - std::pow(b1, static_cast<T>(state.t));
    const T c2 = T(1) - std::pow(b2, static_cast<T>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto data = params[i]->data();
        auto grad = params[i]->grad();
        if (grad.size() != state.m[i].size())
            throw std::invalid_argument("adam_step: gradient shape mismatch at parameter " +
                                        std::to_string(i));
        for (std::size_t j = 0; j < data.size(); ++j) {
            T g = grad[j];
            state.m[i][j] = b1 * state.m[i][j] + (T(1) - b1) * g;
            state.v[i][j] = b2 * state.v[i][j] + (T(1) - b2) * g * g;
            T mhat = state.m[i][j] / c1;
            T vhat = state.v[i][j] / c2;
            data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    Classifier<float> model;
    std::optional<PredictorWeights<float>> predictor;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0; // 1-based; 0 when no test set
    // Snapshot of (model, predictor) at the best-test-accuracy epoch.
    std::optional<Classifier<float>> best_model;
    std::optional<PredictorWeights<float>> best_predictor;
};

namespace detail {

inline void check_finite_or_throw(const Tensor<float>& loss,
                                  const Tensor<float>& logits,
                                  std::vector<Tensor<float>*> params,
                                  std::size_t epoch, std::size_t batch) {
    if (std::isfinite(loss.item())) return;
    std::string culprit = "loss";
    for (float v : logits.data())
        if (!std::isfinite(v)) { culprit = "logits"; break; }
    for (std::size_t i = 0; i < params.size() && culprit == "loss"; ++i)
        for (float v : params[i]->data())
            if (!std::isfinite(v)) { culprit = "parameter " + std::to_string(i); break; }
    throw std::runtime_error("training diverged: non-finite " + culprit +
                             " at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch));
}

inline std::size_t argmax_row(std::span<const float> row) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

} // namespace detail

inline Classifier<float> clone_classifier(Classifier<float>& c) {
    Classifier<float> out = c;
    auto src = c.params();
    out.stem.w = c.stem.w.detach_copy();
    out.stem.b = c.stem.b.detach_copy();
    for (auto& d : out.downs) { d.w = d.w.detach_copy(); d.b = d.b.detach_copy(); }
    for (auto& stg : out.blocks)
        for (auto& blk : stg)
            for (auto& cv : blk) { cv.w = cv.w.detach_copy(); cv.b = cv.b.detach_copy(); }
    out.head_w = c.head_w.detach_copy();
    out.head_b = c.head_b.detach_copy();
    return out;
}

inline PredictorWeights<float> clone_predictor(PredictorWeights<float>& w) {
    PredictorWeights<float> out;
    out.conv1_w = w.conv1_w.detach_copy();
    out.conv1_b = w.conv1_b.detach_copy();
    out.conv2_w = w.conv2_w.detach_copy();
    out.conv2_b = w.conv2_b.detach_copy();
    out.fc_w = w.fc_w.detach_copy();
    out.fc_b = w.fc_b.detach_copy();
    return out;
}

// Logits for a batch through the optional ACAM front end.
inline Tensor<float> model_logits(Classifier<float>& model,
                                  std::optional<PredictorWeights<float>>& predictor,
                                  const TrainConfig& cfg, Tensor<float> x) {
    if (predictor) {
        auto views = acam_forward(x, *predictor, cfg.range);
        return forward_classify(model, views);
    }
    return forward_classify(model, x);
}

inline double test_accuracy(Classifier<float>& model,
                            std::optional<PredictorWeights<float>>& predictor,
                            const TrainConfig& cfg,
                            const std::vector<GrayImage>& images,
                            const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
        std::vector<std::size_t> chunk(
            idx.begin() + start,
            idx.begin() + std::min(idx.size(), start + cfg.batch_size));
        auto [x, labels] = gather_batch<float>(images, chunk);
        auto logits = model_logits(model, predictor, cfg, x);
        std::size_t c = logits.dim(1);
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (detail::argmax_row(logits.data().subspan(i * c, c)) ==
                static_cast<std::size_t>(labels[i]))
                ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
}

// Joint training of the (optional) predictor and the backbone with Adam and
// cross-entropy. `base_cfg` describes the 1-channel backbone; the ACAM arm
// re-stems it to K channels so both arms share the same non-stem
// initialization for a given seed. With freeze_stage1 the predictor is
// excluded from optimizer updates (gradients still flow through it).
inline TrainResult train_model(const TrainConfig& cfg, const BackboneConfig& base_cfg,
                               const Dataset& data) {
    cfg.validate();
    base_cfg.validate();
    if (base_cfg.in_channels != 1)
        throw std::domain_error("train_model: base backbone must be 1-channel");
    if (data.images.empty()) throw std::runtime_error("train_model: empty dataset");

    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < data.records.size(); ++i) {
        if (data.records[i].split == Split::test) test_idx.push_back(i);
        else train_idx.push_back(i); // unassigned records train
    }
    if (train_idx.empty()) throw std::runtime_error("train_model: no training records");

    TrainResult result;
    auto base = build_backbone<float>(base_cfg, derive_seed(cfg.seed, 1));
    result.model = cfg.use_acam ? adapt_stem(base, cfg.k) : base;
    result.model.set_requires_grad();
    if (cfg.use_acam) {
        result.predictor = init_predictor<float>(cfg.k, derive_seed(cfg.seed, 2));
        result.predictor->set_requires_grad();
    }

    std::vector<Tensor<float>*> all_params = result.model.params();
    if (result.predictor)
        for (auto* p : result.predictor->params()) all_params.push_back(p);
    std::vector<Tensor<float>*> trainable = result.model.params();
    if (result.predictor && !cfg.freeze_stage1)
        for (auto* p : result.predictor->params()) trainable.push_back(p);

    AdamState<float> adam(trainable);
    double best_acc = -1.0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        double loss_sum = 0.0;
        std::size_t correct = 0;
        auto batches = batch_order(train_idx.size(), cfg.batch_size, true, cfg.seed, epoch);
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            std::vector<std::size_t> idx;
            for (std::size_t j : batches[bi]) idx.push_back(train_idx[j]);
            auto [x, labels] = gather_batch<float>(data.images, idx);
            auto logits = model_logits(result.model, result.predictor, cfg, x);
            auto loss = softmax_cross_entropy(logits, labels);
            detail::check_finite_or_throw(loss, logits, all_params, epoch + 1, bi);
            for (auto* p : all_params) p->zero_grad();
            loss.backward();
            adam_step(trainable, adam, cfg);

            loss_sum += loss.item() * static_cast<double>(labels.size());
            std::size_t c = logits.dim(1);
            for (std::size_t i = 0; i < labels.size(); ++i)
                if (detail::argmax_row(logits.data().subspan(i * c, c)) ==
                    static_cast<std::size_t>(labels[i]))
                    ++correct;
        }
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.train_loss = loss_sum / static_cast<double>(train_idx.size());
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(train_idx.size());
        rec.test_acc = test_accuracy(result.model, result.predictor, cfg,
                                     data.images, test_idx);
        rec.seconds = std::chrono::duration<double>(
                          std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(rec);

        if (!test_idx.empty() && rec.test_acc > best_acc) {
            best_acc = rec.test_acc;
            result.best_epoch = epoch + 1;
            result.best_model = clone_classifier(result.model);
            if (result.predictor)
                result.best_predictor = clone_predictor(*result.predictor);
        }
    }
    return result;
}

// History CSV: epoch,train_loss,train_acc,test_acc,seconds
inline void save_history(const std::string& path, const std::vector<EpochRecord>& hist) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write history: " + path);
    f << "epoch,train_loss,train_acc,test_acc,seconds\n";
    char line[160];
    for (const auto& r : hist) {
        std::snprintf(line, sizeof line, "%zu,%.6f,%.6f,%.6f,%.3f\n", r.epoch,
                      r.train_loss, r.train_acc, r.test_acc, r.seconds);
        f << line;
    }
}

} // namespace acam
