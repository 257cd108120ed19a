#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "acam/backbone.hpp"
#include "acam/contrast.hpp"
#include "acam/data.hpp"
#include "acam/train.hpp"

namespace acam {

// rows = true class, cols = predicted class
struct ConfusionMatrix {
    std::size_t num_classes = 0;
    std::vector<std::size_t> counts;

    explicit ConfusionMatrix(std::size_t c = 0) : num_classes(c), counts(c * c, 0) {}
    std::size_t& at(std::size_t truth, std::size_t pred) {
        return counts[truth * num_classes + pred];
    }
    std::size_t at(std::size_t truth, std::size_t pred) const {
        return counts[truth * num_classes + pred];
    }
    std::size_t total() const {
        return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    }
};

inline ConfusionMatrix confusion(const std::vector<int>& preds,
                                 const std::vector<int>& labels, std::size_t c) {
    if (preds.size() != labels.size())
        throw std::invalid_argument("confusion: " + std::to_string(preds.size()) +
                                    " predictions vs " + std::to_string(labels.size()) +
                                    " labels");
    ConfusionMatrix cm(c);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] < 0 || labels[i] < 0 ||
            static_cast<std::size_t>(preds[i]) >= c ||
            static_cast<std::size_t>(labels[i]) >= c)
            throw std::out_of_range("confusion: class index out of range at sample " +
                                    std::to_string(i));
        ++cm.at(static_cast<std::size_t>(labels[i]), static_cast<std::size_t>(preds[i]));
    }
    return cm;
}

struct ClassMetrics {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    std::size_t support = 0;
    // 0/0 cases are reported as 0 with the corresponding flag cleared
    bool precision_defined = true, recall_defined = true, f1_defined = true;
};

// Harmonic mean of precision and recall; 0 when both are 0.
inline double f1_score(double precision, double recall) {
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

struct ClassReport {
    std::vector<ClassMetrics> per_class;
    double accuracy = 0.0;
    double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
    double weighted_precision = 0.0, weighted_recall = 0.0, weighted_f1 = 0.0;
};

// Per-class one-vs-rest precision/recall/F1 from the confusion matrix,
// accuracy = trace/total, plus macro and support-weighted aggregates.
// Weighted recall equals accuracy identically.
inline ClassReport class_report(const ConfusionMatrix& cm) {
    if (cm.num_classes == 0 || cm.total() == 0)
        throw std::invalid_argument("class_report: empty confusion matrix");
    const std::size_t c = cm.num_classes, total = cm.total();
    ClassReport rep;
    rep.per_class.resize(c);
    std::size_t trace = 0;
    for (std::size_t k = 0; k < c; ++k) {
        std::size_t tp = cm.at(k, k), fp = 0, fn = 0;
        trace += tp;
        for (std::size_t j = 0; j < c; ++j) {
            if (j != k) {
                fp += cm.at(j, k);
                fn += cm.at(k, j);
            }
        }
        auto& m = rep.per_class[k];
        m.support = tp + fn;
        if (tp + fp == 0) m.precision_defined = false;
        else m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        if (tp + fn == 0) m.recall_defined = false;
        else m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
        m.f1 = f1_score(m.precision, m.recall);
        if (m.precision + m.recall == 0.0) m.f1_defined = false;
    }
    rep.accuracy = static_cast<double>(trace) / static_cast<double>(total);
    for (std::size_t k = 0; k < c; ++k) {
        const auto& m = rep.per_class[k];
        double wgt = static_cast<double>(m.support) / static_cast<double>(total);
        rep.macro_precision += m.precision / static_cast<double>(c);
        rep.macro_recall += m.recall / static_cast<double>(c);
        rep.macro_f1 += m.f1 / static_cast<double>(c);
        rep.weighted_precision += wgt * m.precision;
        rep.weighted_f1 += wgt * m.f1;
    }
    // sum_k (support_k/total)(tp_k/support_k) = trace/total, so weighted
    // recall is the accuracy identically; computed that way to keep the
    // identity exact in floating point
    rep.weighted_recall = rep.accuracy;
    return rep;
}

struct RocPoint { double fpr = 0.0, tpr = 0.0; };
struct PrPoint { double recall = 0.0, precision = 0.0; };

// One-vs-rest ROC for class c, thresholds swept over distinct scores from
// high to low. Points start at (0,0) and end at (1,1); AUC by trapezoid,
// which makes ties count half: AUC = P(s+ > s-) + 0.5 P(s+ = s-).
inline std::pair<std::vector<RocPoint>, double> roc_auc(
    const std::vector<double>& class_scores, const std::vector<int>& labels, int c) {
    if (class_scores.size() != labels.size() || class_scores.empty())
        throw std::invalid_argument("roc_auc: need matching nonempty scores and labels");
    std::size_t pos = 0;
    for (int l : labels) pos += (l == c);
    std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0)
        throw std::runtime_error("roc_auc: curve undefined for class " +
                                 std::to_string(c) + " (" + std::to_string(pos) +
                                 " positives, " + std::to_string(neg) + " negatives)");
    std::vector<std::size_t> order(labels.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return class_scores[a] > class_scores[b];
    });
    std::vector<RocPoint> points{{0.0, 0.0}};
    double auc = 0.0;
    std::size_t tp = 0, fp = 0;
    double prev_tpr = 0.0, prev_fpr = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        double threshold = class_scores[order[i]];
        while (i < order.size() && class_scores[order[i]] == threshold) {
            if (labels[order[i]] == c) ++tp;
            else ++fp;
            ++i;
        }
        double tpr = static_cast<double>(tp) / static_cast<double>(pos);
        double fpr = static_cast<double>(fp) / static_cast<double>(neg);
        points.push_back({fpr, tpr});
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    return {points, auc};
}

// One-vs-rest PR curve with step-interpolated average precision:
// AP = sum over distinct thresholds (descending) of (R_i - R_{i-1}) * P_i.
inline std::pair<std::vector<PrPoint>, double> pr_ap(
    const std::vector<double>& class_scores, const std::vector<int>& labels, int c) {
    if (class_scores.size() != labels.size() || class_scores.empty())
        throw std::invalid_argument("pr_ap: need matching nonempty scores and labels");
    std::size_t pos = 0;
    for (int l : labels) pos += (l == c);
    if (pos == 0)
        throw std::runtime_error("pr_ap: curve undefined for class " +
                                 std::to_string(c) + " (no positives)");
    std::vector<std::size_t> order(labels.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return class_scores[a] > class_scores[b];
    });
    std::vector<PrPoint> points;
    double ap = 0.0, prev_recall = 0.0;
    std::size_t tp = 0, fp = 0, i = 0;
    while (i < order.size()) {
        double threshold = class_scores[order[i]];
        while (i < order.size() && class_scores[order[i]] == threshold) {
            if (labels[order[i]] == c) ++tp;
            else ++fp;
            ++i;
        }
        double recall = static_cast<double>(tp) / static_cast<double>(pos);
        double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        points.push_back({recall, precision});
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return {points, ap};
}

struct ClassCurves {
    bool defined = false;
    std::vector<RocPoint> roc;
    double auc = 0.0;
    std::vector<PrPoint> pr;
    double ap = 0.0;
};

struct EvalReport {
    ClassReport report;
    ConfusionMatrix cm;
    std::vector<ClassCurves> curves;         // indexed by class
    std::vector<int> skipped_classes;        // absent from the test set
    std::vector<std::vector<double>> scores; // softmax per sample
    std::vector<int> labels;
    std::vector<int> preds;
};

// Deterministic full pass over the given samples: softmax scores, argmax
// predictions, confusion matrix, per-class report, and one-vs-rest curves.
// Classes absent from the sample set are flagged and their curves skipped.
inline EvalReport evaluate(Classifier<float>& model,
                           std::optional<PredictorWeights<float>> predictor,
                           const TrainConfig& cfg,
                           const std::vector<GrayImage>& images,
                           const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw std::runtime_error("evaluate: no samples");
    const std::size_t c = model.config.num_classes;
    EvalReport out;
    out.cm = ConfusionMatrix(c);
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
        std::vector<std::size_t> chunk(
            idx.begin() + start,
            idx.begin() + std::min(idx.size(), start + cfg.batch_size));
        auto [x, labels] = gather_batch<float>(images, chunk);
        auto logits = model_logits(model, predictor, cfg, x);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            auto row = logits.data().subspan(i * c, c);
            double mx = row[0];
            for (float v : row) mx = std::max(mx, static_cast<double>(v));
            std::vector<double> prob(c);
            double denom = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                prob[j] = std::exp(static_cast<double>(row[j]) - mx);
                denom += prob[j];
            }
            for (auto& p : prob) p /= denom;
            int pred = static_cast<int>(detail::argmax_row(row));
            out.scores.push_back(std::move(prob));
            out.labels.push_back(labels[i]);
            out.preds.push_back(pred);
        }
    }
    out.cm = confusion(out.preds, out.labels, c);
    out.report = class_report(out.cm);
    out.curves.resize(c);
    for (std::size_t k = 0; k < c; ++k) {
        std::size_t pos = 0;
        for (int l : out.labels) pos += (static_cast<std::size_t>(l) == k);
        if (pos == 0 || pos == out.labels.size()) {
            out.skipped_classes.push_back(static_cast<int>(k));
            continue;
        }
        std::vector<double> sc(out.labels.size());
        for (std::size_t i = 0; i < sc.size(); ++i) sc[i] = out.scores[i][k];
        auto [roc, auc] = roc_auc(sc, out.labels, static_cast<int>(k));
        auto [pr, ap] = pr_ap(sc, out.labels, static_cast<int>(k));
        out.curves[k] = {true, std::move(roc), auc, std::move(pr), ap};
    }
    return out;
}

// --- report serialization ---

inline nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["accuracy"] = r.report.accuracy;
    j["macro"] = {{"precision", r.report.macro_precision},
                  {"recall", r.report.macro_recall},
                  {"f1", r.report.macro_f1}};
    j["weighted"] = {{"precision", r.report.weighted_precision},
                     {"recall", r.report.weighted_recall},
                     {"f1", r.report.weighted_f1}};
    j["classes"] = nlohmann::json::array();
    for (std::size_t k = 0; k < r.report.per_class.size(); ++k) {
        const auto& m = r.report.per_class[k];
        nlohmann::json cj{{"name", class_names()[k]},
                          {"recall", m.recall},
                          {"precision", m.precision},
                          {"f1", m.f1},
                          {"support", m.support},
                          {"precision_defined", m.precision_defined},
                          {"recall_defined", m.recall_defined}};
        if (r.curves.size() > k && r.curves[k].defined) {
            cj["auc"] = r.curves[k].auc;
            cj["ap"] = r.curves[k].ap;
        }
        j["classes"].push_back(cj);
    }
    j["skipped_classes"] = r.skipped_classes;
    nlohmann::json cm = nlohmann::json::array();
    for (std::size_t t = 0; t < r.cm.num_classes; ++t) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t p = 0; p < r.cm.num_classes; ++p) row.push_back(r.cm.at(t, p));
        cm.push_back(row);
    }
    j["confusion_matrix"] = cm;
    return j;
}

// Per-class table: class,recall,precision,f1,support
inline void write_class_report_csv(const std::string& path, const ClassReport& rep) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write report: " + path);
    f << "class,recall,precision,f1,support\n";
    char line[160];
    for (std::size_t k = 0; k < rep.per_class.size(); ++k) {
        const auto& m = rep.per_class[k];
        std::snprintf(line, sizeof line, "%s,%.4f,%.4f,%.4f,%zu\n",
                      class_names()[k].c_str(), m.recall, m.precision, m.f1, m.support);
        f << line;
    }
}

inline void write_confusion_csv(const std::string& path, const ConfusionMatrix& cm) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write confusion matrix: " + path);
    for (std::size_t t = 0; t < cm.num_classes; ++t) {
        for (std::size_t p = 0; p < cm.num_classes; ++p)
            f << cm.at(t, p) << (p + 1 < cm.num_classes ? "," : "\n");
    }
}

inline void write_curves_csv(const std::string& dir, const EvalReport& r) {
    char line[96];
    for (std::size_t k = 0; k < r.curves.size(); ++k) {
        if (!r.curves[k].defined) continue;
        {
            std::ofstream f(dir + "/roc_" + class_names()[k] + ".csv");
            f << "fpr,tpr\n";
            for (const auto& p : r.curves[k].roc) {
                std::snprintf(line, sizeof line, "%.10f,%.10f\n", p.fpr, p.tpr);
                f << line;
            }
        }
        {
            std::ofstream f(dir + "/pr_" + class_names()[k] + ".csv");
            f << "recall,precision\n";
            for (const auto& p : r.curves[k].pr) {
                std::snprintf(line, sizeof line, "%.10f,%.10f\n", p.recall, p.precision);
                f << line;
            }
        }
    }
}

} // namespace acam
