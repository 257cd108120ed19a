#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "acam/image.hpp"
#include "acam/rng.hpp"
#include "acam/tensor.hpp"

namespace acam {

enum class Split { train, test, unassigned };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::test: return "test";
        default: return "unassigned";
    }
}

struct ManifestRecord {
    std::string image_path;
    int label = 0;
    std::string patient_id;
    Split split = Split::unassigned;
};

// Class-name table shared by the synthetic and real-data paths.
inline const std::vector<std::string>& class_names() {
    static const std::vector<std::string> names{
        "fetal_abdomen", "fetal_brain", "fetal_femur",
        "fetal_thorax",  "maternal_cervix", "other"};
    return names;
}

struct PhantomSpec {
    std::size_t num_classes = 6;
    std::size_t images_per_class = 100;
    std::size_t height = 64;
    std::size_t width = 64;
    double contrast_low = 0.15;
    double contrast_high = 0.6;
    double speckle_strength = 0.25;
    std::size_t images_per_patient = 5;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_classes < 2 || num_classes > 6)
            throw std::domain_error("PhantomSpec: num_classes must be in [2,6]");
        if (images_per_class < 1)
            throw std::domain_error("PhantomSpec: images_per_class must be >= 1");
        if (height < 8 || width < 8)
            throw std::domain_error("PhantomSpec: image size must be >= 8");
        if (!(contrast_low > 0.0) || contrast_low > contrast_high || contrast_high > 1.0)
            throw std::domain_error("PhantomSpec: need 0 < contrast_low <= contrast_high <= 1");
        if (speckle_strength < 0.0)
            throw std::domain_error("PhantomSpec: speckle_strength must be >= 0");
        if (images_per_patient < 1)
            throw std::domain_error("PhantomSpec: images_per_patient must be >= 1");
    }
};

namespace detail {

// One parametric shape family per class, rendered as foreground weight in
// [0,1] at pixel (y,x) on the unit square.
inline double shape_weight(int cls, double y, double x, const std::array<double, 6>& p) {
    auto ell = [](double dy, double dx, double ry, double rx) {
        return (dy * dy) / (ry * ry) + (dx * dx) / (rx * rx);
    };
    switch (cls) {
        case 0: { // elliptical ring (abdomen stand-in)
            double d = ell(y - 0.5 - p[0], x - 0.5 - p[1], 0.28 + p[2], 0.33 + p[3]);
            return (d < 1.0 && d > 0.45) ? 1.0 : 0.0;
        }
        case 1: { // filled ellipse with a dark midline (brain stand-in)
            double d = ell(y - 0.5 - p[0], x - 0.5 - p[1], 0.3 + p[2], 0.36 + p[3]);
            if (d >= 1.0) return 0.0;
            return std::abs(x - 0.5 - p[1]) < 0.02 ? 0.2 : 1.0;
        }
        case 2: { // thin tilted bar (femur stand-in)
            double c = std::cos(p[4]), s = std::sin(p[4]);
            double u = c * (x - 0.5 - p[1]) + s * (y - 0.5 - p[0]);
            double v = -s * (x - 0.5 - p[1]) + c * (y - 0.5 - p[0]);
            return (std::abs(u) < 0.32 + p[2] && std::abs(v) < 0.05) ? 1.0 : 0.0;
        }
        case 3: { // disc pair (thorax stand-in)
            double d1 = ell(y - 0.5 - p[0], x - 0.32 - p[1], 0.16 + p[2], 0.16 + p[2]);
            double d2 = ell(y - 0.5 + p[0], x - 0.68 + p[1], 0.13 + p[3], 0.13 + p[3]);
            return (d1 < 1.0 || d2 < 1.0) ? 1.0 : 0.0;
        }
        case 4: { // wedge opening to the right (cervix stand-in)
            double dy = std::abs(y - 0.5 - p[0]);
            double spread = 0.08 + (0.42 + p[2]) * (x - 0.15);
            return (x > 0.15 + p[1] && x < 0.85 && dy < spread * 0.55) ? 1.0 : 0.0;
        }
        default: { // three random blobs ("other")
            double acc = 0.0;
            acc += std::exp(-ell(y - 0.3 - p[0], x - 0.3 - p[1], 0.12, 0.12));
            acc += std::exp(-ell(y - 0.7 - p[2], x - 0.6 - p[3], 0.1, 0.14));
            acc += std::exp(-ell(y - 0.45 - p[4], x - 0.75 - p[5], 0.09, 0.09));
            return acc > 0.55 ? 1.0 : 0.0;
        }
    }
}

// Separable 3x3 binomial blur with clamped borders.
inline void blur3(std::vector<double>& img, std::size_t h, std::size_t w) {
    std::vector<double> tmp(img.size());
    auto clampi = [](std::ptrdiff_t v, std::ptrdiff_t n) {
        return v < 0 ? 0 : (v >= n ? n - 1 : v);
    };
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int d = -1; d <= 1; ++d)
                acc += img[y * w + clampi(static_cast<std::ptrdiff_t>(x) + d, w)] *
                       (d == 0 ? 2.0 : 1.0);
            tmp[y * w + x] = acc / 4.0;
        }
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int d = -1; d <= 1; ++d)
                acc += tmp[clampi(static_cast<std::ptrdiff_t>(y) + d, h) * w + x] *
                       (d == 0 ? 2.0 : 1.0);
            img[y * w + x] = acc / 4.0;
        }
}

} // namespace detail

struct Dataset {
    std::vector<GrayImage> images;
    std::vector<ManifestRecord> records;
};

// Renders a deterministic low-contrast phantom dataset: one shape family per
// class, per-image random foreground/background contrast, multiplicative
// mean-1 speckle, and a light blur. Patient ids are assigned in consecutive
// blocks within each class so patient-disjoint splits are meaningful.
inline Dataset generate_phantoms(const PhantomSpec& spec) {
    spec.validate();
    Dataset ds;
    std::size_t patient_counter = 0;
    for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
        for (std::size_t idx = 0; idx < spec.images_per_class; ++idx) {
            if (idx % spec.images_per_patient == 0) ++patient_counter;
            SplitMix64 rng(derive_seed(spec.seed, cls * 1000003ULL + idx));

            std::array<double, 6> geom{};
            for (auto& g : geom) g = rng.uniform(-0.05, 0.05);
            geom[4] = rng.uniform(-0.6, 0.6); // bar angle / blob offset
            double contrast = rng.uniform(spec.contrast_low, spec.contrast_high);
            double bg_hi = std::min(0.45, 1.0 - contrast);
            double bg = bg_hi <= 0.0 ? 0.0 : rng.uniform(std::min(0.2, bg_hi), bg_hi);

            std::vector<double> img(spec.height * spec.width);
            for (std::size_t y = 0; y < spec.height; ++y)
                for (std::size_t x = 0; x < spec.width; ++x) {
                    double fy = (y + 0.5) / spec.height;
                    double fx = (x + 0.5) / spec.width;
                    double wgt = detail::shape_weight(static_cast<int>(cls), fy, fx, geom);
                    img[y * spec.width + x] = bg + contrast * wgt;
                }
            if (spec.speckle_strength > 0.0)
                for (auto& v : img) {
                    double n = 1.0 + spec.speckle_strength * rng.next_gaussian();
                    v *= (n < 0.0 ? 0.0 : n);
                }
            detail::blur3(img, spec.height, spec.width);

            GrayImage out;
            out.height = spec.height;
            out.width = spec.width;
            out.pixels.resize(img.size());
            for (std::size_t i = 0; i < img.size(); ++i) {
                double v = img[i];
                out.pixels[i] = static_cast<float>(v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v));
            }
            char id[64];
            std::snprintf(id, sizeof id, "%s_%04zu", class_names()[cls].c_str(), idx);
            out.id = id;
            out.label = static_cast<int>(cls);
            char pid[32];
            std::snprintf(pid, sizeof pid, "p%05zu", patient_counter);
            out.patient_id = pid;

            ManifestRecord rec;
            rec.image_path = out.id + ".pgm";
            rec.label = static_cast<int>(cls);
            rec.patient_id = pid;
            ds.images.push_back(std::move(out));
            ds.records.push_back(std::move(rec));
        }
    }
    return ds;
}

// --- manifest CSV: image_name,patient_id,class,split (UTF-8, header row) ---

inline void save_manifest(const std::string& path,
                          const std::vector<ManifestRecord>& records) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write manifest: " + path);
    f << "image_name,patient_id,class,split\n";
    for (const auto& r : records)
        f << r.image_path << ',' << r.patient_id << ','
          << class_names().at(static_cast<std::size_t>(r.label)) << ','
          << split_name(r.split) << '\n';
}

inline std::vector<ManifestRecord> load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open manifest: " + path);
    std::string line;
    if (!std::getline(f, line))
        throw std::runtime_error(path + ": empty manifest, header row required");
    auto split_csv = [](const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ',')) out.push_back(tok);
        if (!s.empty() && s.back() == ',') out.push_back("");
        return out;
    };
    auto header = split_csv(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const char* req : {"image_name", "patient_id", "class"})
        if (!col.count(req))
            throw std::runtime_error(path + ": missing required column '" +
                                     std::string(req) + "'");
    std::vector<ManifestRecord> records;
    std::size_t row = 1;
    while (std::getline(f, line)) {
        ++row;
        if (line.empty()) continue;
        auto cells = split_csv(line);
        if (cells.size() < header.size())
            throw std::runtime_error(path + ": row " + std::to_string(row) +
                                     " has " + std::to_string(cells.size()) +
                                     " cells, expected " + std::to_string(header.size()));
        ManifestRecord r;
        r.image_path = cells[col["image_name"]];
        if (r.image_path.empty())
            throw std::runtime_error(path + ": row " + std::to_string(row) +
                                     " has an empty image_name");
        r.patient_id = cells[col["patient_id"]];
        const std::string& cname = cells[col["class"]];
        auto it = std::find(class_names().begin(), class_names().end(), cname);
        if (it == class_names().end())
            throw std::runtime_error(path + ": row " + std::to_string(row) +
                                     ": unknown class '" + cname + "'");
        r.label = static_cast<int>(it - class_names().begin());
        if (col.count("split")) {
            const std::string& s = cells[col["split"]];
            if (s == "train") r.split = Split::train;
            else if (s == "test") r.split = Split::test;
            else if (s == "unassigned" || s.empty()) r.split = Split::unassigned;
            else
                throw std::runtime_error(path + ": row " + std::to_string(row) +
                                         ": unknown split '" + s + "'");
        }
        records.push_back(std::move(r));
    }
    return records;
}

// Patient-disjoint split. Patients are shuffled by seed; the train set is
// the shuffled prefix whose image fraction is closest to train_fraction.
// No patient ever appears on both sides.
inline void patient_split(std::vector<ManifestRecord>& records,
                          double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0) || !(train_fraction < 1.0))
        throw std::domain_error("patient_split: train_fraction must be in (0,1)");
    std::map<std::string, std::size_t> counts;
    for (const auto& r : records) ++counts[r.patient_id];
    if (counts.size() < 2)
        throw std::runtime_error("patient_split: need at least 2 patients, have " +
                                 std::to_string(counts.size()));
    std::vector<std::string> patients;
    for (const auto& [pid, n] : counts) patients.push_back(pid);
    SplitMix64 rng(derive_seed(seed, 0x51ULL));
    rng.shuffle(patients);

    const double total = static_cast<double>(records.size());
    std::size_t best_len = 1, cum = 0;
    double best_err = 1e300;
    std::size_t running = 0;
    for (std::size_t len = 1; len < patients.size(); ++len) {
        running += counts[patients[len - 1]];
        double err = std::abs(static_cast<double>(running) / total - train_fraction);
        if (err < best_err) {
            best_err = err;
            best_len = len;
            cum = running;
        }
    }
    (void)cum;
    std::map<std::string, Split> assign;
    for (std::size_t i = 0; i < patients.size(); ++i)
        assign[patients[i]] = i < best_len ? Split::train : Split::test;
    for (auto& r : records) r.split = assign[r.patient_id];
}

// Image-level split, kept for fidelity experiments where patient provenance
// is ignored.
inline void image_split(std::vector<ManifestRecord>& records,
                        double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0) || !(train_fraction < 1.0))
        throw std::domain_error("image_split: train_fraction must be in (0,1)");
    std::vector<std::size_t> order(records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    SplitMix64 rng(derive_seed(seed, 0x52ULL));
    rng.shuffle(order);
    std::size_t n_train = static_cast<std::size_t>(
        std::lround(train_fraction * static_cast<double>(records.size())));
    for (std::size_t i = 0; i < order.size(); ++i)
        records[order[i]].split = i < n_train ? Split::train : Split::test;
}

// Deterministic batch order for one epoch: shuffling is keyed by
// (seed, epoch) only, the final short batch is kept.
inline std::vector<std::vector<std::size_t>> batch_order(std::size_t count,
                                                         std::size_t batch_size,
                                                         bool shuffle,
                                                         std::uint64_t seed,
                                                         std::size_t epoch) {
    if (count == 0) throw std::runtime_error("batch_order: empty record list");
    if (batch_size < 1) throw std::domain_error("batch_order: batch_size must be >= 1");
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    if (shuffle) {
        SplitMix64 rng(derive_seed(seed, 0xba7c4ULL + epoch));
        rng.shuffle(order);
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < count; start += batch_size) {
        std::size_t end = std::min(count, start + batch_size);
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

// Stacks the selected images into a [B,1,H,W] tensor plus labels.
template <typename T>
std::pair<Tensor<T>, std::vector<int>> gather_batch(
    const std::vector<GrayImage>& images, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw std::runtime_error("gather_batch: empty batch");
    const std::size_t h = images[idx[0]].height, w = images[idx[0]].width;
    std::vector<T> data(idx.size() * h * w);
    std::vector<int> labels(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const GrayImage& img = images[idx[i]];
        if (img.height != h || img.width != w)
            throw ShapeError("gather_batch: image size mismatch in batch");
        for (std::size_t j = 0; j < h * w; ++j)
            data[i * h * w + j] = static_cast<T>(img.pixels[j]);
        labels[i] = img.label.value_or(0);
    }
    return {Tensor<T>::from_data({idx.size(), 1, h, w}, std::move(data)),
            std::move(labels)};
}

// Loads every image referenced by a manifest, paths relative to `root`.
inline Dataset load_dataset(const std::string& manifest_path, const std::string& root) {
    Dataset ds;
    ds.records = load_manifest(manifest_path);
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        GrayImage img;
        try {
            img = read_pgm(root + "/" + r.image_path);
        } catch (const std::exception& e) {
            throw std::runtime_error("manifest row " + std::to_string(i + 2) + ": " +
                                     e.what());
        }
        img.id = r.image_path;
        img.label = r.label;
        img.patient_id = r.patient_id;
        ds.images.push_back(std::move(img));
    }
    return ds;
}

} // namespace acam
