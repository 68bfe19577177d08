#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "decrop/io.hpp"
#include "decrop/rng.hpp"
#include "decrop/tensor.hpp"

namespace decrop {

struct Dataset {
    TensorData images; // [N,C,H,W] in [0,1]
    std::vector<int> labels;
    int num_classes = 0;
    std::string split;      // "train" / "test"
    std::string provenance; // generator seed or file path

    int size() const { return images.shape.empty() ? 0 : images.shape[0]; }
    int channels() const { return images.shape[1]; }
    int image_size() const { return images.shape[2]; }

    TensorData sample(int i) const {
        int64_t n = int64_t(channels()) * image_size() * image_size();
        TensorData t = TensorData::zeros({channels(), image_size(), image_size()});
        std::copy_n(images.v.begin() + int64_t(i) * n, n, t.v.begin());
        return t;
    }

    TensorData batch(const std::vector<int>& idx) const {
        int64_t n = int64_t(channels()) * image_size() * image_size();
        TensorData t = TensorData::zeros({int(idx.size()), channels(), image_size(), image_size()});
        for (size_t b = 0; b < idx.size(); ++b)
            std::copy_n(images.v.begin() + int64_t(idx[b]) * n, n, t.v.begin() + int64_t(b) * n);
        return t;
    }
};

// Class-balanced k% subsample.
struct LimitedDataset {
    std::vector<int> indices; // strictly increasing, duplicate-free
    double k_percent = 0.0;
    std::vector<int> per_class_counts;

    int size() const { return int(indices.size()); }
};

inline LimitedDataset subsample_balanced(const Dataset& d, double k_percent, uint64_t seed) {
    if (!(k_percent > 0.0 && k_percent <= 100.0))
        throw std::invalid_argument("subsample_balanced: k_percent must lie in (0,100]");
    std::vector<std::vector<int>> by_class(size_t(d.num_classes));
    for (int i = 0; i < d.size(); ++i) by_class[size_t(d.labels[size_t(i)])].push_back(i);

    LimitedDataset out;
    out.k_percent = k_percent;
    out.per_class_counts.resize(size_t(d.num_classes));
    Rng rng = Rng(seed).derive(0xba1a);
    for (int c = 0; c < d.num_classes; ++c) {
        auto& pool = by_class[size_t(c)];
        if (pool.empty())
            throw std::invalid_argument("subsample_balanced: class " + std::to_string(c) + " has no samples");
        int take = std::max(1, int(std::floor(k_percent / 100.0 * double(pool.size()))));
        Rng crng = rng.derive(uint64_t(c));
        std::vector<int> shuffled = pool;
        crng.shuffle(shuffled);
        shuffled.resize(size_t(take));
        out.indices.insert(out.indices.end(), shuffled.begin(), shuffled.end());
        out.per_class_counts[size_t(c)] = take;
    }
    std::sort(out.indices.begin(), out.indices.end());
    return out;
}

struct SyntheticSpec {
    int num_classes = 10;
    int per_class = 200;      // train samples per class
    int test_per_class = 50;  // test samples per class
    int image_size = 12;
    uint64_t seed = 7;
};

namespace detail {

// 10 distinct class colors.
inline const float kPalette[10][3] = {
    {0.95f, 0.25f, 0.20f}, {0.20f, 0.85f, 0.25f}, {0.20f, 0.35f, 0.95f}, {0.95f, 0.85f, 0.20f},
    {0.85f, 0.25f, 0.90f}, {0.20f, 0.90f, 0.90f}, {0.95f, 0.55f, 0.15f}, {0.55f, 0.30f, 0.10f},
    {0.60f, 0.95f, 0.55f}, {0.50f, 0.50f, 0.95f},
};

// One class-conditioned image: oriented grating plus a class-colored blob,
// both with per-sample jitter. Amplitudes are sized so that sigma=0.25
// Gaussian noise meaningfully damages an undenoised classifier.
inline void render_sample(float* out, int S, int cls, int num_classes, Rng& rng) {
    double theta = 3.14159265358979323846 * double(cls) / double(num_classes);
    double freq = 2.0 + double(cls % 3);
    double phase = rng.uniform(0.0, 6.2831853);
    double amp = 0.22 * rng.uniform(0.85, 1.15);
    double cx = rng.uniform(0.3, 0.7) * S;
    double cy = rng.uniform(0.3, 0.7) * S;
    double rad = rng.uniform(0.18, 0.28) * S;
    double blob_amp = 0.45 * rng.uniform(0.85, 1.15);
    const float* color = kPalette[cls % 10];
    double ct = std::cos(theta), st = std::sin(theta);
    for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) {
            double u = (i * ct + j * st) / double(S);
            double g = amp * std::sin(6.2831853 * freq * u + phase);
            double d2 = ((i - cy) * (i - cy) + (j - cx) * (j - cx)) / (rad * rad);
            double blob = blob_amp * std::exp(-d2);
            for (int c = 0; c < 3; ++c) {
                double v = 0.45 + g + blob * (color[c] - 0.45) + 0.02 * rng.normal();
                out[(int64_t(c) * S + i) * S + j] = float(std::clamp(v, 0.0, 1.0));
            }
        }
}

inline Dataset make_split(const SyntheticSpec& spec, int per_class, const std::string& split, uint64_t stream) {
    int S = spec.image_size, C = spec.num_classes;
    Dataset d;
    d.num_classes = C;
    d.split = split;
    d.provenance = "synthetic(seed=" + std::to_string(spec.seed) + ")";
    d.images = TensorData::zeros({C * per_class, 3, S, S});
    d.labels.resize(size_t(C) * per_class);
    Rng base = Rng(spec.seed).derive(stream);
    int64_t stride = int64_t(3) * S * S;
    for (int cls = 0; cls < C; ++cls)
        for (int k = 0; k < per_class; ++k) {
            int idx = cls * per_class + k;
            Rng r = base.derive(uint64_t(cls), uint64_t(k));
            render_sample(d.images.v.data() + idx * stride, S, cls, C, r);
            d.labels[size_t(idx)] = cls;
        }
    return d;
}

} // namespace detail

inline std::pair<Dataset, Dataset> make_synthetic_dataset(const SyntheticSpec& spec) {
    if (spec.image_size < 8) throw std::invalid_argument("make_synthetic_dataset: image_size must be >= 8");
    if (spec.num_classes < 2 || spec.num_classes > 10)
        throw std::invalid_argument("make_synthetic_dataset: num_classes must lie in [2,10]");
    return {detail::make_split(spec, spec.per_class, "train", 1), detail::make_split(spec, spec.test_per_class, "test", 2)};
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& d) {
    TensorData labels = TensorData::zeros({d.size()});
    for (int i = 0; i < d.size(); ++i) labels.v[size_t(i)] = float(d.labels[size_t(i)]);
    json meta;
    meta["kind"] = "dataset";
    meta["num_classes"] = d.num_classes;
    meta["split"] = d.split;
    meta["provenance"] = d.provenance;
    save_tensors(path, {{"images", d.images}, {"labels", labels}}, meta);
}

inline Dataset load_dataset(const std::filesystem::path& path) {
    TensorContainer c = load_tensors(path);
    Dataset d;
    d.images = c.get("images");
    const TensorData& labels = c.get("labels");
    d.labels.resize(labels.v.size());
    for (size_t i = 0; i < labels.v.size(); ++i) d.labels[i] = int(labels.v[i]);
    d.num_classes = c.meta.at("num_classes").get<int>();
    d.split = c.meta.value("split", "");
    d.provenance = path.string();
    return d;
}

} // namespace decrop
