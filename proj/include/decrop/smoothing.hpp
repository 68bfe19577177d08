#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "decrop/rng.hpp"
#include "decrop/stats.hpp"
#include "decrop/tensor.hpp"

namespace decrop {

struct NoiseModel {
    double sigma = 0.25;
};

struct CertifyConfig {
    int n0 = 100;      // selection pass draws
    int n = 10000;     // estimation pass draws
    double failure_prob = 0.001;
    int batch_size = 100;

    void validate() const {
        if (n0 < 1 || n < n0) throw std::invalid_argument("CertifyConfig: need n >= n0 >= 1");
        if (!(failure_prob > 0.0 && failure_prob < 1.0))
            throw std::invalid_argument("CertifyConfig: failure_prob must lie in (0,1)");
        if (batch_size < 1) throw std::invalid_argument("CertifyConfig: batch_size must be >= 1");
    }
};

constexpr int kAbstain = -1;

struct CertificationResult {
    int predicted_class = kAbstain;
    double radius = 0.0;
    double pa_lower = 0.0;
    std::vector<int64_t> counts; // per-class tallies from the n-sample pass
    double elapsed = 0.0;        // seconds

    bool abstained() const { return predicted_class == kAbstain; }
};

// Takes a batch of (noisy) inputs, returns predicted class per row.
using BatchClassifier = std::function<std::vector<int>(const TensorData&)>;

// x + eps with eps ~ N(0, sigma^2 I); sigma = 0 returns x bitwise.
inline TensorData gaussian_perturb(const TensorData& x, const NoiseModel& noise, Rng rng) {
    if (noise.sigma < 0.0) throw std::invalid_argument("gaussian_perturb: sigma must be nonnegative");
    TensorData out = x;
    if (noise.sigma == 0.0) return out;
    for (auto& v : out.v) v += float(noise.sigma * rng.normal());
    return out;
}

// Monte Carlo class counts for the composed classifier under noise. The
// noise of draw i comes from rng.derive(i), so counts are invariant to
// batch_size and to any parallel schedule.
inline std::vector<int64_t> sample_under_noise(const BatchClassifier& model, const TensorData& x, int num_classes,
                                               const NoiseModel& noise, int count, int batch_size, const Rng& rng) {
    if (count < 1) throw std::invalid_argument("sample_under_noise: count must be >= 1");
    std::vector<int64_t> counts(size_t(num_classes), 0);
    int64_t sample_elems = numel(x.shape);
    int done = 0;
    while (done < count) {
        int b = std::min(batch_size, count - done);
        Shape bs = x.shape;
        bs.insert(bs.begin(), b);
        TensorData batch = TensorData::zeros(bs);
        for (int i = 0; i < b; ++i) {
            float* dst = batch.v.data() + int64_t(i) * sample_elems;
            std::copy_n(x.v.begin(), sample_elems, dst);
            if (noise.sigma > 0.0) {
                Rng draw = rng.derive(uint64_t(done + i));
                for (int64_t j = 0; j < sample_elems; ++j) dst[j] += float(noise.sigma * draw.normal());
            }
        }
        std::vector<int> labels = model(batch);
        for (int lab : labels) {
            if (lab < 0 || lab >= num_classes) throw std::runtime_error("sample_under_noise: label out of range");
            ++counts[size_t(lab)];
        }
        done += b;
    }
    return counts;
}

inline double lower_conf_bound(int64_t k, int64_t n, double failure_prob) {
    return clopper_pearson_lower(k, n, failure_prob);
}

// Practical one-probability certified radius (abstains at p <= 1/2 upstream).
inline double certified_radius(double sigma, double pa_lower) { return sigma * inv_gaussian_cdf(pa_lower); }

// Two-probability form of the certified radius.
inline double certified_radius_two_sided(double sigma, double p1_lower, double p2_upper) {
    return sigma / 2.0 * (inv_gaussian_cdf(p1_lower) - inv_gaussian_cdf(p2_upper));
}

// CERTIFY: selection pass (n0 draws) picks the candidate class, estimation
// pass (n draws) lower-bounds its probability; abstain when the bound is
// not better than a coin flip.
inline CertificationResult certify(const BatchClassifier& model, const TensorData& x, int num_classes,
                                   const NoiseModel& noise, const CertifyConfig& cfg, const Rng& rng) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();
    std::vector<int64_t> counts0 =
        sample_under_noise(model, x, num_classes, noise, cfg.n0, cfg.batch_size, rng.derive(1));
    int cand = 0;
    for (int c = 1; c < num_classes; ++c)
        if (counts0[size_t(c)] > counts0[size_t(cand)]) cand = c;

    CertificationResult res;
    res.counts = sample_under_noise(model, x, num_classes, noise, cfg.n, cfg.batch_size, rng.derive(2));
    res.pa_lower = lower_conf_bound(res.counts[size_t(cand)], cfg.n, cfg.failure_prob);
    if (res.pa_lower > 0.5) {
        res.predicted_class = cand;
        res.radius = certified_radius(noise.sigma, res.pa_lower);
    } else {
        res.predicted_class = kAbstain;
        res.radius = 0.0;
    }
    res.elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

// Approximate certified accuracy: fraction with correct prediction and
// radius >= r, per grid radius. Row r = 0 is "standard certified".
inline std::vector<double> approx_certified_accuracy(const std::vector<std::pair<CertificationResult, int>>& results,
                                                     const std::vector<double>& radii) {
    if (results.empty()) throw std::invalid_argument("approx_certified_accuracy: no results");
    std::vector<double> out;
    out.reserve(radii.size());
    for (double r : radii) {
        int64_t hits = 0;
        for (const auto& [res, label] : results)
            if (!res.abstained() && res.predicted_class == label && res.radius >= r) ++hits;
        out.push_back(double(hits) / double(results.size()));
    }
    return out;
}

// ---- certification log (tab-separated) ----

inline std::string format_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return buf;
}

inline void write_certification_header(std::ostream& os) {
    os << "idx\ttrue_label\tpredicted_class\tradius\tcorrect\tpa_lower\telapsed_seconds\n";
}

// wall_times=false zeroes the elapsed column so a fixed seed yields a
// byte-identical log.
inline void write_certification_row(std::ostream& os, int idx, int true_label, const CertificationResult& r,
                                    bool wall_times) {
    int correct = (!r.abstained() && r.predicted_class == true_label) ? 1 : 0;
    os << idx << '\t' << true_label << '\t' << r.predicted_class << '\t' << format_fixed(r.radius, 6) << '\t'
       << correct << '\t' << format_fixed(r.pa_lower, 6) << '\t'
       << format_fixed(wall_times ? r.elapsed : 0.0, 6) << '\n';
}

} // namespace decrop
