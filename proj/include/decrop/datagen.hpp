#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "decrop/data.hpp"
#include "decrop/models.hpp"
#include "decrop/rng.hpp"
#include "decrop/tensor.hpp"

namespace decrop {

struct AttackConfig {
    float epsilon_inf = 0.1f;
    int steps = 20;
    float step_size = 0.0125f; // 2.5 * epsilon / steps
    bool random_start = false;

    void validate() const {
        if (!(epsilon_inf > 0.0f)) throw std::invalid_argument("AttackConfig: epsilon_inf must be > 0");
        if (step_size > epsilon_inf) throw std::invalid_argument("AttackConfig: step_size must be <= epsilon_inf");
        if (steps < 1) throw std::invalid_argument("AttackConfig: steps must be >= 1");
    }
};

struct InterpolationConfig {
    double alpha = 0.5;
    int opt_steps = 200;
    float opt_lr = 0.01f;
    float box_lo = 0.0f;
    float box_hi = 1.0f;
};

struct GeneratedTriplet {
    TensorData x_o;
    int y_pseudo = 0;
    TensorData x_b;
    TensorData logit_int;
    TensorData x_int;
    bool flip_succeeded = false;
    double final_mse = 0.0;
    double initial_mse = 0.0;
};

namespace detail {

inline void project_linf_box(TensorData& x, const TensorData& center, float eps, float lo, float hi) {
    for (size_t i = 0; i < x.v.size(); ++i) {
        float c = center.v[i];
        float v = std::clamp(x.v[i], c - eps, c + eps);
        // c +/- eps rounds to nearest float and may land half an ulp outside
        // the ball; nudge back so |v - c| <= eps holds exactly.
        while (v - c > eps || c - v > eps) v = std::nextafter(v, c);
        x.v[i] = std::clamp(v, lo, hi); // box clamp only ever moves toward c
    }
}

} // namespace detail

struct PgdResult {
    TensorData x_b;
    bool flip_succeeded = false;
};

// Untargeted l-inf PGD maximizing the cross-entropy of the classifier's own
// prediction y. Returns the first iterate that flips the label; if none
// flips, the max-loss iterate (still inside the eps ball).
inline PgdResult pgd_attack(const ClassifierModel& bc, const TensorData& x, int y, const AttackConfig& cfg,
                            Rng rng = Rng(0)) {
    cfg.validate();
    Shape batch_shape = x.shape;
    batch_shape.insert(batch_shape.begin(), 1);
    TensorData cur = x;
    if (cfg.random_start)
        for (auto& v : cur.v) v += float(rng.uniform(-double(cfg.epsilon_inf), double(cfg.epsilon_inf)));
    detail::project_linf_box(cur, x, cfg.epsilon_inf, 0.0f, 1.0f);

    TensorData best = cur;
    double best_loss = -1.0;
    for (int step = 0; step <= cfg.steps; ++step) {
        Tape tape;
        TRef xin = tape.leaf(TensorData{batch_shape, cur.v}, true);
        ClassifierOut out = classifier_forward(tape, bc, xin);
        TensorData logits{out.logits->shape, out.logits->val};
        if (argmax_rows(logits)[0] != y) return {cur, true};
        TRef loss = tape.softmax_cross_entropy(out.logits, {y});
        if (double(loss->val[0]) > best_loss) {
            best_loss = loss->val[0];
            best = cur;
        }
        if (step == cfg.steps) break;
        tape.backward(loss);
        for (size_t i = 0; i < cur.v.size(); ++i) {
            float g = xin->grad[i];
            cur.v[i] += cfg.step_size * (g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f));
        }
        detail::project_linf_box(cur, x, cfg.epsilon_inf, 0.0f, 1.0f);
    }
    return {best, false};
}

// Logit_int = alpha * logit_o + (1 - alpha) * logit_b.
inline TensorData interpolate_logits(const TensorData& logit_o, const TensorData& logit_b, double alpha) {
    if (logit_o.shape != logit_b.shape) throw std::invalid_argument("interpolate_logits: shape mismatch");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("interpolate_logits: alpha must lie in [0,1]");
    TensorData out = logit_o;
    for (size_t i = 0; i < out.v.size(); ++i)
        out.v[i] = float(alpha * double(logit_o.v[i]) + (1.0 - alpha) * double(logit_b.v[i]));
    return out;
}

struct SynthResult {
    TensorData x_int;
    double final_mse = 0.0;
    double initial_mse = 0.0;
};

// Gradient descent on the input so that B_c(x) matches the interpolated
// logit target; starts at x_o, projects into the pixel box each step, and
// returns the best iterate by loss.
inline SynthResult synthesize_interpolated(const ClassifierModel& bc, const TensorData& x_o,
                                           const TensorData& logit_target, const InterpolationConfig& cfg) {
    Shape batch_shape = x_o.shape;
    batch_shape.insert(batch_shape.begin(), 1);
    Shape target_shape = logit_target.shape;
    if (target_shape.size() == 1) target_shape.insert(target_shape.begin(), 1);

    TensorData cur = x_o;
    TensorData best = cur;
    double best_loss = -1.0, initial = -1.0;
    // adaptive-moment updates on the pixels; plain descent stalls on this
    // objective long before the target tolerance
    std::vector<double> m(cur.v.size(), 0.0), v(cur.v.size(), 0.0);
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int step = 0; step <= cfg.opt_steps; ++step) {
        Tape tape;
        TRef xin = tape.leaf(TensorData{batch_shape, cur.v}, true);
        ClassifierOut out = classifier_forward(tape, bc, xin);
        TRef target = tape.leaf(TensorData{target_shape, logit_target.v}, false);
        TRef loss = tape.mean(tape.square(tape.sub(out.logits, target)));
        double l = loss->val[0];
        if (!std::isfinite(l))
            throw std::runtime_error("synthesize_interpolated: non-finite loss at step " + std::to_string(step));
        if (initial < 0.0) initial = l;
        if (best_loss < 0.0 || l < best_loss) {
            best_loss = l;
            best = cur;
        }
        if (step == cfg.opt_steps) break;
        tape.backward(loss);
        double bc1 = 1.0 - std::pow(b1, step + 1), bc2 = 1.0 - std::pow(b2, step + 1);
        for (size_t i = 0; i < cur.v.size(); ++i) {
            double g = xin->grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            cur.v[i] = std::clamp(cur.v[i] - float(cfg.opt_lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps)),
                                  cfg.box_lo, cfg.box_hi);
        }
    }
    return {best, best_loss, initial};
}

// Stage 1: one boundary and one interpolated sample per limited sample,
// generated once before training. Output order follows input order.
inline std::vector<GeneratedTriplet> generate_dataset(const ClassifierModel& bc, const Dataset& data,
                                                      const LimitedDataset& limited, const AttackConfig& acfg,
                                                      const InterpolationConfig& icfg, uint64_t seed) {
    std::vector<GeneratedTriplet> out;
    out.reserve(limited.indices.size());
    Rng base(seed);
    for (size_t i = 0; i < limited.indices.size(); ++i) {
        int idx = limited.indices[i];
        GeneratedTriplet t;
        t.x_o = data.sample(idx);
        TensorData logits_o = classifier_logits(bc, TensorData{Shape{1, data.channels(), data.image_size(),
                                                                     data.image_size()},
                                                               t.x_o.v});
        logits_o.shape = {data.num_classes};
        t.y_pseudo = argmax_axis(TensorData{{1, data.num_classes}, logits_o.v}, 1)[0];

        PgdResult pgd = pgd_attack(bc, t.x_o, t.y_pseudo, acfg, base.derive(uint64_t(idx), 1));
        t.x_b = pgd.x_b;
        t.flip_succeeded = pgd.flip_succeeded;

        TensorData logits_b = classifier_logits(bc, TensorData{Shape{1, data.channels(), data.image_size(),
                                                                     data.image_size()},
                                                               t.x_b.v});
        logits_b.shape = {data.num_classes};
        t.logit_int = interpolate_logits(logits_o, logits_b, icfg.alpha);

        SynthResult syn = synthesize_interpolated(bc, t.x_o, t.logit_int, icfg);
        t.x_int = syn.x_int;
        t.final_mse = syn.final_mse;
        t.initial_mse = syn.initial_mse;
        out.push_back(std::move(t));
    }
    return out;
}

// ---- persistence ----

inline void save_triplets(const std::filesystem::path& path, const std::vector<GeneratedTriplet>& triplets,
                          const AttackConfig& acfg, const InterpolationConfig& icfg, uint64_t seed) {
    if (triplets.empty()) throw std::invalid_argument("save_triplets: empty triplet set");
    int n = int(triplets.size());
    Shape img = triplets[0].x_o.shape;
    Shape simg = img;
    simg.insert(simg.begin(), n);
    int C = triplets[0].logit_int.shape[0];
    TensorData xo = TensorData::zeros(simg), xb = TensorData::zeros(simg), xi = TensorData::zeros(simg);
    TensorData li = TensorData::zeros({n, C});
    int64_t stride = numel(img);
    json flags = json::array(), mses = json::array(), mses0 = json::array(), pseudo = json::array();
    for (int i = 0; i < n; ++i) {
        const GeneratedTriplet& t = triplets[size_t(i)];
        std::copy(t.x_o.v.begin(), t.x_o.v.end(), xo.v.begin() + i * stride);
        std::copy(t.x_b.v.begin(), t.x_b.v.end(), xb.v.begin() + i * stride);
        std::copy(t.x_int.v.begin(), t.x_int.v.end(), xi.v.begin() + i * stride);
        std::copy(t.logit_int.v.begin(), t.logit_int.v.end(), li.v.begin() + int64_t(i) * C);
        flags.push_back(t.flip_succeeded);
        mses.push_back(t.final_mse);
        mses0.push_back(t.initial_mse);
        pseudo.push_back(t.y_pseudo);
    }
    json meta;
    meta["kind"] = "triplets";
    meta["seed"] = seed;
    meta["attack"] = {{"epsilon_inf", acfg.epsilon_inf},
                      {"steps", acfg.steps},
                      {"step_size", acfg.step_size},
                      {"random_start", acfg.random_start}};
    meta["interpolation"] = {{"alpha", icfg.alpha}, {"opt_steps", icfg.opt_steps}, {"opt_lr", icfg.opt_lr}};
    meta["flip_succeeded"] = flags;
    meta["final_mse"] = mses;
    meta["initial_mse"] = mses0;
    meta["y_pseudo"] = pseudo;
    save_tensors(path, {{"x_o", xo}, {"x_b", xb}, {"x_int", xi}, {"logit_int", li}}, meta);
}

inline std::vector<GeneratedTriplet> load_triplets(const std::filesystem::path& path) {
    TensorContainer c = load_tensors(path);
    if (c.meta.value("kind", "") != "triplets") throw FormatError("load_triplets: not a triplet file");
    const TensorData& xo = c.get("x_o");
    const TensorData& xb = c.get("x_b");
    const TensorData& xi = c.get("x_int");
    const TensorData& li = c.get("logit_int");
    int n = xo.shape[0];
    Shape img(xo.shape.begin() + 1, xo.shape.end());
    int64_t stride = numel(img);
    int C = li.shape[1];
    std::vector<GeneratedTriplet> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        GeneratedTriplet& t = out[size_t(i)];
        t.x_o = TensorData::zeros(img);
        t.x_b = TensorData::zeros(img);
        t.x_int = TensorData::zeros(img);
        t.logit_int = TensorData::zeros({C});
        std::copy_n(xo.v.begin() + i * stride, stride, t.x_o.v.begin());
        std::copy_n(xb.v.begin() + i * stride, stride, t.x_b.v.begin());
        std::copy_n(xi.v.begin() + i * stride, stride, t.x_int.v.begin());
        std::copy_n(li.v.begin() + int64_t(i) * C, C, t.logit_int.v.begin());
        t.flip_succeeded = c.meta.at("flip_succeeded")[size_t(i)].get<bool>();
        t.final_mse = c.meta.at("final_mse")[size_t(i)].get<double>();
        t.initial_mse = c.meta.at("initial_mse")[size_t(i)].get<double>();
        t.y_pseudo = c.meta.at("y_pseudo")[size_t(i)].get<int>();
    }
    return out;
}

} // namespace decrop
