#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "decrop/data.hpp"
#include "decrop/datagen.hpp"
#include "decrop/models.hpp"
#include "decrop/rng.hpp"
#include "decrop/tensor.hpp"

namespace decrop {

// beta1..beta4 of the total objective.
struct LossWeights {
    double beta1 = 1.0, beta2 = 4.0, beta3 = 4.0, beta4 = 1.0;
};

struct MmdConfig {
    // RBF gammas; empty means "derive from the median heuristic per batch"
    // with these length-scale multipliers.
    std::vector<double> gammas;
    std::vector<double> multipliers = {0.5, 1.0, 2.0, 4.0, 8.0};
};

struct ClassifierTrainConfig {
    int epochs = 60;
    double lr = 0.02;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch = 64;
    uint64_t seed = 0;
};

struct DenoiserTrainConfig {
    int epochs = 120;
    int adam_epochs = 20; // adaptive-moment phase, then momentum descent
    double adam_lr = 1e-3;
    double sgd_lr = 1e-3;
    double momentum = 0.9;
    std::vector<int> sgd_decay_epochs = {50, 100}; // within the momentum phase, /10 each
    double weight_decay = 1e-4;
    int batch = 32;
    bool augment = true; // policy 1
    double sigma = 0.25;
    double disc_lr = 1e-5;
    double dd_warmup_frac = 0.25; // L_lc/L_cs/L_mmd pretraining before L_dd joins
    bool use_boundary = true;
    bool use_interpolated = true;
    bool include_xo_in_cs_mmd = false; // printed equations list only x_b and x_int
    uint64_t seed = 0;
};

// ---- optimizers ----

class SgdMomentum {
public:
    SgdMomentum(double lr, double momentum, double weight_decay)
        : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    // bound.refs aligned with params.items; L2 weight decay adds wd * theta
    // to each gradient.
    void step(ParamStore& params, const BoundParams& bound) {
        if (vel_.empty())
            for (auto& [n, t] : params.items) vel_.emplace_back(t.v.size(), 0.0f);
        for (size_t p = 0; p < params.items.size(); ++p) {
            TensorData& t = params.items[p].second;
            const std::vector<float>& g = bound.refs[p].second->grad;
            for (size_t i = 0; i < t.v.size(); ++i) {
                float grad = g[i] + float(weight_decay_) * t.v[i];
                vel_[p][i] = float(momentum_) * vel_[p][i] + grad;
                t.v[i] -= float(lr_) * vel_[p][i];
            }
        }
    }

private:
    double lr_, momentum_, weight_decay_;
    std::vector<std::vector<float>> vel_;
};

class Adam {
public:
    Adam(double lr, double weight_decay = 0.0, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
        : lr_(lr), weight_decay_(weight_decay), b1_(b1), b2_(b2), eps_(eps) {}

    void set_lr(double lr) { lr_ = lr; }

    void step(ParamStore& params, const BoundParams& bound) {
        if (m_.empty())
            for (auto& [n, t] : params.items) {
                m_.emplace_back(t.v.size(), 0.0f);
                v_.emplace_back(t.v.size(), 0.0f);
            }
        ++t_;
        double bc1 = 1.0 - std::pow(b1_, t_), bc2 = 1.0 - std::pow(b2_, t_);
        for (size_t p = 0; p < params.items.size(); ++p) {
            TensorData& t = params.items[p].second;
            const std::vector<float>& g = bound.refs[p].second->grad;
            for (size_t i = 0; i < t.v.size(); ++i) {
                double grad = double(g[i]) + weight_decay_ * t.v[i];
                m_[p][i] = float(b1_ * m_[p][i] + (1.0 - b1_) * grad);
                v_[p][i] = float(b2_ * v_[p][i] + (1.0 - b2_) * grad * grad);
                t.v[i] -= float(lr_ * (m_[p][i] / bc1) / (std::sqrt(v_[p][i] / bc2) + eps_));
            }
        }
    }

private:
    double lr_, weight_decay_, b1_, b2_, eps_;
    int t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

// ---- losses (graph builders) ----

// Mean cross-entropy of B_c(D_n(x_noisy)) against the classifier's own
// prediction on the clean input.
inline TRef loss_label_consistency(Tape& tape, const ClassifierModel& bc, const BoundParams& bcp,
                                   const DenoiserModel& dn, const BoundParams& dnp, TRef x_noisy,
                                   std::vector<int> pseudo_labels) {
    TRef den = denoiser_forward(tape, dn, dnp, x_noisy);
    ClassifierOut out = classifier_forward(tape, bc, bcp, den);
    return tape.softmax_cross_entropy(out.logits, std::move(pseudo_labels));
}

// Mean cosine similarity between logits of denoised generated samples and
// logits of the clean originals (to be maximized).
inline TRef loss_cosine_term(Tape& tape, const ClassifierModel& bc, const BoundParams& bcp, const DenoiserModel& dn,
                             const BoundParams& dnp, TRef x_gen_noisy, TRef logits_clean) {
    TRef den = denoiser_forward(tape, dn, dnp, x_gen_noisy);
    ClassifierOut out = classifier_forward(tape, bc, bcp, den);
    return tape.mean(tape.cosine_rows(out.logits, logits_clean));
}

// Median-heuristic RBF gammas from the pooled rows of two feature sets.
inline std::vector<double> mmd_gammas(const MmdConfig& cfg, const std::vector<float>& a, const std::vector<float>& b,
                                      int dim) {
    if (!cfg.gammas.empty()) return cfg.gammas;
    std::vector<const float*> rows;
    for (size_t i = 0; i + size_t(dim) <= a.size(); i += size_t(dim)) rows.push_back(a.data() + i);
    for (size_t i = 0; i + size_t(dim) <= b.size(); i += size_t(dim)) rows.push_back(b.data() + i);
    std::vector<double> d2;
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = i + 1; j < rows.size(); ++j) {
            double s = 0.0;
            for (int c = 0; c < dim; ++c) {
                double diff = double(rows[i][c]) - rows[j][c];
                s += diff * diff;
            }
            d2.push_back(s);
        }
    double med2 = 1.0;
    if (!d2.empty()) {
        std::nth_element(d2.begin(), d2.begin() + d2.size() / 2, d2.end());
        med2 = std::max(d2[d2.size() / 2], 1e-12);
    }
    std::vector<double> gammas;
    for (double m : cfg.multipliers) gammas.push_back(1.0 / (2.0 * m * m * med2));
    return gammas;
}

// Squared-MMD between l2-normalized feature sets (one generated-vs-clean term).
inline TRef loss_mmd_term(Tape& tape, TRef features_gen, TRef features_clean, const std::vector<double>& gammas) {
    return tape.rbf_mmd2(tape.l2_normalize(features_gen), tape.l2_normalize(features_clean), gammas);
}

// Binary cross-entropy of the domain discriminator over clean (d=1) and
// denoised (d=0) normalized features; gradients reach the denoiser through
// the gradient-reversal layer.
inline TRef loss_domain(Tape& tape, const DiscriminatorModel& dd, const BoundParams& ddp, float beta_grl,
                        TRef features_clean, TRef features_denoised) {
    GradientReversal grl{beta_grl};
    TRef fc = grl.apply(tape, tape.l2_normalize(features_clean));
    TRef fd = grl.apply(tape, tape.l2_normalize(features_denoised));
    TRef bce_clean = tape.sigmoid_bce(discriminator_logit(tape, dd, ddp, fc),
                                      std::vector<float>(size_t(features_clean->shape[0]), 1.0f));
    TRef bce_den = tape.sigmoid_bce(discriminator_logit(tape, dd, ddp, fd),
                                    std::vector<float>(size_t(features_denoised->shape[0]), 0.0f));
    return tape.mul_scalar(tape.add(bce_clean, bce_den), 0.5f);
}

// beta1*l_lc - beta2*l_cs + beta3*l_mmd + beta4*l_dd; null terms are skipped.
inline TRef total_loss(Tape& tape, const LossWeights& w, TRef l_lc, TRef l_cs, TRef l_mmd, TRef l_dd) {
    TRef total = nullptr;
    auto acc = [&](TRef term, double weight) {
        if (!term || weight == 0.0) return;
        TRef scaled = tape.mul_scalar(term, float(weight));
        total = total ? tape.add(total, scaled) : scaled;
    };
    acc(l_lc, w.beta1);
    acc(l_cs, -w.beta2);
    acc(l_mmd, w.beta3);
    acc(l_dd, w.beta4);
    if (!total) throw std::invalid_argument("total_loss: all terms absent");
    return total;
}

// ---- augmentation (policy 1) ----

struct AugTransform {
    int off_i = 0, off_j = 0; // crop offset within [0, 2*pad]
    bool flip = false;
};

inline std::vector<AugTransform> sample_policy1(int n, int pad, Rng& rng) {
    std::vector<AugTransform> out(static_cast<size_t>(n));
    for (auto& a : out) {
        a.off_i = int(rng.below(uint64_t(2 * pad + 1)));
        a.off_j = int(rng.below(uint64_t(2 * pad + 1)));
        a.flip = rng.uniform() < 0.5;
    }
    return out;
}

// Zero-pad by `pad`, crop back to the original size at the sampled offset,
// then horizontal flip. Center offset with no flip is the identity.
inline TensorData apply_policy1(const TensorData& batch, const std::vector<AugTransform>& augs, int pad) {
    int N = batch.shape[0], C = batch.shape[1], H = batch.shape[2], W = batch.shape[3];
    if (int(augs.size()) != N) throw std::invalid_argument("apply_policy1: transform count mismatch");
    TensorData out = TensorData::zeros(batch.shape);
    for (int s = 0; s < N; ++s) {
        const AugTransform& a = augs[size_t(s)];
        for (int c = 0; c < C; ++c) {
            const float* src = batch.v.data() + (int64_t(s) * C + c) * H * W;
            float* dst = out.v.data() + (int64_t(s) * C + c) * H * W;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    int si = i + a.off_i - pad;
                    int sj = j + a.off_j - pad;
                    float v = (si >= 0 && si < H && sj >= 0 && sj < W) ? src[int64_t(si) * W + sj] : 0.0f;
                    dst[int64_t(i) * W + (a.flip ? W - 1 - j : j)] = v;
                }
        }
    }
    return out;
}

// ---- classifier pretraining ----

struct EvalResult {
    double accuracy = 0.0;
};

inline double classifier_accuracy(const ClassifierModel& bc, const DenoiserModel* dn, const Dataset& d,
                                  double sigma = 0.0, uint64_t noise_seed = 0, int batch = 100) {
    int64_t hits = 0;
    Rng rng = Rng(noise_seed).derive(0xacc);
    for (int start = 0; start < d.size(); start += batch) {
        std::vector<int> idx;
        for (int i = start; i < std::min(d.size(), start + batch); ++i) idx.push_back(i);
        TensorData b = d.batch(idx);
        if (sigma > 0.0)
            for (auto& v : b.v) v += float(sigma * rng.normal());
        std::vector<int> pred = classify_batch(bc, dn, b);
        for (size_t i = 0; i < idx.size(); ++i)
            if (pred[i] == d.labels[size_t(idx[size_t(i)])]) ++hits;
    }
    return double(hits) / double(d.size());
}

inline ClassifierModel pretrain_classifier(int image_size, const Dataset& train, const ClassifierTrainConfig& cfg) {
    ClassifierModel m = make_classifier(train.num_classes, image_size, cfg.seed, train.channels());
    SgdMomentum opt(cfg.lr, cfg.momentum, cfg.weight_decay);
    Rng rng = Rng(cfg.seed).derive(0x93e3);
    std::vector<int> order(size_t(train.size()));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // step decay by 10 at schedule thirds
        int third = std::max(1, cfg.epochs / 3);
        opt.set_lr(cfg.lr * std::pow(0.1, epoch / third));
        Rng erng = rng.derive(uint64_t(epoch));
        erng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += size_t(cfg.batch)) {
            std::vector<int> idx(order.begin() + start,
                                 order.begin() + std::min(order.size(), start + size_t(cfg.batch)));
            std::vector<int> labels;
            for (int i : idx) labels.push_back(train.labels[size_t(i)]);
            Tape tape;
            BoundParams bp = bind_params(tape, m.params, true);
            ClassifierOut out = classifier_forward(tape, m, bp, tape.leaf(train.batch(idx), false));
            TRef loss = tape.softmax_cross_entropy(out.logits, labels);
            if (!std::isfinite(loss->val[0]))
                throw std::runtime_error("pretrain_classifier: diverged at epoch " + std::to_string(epoch));
            tape.backward(loss);
            opt.step(m.params, bp);
        }
    }
    return m;
}

// ---- denoiser training ----

struct TrainLogRecord {
    int step = 0;
    int epoch = 0;
    double l_lc = 0.0, l_cs = 0.0, l_mmd = 0.0, l_dd = 0.0, total = 0.0;
    double lr = 0.0;
    double beta_grl = 0.0;
};

inline std::string train_log_header() { return "step\tepoch\tl_lc\tl_cs\tl_mmd\tl_dd\ttotal\tlr\tbeta_grl"; }

inline std::string train_log_line(const TrainLogRecord& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d\t%d\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6g\t%.4f", r.step, r.epoch, r.l_lc,
                  r.l_cs, r.l_mmd, r.l_dd, r.total, r.lr, r.beta_grl);
    return buf;
}

// Stage 2: train the denoiser (and, when beta4 > 0, the discriminator) on
// limited + generated data with the weighted loss suite.
inline std::vector<TrainLogRecord> train_denoiser(const ClassifierModel& bc, DenoiserModel& dn,
                                                  DiscriminatorModel& dd, const Dataset& data,
                                                  const LimitedDataset& limited,
                                                  const std::vector<GeneratedTriplet>& triplets,
                                                  const LossWeights& weights, const DenoiserTrainConfig& cfg,
                                                  const MmdConfig& mmd_cfg = {}) {
    bool use_gen = (weights.beta2 != 0.0 || weights.beta3 != 0.0) && (cfg.use_boundary || cfg.use_interpolated);
    if (use_gen && triplets.size() != limited.indices.size())
        throw std::invalid_argument("train_denoiser: triplets do not match the limited dataset");
    bool use_dd = weights.beta4 != 0.0;
    int warmup_epochs = use_dd ? int(std::floor(cfg.dd_warmup_frac * cfg.epochs)) : 0;

    Adam dn_adam(cfg.adam_lr, cfg.weight_decay);
    SgdMomentum dn_sgd(cfg.sgd_lr, cfg.momentum, cfg.weight_decay);
    Adam dd_adam(cfg.disc_lr);

    Rng rng = Rng(cfg.seed).derive(0x7a11);
    std::vector<int> order(limited.indices.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<TrainLogRecord> log;
    int step = 0;
    const int pad = 2;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        bool adam_phase = epoch < cfg.adam_epochs;
        double lr;
        if (adam_phase) {
            lr = cfg.adam_lr;
        } else {
            int sgd_epoch = epoch - cfg.adam_epochs;
            int decays = 0;
            for (int d : cfg.sgd_decay_epochs)
                if (sgd_epoch >= d) ++decays;
            lr = cfg.sgd_lr * std::pow(0.1, decays);
            dn_sgd.set_lr(lr);
        }
        bool dd_active = use_dd && epoch >= warmup_epochs;
        double dd_progress =
            use_dd && cfg.epochs > warmup_epochs ? double(epoch - warmup_epochs) / double(cfg.epochs - warmup_epochs)
                                                 : 0.0;
        float beta_grl = dd_active ? grl_schedule(dd_progress) : 0.0f;

        Rng erng = rng.derive(uint64_t(epoch));
        erng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += size_t(cfg.batch), ++step) {
            std::vector<int> pos(order.begin() + start,
                                 order.begin() + std::min(order.size(), start + size_t(cfg.batch)));
            int B = int(pos.size());
            Shape bshape{B, data.channels(), data.image_size(), data.image_size()};
            TensorData xo = TensorData::zeros(bshape), xb = TensorData::zeros(bshape), xi = TensorData::zeros(bshape);
            int64_t stride = numel(Shape(bshape.begin() + 1, bshape.end()));
            for (int b = 0; b < B; ++b) {
                int p = pos[size_t(b)];
                const TensorData& src = use_gen ? triplets[size_t(p)].x_o : data.sample(limited.indices[size_t(p)]);
                std::copy(src.v.begin(), src.v.end(), xo.v.begin() + b * stride);
                if (use_gen) {
                    std::copy(triplets[size_t(p)].x_b.v.begin(), triplets[size_t(p)].x_b.v.end(),
                              xb.v.begin() + b * stride);
                    std::copy(triplets[size_t(p)].x_int.v.begin(), triplets[size_t(p)].x_int.v.end(),
                              xi.v.begin() + b * stride);
                }
            }
            Rng srng = rng.derive(uint64_t(epoch), uint64_t(start));
            if (cfg.augment) {
                // same transform for a sample and its generated counterparts
                std::vector<AugTransform> augs = sample_policy1(B, pad, srng);
                xo = apply_policy1(xo, augs, pad);
                if (use_gen) {
                    xb = apply_policy1(xb, augs, pad);
                    xi = apply_policy1(xi, augs, pad);
                }
            }
            std::vector<int> pseudo = classify_batch(bc, nullptr, xo);

            auto noisy = [&](const TensorData& x, uint64_t stream) {
                TensorData out = x;
                Rng nr = srng.derive(stream);
                for (auto& v : out.v) v += float(cfg.sigma * nr.normal());
                return out;
            };

            Tape tape;
            BoundParams bcp = bind_params(tape, bc.params, false);
            BoundParams dnp = bind_params(tape, dn.params, true);

            TRef l_lc = nullptr, l_cs = nullptr, l_mmd = nullptr, l_dd_t = nullptr;
            TRef xo_ref = tape.leaf(xo, false);
            ClassifierOut clean_out = classifier_forward(tape, bc, bcp, xo_ref);

            TRef den_o = denoiser_forward(tape, dn, dnp, tape.leaf(noisy(xo, 1), false));
            ClassifierOut den_o_out = classifier_forward(tape, bc, bcp, den_o);
            if (weights.beta1 != 0.0) l_lc = tape.softmax_cross_entropy(den_o_out.logits, pseudo);

            ClassifierOut den_b_out{nullptr, nullptr}, den_i_out{nullptr, nullptr};
            if (use_gen && cfg.use_boundary) {
                TRef den_b = denoiser_forward(tape, dn, dnp, tape.leaf(noisy(xb, 2), false));
                den_b_out = classifier_forward(tape, bc, bcp, den_b);
            }
            if (use_gen && cfg.use_interpolated) {
                TRef den_i = denoiser_forward(tape, dn, dnp, tape.leaf(noisy(xi, 3), false));
                den_i_out = classifier_forward(tape, bc, bcp, den_i);
            }
            if (weights.beta2 != 0.0) {
                std::vector<TRef> terms;
                if (den_b_out.logits) terms.push_back(tape.mean(tape.cosine_rows(den_b_out.logits, clean_out.logits)));
                if (den_i_out.logits) terms.push_back(tape.mean(tape.cosine_rows(den_i_out.logits, clean_out.logits)));
                if (cfg.include_xo_in_cs_mmd)
                    terms.push_back(tape.mean(tape.cosine_rows(den_o_out.logits, clean_out.logits)));
                for (TRef t : terms) l_cs = l_cs ? tape.add(l_cs, t) : t;
            }
            if (weights.beta3 != 0.0) {
                TRef clean_norm = tape.l2_normalize(clean_out.features);
                // the kernel sees l2-normalized rows, so the median heuristic
                // must too; raw-feature distances would collapse the gammas
                auto norm_rows = [&](const std::vector<float>& v) {
                    std::vector<float> out = v;
                    for (size_t r = 0; r + size_t(bc.feature_dim) <= out.size(); r += size_t(bc.feature_dim)) {
                        double s = 0.0;
                        for (int c = 0; c < bc.feature_dim; ++c) s += double(out[r + size_t(c)]) * out[r + size_t(c)];
                        float inv = float(1.0 / std::sqrt(std::max(s, 1e-24)));
                        for (int c = 0; c < bc.feature_dim; ++c) out[r + size_t(c)] *= inv;
                    }
                    return out;
                };
                std::vector<double> gammas =
                    mmd_gammas(mmd_cfg, norm_rows(clean_out.features->val),
                               norm_rows(den_b_out.features ? den_b_out.features->val : den_o_out.features->val),
                               bc.feature_dim);
                std::vector<TRef> terms;
                if (den_b_out.features)
                    terms.push_back(tape.rbf_mmd2(tape.l2_normalize(den_b_out.features), clean_norm, gammas));
                if (den_i_out.features)
                    terms.push_back(tape.rbf_mmd2(tape.l2_normalize(den_i_out.features), clean_norm, gammas));
                if (cfg.include_xo_in_cs_mmd)
                    terms.push_back(tape.rbf_mmd2(tape.l2_normalize(den_o_out.features), clean_norm, gammas));
                for (TRef t : terms) l_mmd = l_mmd ? tape.add(l_mmd, t) : t;
            }
            BoundParams ddp;
            if (dd_active) {
                ddp = bind_params(tape, dd.params, true);
                l_dd_t = loss_domain(tape, dd, ddp, beta_grl, clean_out.features, den_o_out.features);
            }

            LossWeights w = weights;
            if (!dd_active) w.beta4 = 0.0;
            TRef total = total_loss(tape, w, l_lc, l_cs, l_mmd, l_dd_t);
            if (!std::isfinite(total->val[0]))
                throw std::runtime_error("train_denoiser: non-finite loss at step " + std::to_string(step) +
                                         " epoch " + std::to_string(epoch));
            tape.backward(total);
            if (adam_phase)
                dn_adam.step(dn.params, dnp);
            else
                dn_sgd.step(dn.params, dnp);
            if (dd_active) dd_adam.step(dd.params, ddp);

            TrainLogRecord rec;
            rec.step = step;
            rec.epoch = epoch;
            rec.l_lc = l_lc ? l_lc->val[0] : 0.0;
            rec.l_cs = l_cs ? l_cs->val[0] : 0.0;
            rec.l_mmd = l_mmd ? l_mmd->val[0] : 0.0;
            rec.l_dd = l_dd_t ? l_dd_t->val[0] : 0.0;
            rec.total = total->val[0];
            rec.lr = lr;
            rec.beta_grl = beta_grl;
            log.push_back(rec);
        }
    }
    return log;
}

} // namespace decrop
