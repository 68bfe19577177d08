#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "decrop/io.hpp"
#include "decrop/rng.hpp"
#include "decrop/tensor.hpp"

namespace decrop {

// Ordered named parameter set; order defines checkpoint block order.
struct ParamStore {
    std::vector<std::pair<std::string, TensorData>> items;

    TensorData& add(const std::string& name, TensorData t) {
        items.emplace_back(name, std::move(t));
        return items.back().second;
    }
    TensorData& at(const std::string& name) {
        for (auto& [n, t] : items)
            if (n == name) return t;
        throw std::invalid_argument("ParamStore: no parameter " + name);
    }
    const TensorData& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

    uint64_t hash() const {
        uint64_t h = 1469598103934665603ULL;
        for (const auto& [n, t] : items) {
            for (char c : n) h = (h ^ uint64_t(uint8_t(c))) * 1099511628211ULL;
            for (float v : t.v) {
                uint32_t bits;
                std::memcpy(&bits, &v, 4);
                for (int b = 0; b < 4; ++b) h = (h ^ ((bits >> (8 * b)) & 0xff)) * 1099511628211ULL;
            }
        }
        return h;
    }
};

// Leaves for one forward pass, keyed by parameter name.
struct BoundParams {
    std::vector<std::pair<std::string, TRef>> refs;
    TRef at(const std::string& name) const {
        for (const auto& [n, r] : refs)
            if (n == name) return r;
        throw std::invalid_argument("BoundParams: no parameter " + name);
    }
};

inline BoundParams bind_params(Tape& tape, const ParamStore& params, bool trainable) {
    BoundParams b;
    for (const auto& [n, t] : params.items) b.refs.emplace_back(n, tape.leaf(t, trainable));
    return b;
}

namespace detail {

inline TensorData he_conv(Rng& rng, int f, int c, int k) {
    TensorData w = TensorData::zeros({f, c, k, k});
    double std = std::sqrt(2.0 / (double(c) * k * k));
    for (auto& v : w.v) v = float(std * rng.normal());
    return w;
}

inline TensorData he_dense(Rng& rng, int in, int out) {
    TensorData w = TensorData::zeros({in, out});
    double std = std::sqrt(2.0 / double(in));
    for (auto& v : w.v) v = float(std * rng.normal());
    return w;
}

} // namespace detail

// Frozen pretrained classifier: 3 conv blocks (16->32->64, conv-relu-pool)
// with per-channel affine in place of batch norm, then a dense head. The
// penultimate 64-wide dense layer provides the features the discriminator
// and MMD loss operate on.
struct ClassifierModel {
    int num_classes = 10;
    int in_channels = 3;
    int image_size = 12;
    int feature_dim = 64;
    uint64_t creation_seed = 0;
    ParamStore params;

    int spatial_after_pools() const { return image_size / 2 / 2 / 2; }
    int flat_dim() const { return 64 * spatial_after_pools() * spatial_after_pools(); }
};

inline ClassifierModel make_classifier(int num_classes, int image_size, uint64_t seed, int in_channels = 3) {
    ClassifierModel m;
    m.num_classes = num_classes;
    m.image_size = image_size;
    m.in_channels = in_channels;
    m.creation_seed = seed;
    if (m.spatial_after_pools() < 1) throw std::invalid_argument("make_classifier: image too small for 3 pools");
    Rng rng = Rng(seed).derive(0xc1a5);
    const int widths[3] = {16, 32, 64};
    int prev = in_channels;
    for (int i = 0; i < 3; ++i) {
        std::string p = "conv" + std::to_string(i + 1);
        m.params.add(p + ".w", detail::he_conv(rng, widths[i], prev, 3));
        m.params.add(p + ".b", TensorData::zeros({widths[i]}));
        m.params.add(p + ".scale", TensorData::full({widths[i]}, 1.0f));
        m.params.add(p + ".shift", TensorData::zeros({widths[i]}));
        prev = widths[i];
    }
    m.params.add("fc1.w", detail::he_dense(rng, m.flat_dim(), m.feature_dim));
    m.params.add("fc1.b", TensorData::zeros({m.feature_dim}));
    m.params.add("fc2.w", detail::he_dense(rng, m.feature_dim, num_classes));
    m.params.add("fc2.b", TensorData::zeros({num_classes}));
    return m;
}

struct ClassifierOut {
    TRef features; // penultimate, [N, feature_dim]
    TRef logits;   // [N, num_classes]
};

inline ClassifierOut classifier_forward(Tape& tape, const ClassifierModel& m, const BoundParams& p, TRef x) {
    if (x->shape.size() != 4 || x->shape[1] != m.in_channels || x->shape[2] != m.image_size ||
        x->shape[3] != m.image_size)
        throw std::invalid_argument("classifier_forward: input shape " + shape_str(x->shape) +
                                    " does not match architecture");
    // fixed input scaling to [-1,1]
    TRef h = tape.mul_scalar(tape.add_scalar(x, -0.5f), 2.0f);
    for (int i = 1; i <= 3; ++i) {
        std::string pr = "conv" + std::to_string(i);
        h = tape.conv2d(h, p.at(pr + ".w"), 1);
        h = tape.bias_channel(h, p.at(pr + ".b"));
        h = tape.affine_channel(h, p.at(pr + ".scale"), p.at(pr + ".shift"));
        h = tape.relu(h);
        h = tape.maxpool2(h);
    }
    h = tape.reshape(h, {x->shape[0], m.flat_dim()});
    TRef feat = tape.relu(tape.bias_row(tape.matmul(h, p.at("fc1.w")), p.at("fc1.b")));
    TRef logits = tape.bias_row(tape.matmul(feat, p.at("fc2.w")), p.at("fc2.b"));
    return {feat, logits};
}

inline ClassifierOut classifier_forward(Tape& tape, const ClassifierModel& m, TRef x) {
    BoundParams p = bind_params(tape, m.params, false);
    return classifier_forward(tape, m, p, x);
}

// Residual denoiser: predicts the noise and subtracts it. The final conv is
// zero-initialized, so an untrained denoiser is exactly the identity.
struct DenoiserModel {
    int channels = 3;
    int depth = 7; // total conv layers
    int width = 12;
    uint64_t creation_seed = 0;
    ParamStore params;
};

inline DenoiserModel make_denoiser(int depth, int width, uint64_t seed, int channels = 3) {
    if (depth < 2) throw std::invalid_argument("make_denoiser: depth must be >= 2");
    DenoiserModel m;
    m.channels = channels;
    m.depth = depth;
    m.width = width;
    m.creation_seed = seed;
    Rng rng = Rng(seed).derive(0xd0);
    m.params.add("in.w", detail::he_conv(rng, width, channels, 3));
    m.params.add("in.b", TensorData::zeros({width}));
    for (int i = 0; i < depth - 2; ++i) {
        std::string p = "mid" + std::to_string(i);
        m.params.add(p + ".w", detail::he_conv(rng, width, width, 3));
        m.params.add(p + ".scale", TensorData::full({width}, 1.0f));
        m.params.add(p + ".shift", TensorData::zeros({width}));
    }
    m.params.add("out.w", TensorData::zeros({channels, width, 3, 3}));
    m.params.add("out.b", TensorData::zeros({channels}));
    return m;
}

inline TRef denoiser_forward(Tape& tape, const DenoiserModel& m, const BoundParams& p, TRef x) {
    TRef h = tape.relu(tape.bias_channel(tape.conv2d(x, p.at("in.w"), 1), p.at("in.b")));
    for (int i = 0; i < m.depth - 2; ++i) {
        std::string pr = "mid" + std::to_string(i);
        h = tape.relu(tape.affine_channel(tape.conv2d(h, p.at(pr + ".w"), 1), p.at(pr + ".scale"),
                                          p.at(pr + ".shift")));
    }
    TRef residual = tape.bias_channel(tape.conv2d(h, p.at("out.w"), 1), p.at("out.b"));
    return tape.sub(x, residual);
}

inline TRef denoiser_forward(Tape& tape, const DenoiserModel& m, TRef x) {
    BoundParams p = bind_params(tape, m.params, false);
    return denoiser_forward(tape, m, p, x);
}

// Domain discriminator: 1 hidden layer of 100 units over l2-normalized
// penultimate features. Zero-initialized output layer -> 0.5 everywhere.
struct DiscriminatorModel {
    int input_dim = 64;
    int hidden = 100;
    uint64_t creation_seed = 0;
    ParamStore params;
};

inline DiscriminatorModel make_discriminator(int input_dim, uint64_t seed, int hidden = 100) {
    DiscriminatorModel m;
    m.input_dim = input_dim;
    m.hidden = hidden;
    m.creation_seed = seed;
    Rng rng = Rng(seed).derive(0xdd);
    m.params.add("fc1.w", detail::he_dense(rng, input_dim, hidden));
    m.params.add("fc1.b", TensorData::zeros({hidden}));
    m.params.add("fc2.w", TensorData::zeros({hidden, 1}));
    m.params.add("fc2.b", TensorData::zeros({1}));
    return m;
}

// Returns the pre-sigmoid logit, [N,1].
inline TRef discriminator_logit(Tape& tape, const DiscriminatorModel& m, const BoundParams& p, TRef f) {
    if (f->shape.size() != 2 || f->shape[1] != m.input_dim)
        throw std::invalid_argument("discriminator: feature width mismatch");
    TRef h = tape.relu(tape.bias_row(tape.matmul(f, p.at("fc1.w")), p.at("fc1.b")));
    return tape.bias_row(tape.matmul(h, p.at("fc2.w")), p.at("fc2.b"));
}

inline TRef discriminate(Tape& tape, const DiscriminatorModel& m, TRef f) {
    BoundParams p = bind_params(tape, m.params, false);
    return tape.sigmoid(discriminator_logit(tape, m, p, f));
}

// Gradient reversal: forward identity, backward scaled by -beta.
struct GradientReversal {
    float beta = 1.0f;
    TRef apply(Tape& tape, TRef x) const { return tape.grad_reverse(x, beta); }
};

// Scheduler from the domain-adaptation literature: 2/(1+exp(-10p)) - 1.
inline float grl_schedule(double progress) {
    return float(2.0 / (1.0 + std::exp(-10.0 * std::clamp(progress, 0.0, 1.0))) - 1.0);
}

// ---- checkpoints ----

inline void save_classifier(const std::filesystem::path& path, const ClassifierModel& m, const json& extra = {}) {
    json meta;
    meta["kind"] = "classifier";
    meta["num_classes"] = m.num_classes;
    meta["in_channels"] = m.in_channels;
    meta["image_size"] = m.image_size;
    meta["feature_dim"] = m.feature_dim;
    meta["creation_seed"] = m.creation_seed;
    if (!extra.is_null()) meta["extra"] = extra;
    save_tensors(path, m.params.items, meta);
}

inline ClassifierModel load_classifier(const std::filesystem::path& path) {
    TensorContainer c = load_tensors(path);
    if (c.meta.value("kind", "") != "classifier") throw FormatError("load_classifier: not a classifier checkpoint");
    ClassifierModel m = make_classifier(c.meta.at("num_classes").get<int>(), c.meta.at("image_size").get<int>(),
                                        c.meta.at("creation_seed").get<uint64_t>(),
                                        c.meta.at("in_channels").get<int>());
    for (auto& [name, t] : m.params.items) {
        const TensorData& loaded = c.get(name);
        if (loaded.shape != t.shape) throw FormatError("load_classifier: shape mismatch for " + name);
        t = loaded;
    }
    return m;
}

inline void save_denoiser(const std::filesystem::path& path, const DenoiserModel& m, const json& extra = {}) {
    json meta;
    meta["kind"] = "denoiser";
    meta["channels"] = m.channels;
    meta["depth"] = m.depth;
    meta["width"] = m.width;
    meta["creation_seed"] = m.creation_seed;
    if (!extra.is_null()) meta["extra"] = extra;
    save_tensors(path, m.params.items, meta);
}

inline DenoiserModel load_denoiser(const std::filesystem::path& path) {
    TensorContainer c = load_tensors(path);
    if (c.meta.value("kind", "") != "denoiser") throw FormatError("load_denoiser: not a denoiser checkpoint");
    DenoiserModel m = make_denoiser(c.meta.at("depth").get<int>(), c.meta.at("width").get<int>(),
                                    c.meta.at("creation_seed").get<uint64_t>(), c.meta.at("channels").get<int>());
    for (auto& [name, t] : m.params.items) {
        const TensorData& loaded = c.get(name);
        if (loaded.shape != t.shape) throw FormatError("load_denoiser: shape mismatch for " + name);
        t = loaded;
    }
    return m;
}

inline void save_discriminator(const std::filesystem::path& path, const DiscriminatorModel& m) {
    json meta;
    meta["kind"] = "discriminator";
    meta["input_dim"] = m.input_dim;
    meta["hidden"] = m.hidden;
    meta["creation_seed"] = m.creation_seed;
    save_tensors(path, m.params.items, meta);
}

inline DiscriminatorModel load_discriminator(const std::filesystem::path& path) {
    TensorContainer c = load_tensors(path);
    if (c.meta.value("kind", "") != "discriminator") throw FormatError("load_discriminator: wrong kind");
    DiscriminatorModel m = make_discriminator(c.meta.at("input_dim").get<int>(),
                                              c.meta.at("creation_seed").get<uint64_t>(),
                                              c.meta.at("hidden").get<int>());
    for (auto& [name, t] : m.params.items) t = c.get(name);
    return m;
}

// Composed B_c o D_n labels for a raw batch; dn == nullptr means bare B_c.
inline std::vector<int> classify_batch(const ClassifierModel& bc, const DenoiserModel* dn, const TensorData& batch) {
    Tape tape;
    TRef x = tape.leaf(batch, false);
    if (dn) x = denoiser_forward(tape, *dn, x);
    ClassifierOut out = classifier_forward(tape, bc, x);
    TensorData logits{out.logits->shape, out.logits->val};
    return argmax_rows(logits);
}

inline TensorData classifier_logits(const ClassifierModel& bc, const TensorData& batch) {
    Tape tape;
    ClassifierOut out = classifier_forward(tape, bc, tape.leaf(batch, false));
    return {out.logits->shape, out.logits->val};
}

} // namespace decrop
