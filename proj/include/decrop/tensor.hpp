#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace decrop {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "x" : "") + std::to_string(s[i]);
    return r + "]";
}

// Plain value tensor: row-major float32.
struct TensorData {
    Shape shape;
    std::vector<float> v;

    TensorData() = default;
    TensorData(Shape s, std::vector<float> vals) : shape(std::move(s)), v(std::move(vals)) {
        if (int64_t(v.size()) != numel(shape))
            throw std::invalid_argument("TensorData: data length does not match shape " + shape_str(shape));
    }
    static TensorData zeros(Shape s) {
        TensorData t;
        t.shape = std::move(s);
        t.v.assign(size_t(numel(t.shape)), 0.0f);
        return t;
    }
    static TensorData full(Shape s, float value) {
        TensorData t = zeros(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }
    int64_t size() const { return int64_t(v.size()); }
    bool all_finite() const {
        for (float x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

// Row-major GEMM helpers with 64-bit accumulation.
// C[m,n] (+)= A[m,k] * B[k,n]
inline void gemm_nn(const float* A, const float* B, float* C, int m, int k, int n, bool accumulate) {
    std::vector<double> acc(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* Ai = A + int64_t(i) * k;
        for (int p = 0; p < k; ++p) {
            double a = Ai[p];
            const float* Bp = B + int64_t(p) * n;
            for (int j = 0; j < n; ++j) acc[size_t(j)] += a * Bp[j];
        }
        float* Ci = C + int64_t(i) * n;
        if (accumulate)
            for (int j = 0; j < n; ++j) Ci[j] += float(acc[size_t(j)]);
        else
            for (int j = 0; j < n; ++j) Ci[j] = float(acc[size_t(j)]);
    }
}

// C[m,k] (+)= A[m,n] * B[k,n]^T
inline void gemm_nt(const float* A, const float* B, float* C, int m, int n, int k, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const float* Ai = A + int64_t(i) * n;
        float* Ci = C + int64_t(i) * k;
        for (int l = 0; l < k; ++l) {
            const float* Bl = B + int64_t(l) * n;
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += double(Ai[j]) * Bl[j];
            if (accumulate)
                Ci[l] += float(s);
            else
                Ci[l] = float(s);
        }
    }
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
inline void gemm_tn(const float* A, const float* B, float* C, int m, int k, int n, bool accumulate) {
    std::vector<double> acc(static_cast<size_t>(n), 0.0);
    for (int p = 0; p < k; ++p) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int i = 0; i < m; ++i) {
            double a = A[int64_t(i) * k + p];
            const float* Bi = B + int64_t(i) * n;
            for (int j = 0; j < n; ++j) acc[size_t(j)] += a * Bi[j];
        }
        float* Cp = C + int64_t(p) * n;
        if (accumulate)
            for (int j = 0; j < n; ++j) Cp[j] += float(acc[size_t(j)]);
        else
            for (int j = 0; j < n; ++j) Cp[j] = float(acc[size_t(j)]);
    }
}

// Reductions over a single axis, sum in double. max_index breaks ties toward
// the lowest index.
inline TensorData reduce_sum_axis(const TensorData& x, int axis);
inline std::vector<int> argmax_axis(const TensorData& x, int axis);

struct Node {
    Shape shape;
    std::vector<float> val;
    std::vector<float> grad; // allocated during backward, only when needed
    bool needs_grad = false;
    std::vector<Node*> parents;
    std::function<void(Node&)> backward_fn;

    int64_t size() const { return int64_t(val.size()); }
};

using TRef = Node*;

// Records a single forward pass; one backward per tape.
namespace detail {

inline double kernel_mean(const float* a, const float* b, int n, int m, int d, double gamma) {
    double s = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            double d2 = 0.0;
            const float* ai = a + int64_t(i) * d;
            const float* bj = b + int64_t(j) * d;
            for (int c = 0; c < d; ++c) {
                double diff = double(ai[c]) - bj[c];
                d2 += diff * diff;
            }
            s += std::exp(-gamma * d2);
        }
    return s / (double(n) * m);
}

} // namespace detail

// Biased (V-statistic) squared-MMD with a multi-bandwidth RBF kernel,
// computed entirely in 64-bit precision; Tape::rbf_mmd2 rounds this value
// to float32 when placing it on the graph.
inline double mmd2_biased(const float* x, int n, const float* y, int m, int d, const std::vector<double>& gammas) {
    double total = 0.0;
    for (double g : gammas)
        total += detail::kernel_mean(x, x, n, n, d, g) + detail::kernel_mean(y, y, m, m, d, g) -
                 2.0 * detail::kernel_mean(x, y, n, m, d, g);
    return total;
}

inline double mmd2_biased(const TensorData& x, const TensorData& y, const std::vector<double>& gammas) {
    if (x.shape.size() != 2 || y.shape.size() != 2 || x.shape[1] != y.shape[1])
        throw std::invalid_argument("mmd2_biased: expects [n,d] and [m,d]");
    if (x.shape[0] < 1 || y.shape[0] < 1) throw std::invalid_argument("mmd2_biased: empty set");
    if (gammas.empty()) throw std::invalid_argument("mmd2_biased: needs at least one bandwidth");
    return mmd2_biased(x.v.data(), x.shape[0], y.v.data(), y.shape[0], x.shape[1], gammas);
}

class Tape {
public:
    TRef leaf(const TensorData& t, bool requires_grad = false) {
        TRef n = alloc(t.shape);
        n->val = t.v;
        n->needs_grad = requires_grad;
        return n;
    }
    TRef leaf(TensorData&& t, bool requires_grad = false) {
        TRef n = alloc(t.shape);
        n->val = std::move(t.v);
        n->needs_grad = requires_grad;
        return n;
    }

    // ---- elementwise ----
    TRef add(TRef a, TRef b) { return binary(a, b, [](float x, float y) { return x + y; }, [](Node& o) {
        acc_into(o.parents[0], o.grad.data(), 1.0f);
        acc_into(o.parents[1], o.grad.data(), 1.0f); }); }

    TRef sub(TRef a, TRef b) { return binary(a, b, [](float x, float y) { return x - y; }, [](Node& o) {
        acc_into(o.parents[0], o.grad.data(), 1.0f);
        acc_into(o.parents[1], o.grad.data(), -1.0f); }); }

    TRef mul(TRef a, TRef b) { return binary(a, b, [](float x, float y) { return x * y; }, [](Node& o) {
        Node* a = o.parents[0];
        Node* b = o.parents[1];
        if (a->needs_grad)
            for (int64_t i = 0; i < o.size(); ++i) a->grad[size_t(i)] += o.grad[size_t(i)] * b->val[size_t(i)];
        if (b->needs_grad)
            for (int64_t i = 0; i < o.size(); ++i) b->grad[size_t(i)] += o.grad[size_t(i)] * a->val[size_t(i)]; }); }

    TRef div(TRef a, TRef b) { return binary(a, b, [](float x, float y) { return x / y; }, [](Node& o) {
        Node* a = o.parents[0];
        Node* b = o.parents[1];
        if (a->needs_grad)
            for (int64_t i = 0; i < o.size(); ++i) a->grad[size_t(i)] += o.grad[size_t(i)] / b->val[size_t(i)];
        if (b->needs_grad)
            for (int64_t i = 0; i < o.size(); ++i)
                b->grad[size_t(i)] -= o.grad[size_t(i)] * a->val[size_t(i)] / (b->val[size_t(i)] * b->val[size_t(i)]); }); }

    TRef add_scalar(TRef a, float s) { return unary(a, [s](float x) { return x + s; }, [](Node& o) {
        acc_into(o.parents[0], o.grad.data(), 1.0f); }); }

    TRef mul_scalar(TRef a, float s) { return unary(a, [s](float x) { return x * s; }, [s](Node& o) {
        acc_into(o.parents[0], o.grad.data(), s); }); }

    TRef negate(TRef a) { return mul_scalar(a, -1.0f); }

    // relu'(0) = 0 by convention
    TRef relu(TRef a) { return unary(a, [](float x) { return x > 0.0f ? x : 0.0f; }, [](Node& o) {
        Node* a = o.parents[0];
        for (int64_t i = 0; i < o.size(); ++i)
            if (a->val[size_t(i)] > 0.0f) a->grad[size_t(i)] += o.grad[size_t(i)]; }); }

    TRef exp_(TRef a) { return unary(a, [](float x) { return std::exp(x); }, [](Node& o) {
        Node* a = o.parents[0];
        for (int64_t i = 0; i < o.size(); ++i) a->grad[size_t(i)] += o.grad[size_t(i)] * o.val[size_t(i)]; }); }

    TRef log_(TRef a) {
        for (float x : a->val)
            if (!(x > 0.0f)) throw std::invalid_argument("log: non-positive input");
        return unary(a, [](float x) { return std::log(x); }, [](Node& o) {
            Node* a = o.parents[0];
            for (int64_t i = 0; i < o.size(); ++i) a->grad[size_t(i)] += o.grad[size_t(i)] / a->val[size_t(i)]; });
    }

    TRef square(TRef a) { return unary(a, [](float x) { return x * x; }, [](Node& o) {
        Node* a = o.parents[0];
        for (int64_t i = 0; i < o.size(); ++i) a->grad[size_t(i)] += 2.0f * o.grad[size_t(i)] * a->val[size_t(i)]; }); }

    TRef sqrt_(TRef a) { return unary(a, [](float x) { return std::sqrt(x); }, [](Node& o) {
        Node* a = o.parents[0];
        for (int64_t i = 0; i < o.size(); ++i) a->grad[size_t(i)] += 0.5f * o.grad[size_t(i)] / o.val[size_t(i)]; }); }

    TRef sigmoid(TRef a) { return unary(a, [](float x) {
        return x >= 0.0f ? 1.0f / (1.0f + std::exp(-x)) : std::exp(x) / (1.0f + std::exp(x)); }, [](Node& o) {
        Node* a = o.parents[0];
        for (int64_t i = 0; i < o.size(); ++i) {
            float y = o.val[size_t(i)];
            a->grad[size_t(i)] += o.grad[size_t(i)] * y * (1.0f - y);
        } }); }

    // ---- linear algebra ----
    TRef matmul(TRef a, TRef b) {
        if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
            throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a->shape) + " " + shape_str(b->shape));
        int m = a->shape[0], k = a->shape[1], n = b->shape[1];
        TRef o = alloc({m, n}, {a, b});
        gemm_nn(a->val.data(), b->val.data(), o->val.data(), m, k, n, false);
        if (o->needs_grad)
            o->backward_fn = [m, k, n](Node& o) {
                Node* a = o.parents[0];
                Node* b = o.parents[1];
                if (a->needs_grad) gemm_nt(o.grad.data(), b->val.data(), a->grad.data(), m, n, k, true);
                if (b->needs_grad) gemm_tn(a->val.data(), o.grad.data(), b->grad.data(), m, k, n, true);
            };
        return o;
    }

    // Cross-correlation, stride 1, zero padding.
    TRef conv2d(TRef x, TRef w, int padding) {
        if (x->shape.size() != 4 || w->shape.size() != 4)
            throw std::invalid_argument("conv2d: expects NCHW input and FCKK kernel");
        int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
        int F = w->shape[0], Cw = w->shape[1], kh = w->shape[2], kw = w->shape[3];
        if (C != Cw) throw std::invalid_argument("conv2d: channel mismatch");
        int OH = H + 2 * padding - kh + 1;
        int OW = W + 2 * padding - kw + 1;
        if (OH < 1 || OW < 1) throw std::invalid_argument("conv2d: kernel larger than padded input");
        TRef o = alloc({N, F, OH, OW}, {x, w});
        int ckk = C * kh * kw, ohw = OH * OW;
        std::vector<float> cols(size_t(ckk) * size_t(ohw));
        for (int s = 0; s < N; ++s) {
            im2col(x->val.data() + int64_t(s) * C * H * W, C, H, W, kh, kw, padding, cols.data());
            gemm_nn(w->val.data(), cols.data(), o->val.data() + int64_t(s) * F * ohw, F, ckk, ohw, false);
        }
        if (o->needs_grad)
            o->backward_fn = [=](Node& o) {
                Node* x = o.parents[0];
                Node* w = o.parents[1];
                std::vector<float> cols(size_t(ckk) * size_t(ohw));
                std::vector<float> dcols(size_t(ckk) * size_t(ohw));
                for (int s = 0; s < N; ++s) {
                    const float* g = o.grad.data() + int64_t(s) * F * ohw;
                    if (w->needs_grad) {
                        im2col(x->val.data() + int64_t(s) * C * H * W, C, H, W, kh, kw, padding, cols.data());
                        gemm_nt(g, cols.data(), w->grad.data(), F, ohw, ckk, true);
                    }
                    if (x->needs_grad) {
                        gemm_tn(w->val.data(), g, dcols.data(), F, ckk, ohw, false);
                        col2im_acc(dcols.data(), C, H, W, kh, kw, padding, x->grad.data() + int64_t(s) * C * H * W);
                    }
                }
            };
        return o;
    }

    TRef bias_channel(TRef x, TRef b) {
        check_nchw_param(x, b, "bias_channel");
        int C = x->shape[1];
        int64_t hw = int64_t(x->shape[2]) * x->shape[3];
        TRef o = alloc(x->shape, {x, b});
        for (int64_t i = 0; i < o->size(); ++i)
            o->val[size_t(i)] = x->val[size_t(i)] + b->val[size_t((i / hw) % C)];
        if (o->needs_grad)
            o->backward_fn = [C, hw](Node& o) {
                Node* x = o.parents[0];
                Node* b = o.parents[1];
                if (x->needs_grad) acc_into(x, o.grad.data(), 1.0f);
                if (b->needs_grad)
                    for (int64_t i = 0; i < o.size(); ++i) b->grad[size_t((i / hw) % C)] += o.grad[size_t(i)];
            };
        return o;
    }

    // Per-channel affine: y = x * scale[c] + shift[c] (batch-norm stand-in).
    TRef affine_channel(TRef x, TRef scale, TRef shift) {
        check_nchw_param(x, scale, "affine_channel");
        check_nchw_param(x, shift, "affine_channel");
        int C = x->shape[1];
        int64_t hw = int64_t(x->shape[2]) * x->shape[3];
        TRef o = alloc(x->shape, {x, scale, shift});
        for (int64_t i = 0; i < o->size(); ++i) {
            size_t c = size_t((i / hw) % C);
            o->val[size_t(i)] = x->val[size_t(i)] * scale->val[c] + shift->val[c];
        }
        if (o->needs_grad)
            o->backward_fn = [C, hw](Node& o) {
                Node* x = o.parents[0];
                Node* sc = o.parents[1];
                Node* sh = o.parents[2];
                for (int64_t i = 0; i < o.size(); ++i) {
                    size_t c = size_t((i / hw) % C);
                    float g = o.grad[size_t(i)];
                    if (x->needs_grad) x->grad[size_t(i)] += g * sc->val[c];
                    if (sc->needs_grad) sc->grad[c] += g * x->val[size_t(i)];
                    if (sh->needs_grad) sh->grad[c] += g;
                }
            };
        return o;
    }

    TRef bias_row(TRef x, TRef b) {
        if (x->shape.size() != 2 || b->shape.size() != 1 || b->shape[0] != x->shape[1])
            throw std::invalid_argument("bias_row: shape mismatch");
        int D = x->shape[1];
        TRef o = alloc(x->shape, {x, b});
        for (int64_t i = 0; i < o->size(); ++i) o->val[size_t(i)] = x->val[size_t(i)] + b->val[size_t(i % D)];
        if (o->needs_grad)
            o->backward_fn = [D](Node& o) {
                Node* x = o.parents[0];
                Node* b = o.parents[1];
                if (x->needs_grad) acc_into(x, o.grad.data(), 1.0f);
                if (b->needs_grad)
                    for (int64_t i = 0; i < o.size(); ++i) b->grad[size_t(i % D)] += o.grad[size_t(i)];
            };
        return o;
    }

    // 2x2 max pool, stride 2, floor semantics; ties go to the first element.
    TRef maxpool2(TRef x) {
        if (x->shape.size() != 4) throw std::invalid_argument("maxpool2: expects NCHW");
        int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
        int OH = H / 2, OW = W / 2;
        if (OH < 1 || OW < 1) throw std::invalid_argument("maxpool2: input too small");
        TRef o = alloc({N, C, OH, OW}, {x});
        auto arg = std::make_shared<std::vector<int64_t>>(size_t(o->size()));
        int64_t oi = 0;
        for (int s = 0; s < N * C; ++s) {
            const float* xs = x->val.data() + int64_t(s) * H * W;
            for (int i = 0; i < OH; ++i)
                for (int j = 0; j < OW; ++j, ++oi) {
                    int64_t base = int64_t(2 * i) * W + 2 * j;
                    int64_t best = base;
                    float bv = xs[base];
                    for (int64_t cand : {base + 1, base + W, base + W + 1}) {
                        if (xs[cand] > bv) { bv = xs[cand]; best = cand; }
                    }
                    o->val[size_t(oi)] = bv;
                    (*arg)[size_t(oi)] = int64_t(s) * H * W + best;
                }
        }
        if (o->needs_grad)
            o->backward_fn = [arg](Node& o) {
                Node* x = o.parents[0];
                for (int64_t i = 0; i < o.size(); ++i) x->grad[size_t((*arg)[size_t(i)])] += o.grad[size_t(i)];
            };
        return o;
    }

    TRef reshape(TRef x, Shape s) {
        if (numel(s) != x->size()) throw std::invalid_argument("reshape: element count mismatch");
        TRef o = alloc(std::move(s), {x});
        o->val = x->val;
        if (o->needs_grad)
            o->backward_fn = [](Node& o) { acc_into(o.parents[0], o.grad.data(), 1.0f); };
        return o;
    }

    // ---- reductions ----
    TRef sum(TRef x) {
        TRef o = alloc({1}, {x});
        double s = 0.0;
        for (float v : x->val) s += v;
        o->val[0] = float(s);
        if (o->needs_grad)
            o->backward_fn = [](Node& o) {
                Node* x = o.parents[0];
                float g = o.grad[0];
                for (auto& gv : x->grad) gv += g;
            };
        return o;
    }

    TRef mean(TRef x) {
        if (x->size() == 0) throw std::invalid_argument("mean: empty tensor");
        return mul_scalar(sum(x), 1.0f / float(x->size()));
    }

    TRef sum_axis(TRef x, int axis) {
        auto [outer, mid, inner] = axis_split(x->shape, axis);
        Shape os = x->shape;
        os.erase(os.begin() + axis);
        if (os.empty()) os = {1};
        TRef o = alloc(os, {x});
        for (int64_t a = 0; a < outer; ++a)
            for (int64_t c = 0; c < inner; ++c) {
                double s = 0.0;
                for (int64_t b = 0; b < mid; ++b) s += x->val[size_t((a * mid + b) * inner + c)];
                o->val[size_t(a * inner + c)] = float(s);
            }
        if (o->needs_grad)
            o->backward_fn = [outer = outer, mid = mid, inner = inner](Node& o) {
                Node* x = o.parents[0];
                for (int64_t a = 0; a < outer; ++a)
                    for (int64_t b = 0; b < mid; ++b)
                        for (int64_t c = 0; c < inner; ++c)
                            x->grad[size_t((a * mid + b) * inner + c)] += o.grad[size_t(a * inner + c)];
            };
        return o;
    }

    TRef mean_axis(TRef x, int axis) {
        auto [outer, mid, inner] = axis_split(x->shape, axis);
        (void)outer;
        (void)inner;
        return mul_scalar(sum_axis(x, axis), 1.0f / float(mid));
    }

    // ---- domain-specific fused ops (hand-written gradients) ----

    // Rows of x normalized to unit l2 norm: y = x / max(||x||, eps).
    // Rank-1 input is treated as a single row.
    TRef l2_normalize(TRef x, float eps = 1e-12f) {
        bool vec = x->shape.size() == 1;
        int N = vec ? 1 : x->shape[0];
        int D = vec ? x->shape[0] : x->shape[1];
        if (!vec && x->shape.size() != 2) throw std::invalid_argument("l2_normalize: expects vector or matrix");
        TRef o = alloc(x->shape, {x});
        auto norms = std::make_shared<std::vector<double>>(size_t(N));
        for (int i = 0; i < N; ++i) {
            const float* xi = x->val.data() + int64_t(i) * D;
            double s = 0.0;
            for (int j = 0; j < D; ++j) s += double(xi[j]) * xi[j];
            double n = std::max(std::sqrt(s), double(eps));
            (*norms)[size_t(i)] = std::sqrt(s);
            float inv = float(1.0 / n);
            float* oi = o->val.data() + int64_t(i) * D;
            for (int j = 0; j < D; ++j) oi[j] = xi[j] * inv;
        }
        if (o->needs_grad)
            o->backward_fn = [N, D, eps, norms](Node& o) {
                Node* x = o.parents[0];
                for (int i = 0; i < N; ++i) {
                    const float* xi = x->val.data() + int64_t(i) * D;
                    const float* gi = o.grad.data() + int64_t(i) * D;
                    float* dxi = x->grad.data() + int64_t(i) * D;
                    double n = (*norms)[size_t(i)];
                    if (n < double(eps)) {
                        for (int j = 0; j < D; ++j) dxi[j] += gi[j] / eps;
                    } else {
                        double xg = 0.0;
                        for (int j = 0; j < D; ++j) xg += double(xi[j]) * gi[j];
                        double n3 = n * n * n;
                        for (int j = 0; j < D; ++j) dxi[j] += float(double(gi[j]) / n - double(xi[j]) * xg / n3);
                    }
                }
            };
        return o;
    }

    // Mean cross-entropy of softmax(logits) against integer targets.
    TRef softmax_cross_entropy(TRef logits, std::vector<int> targets) {
        if (logits->shape.size() != 2) throw std::invalid_argument("softmax_cross_entropy: expects [N,C] logits");
        int N = logits->shape[0], C = logits->shape[1];
        if (int(targets.size()) != N) throw std::invalid_argument("softmax_cross_entropy: target count mismatch");
        TRef o = alloc({1}, {logits});
        auto probs = std::make_shared<std::vector<float>>(size_t(N) * C);
        double total = 0.0;
        for (int i = 0; i < N; ++i) {
            const float* z = logits->val.data() + int64_t(i) * C;
            float mx = *std::max_element(z, z + C);
            double denom = 0.0;
            for (int c = 0; c < C; ++c) denom += std::exp(double(z[c]) - mx);
            for (int c = 0; c < C; ++c) (*probs)[size_t(i) * C + c] = float(std::exp(double(z[c]) - mx) / denom);
            total += -(double(z[targets[size_t(i)]]) - mx - std::log(denom));
        }
        o->val[0] = float(total / N);
        if (o->needs_grad)
            o->backward_fn = [N, C, probs, targets = std::move(targets)](Node& o) {
                Node* l = o.parents[0];
                float g = o.grad[0] / float(N);
                for (int i = 0; i < N; ++i)
                    for (int c = 0; c < C; ++c) {
                        float p = (*probs)[size_t(i) * C + c];
                        l->grad[size_t(i) * C + c] += g * (p - (c == targets[size_t(i)] ? 1.0f : 0.0f));
                    }
            };
        return o;
    }

    // Mean binary cross-entropy of sigmoid(z) against targets, numerically
    // stable in the logits.
    TRef sigmoid_bce(TRef z, std::vector<float> targets) {
        int64_t N = z->size();
        if (int64_t(targets.size()) != N) throw std::invalid_argument("sigmoid_bce: target count mismatch");
        TRef o = alloc({1}, {z});
        double total = 0.0;
        for (int64_t i = 0; i < N; ++i) {
            double x = z->val[size_t(i)], t = targets[size_t(i)];
            total += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
        }
        o->val[0] = float(total / double(N));
        if (o->needs_grad)
            o->backward_fn = [N, targets = std::move(targets)](Node& o) {
                Node* z = o.parents[0];
                float g = o.grad[0] / float(N);
                for (int64_t i = 0; i < N; ++i) {
                    double x = z->val[size_t(i)];
                    double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                    z->grad[size_t(i)] += g * float(s - targets[size_t(i)]);
                }
            };
        return o;
    }

    // Per-row cosine similarity CS(a_i, b_i); eps guards zero-norm rows.
    TRef cosine_rows(TRef a, TRef b, float eps = 1e-8f) {
        if (a->shape != b->shape || a->shape.size() != 2)
            throw std::invalid_argument("cosine_rows: expects matching [N,C] inputs");
        int N = a->shape[0], C = a->shape[1];
        TRef o = alloc({N}, {a, b});
        auto st = std::make_shared<std::vector<double>>(size_t(N) * 3); // dot, na, nb (clamped)
        for (int i = 0; i < N; ++i) {
            const float* ai = a->val.data() + int64_t(i) * C;
            const float* bi = b->val.data() + int64_t(i) * C;
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (int c = 0; c < C; ++c) {
                dot += double(ai[c]) * bi[c];
                na += double(ai[c]) * ai[c];
                nb += double(bi[c]) * bi[c];
            }
            na = std::max(std::sqrt(na), double(eps));
            nb = std::max(std::sqrt(nb), double(eps));
            (*st)[size_t(i) * 3] = dot;
            (*st)[size_t(i) * 3 + 1] = na;
            (*st)[size_t(i) * 3 + 2] = nb;
            o->val[size_t(i)] = float(dot / (na * nb));
        }
        if (o->needs_grad)
            o->backward_fn = [N, C, eps, st](Node& o) {
                Node* a = o.parents[0];
                Node* b = o.parents[1];
                for (int i = 0; i < N; ++i) {
                    const float* ai = a->val.data() + int64_t(i) * C;
                    const float* bi = b->val.data() + int64_t(i) * C;
                    double dot = (*st)[size_t(i) * 3], na = (*st)[size_t(i) * 3 + 1], nb = (*st)[size_t(i) * 3 + 2];
                    double g = o.grad[size_t(i)];
                    double inv = 1.0 / (na * nb);
                    for (int c = 0; c < C; ++c) {
                        if (a->needs_grad) {
                            double da = double(bi[c]) * inv;
                            if (na > double(eps)) da -= dot * inv * double(ai[c]) / (na * na);
                            a->grad[size_t(int64_t(i) * C + c)] += float(g * da);
                        }
                        if (b->needs_grad) {
                            double db = double(ai[c]) * inv;
                            if (nb > double(eps)) db -= dot * inv * double(bi[c]) / (nb * nb);
                            b->grad[size_t(int64_t(i) * C + c)] += float(g * db);
                        }
                    }
                }
            };
        return o;
    }

    // Biased (V-statistic) squared MMD between row sets X and Y with a
    // multi-bandwidth RBF kernel: sum over gammas of
    //   mean K(X,X) + mean K(Y,Y) - 2 mean K(X,Y),  K(u,v) = exp(-g ||u-v||^2).
    TRef rbf_mmd2(TRef x, TRef y, std::vector<double> gammas) {
        if (x->shape.size() != 2 || y->shape.size() != 2 || x->shape[1] != y->shape[1])
            throw std::invalid_argument("rbf_mmd2: expects [n,d] and [m,d]");
        if (x->shape[0] < 1 || y->shape[0] < 1) throw std::invalid_argument("rbf_mmd2: empty set");
        if (gammas.empty()) throw std::invalid_argument("rbf_mmd2: needs at least one bandwidth");
        int n = x->shape[0], m = y->shape[0], d = x->shape[1];
        TRef o = alloc({1}, {x, y});
        o->val[0] = float(mmd2_biased(x->val.data(), n, y->val.data(), m, d, gammas));
        if (o->needs_grad)
            o->backward_fn = [n, m, d, gammas = std::move(gammas)](Node& o) {
                Node* x = o.parents[0];
                Node* y = o.parents[1];
                float g0 = o.grad[0];
                for (double g : gammas) {
                    if (x->needs_grad) {
                        mmd_grad_same(x->val.data(), n, d, g, 1.0 / (double(n) * n), g0, x->grad.data());
                        mmd_grad_cross(x->val.data(), y->val.data(), n, m, d, g, -2.0 / (double(n) * m), g0, x->grad.data());
                    }
                    if (y->needs_grad) {
                        mmd_grad_same(y->val.data(), m, d, g, 1.0 / (double(m) * m), g0, y->grad.data());
                        mmd_grad_cross(y->val.data(), x->val.data(), m, n, d, g, -2.0 / (double(n) * m), g0, y->grad.data());
                    }
                }
            };
        return o;
    }

    // Identity forward; backward multiplies the incoming gradient by -beta.
    TRef grad_reverse(TRef x, float beta) {
        if (beta < 0.0f) throw std::invalid_argument("grad_reverse: beta must be nonnegative");
        TRef o = alloc(x->shape, {x});
        o->val = x->val;
        if (o->needs_grad)
            o->backward_fn = [beta](Node& o) { acc_into(o.parents[0], o.grad.data(), -beta); };
        return o;
    }

    // ---- backward ----
    void backward(TRef loss) {
        if (loss->size() != 1) throw std::invalid_argument("backward: loss must be scalar");
        if (!loss->needs_grad) throw std::logic_error("backward: loss is detached from every trainable tensor");
        if (used_) throw std::logic_error("backward: tape already consumed; rerun the forward pass");
        used_ = true;
        for (auto& n : nodes_)
            if (n->needs_grad) n->grad.assign(n->val.size(), 0.0f);
        loss->grad[0] = 1.0f;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node& n = **it;
            if (n.needs_grad && n.backward_fn) n.backward_fn(n);
        }
    }

    size_t num_nodes() const { return nodes_.size(); }

private:
    std::deque<std::unique_ptr<Node>> nodes_;
    bool used_ = false;

    TRef alloc(Shape s, std::vector<Node*> parents = {}) {
        auto n = std::make_unique<Node>();
        n->shape = std::move(s);
        n->val.assign(size_t(numel(n->shape)), 0.0f);
        n->parents = std::move(parents);
        for (Node* p : n->parents)
            if (p->needs_grad) n->needs_grad = true;
        nodes_.push_back(std::move(n));
        return nodes_.back().get();
    }

    template <typename F, typename B>
    TRef unary(TRef a, F f, B bwd) {
        TRef o = alloc(a->shape, {a});
        for (int64_t i = 0; i < a->size(); ++i) o->val[size_t(i)] = f(a->val[size_t(i)]);
        if (o->needs_grad) o->backward_fn = bwd;
        return o;
    }

    template <typename F, typename B>
    TRef binary(TRef a, TRef b, F f, B bwd) {
        if (a->shape != b->shape)
            throw std::invalid_argument("elementwise: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
        TRef o = alloc(a->shape, {a, b});
        for (int64_t i = 0; i < a->size(); ++i) o->val[size_t(i)] = f(a->val[size_t(i)], b->val[size_t(i)]);
        if (o->needs_grad) o->backward_fn = bwd;
        return o;
    }

    static void acc_into(Node* p, const float* g, float scale) {
        if (!p->needs_grad) return;
        for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += scale * g[i];
    }

    static void check_nchw_param(TRef x, TRef p, const char* op) {
        if (x->shape.size() != 4 || p->shape.size() != 1 || p->shape[0] != x->shape[1])
            throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }

    static std::tuple<int64_t, int64_t, int64_t> axis_split(const Shape& s, int axis) {
        if (axis < 0 || axis >= int(s.size())) throw std::invalid_argument("reduction: axis out of range");
        if (s[size_t(axis)] == 0) throw std::invalid_argument("reduction: empty axis");
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= s[size_t(i)];
        for (int i = axis + 1; i < int(s.size()); ++i) inner *= s[size_t(i)];
        return {outer, s[size_t(axis)], inner};
    }

    static void im2col(const float* x, int C, int H, int W, int kh, int kw, int pad, float* cols) {
        int OH = H + 2 * pad - kh + 1, OW = W + 2 * pad - kw + 1;
        int64_t col = 0;
        for (int c = 0; c < C; ++c)
            for (int di = 0; di < kh; ++di)
                for (int dj = 0; dj < kw; ++dj) {
                    const float* xc = x + int64_t(c) * H * W;
                    for (int i = 0; i < OH; ++i) {
                        int si = i + di - pad;
                        for (int j = 0; j < OW; ++j) {
                            int sj = j + dj - pad;
                            cols[size_t(col++)] =
                                (si >= 0 && si < H && sj >= 0 && sj < W) ? xc[int64_t(si) * W + sj] : 0.0f;
                        }
                    }
                }
    }

    static void col2im_acc(const float* cols, int C, int H, int W, int kh, int kw, int pad, float* dx) {
        int OH = H + 2 * pad - kh + 1, OW = W + 2 * pad - kw + 1;
        int64_t col = 0;
        for (int c = 0; c < C; ++c)
            for (int di = 0; di < kh; ++di)
                for (int dj = 0; dj < kw; ++dj) {
                    float* xc = dx + int64_t(c) * H * W;
                    for (int i = 0; i < OH; ++i) {
                        int si = i + di - pad;
                        for (int j = 0; j < OW; ++j) {
                            int sj = j + dj - pad;
                            if (si >= 0 && si < H && sj >= 0 && sj < W) xc[int64_t(si) * W + sj] += cols[size_t(col)];
                            ++col;
                        }
                    }
                }
    }

    // d/dx_i of coef * sum_{j,j'} K(x_j, x_j'): rows i contribute twice.
    static void mmd_grad_same(const float* x, int n, int d, double gamma, double coef, float g0, float* dx) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const float* xi = x + int64_t(i) * d;
                const float* xj = x + int64_t(j) * d;
                double d2 = 0.0;
                for (int c = 0; c < d; ++c) {
                    double diff = double(xi[c]) - xj[c];
                    d2 += diff * diff;
                }
                double k = std::exp(-gamma * d2);
                double f = g0 * coef * (-2.0 * gamma) * k * 2.0; // both occurrences of row i
                float* dxi = dx + int64_t(i) * d;
                for (int c = 0; c < d; ++c) dxi[c] += float(f * (double(xi[c]) - xj[c]));
            }
    }

    // d/dx_i of coef * sum_{i,j} K(x_i, y_j), gradient into dx only.
    static void mmd_grad_cross(const float* x, const float* y, int n, int m, int d, double gamma, double coef,
                               float g0, float* dx) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) {
                const float* xi = x + int64_t(i) * d;
                const float* yj = y + int64_t(j) * d;
                double d2 = 0.0;
                for (int c = 0; c < d; ++c) {
                    double diff = double(xi[c]) - yj[c];
                    d2 += diff * diff;
                }
                double k = std::exp(-gamma * d2);
                double f = g0 * coef * (-2.0 * gamma) * k;
                float* dxi = dx + int64_t(i) * d;
                for (int c = 0; c < d; ++c) dxi[c] += float(f * (double(xi[c]) - yj[c]));
            }
    }
};

inline TensorData reduce_sum_axis(const TensorData& x, int axis) {
    if (axis < 0 || axis >= int(x.shape.size())) throw std::invalid_argument("reduce_sum_axis: axis out of range");
    if (x.shape[size_t(axis)] == 0) throw std::invalid_argument("reduce_sum_axis: empty axis");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape[size_t(i)];
    for (int i = axis + 1; i < int(x.shape.size()); ++i) inner *= x.shape[size_t(i)];
    int64_t mid = x.shape[size_t(axis)];
    Shape os = x.shape;
    os.erase(os.begin() + axis);
    if (os.empty()) os = {1};
    TensorData o = TensorData::zeros(os);
    for (int64_t a = 0; a < outer; ++a)
        for (int64_t c = 0; c < inner; ++c) {
            double s = 0.0;
            for (int64_t b = 0; b < mid; ++b) s += x.v[size_t((a * mid + b) * inner + c)];
            o.v[size_t(a * inner + c)] = float(s);
        }
    return o;
}

inline std::vector<int> argmax_axis(const TensorData& x, int axis) {
    if (axis < 0 || axis >= int(x.shape.size())) throw std::invalid_argument("argmax_axis: axis out of range");
    if (x.shape[size_t(axis)] == 0) throw std::invalid_argument("argmax_axis: empty axis");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape[size_t(i)];
    for (int i = axis + 1; i < int(x.shape.size()); ++i) inner *= x.shape[size_t(i)];
    int64_t mid = x.shape[size_t(axis)];
    std::vector<int> out(size_t(outer * inner));
    for (int64_t a = 0; a < outer; ++a)
        for (int64_t c = 0; c < inner; ++c) {
            int best = 0;
            float bv = x.v[size_t(a * mid * inner + c)];
            for (int64_t b = 1; b < mid; ++b) {
                float v = x.v[size_t((a * mid + b) * inner + c)];
                if (v > bv) { bv = v; best = int(b); }
            }
            out[size_t(a * inner + c)] = best;
        }
    return out;
}

inline std::vector<int> argmax_rows(const TensorData& logits) { return argmax_axis(logits, 1); }

} // namespace decrop
