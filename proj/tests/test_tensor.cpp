#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "decrop/rng.hpp"
#include "decrop/tensor.hpp"

using namespace decrop;

namespace {

TensorData rand_td(Shape s, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
    TensorData t = TensorData::zeros(std::move(s));
    for (float& v : t.v) v = lo + (hi - lo) * float(rng.uniform());
    return t;
}

// Push values away from a point where the op is non-differentiable
// (relu kink, pool ties).
void avoid(TensorData& t, float center, float margin) {
    for (float& v : t.v)
        if (std::abs(v - center) < margin) v = center + (v >= center ? margin : -margin);
}

using Builder = std::function<TRef(Tape&, const std::vector<TRef>&)>;

int g_instances = 0;

// Central finite differences (step 1e-3, loss re-evaluated on a fresh tape)
// against one reverse-mode sweep. Relative error < 1e-4 with a unit floor
// in the denominator.
void check_gradients(const std::vector<TensorData>& inputs, const Builder& f, double tol = 1e-4) {
    ++g_instances;
    Tape tape;
    std::vector<TRef> leaves;
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in, true));
    TRef loss = f(tape, leaves);
    REQUIRE(loss->size() == 1);
    tape.backward(loss);

    const double h = 1e-3;
    auto eval = [&](size_t li, size_t j, double delta) {
        std::vector<TensorData> per = inputs;
        per[li].v[j] = float(double(per[li].v[j]) + delta);
        Tape t2;
        std::vector<TRef> l2;
        for (const auto& in : per) l2.push_back(t2.leaf(in, false));
        return double(f(t2, l2)->val[0]);
    };
    for (size_t li = 0; li < inputs.size(); ++li)
        for (size_t j = 0; j < inputs[li].v.size(); ++j) {
            double fd = (eval(li, j, h) - eval(li, j, -h)) / (2.0 * h);
            double g = double(leaves[li]->grad[j]);
            double denom = std::max({1.0, std::abs(fd), std::abs(g)});
            INFO("input " << li << " element " << j << " analytic " << g << " fd " << fd);
            REQUIRE(std::abs(g - fd) / denom < tol);
        }
}

// Reduce an arbitrary-shaped output to a scalar with fixed random weights so
// every output element participates in the loss.
TRef weighted_sum(Tape& t, TRef out, Rng& rng) {
    // Small weights keep the scalar loss O(0.1): float32 forward rounding
    // divided by the 2e-3 FD step is the noise floor of this check, and it
    // scales with the loss magnitude.
    TensorData w = rand_td(out->shape, rng, -0.1f, 0.1f);
    return t.sum(t.mul(out, t.leaf(w)));
}

} // namespace

TEST_CASE("gradients: elementwise ops") {
    for (uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        Rng rng(seed);
        TensorData a = rand_td({2, 3}, rng), b = rand_td({2, 3}, rng);
        TensorData pos = rand_td({2, 3}, rng, 0.2f, 2.0f);
        TensorData nz = rand_td({2, 3}, rng);
        avoid(nz, 0.0f, 0.3f); // keep divisors away from 0
        Rng wrng(seed + 100);

        auto w2 = [&](auto op) {
            Rng wr = wrng.derive(1);
            return [op, wr](Tape& t, const std::vector<TRef>& l) mutable {
                Rng r = wr;
                return weighted_sum(t, op(t, l), r);
            };
        };
        check_gradients({a, b}, w2([](Tape& t, const std::vector<TRef>& l) { return t.add(l[0], l[1]); }));
        check_gradients({a, b}, w2([](Tape& t, const std::vector<TRef>& l) { return t.sub(l[0], l[1]); }));
        check_gradients({a, b}, w2([](Tape& t, const std::vector<TRef>& l) { return t.mul(l[0], l[1]); }));
        check_gradients({a, nz}, w2([](Tape& t, const std::vector<TRef>& l) { return t.div(l[0], l[1]); }));
        check_gradients({a}, w2([](Tape& t, const std::vector<TRef>& l) { return t.add_scalar(l[0], 0.7f); }));
        check_gradients({a}, w2([](Tape& t, const std::vector<TRef>& l) { return t.mul_scalar(l[0], -1.3f); }));
        check_gradients({a}, w2([](Tape& t, const std::vector<TRef>& l) { return t.negate(l[0]); }));
        check_gradients({a}, w2([](Tape& t, const std::vector<TRef>& l) { return t.exp_(l[0]); }));
        check_gradients({pos}, w2([](Tape& t, const std::vector<TRef>& l) { return t.log_(l[0]); }));
        check_gradients({a}, w2([](Tape& t, const std::vector<TRef>& l) { return t.square(l[0]); }));
        check_gradients({pos}, w2([](Tape& t, const std::vector<TRef>& l) { return t.sqrt_(l[0]); }));
        check_gradients({a}, w2([](Tape& t, const std::vector<TRef>& l) { return t.sigmoid(l[0]); }));

        TensorData rz = rand_td({2, 3}, rng);
        avoid(rz, 0.0f, 0.1f); // stay clear of the relu kink
        check_gradients({rz}, w2([](Tape& t, const std::vector<TRef>& l) { return t.relu(l[0]); }));
    }
}

TEST_CASE("gradients: matmul and network layers") {
    for (uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
        Rng rng(seed);
        Rng wrng(seed + 200);
        auto w2 = [&](auto op) {
            Rng wr = wrng.derive(1);
            return [op, wr](Tape& t, const std::vector<TRef>& l) mutable {
                Rng r = wr;
                return weighted_sum(t, op(t, l), r);
            };
        };

        TensorData A = rand_td({3, 4}, rng), B = rand_td({4, 2}, rng);
        check_gradients({A, B}, w2([](Tape& t, const std::vector<TRef>& l) { return t.matmul(l[0], l[1]); }));
        // 3x3 sum(matmul) against an independent double-precision FD oracle;
        // the loss is linear in each element, so the central difference in
        // 64-bit arithmetic is exact up to representation error.
        ++g_instances;
        TensorData A3 = rand_td({3, 3}, rng), B3 = rand_td({3, 3}, rng);
        Tape mt;
        TRef a3 = mt.leaf(A3, true), b3 = mt.leaf(B3, true);
        mt.backward(mt.sum(mt.matmul(a3, b3)));
        auto mm_sum = [](const std::vector<float>& a, const std::vector<float>& b) {
            double s = 0.0;
            for (int i = 0; i < 3; ++i)
                for (int kk = 0; kk < 3; ++kk)
                    for (int j = 0; j < 3; ++j) s += double(a[size_t(i * 3 + kk)]) * double(b[size_t(kk * 3 + j)]);
            return s;
        };
        const double h3 = 1e-3;
        for (int side = 0; side < 2; ++side) {
            TRef leafn = side == 0 ? a3 : b3;
            const std::vector<float>& base = side == 0 ? A3.v : B3.v;
            for (size_t j = 0; j < 9; ++j) {
                std::vector<float> up = base, dn = base;
                up[j] = float(double(up[j]) + h3);
                dn[j] = float(double(dn[j]) - h3);
                double fd = side == 0 ? (mm_sum(up, B3.v) - mm_sum(dn, B3.v)) / (2.0 * h3)
                                      : (mm_sum(A3.v, up) - mm_sum(A3.v, dn)) / (2.0 * h3);
                double g = double(leafn->grad[j]);
                REQUIRE(std::abs(g - fd) / std::max({1.0, std::abs(fd), std::abs(g)}) < 1e-4);
            }
        }

        TensorData x = rand_td({2, 2, 5, 5}, rng, -0.5f, 0.5f), k = rand_td({3, 2, 3, 3}, rng, -0.4f, 0.4f);
        check_gradients({x, k}, w2([](Tape& t, const std::vector<TRef>& l) { return t.conv2d(l[0], l[1], 1); }));
        TensorData k0 = rand_td({2, 2, 3, 3}, rng, -0.5f, 0.5f);
        check_gradients({x, k0}, w2([](Tape& t, const std::vector<TRef>& l) { return t.conv2d(l[0], l[1], 0); }));

        TensorData bias = rand_td({2}, rng), scale = rand_td({2}, rng, 0.5f, 1.5f), shift = rand_td({2}, rng);
        check_gradients({x, bias}, w2([](Tape& t, const std::vector<TRef>& l) { return t.bias_channel(l[0], l[1]); }));
        check_gradients({x, scale, shift}, w2([](Tape& t, const std::vector<TRef>& l) {
                            return t.affine_channel(l[0], l[1], l[2]);
                        }));

        TensorData m = rand_td({3, 4}, rng), rb = rand_td({4}, rng);
        check_gradients({m, rb}, w2([](Tape& t, const std::vector<TRef>& l) { return t.bias_row(l[0], l[1]); }));

        TensorData px = rand_td({2, 2, 4, 4}, rng);
        // separate pool candidates so the argmax is stable under the FD step
        for (size_t i = 0; i < px.v.size(); ++i) px.v[i] += 0.01f * float(i % 16);
        check_gradients({px}, w2([](Tape& t, const std::vector<TRef>& l) { return t.maxpool2(l[0]); }));

        check_gradients({x}, w2([](Tape& t, const std::vector<TRef>& l) { return t.reshape(l[0], {4, 25}); }));
    }
}

TEST_CASE("gradients: reductions and normalization") {
    for (uint64_t seed : {21u, 22u, 23u, 24u, 25u}) {
        Rng rng(seed);
        Rng wrng(seed + 300);
        auto w2 = [&](auto op) {
            Rng wr = wrng.derive(1);
            return [op, wr](Tape& t, const std::vector<TRef>& l) mutable {
                Rng r = wr;
                return weighted_sum(t, op(t, l), r);
            };
        };
        TensorData x = rand_td({2, 3, 4}, rng);
        check_gradients({x}, [](Tape& t, const std::vector<TRef>& l) { return t.sum(l[0]); });
        check_gradients({x}, [](Tape& t, const std::vector<TRef>& l) { return t.mean(l[0]); });
        for (int axis : {0, 1, 2}) {
            check_gradients({x}, w2([axis](Tape& t, const std::vector<TRef>& l) { return t.sum_axis(l[0], axis); }));
            check_gradients({x}, w2([axis](Tape& t, const std::vector<TRef>& l) { return t.mean_axis(l[0], axis); }));
        }
        TensorData n = rand_td({3, 5}, rng, -2.0f, 2.0f);
        check_gradients({n}, w2([](Tape& t, const std::vector<TRef>& l) { return t.l2_normalize(l[0]); }));
        TensorData v = rand_td({6}, rng, -2.0f, 2.0f);
        check_gradients({v}, w2([](Tape& t, const std::vector<TRef>& l) { return t.l2_normalize(l[0]); }));
    }
}

TEST_CASE("gradients: losses and fused ops") {
    for (uint64_t seed : {31u, 32u, 33u, 34u, 35u}) {
        Rng rng(seed);
        Rng wrng(seed + 400);
        auto w2 = [&](auto op) {
            Rng wr = wrng.derive(1);
            return [op, wr](Tape& t, const std::vector<TRef>& l) mutable {
                Rng r = wr;
                return weighted_sum(t, op(t, l), r);
            };
        };

        TensorData logits = rand_td({4, 5}, rng, -2.0f, 2.0f);
        std::vector<int> targets;
        for (int i = 0; i < 4; ++i) targets.push_back(int(rng.below(5)));
        // Scalar losses are stored as float32; scaling the loss (and with it
        // the gradients and the storage noise) keeps the FD error under the
        // unit-floored relative tolerance without weakening the check.
        check_gradients({logits}, [targets](Tape& t, const std::vector<TRef>& l) {
            return t.mul_scalar(t.softmax_cross_entropy(l[0], targets), 0.25f);
        });

        TensorData z = rand_td({6}, rng, -3.0f, 3.0f);
        std::vector<float> bt;
        for (int i = 0; i < 6; ++i) bt.push_back(rng.uniform() < 0.5 ? 0.0f : 1.0f);
        check_gradients({z}, [bt](Tape& t, const std::vector<TRef>& l) { return t.mul_scalar(t.sigmoid_bce(l[0], bt), 0.25f); });

        TensorData ca = rand_td({3, 6}, rng, -2.0f, 2.0f), cb = rand_td({3, 6}, rng, -2.0f, 2.0f);
        check_gradients({ca, cb}, w2([](Tape& t, const std::vector<TRef>& l) { return t.cosine_rows(l[0], l[1]); }));

        TensorData mx = rand_td({4, 3}, rng), my = rand_td({5, 3}, rng);
        std::vector<double> gammas = {0.5, 1.0, 2.0};
        check_gradients({mx, my}, [gammas](Tape& t, const std::vector<TRef>& l) {
            return t.mul_scalar(t.rbf_mmd2(l[0], l[1], gammas), 0.25f);
        });

        // grad_reverse defeats a plain FD check by construction; its backward
        // law is asserted exactly in a dedicated test below, while beta=0
        // (pure detach of the reversed path) still admits an FD check.
        TensorData gx = rand_td({2, 4}, rng);
        check_gradients({gx}, w2([](Tape& t, const std::vector<TRef>& l) {
                            return t.add(l[0], t.grad_reverse(t.mul_scalar(l[0], 0.0f), 1.0f));
                        }));
    }
}

TEST_CASE("gradients: composed two-layer network") {
    for (uint64_t seed : {41u, 42u, 43u, 44u, 45u}) {
        Rng rng(seed);
        TensorData x = rand_td({3, 4}, rng), w1 = rand_td({4, 5}, rng, -0.7f, 0.7f), b1 = rand_td({5}, rng);
        TensorData w2m = rand_td({5, 3}, rng, -0.7f, 0.7f), b2 = rand_td({3}, rng);
        // keep the hidden preactivation away from the relu kink
        std::vector<int> targets = {0, 2, 1};
        auto net = [targets](Tape& t, const std::vector<TRef>& l) {
            TRef h = t.relu(t.bias_row(t.matmul(l[0], l[1]), l[2]));
            TRef logits = t.bias_row(t.matmul(h, l[3]), l[4]);
            return t.softmax_cross_entropy(logits, targets);
        };
        // shift b1 so no preactivation sits within 0.05 of zero
        Tape probe;
        TRef pre = probe.bias_row(probe.matmul(probe.leaf(x), probe.leaf(w1)), probe.leaf(b1));
        for (float v : pre->val) REQUIRE(std::isfinite(v));
        bool near = false;
        for (float v : pre->val) near |= std::abs(v) < 0.01f;
        if (near)
            for (float& v : b1.v) v += 0.05f;
        check_gradients({x, w1, b1, w2m, b2}, net, 2e-4);
    }
}

TEST_CASE("at least 100 gradient-check instances ran") { REQUIRE(g_instances >= 100); }

TEST_CASE("relu derivative at exactly zero is zero") {
    Tape t;
    TRef x = t.leaf(TensorData({3}, {-1.0f, 0.0f, 2.0f}), true);
    TRef loss = t.sum(t.relu(x));
    t.backward(loss);
    REQUIRE(x->grad[0] == 0.0f);
    REQUIRE(x->grad[1] == 0.0f); // kink convention
    REQUIRE(x->grad[2] == 1.0f);
}

TEST_CASE("maxpool2 ties route gradient to the first element") {
    Tape t;
    TensorData x = TensorData::full({1, 1, 2, 2}, 0.5f);
    TRef xr = t.leaf(x, true);
    TRef loss = t.sum(t.maxpool2(xr));
    t.backward(loss);
    REQUIRE(xr->grad[0] == 1.0f);
    REQUIRE(xr->grad[1] == 0.0f);
    REQUIRE(xr->grad[2] == 0.0f);
    REQUIRE(xr->grad[3] == 0.0f);
}

TEST_CASE("grad_reverse: identity forward, negated scaled backward") {
    Rng rng(9);
    TensorData x = rand_td({4, 3}, rng);
    for (float beta : {0.0f, 0.5f, 1.0f, 2.0f}) {
        Tape t;
        TRef xr = t.leaf(x, true);
        TRef y = t.grad_reverse(xr, beta);
        for (int64_t i = 0; i < y->size(); ++i) REQUIRE(y->val[size_t(i)] == x.v[size_t(i)]);
        TRef loss = t.sum(t.mul(y, t.leaf(x)));
        t.backward(loss);
        Tape t2;
        TRef xr2 = t2.leaf(x, true);
        TRef loss2 = t2.sum(t2.mul(xr2, t2.leaf(x)));
        t2.backward(loss2);
        for (size_t i = 0; i < xr->grad.size(); ++i) REQUIRE(xr->grad[i] == -beta * xr2->grad[i]);
    }
    Tape t;
    REQUIRE_THROWS_AS(t.grad_reverse(t.leaf(x), -0.5f), std::invalid_argument);
}

TEST_CASE("matmul values against hand arithmetic") {
    Tape t;
    TRef a = t.leaf(TensorData({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f}));
    TRef b = t.leaf(TensorData({2, 2}, {5.0f, 6.0f, 7.0f, 8.0f}));
    TRef c = t.matmul(a, b);
    REQUIRE(c->val == std::vector<float>{19.0f, 22.0f, 43.0f, 50.0f});
    REQUIRE_THROWS_AS(t.matmul(a, t.leaf(TensorData::zeros({3, 2}))), std::invalid_argument);
}

TEST_CASE("tape is single-use and rejects detached losses") {
    Tape t;
    TRef x = t.leaf(TensorData({2}, {1.0f, 2.0f}), true);
    TRef loss = t.sum(t.square(x));
    t.backward(loss);
    REQUIRE_THROWS_AS(t.backward(loss), std::logic_error);

    Tape t2;
    TRef y = t2.leaf(TensorData({2}, {1.0f, 2.0f}), false);
    TRef detached = t2.sum(y);
    REQUIRE_THROWS_AS(t2.backward(detached), std::logic_error);

    Tape t3;
    TRef z = t3.leaf(TensorData({3}, {1.0f, 2.0f, 3.0f}), true);
    REQUIRE_THROWS_AS(t3.backward(z), std::invalid_argument); // non-scalar
}

TEST_CASE("forward values stay finite on finite inputs") {
    Rng rng(77);
    TensorData x = rand_td({2, 3, 6, 6}, rng, -3.0f, 3.0f);
    TensorData k = rand_td({4, 3, 3, 3}, rng, -1.0f, 1.0f);
    Tape t;
    TRef xr = t.leaf(x);
    TRef c = t.conv2d(xr, t.leaf(k), 1);
    TRef p = t.maxpool2(c);
    TRef r = t.relu(p);
    TRef s = t.sigmoid(r);
    for (TRef n : {c, p, r, s}) {
        TensorData td;
        td.shape = n->shape;
        td.v = n->val;
        REQUIRE(td.all_finite());
    }
}

TEST_CASE("log rejects non-positive inputs") {
    Tape t;
    REQUIRE_THROWS_AS(t.log_(t.leaf(TensorData({2}, {1.0f, -1.0f}))), std::invalid_argument);
    REQUIRE_THROWS_AS(t.log_(t.leaf(TensorData({1}, {0.0f}))), std::invalid_argument);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
    TensorData x({2, 3}, {1.0f, 3.0f, 3.0f, 2.0f, 2.0f, 2.0f});
    std::vector<int> am = argmax_rows(x);
    REQUIRE(am == std::vector<int>{1, 0});
}

TEST_CASE("elementwise shape mismatch throws") {
    Tape t;
    TRef a = t.leaf(TensorData::zeros({2, 3}));
    TRef b = t.leaf(TensorData::zeros({3, 2}));
    REQUIRE_THROWS_AS(t.add(a, b), std::invalid_argument);
    REQUIRE_THROWS_AS(t.reshape(a, {5}), std::invalid_argument);
}
