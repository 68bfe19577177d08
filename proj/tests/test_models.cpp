#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <unistd.h>

#include "decrop/models.hpp"
#include "decrop/rng.hpp"

using namespace decrop;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path p;
    TempDir() {
        p = fs::temp_directory_path() / ("decrop-models-" + std::to_string(::getpid()));
        fs::create_directories(p);
    }
    ~TempDir() { fs::remove_all(p); }
};

TensorData random_batch(int n, int c, int s, uint64_t seed) {
    TensorData t = TensorData::zeros({n, c, s, s});
    Rng rng(seed);
    for (float& v : t.v) v = float(rng.uniform());
    return t;
}

} // namespace

TEST_CASE("classifier forward: shapes, determinism, finite outputs") {
    ClassifierModel m = make_classifier(10, 12, 3);
    TensorData x = random_batch(4, 3, 12, 11);
    Tape t;
    ClassifierOut out = classifier_forward(t, m, t.leaf(x));
    REQUIRE(out.logits->shape == Shape{4, 10});
    REQUIRE(out.features->shape == Shape{4, 64});
    for (float v : out.logits->val) REQUIRE(std::isfinite(v));

    Tape t2;
    ClassifierOut out2 = classifier_forward(t2, m, t2.leaf(x));
    REQUIRE(out2.logits->val == out.logits->val);

    Tape t3;
    REQUIRE_THROWS_AS(classifier_forward(t3, m, t3.leaf(random_batch(2, 3, 16, 1))), std::invalid_argument);
}

TEST_CASE("untrained denoiser is exactly the identity") {
    DenoiserModel d = make_denoiser(7, 12, 42);
    TensorData x = random_batch(2, 3, 12, 5);
    Tape t;
    TRef y = denoiser_forward(t, d, t.leaf(x));
    REQUIRE(y->shape == x.shape);
    for (size_t i = 0; i < x.v.size(); ++i) REQUIRE(y->val[i] == x.v[i]);
}

TEST_CASE("fresh discriminator outputs exactly 0.5") {
    DiscriminatorModel dd = make_discriminator(64, 3);
    TensorData f = TensorData::zeros({5, 64});
    Rng rng(8);
    for (float& v : f.v) v = float(rng.normal());
    Tape t;
    TRef p = discriminate(t, dd, t.leaf(f));
    REQUIRE(p->shape == Shape{5, 1});
    for (float v : p->val) REQUIRE(v == 0.5f);
}

TEST_CASE("checkpoint round-trips are bitwise for all three models") {
    TempDir tmp;

    ClassifierModel c = make_classifier(7, 12, 99);
    c.params.at("fc2.b").v[0] = 0.25f;
    save_classifier(tmp.p / "c.bin", c, {{"note", "x"}});
    ClassifierModel c2 = load_classifier(tmp.p / "c.bin");
    REQUIRE(c2.params.hash() == c.params.hash());
    REQUIRE(c2.num_classes == 7);
    REQUIRE(c2.creation_seed == 99);

    DenoiserModel d = make_denoiser(5, 8, 3);
    d.params.at("out.w").v[7] = -1.5f;
    save_denoiser(tmp.p / "d.bin", d);
    DenoiserModel d2 = load_denoiser(tmp.p / "d.bin");
    REQUIRE(d2.params.hash() == d.params.hash());
    REQUIRE(d2.depth == 5);
    REQUIRE(d2.width == 8);

    DiscriminatorModel dd = make_discriminator(32, 4, 50);
    save_discriminator(tmp.p / "dd.bin", dd);
    DiscriminatorModel dd2 = load_discriminator(tmp.p / "dd.bin");
    REQUIRE(dd2.params.hash() == dd.params.hash());
    REQUIRE(dd2.hidden == 50);

    // kind confusion is refused
    REQUIRE_THROWS_AS(load_classifier(tmp.p / "d.bin"), FormatError);
    REQUIRE_THROWS_AS(load_denoiser(tmp.p / "c.bin"), FormatError);
}

TEST_CASE("frozen classifier parameters are untouched by backward") {
    ClassifierModel m = make_classifier(4, 12, 17);
    uint64_t before = m.params.hash();
    TensorData x = random_batch(2, 3, 12, 6);
    Tape t;
    BoundParams p = bind_params(t, m.params, false); // frozen
    ClassifierOut out = classifier_forward(t, m, p, t.leaf(x, true));
    t.backward(t.mean(out.logits));
    REQUIRE(m.params.hash() == before);
    for (const auto& [name, ref] : p.refs) {
        INFO(name);
        REQUIRE(ref->grad.empty()); // never allocated: no grad flowed into frozen leaves
    }
}

TEST_CASE("grl schedule endpoints and monotonicity") {
    REQUIRE(grl_schedule(0.0) == 0.0f);
    REQUIRE(grl_schedule(1.0) == Catch::Approx(2.0 / (1.0 + std::exp(-10.0)) - 1.0).epsilon(1e-6));
    REQUIRE(grl_schedule(1.0) > 0.9999f);
    float prev = -1.0f;
    for (int i = 0; i <= 20; ++i) {
        float v = grl_schedule(i / 20.0);
        REQUIRE(v >= prev);
        prev = v;
    }
    REQUIRE(grl_schedule(-0.5) == grl_schedule(0.0)); // clamped
    REQUIRE(grl_schedule(2.0) == grl_schedule(1.0));
}

TEST_CASE("gradient reversal through the discriminator flips denoiser-side gradients") {
    // GRL law at beta=1: gradient wrt the features equals the exact negation
    // of the gradient with the reversal removed.
    DiscriminatorModel dd = make_discriminator(16, 21);
    Rng rng(13);
    for (float& v : dd.params.at("fc2.w").v) v = float(0.1 * rng.normal());
    TensorData f = TensorData::zeros({6, 16});
    for (float& v : f.v) v = float(rng.normal());
    std::vector<float> targets(6, 1.0f);

    auto run = [&](bool reversed) {
        Tape t;
        TRef fr = t.leaf(f, true);
        TRef in = reversed ? t.grad_reverse(fr, 1.0f) : fr;
        BoundParams p = bind_params(t, dd.params, false);
        TRef logit = discriminator_logit(t, dd, p, in);
        t.backward(t.sigmoid_bce(logit, targets));
        return fr->grad;
    };
    std::vector<float> g_rev = run(true), g_plain = run(false);
    for (size_t i = 0; i < g_rev.size(); ++i) REQUIRE(g_rev[i] == -g_plain[i]);
}

TEST_CASE("classify_batch composes denoiser and classifier") {
    ClassifierModel m = make_classifier(5, 12, 31);
    DenoiserModel d = make_denoiser(5, 8, 32); // identity at init
    TensorData x = random_batch(3, 3, 12, 33);
    std::vector<int> with = classify_batch(m, &d, x);
    std::vector<int> without = classify_batch(m, nullptr, x);
    REQUIRE(with == without); // identity denoiser changes nothing
    REQUIRE(with.size() == 3);
    for (int y : with) {
        REQUIRE(y >= 0);
        REQUIRE(y < 5);
    }
}

TEST_CASE("parameter hash reacts to any single-bit change") {
    ClassifierModel m = make_classifier(3, 12, 1);
    uint64_t h0 = m.params.hash();
    m.params.at("conv2.b").v[5] += 1e-7f;
    REQUIRE(m.params.hash() != h0);
}
