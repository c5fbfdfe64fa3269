#include <doctest.h>

#include <cmath>
#include <vector>

#include "leaklab/gradcheck.hpp"
#include "leaklab/model.hpp"
#include "leaklab/rng.hpp"

using namespace leaklab;

namespace {

ModelConfig tiny_config(uint64_t seed = 1) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_seq = 16;
    cfg.seed = seed;
    return cfg;
}

std::vector<double> flatten(const DecoderModel& m) {
    std::vector<double> out;
    for (const auto& [name, w] : m.named_weights()) {
        (void)name;
        out.insert(out.end(), w->data(), w->data() + w->size());
    }
    return out;
}

void unflatten(DecoderModel& m, const std::vector<double>& x) {
    size_t at = 0;
    for (auto& [name, w] : m.named_weights()) {
        (void)name;
        std::copy(x.begin() + static_cast<long>(at), x.begin() + static_cast<long>(at + w->size()),
                  w->data());
        at += w->size();
    }
}

std::vector<int> random_tokens(int len, Rng& rng) {
    std::vector<int> t(static_cast<size_t>(len));
    for (int& x : t) x = static_cast<int>(rng.below(256));
    return t;
}

} // namespace

TEST_CASE("config validation") {
    ModelConfig bad = tiny_config();
    bad.d_model = 10;
    bad.n_heads = 3;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    ModelConfig small_ff = tiny_config();
    small_ff.d_ff = 4;
    CHECK_THROWS_AS(small_ff.validate(), ArgumentError);
    CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("init is seed-deterministic") {
    DecoderModel a = DecoderModel::init(tiny_config(7));
    DecoderModel b = DecoderModel::init(tiny_config(7));
    CHECK(a == b);
    DecoderModel c = DecoderModel::init(tiny_config(8));
    CHECK_FALSE(a == c);

    // biases zero, norm scales one
    CHECK(a.layers[0].bq(0, 0) == 0.0);
    CHECK(a.layers[0].ln1_g(0, 3) == 1.0);
}

TEST_CASE("forward: recording is observationally pure") {
    DecoderModel m = DecoderModel::init(tiny_config(3));
    Rng rng(5);
    std::vector<int> tokens = random_tokens(10, rng);
    ForwardResult plain = forward(m, tokens);
    ForwardOptions opt;
    opt.record = true;
    ForwardResult recorded = forward(m, tokens, opt);
    CHECK(plain.logits == recorded.logits);
    CHECK(recorded.trace.acts.size() == submodule_paths(m.cfg).size());
}

TEST_CASE("forward: zero weights give a uniform next-token distribution") {
    DecoderModel z = DecoderModel::zeros_like(tiny_config());
    std::vector<int> tokens = {Tokenizer::BOS, 65, 66, 67};
    ForwardResult r = forward(z, tokens);
    for (int i = 0; i < r.logits.rows(); ++i)
        for (int j = 0; j < r.logits.cols(); ++j) CHECK(r.logits(i, j) == 0.0);
    CHECK(lm_loss(z, tokens) == doctest::Approx(std::log(259.0)).epsilon(1e-12));
}

TEST_CASE("forward: causality under future-token permutation") {
    DecoderModel m = DecoderModel::init(tiny_config(11));
    Rng rng(13);
    std::vector<int> tokens = random_tokens(12, rng);
    ForwardResult base = forward(m, tokens);
    std::vector<int> permuted = tokens;
    std::swap(permuted[8], permuted[11]);
    std::swap(permuted[9], permuted[10]);
    ForwardResult after = forward(m, permuted);
    for (int t = 0; t < 8; ++t)
        for (int j = 0; j < base.logits.cols(); ++j) {
            CHECK(base.logits(t, j) == after.logits(t, j)); // bit-exact
        }
}

TEST_CASE("forward: softmax rows sum to one") {
    DecoderModel m = DecoderModel::init(tiny_config(17));
    Rng rng(19);
    std::vector<int> tokens = random_tokens(8, rng);
    ForwardResult r = forward(m, tokens);
    for (int i = 0; i < r.logits.rows(); ++i) {
        const double* row = r.logits.row(i);
        double mx = row[0];
        for (int j = 1; j < r.logits.cols(); ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < r.logits.cols(); ++j) denom += std::exp(row[j] - mx);
        double total = 0.0;
        for (int j = 0; j < r.logits.cols(); ++j) total += std::exp(row[j] - mx) / denom;
        CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("forward guards") {
    DecoderModel m = DecoderModel::init(tiny_config());
    CHECK_THROWS_AS((void)forward(m, {}), ArgumentError);
    CHECK_THROWS_AS((void)forward(m, std::vector<int>(17, 0)), ArgumentError);
    CHECK_THROWS_AS((void)forward(m, {0, 300}), ArgumentError);
}

TEST_CASE("greedy_decode: identity at max_new=0 and tie-breaking") {
    DecoderModel z = DecoderModel::zeros_like(tiny_config());
    std::vector<int> prompt = {Tokenizer::BOS, 65};
    CHECK(greedy_decode(z, prompt, 0) == prompt);

    // all-equal logits: ties resolve to the lowest token id
    std::vector<int> out = greedy_decode(z, prompt, 3);
    REQUIRE(out.size() == 5);
    CHECK(out[2] == 0);
    CHECK(out[3] == 0);

    // stop token ends decoding early
    std::vector<int> stopped = greedy_decode(z, prompt, 3, 0);
    CHECK(stopped.size() == 3);

    CHECK_THROWS_AS((void)greedy_decode(z, std::vector<int>(15, 1), 4), ArgumentError);
}

TEST_CASE("lm_loss: PAD targets are excluded") {
    DecoderModel m = DecoderModel::init(tiny_config(23));
    std::vector<int> tokens = {Tokenizer::BOS, 72, 105, Tokenizer::EOS};
    const double base = lm_loss(m, tokens);
    std::vector<int> padded = tokens;
    padded.push_back(Tokenizer::PAD);
    padded.push_back(Tokenizer::PAD);
    CHECK(lm_loss(m, padded) == base); // bit-identical

    std::vector<int> all_pad = {Tokenizer::BOS, Tokenizer::PAD, Tokenizer::PAD};
    CHECK_THROWS_AS((void)lm_loss(m, all_pad), ArgumentError);
    CHECK_THROWS_AS((void)lm_loss(m, {42}), ArgumentError);
}

TEST_CASE("token_accuracy: untrained model sits at chance on random text") {
    ModelConfig cfg = tiny_config(29);
    cfg.d_model = 32;
    cfg.d_ff = 64;
    cfg.max_seq = 64;
    DecoderModel m = DecoderModel::init(cfg);
    Rng rng(31);
    std::vector<std::vector<int>> corpus;
    int targets = 0;
    for (int s = 0; s < 100; ++s) {
        std::vector<int> t = random_tokens(60, rng);
        t.insert(t.begin(), Tokenizer::BOS);
        targets += 60;
        corpus.push_back(std::move(t));
    }
    REQUIRE(targets >= 5000);
    const double acc = token_accuracy(m, corpus);
    const double p = 1.0 / 259.0;
    const double sigma = std::sqrt(p * (1 - p) / targets);
    CHECK(std::abs(acc - p) <= 4 * sigma);

    // PAD padding leaves accuracy unchanged
    std::vector<std::vector<int>> padded = corpus;
    for (auto& t : padded) t.push_back(Tokenizer::PAD);
    CHECK(token_accuracy(m, padded) == acc);

    CHECK_THROWS_AS((void)token_accuracy(m, {}), ArgumentError);
}

TEST_CASE("layernorm gradient matches central differences") {
    const int d = 6;
    Rng rng(37);
    // pack x, gamma, beta into one vector
    DifferentiableScalar f{
        [&](const std::vector<double>& p) {
            Matrix x(1, d), g(1, d), b(1, d), y;
            for (int j = 0; j < d; ++j) {
                x(0, j) = p[static_cast<size_t>(j)];
                g(0, j) = p[static_cast<size_t>(d + j)];
                b(0, j) = p[static_cast<size_t>(2 * d + j)];
            }
            std::vector<double> mean, rstd;
            detail::layernorm_forward(x, g, b, y, mean, rstd);
            double s = 0.0;
            for (int j = 0; j < d; ++j) s += (j + 1) * y(0, j); // fixed linear functional
            return s;
        },
        [&](const std::vector<double>& p) {
            Matrix x(1, d), g(1, d), b(1, d), y;
            for (int j = 0; j < d; ++j) {
                x(0, j) = p[static_cast<size_t>(j)];
                g(0, j) = p[static_cast<size_t>(d + j)];
                b(0, j) = p[static_cast<size_t>(2 * d + j)];
            }
            std::vector<double> mean, rstd;
            detail::layernorm_forward(x, g, b, y, mean, rstd);
            Matrix dy(1, d);
            for (int j = 0; j < d; ++j) dy(0, j) = j + 1;
            Matrix dx(1, d), dg(1, d), db(1, d);
            detail::layernorm_backward(dy, x, g, mean, rstd, dx, dg, db);
            std::vector<double> out(static_cast<size_t>(3 * d));
            for (int j = 0; j < d; ++j) {
                out[static_cast<size_t>(j)] = dx(0, j);
                out[static_cast<size_t>(d + j)] = dg(0, j);
                out[static_cast<size_t>(2 * d + j)] = db(0, j);
            }
            return out;
        }};
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> p(static_cast<size_t>(3 * d));
        for (double& v : p) v = rng.normal();
        CHECK(grad_check(f, p, 1e-6) < 1e-4);
    }
}

TEST_CASE("activation derivatives match central differences") {
    Rng rng(41);
    for (Activation act : {Activation::gelu, Activation::relu}) {
        DifferentiableScalar f{
            [act](const std::vector<double>& x) { return act_forward(act, x[0]); },
            [act](const std::vector<double>& x) {
                return std::vector<double>{act_derivative(act, x[0])};
            }};
        for (int trial = 0; trial < 10; ++trial) {
            double x = rng.normal();
            if (act == Activation::relu && std::abs(x) < 0.05) x += 0.5; // keep away from the kink
            CHECK(grad_check(f, {x}, 1e-6) < 1e-6);
        }
    }
}

TEST_CASE("full lm_loss gradient passes grad_check on a 2-layer d_model=16 model") {
    DecoderModel m = DecoderModel::init(tiny_config(43));
    Rng rng(47);
    std::vector<int> tokens = random_tokens(6, rng);
    tokens.insert(tokens.begin(), Tokenizer::BOS);
    tokens.push_back(Tokenizer::EOS);

    DifferentiableScalar f{
        [&](const std::vector<double>& x) {
            DecoderModel probe = m;
            unflatten(probe, x);
            return lm_loss(probe, tokens);
        },
        [&](const std::vector<double>& x) {
            DecoderModel probe = m;
            unflatten(probe, x);
            ForwardCache cache;
            ForwardResult r = forward(probe, tokens, {}, &cache);
            Matrix dlogits;
            detail::masked_ce(r.logits, tokens, nullptr, &dlogits);
            DecoderModel grads = DecoderModel::zeros_like(probe.cfg);
            backward(probe, cache, dlogits, grads);
            return flatten(grads);
        }};
    CHECK(grad_check(f, flatten(m), 1e-5) <= 1e-4);
}
