#include <doctest.h>

#include <cmath>

#include "gep/decoder.hpp"
#include "helpers.hpp"

using namespace gep;
using namespace gep::nn;
using namespace gep::test;

namespace {

DecoderConfig small_config(int vocab = 11) {
    DecoderConfig cfg;
    cfg.d_emb = 16;
    cfg.n_heads = 4;
    cfg.n_blocks = 3;
    cfg.window = 12;
    cfg.vocab_size = vocab;
    return cfg;
}

LatentVector random_latent(int d, Rng& rng) {
    LatentVector z;
    z.values.resize(static_cast<std::size_t>(d));
    for (float& v : z.values) {
        v = rng.uniform_float(-1.0f, 1.0f);
    }
    return z;
}

TokenSequence make_seq(const std::vector<int>& content, int window) {
    TokenSequence seq;
    seq.ids = content;
    seq.true_length = content.size();
    seq.ids.resize(static_cast<std::size_t>(window), 0);
    return seq;
}

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
    float worst = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

}  // namespace

TEST_CASE("config validation") {
    DecoderConfig cfg = small_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.n_heads = 3;  // 16 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    DecoderConfig odd = small_config();
    odd.d_emb = 12;
    odd.n_heads = 6;  // head dim 2, even
    CHECK_NOTHROW(odd.validate());
    odd.n_heads = 12;  // head dim 1, odd
    CHECK_THROWS_AS(odd.validate(), std::invalid_argument);
}

TEST_CASE("embed_tokens") {
    DecoderConfig cfg = small_config();
    Rng rng(3);
    DecoderWeights w = DecoderWeights::init(cfg, rng);
    TokenSequence seq = make_seq({1, 5, 5, 2}, cfg.window);
    Tensor e = embed_tokens(nullptr, seq, w);
    CHECK(e.shape() == std::vector<int>{cfg.window, cfg.d_emb});
    for (int j = 0; j < cfg.d_emb; ++j) {
        CHECK(e.data()[1 * cfg.d_emb + j] == e.data()[2 * cfg.d_emb + j]);
    }
    TokenSequence bad = make_seq({1, 99}, cfg.window);
    CHECK_THROWS_AS(embed_tokens(nullptr, bad, w), std::out_of_range);
}

TEST_CASE("decode_logits shape, determinism, untrained entropy") {
    DecoderConfig cfg = small_config(13);
    Rng rng(5);
    DecoderWeights w = DecoderWeights::init(cfg, rng);
    LatentVector z = random_latent(cfg.d_emb, rng);
    TokenSequence seq = make_seq({1, 6, 7, 8, 9, 2}, cfg.window);

    LogitMatrix lm = decode_logits(z, seq, cfg, w);
    CHECK(lm.window == cfg.window);
    CHECK(lm.vocab_size == 13);
    CHECK(lm.values.size() == static_cast<std::size_t>(cfg.window) * 13);

    LogitMatrix lm2 = decode_logits(z, seq, cfg, w);
    CHECK(lm.values == lm2.values);

    double entropy_sum = 0.0;
    for (int t = 0; t < static_cast<int>(seq.true_length); ++t) {
        auto row = lm.row(t);
        double mx = row[0];
        for (float v : row) {
            mx = std::max(mx, static_cast<double>(v));
            CHECK(std::isfinite(v));
        }
        double sum = 0.0;
        std::vector<double> p(row.size());
        for (std::size_t j = 0; j < row.size(); ++j) {
            p[j] = std::exp(row[j] - mx);
            sum += p[j];
        }
        double h = 0.0;
        for (double& v : p) {
            v /= sum;
            h -= v * std::log(v);
        }
        entropy_sum += h;
    }
    const double mean_entropy = entropy_sum / static_cast<double>(seq.true_length);
    CHECK(std::abs(mean_entropy - std::log(13.0)) < 0.1 * std::log(13.0));
}

TEST_CASE("causality: a perturbed token never affects earlier positions") {
    DecoderConfig cfg = small_config();
    Rng rng(7);
    DecoderWeights w = DecoderWeights::init(cfg, rng);
    LatentVector z = random_latent(cfg.d_emb, rng);

    const std::vector<int> base = {1, 3, 4, 5, 6, 7, 8, 2};
    LogitMatrix la = decode_logits(z, make_seq(base, cfg.window), cfg, w);
    for (std::size_t j = 2; j < base.size(); ++j) {
        std::vector<int> mutated = base;
        mutated[j] = mutated[j] == 3 ? 4 : 3;
        LogitMatrix lb = decode_logits(z, make_seq(mutated, cfg.window), cfg, w);
        for (std::size_t t = 0; t < j; ++t) {
            CHECK(max_abs_diff(la.row(static_cast<int>(t)), lb.row(static_cast<int>(t))) < 1e-6f);
        }
        // and it does change its own position (model is not degenerate)
        CHECK(max_abs_diff(la.row(static_cast<int>(j)), lb.row(static_cast<int>(j))) > 0.0f);
    }
}

TEST_CASE("block: zero latent and zero cross value weights reduce to the self-attention path") {
    DecoderConfig cfg = small_config();
    Rng rng(11);
    DecoderWeights w = DecoderWeights::init(cfg, rng);
    BlockWeights& blk = w.blocks[0];
    std::fill(blk.cv.values().begin(), blk.cv.values().end(), 0.0f);

    const int t = 6;
    Tensor s = random_tensor({1, t, cfg.d_emb}, rng, false);
    Tensor z0 = Tensor::zeros({1, cfg.d_emb});
    Tensor out = block_forward(nullptr, s, z0, cfg, blk);

    // reference: the same block assembled from public ops with the
    // cross-attention contribution dropped
    Tape* tape = nullptr;
    const int hd = cfg.d_emb / cfg.n_heads;
    Tensor x = rmsnorm(tape, s, blk.norm1_gain);
    Tensor q = rotary(tape, split_heads(tape, matmul(tape, x, blk.wq), cfg.n_heads), 0);
    Tensor k = rotary(tape, split_heads(tape, matmul(tape, x, blk.wk), cfg.n_heads), 0);
    Tensor v = split_heads(tape, matmul(tape, x, blk.wv), cfg.n_heads);
    Tensor scores = scale(tape, matmul_nt(tape, q, k), 1.0f / std::sqrt(static_cast<float>(hd)));
    scores = add(tape, scores, causal_mask(t));
    Tensor att = merge_heads(tape, matmul(tape, softmax(tape, scores, -1), v), cfg.n_heads);
    Tensor att1 = matmul(tape, att, blk.wo);
    Tensor res1 = rmsnorm(tape, add(tape, x, att1), blk.norm2_gain);
    Tensor res2 = rmsnorm(tape, res1, blk.norm3_gain);  // cross contribution is zero
    Tensor ffn = swiglu(tape, res2, blk.ffn_w, blk.ffn_v, blk.ffn_w2);
    Tensor ref = add(tape, res2, ffn);

    REQUIRE(out.numel() == ref.numel());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        CHECK(out.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-5));
    }
}

TEST_CASE("gradient check through one full block") {
    DecoderConfig cfg;
    cfg.d_emb = 8;
    cfg.n_heads = 2;
    cfg.n_blocks = 1;
    cfg.window = 5;
    cfg.vocab_size = 7;
    Rng rng(13);
    DecoderWeights w = DecoderWeights::init(cfg, rng);
    BlockWeights& blk = w.blocks[0];
    Tensor s = random_tensor({1, 4, cfg.d_emb}, rng, true, 0.5f);
    Tensor z = random_tensor({1, cfg.d_emb}, rng, true, 0.5f);

    auto f = [&](Tape& tape) {
        Tensor out = block_forward(&tape, s, z, cfg, blk);
        std::vector<float> wt(out.numel());
        Rng local(99);
        for (float& v : wt) {
            v = local.uniform_float(-1.0f, 1.0f);
        }
        Tensor weights = Tensor::from({static_cast<int>(out.numel()), 1}, std::move(wt));
        return matmul(&tape, reshape(&tape, out, {1, static_cast<int>(out.numel())}), weights);
    };
    CHECK(gradient_check(f, s) < 1e-3);
    CHECK(gradient_check(f, z) < 1e-3);
    CHECK(gradient_check(f, blk.wq) < 1e-3);
    CHECK(gradient_check(f, blk.cv) < 1e-3);
    CHECK(gradient_check(f, blk.ffn_w2) < 1e-3);
    CHECK(gradient_check(f, blk.norm2_gain) < 1e-3);
}

TEST_CASE("incremental decoding matches the full forward") {
    DecoderConfig cfg = small_config(9);
    Rng rng(17);
    DecoderWeights w = DecoderWeights::init(cfg, rng);
    // a trained-looking scale: bump the weights so logits are not tiny
    for (float& v : w.head.values()) {
        v *= 20.0f;
    }
    LatentVector z = random_latent(cfg.d_emb, rng);

    const std::vector<int> tokens = {1, 4, 5, 6, 7, 8, 3, 2};
    LogitMatrix full = decode_logits(z, make_seq(tokens, cfg.window), cfg, w);

    DecoderSession session(cfg, w, z);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const std::vector<float> logits = session.step(tokens[t]);
        CHECK(max_abs_diff(logits, full.row(static_cast<int>(t))) < 1e-5f);
    }
}

TEST_CASE("session bounds") {
    DecoderConfig cfg = small_config();
    Rng rng(19);
    DecoderWeights w = DecoderWeights::init(cfg, rng);
    LatentVector z = random_latent(cfg.d_emb, rng);
    DecoderSession session(cfg, w, z);
    CHECK_THROWS_AS(session.step(1000), std::out_of_range);
    for (int t = 0; t < cfg.window; ++t) {
        session.step(1);
    }
    CHECK_THROWS_AS(session.step(1), std::length_error);
}
