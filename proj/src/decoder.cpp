#include "gep/decoder.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>
#include <fmt/format.h>

namespace gep::nn {

void DecoderConfig::validate() const {
    if (d_emb <= 0 || n_heads <= 0 || n_blocks <= 0 || window <= 0 || vocab_size <= 0) {
        throw std::invalid_argument("decoder config fields must be positive");
    }
    if (d_emb % n_heads != 0) {
        throw std::invalid_argument("d_emb must be divisible by n_heads");
    }
    if ((d_emb / n_heads) % 2 != 0) {
        throw std::invalid_argument("rotary embedding needs an even head dimension");
    }
}

namespace {

Tensor normal_init(int rows, int cols, float stddev, Rng& rng) {
    std::vector<float> w(static_cast<std::size_t>(rows) * cols);
    for (float& v : w) {
        v = rng.normal_float(0.0f, stddev);
    }
    return Tensor::from({rows, cols}, std::move(w), true);
}

Tensor ones(int n) {
    return Tensor::from({n}, std::vector<float>(static_cast<std::size_t>(n), 1.0f), true);
}

}  // namespace

DecoderWeights DecoderWeights::init(const DecoderConfig& cfg, Rng& rng) {
    cfg.validate();
    const int d = cfg.d_emb;
    const float base = 0.02f;
    // residual-feeding projections are scaled down by 1/sqrt(2*n_blocks)
    const float res = base / std::sqrt(2.0f * static_cast<float>(cfg.n_blocks));

    DecoderWeights w;
    w.tok_embed = normal_init(cfg.vocab_size, d, base, rng);
    w.blocks.resize(static_cast<std::size_t>(cfg.n_blocks));
    for (BlockWeights& b : w.blocks) {
        b.norm1_gain = ones(d);
        b.wq = normal_init(d, d, base, rng);
        b.wk = normal_init(d, d, base, rng);
        b.wv = normal_init(d, d, base, rng);
        b.wo = normal_init(d, d, res, rng);
        b.norm2_gain = ones(d);
        b.cq = normal_init(d, d, base, rng);
        b.ck = normal_init(d, d, base, rng);
        b.cv = normal_init(d, d, base, rng);
        b.co = normal_init(d, d, res, rng);
        b.norm3_gain = ones(d);
        b.ffn_w = normal_init(d, 4 * d, base, rng);
        b.ffn_v = normal_init(d, 4 * d, base, rng);
        b.ffn_w2 = normal_init(4 * d, d, res, rng);
    }
    w.final_norm_gain = ones(d);
    w.head = normal_init(d, cfg.vocab_size, base, rng);
    return w;
}

Tensor embed_tokens(Tape* tape, const TokenSequence& seq, const DecoderWeights& w) {
    return embedding(tape, w.tok_embed, seq.ids, 0, static_cast<int>(seq.ids.size()));
}

namespace {

Tensor self_attention(Tape* tape, const Tensor& x, const DecoderConfig& cfg, BlockWeights& w) {
    const int t = x.dim(1);
    const int hd = cfg.d_emb / cfg.n_heads;
    Tensor q = split_heads(tape, matmul(tape, x, w.wq), cfg.n_heads);
    Tensor k = split_heads(tape, matmul(tape, x, w.wk), cfg.n_heads);
    Tensor v = split_heads(tape, matmul(tape, x, w.wv), cfg.n_heads);
    q = rotary(tape, q, 0);
    k = rotary(tape, k, 0);
    Tensor scores = scale(tape, matmul_nt(tape, q, k), 1.0f / std::sqrt(static_cast<float>(hd)));
    scores = add(tape, scores, causal_mask(t));
    Tensor probs = softmax(tape, scores, -1);
    Tensor out = merge_heads(tape, matmul(tape, probs, v), cfg.n_heads);
    return matmul(tape, out, w.wo);
}

Tensor cross_attention(Tape* tape, const Tensor& x, const Tensor& z3, const DecoderConfig& cfg,
                       BlockWeights& w) {
    const int hd = cfg.d_emb / cfg.n_heads;
    Tensor q = split_heads(tape, matmul(tape, x, w.cq), cfg.n_heads);
    Tensor k = split_heads(tape, matmul(tape, z3, w.ck), cfg.n_heads);
    Tensor v = split_heads(tape, matmul(tape, z3, w.cv), cfg.n_heads);
    Tensor scores = scale(tape, matmul_nt(tape, q, k), 1.0f / std::sqrt(static_cast<float>(hd)));
    Tensor probs = softmax(tape, scores, -1);  // single key: all ones
    Tensor out = merge_heads(tape, matmul(tape, probs, v), cfg.n_heads);
    return matmul(tape, out, w.co);
}

}  // namespace

Tensor block_forward(Tape* tape, const Tensor& s_hat, const Tensor& z, const DecoderConfig& cfg,
                     BlockWeights& w) {
    if (s_hat.rank() != 3 || s_hat.dim(2) != cfg.d_emb || z.rank() != 2 ||
        z.dim(0) != s_hat.dim(0) || z.dim(1) != cfg.d_emb) {
        throw std::invalid_argument("block_forward: bad input shapes");
    }
    Tensor z3 = reshape(tape, z, {z.dim(0), 1, z.dim(1)});
    Tensor x = rmsnorm(tape, s_hat, w.norm1_gain);
    Tensor att1 = self_attention(tape, x, cfg, w);
    Tensor res1 = rmsnorm(tape, add(tape, x, att1), w.norm2_gain);
    Tensor att2 = cross_attention(tape, res1, z3, cfg, w);
    Tensor res2 = rmsnorm(tape, add(tape, res1, att2), w.norm3_gain);
    Tensor ffn = swiglu(tape, res2, w.ffn_w, w.ffn_v, w.ffn_w2);
    return add(tape, res2, ffn);
}

Tensor decoder_forward(Tape* tape, std::span<const int> ids, int b, int t, const Tensor& z,
                       const DecoderConfig& cfg, DecoderWeights& w) {
    cfg.validate();
    if (t > cfg.window) {
        throw std::invalid_argument("sequence longer than the context window");
    }
    if (ids.size() != static_cast<std::size_t>(b) * t) {
        throw std::invalid_argument("decoder_forward: ids size mismatch");
    }
    Tensor h = embedding(tape, w.tok_embed, ids, b, t);
    for (BlockWeights& blk : w.blocks) {
        h = block_forward(tape, h, z, cfg, blk);
    }
    h = rmsnorm(tape, h, w.final_norm_gain);
    return matmul(tape, h, w.head);  // (b, t, vocab)
}

LogitMatrix decode_logits(const LatentVector& z, const TokenSequence& seq, const DecoderConfig& cfg,
                          DecoderWeights& w) {
    if (static_cast<int>(seq.ids.size()) != cfg.window) {
        throw std::invalid_argument("decode_logits expects a window-padded sequence");
    }
    Tensor zt = Tensor::from({1, cfg.d_emb}, std::vector<float>(z.values));
    Tensor logits = decoder_forward(nullptr, seq.ids, 1, cfg.window, zt, cfg, w);
    LogitMatrix out;
    out.window = cfg.window;
    out.vocab_size = cfg.vocab_size;
    out.values = logits.values();
    return out;
}

// ---- incremental decoding ---------------------------------------------------

namespace {

using EVec = Eigen::VectorXf;
using ECMap = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

EVec rmsnorm_row(const EVec& x, const Tensor& gain) {
    constexpr float kEps = 1e-6f;
    const float ms = x.squaredNorm() / static_cast<float>(x.size());
    const float ir = 1.0f / std::sqrt(ms + kEps);
    EVec out(x.size());
    for (int i = 0; i < x.size(); ++i) {
        out[i] = x[i] * ir * gain.data()[i];
    }
    return out;
}

void rotate_in_place(EVec& x, int head_dim, int position) {
    const int half = head_dim / 2;
    for (int h = 0; h < x.size() / head_dim; ++h) {
        for (int j = 0; j < half; ++j) {
            const double theta = static_cast<double>(position) *
                                 std::pow(10000.0, -2.0 * j / static_cast<double>(head_dim));
            const float c = static_cast<float>(std::cos(theta));
            const float s = static_cast<float>(std::sin(theta));
            const int i0 = h * head_dim + 2 * j;
            const float x0 = x[i0];
            const float x1 = x[i0 + 1];
            x[i0] = x0 * c - x1 * s;
            x[i0 + 1] = x0 * s + x1 * c;
        }
    }
}

}  // namespace

DecoderSession::DecoderSession(const DecoderConfig& cfg, const DecoderWeights& w,
                               const LatentVector& z)
    : cfg_(cfg), w_(w) {
    cfg.validate();
    if (static_cast<int>(z.values.size()) != cfg.d_emb) {
        throw std::invalid_argument("latent size does not match d_emb");
    }
    const int d = cfg.d_emb;
    k_cache_.assign(static_cast<std::size_t>(cfg.n_blocks), {});
    v_cache_.assign(static_cast<std::size_t>(cfg.n_blocks), {});
    cross_out_.assign(static_cast<std::size_t>(cfg.n_blocks), {});
    for (auto& kc : k_cache_) {
        kc.reserve(static_cast<std::size_t>(cfg.window) * d);
    }
    for (auto& vc : v_cache_) {
        vc.reserve(static_cast<std::size_t>(cfg.window) * d);
    }
    // Cross attention over a single latent position reduces to a per-sequence
    // constant: softmax over one key is 1, so the output is (z Cv) Co.
    Eigen::Map<const EVec> zv(z.values.data(), d);
    for (int bi = 0; bi < cfg.n_blocks; ++bi) {
        const BlockWeights& blk = w.blocks[static_cast<std::size_t>(bi)];
        ECMap Cv(blk.cv.data(), d, d);
        ECMap Co(blk.co.data(), d, d);
        EVec v = Cv.transpose() * zv;
        EVec out = Co.transpose() * v;
        cross_out_[static_cast<std::size_t>(bi)].assign(out.data(), out.data() + d);
    }
}

std::vector<float> DecoderSession::step(int token_id) {
    if (pos_ >= cfg_.window) {
        throw std::length_error("decoder session ran past the context window");
    }
    if (token_id < 0 || token_id >= cfg_.vocab_size) {
        throw std::out_of_range("token id out of vocabulary range");
    }
    const int d = cfg_.d_emb;
    const int heads = cfg_.n_heads;
    const int hd = d / heads;
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(hd));

    EVec h(d);
    for (int i = 0; i < d; ++i) {
        h[i] = w_.tok_embed.data()[static_cast<std::size_t>(token_id) * d + i];
    }

    for (int bi = 0; bi < cfg_.n_blocks; ++bi) {
        const BlockWeights& blk = w_.blocks[static_cast<std::size_t>(bi)];
        EVec x = rmsnorm_row(h, blk.norm1_gain);

        ECMap Wq(blk.wq.data(), d, d), Wk(blk.wk.data(), d, d), Wv(blk.wv.data(), d, d),
            Wo(blk.wo.data(), d, d);
        EVec q = Wq.transpose() * x;
        EVec k = Wk.transpose() * x;
        EVec v = Wv.transpose() * x;
        rotate_in_place(q, hd, pos_);
        rotate_in_place(k, hd, pos_);

        auto& kc = k_cache_[static_cast<std::size_t>(bi)];
        auto& vc = v_cache_[static_cast<std::size_t>(bi)];
        kc.insert(kc.end(), k.data(), k.data() + d);
        vc.insert(vc.end(), v.data(), v.data() + d);
        const int t = pos_ + 1;

        EVec att(d);
        std::vector<float> probs(static_cast<std::size_t>(t));
        for (int hh = 0; hh < heads; ++hh) {
            float mx = -std::numeric_limits<float>::infinity();
            for (int j = 0; j < t; ++j) {
                float dot = 0.0f;
                const float* kj = kc.data() + static_cast<std::size_t>(j) * d + hh * hd;
                for (int e = 0; e < hd; ++e) {
                    dot += q[hh * hd + e] * kj[e];
                }
                probs[static_cast<std::size_t>(j)] = dot * att_scale;
                mx = std::max(mx, probs[static_cast<std::size_t>(j)]);
            }
            float sum = 0.0f;
            for (int j = 0; j < t; ++j) {
                probs[static_cast<std::size_t>(j)] = std::exp(probs[static_cast<std::size_t>(j)] - mx);
                sum += probs[static_cast<std::size_t>(j)];
            }
            for (int e = 0; e < hd; ++e) {
                float acc = 0.0f;
                for (int j = 0; j < t; ++j) {
                    acc += probs[static_cast<std::size_t>(j)] *
                           vc[static_cast<std::size_t>(j) * d + hh * hd + e];
                }
                att[hh * hd + e] = acc / sum;
            }
        }
        EVec att1 = Wo.transpose() * att;

        EVec res1 = rmsnorm_row(EVec(x + att1), blk.norm2_gain);
        Eigen::Map<const EVec> cross(cross_out_[static_cast<std::size_t>(bi)].data(), d);
        EVec res2 = rmsnorm_row(EVec(res1 + cross), blk.norm3_gain);

        ECMap W(blk.ffn_w.data(), d, 4 * d), V(blk.ffn_v.data(), d, 4 * d),
            W2(blk.ffn_w2.data(), 4 * d, d);
        EVec gate = W.transpose() * res2;
        EVec val = V.transpose() * res2;
        for (int i = 0; i < gate.size(); ++i) {
            const float u = gate[i];
            gate[i] = u / (1.0f + std::exp(-u)) * val[i];
        }
        h = res2 + W2.transpose() * gate;
    }

    EVec fin = rmsnorm_row(h, w_.final_norm_gain);
    ECMap H(w_.head.data(), d, cfg_.vocab_size);
    EVec logits = H.transpose() * fin;
    ++pos_;
    return std::vector<float>(logits.data(), logits.data() + cfg_.vocab_size);
}

}  // namespace gep::nn
