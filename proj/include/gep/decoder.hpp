#pragma once

#include <span>
#include <vector>

#include "gep/encoder.hpp"
#include "gep/rng.hpp"
#include "gep/tensor.hpp"
#include "gep/tokenizer.hpp"

namespace gep::nn {

struct DecoderConfig {
    int d_emb = 32;
    int n_heads = 8;
    int n_blocks = 8;
    int window = 64;
    int vocab_size = 0;

    void validate() const;
};

/// Pre-softmax logits for every window position.
struct LogitMatrix {
    int window = 0;
    int vocab_size = 0;
    std::vector<float> values;  // row-major window x vocab_size

    std::span<const float> row(int t) const {
        return {values.data() + static_cast<std::size_t>(t) * vocab_size,
                static_cast<std::size_t>(vocab_size)};
    }
};

struct BlockWeights {
    Tensor norm1_gain;
    Tensor wq, wk, wv, wo;  // self attention
    Tensor norm2_gain;
    Tensor cq, ck, cv, co;  // cross attention on the latent
    Tensor norm3_gain;
    Tensor ffn_w, ffn_v, ffn_w2;  // SwiGLU, hidden 4*d
};

struct DecoderWeights {
    Tensor tok_embed;  // vocab x d
    std::vector<BlockWeights> blocks;
    Tensor final_norm_gain;
    Tensor head;  // d x vocab, untied from the embedding

    static DecoderWeights init(const DecoderConfig& cfg, Rng& rng);

    template <typename Fn>
    void visit(Fn&& fn) {
        fn("dec.tok_embed", tok_embed);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            BlockWeights& b = blocks[i];
            const std::string p = "dec.block" + std::to_string(i);
            fn(p + ".norm1", b.norm1_gain);
            fn(p + ".wq", b.wq);
            fn(p + ".wk", b.wk);
            fn(p + ".wv", b.wv);
            fn(p + ".wo", b.wo);
            fn(p + ".norm2", b.norm2_gain);
            fn(p + ".cq", b.cq);
            fn(p + ".ck", b.ck);
            fn(p + ".cv", b.cv);
            fn(p + ".co", b.co);
            fn(p + ".norm3", b.norm3_gain);
            fn(p + ".ffn_w", b.ffn_w);
            fn(p + ".ffn_v", b.ffn_v);
            fn(p + ".ffn_w2", b.ffn_w2);
        }
        fn("dec.final_norm", final_norm_gain);
        fn("dec.head", head);
    }
};

/// Token embedding rows for a sequence (pads embed too; attention is causal and
/// the loss ignores pad targets, so trailing pads never influence real positions).
Tensor embed_tokens(Tape* tape, const TokenSequence& seq, const DecoderWeights& w);

/// One transformer block, exactly: x = norm(s); x + self-attention; normed
/// residual; + cross-attention on z; normed residual; + SwiGLU feed-forward.
Tensor block_forward(Tape* tape, const Tensor& s_hat, const Tensor& z, const DecoderConfig& cfg,
                     BlockWeights& w);

/// Full batched forward: ids (B*T row-major) conditioned on z (B, d),
/// evaluated on the first `t` positions. Returns (B, t, vocab) logits.
Tensor decoder_forward(Tape* tape, std::span<const int> ids, int b, int t, const Tensor& z,
                       const DecoderConfig& cfg, DecoderWeights& w);

/// Inference on one sequence over the full window.
LogitMatrix decode_logits(const LatentVector& z, const TokenSequence& seq, const DecoderConfig& cfg,
                          DecoderWeights& w);

/// Incremental decoding with per-block KV caches. Equivalent to decode_logits
/// column-for-column within float tolerance.
class DecoderSession {
public:
    DecoderSession(const DecoderConfig& cfg, const DecoderWeights& w, const LatentVector& z);

    /// Feeds one token and returns the logits for the next position.
    std::vector<float> step(int token_id);

    int position() const { return pos_; }

private:
    const DecoderConfig& cfg_;
    const DecoderWeights& w_;
    int pos_ = 0;
    std::vector<std::vector<float>> k_cache_;  // per block: window*d floats
    std::vector<std::vector<float>> v_cache_;
    std::vector<std::vector<float>> cross_out_;  // per block: d floats
};

}  // namespace gep::nn
