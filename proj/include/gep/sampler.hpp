#pragma once

#include <optional>
#include <vector>

#include "gep/decoder.hpp"
#include "gep/encoder.hpp"
#include "gep/karva.hpp"
#include "gep/rng.hpp"
#include "gep/tokenizer.hpp"

namespace gep {

struct SamplerConfig {
    int top_k = 10;
    double top_p = 0.9;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    std::vector<int> banned_tokens;  // function tokens hidden from sampling

    void validate() const;
};

/// Additive mask over the vocabulary: 0 keeps a token, -inf removes it.
struct SampleMask {
    std::vector<float> add;
};

/// Grammar cursor over the token layout emitted by tokenize(): tracks which
/// control or content token class is legal next, plus the arities sampled so
/// far in the current gene for the karva parent lookup.
class GenerationCursor {
public:
    enum class Phase { ExpectGene, InGene, ExpectLink, ExpectLinker, ExpectEos, Done };

    GenerationCursor(const ChromosomeShape& shape, int max_arity);

    Phase phase() const { return phase_; }
    int gene_index() const { return gene_index_; }
    int position_in_gene() const { return pos_in_gene_; }
    int head_length() const { return shape_.head_length; }
    std::span<const int> gene_arities() const { return gene_arities_; }
    std::span<const int> gene_tokens() const { return gene_tokens_; }

    void advance(int token_id, const Vocabulary& vocab);

private:
    ChromosomeShape shape_;
    int gene_len_;
    Phase phase_ = Phase::ExpectGene;
    int gene_index_ = 0;
    int pos_in_gene_ = 0;
    std::vector<int> gene_arities_;
    std::vector<int> gene_tokens_;
};

/// Mask for the cursor's current position: head positions admit any mapped
/// content token, tail positions only arity-0 tokens, control tokens only where
/// the layout expects them. The same-unary nesting rule masks a unary function
/// directly under itself.
SampleMask build_mask(const GenerationCursor& cursor, const Vocabulary& vocab,
                      const SamplerConfig& cfg);

/// Keep the k most probable tokens (ties toward lower ids), then the smallest
/// prefix with cumulative probability >= top_p, renormalize, sample.
int top_k_top_p(std::span<const float> probs, const SamplerConfig& cfg, Rng& rng);

struct SampleResult {
    Chromosome chrom;
    TokenSequence tokens;
    int repairs = 0;  // zero whenever the mask is sound
};

SampleResult sample_chromosome(const nn::LatentVector& z, const nn::DecoderConfig& dec_cfg,
                               const nn::DecoderWeights& weights, const Vocabulary& vocab,
                               const SymbolTable& table, const ChromosomeShape& shape,
                               const SamplerConfig& cfg, Rng& rng);

/// Model bundle the samplers condition on.
struct LmHandle {
    const nn::EncoderConfig* enc_cfg = nullptr;
    nn::EncoderWeights* enc = nullptr;
    const nn::ColumnStats* stats = nullptr;
    const nn::DecoderConfig* dec_cfg = nullptr;
    nn::DecoderWeights* dec = nullptr;
    const Vocabulary* vocab = nullptr;
};

/// floor(proportion*n_total) model-sampled chromosomes conditioned on the task,
/// the rest random, shuffled with the run seed. `model` may be null when
/// proportion is 0; the all-random output is then bit-identical to a plain GEP
/// initial population with the same seed.
std::vector<Chromosome> sample_population(const Matrix& X, std::span<const double> y, int n_total,
                                          double proportion, const LmHandle* model,
                                          const SymbolTable& table, const ChromosomeShape& shape,
                                          SymbolId linker, const SamplerConfig& cfg,
                                          std::uint64_t seed);

}  // namespace gep
