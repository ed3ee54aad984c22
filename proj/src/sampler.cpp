#include "gep/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "gep/parallel.hpp"

namespace gep {

namespace {
constexpr float kNegInf = -std::numeric_limits<float>::infinity();
}

void SamplerConfig::validate() const {
    if (top_k < 1) {
        throw std::invalid_argument("top_k must be >= 1");
    }
    if (!(top_p > 0.0 && top_p <= 1.0)) {
        throw std::invalid_argument("top_p must lie in (0, 1]");
    }
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("temperature must be positive");
    }
}

GenerationCursor::GenerationCursor(const ChromosomeShape& shape, int max_arity)
    : shape_(shape), gene_len_(gene_token_length(shape.head_length, max_arity)) {
    if (shape.head_length < 1 || shape.gene_count < 1) {
        throw std::invalid_argument("invalid chromosome shape");
    }
    gene_arities_.reserve(static_cast<std::size_t>(gene_len_));
}

void GenerationCursor::advance(int token_id, const Vocabulary& vocab) {
    switch (phase_) {
        case Phase::ExpectGene:
            if (token_id != Vocabulary::kGene) {
                throw std::logic_error("cursor expected <gene>");
            }
            phase_ = Phase::InGene;
            pos_in_gene_ = 0;
            gene_arities_.clear();
            gene_tokens_.clear();
            break;
        case Phase::InGene: {
            gene_arities_.push_back(vocab.at(token_id).arity);
            gene_tokens_.push_back(token_id);
            ++pos_in_gene_;
            if (pos_in_gene_ == gene_len_) {
                ++gene_index_;
                if (gene_index_ < shape_.gene_count) {
                    phase_ = Phase::ExpectGene;
                } else if (shape_.gene_count > 1) {
                    phase_ = Phase::ExpectLink;
                } else {
                    phase_ = Phase::ExpectEos;
                }
            }
            break;
        }
        case Phase::ExpectLink:
            if (token_id != Vocabulary::kLink) {
                throw std::logic_error("cursor expected <link>");
            }
            phase_ = Phase::ExpectLinker;
            break;
        case Phase::ExpectLinker:
            phase_ = Phase::ExpectEos;
            break;
        case Phase::ExpectEos:
            if (token_id != Vocabulary::kEos) {
                throw std::logic_error("cursor expected <eos>");
            }
            phase_ = Phase::Done;
            break;
        case Phase::Done:
            throw std::logic_error("cursor advanced past <eos>");
    }
}

SampleMask build_mask(const GenerationCursor& cursor, const Vocabulary& vocab,
                      const SamplerConfig& cfg) {
    SampleMask mask;
    mask.add.assign(static_cast<std::size_t>(vocab.size()), kNegInf);
    auto allow = [&](int id) { mask.add[static_cast<std::size_t>(id)] = 0.0f; };
    auto banned = [&](int id) {
        return std::find(cfg.banned_tokens.begin(), cfg.banned_tokens.end(), id) !=
               cfg.banned_tokens.end();
    };

    switch (cursor.phase()) {
        case GenerationCursor::Phase::ExpectGene:
            allow(Vocabulary::kGene);
            break;
        case GenerationCursor::Phase::ExpectLink:
            allow(Vocabulary::kLink);
            break;
        case GenerationCursor::Phase::ExpectEos:
            allow(Vocabulary::kEos);
            break;
        case GenerationCursor::Phase::ExpectLinker: {
            bool any = false;
            for (int id = 0; id < vocab.size(); ++id) {
                const TokenInfo& t = vocab.at(id);
                if (t.kind == TokenKind::Function && t.arity == 2 && t.symbol && !banned(id)) {
                    allow(id);
                    any = true;
                }
            }
            if (!any) {
                // a ban list must not deadlock the linker slot
                for (int id = 0; id < vocab.size(); ++id) {
                    const TokenInfo& t = vocab.at(id);
                    if (t.kind == TokenKind::Function && t.arity == 2 && t.symbol) {
                        allow(id);
                    }
                }
            }
            break;
        }
        case GenerationCursor::Phase::InGene: {
            const bool in_head = cursor.position_in_gene() < cursor.head_length();
            // same-unary nesting constraint via the breadth-first parent
            std::optional<int> nested_ban;
            const auto parent = karva_parent(cursor.gene_arities(),
                                             static_cast<std::size_t>(cursor.position_in_gene()));
            if (parent) {
                const int ptok = cursor.gene_tokens()[*parent];
                if (vocab.at(ptok).arity == 1) {
                    nested_ban = ptok;
                }
            }
            for (int id = 0; id < vocab.size(); ++id) {
                const TokenInfo& t = vocab.at(id);
                if (t.kind == TokenKind::Control || !t.symbol || banned(id)) {
                    continue;
                }
                if (t.kind == TokenKind::Function && !in_head) {
                    continue;  // tail admits terminals only
                }
                if (nested_ban && id == *nested_ban) {
                    continue;
                }
                allow(id);
            }
            break;
        }
        case GenerationCursor::Phase::Done:
            throw std::logic_error("no mask exists past <eos>");
    }
    return mask;
}

int top_k_top_p(std::span<const float> probs, const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    std::vector<int> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (probs[static_cast<std::size_t>(a)] != probs[static_cast<std::size_t>(b)]) {
            return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
        }
        return a < b;
    });

    std::size_t keep = std::min(static_cast<std::size_t>(cfg.top_k), order.size());
    double cum = 0.0;
    std::size_t nucleus = keep;
    for (std::size_t i = 0; i < keep; ++i) {
        cum += probs[static_cast<std::size_t>(order[i])];
        if (cum >= cfg.top_p) {
            nucleus = i + 1;
            break;
        }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < nucleus; ++i) {
        total += probs[static_cast<std::size_t>(order[i])];
    }
    if (total <= 0.0) {
        throw std::invalid_argument("top_k_top_p: no probability mass to sample from");
    }
    const double u = rng.uniform_double() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < nucleus; ++i) {
        acc += probs[static_cast<std::size_t>(order[i])];
        if (u < acc) {
            return order[i];
        }
    }
    return order[nucleus - 1];
}

SampleResult sample_chromosome(const nn::LatentVector& z, const nn::DecoderConfig& dec_cfg,
                               const nn::DecoderWeights& weights, const Vocabulary& vocab,
                               const SymbolTable& table, const ChromosomeShape& shape,
                               const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    if (layout_length(shape, table.max_arity()) > dec_cfg.window) {
        throw std::length_error("chromosome layout does not fit the context window");
    }
    GenerationCursor cursor(shape, table.max_arity());
    nn::DecoderSession session(dec_cfg, weights, z);

    std::vector<int> ids;
    ids.push_back(Vocabulary::kSos);
    std::vector<float> logits = session.step(Vocabulary::kSos);
    std::vector<float> masked(static_cast<std::size_t>(vocab.size()));
    std::vector<float> probs(static_cast<std::size_t>(vocab.size()));
    const float inv_temp = static_cast<float>(1.0 / cfg.temperature);

    while (cursor.phase() != GenerationCursor::Phase::Done) {
        const SampleMask mask = build_mask(cursor, vocab, cfg);

        float mx = kNegInf;
        for (std::size_t i = 0; i < masked.size(); ++i) {
            masked[i] = logits[i] * inv_temp + mask.add[i];
            mx = std::max(mx, masked[i]);
        }
        double sum = 0.0;
        for (std::size_t i = 0; i < masked.size(); ++i) {
            probs[i] = std::exp(masked[i] - mx);
            sum += probs[i];
        }
        for (float& p : probs) {
            p = static_cast<float>(p / sum);
        }

        const int id = top_k_top_p(probs, cfg, rng);
        cursor.advance(id, vocab);
        ids.push_back(id);
        if (cursor.phase() != GenerationCursor::Phase::Done) {
            logits = session.step(id);
        }
    }

    TokenSequence seq;
    seq.true_length = ids.size();
    ids.resize(static_cast<std::size_t>(dec_cfg.window), Vocabulary::kPad);
    seq.ids = std::move(ids);

    Rng repair_rng(0);  // sound masks never need repairs
    DetokenizeResult det = detokenize(seq, vocab, table, shape, repair_rng);
    return SampleResult{std::move(det.chrom), std::move(seq), det.repairs};
}

std::vector<Chromosome> sample_population(const Matrix& X, std::span<const double> y, int n_total,
                                          double proportion, const LmHandle* model,
                                          const SymbolTable& table, const ChromosomeShape& shape,
                                          SymbolId linker, const SamplerConfig& cfg,
                                          std::uint64_t seed) {
    if (proportion < 0.0 || proportion > 1.0) {
        throw std::invalid_argument("proportion must lie in [0,1]");
    }
    const int n_model = static_cast<int>(std::floor(proportion * n_total));
    if (n_model > 0 && model == nullptr) {
        throw std::invalid_argument("a model is required when proportion > 0");
    }

    std::vector<Chromosome> out(static_cast<std::size_t>(n_total));

    if (n_model > 0) {
        nn::LatentVector z;
        {
            MatrixF padded = y.empty() ? nn::pad_features(X, model->enc_cfg->m)
                                       : nn::pad_features(X, y, model->enc_cfg->m);
            z = nn::encode(padded, *model->enc_cfg, *model->enc, *model->stats,
                           splitmix64(seed ^ 0x656e63ULL));
        }
        parallel_for(static_cast<std::size_t>(n_model), default_thread_count(),
                     [&](std::size_t i) {
                         Rng rng = Rng::derived(seed, i);
                         SampleResult r = sample_chromosome(z, *model->dec_cfg, *model->dec,
                                                            *model->vocab, table, shape, cfg, rng);
                         out[i] = std::move(r.chrom);
                     });
    }
    for (std::size_t i = static_cast<std::size_t>(n_model); i < out.size(); ++i) {
        Rng rng = Rng::derived(seed, i);
        out[i] = random_chromosome(table, shape.head_length, shape.gene_count, linker, rng);
    }

    Rng shuffle_rng = Rng::derived(seed, 0x73687566666cULL);
    shuffle_rng.shuffle(out);
    return out;
}

}  // namespace gep
