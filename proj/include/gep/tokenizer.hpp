#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gep/karva.hpp"
#include "gep/rng.hpp"

namespace gep {

enum class TokenKind : std::uint8_t { Control, Function, Feature, Number, Constant };

struct TokenInfo {
    std::string name;
    TokenKind kind = TokenKind::Control;
    double value = 0.0;                   // number and constant tokens
    int arity = 0;                        // function tokens
    std::optional<SymbolId> symbol;       // link into the symbol table
};

/// Fixed token inventory for the language model: control tokens, the symbol
/// table's functions and features, the four number tokens, and the predefined
/// constants. Ids are dense and deterministic; <pad> is always id 0.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kSos = 1;
    static constexpr int kEos = 2;
    static constexpr int kGene = 3;
    static constexpr int kLink = 4;

    static const std::vector<double>& number_token_values();  // {0.1, 0.5, -0.1, -0.5}

    static Vocabulary build(const SymbolTable& table);

    int size() const { return static_cast<int>(tokens_.size()); }
    const TokenInfo& at(int id) const;
    std::optional<int> find(std::string_view name) const;

    /// The unique token of a table symbol.
    int token_for_symbol(SymbolId id) const;

    /// Predefined constants map to their own token; any other real maps to the
    /// nearest number token (ties toward the earlier vocabulary entry).
    int constant_to_token(double x) const;

    /// Re-link symbol references against a (possibly different) table, matching
    /// functions and features by name and constants by value. Unmatched tokens
    /// keep an empty link and are skipped by the sampler.
    void relink(const SymbolTable& table);

    void save(std::ostream& out) const;
    static Vocabulary load(std::istream& in);

    bool operator==(const Vocabulary& other) const;

private:
    std::vector<TokenInfo> tokens_;
    std::vector<int> symbol_to_token_;
};

/// Fixed-width token-id sequence: <sos> ... <eos> then <pad> up to `ids.size()`.
struct TokenSequence {
    std::vector<int> ids;
    std::size_t true_length = 0;

    bool operator==(const TokenSequence&) const = default;
};

struct ChromosomeShape {
    int head_length = 0;
    int gene_count = 0;

    bool operator==(const ChromosomeShape&) const = default;
};

/// Length of one gene's token run for this shape under `max_arity`.
int gene_token_length(int head_length, int max_arity);

/// Token count of the full layout: <sos>, per-gene <gene> markers and symbols,
/// the <link>+linker pair for multi-gene chromosomes, <eos>.
int layout_length(const ChromosomeShape& shape, int max_arity);

TokenSequence tokenize(const Chromosome& chrom, const SymbolTable& table, const Vocabulary& vocab,
                       int window);

struct DetokenizeResult {
    Chromosome chrom;
    int repairs = 0;
};

/// Total inverse of tokenize: parses the control layout and repairs whatever
/// does not fit `shape` (illegal tail symbols, missing or extra genes, an
/// unusable linker), so the result always validates.
DetokenizeResult detokenize(const TokenSequence& seq, const Vocabulary& vocab,
                            const SymbolTable& table, const ChromosomeShape& shape, Rng& rng);

}  // namespace gep
