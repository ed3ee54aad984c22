#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gep/rng.hpp"

namespace gep {

using SymbolId = std::int32_t;

enum class SymbolKind : std::uint8_t { Terminal, Nonterminal, Constant };

enum class OpCode : std::uint8_t { None, Add, Sub, Mul, Div, Sqr, Sqrt };

/// One entry of the search alphabet: a function, an input variable, or a
/// constant placeholder resolved to a fixed numeric value.
struct Symbol {
    std::string name;
    SymbolKind kind = SymbolKind::Terminal;
    int arity = 0;
    OpCode op = OpCode::None;
    std::optional<int> feature_index;
    std::optional<double> constant_value;

    static Symbol function(std::string name, OpCode op, int arity);
    static Symbol feature(std::string name, int index);
    static Symbol constant(std::string name, double value);
};

/// Ordered, validated set of symbols. Immutable after construction.
class SymbolTable {
public:
    explicit SymbolTable(std::vector<Symbol> symbols);

    std::size_t size() const { return symbols_.size(); }
    const Symbol& at(SymbolId id) const;
    bool contains(SymbolId id) const { return id >= 0 && static_cast<std::size_t>(id) < symbols_.size(); }
    int max_arity() const { return max_arity_; }

    /// Arity-0 symbol ids (variables and constants), in table order.
    std::span<const SymbolId> terminals() const { return terminals_; }
    /// Function symbol ids, in table order.
    std::span<const SymbolId> nonterminals() const { return nonterminals_; }

    std::optional<SymbolId> find(std::string_view name) const;
    /// First binary function in the table; used as the default linker.
    SymbolId default_linker() const;

    /// Standard construction: named arithmetic functions, `n_features` input
    /// variables x1..xn, and one constant terminal per value.
    static SymbolTable make(const std::vector<std::string>& functions, int n_features,
                            const std::vector<double>& constants);

private:
    std::vector<Symbol> symbols_;
    std::vector<SymbolId> terminals_;
    std::vector<SymbolId> nonterminals_;
    int max_arity_ = 0;
};

/// Tail length that guarantees a decodable gene: h*(max_arity-1)+1.
int tail_length(int head_length, int max_arity);

/// Canonical rendering of constant values: "0.5", "-0.1", "2.0".
std::string format_constant(double value);

struct Gene {
    std::vector<SymbolId> head;
    std::vector<SymbolId> tail;

    std::size_t length() const { return head.size() + tail.size(); }
    SymbolId at(std::size_t i) const { return i < head.size() ? head[i] : tail[i - head.size()]; }
    void set(std::size_t i, SymbolId id) {
        if (i < head.size()) {
            head[i] = id;
        } else {
            tail[i - head.size()] = id;
        }
    }
    bool operator==(const Gene&) const = default;
};

struct Chromosome {
    std::vector<Gene> genes;
    SymbolId linker = 0;

    std::size_t total_symbols() const;
    /// Position i of the flattened multi-gene string.
    SymbolId at(std::size_t i) const;
    void set(std::size_t i, SymbolId id);
    bool operator==(const Chromosome&) const = default;
};

struct ExpressionTree {
    SymbolId node = 0;
    std::vector<ExpressionTree> children;
};

/// True iff every tail position holds an arity-0 symbol and the tail is sized
/// for the table's max arity. Unknown symbol ids throw.
bool validate_gene(const Gene& gene, const SymbolTable& table);

/// Level-order (breadth-first) expansion of the Karva string into a tree.
ExpressionTree decode_gene(const Gene& gene, const SymbolTable& table);

/// Per-gene trees folded left under the linker; a single gene is returned as is.
ExpressionTree decode_chromosome(const Chromosome& chrom, const SymbolTable& table);

/// Recursive arithmetic evaluation with protected operators:
/// x/0 yields 1.0 and sets `non_finite`; sqrt uses |x|. Any non-finite
/// intermediate also sets `non_finite`.
double evaluate(const ExpressionTree& tree, const SymbolTable& table, std::span<const double> row,
                bool& non_finite);

Gene random_gene(const SymbolTable& table, int head_length, Rng& rng);
Chromosome random_chromosome(const SymbolTable& table, int head_length, int gene_count,
                             SymbolId linker, Rng& rng);

/// Index of the breadth-first parent of `pos` given the arities of the symbols
/// before it. nullopt for the root and for unexpressed positions.
std::optional<std::size_t> karva_parent(std::span<const int> arities, std::size_t pos);

/// True if some arity-1 node has a direct child with the same symbol.
bool has_nested_unary(const ExpressionTree& tree, const SymbolTable& table);

/// Infix rendering, for reports and debugging.
std::string to_infix(const ExpressionTree& tree, const SymbolTable& table);

}  // namespace gep
