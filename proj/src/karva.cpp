#include "gep/karva.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include <fmt/format.h>

namespace gep {

Symbol Symbol::function(std::string name, OpCode op, int arity) {
    Symbol s;
    s.name = std::move(name);
    s.kind = SymbolKind::Nonterminal;
    s.arity = arity;
    s.op = op;
    return s;
}

Symbol Symbol::feature(std::string name, int index) {
    Symbol s;
    s.name = std::move(name);
    s.kind = SymbolKind::Terminal;
    s.feature_index = index;
    return s;
}

Symbol Symbol::constant(std::string name, double value) {
    Symbol s;
    s.name = std::move(name);
    s.kind = SymbolKind::Constant;
    s.constant_value = value;
    return s;
}

SymbolTable::SymbolTable(std::vector<Symbol> symbols) : symbols_(std::move(symbols)) {
    std::unordered_set<std::string> names;
    bool has_terminal = false;
    bool has_nonterminal = false;
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
        const Symbol& s = symbols_[i];
        if (!names.insert(s.name).second) {
            throw std::invalid_argument(fmt::format("duplicate symbol name '{}'", s.name));
        }
        const bool fn = s.kind == SymbolKind::Nonterminal;
        if (fn != (s.arity >= 1)) {
            throw std::invalid_argument(fmt::format("symbol '{}' kind/arity mismatch", s.name));
        }
        if (fn) {
            has_nonterminal = true;
            nonterminals_.push_back(static_cast<SymbolId>(i));
            max_arity_ = std::max(max_arity_, s.arity);
        } else {
            has_terminal = true;
            terminals_.push_back(static_cast<SymbolId>(i));
        }
    }
    if (!has_terminal || !has_nonterminal) {
        throw std::invalid_argument("symbol table needs at least one terminal and one nonterminal");
    }
}

const Symbol& SymbolTable::at(SymbolId id) const {
    if (!contains(id)) {
        throw std::out_of_range(fmt::format("invalid symbol id {}", id));
    }
    return symbols_[static_cast<std::size_t>(id)];
}

std::optional<SymbolId> SymbolTable::find(std::string_view name) const {
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
        if (symbols_[i].name == name) {
            return static_cast<SymbolId>(i);
        }
    }
    return std::nullopt;
}

SymbolId SymbolTable::default_linker() const {
    for (SymbolId id : nonterminals_) {
        if (symbols_[static_cast<std::size_t>(id)].arity == 2) {
            return id;
        }
    }
    throw std::logic_error("symbol table has no binary function to use as linker");
}

SymbolTable SymbolTable::make(const std::vector<std::string>& functions, int n_features,
                              const std::vector<double>& constants) {
    std::vector<Symbol> symbols;
    for (const std::string& f : functions) {
        if (f == "+") {
            symbols.push_back(Symbol::function("+", OpCode::Add, 2));
        } else if (f == "-") {
            symbols.push_back(Symbol::function("-", OpCode::Sub, 2));
        } else if (f == "*") {
            symbols.push_back(Symbol::function("*", OpCode::Mul, 2));
        } else if (f == "/") {
            symbols.push_back(Symbol::function("/", OpCode::Div, 2));
        } else if (f == "sqr") {
            symbols.push_back(Symbol::function("sqr", OpCode::Sqr, 1));
        } else if (f == "sqrt") {
            symbols.push_back(Symbol::function("sqrt", OpCode::Sqrt, 1));
        } else {
            throw std::invalid_argument(fmt::format("unknown function '{}'", f));
        }
    }
    for (int i = 0; i < n_features; ++i) {
        symbols.push_back(Symbol::feature(fmt::format("x{}", i + 1), i));
    }
    for (double c : constants) {
        symbols.push_back(Symbol::constant(format_constant(c), c));
    }
    return SymbolTable(std::move(symbols));
}

int tail_length(int head_length, int max_arity) {
    return head_length * (max_arity - 1) + 1;
}

std::string format_constant(double value) {
    if (value == std::floor(value) && std::abs(value) < 1e6) {
        return fmt::format("{:.1f}", value);
    }
    return fmt::format("{:g}", value);
}

std::size_t Chromosome::total_symbols() const {
    std::size_t n = 0;
    for (const Gene& g : genes) {
        n += g.length();
    }
    return n;
}

SymbolId Chromosome::at(std::size_t i) const {
    for (const Gene& g : genes) {
        if (i < g.length()) {
            return g.at(i);
        }
        i -= g.length();
    }
    throw std::out_of_range("chromosome position out of range");
}

void Chromosome::set(std::size_t i, SymbolId id) {
    for (Gene& g : genes) {
        if (i < g.length()) {
            g.set(i, id);
            return;
        }
        i -= g.length();
    }
    throw std::out_of_range("chromosome position out of range");
}

bool validate_gene(const Gene& gene, const SymbolTable& table) {
    for (std::size_t i = 0; i < gene.length(); ++i) {
        table.at(gene.at(i));  // throws on unknown ids
    }
    if (gene.tail.size() != static_cast<std::size_t>(tail_length(static_cast<int>(gene.head.size()),
                                                                 table.max_arity()))) {
        return false;
    }
    for (SymbolId id : gene.tail) {
        if (table.at(id).arity != 0) {
            return false;
        }
    }
    return true;
}

ExpressionTree decode_gene(const Gene& gene, const SymbolTable& table) {
    const std::size_t n = gene.length();
    // Level-order expansion: node i's children occupy the next unassigned
    // positions. Head/tail sizing guarantees we never run past the end.
    std::vector<std::pair<std::size_t, std::size_t>> child_range(n, {0, 0});
    std::size_t next = 1;
    for (std::size_t i = 0; i < next && i < n; ++i) {
        const int arity = table.at(gene.at(i)).arity;
        if (next + static_cast<std::size_t>(arity) > n) {
            throw std::logic_error("gene too short to decode; tail sizing violated");
        }
        child_range[i] = {next, next + static_cast<std::size_t>(arity)};
        next += static_cast<std::size_t>(arity);
    }

    auto build = [&](auto&& self, std::size_t idx) -> ExpressionTree {
        ExpressionTree t;
        t.node = gene.at(idx);
        for (std::size_t c = child_range[idx].first; c < child_range[idx].second; ++c) {
            t.children.push_back(self(self, c));
        }
        return t;
    };
    return build(build, 0);
}

ExpressionTree decode_chromosome(const Chromosome& chrom, const SymbolTable& table) {
    if (chrom.genes.empty()) {
        throw std::invalid_argument("chromosome has no genes");
    }
    ExpressionTree acc = decode_gene(chrom.genes[0], table);
    for (std::size_t i = 1; i < chrom.genes.size(); ++i) {
        ExpressionTree parent;
        parent.node = chrom.linker;
        parent.children.push_back(std::move(acc));
        parent.children.push_back(decode_gene(chrom.genes[i], table));
        acc = std::move(parent);
    }
    return acc;
}

double evaluate(const ExpressionTree& tree, const SymbolTable& table, std::span<const double> row,
                bool& non_finite) {
    const Symbol& s = table.at(tree.node);
    double v = 0.0;
    switch (s.kind) {
        case SymbolKind::Terminal: {
            const std::size_t idx = static_cast<std::size_t>(s.feature_index.value());
            if (idx >= row.size()) {
                throw std::out_of_range(
                    fmt::format("feature index {} out of range for row of size {}", idx, row.size()));
            }
            v = row[idx];
            break;
        }
        case SymbolKind::Constant:
            v = s.constant_value.value();
            break;
        case SymbolKind::Nonterminal: {
            const double a = evaluate(tree.children[0], table, row, non_finite);
            switch (s.op) {
                case OpCode::Add:
                    v = a + evaluate(tree.children[1], table, row, non_finite);
                    break;
                case OpCode::Sub:
                    v = a - evaluate(tree.children[1], table, row, non_finite);
                    break;
                case OpCode::Mul:
                    v = a * evaluate(tree.children[1], table, row, non_finite);
                    break;
                case OpCode::Div: {
                    const double b = evaluate(tree.children[1], table, row, non_finite);
                    if (b == 0.0) {
                        non_finite = true;
                        v = 1.0;
                    } else {
                        v = a / b;
                    }
                    break;
                }
                case OpCode::Sqr:
                    v = a * a;
                    break;
                case OpCode::Sqrt:
                    v = std::sqrt(std::abs(a));
                    break;
                case OpCode::None:
                    throw std::logic_error(fmt::format("function '{}' has no opcode", s.name));
            }
            break;
        }
    }
    if (!std::isfinite(v)) {
        non_finite = true;
    }
    return v;
}

Gene random_gene(const SymbolTable& table, int head_length, Rng& rng) {
    if (head_length < 1) {
        throw std::invalid_argument("head length must be >= 1");
    }
    Gene g;
    g.head.resize(static_cast<std::size_t>(head_length));
    g.tail.resize(static_cast<std::size_t>(tail_length(head_length, table.max_arity())));
    for (SymbolId& id : g.head) {
        id = static_cast<SymbolId>(rng.uniform_index(table.size()));
    }
    const auto terms = table.terminals();
    for (SymbolId& id : g.tail) {
        id = terms[rng.uniform_index(terms.size())];
    }
    return g;
}

Chromosome random_chromosome(const SymbolTable& table, int head_length, int gene_count,
                             SymbolId linker, Rng& rng) {
    if (gene_count < 1) {
        throw std::invalid_argument("gene count must be >= 1");
    }
    Chromosome c;
    c.linker = linker;
    c.genes.reserve(static_cast<std::size_t>(gene_count));
    for (int i = 0; i < gene_count; ++i) {
        c.genes.push_back(random_gene(table, head_length, rng));
    }
    return c;
}

std::optional<std::size_t> karva_parent(std::span<const int> arities, std::size_t pos) {
    if (pos == 0) {
        return std::nullopt;
    }
    std::size_t next = 1;
    for (std::size_t i = 0; i < pos && i < next; ++i) {
        const std::size_t lo = next;
        next += static_cast<std::size_t>(i < arities.size() ? arities[i] : 0);
        if (pos >= lo && pos < next) {
            return i;
        }
    }
    return std::nullopt;  // unexpressed suffix
}

bool has_nested_unary(const ExpressionTree& tree, const SymbolTable& table) {
    if (table.at(tree.node).arity == 1) {
        for (const ExpressionTree& c : tree.children) {
            if (c.node == tree.node) {
                return true;
            }
        }
    }
    for (const ExpressionTree& c : tree.children) {
        if (has_nested_unary(c, table)) {
            return true;
        }
    }
    return false;
}

std::string to_infix(const ExpressionTree& tree, const SymbolTable& table) {
    const Symbol& s = table.at(tree.node);
    if (s.arity == 0) {
        return s.name;
    }
    if (s.arity == 1) {
        return fmt::format("{}({})", s.name, to_infix(tree.children[0], table));
    }
    return fmt::format("({}{}{})", to_infix(tree.children[0], table), s.name,
                       to_infix(tree.children[1], table));
}

}  // namespace gep
