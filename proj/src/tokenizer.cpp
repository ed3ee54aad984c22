#include "gep/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>
#include <fmt/ostream.h>

namespace gep {

const std::vector<double>& Vocabulary::number_token_values() {
    static const std::vector<double> values = {0.1, 0.5, -0.1, -0.5};
    return values;
}

Vocabulary Vocabulary::build(const SymbolTable& table) {
    Vocabulary v;
    v.tokens_ = {
        {"<pad>", TokenKind::Control, 0.0, 0, std::nullopt},
        {"<sos>", TokenKind::Control, 0.0, 0, std::nullopt},
        {"<eos>", TokenKind::Control, 0.0, 0, std::nullopt},
        {"<gene>", TokenKind::Control, 0.0, 0, std::nullopt},
        {"<link>", TokenKind::Control, 0.0, 0, std::nullopt},
    };
    for (SymbolId id : table.nonterminals()) {
        const Symbol& s = table.at(id);
        v.tokens_.push_back({s.name, TokenKind::Function, 0.0, s.arity, id});
    }
    for (SymbolId id : table.terminals()) {
        const Symbol& s = table.at(id);
        if (s.kind == SymbolKind::Terminal) {
            v.tokens_.push_back({s.name, TokenKind::Feature, 0.0, 0, id});
        }
    }
    for (double x : number_token_values()) {
        v.tokens_.push_back({format_constant(x), TokenKind::Number, x, 0, std::nullopt});
    }
    // Predefined constants: 2.0 always, plus any table constant that is not
    // already a number token.
    std::vector<double> predefined = {2.0};
    for (SymbolId id : table.terminals()) {
        const Symbol& s = table.at(id);
        if (s.kind != SymbolKind::Constant) {
            continue;
        }
        const double val = s.constant_value.value();
        const auto& numbers = number_token_values();
        const bool is_number = std::find(numbers.begin(), numbers.end(), val) != numbers.end();
        const bool already = std::find(predefined.begin(), predefined.end(), val) != predefined.end();
        if (!is_number && !already) {
            predefined.push_back(val);
        }
    }
    for (double x : predefined) {
        v.tokens_.push_back({format_constant(x), TokenKind::Constant, x, 0, std::nullopt});
    }
    v.relink(table);
    return v;
}

void Vocabulary::relink(const SymbolTable& table) {
    symbol_to_token_.assign(table.size(), -1);
    for (std::size_t t = 0; t < tokens_.size(); ++t) {
        TokenInfo& tok = tokens_[t];
        tok.symbol.reset();
        if (tok.kind == TokenKind::Function || tok.kind == TokenKind::Feature) {
            if (auto id = table.find(tok.name)) {
                const Symbol& s = table.at(*id);
                const bool fn = tok.kind == TokenKind::Function;
                if (fn == (s.kind == SymbolKind::Nonterminal) && (!fn || s.arity == tok.arity)) {
                    tok.symbol = *id;
                }
            }
        } else if (tok.kind == TokenKind::Number || tok.kind == TokenKind::Constant) {
            for (SymbolId id : table.terminals()) {
                const Symbol& s = table.at(id);
                if (s.kind == SymbolKind::Constant && s.constant_value.value() == tok.value) {
                    tok.symbol = id;
                    break;
                }
            }
        }
        if (tok.symbol) {
            symbol_to_token_[static_cast<std::size_t>(*tok.symbol)] = static_cast<int>(t);
        }
    }
}

const TokenInfo& Vocabulary::at(int id) const {
    if (id < 0 || id >= size()) {
        throw std::out_of_range(fmt::format("token id {} out of range", id));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocabulary::find(std::string_view name) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i].name == name) {
            return static_cast<int>(i);
        }
    }
    return std::nullopt;
}

int Vocabulary::token_for_symbol(SymbolId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= symbol_to_token_.size() ||
        symbol_to_token_[static_cast<std::size_t>(id)] < 0) {
        throw std::invalid_argument(fmt::format("symbol id {} has no vocabulary token", id));
    }
    return symbol_to_token_[static_cast<std::size_t>(id)];
}

int Vocabulary::constant_to_token(double x) const {
    if (!std::isfinite(x)) {
        throw std::invalid_argument("constant_to_token requires a finite value");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i].kind == TokenKind::Constant && tokens_[i].value == x) {
            return static_cast<int>(i);
        }
    }
    int best = -1;
    double best_diff = 0.0;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i].kind != TokenKind::Number) {
            continue;
        }
        const double diff = std::abs(x - tokens_[i].value);
        if (best < 0 || diff < best_diff) {
            best = static_cast<int>(i);
            best_diff = diff;
        }
    }
    if (best < 0) {
        throw std::logic_error("vocabulary has no number tokens");
    }
    return best;
}

bool Vocabulary::operator==(const Vocabulary& other) const {
    if (tokens_.size() != other.tokens_.size()) {
        return false;
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        const TokenInfo& a = tokens_[i];
        const TokenInfo& b = other.tokens_[i];
        if (a.name != b.name || a.kind != b.kind || a.value != b.value || a.arity != b.arity) {
            return false;
        }
    }
    return true;
}

namespace {

const char* kind_name(TokenKind k) {
    switch (k) {
        case TokenKind::Control: return "control";
        case TokenKind::Function: return "function";
        case TokenKind::Feature: return "feature";
        case TokenKind::Number: return "number";
        case TokenKind::Constant: return "constant";
    }
    return "?";
}

TokenKind kind_from_name(const std::string& s) {
    if (s == "control") return TokenKind::Control;
    if (s == "function") return TokenKind::Function;
    if (s == "feature") return TokenKind::Feature;
    if (s == "number") return TokenKind::Number;
    if (s == "constant") return TokenKind::Constant;
    throw std::runtime_error(fmt::format("unknown token kind '{}'", s));
}

}  // namespace

void Vocabulary::save(std::ostream& out) const {
    for (const TokenInfo& t : tokens_) {
        if (t.kind == TokenKind::Number || t.kind == TokenKind::Constant) {
            fmt::print(out, "{}\t{}\t{:.17g}\n", t.name, kind_name(t.kind), t.value);
        } else if (t.kind == TokenKind::Function) {
            fmt::print(out, "{}\t{}\t{}\n", t.name, kind_name(t.kind), t.arity);
        } else {
            fmt::print(out, "{}\t{}\n", t.name, kind_name(t.kind));
        }
    }
}

Vocabulary Vocabulary::load(std::istream& in) {
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab - start));
            if (tab == std::string::npos) {
                break;
            }
            start = tab + 1;
        }
        if (fields.size() < 2) {
            throw std::runtime_error("malformed vocabulary line");
        }
        TokenInfo t;
        t.name = fields[0];
        t.kind = kind_from_name(fields[1]);
        if (t.kind == TokenKind::Number || t.kind == TokenKind::Constant) {
            if (fields.size() < 3) {
                throw std::runtime_error("number/constant token is missing its value");
            }
            t.value = std::stod(fields[2]);
        } else if (t.kind == TokenKind::Function) {
            if (fields.size() < 3) {
                throw std::runtime_error("function token is missing its arity");
            }
            t.arity = std::stoi(fields[2]);
        }
        v.tokens_.push_back(std::move(t));
    }
    if (v.tokens_.size() < 5 || v.tokens_[0].name != "<pad>" || v.tokens_[1].name != "<sos>" ||
        v.tokens_[2].name != "<eos>" || v.tokens_[3].name != "<gene>" ||
        v.tokens_[4].name != "<link>") {
        throw std::runtime_error("vocabulary file lacks the control-token preamble");
    }
    return v;
}

int gene_token_length(int head_length, int max_arity) {
    return head_length + tail_length(head_length, max_arity);
}

int layout_length(const ChromosomeShape& shape, int max_arity) {
    const int per_gene = 1 + gene_token_length(shape.head_length, max_arity);
    return 1 + shape.gene_count * per_gene + (shape.gene_count > 1 ? 2 : 0) + 1;
}

TokenSequence tokenize(const Chromosome& chrom, const SymbolTable& table, const Vocabulary& vocab,
                       int window) {
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(window));
    ids.push_back(Vocabulary::kSos);
    for (const Gene& g : chrom.genes) {
        ids.push_back(Vocabulary::kGene);
        for (std::size_t i = 0; i < g.length(); ++i) {
            const Symbol& s = table.at(g.at(i));
            if (s.kind == SymbolKind::Constant) {
                ids.push_back(vocab.constant_to_token(s.constant_value.value()));
            } else {
                ids.push_back(vocab.token_for_symbol(g.at(i)));
            }
        }
    }
    if (chrom.genes.size() > 1) {
        ids.push_back(Vocabulary::kLink);
        ids.push_back(vocab.token_for_symbol(chrom.linker));
    }
    ids.push_back(Vocabulary::kEos);
    if (ids.size() > static_cast<std::size_t>(window)) {
        throw std::length_error(fmt::format("tokenized length {} exceeds window {}", ids.size(),
                                            window));
    }
    TokenSequence seq;
    seq.true_length = ids.size();
    ids.resize(static_cast<std::size_t>(window), Vocabulary::kPad);
    seq.ids = std::move(ids);
    return seq;
}

DetokenizeResult detokenize(const TokenSequence& seq, const Vocabulary& vocab,
                            const SymbolTable& table, const ChromosomeShape& shape, Rng& rng) {
    // Parse the control layout into per-gene token runs and a link run.
    std::vector<std::vector<int>> gene_runs;
    std::vector<int> link_run;
    int repairs = 0;
    enum class Where { Preamble, Gene, Link };
    Where where = Where::Preamble;
    bool saw_sos = false;
    for (int id : seq.ids) {
        if (id == Vocabulary::kPad || id == Vocabulary::kEos) {
            break;
        }
        if (id == Vocabulary::kSos) {
            saw_sos = true;
            continue;
        }
        if (id == Vocabulary::kGene) {
            gene_runs.emplace_back();
            where = Where::Gene;
            continue;
        }
        if (id == Vocabulary::kLink) {
            where = Where::Link;
            continue;
        }
        switch (where) {
            case Where::Preamble:
                // content before the first <gene>; recover it as a gene run
                gene_runs.emplace_back();
                gene_runs.back().push_back(id);
                where = Where::Gene;
                ++repairs;
                break;
            case Where::Gene:
                gene_runs.back().push_back(id);
                break;
            case Where::Link:
                link_run.push_back(id);
                break;
        }
    }
    if (!saw_sos) {
        ++repairs;
    }

    const auto terminals = table.terminals();
    auto random_terminal = [&]() { return terminals[rng.uniform_index(terminals.size())]; };

    const int gene_len = gene_token_length(shape.head_length, table.max_arity());
    Chromosome chrom;
    for (int g = 0; g < shape.gene_count; ++g) {
        const std::vector<int>* run = g < static_cast<int>(gene_runs.size()) ? &gene_runs[g] : nullptr;
        if (run == nullptr) {
            chrom.genes.push_back(random_gene(table, shape.head_length, rng));
            ++repairs;
            continue;
        }
        if (static_cast<int>(run->size()) != gene_len) {
            ++repairs;
        }
        Gene gene;
        for (int i = 0; i < gene_len; ++i) {
            const bool in_head = i < shape.head_length;
            std::optional<SymbolId> sym;
            if (i < static_cast<int>(run->size())) {
                const TokenInfo& tok = vocab.at((*run)[static_cast<std::size_t>(i)]);
                if (tok.symbol && (in_head || table.at(*tok.symbol).arity == 0)) {
                    sym = tok.symbol;
                } else {
                    ++repairs;
                }
            }
            SymbolId id;
            if (sym) {
                id = *sym;
            } else if (in_head) {
                id = static_cast<SymbolId>(rng.uniform_index(table.size()));
            } else {
                id = random_terminal();
            }
            if (in_head) {
                gene.head.push_back(id);
            } else {
                gene.tail.push_back(id);
            }
        }
        chrom.genes.push_back(std::move(gene));
    }
    if (static_cast<int>(gene_runs.size()) > shape.gene_count) {
        ++repairs;
    }

    chrom.linker = table.default_linker();
    if (shape.gene_count > 1) {
        bool linked = false;
        for (int id : link_run) {
            const TokenInfo& tok = vocab.at(id);
            if (tok.symbol && table.at(*tok.symbol).arity == 2) {
                chrom.linker = *tok.symbol;
                linked = true;
                break;
            }
        }
        if (!linked) {
            ++repairs;
        }
    }
    return DetokenizeResult{std::move(chrom), repairs};
}

}  // namespace gep
