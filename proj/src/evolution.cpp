#include "gep/evolution.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>
#include <fmt/ostream.h>

namespace gep {

bool fitter(const Individual& a, const Individual& b) {
    if (a.non_finite != b.non_finite) {
        return !a.non_finite;
    }
    return a.fitness.value_or(kFitnessSentinel) < b.fitness.value_or(kFitnessSentinel);
}

void EvolutionConfig::validate() const {
    if (population_size < 2) {
        throw std::invalid_argument("population_size must be >= 2");
    }
    if (generations < 0 || head_length < 1 || gene_count < 1 || tournament_size < 1) {
        throw std::invalid_argument("invalid evolution config");
    }
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(mutation_prob) || !prob(one_point_cx_prob) || !prob(two_point_cx_prob) ||
        !prob(reproduction_rate) || one_point_cx_prob + two_point_cx_prob > 1.0) {
        throw std::invalid_argument("evolution probabilities must lie in [0,1]");
    }
}

double fitness_mae(const ExpressionTree& tree, const SymbolTable& table, const Matrix& X,
                   std::span<const double> y, bool& non_finite) {
    if (X.rows != y.size()) {
        throw std::invalid_argument(
            fmt::format("dimension mismatch: X has {} rows, y has {}", X.rows, y.size()));
    }
    if (X.rows == 0) {
        throw std::invalid_argument("fitness requires at least one row");
    }
    double acc = 0.0;
    bool bad = false;
    for (std::size_t r = 0; r < X.rows; ++r) {
        const double pred = evaluate(tree, table, X.row(r), bad);
        if (bad) {
            non_finite = true;
            return kFitnessSentinel;
        }
        acc += std::abs(pred - y[r]);
    }
    const double mae = acc / static_cast<double>(X.rows);
    if (!std::isfinite(mae)) {
        non_finite = true;
        return kFitnessSentinel;
    }
    return mae;
}

const Individual& tournament_select(std::span<const Individual> pop, int k, Rng& rng) {
    if (pop.empty() || k < 1) {
        throw std::invalid_argument("tournament needs a non-empty population and k >= 1");
    }
    std::size_t best = rng.uniform_index(pop.size());
    for (int i = 1; i < k; ++i) {
        const std::size_t cand = rng.uniform_index(pop.size());
        if (fitter(pop[cand], pop[best]) || (cand < best && !fitter(pop[best], pop[cand]))) {
            best = cand;
        }
    }
    return pop[best];
}

Chromosome mutate(const Chromosome& chrom, double p, const SymbolTable& table, Rng& rng) {
    Chromosome out = chrom;
    const auto terms = table.terminals();
    for (Gene& g : out.genes) {
        for (SymbolId& id : g.head) {
            if (rng.bernoulli(p)) {
                id = static_cast<SymbolId>(rng.uniform_index(table.size()));
            }
        }
        for (SymbolId& id : g.tail) {
            if (rng.bernoulli(p)) {
                id = terms[rng.uniform_index(terms.size())];
            }
        }
    }
    return out;
}

namespace {

void check_same_shape(const Chromosome& a, const Chromosome& b) {
    if (a.genes.size() != b.genes.size()) {
        throw std::invalid_argument("crossover requires chromosomes of identical shape");
    }
    for (std::size_t i = 0; i < a.genes.size(); ++i) {
        if (a.genes[i].head.size() != b.genes[i].head.size() ||
            a.genes[i].tail.size() != b.genes[i].tail.size()) {
            throw std::invalid_argument("crossover requires chromosomes of identical shape");
        }
    }
}

}  // namespace

std::pair<Chromosome, Chromosome> crossover_one_point_at(const Chromosome& a, const Chromosome& b,
                                                         std::size_t cut) {
    check_same_shape(a, b);
    Chromosome c1 = a;
    Chromosome c2 = b;
    const std::size_t n = a.total_symbols();
    for (std::size_t i = cut; i < n; ++i) {
        c1.set(i, b.at(i));
        c2.set(i, a.at(i));
    }
    return {std::move(c1), std::move(c2)};
}

std::pair<Chromosome, Chromosome> crossover_one_point(const Chromosome& a, const Chromosome& b,
                                                      Rng& rng) {
    const std::size_t cut = rng.uniform_index(a.total_symbols() + 1);
    return crossover_one_point_at(a, b, cut);
}

std::pair<Chromosome, Chromosome> crossover_two_point_at(const Chromosome& a, const Chromosome& b,
                                                         std::size_t i, std::size_t j) {
    check_same_shape(a, b);
    if (i > j) {
        throw std::invalid_argument("two-point crossover requires i <= j");
    }
    Chromosome c1 = a;
    Chromosome c2 = b;
    for (std::size_t p = i; p < j; ++p) {
        c1.set(p, b.at(p));
        c2.set(p, a.at(p));
    }
    return {std::move(c1), std::move(c2)};
}

std::pair<Chromosome, Chromosome> crossover_two_point(const Chromosome& a, const Chromosome& b,
                                                      Rng& rng) {
    const std::size_t n = a.total_symbols();
    std::size_t i = rng.uniform_index(n + 1);
    std::size_t j = rng.uniform_index(n + 1);
    if (i > j) {
        std::swap(i, j);
    }
    return crossover_two_point_at(a, b, i, j);
}

namespace {

struct GenStats {
    double min_fitness;
    double mean_fitness;
    std::size_t best_index;
};

GenStats population_stats(const std::vector<Individual>& pop) {
    std::size_t best = 0;
    double sum = 0.0;
    std::size_t finite = 0;
    for (std::size_t i = 0; i < pop.size(); ++i) {
        if (fitter(pop[i], pop[best])) {
            best = i;
        }
        if (!pop[i].non_finite) {
            sum += pop[i].fitness.value();
            ++finite;
        }
    }
    const double min_f = pop[best].non_finite ? kFitnessSentinel : pop[best].fitness.value();
    const double mean_f = finite > 0 ? sum / static_cast<double>(finite) : kFitnessSentinel;
    return {min_f, mean_f, best};
}

}  // namespace

RunLog evolve(const EvolutionConfig& config, const SymbolTable& table, const Matrix& X,
              std::span<const double> y, std::vector<Chromosome> initial) {
    config.validate();
    if (initial.size() != static_cast<std::size_t>(config.population_size)) {
        throw std::invalid_argument(
            fmt::format("initial population has {} chromosomes, config wants {}", initial.size(),
                        config.population_size));
    }

    RunLog log;
    Rng rng(config.seed);

    std::vector<Individual> pop;
    pop.reserve(initial.size());
    for (Chromosome& c : initial) {
        pop.push_back(Individual{std::move(c), std::nullopt, false});
    }

    auto evaluate_pop = [&](std::vector<Individual>& p) {
        for (Individual& ind : p) {
            if (ind.fitness.has_value()) {
                continue;  // elites keep their cached value; evaluation is pure
            }
            bool bad = false;
            const ExpressionTree tree = decode_chromosome(ind.chrom, table);
            ind.fitness = fitness_mae(tree, table, X, y, bad);
            ind.non_finite = bad;
            log.harvest.push_back(HarvestEntry{ind.chrom, *ind.fitness});
        }
    };

    auto record = [&](int gen) {
        const GenStats s = population_stats(pop);
        log.records.push_back(GenerationRecord{gen, s.min_fitness, s.mean_fitness,
                                               pop[s.best_index].chrom});
    };

    evaluate_pop(pop);
    record(0);

    const int n = config.population_size;
    for (int gen = 1; gen <= config.generations; ++gen) {
        std::vector<std::size_t> order(pop.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return fitter(pop[a], pop[b]); });

        std::size_t finite_count = 0;
        for (const Individual& ind : pop) {
            if (!ind.non_finite) {
                ++finite_count;
            }
        }
        const std::size_t elite_target =
            static_cast<std::size_t>(std::ceil(config.reproduction_rate * n));
        const std::size_t n_elite = std::min(elite_target, finite_count);

        std::vector<Individual> next;
        next.reserve(pop.size());
        for (std::size_t e = 0; e < n_elite; ++e) {
            next.push_back(pop[order[e]]);
        }
        while (next.size() < static_cast<std::size_t>(n)) {
            const Individual& pa = tournament_select(pop, config.tournament_size, rng);
            const Individual& pb = tournament_select(pop, config.tournament_size, rng);
            Chromosome child;
            const double u = rng.uniform_double();
            if (u < config.one_point_cx_prob) {
                child = crossover_one_point(pa.chrom, pb.chrom, rng).first;
            } else if (u < config.one_point_cx_prob + config.two_point_cx_prob) {
                child = crossover_two_point(pa.chrom, pb.chrom, rng).first;
            } else {
                child = pa.chrom;
            }
            child = mutate(child, config.mutation_prob, table, rng);
            next.push_back(Individual{std::move(child), std::nullopt, false});
        }
        pop = std::move(next);
        evaluate_pop(pop);
        record(gen);
    }
    return log;
}

std::string chromosome_tokens(const Chromosome& chrom, const SymbolTable& table) {
    std::string out;
    bool first = true;
    for (const Gene& g : chrom.genes) {
        for (std::size_t i = 0; i < g.length(); ++i) {
            if (!first) {
                out += ' ';
            }
            out += table.at(g.at(i)).name;
            first = false;
        }
    }
    return out;
}

void write_runlog_csv(const RunLog& log, const SymbolTable& table, std::ostream& out) {
    out << "generation,min_fitness,mean_fitness,best_tokens\n";
    for (const GenerationRecord& r : log.records) {
        fmt::print(out, "{},{:.17g},{:.17g},{}\n", r.generation, r.min_fitness, r.mean_fitness,
                   chromosome_tokens(r.best, table));
    }
}

void write_harvest_pool(const RunLog& log, const SymbolTable& table, std::ostream& out) {
    if (!log.harvest.empty()) {
        const Chromosome& c = log.harvest.front().chrom;
        fmt::print(out, "# head_length={} gene_count={} linker={}\n", c.genes.front().head.size(),
                   c.genes.size(), table.at(c.linker).name);
    }
    for (const HarvestEntry& e : log.harvest) {
        fmt::print(out, "{}\t{:.17g}\n", chromosome_tokens(e.chrom, table), e.fitness);
    }
}

HarvestPool read_harvest_pool(std::istream& in, const SymbolTable& table) {
    HarvestPool pool;
    std::string line;
    bool have_header = false;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        if (line[0] == '#') {
            std::string linker_name;
            std::istringstream hs(line.substr(1));
            std::string tok;
            while (hs >> tok) {
                if (tok.rfind("head_length=", 0) == 0) {
                    pool.head_length = std::stoi(tok.substr(12));
                } else if (tok.rfind("gene_count=", 0) == 0) {
                    pool.gene_count = std::stoi(tok.substr(11));
                } else if (tok.rfind("linker=", 0) == 0) {
                    linker_name = tok.substr(7);
                }
            }
            const auto linker = table.find(linker_name);
            if (pool.head_length < 1 || pool.gene_count < 1 || !linker) {
                throw std::runtime_error("malformed harvest pool header");
            }
            pool.linker = *linker;
            have_header = true;
            continue;
        }
        if (!have_header) {
            throw std::runtime_error("harvest pool is missing its '#' header line");
        }
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos) {
            throw std::runtime_error("harvest pool line is missing the fitness field");
        }
        const double fitness = std::stod(line.substr(tab + 1));
        std::istringstream ts(line.substr(0, tab));
        std::vector<SymbolId> ids;
        std::string name;
        while (ts >> name) {
            const auto id = table.find(name);
            if (!id) {
                throw std::runtime_error(fmt::format("unknown symbol '{}' in harvest pool", name));
            }
            ids.push_back(*id);
        }
        const std::size_t gene_len =
            static_cast<std::size_t>(pool.head_length +
                                     tail_length(pool.head_length, table.max_arity()));
        if (ids.size() != gene_len * static_cast<std::size_t>(pool.gene_count)) {
            throw std::runtime_error("harvest pool line has the wrong number of symbols");
        }
        Chromosome c;
        c.linker = pool.linker;
        for (int g = 0; g < pool.gene_count; ++g) {
            Gene gene;
            const std::size_t base = static_cast<std::size_t>(g) * gene_len;
            gene.head.assign(ids.begin() + base, ids.begin() + base + pool.head_length);
            gene.tail.assign(ids.begin() + base + pool.head_length, ids.begin() + base + gene_len);
            c.genes.push_back(std::move(gene));
        }
        pool.entries.push_back(HarvestEntry{std::move(c), fitness});
    }
    return pool;
}

}  // namespace gep
