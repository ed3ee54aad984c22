#pragma once

#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gep/data.hpp"
#include "gep/karva.hpp"
#include "gep/rng.hpp"

namespace gep {

/// Sentinel recorded when a candidate produces non-finite predictions.
inline constexpr double kFitnessSentinel = std::numeric_limits<double>::max();

struct Individual {
    Chromosome chrom;
    std::optional<double> fitness;
    bool non_finite = false;
};

/// Orders finite fitness ascending; non-finite individuals sort last.
/// Ties break toward the lower index.
bool fitter(const Individual& a, const Individual& b);

struct EvolutionConfig {
    int population_size = 100;
    int generations = 100;
    int head_length = 6;
    int gene_count = 3;
    double mutation_prob = 0.05;
    double one_point_cx_prob = 0.3;
    double two_point_cx_prob = 0.2;
    double reproduction_rate = 0.9;
    int tournament_size = 3;
    std::uint64_t seed = 0;

    void validate() const;  // throws std::invalid_argument
};

struct GenerationRecord {
    int generation = 0;
    double min_fitness = 0.0;
    double mean_fitness = 0.0;  // over finite-fitness individuals
    Chromosome best;
};

struct HarvestEntry {
    Chromosome chrom;
    double fitness = 0.0;
};

struct RunLog {
    std::string task;  // provenance label, set by callers that track tasks
    std::vector<GenerationRecord> records;
    std::vector<HarvestEntry> harvest;
};

/// Mean absolute error of the tree's predictions over (X, y). Any non-finite
/// prediction makes the result the sentinel and sets `non_finite`.
double fitness_mae(const ExpressionTree& tree, const SymbolTable& table, const Matrix& X,
                   std::span<const double> y, bool& non_finite);

/// Best of k individuals drawn uniformly with replacement.
const Individual& tournament_select(std::span<const Individual> pop, int k, Rng& rng);

/// Independent per-position resampling: head positions from the full table,
/// tail positions from terminals only.
Chromosome mutate(const Chromosome& chrom, double p, const SymbolTable& table, Rng& rng);

std::pair<Chromosome, Chromosome> crossover_one_point_at(const Chromosome& a, const Chromosome& b,
                                                         std::size_t cut);
std::pair<Chromosome, Chromosome> crossover_one_point(const Chromosome& a, const Chromosome& b,
                                                      Rng& rng);
std::pair<Chromosome, Chromosome> crossover_two_point_at(const Chromosome& a, const Chromosome& b,
                                                         std::size_t i, std::size_t j);
std::pair<Chromosome, Chromosome> crossover_two_point(const Chromosome& a, const Chromosome& b,
                                                      Rng& rng);

/// Elitist generational loop. `initial` must contain exactly
/// config.population_size chromosomes of the configured shape.
RunLog evolve(const EvolutionConfig& config, const SymbolTable& table, const Matrix& X,
              std::span<const double> y, std::vector<Chromosome> initial);

/// CSV with columns generation,min_fitness,mean_fitness,best_tokens.
void write_runlog_csv(const RunLog& log, const SymbolTable& table, std::ostream& out);

/// One chromosome per line: space-separated symbol names, a tab, the fitness.
/// A leading '#' header records the shape.
void write_harvest_pool(const RunLog& log, const SymbolTable& table, std::ostream& out);

struct HarvestPool {
    int head_length = 0;
    int gene_count = 0;
    SymbolId linker = 0;
    std::vector<HarvestEntry> entries;
};

HarvestPool read_harvest_pool(std::istream& in, const SymbolTable& table);

std::string chromosome_tokens(const Chromosome& chrom, const SymbolTable& table);

}  // namespace gep
