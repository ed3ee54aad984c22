#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gep/evolution.hpp"
#include "gep/sampler.hpp"
#include "gep/training.hpp"

namespace gep::harness {

struct DatasetHandle {
    std::string name;
    Matrix X;
    std::vector<double> y;
    std::vector<std::string> feature_names;
    std::string target_name;
    std::size_t dropped_rows = 0;  // non-finite rows removed at ingestion
};

/// Numeric CSV with a header row; rows containing non-numeric or non-finite
/// cells are dropped (count reported on the handle).
DatasetHandle load_csv(const std::string& path, const std::string& target_column);

/// `column_name<TAB>feature_token` lines; reorders dataset columns so that
/// column j feeds the vocabulary feature token xj+1. Unlisted columns keep
/// positional order after the mapped ones.
DatasetHandle apply_unit_mapping(const DatasetHandle& data, const std::string& mapping_path);

struct SourceFamilySpec {
    std::string generator = "power-sum-v1";
    int num_tasks = 20;
    int rows_per_task = 256;
    double noise_level = 0.05;
    int feature_dim = 4;  // <= 8
    std::uint64_t seed = 0;
    double x_low = 0.5;   // feature sampling range
    double x_high = 1.5;

    void validate() const;
};

struct GeneratedTask {
    std::string name;
    std::string formula;  // human-readable ground truth
    Matrix X;
    std::vector<double> y;
};

/// Seeded synthetic equation family: sums of 1..3 terms, each a coefficient
/// times a product, square, square root, or ratio of features.
std::vector<GeneratedTask> generate_family(const SourceFamilySpec& spec);

/// Independent GEP runs per task with derived seeds; the returned logs carry
/// task labels for harvesting.
std::vector<RunLog> run_source_battery(const std::vector<GeneratedTask>& tasks,
                                       const SymbolTable& table, EvolutionConfig evo_cfg,
                                       int runs_per_task = 5, std::uint64_t base_seed = 0);

/// CGEP initialization: floor(proportion*n_total) copies drawn rank-first (with
/// replacement) from the fitness-sorted harvest, the rest random; shuffled.
std::vector<Chromosome> cgep_init(const train::TrainingCorpus& harvest, int n_total,
                                  double proportion, const SymbolTable& table,
                                  const Vocabulary& vocab, const ChromosomeShape& shape,
                                  SymbolId linker, std::uint64_t seed);

enum class Mode { Gep, Igep, Cgep };

Mode mode_from_string(const std::string& s);
std::string to_string(Mode m);

struct ExperimentSpec {
    Mode mode = Mode::Gep;
    EvolutionConfig evo;
    SamplerConfig sampler;
    double proportion = 0.0;
    int trials = 25;
    std::uint64_t base_seed = 0;
    std::string name = "experiment";
};

struct AggregateRow {
    int generation = 0;
    double min = 0.0;
    double mean = 0.0;
    double median = 0.0;
    double std = 0.0;
};

struct ReportBundle {
    std::vector<RunLog> trial_logs;
    std::vector<AggregateRow> aggregate;  // over per-trial min fitness
    nlohmann::ordered_json summary;
};

/// Context the modes need: a checkpoint for IGEP, a harvest corpus for CGEP.
struct ModeContext {
    train::Checkpoint* checkpoint = nullptr;
    const train::TrainingCorpus* harvest = nullptr;
};

ReportBundle run_experiment(const ExperimentSpec& spec, const DatasetHandle& data,
                            const SymbolTable& table, const ModeContext& ctx);

void write_aggregate_csv(const std::vector<AggregateRow>& rows, std::ostream& out);

/// Statistics helpers shared by reports and the acceptance suite.
double median(std::vector<double> values);
/// One-sided sign test: P(X >= wins) for X ~ Binomial(wins+losses, 1/2);
/// ties are dropped.
double sign_test_p(int wins, int losses);

}  // namespace gep::harness
