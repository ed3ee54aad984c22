#include "gep/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "gep/parallel.hpp"

namespace gep::harness {

namespace {

bool is_na_cell(const std::string& s) {
    return s.empty() || s == "NA" || s == "na" || s == "NaN" || s == "nan" || s == "null";
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t");
    std::size_t b = s.find_last_not_of(" \t");
    if (a == std::string::npos) {
        return "";
    }
    return s.substr(a, b - a + 1);
}

}  // namespace

DatasetHandle load_csv(const std::string& path, const std::string& target_column) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error(fmt::format("cannot open dataset '{}'", path));
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error(fmt::format("dataset '{}' is empty", path));
    }
    std::vector<std::string> header = split_csv_line(line);
    for (std::string& h : header) {
        h = trim(h);
    }
    std::ptrdiff_t target_idx = -1;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == target_column) {
            target_idx = static_cast<std::ptrdiff_t>(i);
            break;
        }
    }
    if (target_idx < 0) {
        std::string cols;
        for (const std::string& h : header) {
            cols += cols.empty() ? h : ", " + h;
        }
        throw std::runtime_error(fmt::format("target column '{}' not found; available: {}",
                                             target_column, cols));
    }

    DatasetHandle out;
    out.name = path;
    out.target_name = target_column;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (static_cast<std::ptrdiff_t>(i) != target_idx) {
            out.feature_names.push_back(header[i]);
        }
    }

    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw std::runtime_error(fmt::format("{}:{}: expected {} cells, found {}", path,
                                                 line_no, header.size(), cells.size()));
        }
        std::vector<double> row(cells.size());
        bool bad = false;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            const std::string cell = trim(cells[i]);
            if (is_na_cell(cell)) {
                bad = true;
                continue;
            }
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            if (end == cell.c_str() || *end != '\0') {
                throw std::runtime_error(
                    fmt::format("{}:{}: non-numeric cell '{}'", path, line_no, cell));
            }
            if (!std::isfinite(v)) {
                bad = true;
            }
            row[i] = v;
        }
        if (bad) {
            ++out.dropped_rows;
            continue;
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) {
        throw std::runtime_error(fmt::format("dataset '{}' has no usable rows", path));
    }

    out.X = Matrix(rows.size(), header.size() - 1);
    out.y.resize(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::size_t c_out = 0;
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
            if (static_cast<std::ptrdiff_t>(c) == target_idx) {
                out.y[r] = rows[r][c];
            } else {
                out.X.at(r, c_out++) = rows[r][c];
            }
        }
    }
    return out;
}

DatasetHandle apply_unit_mapping(const DatasetHandle& data, const std::string& mapping_path) {
    std::ifstream in(mapping_path);
    if (!in) {
        throw std::runtime_error(fmt::format("cannot open unit mapping '{}'", mapping_path));
    }
    std::map<std::string, int> slot_of;  // column name -> 0-based feature slot
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty() || line[0] == '#') {
            continue;
        }
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos) {
            throw std::runtime_error("unit mapping lines must be column_name<TAB>feature_token");
        }
        const std::string col = trim(line.substr(0, tab));
        const std::string tok = trim(line.substr(tab + 1));
        if (tok.size() < 2 || tok[0] != 'x') {
            throw std::runtime_error(fmt::format("'{}' is not a feature token", tok));
        }
        const int slot = std::stoi(tok.substr(1)) - 1;
        if (slot < 0) {
            throw std::runtime_error(fmt::format("'{}' is not a feature token", tok));
        }
        slot_of[col] = slot;
    }

    int width = static_cast<int>(data.X.cols);
    for (const auto& [col, slot] : slot_of) {
        width = std::max(width, slot + 1);
    }
    std::vector<int> dest(data.X.cols, -1);
    std::vector<bool> taken(static_cast<std::size_t>(width), false);
    for (std::size_t c = 0; c < data.feature_names.size(); ++c) {
        const auto it = slot_of.find(data.feature_names[c]);
        if (it != slot_of.end()) {
            if (taken[static_cast<std::size_t>(it->second)]) {
                throw std::runtime_error("unit mapping assigns two columns to one feature token");
            }
            dest[c] = it->second;
            taken[static_cast<std::size_t>(it->second)] = true;
        }
    }
    int next_free = 0;
    for (std::size_t c = 0; c < dest.size(); ++c) {
        if (dest[c] >= 0) {
            continue;
        }
        while (taken[static_cast<std::size_t>(next_free)]) {
            ++next_free;
        }
        dest[c] = next_free;
        taken[static_cast<std::size_t>(next_free)] = true;
    }

    DatasetHandle out = data;
    out.X = Matrix(data.X.rows, static_cast<std::size_t>(width), 0.0);
    out.feature_names.assign(static_cast<std::size_t>(width), "");
    for (std::size_t c = 0; c < dest.size(); ++c) {
        for (std::size_t r = 0; r < data.X.rows; ++r) {
            out.X.at(r, static_cast<std::size_t>(dest[c])) = data.X.at(r, c);
        }
        out.feature_names[static_cast<std::size_t>(dest[c])] = data.feature_names[c];
    }
    return out;
}

void SourceFamilySpec::validate() const {
    if (generator != "power-sum-v1") {
        throw std::invalid_argument(fmt::format("unknown family generator '{}'", generator));
    }
    if (feature_dim < 1 || feature_dim > 8) {
        throw std::invalid_argument("family feature_dim must lie in [1, 8]");
    }
    if (num_tasks < 1 || rows_per_task < 2 || noise_level < 0.0 || !(x_low < x_high)) {
        throw std::invalid_argument("invalid family spec");
    }
}

std::vector<GeneratedTask> generate_family(const SourceFamilySpec& spec) {
    spec.validate();
    std::vector<GeneratedTask> tasks;
    tasks.reserve(static_cast<std::size_t>(spec.num_tasks));
    const std::vector<double> coeffs = {0.5, 1.0, 2.0};

    for (int t = 0; t < spec.num_tasks; ++t) {
        Rng rng = Rng::derived(spec.seed, 0x7461736bULL + static_cast<std::uint64_t>(t));
        const int f = spec.feature_dim;
        const int n_terms = static_cast<int>(rng.uniform_int(1, 3));

        struct Term {
            double coeff;
            int kind;  // 0: x_i, 1: x_i*x_j, 2: sqr(x_i), 3: sqrt(x_i), 4: x_i/x_j
            int i;
            int j;
        };
        std::vector<Term> terms;
        for (int k = 0; k < n_terms; ++k) {
            Term term;
            term.coeff = coeffs[rng.uniform_index(coeffs.size())];
            if (rng.bernoulli(0.25)) {
                term.coeff = -term.coeff;
            }
            term.kind = static_cast<int>(rng.uniform_int(0, 4));
            term.i = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(f)));
            term.j = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(f)));
            terms.push_back(term);
        }

        auto term_value = [](const Term& term, std::span<const double> row) {
            switch (term.kind) {
                case 0: return row[static_cast<std::size_t>(term.i)];
                case 1:
                    return row[static_cast<std::size_t>(term.i)] *
                           row[static_cast<std::size_t>(term.j)];
                case 2: {
                    const double v = row[static_cast<std::size_t>(term.i)];
                    return v * v;
                }
                case 3: return std::sqrt(row[static_cast<std::size_t>(term.i)]);
                default:
                    return row[static_cast<std::size_t>(term.i)] /
                           row[static_cast<std::size_t>(term.j)];
            }
        };
        auto term_formula = [](const Term& term) {
            switch (term.kind) {
                case 0: return fmt::format("x{}", term.i + 1);
                case 1: return fmt::format("x{}*x{}", term.i + 1, term.j + 1);
                case 2: return fmt::format("sqr(x{})", term.i + 1);
                case 3: return fmt::format("sqrt(x{})", term.i + 1);
                default: return fmt::format("x{}/x{}", term.i + 1, term.j + 1);
            }
        };

        GeneratedTask task;
        task.name = fmt::format("task{:03d}", t);
        for (const Term& term : terms) {
            task.formula += fmt::format("{}{:g}*{}", task.formula.empty() ? "" : " + ", term.coeff,
                                        term_formula(term));
        }

        task.X = Matrix(static_cast<std::size_t>(spec.rows_per_task), static_cast<std::size_t>(f));
        task.y.resize(static_cast<std::size_t>(spec.rows_per_task));
        for (std::size_t r = 0; r < task.X.rows; ++r) {
            for (std::size_t c = 0; c < task.X.cols; ++c) {
                task.X.at(r, c) = rng.uniform_double(spec.x_low, spec.x_high);
            }
            double y = 0.0;
            for (const Term& term : terms) {
                y += term.coeff * term_value(term, task.X.row(r));
            }
            task.y[r] = y;
        }
        if (spec.noise_level > 0.0) {
            double mean = 0.0;
            for (double v : task.y) {
                mean += v;
            }
            mean /= static_cast<double>(task.y.size());
            double var = 0.0;
            for (double v : task.y) {
                var += (v - mean) * (v - mean);
            }
            const double sd = std::sqrt(var / static_cast<double>(task.y.size()));
            for (double& v : task.y) {
                v += spec.noise_level * sd * rng.normal();
            }
        }
        tasks.push_back(std::move(task));
    }
    return tasks;
}

std::vector<RunLog> run_source_battery(const std::vector<GeneratedTask>& tasks,
                                       const SymbolTable& table, EvolutionConfig evo_cfg,
                                       int runs_per_task, std::uint64_t base_seed) {
    if (runs_per_task < 1) {
        throw std::invalid_argument("runs_per_task must be >= 1");
    }
    const std::size_t total = tasks.size() * static_cast<std::size_t>(runs_per_task);
    std::vector<RunLog> logs(total);
    const ChromosomeShape shape{evo_cfg.head_length, evo_cfg.gene_count};
    const SymbolId linker = table.default_linker();
    const SamplerConfig dummy_sampler;

    parallel_for(total, default_thread_count(), [&](std::size_t i) {
        const std::size_t ti = i / static_cast<std::size_t>(runs_per_task);
        const GeneratedTask& task = tasks[ti];
        EvolutionConfig evo = evo_cfg;
        evo.seed = Rng::derived(base_seed, 0x626174ULL + i).next_u64();
        std::vector<Chromosome> initial =
            sample_population(task.X, task.y, evo.population_size, 0.0, nullptr, table, shape,
                              linker, dummy_sampler, evo.seed);
        RunLog log = evolve(evo, table, task.X, task.y, std::move(initial));
        log.task = task.name;
        logs[i] = std::move(log);
    });
    return logs;
}

std::vector<Chromosome> cgep_init(const train::TrainingCorpus& harvest, int n_total,
                                  double proportion, const SymbolTable& table,
                                  const Vocabulary& vocab, const ChromosomeShape& shape,
                                  SymbolId linker, std::uint64_t seed) {
    if (harvest.records.empty()) {
        throw train::EmptyCorpusError("cgep_init needs a non-empty harvest");
    }
    if (proportion < 0.0 || proportion > 1.0) {
        throw std::invalid_argument("proportion must lie in [0,1]");
    }
    std::vector<std::size_t> rank(harvest.records.size());
    for (std::size_t i = 0; i < rank.size(); ++i) {
        rank[i] = i;
    }
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
        return harvest.records[a].fitness < harvest.records[b].fitness;
    });

    const int k = static_cast<int>(std::floor(proportion * n_total));
    std::vector<Chromosome> out(static_cast<std::size_t>(n_total));
    const bool same_shape = harvest.shape == shape;
    for (int i = 0; i < k; ++i) {
        const train::CorpusRecord& rec =
            harvest.records[rank[static_cast<std::size_t>(i) % rank.size()]];
        if (same_shape) {
            out[static_cast<std::size_t>(i)] = rec.chrom;
        } else {
            Rng rng = Rng::derived(seed, 0x636f65726365ULL + static_cast<std::uint64_t>(i));
            out[static_cast<std::size_t>(i)] =
                detokenize(rec.tokens, vocab, table, shape, rng).chrom;
        }
    }
    for (std::size_t i = static_cast<std::size_t>(k); i < out.size(); ++i) {
        Rng rng = Rng::derived(seed, i);
        out[i] = random_chromosome(table, shape.head_length, shape.gene_count, linker, rng);
    }
    Rng shuffle_rng = Rng::derived(seed, 0x73687566666cULL);
    shuffle_rng.shuffle(out);
    return out;
}

Mode mode_from_string(const std::string& s) {
    if (s == "gep") {
        return Mode::Gep;
    }
    if (s == "igep") {
        return Mode::Igep;
    }
    if (s == "cgep") {
        return Mode::Cgep;
    }
    throw std::invalid_argument(fmt::format("unknown mode '{}'", s));
}

std::string to_string(Mode m) {
    switch (m) {
        case Mode::Gep: return "gep";
        case Mode::Igep: return "igep";
        case Mode::Cgep: return "cgep";
    }
    return "?";
}

double median(std::vector<double> values) {
    if (values.empty()) {
        throw std::invalid_argument("median of an empty set");
    }
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) {
        return values[n / 2];
    }
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double sign_test_p(int wins, int losses) {
    const int n = wins + losses;
    if (n == 0) {
        return 1.0;
    }
    double p = 0.0;
    for (int k = wins; k <= n; ++k) {
        double logc = 0.0;
        for (int j = 0; j < k; ++j) {
            logc += std::log(static_cast<double>(n - j)) - std::log(static_cast<double>(j + 1));
        }
        p += std::exp(logc - n * std::log(2.0));
    }
    return std::min(1.0, p);
}

ReportBundle run_experiment(const ExperimentSpec& spec, const DatasetHandle& data,
                            const SymbolTable& table, const ModeContext& ctx) {
    spec.evo.validate();
    if (spec.trials < 1) {
        throw std::invalid_argument("trials must be >= 1");
    }
    if (spec.mode == Mode::Igep && ctx.checkpoint == nullptr) {
        throw std::invalid_argument("igep mode needs a checkpoint");
    }
    if (spec.mode == Mode::Cgep && ctx.harvest == nullptr) {
        throw std::invalid_argument("cgep mode needs a harvest corpus");
    }

    const ChromosomeShape shape{spec.evo.head_length, spec.evo.gene_count};
    const SymbolId linker = table.default_linker();

    LmHandle model;
    Vocabulary cgep_vocab;
    if (spec.mode == Mode::Igep) {
        ctx.checkpoint->vocab.relink(table);
        model.enc_cfg = &ctx.checkpoint->enc_cfg;
        model.enc = &ctx.checkpoint->enc;
        model.stats = &ctx.checkpoint->stats;
        model.dec_cfg = &ctx.checkpoint->dec_cfg;
        model.dec = &ctx.checkpoint->dec;
        model.vocab = &ctx.checkpoint->vocab;
    } else if (spec.mode == Mode::Cgep) {
        cgep_vocab = ctx.harvest->vocab;
        cgep_vocab.relink(table);
    }

    ReportBundle bundle;
    bundle.trial_logs.resize(static_cast<std::size_t>(spec.trials));
    parallel_for(static_cast<std::size_t>(spec.trials), default_thread_count(), [&](std::size_t t) {
        const std::uint64_t seed_t = spec.base_seed ^ static_cast<std::uint64_t>(t);
        EvolutionConfig evo = spec.evo;
        evo.seed = seed_t;
        std::vector<Chromosome> initial;
        switch (spec.mode) {
            case Mode::Gep:
                initial = sample_population(data.X, data.y, evo.population_size, 0.0, nullptr,
                                            table, shape, linker, spec.sampler, seed_t);
                break;
            case Mode::Igep:
                initial = sample_population(data.X, data.y, evo.population_size, spec.proportion,
                                            &model, table, shape, linker, spec.sampler, seed_t);
                break;
            case Mode::Cgep:
                initial = cgep_init(*ctx.harvest, evo.population_size, spec.proportion, table,
                                    cgep_vocab, shape, linker, seed_t);
                break;
        }
        RunLog log = evolve(evo, table, data.X, data.y, std::move(initial));
        log.task = data.name;
        bundle.trial_logs[t] = std::move(log);
    });

    const std::size_t n_gens = bundle.trial_logs.front().records.size();
    for (std::size_t g = 0; g < n_gens; ++g) {
        std::vector<double> mins;
        mins.reserve(bundle.trial_logs.size());
        for (const RunLog& log : bundle.trial_logs) {
            mins.push_back(log.records[g].min_fitness);
        }
        AggregateRow row;
        row.generation = static_cast<int>(g);
        row.min = *std::min_element(mins.begin(), mins.end());
        double sum = 0.0;
        for (double v : mins) {
            sum += v;
        }
        row.mean = sum / static_cast<double>(mins.size());
        row.median = median(mins);
        double var = 0.0;
        for (double v : mins) {
            var += (v - row.mean) * (v - row.mean);
        }
        row.std = mins.size() > 1 ? std::sqrt(var / static_cast<double>(mins.size() - 1)) : 0.0;
        bundle.aggregate.push_back(row);
    }

    std::vector<double> initial_best;
    std::vector<double> final_min;
    for (const RunLog& log : bundle.trial_logs) {
        initial_best.push_back(log.records.front().min_fitness);
        final_min.push_back(log.records.back().min_fitness);
    }
    auto stats_block = [](const std::vector<double>& v) {
        nlohmann::ordered_json j;
        j["values"] = v;
        j["median"] = median(v);
        double sum = 0.0;
        for (double x : v) {
            sum += x;
        }
        j["mean"] = sum / static_cast<double>(v.size());
        return j;
    };
    bundle.summary["schema"] = 1;
    bundle.summary["experiment"] = spec.name;
    bundle.summary["mode"] = to_string(spec.mode);
    bundle.summary["proportion"] = spec.proportion;
    bundle.summary["trials"] = spec.trials;
    bundle.summary["base_seed"] = spec.base_seed;
    bundle.summary["generations"] = spec.evo.generations;
    bundle.summary["dataset"] = data.name;
    bundle.summary["initial_best"] = stats_block(initial_best);
    bundle.summary["final_min"] = stats_block(final_min);
    return bundle;
}

void write_aggregate_csv(const std::vector<AggregateRow>& rows, std::ostream& out) {
    out << "generation,min,mean,median,std\n";
    for (const AggregateRow& r : rows) {
        fmt::print(out, "{},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.generation, r.min, r.mean,
                   r.median, r.std);
    }
}

}  // namespace gep::harness
