// geptl: gene expression programming with language-model seeded populations.
//
// Subcommands: evolve, battery, harvest, train, seed-run, compare, report.
// Every stochastic subcommand requires --seed. Exit codes: 0 success,
// 1 usage error, 2 runtime failure.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <nlohmann/json.hpp>

#include "gep/harness.hpp"
#include "gep/parallel.hpp"
#include "gep/sampler.hpp"
#include "gep/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace gep;

namespace {

struct CommonOptions {
    std::vector<std::string> functions = {"+", "-", "*", "/", "sqr", "sqrt"};
    std::vector<double> constants = {0.1, 0.5, -0.1, -0.5, 2.0};
    EvolutionConfig evo;
    SamplerConfig sampler;
    train::TrainingConfig training;
    nn::EncoderConfig enc;
    nn::DecoderConfig dec;
};

void add_evolution_options(CLI::App* cmd, CommonOptions& opt) {
    cmd->add_option("--functions", opt.functions, "Function set")->delimiter(',');
    cmd->add_option("--population", opt.evo.population_size, "Population size");
    cmd->add_option("--generations", opt.evo.generations, "Generations");
    cmd->add_option("--head-length", opt.evo.head_length, "Gene head length");
    cmd->add_option("--genes", opt.evo.gene_count, "Genes per chromosome");
    cmd->add_option("--mutation", opt.evo.mutation_prob, "Per-position mutation probability");
    cmd->add_option("--cx-one-point", opt.evo.one_point_cx_prob, "One-point crossover probability");
    cmd->add_option("--cx-two-point", opt.evo.two_point_cx_prob, "Two-point crossover probability");
    cmd->add_option("--reproduction", opt.evo.reproduction_rate, "Elitist copy fraction");
    cmd->add_option("--tournament", opt.evo.tournament_size, "Tournament size");
}

void add_sampler_options(CLI::App* cmd, CommonOptions& opt) {
    cmd->add_option("--top-k", opt.sampler.top_k, "Top-k cutoff");
    cmd->add_option("--top-p", opt.sampler.top_p, "Nucleus cutoff");
    cmd->add_option("--temperature", opt.sampler.temperature, "Softmax temperature");
    cmd->add_option("--ban", opt.sampler.banned_tokens, "Function token ids to hide")
        ->delimiter(',');
}

void add_training_options(CLI::App* cmd, CommonOptions& opt) {
    cmd->add_option("--epochs", opt.training.epochs, "Training epochs");
    cmd->add_option("--batch", opt.training.batch_size, "Mini-batch size");
    cmd->add_option("--lr", opt.training.peak_lr, "Peak learning rate");
    cmd->add_option("--warmup-frac", opt.training.warmup_frac, "Warmup fraction of steps");
    cmd->add_option("--final-lr-frac", opt.training.final_lr_frac, "Final LR as a peak fraction");
    cmd->add_option("--weight-decay", opt.training.weight_decay, "Decoupled weight decay");
    cmd->add_option("--d-emb", opt.dec.d_emb, "Embedding dimension");
    cmd->add_option("--heads", opt.dec.n_heads, "Attention heads");
    cmd->add_option("--blocks", opt.dec.n_blocks, "Transformer blocks");
    cmd->add_option("--window", opt.dec.window, "Context window");
    cmd->add_option("--enc-m", opt.enc.m, "Encoder feature columns (incl. target)");
    cmd->add_option("--enc-rows", opt.enc.n_max, "Encoder max data rows");
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    return fmt::format("{:04d}{:02d}{:02d}-{:02d}{:02d}{:02d}", tm.tm_year + 1900, tm.tm_mon + 1,
                       tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec);
}

fs::path run_directory(const std::string& experiment, std::uint64_t seed, std::string out) {
    fs::path dir = out.empty() ? fs::path(fmt::format("{}-{}-{}", experiment, timestamp(), seed))
                               : fs::path(out);
    fs::create_directories(dir);
    return dir;
}

void write_file(const fs::path& path, const std::string& contents) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
    }
    out << contents;
}

void write_dataset_csv(const fs::path& path, const harness::GeneratedTask& task) {
    std::ostringstream out;
    for (std::size_t c = 0; c < task.X.cols; ++c) {
        fmt::print(out, "x{},", c + 1);
    }
    out << "y\n";
    for (std::size_t r = 0; r < task.X.rows; ++r) {
        for (std::size_t c = 0; c < task.X.cols; ++c) {
            fmt::print(out, "{:.17g},", task.X.at(r, c));
        }
        fmt::print(out, "{:.17g}\n", task.y[r]);
    }
    write_file(path, out.str());
}

harness::DatasetHandle load_dataset(const std::string& data_path, const std::string& target,
                                    const std::string& unit_map) {
    harness::DatasetHandle d = harness::load_csv(data_path, target);
    if (d.dropped_rows > 0) {
        fmt::print(stderr, "warning: dropped {} rows with missing or non-finite cells\n",
                   d.dropped_rows);
    }
    if (!unit_map.empty()) {
        d = harness::apply_unit_mapping(d, unit_map);
    }
    return d;
}

SymbolTable make_table(const CommonOptions& opt, std::size_t n_features) {
    return SymbolTable::make(opt.functions, static_cast<int>(n_features), opt.constants);
}

void write_report_bundle(const fs::path& dir, const std::string& mode,
                         const harness::ReportBundle& bundle, const SymbolTable& table) {
    for (std::size_t t = 0; t < bundle.trial_logs.size(); ++t) {
        std::ostringstream csv;
        write_runlog_csv(bundle.trial_logs[t], table, csv);
        write_file(dir / fmt::format("{}_trial{:03d}.csv", mode, t), csv.str());
    }
    std::ostringstream agg;
    harness::write_aggregate_csv(bundle.aggregate, agg);
    write_file(dir / fmt::format("{}_aggregate.csv", mode), agg.str());
    write_file(dir / fmt::format("{}_summary.json", mode), bundle.summary.dump(2) + "\n");
}

// ---- corpus directory I/O ---------------------------------------------------

void save_corpus(const fs::path& dir, const train::TrainingCorpus& corpus,
                 const SymbolTable& table, const CommonOptions& opt, int n_features) {
    fs::create_directories(dir / "tasks");
    {
        std::ostringstream out;
        fmt::print(out, "# head_length={} gene_count={} linker={}\n", corpus.shape.head_length,
                   corpus.shape.gene_count, table.at(corpus.linker).name);
        for (const train::CorpusRecord& r : corpus.records) {
            fmt::print(out, "{}\t{}\t{:.17g}\n", r.task, chromosome_tokens(r.chrom, table),
                       r.fitness);
        }
        write_file(dir / "corpus.tsv", out.str());
    }
    {
        std::ostringstream out;
        corpus.vocab.save(out);
        write_file(dir / "vocab.txt", out.str());
    }
    for (const auto& [name, task] : corpus.tasks) {
        harness::GeneratedTask g;
        g.X = task.X;
        g.y = task.y;
        write_dataset_csv(dir / "tasks" / (name + ".csv"), g);
    }
    json meta;
    meta["functions"] = opt.functions;
    meta["constants"] = opt.constants;
    meta["n_features"] = n_features;
    meta["head_length"] = corpus.shape.head_length;
    meta["gene_count"] = corpus.shape.gene_count;
    meta["linker"] = table.at(corpus.linker).name;
    meta["records"] = corpus.records.size();
    write_file(dir / "meta.json", meta.dump(2) + "\n");
}

struct LoadedCorpus {
    train::TrainingCorpus corpus;
    SymbolTable table;
    CommonOptions opt;  // function set and constants from meta
    int n_features = 0;
};

LoadedCorpus load_corpus(const fs::path& dir, CommonOptions base) {
    std::ifstream meta_in(dir / "meta.json");
    if (!meta_in) {
        throw std::runtime_error(fmt::format("'{}' is not a corpus directory", dir.string()));
    }
    const json meta = json::parse(meta_in);
    base.functions = meta.at("functions").get<std::vector<std::string>>();
    base.constants = meta.at("constants").get<std::vector<double>>();
    const int n_features = meta.at("n_features").get<int>();

    LoadedCorpus loaded{train::TrainingCorpus{}, SymbolTable::make(base.functions, n_features,
                                                                   base.constants),
                        base, n_features};
    train::TrainingCorpus& corpus = loaded.corpus;
    const SymbolTable& table = loaded.table;

    corpus.shape.head_length = meta.at("head_length").get<int>();
    corpus.shape.gene_count = meta.at("gene_count").get<int>();
    corpus.linker = table.find(meta.at("linker").get<std::string>()).value();
    {
        std::ifstream vin(dir / "vocab.txt");
        corpus.vocab = Vocabulary::load(vin);
        corpus.vocab.relink(table);
    }
    for (const auto& entry : fs::directory_iterator(dir / "tasks")) {
        harness::DatasetHandle d = harness::load_csv(entry.path().string(), "y");
        train::TaskData task;
        task.X = std::move(d.X);
        task.y = std::move(d.y);
        corpus.tasks.emplace(entry.path().stem().string(), std::move(task));
    }

    std::ifstream in(dir / "corpus.tsv");
    std::string line;
    const int gene_len = corpus.shape.head_length +
                         tail_length(corpus.shape.head_length, table.max_arity());
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') {
            continue;
        }
        std::istringstream ls(line);
        std::string task_id, tokens, fitness_str;
        std::getline(ls, task_id, '\t');
        std::getline(ls, tokens, '\t');
        std::getline(ls, fitness_str, '\t');
        Chromosome c;
        c.linker = corpus.linker;
        std::istringstream ts(tokens);
        std::string name;
        std::vector<SymbolId> ids;
        while (ts >> name) {
            ids.push_back(table.find(name).value());
        }
        for (int g = 0; g < corpus.shape.gene_count; ++g) {
            Gene gene;
            const auto base_it = ids.begin() + static_cast<std::ptrdiff_t>(g) * gene_len;
            gene.head.assign(base_it, base_it + corpus.shape.head_length);
            gene.tail.assign(base_it + corpus.shape.head_length, base_it + gene_len);
            c.genes.push_back(std::move(gene));
        }
        train::CorpusRecord rec;
        rec.task = task_id;
        rec.fitness = std::stod(fitness_str);
        rec.tokens = tokenize(c, table, corpus.vocab, base.dec.window);
        rec.chrom = std::move(c);
        corpus.records.push_back(std::move(rec));
    }
    if (corpus.records.empty()) {
        throw train::EmptyCorpusError("corpus.tsv holds no records");
    }
    return loaded;
}

// ---- subcommand bodies -------------------------------------------------------

int cmd_evolve(const CommonOptions& opt, const std::string& data_path, const std::string& target,
               const std::string& unit_map, std::uint64_t seed, std::string out) {
    harness::DatasetHandle data = load_dataset(data_path, target, unit_map);
    SymbolTable table = make_table(opt, data.X.cols);
    EvolutionConfig evo = opt.evo;
    evo.seed = seed;
    const ChromosomeShape shape{evo.head_length, evo.gene_count};
    std::vector<Chromosome> initial =
        sample_population(data.X, data.y, evo.population_size, 0.0, nullptr, table, shape,
                          table.default_linker(), opt.sampler, seed);
    RunLog log = evolve(evo, table, data.X, data.y, std::move(initial));

    const fs::path dir = run_directory("evolve", seed, std::move(out));
    std::ostringstream csv, pool;
    write_runlog_csv(log, table, csv);
    write_harvest_pool(log, table, pool);
    write_file(dir / "runlog.csv", csv.str());
    write_file(dir / "harvest.txt", pool.str());
    fmt::print("final min fitness {:.6g}; outputs in {}\n", log.records.back().min_fitness,
               dir.string());
    return 0;
}

int cmd_battery(CommonOptions opt, const harness::SourceFamilySpec& family, int runs_per_task,
                std::uint64_t seed, std::string out) {
    harness::SourceFamilySpec spec = family;
    spec.seed = seed;
    const auto tasks = harness::generate_family(spec);
    SymbolTable table = make_table(opt, static_cast<std::size_t>(spec.feature_dim));
    const auto logs = harness::run_source_battery(tasks, table, opt.evo, runs_per_task, seed);

    const fs::path dir = run_directory("battery", seed, std::move(out));
    fs::create_directories(dir / "tasks");
    fs::create_directories(dir / "runs");
    json family_meta;
    family_meta["generator"] = spec.generator;
    family_meta["num_tasks"] = spec.num_tasks;
    family_meta["rows_per_task"] = spec.rows_per_task;
    family_meta["feature_dim"] = spec.feature_dim;
    family_meta["noise_level"] = spec.noise_level;
    family_meta["seed"] = spec.seed;
    family_meta["runs_per_task"] = runs_per_task;
    family_meta["functions"] = opt.functions;
    family_meta["constants"] = opt.constants;
    json formulas = json::object();
    for (const auto& task : tasks) {
        formulas[task.name] = task.formula;
        write_dataset_csv(dir / "tasks" / (task.name + ".csv"), task);
    }
    family_meta["formulas"] = formulas;
    write_file(dir / "family.json", family_meta.dump(2) + "\n");

    for (std::size_t i = 0; i < logs.size(); ++i) {
        const std::size_t run_idx = i % static_cast<std::size_t>(runs_per_task);
        std::ostringstream csv, pool;
        write_runlog_csv(logs[i], table, csv);
        write_harvest_pool(logs[i], table, pool);
        write_file(dir / "runs" / fmt::format("{}_run{}.runlog.csv", logs[i].task, run_idx),
                   csv.str());
        write_file(dir / "runs" / fmt::format("{}_run{}.harvest.txt", logs[i].task, run_idx),
                   pool.str());
    }
    fmt::print("{} tasks x {} runs written to {}\n", tasks.size(), runs_per_task, dir.string());
    return 0;
}

int cmd_harvest(CommonOptions opt, const std::string& battery_dir, double margin, bool no_dedup,
                bool keep_nested, std::string out) {
    const fs::path bdir(battery_dir);
    std::ifstream meta_in(bdir / "family.json");
    if (!meta_in) {
        throw std::runtime_error(fmt::format("'{}' is not a battery directory", battery_dir));
    }
    const json meta = json::parse(meta_in);
    opt.functions = meta.at("functions").get<std::vector<std::string>>();
    opt.constants = meta.at("constants").get<std::vector<double>>();
    const int n_features = meta.at("feature_dim").get<int>();
    const int runs_per_task = meta.at("runs_per_task").get<int>();
    SymbolTable table = make_table(opt, static_cast<std::size_t>(n_features));
    Vocabulary vocab = Vocabulary::build(table);

    std::map<std::string, train::TaskData> tasks;
    for (const auto& entry : fs::directory_iterator(bdir / "tasks")) {
        harness::DatasetHandle d = harness::load_csv(entry.path().string(), "y");
        tasks.emplace(entry.path().stem().string(),
                      train::TaskData{std::move(d.X), std::move(d.y)});
    }

    std::vector<RunLog> runs;
    for (const auto& [name, task] : tasks) {
        for (int r = 0; r < runs_per_task; ++r) {
            const fs::path pool_path = bdir / "runs" / fmt::format("{}_run{}.harvest.txt", name, r);
            std::ifstream pin(pool_path);
            if (!pin) {
                throw std::runtime_error(fmt::format("missing harvest pool '{}'",
                                                     pool_path.string()));
            }
            HarvestPool pool = read_harvest_pool(pin, table);
            RunLog log;
            log.task = name;
            log.harvest = std::move(pool.entries);
            runs.push_back(std::move(log));
        }
    }

    train::TrainingCorpus corpus =
        train::harvest(runs, tasks, table, vocab, opt.dec.window, margin, !no_dedup);
    const std::size_t before = corpus.records.size();
    if (!keep_nested) {
        corpus = train::filter_nested(std::move(corpus), table);
    }
    const fs::path dir = run_directory("corpus", 0, std::move(out));
    save_corpus(dir, corpus, table, opt, n_features);
    fmt::print("kept {} records ({} before the nested-expression filter) in {}\n",
               corpus.records.size(), before, dir.string());
    return 0;
}

int cmd_train(CommonOptions opt, const std::string& corpus_dir, std::uint64_t seed,
              const std::string& out) {
    LoadedCorpus loaded = load_corpus(corpus_dir, opt);
    opt = loaded.opt;
    opt.training.seed = seed;
    opt.dec.vocab_size = loaded.corpus.vocab.size();

    const auto t0 = std::chrono::steady_clock::now();
    train::TrainResult result = train::train(loaded.corpus, opt.enc, opt.dec, opt.training);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (result.aborted_non_finite) {
        fmt::print(stderr, "training aborted on a non-finite loss; last good state saved\n");
    }
    train::save_checkpoint(result.checkpoint, out);
    fmt::print("trained {} steps on {} records, final loss {:.4f}\n", result.losses.size(),
               loaded.corpus.records.size(), result.checkpoint.final_loss);
    fmt::print(stderr, "wall_clock_seconds={:.1f}\n", secs);
    return result.aborted_non_finite ? 2 : 0;
}

int cmd_seed_run(const CommonOptions& opt, const std::string& data_path, const std::string& target,
                 const std::string& unit_map, const std::string& mode_str, double proportion,
                 const std::string& checkpoint_path, const std::string& harvest_dir,
                 std::uint64_t seed, std::string out) {
    harness::DatasetHandle data = load_dataset(data_path, target, unit_map);
    SymbolTable table = make_table(opt, data.X.cols);

    harness::ExperimentSpec spec;
    spec.mode = harness::mode_from_string(mode_str);
    spec.evo = opt.evo;
    spec.sampler = opt.sampler;
    spec.proportion = proportion;
    spec.trials = 1;
    spec.base_seed = seed;
    spec.name = "seed-run";

    harness::ModeContext ctx;
    train::Checkpoint ckpt;
    std::optional<LoadedCorpus> loaded;
    if (spec.mode == harness::Mode::Igep) {
        ckpt = train::load_checkpoint(checkpoint_path);
        ctx.checkpoint = &ckpt;
    } else if (spec.mode == harness::Mode::Cgep) {
        loaded = load_corpus(harvest_dir, opt);
        ctx.harvest = &loaded->corpus;
    }

    harness::ReportBundle bundle = harness::run_experiment(spec, data, table, ctx);
    const fs::path dir = run_directory("seed-run", seed, std::move(out));
    write_report_bundle(dir, mode_str, bundle, table);
    fmt::print("initial best {:.6g}, final min {:.6g}; outputs in {}\n",
               bundle.trial_logs[0].records.front().min_fitness,
               bundle.trial_logs[0].records.back().min_fitness, dir.string());
    return 0;
}

int cmd_compare(const CommonOptions& opt, const std::string& data_path, const std::string& target,
                const std::string& unit_map, const std::vector<std::string>& modes,
                double proportion, int trials, const std::string& checkpoint_path,
                const std::string& harvest_dir, std::uint64_t seed, std::string out) {
    harness::DatasetHandle data = load_dataset(data_path, target, unit_map);
    SymbolTable table = make_table(opt, data.X.cols);

    train::Checkpoint ckpt;
    std::optional<LoadedCorpus> loaded;
    bool have_ckpt = false;

    const fs::path dir = run_directory("compare", seed, std::move(out));
    json combined;
    combined["schema"] = 1;
    combined["dataset"] = data.name;
    combined["proportion"] = proportion;
    combined["trials"] = trials;
    combined["base_seed"] = seed;
    json per_mode = json::object();

    for (const std::string& mode_str : modes) {
        harness::ExperimentSpec spec;
        spec.mode = harness::mode_from_string(mode_str);
        spec.evo = opt.evo;
        spec.sampler = opt.sampler;
        spec.proportion = spec.mode == harness::Mode::Gep ? 0.0 : proportion;
        spec.trials = trials;
        spec.base_seed = seed;
        spec.name = fmt::format("compare-{}", mode_str);

        harness::ModeContext ctx;
        if (spec.mode == harness::Mode::Igep) {
            if (!have_ckpt) {
                ckpt = train::load_checkpoint(checkpoint_path);
                have_ckpt = true;
            }
            ctx.checkpoint = &ckpt;
        } else if (spec.mode == harness::Mode::Cgep) {
            if (!loaded) {
                loaded = load_corpus(harvest_dir, opt);
            }
            ctx.harvest = &loaded->corpus;
        }
        harness::ReportBundle bundle = harness::run_experiment(spec, data, table, ctx);
        write_report_bundle(dir, mode_str, bundle, table);
        per_mode[mode_str] = bundle.summary;
        fmt::print("{}: median initial best {:.6g}, median final min {:.6g}\n", mode_str,
                   bundle.summary.at("initial_best").at("median").get<double>(),
                   bundle.summary.at("final_min").at("median").get<double>());
    }
    combined["modes"] = per_mode;
    write_file(dir / "summary.json", combined.dump(2) + "\n");
    fmt::print("comparison written to {}\n", dir.string());
    return 0;
}

int cmd_report(const std::string& runs_dir, std::string out) {
    // rebuild the aggregate from per-trial run logs (schema: trial CSVs)
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(runs_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.find("_trial") != std::string::npos && entry.path().extension() == ".csv") {
            files.push_back(entry.path());
        }
    }
    if (files.empty()) {
        throw std::runtime_error(fmt::format("no *_trial*.csv files under '{}'", runs_dir));
    }
    std::sort(files.begin(), files.end());

    std::vector<std::vector<double>> mins;  // [trial][generation]
    for (const fs::path& f : files) {
        std::ifstream in(f);
        std::string line;
        std::getline(in, line);  // header
        std::vector<double> col;
        while (std::getline(in, line)) {
            const std::size_t c1 = line.find(',');
            const std::size_t c2 = line.find(',', c1 + 1);
            col.push_back(std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
        }
        mins.push_back(std::move(col));
    }
    const std::size_t n_gens = mins.front().size();
    for (const auto& m : mins) {
        if (m.size() != n_gens) {
            throw std::runtime_error("trial logs disagree on the generation count");
        }
    }
    std::vector<harness::AggregateRow> rows;
    for (std::size_t g = 0; g < n_gens; ++g) {
        std::vector<double> v;
        for (const auto& m : mins) {
            v.push_back(m[g]);
        }
        harness::AggregateRow row;
        row.generation = static_cast<int>(g);
        row.min = *std::min_element(v.begin(), v.end());
        double sum = 0.0;
        for (double x : v) {
            sum += x;
        }
        row.mean = sum / static_cast<double>(v.size());
        row.median = harness::median(v);
        double var = 0.0;
        for (double x : v) {
            var += (x - row.mean) * (x - row.mean);
        }
        row.std = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
        rows.push_back(row);
    }
    const fs::path dir = out.empty() ? fs::path(runs_dir) : fs::path(out);
    fs::create_directories(dir);
    std::ostringstream agg;
    harness::write_aggregate_csv(rows, agg);
    write_file(dir / "report_aggregate.csv", agg.str());
    fmt::print("aggregate over {} trials written to {}\n", files.size(),
               (dir / "report_aggregate.csv").string());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gene expression programming with transfer-learned start populations"};
    app.require_subcommand(1);
    auto with_config = [](CLI::App* cmd) {
        cmd->set_config("--config", "", "Key-value config file (ini format; flags override)");
    };

    CommonOptions opt;
    std::string data_path, target, unit_map, out, mode_str, checkpoint_path, harvest_dir;
    std::string battery_dir, corpus_dir, runs_dir;
    std::vector<std::string> modes = {"gep", "igep"};
    double proportion = 0.25;
    double margin = 0.15;
    bool no_dedup = false;
    bool keep_nested = false;
    int trials = 25;
    int runs_per_task = 5;
    std::uint64_t seed = 0;
    harness::SourceFamilySpec family;

    auto* evolve_cmd = app.add_subcommand("evolve", "One conventional GEP run on a CSV dataset");
    with_config(evolve_cmd);
    evolve_cmd->add_option("--data", data_path, "Dataset CSV")->required();
    evolve_cmd->add_option("--target", target, "Target column")->required();
    evolve_cmd->add_option("--unit-map", unit_map, "Column-to-feature-token mapping file");
    evolve_cmd->add_option("--seed", seed, "Random seed")->required();
    evolve_cmd->add_option("--out", out, "Output directory");
    add_evolution_options(evolve_cmd, opt);

    auto* battery_cmd =
        app.add_subcommand("battery", "Generate a synthetic source family and run GEP batteries");
    with_config(battery_cmd);
    battery_cmd->add_option("--tasks", family.num_tasks, "Number of source tasks");
    battery_cmd->add_option("--rows", family.rows_per_task, "Rows per task");
    battery_cmd->add_option("--features", family.feature_dim, "Feature dimension (<= 8)");
    battery_cmd->add_option("--noise", family.noise_level, "Noise level");
    battery_cmd->add_option("--x-low", family.x_low, "Feature range low end");
    battery_cmd->add_option("--x-high", family.x_high, "Feature range high end");
    battery_cmd->add_option("--runs-per-task", runs_per_task, "Independent runs per task");
    battery_cmd->add_option("--seed", seed, "Random seed")->required();
    battery_cmd->add_option("--out", out, "Output directory");
    add_evolution_options(battery_cmd, opt);

    auto* harvest_cmd = app.add_subcommand("harvest", "Filter battery pools into a training corpus");
    with_config(harvest_cmd);
    harvest_cmd->add_option("--battery", battery_dir, "Battery directory")->required();
    harvest_cmd->add_option("--margin", margin, "Keep fitness <= (1+margin)*min");
    harvest_cmd->add_flag("--no-dedup", no_dedup, "Keep duplicate token sequences");
    harvest_cmd->add_flag("--keep-nested", keep_nested, "Skip the nested-expression filter");
    harvest_cmd->add_option("--out", out, "Output directory");
    harvest_cmd->add_option("--window", opt.dec.window, "Context window for tokenized length checks");

    auto* train_cmd = app.add_subcommand("train", "Train the encoder-decoder on a corpus");
    with_config(train_cmd);
    train_cmd->add_option("--corpus", corpus_dir, "Corpus directory")->required();
    train_cmd->add_option("--seed", seed, "Random seed")->required();
    train_cmd->add_option("--out", out, "Checkpoint path")->required();
    add_training_options(train_cmd, opt);

    auto* seed_run_cmd = app.add_subcommand("seed-run", "One seeded run (gep, igep, or cgep)");
    with_config(seed_run_cmd);
    seed_run_cmd->add_option("--data", data_path, "Dataset CSV")->required();
    seed_run_cmd->add_option("--target", target, "Target column")->required();
    seed_run_cmd->add_option("--unit-map", unit_map, "Column-to-feature-token mapping file");
    seed_run_cmd->add_option("--mode", mode_str, "gep, igep, or cgep")->required();
    seed_run_cmd->add_option("--proportion", proportion, "Seeded proportion");
    seed_run_cmd->add_option("--checkpoint", checkpoint_path, "Model checkpoint (igep)");
    seed_run_cmd->add_option("--harvest", harvest_dir, "Harvest corpus directory (cgep)");
    seed_run_cmd->add_option("--seed", seed, "Random seed")->required();
    seed_run_cmd->add_option("--out", out, "Output directory");
    add_evolution_options(seed_run_cmd, opt);
    add_sampler_options(seed_run_cmd, opt);

    auto* compare_cmd = app.add_subcommand("compare", "Aggregate trials across modes");
    with_config(compare_cmd);
    compare_cmd->add_option("--data", data_path, "Dataset CSV")->required();
    compare_cmd->add_option("--target", target, "Target column")->required();
    compare_cmd->add_option("--unit-map", unit_map, "Column-to-feature-token mapping file");
    compare_cmd->add_option("--modes", modes, "Comma-separated modes")->delimiter(',');
    compare_cmd->add_option("--proportion", proportion, "Seeded proportion for igep/cgep");
    compare_cmd->add_option("--trials", trials, "Independent trials per mode");
    compare_cmd->add_option("--checkpoint", checkpoint_path, "Model checkpoint (igep)");
    compare_cmd->add_option("--harvest", harvest_dir, "Harvest corpus directory (cgep)");
    compare_cmd->add_option("--seed", seed, "Base seed")->required();
    compare_cmd->add_option("--out", out, "Output directory");
    add_evolution_options(compare_cmd, opt);
    add_sampler_options(compare_cmd, opt);

    auto* report_cmd = app.add_subcommand("report", "Rebuild aggregates from per-trial run logs");
    with_config(report_cmd);
    report_cmd->add_option("--runs", runs_dir, "Directory holding *_trial*.csv files")->required();
    report_cmd->add_option("--out", out, "Output directory (defaults to --runs)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        const auto t0 = std::chrono::steady_clock::now();
        int rc = 0;
        if (*evolve_cmd) {
            rc = cmd_evolve(opt, data_path, target, unit_map, seed, out);
        } else if (*battery_cmd) {
            rc = cmd_battery(opt, family, runs_per_task, seed, out);
        } else if (*harvest_cmd) {
            rc = cmd_harvest(opt, battery_dir, margin, no_dedup, keep_nested, out);
        } else if (*train_cmd) {
            rc = cmd_train(opt, corpus_dir, seed, out);
        } else if (*seed_run_cmd) {
            rc = cmd_seed_run(opt, data_path, target, unit_map, mode_str, proportion,
                              checkpoint_path, harvest_dir, seed, out);
        } else if (*compare_cmd) {
            rc = cmd_compare(opt, data_path, target, unit_map, modes, proportion, trials,
                             checkpoint_path, harvest_dir, seed, out);
        } else if (*report_cmd) {
            rc = cmd_report(runs_dir, out);
        }
        fmt::print(stderr, "wall_clock_seconds={:.1f}\n",
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        return rc;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    }
}
