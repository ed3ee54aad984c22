#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "gep/harness.hpp"
#include "helpers.hpp"

using namespace gep;
using namespace gep::harness;
using namespace gep::test;

namespace {

std::string write_temp(const std::string& contents, const char* tmpl) {
    std::string path = "/tmp/";
    path += tmpl;
    path += "_XXXXXX";
    std::vector<char> buf(path.begin(), path.end());
    buf.push_back('\0');
    REQUIRE(mkstemp(buf.data()) >= 0);
    path.assign(buf.data());
    std::ofstream out(path);
    out << contents;
    return path;
}

}  // namespace

TEST_CASE("load_csv") {
    SUBCASE("plain file") {
        std::string path = write_temp("a,b,y\n1,2,3\n4,5,6\n7,8,9\n", "geptl_csv");
        DatasetHandle d = load_csv(path, "y");
        CHECK(d.X.rows == 3);
        CHECK(d.X.cols == 2);
        CHECK(d.y == std::vector<double>{3, 6, 9});
        CHECK(d.feature_names == std::vector<std::string>{"a", "b"});
        CHECK(d.dropped_rows == 0);
        std::remove(path.c_str());
    }
    SUBCASE("NA rows are dropped and counted") {
        std::string path = write_temp("a,y\n1,2\nNA,3\n4,nan\n5,6\n", "geptl_na");
        DatasetHandle d = load_csv(path, "y");
        CHECK(d.X.rows == 2);
        CHECK(d.dropped_rows == 2);
        std::remove(path.c_str());
    }
    SUBCASE("missing target names the available columns") {
        std::string path = write_temp("a,b\n1,2\n", "geptl_miss");
        CHECK_THROWS_WITH_AS(load_csv(path, "zz"),
                             doctest::Contains("available: a, b"), std::runtime_error);
        std::remove(path.c_str());
    }
    SUBCASE("empty and garbage files") {
        std::string path = write_temp("", "geptl_empty");
        CHECK_THROWS(load_csv(path, "y"));
        std::remove(path.c_str());
        std::string bad = write_temp("a,y\n1,abc\n", "geptl_bad");
        CHECK_THROWS_WITH_AS(load_csv(bad, "y"), doctest::Contains("non-numeric"),
                             std::runtime_error);
        std::remove(bad.c_str());
    }
}

TEST_CASE("unit mapping permutes feature columns") {
    std::string csv = write_temp("t,p,y\n1,10,0\n2,20,0\n", "geptl_map_csv");
    std::string map = write_temp("t\tx2\np\tx1\n", "geptl_map");
    DatasetHandle d = load_csv(csv, "y");
    DatasetHandle mapped = apply_unit_mapping(d, map);
    CHECK(mapped.X.cols == 2);
    CHECK(mapped.X.at(0, 0) == 10.0);  // p lands on x1
    CHECK(mapped.X.at(0, 1) == 1.0);   // t lands on x2
    CHECK(mapped.feature_names[0] == "p");
    std::remove(csv.c_str());
    std::remove(map.c_str());
}

TEST_CASE("synthetic family generation") {
    SourceFamilySpec spec;
    spec.num_tasks = 6;
    spec.rows_per_task = 40;
    spec.feature_dim = 4;
    spec.seed = 11;

    auto tasks = generate_family(spec);
    REQUIRE(tasks.size() == 6);
    for (const GeneratedTask& t : tasks) {
        CHECK(t.X.rows == 40);
        CHECK(t.X.cols == 4);
        CHECK_FALSE(t.formula.empty());
        for (double v : t.y) {
            CHECK(std::isfinite(v));
        }
    }
    auto again = generate_family(spec);
    CHECK(again[3].y == tasks[3].y);
    CHECK(again[3].formula == tasks[3].formula);

    SourceFamilySpec wide = spec;
    wide.feature_dim = 9;
    CHECK_THROWS_AS(generate_family(wide), std::invalid_argument);
    SourceFamilySpec unknown = spec;
    unknown.generator = "bogus";
    CHECK_THROWS_AS(generate_family(unknown), std::invalid_argument);
}

TEST_CASE("source battery counts and determinism") {
    SourceFamilySpec spec;
    spec.num_tasks = 2;
    spec.rows_per_task = 25;
    spec.feature_dim = 2;
    spec.seed = 3;
    auto tasks = generate_family(spec);

    SymbolTable table = standard_table(2);
    EvolutionConfig evo;
    evo.population_size = 12;
    evo.generations = 3;
    evo.head_length = 3;
    evo.gene_count = 2;

    auto logs = run_source_battery(tasks, table, evo, 5, 99);
    CHECK(logs.size() == 10);
    CHECK(logs[0].task == "task000");
    CHECK(logs[5].task == "task001");
    for (const RunLog& log : logs) {
        CHECK(log.records.size() == 4);
    }
    auto logs2 = run_source_battery(tasks, table, evo, 5, 99);
    for (std::size_t i = 0; i < logs.size(); ++i) {
        std::ostringstream a, b;
        write_runlog_csv(logs[i], table, a);
        write_runlog_csv(logs2[i], table, b);
        CHECK(a.str() == b.str());
    }
}

TEST_CASE("cgep_init") {
    SymbolTable table = standard_table(2);
    Vocabulary vocab = Vocabulary::build(table);
    const ChromosomeShape shape{3, 2};
    Rng rng(5);

    train::TrainingCorpus corpus;
    corpus.shape = shape;
    corpus.linker = table.default_linker();
    corpus.vocab = vocab;
    auto add_record = [&](double fitness) {
        Chromosome c = random_chromosome(table, 3, 2, table.default_linker(), rng);
        corpus.records.push_back(
            train::CorpusRecord{"a", tokenize(c, table, vocab, 32), fitness, c});
    };
    add_record(3.0);
    add_record(1.0);  // the best
    add_record(2.0);

    SUBCASE("proportion 1 with one record fills with copies") {
        train::TrainingCorpus one;
        one.shape = shape;
        one.linker = corpus.linker;
        one.vocab = vocab;
        one.records.push_back(corpus.records[1]);
        auto pop = cgep_init(one, 10, 1.0, table, vocab, shape, table.default_linker(), 7);
        CHECK(pop.size() == 10);
        for (const Chromosome& c : pop) {
            CHECK(c == one.records[0].chrom);
        }
    }
    SUBCASE("proportion 0 is pure random init") {
        auto pop = cgep_init(corpus, 10, 0.0, table, vocab, shape, table.default_linker(), 7);
        CHECK(pop.size() == 10);
        for (const Chromosome& c : pop) {
            for (const Gene& g : c.genes) {
                CHECK(validate_gene(g, table));
            }
        }
    }
    SUBCASE("the top-ranked record is always included when k >= 1") {
        for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
            auto pop = cgep_init(corpus, 8, 0.25, table, vocab, shape, table.default_linker(),
                                 seed);
            int hits = 0;
            for (const Chromosome& c : pop) {
                hits += c == corpus.records[1].chrom ? 1 : 0;
            }
            CHECK(hits >= 1);
        }
    }
    SUBCASE("shape coercion repairs to the target shape") {
        auto pop = cgep_init(corpus, 6, 0.5, table, vocab, {4, 3}, table.default_linker(), 9);
        for (const Chromosome& c : pop) {
            CHECK(c.genes.size() == 3);
            CHECK(c.genes[0].head.size() == 4);
            for (const Gene& g : c.genes) {
                CHECK(validate_gene(g, table));
            }
        }
    }
    SUBCASE("empty harvest throws") {
        train::TrainingCorpus empty;
        empty.vocab = vocab;
        CHECK_THROWS_AS(cgep_init(empty, 5, 0.5, table, vocab, shape, table.default_linker(), 1),
                        train::EmptyCorpusError);
    }
}

TEST_CASE("run_experiment aggregates and determinism") {
    SymbolTable table = standard_table(2);
    SourceFamilySpec spec;
    spec.num_tasks = 1;
    spec.rows_per_task = 30;
    spec.feature_dim = 2;
    spec.seed = 21;
    auto tasks = generate_family(spec);
    DatasetHandle data;
    data.name = tasks[0].name;
    data.X = tasks[0].X;
    data.y = tasks[0].y;

    ExperimentSpec es;
    es.mode = Mode::Gep;
    es.evo.population_size = 14;
    es.evo.generations = 4;
    es.evo.head_length = 3;
    es.evo.gene_count = 2;
    es.trials = 3;
    es.base_seed = 1234;
    es.name = "unit";

    ReportBundle a = run_experiment(es, data, table, {});
    CHECK(a.trial_logs.size() == 3);
    CHECK(a.aggregate.size() == 5);  // generations + 1 rows
    for (const AggregateRow& row : a.aggregate) {
        CHECK(row.min <= row.median);
        CHECK(row.min <= row.mean);
    }
    // per-trial min fitness is non-increasing (elitism propagates to reports)
    for (const RunLog& log : a.trial_logs) {
        for (std::size_t g = 1; g < log.records.size(); ++g) {
            CHECK(log.records[g].min_fitness <= log.records[g - 1].min_fitness);
        }
    }

    ReportBundle b = run_experiment(es, data, table, {});
    std::ostringstream ca, cb;
    write_aggregate_csv(a.aggregate, ca);
    write_aggregate_csv(b.aggregate, cb);
    CHECK(ca.str() == cb.str());
    CHECK(a.summary.dump() == b.summary.dump());
    CHECK(a.summary.at("initial_best").at("values").size() == 3);

    // igep with proportion 0 must produce byte-identical output to gep
    ExperimentSpec ig = es;
    ig.mode = Mode::Igep;
    ig.proportion = 0.0;
    train::Checkpoint dummy;  // never touched at proportion 0
    dummy.enc_cfg.m = 3;
    ModeContext ctx;
    ctx.checkpoint = &dummy;
    ReportBundle c = run_experiment(ig, data, table, ctx);
    std::ostringstream cc;
    write_aggregate_csv(c.aggregate, cc);
    CHECK(cc.str() == ca.str());
}

TEST_CASE("statistics helpers") {
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
    CHECK_THROWS(median({}));

    CHECK(sign_test_p(5, 0) == doctest::Approx(1.0 / 32.0));
    CHECK(sign_test_p(0, 0) == 1.0);
    CHECK(sign_test_p(14, 6) == doctest::Approx(0.05765915).epsilon(1e-5));
    CHECK(sign_test_p(10, 10) > 0.5);
}
