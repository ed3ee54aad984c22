#include <doctest.h>

#include <cmath>

#include "gep/karva.hpp"
#include "helpers.hpp"

using namespace gep;
using namespace gep::test;

namespace {

Gene make_gene(const SymbolTable& t, const std::vector<std::string>& head,
               const std::vector<std::string>& tail) {
    Gene g;
    for (const std::string& s : head) {
        g.head.push_back(t.find(s).value());
    }
    for (const std::string& s : tail) {
        g.tail.push_back(t.find(s).value());
    }
    return g;
}

}  // namespace

TEST_CASE("symbol table construction and invariants") {
    SymbolTable t = standard_table(2);
    CHECK(t.max_arity() == 2);
    CHECK(t.nonterminals().size() == 6);
    CHECK(t.terminals().size() == 7);  // x1, x2 and five constants
    CHECK(t.find("sqrt").has_value());
    CHECK(t.at(t.find("sqrt").value()).arity == 1);
    CHECK(t.at(*t.find("x2")).feature_index == 1);
    CHECK(t.at(t.default_linker()).name == "+");

    CHECK_THROWS_AS(SymbolTable::make({"+"}, 0, {}), std::invalid_argument);  // no terminal
    CHECK_THROWS_AS(SymbolTable({Symbol::feature("a", 0)}), std::invalid_argument);
    CHECK_THROWS(SymbolTable({Symbol::feature("a", 0), Symbol::feature("a", 1),
                              Symbol::function("+", OpCode::Add, 2)}));
}

TEST_CASE("tail sizing") {
    CHECK(tail_length(3, 2) == 4);
    CHECK(tail_length(6, 2) == 7);
    CHECK(tail_length(5, 2) == 6);
}

TEST_CASE("validate_gene") {
    SymbolTable t = SymbolTable::make({"+", "-", "*", "/"}, 2, {});
    const auto a = std::string("x1");
    const auto b = std::string("x2");

    CHECK(validate_gene(make_gene(t, {"+", "*", a}, {b, a, b, b}), t));
    CHECK_FALSE(validate_gene(make_gene(t, {a, a, a}, {b, b, b, "+"}), t));

    // every tail slot of an all-function head must still be a terminal
    Gene g = make_gene(t, {"+", "+", "+"}, {a, a, a, a});
    CHECK(validate_gene(g, t));
    for (std::size_t i = 0; i < g.tail.size(); ++i) {
        CHECK(t.at(g.tail[i]).arity == 0);
    }

    // wrong tail size
    Gene short_tail = make_gene(t, {"+", "*", a}, {b, a, b});
    CHECK_FALSE(validate_gene(short_tail, t));

    // unknown id throws
    Gene bad = make_gene(t, {"+", "*", a}, {b, a, b, b});
    bad.head[0] = 999;
    CHECK_THROWS_AS(validate_gene(bad, t), std::out_of_range);
}

TEST_CASE("decode_gene matches the worked examples") {
    SymbolTable t = SymbolTable::make({"+", "-", "*", "/"}, 2, {});

    // "+,*,a | b,a,b,b" -> (b*a)+a
    Gene g = make_gene(t, {"+", "*", "x1"}, {"x2", "x1", "x2", "x2"});
    ExpressionTree tree = decode_gene(g, t);
    CHECK(t.at(tree.node).name == "+");
    REQUIRE(tree.children.size() == 2);
    CHECK(t.at(tree.children[0].node).name == "*");
    CHECK(t.at(tree.children[0].children[0].node).name == "x2");
    CHECK(t.at(tree.children[0].children[1].node).name == "x1");
    CHECK(t.at(tree.children[1].node).name == "x1");

    // terminal root truncates
    Gene g2 = make_gene(t, {"x1", "+", "*"}, {"x2", "x2", "x2", "x2"});
    ExpressionTree t2 = decode_gene(g2, t);
    CHECK(t.at(t2.node).name == "x1");
    CHECK(t2.children.empty());

    // "*,a,b | a,a,a,a" -> (a*b)
    Gene g3 = make_gene(t, {"*", "x1", "x2"}, {"x1", "x1", "x1", "x1"});
    ExpressionTree t3 = decode_gene(g3, t);
    CHECK(to_infix(t3, t) == "(x1*x2)");
}

TEST_CASE("decode_gene agrees with the queue oracle on random genes") {
    SymbolTable t = standard_table(3);
    Rng rng(42);
    for (int trial = 0; trial < 10000; ++trial) {
        Gene g = random_gene(t, 6, rng);
        REQUIRE(validate_gene(g, t));
        std::vector<SymbolId> flat;
        for (std::size_t i = 0; i < g.length(); ++i) {
            flat.push_back(g.at(i));
        }
        const auto oracle = queue_decode(flat, t);
        ExpressionTree tree = decode_gene(g, t);
        REQUIRE(same_structure(tree, oracle));
        // pure function: identical gene, identical tree
        CHECK(same_structure(decode_gene(g, t), oracle));
    }
}

TEST_CASE("decode_chromosome folds genes under the linker") {
    SymbolTable t = SymbolTable::make({"+", "-", "*", "/"}, 2, {});
    const SymbolId plus = t.find("+").value();

    Chromosome single;
    single.linker = plus;
    single.genes.push_back(make_gene(t, {"x1", "x1", "x1"}, {"x1", "x1", "x1", "x1"}));
    CHECK(to_infix(decode_chromosome(single, t), t) == "x1");

    Chromosome pair;
    pair.linker = plus;
    pair.genes.push_back(make_gene(t, {"x1", "x1", "x1"}, {"x1", "x1", "x1", "x1"}));
    pair.genes.push_back(make_gene(t, {"x2", "x1", "x1"}, {"x1", "x1", "x1", "x1"}));
    CHECK(to_infix(decode_chromosome(pair, t), t) == "(x1+x2)");

    Chromosome triple = pair;
    triple.genes.push_back(make_gene(t, {"x1", "x1", "x1"}, {"x1", "x1", "x1", "x1"}));
    // left fold: ((g1+g2)+g3)
    CHECK(to_infix(decode_chromosome(triple, t), t) == "((x1+x2)+x1)");

    Chromosome first;
    first.linker = plus;
    first.genes.push_back(make_gene(t, {"+", "*", "x1"}, {"x2", "x1", "x2", "x2"}));
    first.genes.push_back(make_gene(t, {"x1", "x1", "x1"}, {"x1", "x1", "x1", "x1"}));
    CHECK(to_infix(decode_chromosome(first, t), t) == "(((x2*x1)+x1)+x1)");

    Chromosome empty;
    CHECK_THROWS_AS(decode_chromosome(empty, t), std::invalid_argument);
}

TEST_CASE("evaluate") {
    SymbolTable t = standard_table(2);
    bool bad = false;

    // (b*a)+a with a=2, b=3 -> 8 (a=x1, b=x2)
    Gene g = make_gene(t, {"+", "*", "x1"}, {"x2", "x1", "x2", "x2"});
    const double row[] = {2.0, 3.0};
    CHECK(evaluate(decode_gene(g, t), t, row, bad) == doctest::Approx(8.0));
    CHECK_FALSE(bad);

    // identity
    Gene id = make_gene(t, {"x1"}, {"x1", "x1"});
    const double row5[] = {5.0, 0.0};
    CHECK(evaluate(decode_gene(id, t), t, row5, bad) == doctest::Approx(5.0));

    // protected division: x1/x2 with x2 = 0 -> 1.0, flag set
    Gene div = make_gene(t, {"/", "x1", "x2"}, {"x1", "x1", "x1", "x1"});
    bad = false;
    const double row0[] = {3.0, 0.0};
    CHECK(evaluate(decode_gene(div, t), t, row0, bad) == doctest::Approx(1.0));
    CHECK(bad);

    // protected sqrt: sqrt(-4) = 2, no flag
    Gene sq = make_gene(t, {"sqrt", "x1", "x1"}, {"x1", "x1", "x1", "x1"});
    bad = false;
    const double rneg[] = {-4.0, 0.0};
    CHECK(evaluate(decode_gene(sq, t), t, rneg, bad) == doctest::Approx(2.0));
    CHECK_FALSE(bad);

    // constants evaluate to their value
    Gene c = make_gene(t, {"+", "0.5", "2.0"}, {"x1", "x1", "x1", "x1"});
    bad = false;
    CHECK(evaluate(decode_gene(c, t), t, row, bad) == doctest::Approx(2.5));

    // overflow sets the flag
    Gene mul = make_gene(t, {"*", "x1", "x1"}, {"x1", "x1", "x1", "x1"});
    bad = false;
    const double big[] = {1e200, 0.0};
    evaluate(decode_gene(mul, t), t, big, bad);
    CHECK(bad);

    // feature index out of range
    const double small_row[] = {1.0};
    CHECK_THROWS_AS(evaluate(decode_gene(div, t), t, small_row, bad), std::out_of_range);
}

TEST_CASE("random_gene validity and determinism") {
    SymbolTable t = standard_table(2);
    Rng a(7);
    Rng b(7);
    for (int i = 0; i < 200; ++i) {
        Gene ga = random_gene(t, 6, a);
        Gene gb = random_gene(t, 6, b);
        CHECK(validate_gene(ga, t));
        CHECK(ga == gb);
    }
}

TEST_CASE("random_gene head symbols are uniform within 5 sigma") {
    SymbolTable t = standard_table(2);
    const std::size_t k = t.size();
    const int trials = 10000;
    const int h = 4;
    std::vector<std::vector<int>> counts(static_cast<std::size_t>(h),
                                         std::vector<int>(k, 0));
    Rng rng(123);
    for (int i = 0; i < trials; ++i) {
        Gene g = random_gene(t, h, rng);
        for (int p = 0; p < h; ++p) {
            counts[static_cast<std::size_t>(p)][static_cast<std::size_t>(g.head[p])] += 1;
        }
    }
    const double p = 1.0 / static_cast<double>(k);
    const double sigma = std::sqrt(trials * p * (1.0 - p));
    for (int pos = 0; pos < h; ++pos) {
        for (std::size_t s = 0; s < k; ++s) {
            const double dev = std::abs(counts[static_cast<std::size_t>(pos)][s] - trials * p);
            CHECK(dev < 5.0 * sigma);
        }
    }
}

TEST_CASE("karva_parent") {
    // arities for "+ * a b a b b": children of 0 are {1,2}, of 1 are {3,4}
    std::vector<int> ar = {2, 2, 0, 0, 0, 0, 0};
    CHECK_FALSE(karva_parent(ar, 0).has_value());
    CHECK(karva_parent(ar, 1).value() == 0);
    CHECK(karva_parent(ar, 2).value() == 0);
    CHECK(karva_parent(ar, 3).value() == 1);
    CHECK(karva_parent(ar, 4).value() == 1);
    CHECK_FALSE(karva_parent(ar, 5).has_value());  // unexpressed
    CHECK_FALSE(karva_parent(ar, 6).has_value());

    // terminal root: nothing else is expressed
    std::vector<int> term = {0, 2, 0};
    CHECK_FALSE(karva_parent(term, 1).has_value());
    CHECK_FALSE(karva_parent(term, 2).has_value());

    // partial prefix during sampling: parent known from the arities seen so far
    std::vector<int> prefix = {1};  // sqrt at root
    CHECK(karva_parent(prefix, 1).value() == 0);
}

TEST_CASE("has_nested_unary") {
    SymbolTable t = standard_table(1);
    Gene nested = Gene{{*t.find("sqrt"), *t.find("sqrt"), *t.find("x1")},
                       {*t.find("x1"), *t.find("x1"), *t.find("x1"), *t.find("x1")}};
    CHECK(has_nested_unary(decode_gene(nested, t), t));

    Gene mixed = Gene{{*t.find("sqr"), *t.find("sqrt"), *t.find("x1")},
                      {*t.find("x1"), *t.find("x1"), *t.find("x1"), *t.find("x1")}};
    CHECK_FALSE(has_nested_unary(decode_gene(mixed, t), t));  // sqr(sqrt(.)) is allowed

    Chromosome apart;
    apart.linker = t.default_linker();
    apart.genes.push_back(Gene{{*t.find("sqrt"), *t.find("x1"), *t.find("x1")},
                               {*t.find("x1"), *t.find("x1"), *t.find("x1"), *t.find("x1")}});
    apart.genes.push_back(apart.genes.front());
    CHECK_FALSE(has_nested_unary(decode_chromosome(apart, t), t));  // sqrt(.)+sqrt(.)
}

TEST_CASE("random chromosomes always decode without reading past the end") {
    SymbolTable t = standard_table(4);
    Rng rng(99);
    for (int i = 0; i < 10000; ++i) {
        Chromosome c = random_chromosome(t, 6, 3, t.default_linker(), rng);
        ExpressionTree tree = decode_chromosome(c, t);  // throws on any sizing violation
        bool bad = false;
        const double row[] = {1.0, 2.0, 3.0, 4.0};
        evaluate(tree, t, row, bad);
    }
}
