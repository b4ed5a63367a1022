#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include <factlab/knowledge.hpp>

using namespace factlab;

TEST_CASE("zipf probabilities") {
    SECTION("zero exponent is uniform") {
        const ZipfDist d(0.0, 4);
        for (std::size_t i = 0; i < 4; ++i) CHECK(d.prob(i) == Catch::Approx(0.25).margin(1e-15));
    }
    SECTION("alpha=1, n=2") {
        const ZipfDist d(1.0, 2);
        CHECK(d.prob(0) == Catch::Approx(2.0 / 3.0).margin(1e-15));
        CHECK(d.prob(1) == Catch::Approx(1.0 / 3.0).margin(1e-15));
    }
    SECTION("alpha=2, n=100 against the direct normalization sum") {
        // oracle: P(0) = 1 / sum_{k=1..100} k^-2
        double h = 0.0;
        for (int k = 1; k <= 100; ++k) h += 1.0 / (static_cast<double>(k) * static_cast<double>(k));
        const ZipfDist d(2.0, 100);
        CHECK(d.prob(0) == Catch::Approx(1.0 / h).epsilon(1e-12));
        CHECK(d.prob(0) == Catch::Approx(0.6116268177851262).epsilon(1e-12));
    }
    SECTION("inverse-cdf sampling hits the pmf boundaries") {
        const ZipfDist d(1.0, 3);
        CHECK(sample_zipf(d, 0.0) == 0);
        CHECK(sample_zipf(d, d.cdf()[0] - 1e-15) == 0);
        CHECK(sample_zipf(d, d.cdf()[0]) == 1);
        CHECK(sample_zipf(d, 0.999999999) == 2);
    }
}

TEST_CASE("build_kb pools and determinism") {
    SECTION("forced single-fact base") {
        const Vocabulary v(1, 1, 1);
        const KnowledgeBase kb = build_kb(v, 0);
        CHECK(kb.answer_of(0, 1) == 2);
        CHECK(kb.pool_begin(1) == 2);
    }
    SECTION("pools tile the answer range") {
        const Vocabulary v(4, 2, 4);
        const KnowledgeBase kb = build_kb(v, 7);
        CHECK(kb.pool_begin(v.relation_token(0)) == 6);
        CHECK(kb.pool_begin(v.relation_token(1)) == 8);
        for (int s = 0; s < 4; ++s) {
            const Token a0 = kb.answer_of(s, v.relation_token(0));
            const Token a1 = kb.answer_of(s, v.relation_token(1));
            CHECK((a0 == 6 || a0 == 7));
            CHECK((a1 == 8 || a1 == 9));
        }
    }
    SECTION("same seed, same base; different seed, different base") {
        const Vocabulary v(100, 5, 50);
        CHECK(build_kb(v, 3) == build_kb(v, 3));
        CHECK(build_kb(v, 3) != build_kb(v, 4));
    }
    SECTION("answer marginal is non-uniform at scale") {
        const Vocabulary v(100, 5, 50);
        const KnowledgeBase kb = build_kb(v, 11);
        bool all_equal = true;
        for (int k = 0; k < v.n_relations(); ++k) {
            const int first = kb.answer_count(v.answer_token(k * v.pool_size()));
            for (int j = 1; j < v.pool_size(); ++j)
                if (kb.answer_count(v.answer_token(k * v.pool_size() + j)) != first) all_equal = false;
        }
        CHECK_FALSE(all_equal);
    }
    SECTION("rejects answers outside the relation pool") {
        const Vocabulary v(1, 2, 4);
        // relation 0's pool is {3, 4}; answer 5 belongs to relation 1
        CHECK_THROWS_AS(KnowledgeBase(v, {5, 5}), std::invalid_argument);
    }
}

TEST_CASE("pretrain stream") {
    const Vocabulary v(50, 2, 4);
    const KnowledgeBase kb = build_kb(v, 1);

    SECTION("zero steps gives an empty stream") {
        CHECK(pretrain_stream(kb, 1.0, 0, 9).empty());
    }
    SECTION("every example is consistent with the ground truth") {
        for (const Example& ex : pretrain_stream(kb, 1.2, 2000, 5)) {
            CHECK(v.kind_of(ex.first) == TokenKind::subject);
            CHECK(v.kind_of(ex.second) == TokenKind::relation);
            CHECK(ex.target == kb.answer_of(ex.first, ex.second));
        }
    }
    SECTION("alpha=0 subject frequencies sit inside 3-sigma binomial bands") {
        const std::size_t n = 100000;
        const auto stream = pretrain_stream(kb, 0.0, n, 42);
        std::vector<int> counts(50, 0);
        for (const Example& ex : stream) ++counts[static_cast<std::size_t>(ex.first)];
        const double p = 1.0 / 50.0;
        const double mean = static_cast<double>(n) * p;
        const double sigma = std::sqrt(static_cast<double>(n) * p * (1.0 - p));
        for (int c : counts) CHECK(std::abs(c - mean) <= 3.0 * sigma);
    }
    SECTION("rank-frequency slope tracks the exponent") {
        const Vocabulary big(100, 2, 4);
        const KnowledgeBase bkb = build_kb(big, 2);
        const auto stream = pretrain_stream(bkb, 1.5, 10000, 17);
        std::vector<int> counts(100, 0);
        for (const Example& ex : stream) ++counts[static_cast<std::size_t>(ex.first)];
        // least-squares slope of log(count) on log(rank+1) over the top 20 ranks
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        for (int i = 0; i < 20; ++i) {
            const double x = std::log(static_cast<double>(i + 1));
            const double y = std::log(static_cast<double>(counts[static_cast<std::size_t>(i)]));
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        const double slope = (20.0 * sxy - sx * sy) / (20.0 * sxx - sx * sx);
        CHECK(slope == Catch::Approx(-1.5).margin(0.2));
    }
}

TEST_CASE("downstream datasets") {
    const Vocabulary v(100, 5, 50);
    const KnowledgeBase kb = build_kb(v, 21);

    SECTION("whole strategy partitions all facts") {
        const auto split = downstream_datasets(kb, 1.2, {SplitStrategy::whole, 1.0, 0.2}, 3);
        CHECK(split.ft.size() + split.eval.size() == kb.fact_count());
        for (const Example& ex : split.ft) CHECK(v.kind_of(ex.second) == TokenKind::prompt);
    }
    SECTION("top covers the most popular non-eval subjects") {
        const auto split = downstream_datasets(kb, 1.2, {SplitStrategy::top, 0.5, 0.2}, 3);
        CHECK(split.eval.size() == 20u * 5u);
        CHECK(split.ft.size() == 40u * 5u);
        std::set<Token> eval_subjects, ft_subjects;
        for (const Example& ex : split.eval) eval_subjects.insert(ex.first);
        for (const Example& ex : split.ft) ft_subjects.insert(ex.first);
        // subject-disjoint
        for (Token s : ft_subjects) CHECK_FALSE(eval_subjects.count(s));
        // every non-eval subject more popular than a chosen one is itself chosen
        int max_rank = -1;
        for (Token s : ft_subjects) max_rank = std::max(max_rank, split.popularity_rank[static_cast<std::size_t>(s)]);
        for (int s = 0; s < v.n_subjects(); ++s) {
            const bool held_out = eval_subjects.count(s) > 0;
            if (!held_out && split.popularity_rank[static_cast<std::size_t>(s)] < max_rank)
                CHECK(ft_subjects.count(s));
        }
    }
    SECTION("top and bottom with fraction 0.5 partition the non-eval facts") {
        const auto top = downstream_datasets(kb, 1.2, {SplitStrategy::top, 0.5, 0.2}, 3);
        const auto bottom = downstream_datasets(kb, 1.2, {SplitStrategy::bottom, 0.5, 0.2}, 3);
        CHECK(top.eval == bottom.eval);  // holdout independent of strategy
        std::set<std::pair<Token, Token>> seen;
        for (const Example& ex : top.ft) seen.insert({ex.first, ex.second});
        for (const Example& ex : bottom.ft) {
            CHECK_FALSE(seen.count({ex.first, ex.second}));
            seen.insert({ex.first, ex.second});
        }
        CHECK(seen.size() == kb.fact_count() - top.eval.size());
    }
    SECTION("eval holdout is popularity-stratified: every 5% slice keeps subjects") {
        const auto split = downstream_datasets(kb, 1.2, {SplitStrategy::top, 0.5, 0.2}, 6);
        std::vector<int> per_bin(20, 0);
        std::set<Token> eval_subjects;
        for (const Example& ex : split.eval) eval_subjects.insert(ex.first);
        for (Token s : eval_subjects)
            ++per_bin[static_cast<std::size_t>(split.popularity_rank[static_cast<std::size_t>(s)] / 5)];
        for (int c : per_bin) CHECK(c == 1);
    }
    SECTION("popularity rank is the zipf rank") {
        const auto split = downstream_datasets(kb, 1.2, {SplitStrategy::whole, 1.0, 0.2}, 3);
        for (int s = 0; s < v.n_subjects(); ++s)
            CHECK(split.popularity_rank[static_cast<std::size_t>(s)] == s);
    }
    SECTION("fraction outside (0,1] rejected") {
        CHECK_THROWS_AS(downstream_datasets(kb, 1.2, {SplitStrategy::top, 0.0, 0.2}, 3),
                        std::invalid_argument);
        CHECK_THROWS_AS(downstream_datasets(kb, 1.2, {SplitStrategy::top, 1.5, 0.2}, 3),
                        std::invalid_argument);
        CHECK_THROWS_AS(downstream_datasets(kb, 1.2, {SplitStrategy::top, 0.5, 1.0}, 3),
                        std::invalid_argument);
    }
}

TEST_CASE("dataset serialization round-trips and is deterministic") {
    const Vocabulary v(10, 2, 4);
    const KnowledgeBase kb = build_kb(v, 5);
    const auto split = downstream_datasets(kb, 1.0, {SplitStrategy::random, 0.5, 0.2}, 8);

    std::ostringstream a, b;
    write_dataset(a, v, ExampleFormat::downstream, split.ft);
    const auto again = downstream_datasets(kb, 1.0, {SplitStrategy::random, 0.5, 0.2}, 8);
    write_dataset(b, v, ExampleFormat::downstream, again.ft);
    CHECK(a.str() == b.str());  // byte-for-byte determinism

    std::istringstream in(a.str());
    const Dataset d = read_dataset(in);
    CHECK(d.vocab == v);
    CHECK(d.format == ExampleFormat::downstream);
    CHECK(d.rows == split.ft);
}
