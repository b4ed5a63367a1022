#include <catch2/catch_amalgamated.hpp>

#include <factlab/vocab.hpp>

using namespace factlab;

TEST_CASE("prompt tokens pair with relations in layout order") {
    const Vocabulary v(2, 2, 4);
    CHECK(v.total() == 10);
    CHECK(v.prompt_of(2) == 8);
    CHECK(v.prompt_of(3) == 9);

    const Vocabulary tiny(1, 1, 1);
    CHECK(tiny.total() == 4);
    CHECK(tiny.prompt_of(1) == 3);
}

TEST_CASE("kind_of classifies the index layout") {
    const Vocabulary v(2, 2, 4);
    CHECK(v.kind_of(0) == TokenKind::subject);
    CHECK(v.kind_of(5) == TokenKind::answer);
    CHECK(v.kind_of(9) == TokenKind::prompt);
}

TEST_CASE("the four ranges partition the token space") {
    for (const Vocabulary v : {Vocabulary(2, 2, 4), Vocabulary(1, 1, 1), Vocabulary(7, 3, 9)}) {
        int counts[4] = {0, 0, 0, 0};
        for (Token t = 0; t < v.total(); ++t) ++counts[static_cast<int>(v.kind_of(t))];
        CHECK(counts[0] == v.n_subjects());
        CHECK(counts[1] == v.n_relations());
        CHECK(counts[2] == v.n_answers());
        CHECK(counts[3] == v.n_relations());

        // prompt_of is an order-preserving bijection onto the prompt range
        Token expected = static_cast<Token>(v.prompts_begin());
        for (int k = 0; k < v.n_relations(); ++k) {
            const Token p = v.prompt_of(v.relation_token(k));
            CHECK(p == expected++);
            CHECK(v.kind_of(p) == TokenKind::prompt);
            CHECK(v.relation_of_prompt(p) == v.relation_token(k));
        }
    }
}

TEST_CASE("construction and range errors") {
    CHECK_THROWS_AS(Vocabulary(0, 1, 1), std::invalid_argument);
    CHECK_THROWS_AS(Vocabulary(1, 2, 3), std::invalid_argument);  // divisibility
    const Vocabulary v(2, 2, 4);
    CHECK_THROWS_AS(v.kind_of(-1), std::out_of_range);
    CHECK_THROWS_AS(v.kind_of(10), std::out_of_range);
    CHECK_THROWS_AS(v.prompt_of(0), std::domain_error);  // subject, not relation
    CHECK_THROWS_AS(v.prompt_of(42), std::out_of_range);
}
