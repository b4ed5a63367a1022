#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <factlab/model.hpp>
#include <factlab/rng.hpp>
#include <factlab/verify.hpp>

using namespace factlab;

namespace {

// Literal matrix-pipeline forward used as the independent oracle:
// X = [phi(first) phi(second)], att = softmax(X^T W_KQ X_last),
// probs = softmax(W_V X att). Full matvecs, no column shortcuts.
std::vector<double> oracle_forward_probs(const ModelParams& p, Token first, Token second,
                                         double* att_first_out = nullptr) {
    const std::size_t n = p.side();
    std::vector<std::vector<double>> x(n, std::vector<double>(2, 0.0));
    x[static_cast<std::size_t>(first)][0] = 1.0;
    x[static_cast<std::size_t>(second)][1] = 1.0;

    std::vector<double> kq_last(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) kq_last[i] += p.w_kq(i, k) * x[k][1];
    double scores[2] = {0.0, 0.0};
    for (int j = 0; j < 2; ++j)
        for (std::size_t i = 0; i < n; ++i) scores[j] += x[i][static_cast<std::size_t>(j)] * kq_last[i];
    const double m = std::max(scores[0], scores[1]);
    const double e0 = std::exp(scores[0] - m), e1 = std::exp(scores[1] - m);
    const double att[2] = {e0 / (e0 + e1), e1 / (e0 + e1)};
    if (att_first_out) *att_first_out = att[0];

    std::vector<double> xa(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) xa[i] = x[i][0] * att[0] + x[i][1] * att[1];
    std::vector<double> z(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) z[i] += p.w_v(i, k) * xa[k];
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    std::vector<double> probs(n, 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        probs[i] = std::exp(z[i] - zmax);
        sum += probs[i];
    }
    for (double& v : probs) v /= sum;
    return probs;
}

ModelParams random_params(std::size_t side, std::uint64_t seed, double scale = 1.0) {
    ModelParams p(side);
    Rng rng(seed);
    for (double& v : p.w_v.data()) v = scale * rng.gaussian();
    for (double& v : p.w_kq.data()) v = scale * rng.gaussian();
    return p;
}

}  // namespace

TEST_CASE("forward on zero parameters") {
    const ModelParams p(10);
    const ForwardTrace tr = forward(p, 0, 3);
    CHECK(tr.att_first == Catch::Approx(0.5).margin(1e-15));
    CHECK(tr.att_second == Catch::Approx(0.5).margin(1e-15));
    double sum = 0.0;
    for (double v : tr.probs) {
        CHECK(v == Catch::Approx(0.1).margin(1e-15));
        sum += v;
    }
    CHECK(sum == Catch::Approx(1.0).margin(1e-9));
    CHECK(decode(p, 0, 3) == 0);  // tie-break to the lowest index
}

TEST_CASE("attention saturates under a large score gap") {
    ModelParams p(6);
    p.w_kq(1, 4) = 20.0;  // score for the first token; (4,4) stays 0
    CHECK(forward(p, 1, 4).att_first >= 1.0 - 1e-8);

    ModelParams q(6);
    q.w_kq(4, 4) = 40.0;
    CHECK(attention_on_subject(q, 1, 4) <= 1e-15);
}

TEST_CASE("memorizer presoftmax margins on v=(3,2,6)") {
    const Vocabulary v(3, 2, 6);
    const KnowledgeBase kb = build_kb(v, 12);
    const ModelParams p = construct_memorizer(kb);
    for (const Example& fact : kb.all_facts(ExampleFormat::pretrain)) {
        const ForwardTrace tr = forward(p, fact.first, fact.second);
        CHECK(tr.presoftmax[static_cast<std::size_t>(fact.target)] == Catch::Approx(1.0).margin(1e-15));
        const int k = v.relation_index(fact.second);
        for (int j = 0; j < v.pool_size(); ++j) {
            const Token mate = v.answer_token(k * v.pool_size() + j);
            if (mate == fact.target) continue;
            if (kb.answer_count(mate) > 0)
                CHECK(tr.presoftmax[static_cast<std::size_t>(mate)] == Catch::Approx(0.5).margin(1e-15));
            else
                CHECK(tr.presoftmax[static_cast<std::size_t>(mate)] == Catch::Approx(0.0).margin(1e-15));
        }
        // tokens unrelated to both inputs score zero
        CHECK(tr.presoftmax[0] == Catch::Approx(0.0).margin(1e-15));
        CHECK(decode(p, fact.first, fact.second) == fact.target);
    }
}

TEST_CASE("salience reads the (a, s) entry") {
    const ModelParams zero(8);
    CHECK(salience(zero, 1, 5) == 0.0);
    ModelParams p(8);
    p.w_v(5, 1) = 3.25;
    CHECK(salience(p, 1, 5) == 3.25);
}

TEST_CASE("relevances vanish on zero params and on a zero residual") {
    const Vocabulary v(3, 2, 6);
    const Example ex{0, v.prompt_token(0), v.answer_token(1)};

    const ModelParams zero(static_cast<std::size_t>(v.total()));
    CHECK(subject_relevance(zero, ex) == 0.0);
    CHECK(relation_relevance(zero, ex) == 0.0);

    // logits pushed so far that probs is exactly one-hot on the target
    ModelParams peaked(static_cast<std::size_t>(v.total()));
    peaked.w_v(static_cast<std::size_t>(ex.target), static_cast<std::size_t>(ex.first)) = 1600.0;
    const ForwardTrace tr = forward(peaked, ex.first, ex.second);
    REQUIRE(tr.probs[static_cast<std::size_t>(ex.target)] == 1.0);
    CHECK(subject_relevance(peaked, ex) == 0.0);
    CHECK(relation_relevance(peaked, ex) == 0.0);
}

TEST_CASE("forward and relevances agree with the matrix-form oracle") {
    const Vocabulary v(3, 2, 6);
    for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        const ModelParams p = random_params(static_cast<std::size_t>(v.total()), seed);
        const Example ex{1, v.prompt_token(1), v.answer_token(4)};
        double att_first = 0.0;
        const auto oracle = oracle_forward_probs(p, ex.first, ex.second, &att_first);
        const ForwardTrace tr = forward(p, ex.first, ex.second);
        CHECK(tr.att_first == Catch::Approx(att_first).margin(1e-12));
        for (std::size_t i = 0; i < oracle.size(); ++i)
            CHECK(tr.probs[i] == Catch::Approx(oracle[i]).margin(1e-12));

        // relevance via an explicitly separate formula evaluation
        double s_rel = 0.0, p_rel = 0.0;
        for (std::size_t i = 0; i < oracle.size(); ++i) {
            const double resid = (i == static_cast<std::size_t>(ex.target) ? 1.0 : 0.0) - oracle[i];
            s_rel += resid * p.w_v(i, static_cast<std::size_t>(ex.first));
            p_rel += resid * p.w_v(i, static_cast<std::size_t>(ex.second));
        }
        CHECK(subject_relevance(p, ex) == Catch::Approx(s_rel).margin(1e-12));
        CHECK(relation_relevance(p, ex) == Catch::Approx(p_rel).margin(1e-12));
    }
}

TEST_CASE("attention_on_subject closed forms") {
    const ModelParams zero(12);
    CHECK(attention_on_subject(zero, 2, 10) == Catch::Approx(0.5).margin(1e-15));

    // entry log(d / sal) with the prompt diagonal at zero gives
    // Att_s = (d/sal) / (1 + d/sal)
    for (const auto [sal, d] : std::vector<std::pair<double, double>>{{1.0, 1.0}, {2.0, 0.5}, {10.0, 1.0}}) {
        ModelParams p(12);
        p.w_kq(2, 10) = std::log(d / sal);
        const double ratio = d / sal;
        CHECK(attention_on_subject(p, 2, 10) == Catch::Approx(ratio / (1.0 + ratio)).margin(1e-12));
    }
}

TEST_CASE("decode is softmax-order preserving") {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        const ModelParams p = random_params(9, seed);
        for (Token a = 0; a < 9; ++a) {
            for (Token b = 0; b < 9; ++b) {
                const ForwardTrace tr = forward(p, a, b);
                std::size_t best = 0;
                for (std::size_t i = 1; i < tr.probs.size(); ++i)
                    if (tr.probs[i] > tr.probs[best]) best = i;
                CHECK(decode(p, a, b) == static_cast<Token>(best));
            }
        }
    }
}

TEST_CASE("decoding is invariant to shifting every value entry") {
    // integer-valued entries keep the shifted arithmetic exact
    ModelParams p(7);
    Rng rng(99);
    for (double& x : p.w_v.data()) x = static_cast<double>(rng.below(9)) - 4.0;
    for (double& x : p.w_kq.data()) x = static_cast<double>(rng.below(5)) - 2.0;
    ModelParams shifted = p;
    shifted.w_v.add_to_all(3.0);
    for (Token a = 0; a < 7; ++a)
        for (Token b = 0; b < 7; ++b) CHECK(decode(p, a, b) == decode(shifted, a, b));
}

TEST_CASE("attention decomposition matches the two-column shortcut") {
    const ModelParams p = random_params(11, 31);
    for (Token a = 0; a < 11; ++a) {
        for (Token b = 0; b < 11; ++b) {
            const ForwardTrace tr = forward(p, a, b);
            CHECK(tr.att_first + tr.att_second == Catch::Approx(1.0).margin(1e-15));
            const auto oracle = oracle_forward_probs(p, a, b);
            for (std::size_t i = 0; i < oracle.size(); ++i)
                CHECK(tr.probs[i] == Catch::Approx(oracle[i]).margin(1e-12));
        }
    }
}

TEST_CASE("params serialization round-trips bitwise") {
    const ModelParams p = random_params(13, 77);
    const auto path = std::filesystem::temp_directory_path() / "factlab_params_test.bin";
    save_params(p, path);
    const ModelParams q = load_params(path);
    CHECK(p == q);
    std::filesystem::remove(path);
}

TEST_CASE("forward rejects out-of-range tokens and non-finite entries") {
    ModelParams p(5);
    CHECK_THROWS_AS(forward(p, -1, 2), std::out_of_range);
    CHECK_THROWS_AS(forward(p, 0, 5), std::out_of_range);
    p.w_kq(0, 2) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(forward(p, 0, 2), std::runtime_error);
}
