#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <factlab/grad.hpp>
#include <factlab/knowledge.hpp>
#include <factlab/rng.hpp>

using namespace factlab;

namespace {

ModelParams random_params(std::size_t side, std::uint64_t seed, double scale = 0.8) {
    ModelParams p(side);
    Rng rng(seed);
    for (double& v : p.w_v.data()) v = scale * rng.gaussian();
    for (double& v : p.w_kq.data()) v = scale * rng.gaussian();
    return p;
}

Example random_downstream_example(const Vocabulary& v, Rng& rng) {
    const Token s = static_cast<Token>(rng.below(static_cast<std::uint64_t>(v.n_subjects())));
    const Token p = v.prompt_token(static_cast<int>(rng.below(static_cast<std::uint64_t>(v.n_relations()))));
    const Token a = v.answer_token(static_cast<int>(rng.below(static_cast<std::uint64_t>(v.n_answers()))));
    return {s, p, a};
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-4});
}

double max_rel_err(const GradPair& a, const GradPair& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.v_col_first.size(); ++i) {
        worst = std::max(worst, rel_err(a.v_col_first[i], b.v_col_first[i]));
        worst = std::max(worst, rel_err(a.v_col_second[i], b.v_col_second[i]));
    }
    worst = std::max(worst, rel_err(a.kq_first_second, b.kq_first_second));
    worst = std::max(worst, rel_err(a.kq_second_second, b.kq_second_second));
    return worst;
}

}  // namespace

TEST_CASE("cross-entropy loss values") {
    ForwardTrace tr;
    tr.probs.assign(10, 0.1);
    CHECK(ce_loss(tr, 3) == Catch::Approx(std::log(10.0)).epsilon(1e-12));
    CHECK(ce_loss(tr, 3) == Catch::Approx(2.302585092994046).epsilon(1e-12));
    tr.probs.assign(10, 0.0);
    tr.probs[4] = 1.0;
    CHECK(ce_loss(tr, 4) == 0.0);
    tr.probs.assign(4, 0.25);
    CHECK(ce_loss(tr, 0) == Catch::Approx(1.3862943611198906).epsilon(1e-12));
    CHECK_THROWS_AS(ce_loss(tr, 4), std::out_of_range);
}

TEST_CASE("zero residual kills both gradients") {
    const Vocabulary v(3, 2, 6);
    const Example ex{0, v.prompt_token(0), v.answer_token(2)};
    ModelParams p(static_cast<std::size_t>(v.total()));
    p.w_v(static_cast<std::size_t>(ex.target), static_cast<std::size_t>(ex.first)) = 1600.0;
    const GradPair g = grad_analytic(p, ex);
    for (double x : g.v_col_first) CHECK(x == 0.0);
    for (double x : g.v_col_second) CHECK(x == 0.0);
    CHECK(g.kq_first_second == 0.0);
    CHECK(g.kq_second_second == 0.0);
}

TEST_CASE("equal relevances zero the attention gradient but not the value gradient") {
    // zero value matrix: both relevances are 0, the residual is not
    const Vocabulary v(3, 2, 6);
    const Example ex{1, v.prompt_token(1), v.answer_token(0)};
    ModelParams p(static_cast<std::size_t>(v.total()));
    p.w_kq(static_cast<std::size_t>(ex.first), static_cast<std::size_t>(ex.second)) = 0.7;
    const GradPair g = grad_analytic(p, ex);
    CHECK(g.kq_first_second == 0.0);
    CHECK(g.kq_second_second == 0.0);
    double v_norm = 0.0;
    for (double x : g.v_col_first) v_norm += std::abs(x);
    CHECK(v_norm > 0.0);
}

TEST_CASE("analytic gradient matches central differences on 100 random instances") {
    const Vocabulary v(3, 2, 6);
    Rng rng(2024);
    double worst = 0.0;
    double worst_off_support = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const ModelParams p = random_params(static_cast<std::size_t>(v.total()), 1000 + trial);
        const Example ex = random_downstream_example(v, rng);
        const GradPair analytic = grad_analytic(p, ex);
        const FdGrad fd = grad_fd(p, ex, 1e-5, 500 + trial);
        worst = std::max(worst, max_rel_err(analytic, fd.grad));
        worst_off_support = std::max(worst_off_support, fd.max_abs_off_support);
    }
    CHECK(worst <= 1e-5);
    CHECK(worst_off_support <= 1e-7);
}

TEST_CASE("off-support finite differences vanish on zero parameters") {
    const Vocabulary v(3, 2, 6);
    const ModelParams p(static_cast<std::size_t>(v.total()));
    const Example ex{0, v.prompt_token(0), v.answer_token(1)};
    const FdGrad fd = grad_fd(p, ex, 1e-5, 3);
    CHECK(fd.max_abs_off_support <= 1e-7);
}

TEST_CASE("finite-difference error decays quadratically in the step") {
    const ModelParams p = random_params(8, 424242, 1.5);
    const Example ex{1, 5, 6};
    const GradPair analytic = grad_analytic(p, ex);
    const auto err_at = [&](double h) {
        const FdGrad fd = grad_fd(p, ex, h, 1);
        double worst = 0.0;
        for (std::size_t i = 0; i < analytic.v_col_first.size(); ++i) {
            worst = std::max(worst, std::abs(analytic.v_col_first[i] - fd.grad.v_col_first[i]));
            worst = std::max(worst, std::abs(analytic.v_col_second[i] - fd.grad.v_col_second[i]));
        }
        worst = std::max(worst, std::abs(analytic.kq_first_second - fd.grad.kq_first_second));
        worst = std::max(worst, std::abs(analytic.kq_second_second - fd.grad.kq_second_second));
        return worst;
    };
    const double coarse = err_at(2e-3);
    const double fine = err_at(1e-3);
    CHECK(coarse / fine == Catch::Approx(4.0).margin(1.0));
}

TEST_CASE("one descent step never increases the loss on the trained example") {
    const Vocabulary v(3, 2, 6);
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        ModelParams p = random_params(static_cast<std::size_t>(v.total()), 9000 + trial);
        const Example ex = random_downstream_example(v, rng);
        const double before = ce_loss(forward(p, ex.first, ex.second), ex.target);
        apply_step(p, grad_analytic(p, ex), 1e-3);
        const double after = ce_loss(forward(p, ex.first, ex.second), ex.target);
        CHECK(after <= before + 1e-12);
    }
}

TEST_CASE("gradient sparsity and the attention sign law") {
    const Vocabulary v(4, 2, 8);
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        const ModelParams p = random_params(static_cast<std::size_t>(v.total()), 70 + trial);
        const Example ex = random_downstream_example(v, rng);
        const GradPair g = grad_analytic(p, ex);

        // support structure
        const Matrix dv = g.dense_v(p.side());
        const Matrix dkq = g.dense_kq(p.side());
        for (std::size_t i = 0; i < p.side(); ++i) {
            for (std::size_t j = 0; j < p.side(); ++j) {
                if (j != static_cast<std::size_t>(ex.first) && j != static_cast<std::size_t>(ex.second))
                    CHECK(dv(i, j) == 0.0);
                const bool kq_support = (i == static_cast<std::size_t>(ex.first) ||
                                         i == static_cast<std::size_t>(ex.second)) &&
                                        j == static_cast<std::size_t>(ex.second);
                if (!kq_support) CHECK(dkq(i, j) == 0.0);
            }
        }

        // gradient at (second, second) carries the sign of s_rel - p_rel;
        // the applied descent direction is its negation
        const double diff = subject_relevance(p, ex) - relation_relevance(p, ex);
        if (diff > 0.0) CHECK(g.kq_second_second > 0.0);
        if (diff < 0.0) CHECK(g.kq_second_second < 0.0);
        CHECK(g.kq_first_second == Catch::Approx(-g.kq_second_second).margin(1e-18));
    }
}
