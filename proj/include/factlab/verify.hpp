#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include <factlab/grad.hpp>
#include <factlab/knowledge.hpp>
#include <factlab/model.hpp>
#include <factlab/train.hpp>

namespace factlab {

// Executable check of one theorem or assumption. A false hypothesis_met means
// the instance did not meet the statement's preconditions; the conclusion is
// still reported but such a verdict does not count as a failure.
struct TheoremVerdict {
    std::string name;
    bool hypothesis_met = true;
    bool conclusion_holds = false;
    nlohmann::ordered_json witness;

    bool failed() const { return hypothesis_met && !conclusion_holds; }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["name"] = name;
        j["hypothesis_met"] = hypothesis_met;
        j["conclusion_holds"] = conclusion_holds;
        j["witness"] = witness;
        return j;
    }
};

// ---------------------------------------------------------------------------
// Memorizing constructions.

// Key-value store in the value matrix: +1 at (a, s) per fact, and each
// relation column marks its realized answers once. With per-relation answer
// pools the (a, s) pairs never repeat, and argmax decoding of (s, r) yields
// presoftmax margins of exactly 1 (correct) vs 1/2 (answers sharing s or r)
// vs 0 (unrelated), so every fact decodes correctly with W_KQ = 0.
inline ModelParams construct_memorizer(const KnowledgeBase& kb) {
    const Vocabulary& v = kb.vocab();
    ModelParams p(static_cast<std::size_t>(v.total()));
    for (const Example& fact : kb.all_facts(ExampleFormat::pretrain)) {
        p.w_v(static_cast<std::size_t>(fact.target), static_cast<std::size_t>(fact.first)) += 1.0;
        p.w_v(static_cast<std::size_t>(fact.target), static_cast<std::size_t>(fact.second)) = 1.0;
    }
    return p;
}

// Variant whose relation columns carry the realized answer frequencies at a
// scale too small to disturb decoding: entry (a, r) = count(a) / (2 |S|).
// This is the canonical instance satisfying the non-uniform-marginal,
// answer-diversity and all-facts-memorized assumptions while still decoding
// every fact at balanced attention.
inline ModelParams construct_frequency_memorizer(const KnowledgeBase& kb) {
    const Vocabulary& v = kb.vocab();
    ModelParams p(static_cast<std::size_t>(v.total()));
    const double scale = 1.0 / (2.0 * static_cast<double>(v.n_subjects()));
    for (const Example& fact : kb.all_facts(ExampleFormat::pretrain)) {
        p.w_v(static_cast<std::size_t>(fact.target), static_cast<std::size_t>(fact.first)) += 1.0;
        p.w_v(static_cast<std::size_t>(fact.target), static_cast<std::size_t>(fact.second)) += scale;
    }
    return p;
}

// ---------------------------------------------------------------------------
// Assumption checks, evaluated literally against the given parameters.

inline std::vector<TheoremVerdict> check_assumptions(const KnowledgeBase& kb, const ModelParams& p) {
    const Vocabulary& v = kb.vocab();
    std::vector<TheoremVerdict> out;

    // Non-uniform relation marginal: per relation, max - min of the value
    // column over the pool answers must be strictly positive.
    {
        TheoremVerdict verdict{"assumption_nonuniform_relation_marginal", true, true, {}};
        for (int k = 0; k < v.n_relations() && verdict.conclusion_holds; ++k) {
            const Token r = v.relation_token(k);
            double lo = std::numeric_limits<double>::infinity();
            double hi = -lo;
            for (int j = 0; j < v.pool_size(); ++j) {
                const Token a = v.answer_token(k * v.pool_size() + j);
                const double x = p.w_v(static_cast<std::size_t>(a), static_cast<std::size_t>(r));
                lo = std::min(lo, x);
                hi = std::max(hi, x);
            }
            if (!(hi - lo > 0.0)) {
                verdict.conclusion_holds = false;
                verdict.witness = {{"relation", r}, {"max", hi}, {"min", lo}};
            }
        }
        out.push_back(std::move(verdict));
    }

    // Answer diversity: every pool answer of every relation realized by some
    // subject. A property of the knowledge base alone.
    {
        TheoremVerdict verdict{"assumption_answer_diversity", true, true, {}};
        for (int k = 0; k < v.n_relations() && verdict.conclusion_holds; ++k) {
            for (int j = 0; j < v.pool_size(); ++j) {
                const Token a = v.answer_token(k * v.pool_size() + j);
                if (kb.answer_count(a) == 0) {
                    verdict.conclusion_holds = false;
                    verdict.witness = {{"relation", v.relation_token(k)}, {"missing_answer", a}};
                    break;
                }
            }
        }
        out.push_back(std::move(verdict));
    }

    // All facts memorized: per (s, r) with answer a,
    //   W_V[a, s] >= max_{a' in pool(r)} W_V[a', r] - W_V[a, r].
    {
        TheoremVerdict verdict{"assumption_all_facts_memorized", true, true, {}};
        for (const Example& fact : kb.all_facts(ExampleFormat::pretrain)) {
            const int k = v.relation_index(fact.second);
            double pool_max = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < v.pool_size(); ++j) {
                const Token a = v.answer_token(k * v.pool_size() + j);
                pool_max = std::max(pool_max,
                                    p.w_v(static_cast<std::size_t>(a), static_cast<std::size_t>(fact.second)));
            }
            const double lhs =
                p.w_v(static_cast<std::size_t>(fact.target), static_cast<std::size_t>(fact.first));
            const double rhs =
                pool_max - p.w_v(static_cast<std::size_t>(fact.target), static_cast<std::size_t>(fact.second));
            if (!(lhs >= rhs)) {
                verdict.conclusion_holds = false;
                verdict.witness = {{"subject", fact.first}, {"relation", fact.second},
                                   {"salience", lhs},       {"required", rhs}};
                break;
            }
        }
        out.push_back(std::move(verdict));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention imbalance hides stored knowledge.

struct HiddenKqResult {
    ModelParams params;           // shifted W_V, constructed W_KQ
    std::vector<Example> d_min;   // facts flipped by the construction, (s, r, a) form
    TheoremVerdict verdict;
};

// For every fact whose answer is strictly dominated in its relation column,
// set W_KQ[s, r] = log(d / salience) - margin with W_KQ[r, r] = 0, where d is
// the dominance gap. The value matrix is shifted to non-negative entries
// first (decoding is shift-invariant) and never modified afterwards.
inline HiddenKqResult construct_hidden_kq(const ModelParams& p, const KnowledgeBase& kb,
                                          double margin = 0.1) {
    const Vocabulary& v = kb.vocab();
    HiddenKqResult res{p, {}, {"hidden_knowledge_construction", true, false, {}}};
    res.params.w_kq = Matrix(p.side());

    const double min_entry = res.params.w_v.min_entry();
    if (min_entry < 0.0) res.params.w_v.add_to_all(-min_entry);

    const auto assumptions = check_assumptions(kb, res.params);
    for (const TheoremVerdict& a : assumptions) {
        if (!a.conclusion_holds) {
            res.verdict.hypothesis_met = false;
            res.verdict.witness = {{"failed_assumption", a.name}, {"detail", a.witness}};
            return res;
        }
    }

    for (const Example& fact : kb.all_facts(ExampleFormat::pretrain)) {
        const int k = v.relation_index(fact.second);
        double pool_max = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < v.pool_size(); ++j) {
            const Token a = v.answer_token(k * v.pool_size() + j);
            pool_max = std::max(pool_max, res.params.w_v(static_cast<std::size_t>(a),
                                                         static_cast<std::size_t>(fact.second)));
        }
        const double own =
            res.params.w_v(static_cast<std::size_t>(fact.target), static_cast<std::size_t>(fact.second));
        if (!(own < pool_max)) continue;  // ties cannot be flipped by attention alone
        const double d = pool_max - own;
        const double sal =
            res.params.w_v(static_cast<std::size_t>(fact.target), static_cast<std::size_t>(fact.first));
        if (!(sal > 0.0)) {
            res.verdict.hypothesis_met = false;
            res.verdict.witness = {{"reason", "non-positive salience after shift"},
                                   {"subject", fact.first},
                                   {"relation", fact.second}};
            return res;
        }
        res.params.w_kq(static_cast<std::size_t>(fact.first), static_cast<std::size_t>(fact.second)) =
            std::log(d / sal) - margin;
        res.d_min.push_back(fact);
    }

    if (res.d_min.empty()) {
        res.verdict.hypothesis_met = false;
        res.verdict.witness = {{"reason", "degenerate knowledge base: no strictly dominated facts"}};
        return res;
    }

    // Conclusion: the balanced model still decodes everything, the
    // constructed attention misses every dominated fact, and the stored
    // knowledge is untouched.
    ModelParams balanced = res.params;
    balanced.w_kq = Matrix(p.side());
    std::size_t balanced_correct = 0, flipped = 0;
    const auto facts = kb.all_facts(ExampleFormat::pretrain);
    for (const Example& fact : facts)
        if (decode(balanced, fact.first, fact.second) == fact.target) ++balanced_correct;
    for (const Example& fact : res.d_min)
        if (decode(res.params, fact.first, fact.second) != fact.target) ++flipped;
    res.verdict.conclusion_holds = balanced_correct == facts.size() && flipped == res.d_min.size() &&
                                   balanced.w_v == res.params.w_v;
    res.verdict.witness = {{"d_min_size", res.d_min.size()},
                           {"balanced_accuracy", static_cast<double>(balanced_correct) /
                                                     static_cast<double>(facts.size())},
                           {"d_min_flipped", flipped}};
    return res;
}

// ---------------------------------------------------------------------------
// Sufficient condition for an incorrect prediction: Att_s * salience <=
// Att_r * d. Scanning the free key-query entry must show the decode staying
// wrong everywhere below the predicted attention threshold d / (salience + d).

inline TheoremVerdict check_attention_threshold(const ModelParams& p, const KnowledgeBase& kb, Token s,
                                                Token r, int sweep_points = 100) {
    const Vocabulary& v = kb.vocab();
    TheoremVerdict verdict{"attention_threshold", true, true, {}};

    ModelParams q = p;
    q.w_kq = Matrix(p.side());
    const double min_entry = q.w_v.min_entry();
    if (min_entry < 0.0) q.w_v.add_to_all(-min_entry);

    const Token a = kb.answer_of(s, r);
    const int k = v.relation_index(r);
    double pool_max = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < v.pool_size(); ++j) {
        const Token cand = v.answer_token(k * v.pool_size() + j);
        pool_max = std::max(pool_max, q.w_v(static_cast<std::size_t>(cand), static_cast<std::size_t>(r)));
    }
    const double d = pool_max - q.w_v(static_cast<std::size_t>(a), static_cast<std::size_t>(r));
    const double sal = q.w_v(static_cast<std::size_t>(a), static_cast<std::size_t>(s));
    if (!(d > 0.0) || !(sal > 0.0)) {
        verdict.hypothesis_met = false;
        verdict.witness = {{"d", d}, {"salience", sal}};
        return verdict;
    }

    const double threshold = d / (sal + d);
    double flip_att = 1.0;  // smallest attention with a correct decode
    bool wrong_below = true;
    for (int i = 0; i <= sweep_points; ++i) {
        const double c = -30.0 + 60.0 * static_cast<double>(i) / static_cast<double>(sweep_points);
        q.w_kq(static_cast<std::size_t>(s), static_cast<std::size_t>(r)) = c;
        const double att = attention_on_subject(q, s, r);
        const bool correct = decode(q, s, r) == a;
        if (correct) flip_att = std::min(flip_att, att);
        if (att <= threshold * (1.0 - 1e-12) && correct) wrong_below = false;
    }
    verdict.conclusion_holds = wrong_below && flip_att >= threshold * (1.0 - 1e-9);
    verdict.witness = {{"threshold", threshold}, {"flip_attention", flip_att}, {"d", d}, {"salience", sal}};
    return verdict;
}

// ---------------------------------------------------------------------------
// Softmax bounds on l_inf-bounded vectors: max component <= e^{2C}/(d-1),
// min component >= e^{-2C}/d, probed with random vectors plus adversarial
// corner patterns.

inline std::vector<double> softmax_vector(std::span<const double> x) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : x) m = std::max(m, v);
    std::vector<double> out(x.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - m);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

inline TheoremVerdict check_softmax_bounds(std::size_t dim, double c, std::size_t trials,
                                           std::uint64_t seed) {
    if (dim < 2) throw std::invalid_argument("check_softmax_bounds: dimension must be at least 2");
    TheoremVerdict verdict{"softmax_bounds", true, true, {}};
    const double max_bound = std::exp(2.0 * c) / static_cast<double>(dim - 1);
    const double min_bound = std::exp(-2.0 * c) / static_cast<double>(dim);
    const double slack = 1.0 + 1e-12;

    double worst_max = 0.0, worst_min = 1.0;
    const auto probe = [&](std::span<const double> x) {
        const std::vector<double> p = softmax_vector(x);
        const double hi = *std::max_element(p.begin(), p.end());
        const double lo = *std::min_element(p.begin(), p.end());
        worst_max = std::max(worst_max, hi);
        worst_min = std::min(worst_min, lo);
        if (hi > max_bound * slack || lo < min_bound / slack) verdict.conclusion_holds = false;
    };

    std::vector<double> x(dim);
    Rng rng(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        for (double& v : x) v = c * (2.0 * rng.uniform01() - 1.0);
        probe(x);
    }
    // corners: the extreme patterns of +-C
    std::fill(x.begin(), x.end(), c);
    probe(x);
    std::fill(x.begin(), x.end(), -c);
    probe(x);
    std::fill(x.begin(), x.end(), -c);
    x[0] = c;
    probe(x);
    std::fill(x.begin(), x.end(), c);
    x[0] = -c;
    probe(x);
    for (std::size_t i = 0; i < dim; ++i) x[i] = (i % 2 == 0) ? c : -c;
    probe(x);
    std::fill(x.begin(), x.end(), 0.0);
    probe(x);

    verdict.witness = {{"dim", dim},
                       {"C", c},
                       {"max_bound", max_bound},
                       {"min_bound", min_bound},
                       {"worst_max", worst_max},
                       {"worst_min", worst_min}};
    return verdict;
}

// ---------------------------------------------------------------------------
// Gradient sign law: one downstream SGD step moves the subject attention of
// every probe prompt (s', p_r) in the direction of sign(s_rel - p_rel).

inline TheoremVerdict check_gradient_sign(const ModelParams& p, const Example& ex,
                                          std::span<const Token> probes, double lr = 0.1) {
    TheoremVerdict verdict{"gradient_sign", true, true, {}};
    const ForwardTrace tr = forward(p, ex.first, ex.second);
    const double s_rel = residual_value_dot(p, tr, ex.target, ex.first);
    const double p_rel = residual_value_dot(p, tr, ex.target, ex.second);
    const double diff = s_rel - p_rel;

    ModelParams q = p;
    detail::sgd_step(q, ex, lr);

    for (const Token probe : probes) {
        const double before = attention_on_subject(p, probe, ex.second);
        const double after = attention_on_subject(q, probe, ex.second);
        bool ok = true;
        if (diff > 0.0)
            ok = after > before;
        else if (diff < 0.0)
            ok = after < before;
        else
            ok = std::abs(after - before) <= 1e-12;
        if (!ok) {
            verdict.conclusion_holds = false;
            verdict.witness = {{"probe", probe}, {"before", before}, {"after", after}, {"s_rel", s_rel},
                               {"p_rel", p_rel}};
            return verdict;
        }
    }
    verdict.witness = {{"s_rel", s_rel}, {"p_rel", p_rel}, {"probes", probes.size()}};
    return verdict;
}

// ---------------------------------------------------------------------------
// Lower bound on fact salience after batch-size-1 pretraining from zero
// init. The bound salience >= (n e^{-C_KQ}/2 - n_tot e^{C_V}/(|T|-1)) eps
// holds for every fact given the running norm monitors; the stated
// hypothesis (n_tot small enough) is what makes it positive.

struct SalienceBoundReport {
    std::size_t facts = 0;
    std::size_t hypothesis_met = 0;
    std::size_t bound_holds = 0;
    std::size_t hypothesis_met_and_bound_holds = 0;
    TheoremVerdict verdict;
};

inline SalienceBoundReport check_salience_bound(const KnowledgeBase& kb, const PretrainResult& run,
                                                double lr) {
    const Vocabulary& v = kb.vocab();
    SalienceBoundReport rep;
    rep.verdict = {"salience_lower_bound", true, true, {}};
    const double c_kq = run.c_kq_peak;
    const double c_v = run.c_v_peak;
    const double total_minus_1 = static_cast<double>(v.total() - 1);

    for (int s = 0; s < v.n_subjects(); ++s) {
        const double n_tot = static_cast<double>(run.counts.subject(s));
        for (int k = 0; k < v.n_relations(); ++k) {
            const double n = static_cast<double>(run.counts.pair(s, k));
            const Token subj = v.subject_token(s);
            const Token a = kb.answer_of(subj, v.relation_token(k));
            const double bound = (n * std::exp(-c_kq) / 2.0 - n_tot * std::exp(c_v) / total_minus_1) * lr;
            const double sal = salience(run.params, subj, a);
            const bool hyp = n_tot <= n * std::exp(-c_kq) * total_minus_1 / (2.0 * std::exp(c_v));
            const bool holds = sal >= bound;
            ++rep.facts;
            if (hyp) ++rep.hypothesis_met;
            if (holds) ++rep.bound_holds;
            if (hyp && holds) ++rep.hypothesis_met_and_bound_holds;
            if (hyp && !holds && rep.verdict.conclusion_holds) {
                rep.verdict.conclusion_holds = false;
                rep.verdict.witness = {{"subject", subj}, {"relation", v.relation_token(k)},
                                       {"salience", sal}, {"bound", bound},
                                       {"n", n},          {"n_tot", n_tot}};
            }
        }
    }
    if (rep.verdict.conclusion_holds)
        rep.verdict.witness = {{"facts", rep.facts},
                               {"hypothesis_met", rep.hypothesis_met},
                               {"bound_holds_all_facts", rep.bound_holds},
                               {"c_v", c_v},
                               {"c_kq", c_kq}};
    rep.verdict.hypothesis_met = rep.hypothesis_met > 0;
    return rep;
}

}  // namespace factlab
