#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <factlab/rng.hpp>
#include <factlab/vocab.hpp>

namespace factlab {

enum class ExampleFormat { pretrain, downstream };

inline const char* to_string(ExampleFormat f) {
    return f == ExampleFormat::pretrain ? "pre" : "down";
}

// One training/eval item: a two-token prompt and its answer. The prompt is
// (s, r) in pretrain format and (s, p_r) downstream.
struct Example {
    Token first = 0;
    Token second = 0;
    Token target = 0;
    friend bool operator==(const Example&, const Example&) = default;
};

// Zipf(alpha) over {0..n-1}: P(i) proportional to (i+1)^-alpha. Sampling is
// an inverse-cdf lookup, so one uniform draw in [0,1) maps to one index.
class ZipfDist {
public:
    ZipfDist(double alpha, std::size_t n) : alpha_(alpha) {
        if (n == 0) throw std::invalid_argument("zipf: empty support");
        if (!(alpha >= 0.0)) throw std::invalid_argument("zipf: exponent must be non-negative");
        pmf_.resize(n);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            pmf_[i] = std::pow(static_cast<double>(i + 1), -alpha);
            sum += pmf_[i];
        }
        cdf_.resize(n);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            pmf_[i] /= sum;
            acc += pmf_[i];
            cdf_[i] = acc;
            if (i > 0 && !(cdf_[i] > cdf_[i - 1]))
                throw std::runtime_error("zipf: cdf not strictly increasing");
        }
        if (std::abs(cdf_.back() - 1.0) > 1e-12)
            throw std::runtime_error("zipf: cdf does not reach 1");
        cdf_.back() = 1.0;
    }

    std::size_t sample(double u) const {
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        if (it == cdf_.end()) --it;  // u == 1.0 guard; uniform01 never yields it
        return static_cast<std::size_t>(it - cdf_.begin());
    }

    double prob(std::size_t i) const { return pmf_.at(i); }
    const std::vector<double>& cdf() const { return cdf_; }
    double alpha() const { return alpha_; }
    std::size_t size() const { return pmf_.size(); }

private:
    double alpha_;
    std::vector<double> pmf_;
    std::vector<double> cdf_;
};

inline std::size_t sample_zipf(const ZipfDist& d, double u) { return d.sample(u); }

// Ground truth: a total map (s, r) -> a where each relation draws its answers
// from its own contiguous pool (the answer range tiled into equal blocks).
class KnowledgeBase {
public:
    KnowledgeBase(const Vocabulary& v, std::vector<Token> answers)
        : vocab_(v), answers_(std::move(answers)) {
        const std::size_t expected =
            static_cast<std::size_t>(v.n_subjects()) * static_cast<std::size_t>(v.n_relations());
        if (answers_.size() != expected)
            throw std::invalid_argument("knowledge base: need one answer per (s, r) pair");
        counts_.assign(static_cast<std::size_t>(v.n_answers()), 0);
        for (int s = 0; s < v.n_subjects(); ++s) {
            for (int k = 0; k < v.n_relations(); ++k) {
                const Token a = answers_[pair_index(s, k)];
                const int ai = v.answer_index(a);  // throws if not an answer token
                if (ai / v.pool_size() != k)
                    throw std::invalid_argument("knowledge base: answer outside its relation pool");
                ++counts_[static_cast<std::size_t>(ai)];
            }
        }
    }

    const Vocabulary& vocab() const { return vocab_; }

    Token answer_of(Token s, Token r) const {
        return answers_[pair_index(vocab_.subject_index(s), vocab_.relation_index(r))];
    }

    Token pool_begin(Token r) const {
        return vocab_.answer_token(vocab_.relation_index(r) * vocab_.pool_size());
    }

    // number of subjects mapped to answer a under relation r
    int pool_count(Token r, Token a) const {
        const int ai = vocab_.answer_index(a);
        if (ai / vocab_.pool_size() != vocab_.relation_index(r))
            throw std::domain_error("pool_count: answer not in this relation's pool");
        return counts_[static_cast<std::size_t>(ai)];
    }

    int answer_count(Token a) const { return counts_[static_cast<std::size_t>(vocab_.answer_index(a))]; }

    std::size_t fact_count() const { return answers_.size(); }

    // all facts in (subject, relation) order
    std::vector<Example> all_facts(ExampleFormat f) const {
        std::vector<Example> out;
        out.reserve(answers_.size());
        for (int s = 0; s < vocab_.n_subjects(); ++s) {
            for (int k = 0; k < vocab_.n_relations(); ++k) {
                const Token r = vocab_.relation_token(k);
                const Token second = f == ExampleFormat::pretrain ? r : vocab_.prompt_of(r);
                out.push_back({vocab_.subject_token(s), second, answers_[pair_index(s, k)]});
            }
        }
        return out;
    }

    friend bool operator==(const KnowledgeBase&, const KnowledgeBase&) = default;

private:
    std::size_t pair_index(int s, int rel_idx) const {
        return static_cast<std::size_t>(s) * static_cast<std::size_t>(vocab_.n_relations()) +
               static_cast<std::size_t>(rel_idx);
    }

    Vocabulary vocab_;
    std::vector<Token> answers_;
    std::vector<int> counts_;
};

// Uniform draw from each relation's pool, deterministic in (v, seed).
inline KnowledgeBase build_kb(const Vocabulary& v, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Token> answers(static_cast<std::size_t>(v.n_subjects()) *
                               static_cast<std::size_t>(v.n_relations()));
    std::size_t i = 0;
    for (int s = 0; s < v.n_subjects(); ++s) {
        for (int k = 0; k < v.n_relations(); ++k) {
            const Token pool_first = v.answer_token(k * v.pool_size());
            answers[i++] = pool_first + static_cast<Token>(rng.below(static_cast<std::uint64_t>(v.pool_size())));
        }
    }
    return KnowledgeBase(v, std::move(answers));
}

// i.i.d. pretraining stream: s ~ Zipf(alpha), r ~ Unif, emitted as (s, r, a).
inline std::vector<Example> pretrain_stream(const KnowledgeBase& kb, double alpha, std::size_t steps,
                                            std::uint64_t seed) {
    const Vocabulary& v = kb.vocab();
    ZipfDist zipf(alpha, static_cast<std::size_t>(v.n_subjects()));
    Rng rng(seed);
    std::vector<Example> out;
    out.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
        const Token s = static_cast<Token>(zipf.sample(rng.uniform01()));
        const Token r = v.relation_token(static_cast<int>(rng.below(static_cast<std::uint64_t>(v.n_relations()))));
        out.push_back({s, r, kb.answer_of(s, r)});
    }
    return out;
}

enum class SplitStrategy { top, bottom, random, whole };

inline const char* to_string(SplitStrategy s) {
    switch (s) {
        case SplitStrategy::top: return "top";
        case SplitStrategy::bottom: return "bottom";
        case SplitStrategy::random: return "random";
        case SplitStrategy::whole: return "whole";
    }
    return "?";
}

inline SplitStrategy split_strategy_from_string(const std::string& s) {
    if (s == "top") return SplitStrategy::top;
    if (s == "bottom") return SplitStrategy::bottom;
    if (s == "random") return SplitStrategy::random;
    if (s == "whole") return SplitStrategy::whole;
    throw std::invalid_argument("unknown split strategy: '" + s + "'");
}

struct SplitSpec {
    SplitStrategy strategy = SplitStrategy::whole;
    double fraction = 0.5;       // of the finetune pool left after the eval holdout
    double eval_fraction = 0.2;  // subjects held out for evaluation
};

struct DownstreamSplit {
    std::vector<Example> ft;
    std::vector<Example> eval;
    std::vector<int> popularity_rank;  // subject index -> rank, 0 = most popular
};

// Splits are by subject entity: all of a subject's facts travel together, so
// ft and eval are subject-disjoint. Popularity is Zipf rank, not realized
// counts. The eval holdout is stratified systematically: one seeded draw per
// equal rank span, so every popularity percentile slice down to the span
// width retains eval subjects (deciles get exactly proportional counts).
inline DownstreamSplit downstream_datasets(const KnowledgeBase& kb, double alpha, const SplitSpec& spec,
                                           std::uint64_t seed) {
    if (!(spec.eval_fraction > 0.0 && spec.eval_fraction < 1.0))
        throw std::invalid_argument("downstream_datasets: eval_fraction must lie in (0, 1)");
    if (!(spec.fraction > 0.0 && spec.fraction <= 1.0))
        throw std::invalid_argument("downstream_datasets: fraction must lie in (0, 1]");

    const Vocabulary& v = kb.vocab();
    const int n = v.n_subjects();

    // rank subjects by Zipf weight, ties (alpha = 0) broken by index
    ZipfDist zipf(alpha, static_cast<std::size_t>(n));
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return zipf.prob(static_cast<std::size_t>(a)) >
                                                zipf.prob(static_cast<std::size_t>(b)); });
    std::vector<int> rank(static_cast<std::size_t>(n));
    for (int pos = 0; pos < n; ++pos) rank[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])] = pos;

    Rng rng(seed);

    // eval holdout: eval_count equal rank spans, one subject drawn per span
    const int eval_count = std::max<int>(
        1, std::min<long long>(n - 1, std::llround(spec.eval_fraction * static_cast<double>(n))));
    std::vector<char> is_eval(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < eval_count; ++i) {
        const int lo = static_cast<int>(static_cast<long long>(i) * n / eval_count);
        const int hi = static_cast<int>(static_cast<long long>(i + 1) * n / eval_count);
        const int pos = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo)));
        is_eval[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])] = 1;
    }

    // finetune pool, most popular first
    std::vector<int> pool;
    for (int pos = 0; pos < n; ++pos) {
        const int s = order[static_cast<std::size_t>(pos)];
        if (!is_eval[static_cast<std::size_t>(s)]) pool.push_back(s);
    }

    const auto take = std::min(pool.size(), static_cast<std::size_t>(std::llround(
                                                spec.fraction * static_cast<double>(pool.size()))));
    std::vector<int> chosen;
    switch (spec.strategy) {
        case SplitStrategy::top:
            chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
            break;
        case SplitStrategy::bottom:
            chosen.assign(pool.end() - static_cast<std::ptrdiff_t>(take), pool.end());
            break;
        case SplitStrategy::random: {
            std::vector<int> shuffled = pool;
            rng.shuffle(shuffled);
            chosen.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(take));
            break;
        }
        case SplitStrategy::whole:
            chosen = pool;
            break;
    }

    std::vector<char> in_ft(static_cast<std::size_t>(n), 0);
    for (int s : chosen) in_ft[static_cast<std::size_t>(s)] = 1;

    DownstreamSplit out;
    out.popularity_rank = std::move(rank);
    for (int s = 0; s < n; ++s) {
        if (!is_eval[static_cast<std::size_t>(s)] && !in_ft[static_cast<std::size_t>(s)]) continue;
        for (int k = 0; k < v.n_relations(); ++k) {
            const Token r = v.relation_token(k);
            const Example ex{v.subject_token(s), v.prompt_of(r), kb.answer_of(v.subject_token(s), r)};
            (is_eval[static_cast<std::size_t>(s)] ? out.eval : out.ft).push_back(ex);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Line-oriented dataset serialization: a header row with the vocabulary sizes
// and format, then one fact per line as first<TAB>second<TAB>target.

inline void write_dataset(std::ostream& os, const Vocabulary& v, ExampleFormat f,
                          std::span<const Example> rows) {
    os << "#vocab\t" << v.n_subjects() << '\t' << v.n_relations() << '\t' << v.n_answers() << '\t'
       << to_string(f) << '\n';
    for (const Example& ex : rows) os << ex.first << '\t' << ex.second << '\t' << ex.target << '\n';
}

struct Dataset {
    Vocabulary vocab{1, 1, 1};
    ExampleFormat format = ExampleFormat::pretrain;
    std::vector<Example> rows;
};

inline Dataset read_dataset(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("dataset: empty input");
    std::istringstream header(line);
    std::string tag, fmt;
    int ns = 0, nr = 0, na = 0;
    if (!(header >> tag >> ns >> nr >> na >> fmt) || tag != "#vocab")
        throw std::runtime_error("dataset: malformed header line");
    Dataset d{Vocabulary(ns, nr, na),
              fmt == "pre" ? ExampleFormat::pretrain : ExampleFormat::downstream, {}};
    if (fmt != "pre" && fmt != "down") throw std::runtime_error("dataset: unknown format '" + fmt + "'");
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        Example ex;
        if (!(row >> ex.first >> ex.second >> ex.target))
            throw std::runtime_error("dataset: malformed row '" + line + "'");
        d.vocab.kind_of(ex.first);  // range checks
        d.vocab.kind_of(ex.second);
        d.vocab.kind_of(ex.target);
        d.rows.push_back(ex);
    }
    return d;
}

}  // namespace factlab
