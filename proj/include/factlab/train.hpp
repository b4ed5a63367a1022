#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <factlab/grad.hpp>
#include <factlab/knowledge.hpp>
#include <factlab/model.hpp>
#include <factlab/rng.hpp>

namespace factlab {

struct TrainConfig {
    double lr = 0.5;
    std::size_t pretrain_steps = 30000;
    std::size_t ft_epochs = 2000;
    std::optional<std::size_t> ft_batch;  // unset = full batch
    double init_std = 0.0;
    std::size_t eval_every = 50;

    void validate() const {
        if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
        if (ft_batch && *ft_batch < 1) throw std::invalid_argument("train config: ft_batch must be >= 1");
        if (eval_every < 1) throw std::invalid_argument("train config: eval_every must be >= 1");
        if (!(init_std >= 0.0)) throw std::invalid_argument("train config: init_std must be non-negative");
    }
};

struct TraceRow {
    std::size_t step = 0;
    double loss = 0.0;
    double eval_acc = 0.0;
    double mean_subject_att = 0.0;
    double mean_relation_att = 0.0;
    double mean_salience_ft = 0.0;
    double c_v = 0.0;   // instantaneous 2 * entrywise max-abs of W_V
    double c_kq = 0.0;  // same for W_KQ
};

// Occurrence bookkeeping over the pretraining stream: n per (s, r) pair and
// n_tot per subject.
struct FactCounts {
    int n_relations = 0;
    std::vector<std::size_t> per_pair;     // s * n_relations + relation index
    std::vector<std::size_t> per_subject;  // subject index

    std::size_t pair(int subject, int rel_idx) const {
        return per_pair[static_cast<std::size_t>(subject) * static_cast<std::size_t>(n_relations) +
                        static_cast<std::size_t>(rel_idx)];
    }
    std::size_t subject(int s) const { return per_subject[static_cast<std::size_t>(s)]; }
};

struct StepInfo {
    std::size_t step = 0;  // 1-based
    Example ex;
    double loss = 0.0;
    double att_first = 0.0;
    double prob_target = 0.0;
    double kq_update_max = 0.0;  // max-abs of the applied W_KQ delta
    const ModelParams& params;
};
using StepObserver = std::function<void(const StepInfo&)>;

class TrainDivergence : public std::runtime_error {
public:
    TrainDivergence(std::size_t step, const std::string& what)
        : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what),
          step_(step) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

// Both matrices i.i.d. normal(0, init_std^2); init_std = 0 gives exact zeros.
inline ModelParams init_params(const Vocabulary& v, double init_std, std::uint64_t seed) {
    if (!(init_std >= 0.0)) throw std::invalid_argument("init_params: init_std must be non-negative");
    ModelParams p(static_cast<std::size_t>(v.total()));
    if (init_std > 0.0) {
        Rng rng(seed);
        for (double& x : p.w_v.data()) x = init_std * rng.gaussian();
        for (double& x : p.w_kq.data()) x = init_std * rng.gaussian();
    }
    return p;
}

namespace detail {

inline constexpr double kLossCap = 50.0;
inline constexpr double kEntryCap = 1e6;

struct StepOutcome {
    double loss = 0.0;
    double att_first = 0.0;
    double prob_target = 0.0;
    double kq_update_max = 0.0;
    double touched_v_max = 0.0;  // max-abs over entries written this step
    double touched_kq_max = 0.0;
};

// One batch-size-1 SGD step; shared by the pretraining loop and the theorem
// checks so they exercise the identical update.
inline StepOutcome sgd_step(ModelParams& p, const Example& ex, double lr) {
    const ForwardTrace tr = forward(p, ex.first, ex.second);
    StepOutcome out;
    out.loss = ce_loss(tr, ex.target);
    out.att_first = tr.att_first;
    out.prob_target = tr.probs[static_cast<std::size_t>(ex.target)];
    const GradPair g = grad_from_trace(p, tr, ex);
    apply_step(p, g, lr);
    out.kq_update_max = lr * std::max(std::abs(g.kq_first_second), std::abs(g.kq_second_second));
    for (std::size_t i = 0; i < p.side(); ++i) {
        out.touched_v_max = std::max({out.touched_v_max,
                                      std::abs(p.w_v(i, static_cast<std::size_t>(ex.first))),
                                      std::abs(p.w_v(i, static_cast<std::size_t>(ex.second)))});
    }
    out.touched_kq_max =
        std::max(std::abs(p.w_kq(static_cast<std::size_t>(ex.first), static_cast<std::size_t>(ex.second))),
                 std::abs(p.w_kq(static_cast<std::size_t>(ex.second), static_cast<std::size_t>(ex.second))));
    return out;
}

inline void guard(std::size_t step, double loss, double entry_max) {
    if (!std::isfinite(loss)) throw TrainDivergence(step, "non-finite loss");
    if (loss > kLossCap) throw TrainDivergence(step, "loss above cap");
    if (entry_max > kEntryCap) throw TrainDivergence(step, "parameter entry above cap");
}

struct EvalStats {
    double acc = std::numeric_limits<double>::quiet_NaN();
    double mean_att_first = std::numeric_limits<double>::quiet_NaN();
    double mean_att_second = std::numeric_limits<double>::quiet_NaN();
};

inline EvalStats eval_stats(const ModelParams& p, std::span<const Example> exs) {
    EvalStats st;
    if (exs.empty()) return st;
    std::size_t correct = 0;
    double att1 = 0.0, att2 = 0.0;
    for (const Example& ex : exs) {
        if (decode(p, ex.first, ex.second) == ex.target) ++correct;
        const auto [a1, a2] = attention_pair(p, ex.first, ex.second);
        att1 += a1;
        att2 += a2;
    }
    const double n = static_cast<double>(exs.size());
    st.acc = static_cast<double>(correct) / n;
    st.mean_att_first = att1 / n;
    st.mean_att_second = att2 / n;
    return st;
}

inline double mean_salience(const ModelParams& p, std::span<const Example> exs) {
    if (exs.empty()) return std::numeric_limits<double>::quiet_NaN();
    double acc = 0.0;
    for (const Example& ex : exs) acc += salience(p, ex.first, ex.target);
    return acc / static_cast<double>(exs.size());
}

inline TraceRow make_trace_row(const ModelParams& p, std::size_t step, double loss,
                               std::span<const Example> eval_set, std::span<const Example> sal_set) {
    const EvalStats st = eval_stats(p, eval_set);
    TraceRow row;
    row.step = step;
    row.loss = loss;
    row.eval_acc = st.acc;
    row.mean_subject_att = st.mean_att_first;
    row.mean_relation_att = st.mean_att_second;
    row.mean_salience_ft = mean_salience(p, sal_set);
    row.c_v = 2.0 * p.w_v.max_abs();
    row.c_kq = 2.0 * p.w_kq.max_abs();
    return row;
}

}  // namespace detail

struct PretrainResult {
    ModelParams params;
    std::vector<TraceRow> trace;
    FactCounts counts;
    // running maxima over the whole trajectory, as required by the bounded-
    // matrix assumptions "throughout training"
    double c_v_peak = 0.0;
    double c_kq_peak = 0.0;
    double kq_update_peak = 0.0;
    double kq_update_first10_max = 0.0;
};

// Streaming SGD with batch size 1, one example per step. trace_eval supplies
// the examples decoded for trace rows (typically all facts in pretrain
// format); it also serves as the salience probe set.
inline PretrainResult pretrain(const Vocabulary& v, ModelParams params, std::span<const Example> stream,
                               const TrainConfig& cfg, std::span<const Example> trace_eval = {},
                               const StepObserver& observer = {}) {
    cfg.validate();
    PretrainResult res{std::move(params), {}, {}, 0.0, 0.0, 0.0, 0.0};
    res.counts.n_relations = v.n_relations();
    res.counts.per_pair.assign(
        static_cast<std::size_t>(v.n_subjects()) * static_cast<std::size_t>(v.n_relations()), 0);
    res.counts.per_subject.assign(static_cast<std::size_t>(v.n_subjects()), 0);
    res.c_v_peak = 2.0 * res.params.w_v.max_abs();
    res.c_kq_peak = 2.0 * res.params.w_kq.max_abs();

    for (std::size_t t = 1; t <= stream.size(); ++t) {
        const Example& ex = stream[t - 1];
        if (v.kind_of(ex.first) != TokenKind::subject || v.kind_of(ex.second) != TokenKind::relation)
            throw std::invalid_argument("pretrain: stream example " + std::to_string(t - 1) +
                                        " is not in (s, r, a) format");
        ++res.counts.per_pair[static_cast<std::size_t>(v.subject_index(ex.first)) *
                                  static_cast<std::size_t>(v.n_relations()) +
                              static_cast<std::size_t>(v.relation_index(ex.second))];
        ++res.counts.per_subject[static_cast<std::size_t>(v.subject_index(ex.first))];

        const detail::StepOutcome so = detail::sgd_step(res.params, ex, cfg.lr);
        detail::guard(t, so.loss, std::max(so.touched_v_max, so.touched_kq_max));

        res.c_v_peak = std::max(res.c_v_peak, 2.0 * so.touched_v_max);
        res.c_kq_peak = std::max(res.c_kq_peak, 2.0 * so.touched_kq_max);
        res.kq_update_peak = std::max(res.kq_update_peak, so.kq_update_max);
        if (t <= 10) res.kq_update_first10_max = std::max(res.kq_update_first10_max, so.kq_update_max);

        if (observer)
            observer(StepInfo{t, ex, so.loss, so.att_first, so.prob_target, so.kq_update_max, res.params});

        if (t % cfg.eval_every == 0 || t == stream.size())
            res.trace.push_back(detail::make_trace_row(res.params, t, so.loss, trace_eval, trace_eval));
    }
    return res;
}

struct FinetuneResult {
    ModelParams params;
    std::vector<TraceRow> trace;
    double kq_update_peak = 0.0;
    double kq_update_first10_max = 0.0;
};

// Epoch-based batch training on the downstream dataset: per epoch, shuffle
// (seeded), accumulate the gradient over each batch and apply its mean. The
// default (unset ft_batch) is full-batch. Trace rows are per-epoch metrics on
// d_eval; salience is tracked over d_ft.
inline FinetuneResult finetune(const Vocabulary& v, ModelParams params, std::span<const Example> d_ft,
                               std::span<const Example> d_eval, const TrainConfig& cfg,
                               std::uint64_t shuffle_seed, const StepObserver& observer = {}) {
    cfg.validate();
    FinetuneResult res{std::move(params), {}, 0.0, 0.0};
    if (d_ft.empty() || cfg.ft_epochs == 0) return res;
    for (const Example& ex : d_ft)
        if (v.kind_of(ex.first) != TokenKind::subject || v.kind_of(ex.second) != TokenKind::prompt)
            throw std::invalid_argument("finetune: dataset is not in (s, p_r, a) format");

    const std::size_t side = res.params.side();
    const std::size_t batch = std::min<std::size_t>(cfg.ft_batch.value_or(d_ft.size()), d_ft.size());
    Rng shuffle_rng(shuffle_seed);
    std::vector<std::size_t> idx(d_ft.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    Matrix acc_v(side), acc_kq(side);
    std::size_t applied_steps = 0;
    for (std::size_t epoch = 1; epoch <= cfg.ft_epochs; ++epoch) {
        shuffle_rng.shuffle(idx);
        double epoch_loss = 0.0;
        for (std::size_t b = 0; b < idx.size(); b += batch) {
            const std::size_t hi = std::min(idx.size(), b + batch);
            std::fill(acc_v.data().begin(), acc_v.data().end(), 0.0);
            std::fill(acc_kq.data().begin(), acc_kq.data().end(), 0.0);
            for (std::size_t j = b; j < hi; ++j) {
                const Example& ex = d_ft[idx[j]];
                const ForwardTrace tr = forward(res.params, ex.first, ex.second);
                const double loss = ce_loss(tr, ex.target);
                detail::guard(epoch, loss, 0.0);
                epoch_loss += loss;
                const GradPair g = grad_from_trace(res.params, tr, ex);
                for (std::size_t i = 0; i < side; ++i) {
                    acc_v(i, static_cast<std::size_t>(ex.first)) += g.v_col_first[i];
                    acc_v(i, static_cast<std::size_t>(ex.second)) += g.v_col_second[i];
                }
                acc_kq(static_cast<std::size_t>(ex.first), static_cast<std::size_t>(ex.second)) +=
                    g.kq_first_second;
                acc_kq(static_cast<std::size_t>(ex.second), static_cast<std::size_t>(ex.second)) +=
                    g.kq_second_second;
            }
            const double scale = cfg.lr / static_cast<double>(hi - b);
            double kq_delta_max = 0.0;
            for (std::size_t i = 0; i < side * side; ++i) {
                res.params.w_v.data()[i] -= scale * acc_v.data()[i];
                const double dkq = scale * acc_kq.data()[i];
                res.params.w_kq.data()[i] -= dkq;
                kq_delta_max = std::max(kq_delta_max, std::abs(dkq));
            }
            ++applied_steps;
            res.kq_update_peak = std::max(res.kq_update_peak, kq_delta_max);
            if (applied_steps <= 10)
                res.kq_update_first10_max = std::max(res.kq_update_first10_max, kq_delta_max);
            const double entry_max = std::max(res.params.w_v.max_abs(), res.params.w_kq.max_abs());
            if (entry_max > detail::kEntryCap)
                throw TrainDivergence(epoch, "parameter entry above cap");
            if (observer) {
                const Example& last = d_ft[idx[hi - 1]];
                observer(StepInfo{applied_steps, last, epoch_loss / static_cast<double>(hi), 0.0, 0.0,
                                  kq_delta_max, res.params});
            }
        }
        if (epoch % cfg.eval_every == 0 || epoch == cfg.ft_epochs)
            res.trace.push_back(detail::make_trace_row(
                res.params, epoch, epoch_loss / static_cast<double>(d_ft.size()), d_eval, d_ft));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Accuracy by popularity percentile.

struct PercentileCurve {
    std::vector<int> percentiles;                 // 5, 10, ..., 100
    std::vector<std::optional<double>> accuracy;  // nullopt marks an empty slice
    double overall = std::numeric_limits<double>::quiet_NaN();

    std::optional<double> at(int percentile) const {
        for (std::size_t i = 0; i < percentiles.size(); ++i)
            if (percentiles[i] == percentile) return accuracy[i];
        return std::nullopt;
    }
};

// Accuracy restricted to eval facts whose subject rank lies in the top x% of
// all subjects, for x on the 5..100 grid. The x = 100 point is the overall
// accuracy.
inline PercentileCurve evaluate(const ModelParams& p, std::span<const Example> d_eval,
                                std::span<const int> popularity_rank, const Vocabulary& v) {
    const int n = v.n_subjects();
    if (popularity_rank.size() != static_cast<std::size_t>(n))
        throw std::invalid_argument("evaluate: popularity_rank must cover every subject");
    std::vector<char> correct(d_eval.size(), 0);
    std::vector<int> ranks(d_eval.size(), 0);
    for (std::size_t i = 0; i < d_eval.size(); ++i) {
        const Example& ex = d_eval[i];
        ranks[i] = popularity_rank[static_cast<std::size_t>(v.subject_index(ex.first))];
        correct[i] = decode(p, ex.first, ex.second) == ex.target ? 1 : 0;
    }
    PercentileCurve out;
    for (int x = 5; x <= 100; x += 5) {
        const int rank_limit = static_cast<int>(static_cast<long long>(x) * n / 100);
        std::size_t total = 0, hits = 0;
        for (std::size_t i = 0; i < d_eval.size(); ++i) {
            if (ranks[i] < rank_limit) {
                ++total;
                hits += correct[i];
            }
        }
        out.percentiles.push_back(x);
        if (total == 0)
            out.accuracy.push_back(std::nullopt);
        else
            out.accuracy.push_back(static_cast<double>(hits) / static_cast<double>(total));
    }
    if (!out.accuracy.empty() && out.accuracy.back())
        out.overall = *out.accuracy.back();
    return out;
}

}  // namespace factlab
