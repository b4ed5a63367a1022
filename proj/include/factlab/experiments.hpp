#pragma once

#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <factlab/config.hpp>
#include <factlab/report.hpp>
#include <factlab/svg.hpp>
#include <factlab/verify.hpp>

namespace factlab {

inline constexpr double kMemorizationGate = 0.99;

namespace detail {

// Deterministic parallel-for: results land in caller-owned slots indexed by
// cell, so the aggregate is independent of scheduling.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&]() {
            for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
                try {
                    fn(i);
                } catch (...) {
                    const std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (std::thread& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

inline std::string run_id(const std::string& experiment, double alpha, std::size_t steps,
                          const std::string& strategy, std::uint64_t seed) {
    return experiment + "-a" + format_double(alpha) + "-n" + std::to_string(steps) + "-" + strategy +
           "-s" + std::to_string(seed);
}

}  // namespace detail

// Seed-stream roles derived from one run seed.
enum class SeedRole : std::uint64_t { kb = 0, stream = 1, init = 2, split = 3, shuffle = 4 };

inline std::uint64_t role_seed(std::uint64_t seed, SeedRole role) {
    return mix_seed(seed, static_cast<std::uint64_t>(role));
}

struct StrategyOutcome {
    SplitStrategy strategy = SplitStrategy::whole;
    PercentileCurve curve;
    std::vector<TraceRow> ft_trace;
    double kq_update_peak = 0.0;
    double kq_update_first10 = 0.0;
    double final_subject_att = std::numeric_limits<double>::quiet_NaN();
    double final_relation_att = std::numeric_limits<double>::quiet_NaN();
    double peak_eval_acc = std::numeric_limits<double>::quiet_NaN();
    double final_eval_acc = std::numeric_limits<double>::quiet_NaN();
};

struct CellOutcome {
    double alpha = 0.0;
    std::size_t steps = 0;
    std::uint64_t seed = 0;
    double pretrain_acc = std::numeric_limits<double>::quiet_NaN();
    bool memorization_ok = false;
    std::vector<TraceRow> pre_trace;
    double pre_kq_update_peak = 0.0;
    double pre_kq_update_first10 = 0.0;
    std::vector<StrategyOutcome> runs;
};

// One fully isolated simulation cell: fresh knowledge base, stream and init
// per seed, one pretraining pass, then an independent finetune per strategy
// from copies of the pretrained parameters.
inline CellOutcome run_cell(const RunConfig& cfg, double alpha, std::size_t steps, std::uint64_t seed,
                            std::span<const SplitStrategy> strategies) {
    CellOutcome out;
    out.alpha = alpha;
    out.steps = steps;
    out.seed = seed;

    TrainConfig tc = cfg.train;
    tc.pretrain_steps = steps;

    const KnowledgeBase kb = build_kb(cfg.vocab, role_seed(seed, SeedRole::kb));
    const auto stream = pretrain_stream(kb, alpha, steps, role_seed(seed, SeedRole::stream));
    const auto facts = kb.all_facts(ExampleFormat::pretrain);
    ModelParams p0 = init_params(cfg.vocab, tc.init_std, role_seed(seed, SeedRole::init));

    PretrainResult pre = pretrain(cfg.vocab, std::move(p0), stream, tc, facts);
    out.pre_trace = std::move(pre.trace);
    out.pre_kq_update_peak = pre.kq_update_peak;
    out.pre_kq_update_first10 = pre.kq_update_first10_max;
    out.pretrain_acc = detail::eval_stats(pre.params, facts).acc;
    out.memorization_ok = out.pretrain_acc >= kMemorizationGate;

    for (const SplitStrategy strategy : strategies) {
        const SplitSpec spec{strategy, cfg.split.fraction, cfg.split.eval_fraction};
        const DownstreamSplit split = downstream_datasets(kb, alpha, spec, role_seed(seed, SeedRole::split));
        FinetuneResult ft = finetune(cfg.vocab, pre.params, split.ft, split.eval, tc,
                                     role_seed(seed, SeedRole::shuffle));
        StrategyOutcome run;
        run.strategy = strategy;
        run.curve = evaluate(ft.params, split.eval, split.popularity_rank, cfg.vocab);
        run.kq_update_peak = ft.kq_update_peak;
        run.kq_update_first10 = ft.kq_update_first10_max;
        if (!ft.trace.empty()) {
            run.final_subject_att = ft.trace.back().mean_subject_att;
            run.final_relation_att = ft.trace.back().mean_relation_att;
            run.final_eval_acc = ft.trace.back().eval_acc;
            double peak = -std::numeric_limits<double>::infinity();
            for (const TraceRow& row : ft.trace) peak = std::max(peak, row.eval_acc);
            run.peak_eval_acc = peak;
        }
        run.ft_trace = std::move(ft.trace);
        out.runs.push_back(std::move(run));
    }
    return out;
}

namespace detail {

inline void append_cell(RunReport& report, const RunConfig& cfg, const CellOutcome& cell) {
    const std::string& exp = report.experiment;
    // pretraining trace rows
    const std::string pre_id = run_id(exp, cell.alpha, cell.steps, "pretrain", cell.seed);
    for (const TraceRow& row : cell.pre_trace)
        report.trace_rows.push_back({pre_id, cell.seed, row.step, row.loss, row.eval_acc,
                                     row.mean_subject_att, row.mean_relation_att, row.c_v, row.c_kq});
    for (const StrategyOutcome& run : cell.runs) {
        const std::string id = run_id(exp, cell.alpha, cell.steps, to_string(run.strategy), cell.seed);
        for (std::size_t i = 0; i < run.curve.percentiles.size(); ++i) {
            if (!run.curve.accuracy[i]) continue;  // absent slice: no row
            report.rows.push_back({id, cell.seed, exp, cell.alpha, cell.steps, to_string(run.strategy),
                                   run.curve.percentiles[i], *run.curve.accuracy[i]});
        }
        for (const TraceRow& row : run.ft_trace)
            report.trace_rows.push_back({id, cell.seed, row.step, row.loss, row.eval_acc,
                                         row.mean_subject_att, row.mean_relation_att, row.c_v, row.c_kq});
        SeedSummary summary;
        summary.run_id = id;
        summary.seed = cell.seed;
        summary.alpha = cell.alpha;
        summary.pretrain_steps = cell.steps;
        summary.strategy = to_string(run.strategy);
        summary.overall = run.curve.overall;
        summary.pretrain_acc = cell.pretrain_acc;
        summary.memorization_ok = cell.memorization_ok;
        summary.final_subject_att = run.final_subject_att;
        summary.final_relation_att = run.final_relation_att;
        summary.peak_eval_acc = run.peak_eval_acc;
        summary.final_eval_acc = run.final_eval_acc;
        summary.kq_update_peak = std::max(cell.pre_kq_update_peak, run.kq_update_peak);
        summary.kq_update_first10 = cell.pre_kq_update_first10;
        report.summaries.push_back(std::move(summary));
    }
    (void)cfg;
}

inline RunReport grid_experiment(const RunConfig& cfg, std::span<const double> alphas,
                                 std::span<const std::size_t> step_grid,
                                 std::span<const SplitStrategy> strategies) {
    RunReport report;
    report.experiment = cfg.experiment;
    report.config_echo = cfg.to_json();

    struct CellSpec {
        double alpha;
        std::size_t steps;
        std::uint64_t seed;
    };
    std::vector<CellSpec> specs;
    for (const double alpha : alphas)
        for (const std::size_t steps : step_grid)
            for (const std::uint64_t seed : cfg.seeds) specs.push_back({alpha, steps, seed});

    std::vector<CellOutcome> outcomes(specs.size());
    parallel_for(specs.size(), cfg.threads, [&](std::size_t i) {
        outcomes[i] = run_cell(cfg, specs[i].alpha, specs[i].steps, specs[i].seed, strategies);
    });
    for (const CellOutcome& cell : outcomes) append_cell(report, cfg, cell);
    return report;
}

}  // namespace detail

// Fig 2a: one pretraining per seed, finetunes on all four splits.
inline RunReport experiment_E1(const RunConfig& cfg) {
    static constexpr SplitStrategy kAll[] = {SplitStrategy::top, SplitStrategy::bottom,
                                             SplitStrategy::random, SplitStrategy::whole};
    const double alpha[] = {cfg.zipf_alpha};
    const std::size_t steps[] = {cfg.train.pretrain_steps};
    return detail::grid_experiment(cfg, alpha, steps, kAll);
}

// Fig 2b: the Top-vs-Bottom gap as a function of the Zipf exponent.
inline RunReport experiment_E2(const RunConfig& cfg) {
    static constexpr SplitStrategy kGap[] = {SplitStrategy::top, SplitStrategy::bottom};
    const std::size_t steps[] = {cfg.train.pretrain_steps};
    return detail::grid_experiment(cfg, cfg.alphas, steps, kGap);
}

// Fig 2c: the gap as a function of the pretraining budget.
inline RunReport experiment_E3(const RunConfig& cfg) {
    static constexpr SplitStrategy kGap[] = {SplitStrategy::top, SplitStrategy::bottom};
    const double alpha[] = {cfg.zipf_alpha};
    return detail::grid_experiment(cfg, alpha, cfg.step_grid, kGap);
}

// Low-variance init, long FT-Bottom finetuning: accuracy and attention traces
// showing the collapse, plus the two-stage update magnitudes.
inline RunReport experiment_E4(const RunConfig& cfg) {
    const SplitStrategy strategy[] = {cfg.split.strategy};
    const double alpha[] = {cfg.zipf_alpha};
    const std::size_t steps[] = {cfg.train.pretrain_steps};
    return detail::grid_experiment(cfg, alpha, steps, strategy);
}

// ---------------------------------------------------------------------------
// Theorem suite.

inline std::vector<TheoremVerdict> run_theorem_suite(const RunConfig& cfg) {
    std::vector<TheoremVerdict> verdicts;
    const Vocabulary& v = cfg.vocab;

    for (const std::uint64_t seed : cfg.seeds) {
        const std::string tag = "[seed " + std::to_string(seed) + "] ";
        const KnowledgeBase kb = build_kb(v, role_seed(seed, SeedRole::kb));
        const auto facts = kb.all_facts(ExampleFormat::pretrain);

        // memorizing construction decodes every fact
        {
            const ModelParams p = construct_memorizer(kb);
            std::size_t correct = 0;
            for (const Example& fact : facts)
                if (decode(p, fact.first, fact.second) == fact.target) ++correct;
            TheoremVerdict verdict{tag + "memorization", true, correct == facts.size(),
                                   {{"facts", facts.size()}, {"correct", correct}}};
            verdicts.push_back(std::move(verdict));
        }

        // softmax bounds hold on every forward pass of the constructed models
        {
            const ModelParams p = construct_frequency_memorizer(kb);
            TheoremVerdict verdict{tag + "forward_softmax_bounds", true, true, {}};
            double worst_ratio = 0.0;
            for (const Example& fact : facts) {
                const ForwardTrace tr = forward(p, fact.first, fact.second);
                double c = 0.0;
                for (double z : tr.presoftmax) c = std::max(c, std::abs(z));
                const double hi = *std::max_element(tr.probs.begin(), tr.probs.end());
                const double lo = *std::min_element(tr.probs.begin(), tr.probs.end());
                const double max_bound = std::exp(2.0 * c) / static_cast<double>(p.side() - 1);
                const double min_bound = std::exp(-2.0 * c) / static_cast<double>(p.side());
                worst_ratio = std::max(worst_ratio, hi / max_bound);
                if (hi > max_bound * (1.0 + 1e-12) || lo < min_bound * (1.0 - 1e-12)) {
                    verdict.conclusion_holds = false;
                    verdict.witness = {{"subject", fact.first}, {"relation", fact.second}};
                    break;
                }
            }
            if (verdict.conclusion_holds) verdict.witness = {{"worst_max_ratio", worst_ratio}};
            verdicts.push_back(std::move(verdict));
        }

        // assumptions and the hidden-knowledge construction
        const ModelParams freq = construct_frequency_memorizer(kb);
        for (TheoremVerdict verdict : check_assumptions(kb, freq)) {
            verdict.name = tag + verdict.name;
            verdicts.push_back(std::move(verdict));
        }
        {
            HiddenKqResult hidden = construct_hidden_kq(freq, kb);
            hidden.verdict.name = tag + hidden.verdict.name;
            verdicts.push_back(hidden.verdict);

            // attention threshold on a sample of dominated facts
            int checked = 0;
            bool all_ok = true;
            for (const Example& fact : hidden.d_min) {
                const TheoremVerdict verdict = check_attention_threshold(freq, kb, fact.first, fact.second);
                if (verdict.hypothesis_met && !verdict.conclusion_holds) all_ok = false;
                if (++checked == 5) break;
            }
            verdicts.push_back({tag + "attention_threshold_sample", checked > 0, all_ok,
                                {{"facts_checked", checked}}});
        }

        // gradient sign law over randomized instances
        {
            Rng rng(role_seed(seed, SeedRole::stream));
            std::vector<Token> probes;
            for (int s = 0; s < v.n_subjects(); s += std::max(1, v.n_subjects() / 16))
                probes.push_back(v.subject_token(s));
            std::size_t trials = 50, violations = 0;
            for (std::size_t t = 0; t < trials; ++t) {
                ModelParams p(static_cast<std::size_t>(v.total()));
                for (double& x : p.w_v.data()) x = 0.8 * rng.gaussian();
                for (double& x : p.w_kq.data()) x = 0.8 * rng.gaussian();
                const Example ex{
                    v.subject_token(static_cast<int>(rng.below(static_cast<std::uint64_t>(v.n_subjects())))),
                    v.prompt_token(static_cast<int>(rng.below(static_cast<std::uint64_t>(v.n_relations())))),
                    v.answer_token(static_cast<int>(rng.below(static_cast<std::uint64_t>(v.n_answers()))))};
                if (!check_gradient_sign(p, ex, probes).conclusion_holds) ++violations;
            }
            verdicts.push_back({tag + "gradient_sign_trials", true, violations == 0,
                                {{"trials", trials}, {"violations", violations}}});
        }

        // salience lower bound on a gentle batch-size-1 run from zero init
        {
            TrainConfig tc;
            tc.lr = 0.01;
            tc.pretrain_steps = 3000;
            tc.eval_every = 100000;
            tc.init_std = 0.0;
            const auto stream = pretrain_stream(kb, cfg.zipf_alpha, tc.pretrain_steps,
                                                role_seed(seed, SeedRole::stream));
            const auto run = pretrain(v, init_params(v, 0.0, 0), stream, tc);
            SalienceBoundReport rep = check_salience_bound(kb, run, tc.lr);
            rep.verdict.name = tag + rep.verdict.name;
            verdicts.push_back(rep.verdict);
        }
    }

    // softmax bounds across dimensions and radii (seed-independent)
    for (const std::size_t dim : {2u, 10u, 200u}) {
        for (const double c : {0.0, 0.5, 2.0}) {
            TheoremVerdict verdict = check_softmax_bounds(dim, c, 1000, 1234);
            verdict.name += "[d=" + std::to_string(dim) + ",C=" + format_double(c) + "]";
            verdicts.push_back(std::move(verdict));
        }
    }
    return verdicts;
}

inline RunReport run_verify_experiment(const RunConfig& cfg) {
    RunReport report;
    report.experiment = "verify";
    report.config_echo = cfg.to_json();
    report.verdicts = run_theorem_suite(cfg);
    return report;
}

inline RunReport run_experiment(const RunConfig& cfg) {
    if (cfg.experiment == "E1") return experiment_E1(cfg);
    if (cfg.experiment == "E2") return experiment_E2(cfg);
    if (cfg.experiment == "E3") return experiment_E3(cfg);
    if (cfg.experiment == "E4") return experiment_E4(cfg);
    if (cfg.experiment == "verify") return run_verify_experiment(cfg);
    throw ConfigError("config error: unknown experiment '" + cfg.experiment + "'");
}

// ---------------------------------------------------------------------------
// Persistence: CSVs, SVG panels and the report document.

struct SweepFiles {
    std::filesystem::path results_csv;
    std::filesystem::path traces_csv;
    std::filesystem::path report_json;
    std::vector<std::filesystem::path> svgs;
};

namespace detail {

inline std::vector<SvgSeries> percentile_series(const RunReport& report) {
    std::set<std::string> strategies;
    for (const ResultRow& r : report.rows) strategies.insert(r.strategy);
    std::vector<SvgSeries> series;
    std::size_t color = 0;
    for (const std::string& strategy : strategies) {
        SvgSeries s;
        s.label = strategy;
        s.color = series_color(color++);
        for (int x = 5; x <= 100; x += 5) {
            std::vector<double> accs;
            for (const ResultRow& r : report.rows)
                if (r.strategy == strategy && r.percentile == x) accs.push_back(r.accuracy);
            if (!accs.empty()) s.points.push_back({static_cast<double>(x), mean_sd(accs).mean});
        }
        series.push_back(std::move(s));
    }
    return series;
}

inline SvgSeries gap_series(const RunReport& report, bool by_alpha) {
    std::map<double, std::vector<double>> gaps;  // x -> per-seed gaps
    std::set<std::pair<double, std::size_t>> cells;
    std::set<std::uint64_t> seeds;
    for (const ResultRow& r : report.rows) {
        cells.insert({r.alpha, r.pretrain_steps});
        seeds.insert(r.seed);
    }
    for (const auto& [alpha, steps] : cells) {
        const double x = by_alpha ? alpha : static_cast<double>(steps);
        for (const std::uint64_t seed : seeds) {
            const auto gap = seed_gap(report.rows, seed, alpha, steps);
            if (gap) gaps[x].push_back(*gap);
        }
    }
    SvgSeries s;
    s.label = "top - bottom";
    s.color = series_color(0);
    for (const auto& [x, values] : gaps) s.points.push_back({x, mean_sd(values).mean});
    return s;
}

inline std::vector<SvgSeries> trace_series(const RunReport& report, double TraceCsvRow::*field,
                                           const std::string& label) {
    // mean over seeds of the finetune trace, step-aligned; pretraining rows
    // are excluded by their run_id
    std::map<std::size_t, std::vector<double>> by_step;
    for (const TraceCsvRow& r : report.trace_rows) {
        if (r.run_id.find("-pretrain-") != std::string::npos) continue;
        by_step[r.step].push_back(r.*field);
    }
    SvgSeries s;
    s.label = label;
    s.color = series_color(0);
    for (const auto& [step, values] : by_step)
        s.points.push_back({static_cast<double>(step), mean_sd(values).mean});
    return {std::move(s)};
}

inline std::filesystem::path write_svg(const std::filesystem::path& dir, const std::string& name,
                                       const SvgOptions& opt, std::span<const SvgSeries> series) {
    const std::filesystem::path path = dir / name;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    write_line_chart(os, opt, series);
    return path;
}

}  // namespace detail

inline SweepFiles write_report(const RunReport& report, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    SweepFiles files;

    files.results_csv = out_dir / "results.csv";
    {
        std::ofstream os(files.results_csv, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + files.results_csv.string());
        write_results_csv(os, report.rows);
    }
    files.traces_csv = out_dir / "traces.csv";
    {
        std::ofstream os(files.traces_csv, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + files.traces_csv.string());
        write_trace_csv(os, report.trace_rows);
    }
    files.report_json = out_dir / "report.json";
    {
        std::ofstream os(files.report_json, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + files.report_json.string());
        os << report_to_json(report).dump(2) << '\n';
    }

    const std::string& exp = report.experiment;
    if (exp == "E1") {
        const auto series = detail::percentile_series(report);
        files.svgs.push_back(detail::write_svg(out_dir, "e1_percentiles.svg",
                                               {640, 400, "Accuracy by test popularity percentile",
                                                "top x% of subjects", "accuracy"},
                                               series));
    } else if (exp == "E2") {
        const SvgSeries s = detail::gap_series(report, true);
        files.svgs.push_back(detail::write_svg(
            out_dir, "e2_gap_vs_alpha.svg",
            {640, 400, "Top - Bottom gap vs Zipf alpha", "zipf alpha", "accuracy gap"}, {&s, 1}));
    } else if (exp == "E3") {
        const SvgSeries s = detail::gap_series(report, false);
        files.svgs.push_back(detail::write_svg(
            out_dir, "e3_gap_vs_steps.svg",
            {640, 400, "Top - Bottom gap vs pretraining steps", "pretraining steps", "accuracy gap"},
            {&s, 1}));
    } else if (exp == "E4") {
        files.svgs.push_back(detail::write_svg(out_dir, "e4_eval_accuracy.svg",
                                               {640, 400, "Eval accuracy during finetuning",
                                                "finetune epoch", "accuracy"},
                                               detail::trace_series(report, &TraceCsvRow::eval_acc, "eval accuracy")));
        files.svgs.push_back(detail::write_svg(out_dir, "e4_subject_attention.svg",
                                               {640, 400, "Subject attention during finetuning",
                                                "finetune epoch", "mean attention"},
                                               detail::trace_series(report, &TraceCsvRow::subj_att, "subject attention")));
        files.svgs.push_back(detail::write_svg(out_dir, "e4_relation_attention.svg",
                                               {640, 400, "Relation attention during finetuning",
                                                "finetune epoch", "mean attention"},
                                               detail::trace_series(report, &TraceCsvRow::rel_att, "relation attention")));
    }

    if (!report.verdicts.empty()) {
        const std::filesystem::path verdicts_path = out_dir / "verdicts.json";
        std::ofstream os(verdicts_path, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + verdicts_path.string());
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const TheoremVerdict& verdict : report.verdicts) arr.push_back(verdict.to_json());
        os << arr.dump(2) << '\n';
    }
    return files;
}

}  // namespace factlab
