#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <factlab/config.hpp>
#include <factlab/experiments.hpp>
#include <factlab/model.hpp>
#include <factlab/report.hpp>

namespace factlab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRunError = 1;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitTheoremFailure = 3;

namespace detail {

struct GlobalArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string experiment_override;
};

inline RunConfig resolve_config(const GlobalArgs& g) {
    nlohmann::json j = nlohmann::json::object();
    if (!g.config_path.empty()) {
        std::ifstream is(g.config_path);
        if (!is) throw ConfigError("config error: cannot open '" + g.config_path + "'");
        try {
            is >> j;
        } catch (const std::exception& e) {
            throw ConfigError("config error: invalid JSON in '" + g.config_path + "': " + e.what());
        }
        if (!j.is_object()) throw ConfigError("config error: document must be a JSON object");
    }
    // CLI overrides are applied to the document before strict parsing so that
    // experiment-specific defaults see them
    if (!g.experiment_override.empty()) j["experiment"] = g.experiment_override;
    if (g.seed_given) j["seeds"] = std::vector<std::uint64_t>{g.seed};
    return RunConfig::from_json(j);
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
}

inline int cmd_gen(const RunConfig& cfg, const std::filesystem::path& out) {
    std::filesystem::create_directories(out);
    const std::uint64_t seed = cfg.seeds.front();
    const KnowledgeBase kb = build_kb(cfg.vocab, role_seed(seed, SeedRole::kb));
    const auto stream =
        pretrain_stream(kb, cfg.zipf_alpha, cfg.train.pretrain_steps, role_seed(seed, SeedRole::stream));
    const DownstreamSplit split =
        downstream_datasets(kb, cfg.zipf_alpha, cfg.split, role_seed(seed, SeedRole::split));

    const auto dump = [&](const char* name, ExampleFormat fmt, std::span<const Example> rows) {
        std::ofstream os(out / name, std::ios::binary);
        if (!os) throw std::runtime_error(std::string("cannot write ") + name);
        write_dataset(os, cfg.vocab, fmt, rows);
    };
    const auto facts = kb.all_facts(ExampleFormat::pretrain);
    dump("kb.tsv", ExampleFormat::pretrain, facts);
    dump("pretrain_stream.tsv", ExampleFormat::pretrain, stream);
    dump("ft.tsv", ExampleFormat::downstream, split.ft);
    dump("eval.tsv", ExampleFormat::downstream, split.eval);
    std::cout << "wrote kb.tsv (" << facts.size() << " facts), pretrain_stream.tsv (" << stream.size()
              << "), ft.tsv (" << split.ft.size() << "), eval.tsv (" << split.eval.size() << ") to "
              << out.string() << "\n";
    return kExitOk;
}

inline double eval_accuracy(const ModelParams& p, std::span<const Example> exs) {
    return factlab::detail::eval_stats(p, exs).acc;
}

inline std::string make_run_id(const std::string& exp, double alpha, std::size_t steps,
                               const std::string& strategy, std::uint64_t seed) {
    return factlab::detail::run_id(exp, alpha, steps, strategy, seed);
}

inline int cmd_pretrain(const RunConfig& cfg, const std::filesystem::path& out) {
    std::filesystem::create_directories(out);
    const std::uint64_t seed = cfg.seeds.front();
    const KnowledgeBase kb = build_kb(cfg.vocab, role_seed(seed, SeedRole::kb));
    const auto stream =
        pretrain_stream(kb, cfg.zipf_alpha, cfg.train.pretrain_steps, role_seed(seed, SeedRole::stream));
    const auto facts = kb.all_facts(ExampleFormat::pretrain);
    ModelParams p0 = init_params(cfg.vocab, cfg.train.init_std, role_seed(seed, SeedRole::init));
    const PretrainResult res = pretrain(cfg.vocab, std::move(p0), stream, cfg.train, facts);

    save_params(res.params, out / "params_pretrain.bin");
    std::vector<TraceCsvRow> rows;
    const std::string id =
        make_run_id(cfg.experiment, cfg.zipf_alpha, cfg.train.pretrain_steps, "pretrain", seed);
    for (const TraceRow& row : res.trace)
        rows.push_back({id, seed, row.step, row.loss, row.eval_acc, row.mean_subject_att,
                        row.mean_relation_att, row.c_v, row.c_kq});
    std::ofstream os(out / "pretrain_trace.csv", std::ios::binary);
    write_trace_csv(os, rows);
    const double acc = res.trace.empty() ? eval_accuracy(res.params, facts) : res.trace.back().eval_acc;
    std::cout << "pretrained " << cfg.train.pretrain_steps << " steps; memorization accuracy "
              << format_double(acc) << "; params at " << (out / "params_pretrain.bin").string() << "\n";
    return kExitOk;
}

inline int cmd_finetune(const RunConfig& cfg, const std::filesystem::path& out,
                        const std::string& params_path) {
    std::filesystem::create_directories(out);
    const std::uint64_t seed = cfg.seeds.front();
    const KnowledgeBase kb = build_kb(cfg.vocab, role_seed(seed, SeedRole::kb));
    const DownstreamSplit split =
        downstream_datasets(kb, cfg.zipf_alpha, cfg.split, role_seed(seed, SeedRole::split));
    ModelParams p = load_params(params_path);
    if (p.side() != static_cast<std::size_t>(cfg.vocab.total()))
        throw std::runtime_error("finetune: params side does not match the config vocabulary");
    const FinetuneResult res =
        finetune(cfg.vocab, std::move(p), split.ft, split.eval, cfg.train, role_seed(seed, SeedRole::shuffle));

    save_params(res.params, out / "params_finetuned.bin");
    std::vector<TraceCsvRow> rows;
    const std::string id = make_run_id(cfg.experiment, cfg.zipf_alpha, cfg.train.pretrain_steps,
                                              to_string(cfg.split.strategy), seed);
    for (const TraceRow& row : res.trace)
        rows.push_back({id, seed, row.step, row.loss, row.eval_acc, row.mean_subject_att,
                        row.mean_relation_att, row.c_v, row.c_kq});
    std::ofstream os(out / "ft_trace.csv", std::ios::binary);
    write_trace_csv(os, rows);
    const double acc = res.trace.empty() ? eval_accuracy(res.params, split.eval)
                                         : res.trace.back().eval_acc;
    std::cout << "finetuned on " << to_string(cfg.split.strategy) << " split (" << split.ft.size()
              << " facts); eval accuracy " << format_double(acc) << "; params at "
              << (out / "params_finetuned.bin").string() << "\n";
    return kExitOk;
}

inline int cmd_eval(const RunConfig& cfg, const std::filesystem::path& out,
                    const std::string& params_path) {
    std::filesystem::create_directories(out);
    const std::uint64_t seed = cfg.seeds.front();
    const KnowledgeBase kb = build_kb(cfg.vocab, role_seed(seed, SeedRole::kb));
    const DownstreamSplit split =
        downstream_datasets(kb, cfg.zipf_alpha, cfg.split, role_seed(seed, SeedRole::split));
    const ModelParams p = load_params(params_path);
    if (p.side() != static_cast<std::size_t>(cfg.vocab.total()))
        throw std::runtime_error("eval: params side does not match the config vocabulary");
    const PercentileCurve curve = evaluate(p, split.eval, split.popularity_rank, cfg.vocab);

    std::vector<ResultRow> rows;
    const std::string id = make_run_id(cfg.experiment, cfg.zipf_alpha, cfg.train.pretrain_steps,
                                              to_string(cfg.split.strategy), seed);
    for (std::size_t i = 0; i < curve.percentiles.size(); ++i)
        if (curve.accuracy[i])
            rows.push_back({id, seed, cfg.experiment, cfg.zipf_alpha, cfg.train.pretrain_steps,
                            to_string(cfg.split.strategy), curve.percentiles[i], *curve.accuracy[i]});
    std::ofstream os(out / "percentiles.csv", std::ios::binary);
    write_results_csv(os, rows);
    std::cout << "overall accuracy " << format_double(curve.overall) << " over " << split.eval.size()
              << " eval facts; curve at " << (out / "percentiles.csv").string() << "\n";
    return kExitOk;
}

inline int print_verdicts_and_exit_code(const RunReport& report) {
    std::size_t failures = 0;
    for (const TheoremVerdict& verdict : report.verdicts) {
        const char* status = !verdict.hypothesis_met ? " n/a" : (verdict.conclusion_holds ? "  ok" : "FAIL");
        if (verdict.failed()) ++failures;
        std::cout << "[" << status << "] " << verdict.name << "\n";
    }
    std::cout << (failures == 0 ? "theorem suite passed (" : "theorem suite FAILED (")
              << report.verdicts.size() << " checks, " << failures << " failures)\n";
    return failures == 0 ? kExitOk : kExitTheoremFailure;
}

inline int cmd_verify(const RunConfig& cfg, const std::filesystem::path& out) {
    RunConfig vcfg = cfg;
    vcfg.experiment = "verify";
    const RunReport report = run_verify_experiment(vcfg);
    write_report(report, out);
    return print_verdicts_and_exit_code(report);
}

inline int cmd_sweep(const RunConfig& cfg, const std::filesystem::path& out) {
    const RunReport report = run_experiment(cfg);
    const SweepFiles files = write_report(report, out);
    if (cfg.experiment == "verify") return print_verdicts_and_exit_code(report);

    std::cout << "experiment " << cfg.experiment << ": " << report.rows.size() << " result rows, "
              << report.trace_rows.size() << " trace rows\n";
    std::set<std::pair<double, std::size_t>> cells;
    std::set<std::uint64_t> seeds;
    for (const ResultRow& r : report.rows) {
        cells.insert({r.alpha, r.pretrain_steps});
        seeds.insert(r.seed);
    }
    for (const auto& [alpha, steps] : cells) {
        std::vector<double> gaps;
        for (const std::uint64_t seed : seeds) {
            const auto gap = seed_gap(report.rows, seed, alpha, steps);
            if (gap) gaps.push_back(*gap);
        }
        if (!gaps.empty())
            std::cout << "  alpha=" << format_double(alpha) << " steps=" << steps
                      << " gap(top-bottom)=" << format_double(mean_sd(gaps).mean) << "\n";
    }
    std::cout << "results: " << files.results_csv.string() << "\n";
    for (const auto& svg : files.svgs) std::cout << "chart:   " << svg.string() << "\n";
    return kExitOk;
}

inline int cmd_plot(const std::filesystem::path& csv, const std::filesystem::path& out) {
    std::ifstream is(csv);
    if (!is) throw std::runtime_error("cannot open " + csv.string());
    std::string header;
    std::getline(is, header);
    is.seekg(0);
    std::filesystem::create_directories(out);

    if (header == kResultsCsvHeader) {
        RunReport report;
        report.rows = parse_results_csv(is);
        report.experiment = report.rows.empty() ? "E1" : report.rows.front().experiment;
        const auto series = factlab::detail::percentile_series(report);
        factlab::detail::write_svg(out, "percentiles.svg",
                                   {640, 400, "Accuracy by test popularity percentile",
                                    "top x% of subjects", "accuracy"},
                                   series);
        std::set<double> alphas;
        std::set<std::size_t> steps;
        for (const ResultRow& r : report.rows) {
            alphas.insert(r.alpha);
            steps.insert(r.pretrain_steps);
        }
        if (alphas.size() > 1) {
            const SvgSeries s = factlab::detail::gap_series(report, true);
            factlab::detail::write_svg(out, "gap_vs_alpha.svg",
                                       {640, 400, "Top - Bottom gap vs Zipf alpha", "zipf alpha",
                                        "accuracy gap"},
                                       {&s, 1});
        }
        if (steps.size() > 1) {
            const SvgSeries s = factlab::detail::gap_series(report, false);
            factlab::detail::write_svg(out, "gap_vs_steps.svg",
                                       {640, 400, "Top - Bottom gap vs pretraining steps",
                                        "pretraining steps", "accuracy gap"},
                                       {&s, 1});
        }
        std::cout << "plotted " << report.rows.size() << " result rows to " << out.string() << "\n";
        return kExitOk;
    }
    if (header == kTraceCsvHeader) {
        RunReport report;
        report.trace_rows = parse_trace_csv(is);
        factlab::detail::write_svg(out, "trace_eval_accuracy.svg",
                                   {640, 400, "Eval accuracy", "step", "accuracy"},
                                   factlab::detail::trace_series(report, &TraceCsvRow::eval_acc, "eval accuracy"));
        factlab::detail::write_svg(out, "trace_subject_attention.svg",
                                   {640, 400, "Subject attention", "step", "mean attention"},
                                   factlab::detail::trace_series(report, &TraceCsvRow::subj_att, "subject attention"));
        factlab::detail::write_svg(out, "trace_relation_attention.svg",
                                   {640, 400, "Relation attention", "step", "mean attention"},
                                   factlab::detail::trace_series(report, &TraceCsvRow::rel_att, "relation attention"));
        factlab::detail::write_svg(out, "trace_loss.svg", {640, 400, "Training loss", "step", "loss"},
                                   factlab::detail::trace_series(report, &TraceCsvRow::loss, "loss"));
        std::cout << "plotted " << report.trace_rows.size() << " trace rows to " << out.string() << "\n";
        return kExitOk;
    }
    throw std::runtime_error("unrecognized csv header in " + csv.string());
}

}  // namespace detail

inline int run(int argc, const char* const* argv) {
    detail::GlobalArgs g;
    std::string params_path;
    std::string plot_csv;

    CLI::App app{"synthetic factual-knowledge laboratory for a one-layer transformer"};
    app.require_subcommand(1);
    app.add_option("--config", g.config_path, "JSON run config file");
    auto* seed_opt = app.add_option("--seed", g.seed, "override the config seed list with one seed");
    app.add_option("--out", g.out_dir, "output directory (default: out)");

    CLI::App* gen = app.add_subcommand("gen", "emit knowledge base and dataset files");
    CLI::App* pre = app.add_subcommand("pretrain", "run pretraining; writes params and trace");
    CLI::App* ft = app.add_subcommand("finetune", "finetune saved params on the configured split");
    ft->add_option("--params", params_path, "pretrained params file")->required();
    CLI::App* ev = app.add_subcommand("eval", "percentile accuracy of saved params");
    ev->add_option("--params", params_path, "params file")->required();
    CLI::App* verify = app.add_subcommand("verify", "run the full theorem suite");
    CLI::App* sweep = app.add_subcommand("sweep", "run an experiment across seeds");
    std::string experiment;
    sweep->add_option("--experiment", experiment, "E1, E2, E3, E4 or verify");
    CLI::App* plot = app.add_subcommand("plot", "render charts from an emitted csv");
    plot->add_option("csv", plot_csv, "results or trace csv file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfigError;
    }

    try {
        g.seed_given = seed_opt->count() > 0;
        if (sweep->parsed() && !experiment.empty()) g.experiment_override = experiment;
        const std::filesystem::path out = g.out_dir;

        if (plot->parsed()) return detail::cmd_plot(plot_csv, out);

        const RunConfig cfg = detail::resolve_config(g);
        if (gen->parsed()) return detail::cmd_gen(cfg, out);
        if (pre->parsed()) return detail::cmd_pretrain(cfg, out);
        if (ft->parsed()) return detail::cmd_finetune(cfg, out, params_path);
        if (ev->parsed()) return detail::cmd_eval(cfg, out, params_path);
        if (verify->parsed()) return detail::cmd_verify(cfg, out);
        if (sweep->parsed()) return detail::cmd_sweep(cfg, out);
        return kExitConfigError;
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::cerr << "run error: " << e.what() << "\n";
        return kExitRunError;
    }
}

inline int run(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.reserve(args.size());
    for (const std::string& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace factlab::cli
