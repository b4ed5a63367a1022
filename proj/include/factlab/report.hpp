#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include <factlab/format.hpp>
#include <factlab/knowledge.hpp>
#include <factlab/train.hpp>
#include <factlab/verify.hpp>

namespace factlab {

// One accuracy measurement: a (run, percentile) cell of the results table.
// Empty slices are simply not emitted, so row presence marks a non-empty
// slice.
struct ResultRow {
    std::string run_id;
    std::uint64_t seed = 0;
    std::string experiment;
    double alpha = 0.0;
    std::size_t pretrain_steps = 0;
    std::string strategy;
    int percentile = 100;
    double accuracy = 0.0;
    friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

struct TraceCsvRow {
    std::string run_id;
    std::uint64_t seed = 0;
    std::size_t step = 0;
    double loss = 0.0;
    double eval_acc = 0.0;
    double subj_att = 0.0;
    double rel_att = 0.0;
    double c_v = 0.0;
    double c_kq = 0.0;
    friend bool operator==(const TraceCsvRow&, const TraceCsvRow&) = default;
};

// Per-(cell, strategy, seed) endpoint facts used by aggregates and the
// acceptance gates.
struct SeedSummary {
    std::string run_id;
    std::uint64_t seed = 0;
    double alpha = 0.0;
    std::size_t pretrain_steps = 0;
    std::string strategy;
    double overall = std::numeric_limits<double>::quiet_NaN();
    double pretrain_acc = std::numeric_limits<double>::quiet_NaN();
    bool memorization_ok = false;  // pretrain-format accuracy >= 0.99 before finetuning
    double final_subject_att = std::numeric_limits<double>::quiet_NaN();
    double final_relation_att = std::numeric_limits<double>::quiet_NaN();
    double peak_eval_acc = std::numeric_limits<double>::quiet_NaN();
    double final_eval_acc = std::numeric_limits<double>::quiet_NaN();
    double kq_update_peak = 0.0;      // over pretraining and finetuning
    double kq_update_first10 = 0.0;   // over the first 10 optimizer steps of the run
};

struct RunReport {
    std::string experiment;
    nlohmann::ordered_json config_echo;
    std::vector<ResultRow> rows;
    std::vector<TraceCsvRow> trace_rows;
    std::vector<SeedSummary> summaries;
    std::vector<TheoremVerdict> verdicts;
};

// ---------------------------------------------------------------------------
// CSV schemas.

inline constexpr const char* kResultsCsvHeader =
    "run_id,seed,experiment,alpha,pretrain_steps,strategy,percentile,accuracy";
inline constexpr const char* kTraceCsvHeader =
    "run_id,seed,step,loss,eval_acc,subj_att,rel_att,c_v,c_kq";

inline void write_results_csv(std::ostream& os, std::span<const ResultRow> rows) {
    os << kResultsCsvHeader << '\n';
    for (const ResultRow& r : rows) {
        os << r.run_id << ',' << r.seed << ',' << r.experiment << ',' << format_double(r.alpha) << ','
           << r.pretrain_steps << ',' << r.strategy << ',' << r.percentile << ','
           << format_double(r.accuracy) << '\n';
    }
}

inline void write_trace_csv(std::ostream& os, std::span<const TraceCsvRow> rows) {
    os << kTraceCsvHeader << '\n';
    for (const TraceCsvRow& r : rows) {
        os << r.run_id << ',' << r.seed << ',' << r.step << ',' << format_double(r.loss) << ','
           << format_double(r.eval_acc) << ',' << format_double(r.subj_att) << ','
           << format_double(r.rel_att) << ',' << format_double(r.c_v) << ',' << format_double(r.c_kq)
           << '\n';
    }
}

inline std::vector<ResultRow> parse_results_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kResultsCsvHeader)
        throw std::runtime_error("results csv: bad header");
    std::vector<ResultRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 8) throw std::runtime_error("results csv: bad row '" + line + "'");
        rows.push_back({f[0], parse_u64(f[1]), f[2], parse_double(f[3]),
                        static_cast<std::size_t>(parse_u64(f[4])), f[5],
                        static_cast<int>(parse_u64(f[6])), parse_double(f[7])});
    }
    return rows;
}

inline std::vector<TraceCsvRow> parse_trace_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kTraceCsvHeader)
        throw std::runtime_error("trace csv: bad header");
    std::vector<TraceCsvRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 9) throw std::runtime_error("trace csv: bad row '" + line + "'");
        rows.push_back({f[0], parse_u64(f[1]), static_cast<std::size_t>(parse_u64(f[2])),
                        parse_double(f[3]), parse_double(f[4]), parse_double(f[5]), parse_double(f[6]),
                        parse_double(f[7]), parse_double(f[8])});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Aggregation.

struct MeanSd {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double sd = std::numeric_limits<double>::quiet_NaN();
    std::size_t n = 0;
};

inline MeanSd mean_sd(std::span<const double> xs) {
    MeanSd out;
    out.n = xs.size();
    if (xs.empty()) return out;
    double sum = 0.0;
    for (double x : xs) sum += x;
    out.mean = sum / static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double sq = 0.0;
        for (double x : xs) sq += (x - out.mean) * (x - out.mean);
        out.sd = std::sqrt(sq / static_cast<double>(xs.size() - 1));
    } else {
        out.sd = 0.0;
    }
    return out;
}

// Spearman rank correlation with average ranks on ties.
inline double spearman_rho(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2)
        throw std::invalid_argument("spearman_rho: need two equally sized samples");
    const auto ranks = [](std::span<const double> v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(n, 0.0);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const std::vector<double> rx = ranks(x), ry = ranks(y);
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= static_cast<double>(rx.size());
    my /= static_cast<double>(ry.size());
    double num = 0.0, dx = 0.0, dy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    if (dx == 0.0 || dy == 0.0) return 0.0;
    return num / std::sqrt(dx * dy);
}

// accuracy of one (seed, alpha, steps, strategy, percentile) cell
inline std::optional<double> accuracy_of(std::span<const ResultRow> rows, std::uint64_t seed, double alpha,
                                         std::size_t steps, const std::string& strategy, int percentile) {
    for (const ResultRow& r : rows) {
        if (r.seed == seed && r.alpha == alpha && r.pretrain_steps == steps && r.strategy == strategy &&
            r.percentile == percentile)
            return r.accuracy;
    }
    return std::nullopt;
}

// accuracy(top) - accuracy(bottom) for one seed and cell
inline std::optional<double> seed_gap(std::span<const ResultRow> rows, std::uint64_t seed, double alpha,
                                      std::size_t steps, int percentile = 100) {
    const auto top = accuracy_of(rows, seed, alpha, steps, "top", percentile);
    const auto bottom = accuracy_of(rows, seed, alpha, steps, "bottom", percentile);
    if (!top || !bottom) return std::nullopt;
    return *top - *bottom;
}

// Aggregates recomputed from the emitted rows, so every reported number is
// traceable to a CSV row.
inline nlohmann::ordered_json report_to_json(const RunReport& report) {
    nlohmann::ordered_json j;
    j["experiment"] = report.experiment;
    j["config"] = report.config_echo;

    // collect cells
    std::map<std::pair<double, std::size_t>, std::set<std::uint64_t>> cells;
    std::set<std::string> strategies;
    for (const ResultRow& r : report.rows) {
        cells[{r.alpha, r.pretrain_steps}].insert(r.seed);
        strategies.insert(r.strategy);
    }

    nlohmann::ordered_json cells_json = nlohmann::ordered_json::array();
    for (const auto& [cell, seeds] : cells) {
        nlohmann::ordered_json c;
        c["alpha"] = cell.first;
        c["pretrain_steps"] = cell.second;
        for (const std::string& strategy : strategies) {
            std::vector<double> overall;
            for (std::uint64_t seed : seeds) {
                const auto acc = accuracy_of(report.rows, seed, cell.first, cell.second, strategy, 100);
                if (acc) overall.push_back(*acc);
            }
            if (overall.empty()) continue;
            const MeanSd ms = mean_sd(overall);
            c["overall_" + strategy] = {{"mean", ms.mean}, {"sd", ms.sd}, {"n", ms.n}};
        }
        std::vector<double> gaps;
        for (std::uint64_t seed : seeds) {
            const auto gap = seed_gap(report.rows, seed, cell.first, cell.second);
            if (gap) gaps.push_back(*gap);
        }
        if (!gaps.empty()) {
            const MeanSd ms = mean_sd(gaps);
            c["gap_top_minus_bottom"] = {{"mean", ms.mean}, {"sd", ms.sd}, {"n", ms.n}};
        }
        cells_json.push_back(std::move(c));
    }
    j["cells"] = std::move(cells_json);

    nlohmann::ordered_json summaries = nlohmann::ordered_json::array();
    for (const SeedSummary& s : report.summaries) {
        nlohmann::ordered_json e;
        e["run_id"] = s.run_id;
        e["seed"] = s.seed;
        e["alpha"] = s.alpha;
        e["pretrain_steps"] = s.pretrain_steps;
        e["strategy"] = s.strategy;
        e["overall"] = s.overall;
        e["pretrain_acc"] = s.pretrain_acc;
        e["memorization_ok"] = s.memorization_ok;
        e["final_subject_att"] = s.final_subject_att;
        e["final_relation_att"] = s.final_relation_att;
        e["peak_eval_acc"] = s.peak_eval_acc;
        e["final_eval_acc"] = s.final_eval_acc;
        e["kq_update_peak"] = s.kq_update_peak;
        e["kq_update_first10"] = s.kq_update_first10;
        summaries.push_back(std::move(e));
    }
    j["seed_summaries"] = std::move(summaries);

    if (!report.verdicts.empty()) {
        nlohmann::ordered_json verdicts = nlohmann::ordered_json::array();
        for (const TheoremVerdict& verdict : report.verdicts) verdicts.push_back(verdict.to_json());
        j["verdicts"] = std::move(verdicts);
    }
    return j;
}

}  // namespace factlab
