#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <factlab/format.hpp>

namespace factlab {

struct SvgSeries {
    std::string label;
    std::string color;
    std::vector<std::pair<double, double>> points;  // NaN points are skipped
};

struct SvgOptions {
    int width = 640;
    int height = 400;
    std::string title;
    std::string x_label;
    std::string y_label;
};

// Minimal line-chart writer: axes with tick labels, grid, one polyline per
// series and a legend. Output bytes are deterministic for a given input.
inline void write_line_chart(std::ostream& os, const SvgOptions& opt, std::span<const SvgSeries> series) {
    const double ml = 62, mr = 16, mt = 34, mb = 46;  // margins
    const double pw = opt.width - ml - mr;
    const double ph = opt.height - mt - mb;

    double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo;
    double y_lo = x_lo, y_hi = -x_lo;
    for (const SvgSeries& s : series) {
        for (const auto& [x, y] : s.points) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            x_lo = std::min(x_lo, x);
            x_hi = std::max(x_hi, x);
            y_lo = std::min(y_lo, y);
            y_hi = std::max(y_hi, y);
        }
    }
    if (!(x_lo < x_hi)) {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    if (!(y_lo < y_hi)) {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    if (!std::isfinite(x_lo)) {  // no finite points at all
        x_lo = 0.0; x_hi = 1.0; y_lo = 0.0; y_hi = 1.0;
    }
    const double y_pad = 0.05 * (y_hi - y_lo);
    y_lo -= y_pad;
    y_hi += y_pad;

    const auto px = [&](double x) { return ml + (x - x_lo) / (x_hi - x_lo) * pw; };
    const auto py = [&](double y) { return mt + (y_hi - y) / (y_hi - y_lo) * ph; };

    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.width << "\" height=\""
       << opt.height << "\" viewBox=\"0 0 " << opt.width << ' ' << opt.height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << opt.width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\""
       << " font-size=\"14\">" << opt.title << "</text>\n";

    // grid and ticks
    const int ticks = 5;
    os << "<g font-family=\"sans-serif\" font-size=\"10\" fill=\"#444\">\n";
    for (int i = 0; i <= ticks; ++i) {
        const double fx = x_lo + (x_hi - x_lo) * i / ticks;
        const double fy = y_lo + (y_hi - y_lo) * i / ticks;
        os << "<line x1=\"" << format_double(px(fx)) << "\" y1=\"" << format_double(mt) << "\" x2=\""
           << format_double(px(fx)) << "\" y2=\"" << format_double(mt + ph)
           << "\" stroke=\"#ddd\" stroke-width=\"1\"/>\n";
        os << "<line x1=\"" << format_double(ml) << "\" y1=\"" << format_double(py(fy)) << "\" x2=\""
           << format_double(ml + pw) << "\" y2=\"" << format_double(py(fy))
           << "\" stroke=\"#ddd\" stroke-width=\"1\"/>\n";
        os << "<text x=\"" << format_double(px(fx)) << "\" y=\"" << format_double(mt + ph + 14)
           << "\" text-anchor=\"middle\">" << format_double(fx) << "</text>\n";
        os << "<text x=\"" << format_double(ml - 6) << "\" y=\"" << format_double(py(fy) + 3)
           << "\" text-anchor=\"end\">" << format_double(fy) << "</text>\n";
    }
    os << "</g>\n";

    // axes
    os << "<line x1=\"" << format_double(ml) << "\" y1=\"" << format_double(mt + ph) << "\" x2=\""
       << format_double(ml + pw) << "\" y2=\"" << format_double(mt + ph)
       << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    os << "<line x1=\"" << format_double(ml) << "\" y1=\"" << format_double(mt) << "\" x2=\""
       << format_double(ml) << "\" y2=\"" << format_double(mt + ph)
       << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    os << "<text x=\"" << opt.width / 2 << "\" y=\"" << opt.height - 8
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << opt.x_label
       << "</text>\n";
    os << "<text x=\"14\" y=\"" << opt.height / 2
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 "
       << opt.height / 2 << ")\">" << opt.y_label << "</text>\n";

    // series
    for (const SvgSeries& s : series) {
        os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
        bool first = true;
        for (const auto& [x, y] : s.points) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            if (!first) os << ' ';
            os << format_double(px(x)) << ',' << format_double(py(y));
            first = false;
        }
        os << "\"/>\n";
    }

    // legend
    os << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
    double ly = mt + 8;
    for (const SvgSeries& s : series) {
        os << "<line x1=\"" << format_double(ml + pw - 120) << "\" y1=\"" << format_double(ly)
           << "\" x2=\"" << format_double(ml + pw - 100) << "\" y2=\"" << format_double(ly)
           << "\" stroke=\"" << s.color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << format_double(ml + pw - 94) << "\" y=\"" << format_double(ly + 4) << "\">"
           << s.label << "</text>\n";
        ly += 16;
    }
    os << "</g>\n</svg>\n";
}

inline const char* series_color(std::size_t i) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
    return palette[i % (sizeof(palette) / sizeof(palette[0]))];
}

}  // namespace factlab
