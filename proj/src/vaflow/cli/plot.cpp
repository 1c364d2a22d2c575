// SPDX-License-Identifier: Apache-2.0
#include "vaflow/cli/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace vaflow::cli {

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr int kMarginLeft = 60;
constexpr int kMarginRight = 20;
constexpr int kMarginTop = 48;
constexpr int kMarginBottom = 56;

const char* kPalette[] = {"#3366cc", "#dc3912", "#ff9900", "#109618", "#990099", "#0099c6"};

std::string fmt(double v) {
    std::ostringstream out;
    if (std::abs(v) >= 1000 || (std::abs(v) < 0.01 && v != 0.0))
        out << std::scientific;
    out.precision(3);
    out << v;
    return out.str();
}

void open_svg(std::ostream& out, const std::string& title) {
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
        << kHeight << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << kWidth / 2 << "\" y=\"28\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"18\">" << title << "</text>\n";
}

// Left axis with four ticks from 0 (or the data floor) to top.
void draw_axis(std::ostream& out, double lo, double hi) {
    int x = kMarginLeft;
    int y0 = kHeight - kMarginBottom;
    int y1 = kMarginTop;
    out << "<line x1=\"" << x << "\" y1=\"" << y0 << "\" x2=\"" << x << "\" y2=\"" << y1
        << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << x << "\" y1=\"" << y0 << "\" x2=\"" << kWidth - kMarginRight
        << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        double v = lo + (hi - lo) * i / 4.0;
        int y = y0 - static_cast<int>((y0 - y1) * static_cast<double>(i) / 4.0);
        out << "<line x1=\"" << x - 4 << "\" y1=\"" << y << "\" x2=\"" << x << "\" y2=\"" << y
            << "\" stroke=\"black\"/>\n";
        out << "<text x=\"" << x - 8 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\" "
            << "font-family=\"sans-serif\" font-size=\"11\">" << fmt(v) << "</text>\n";
    }
}

}  // namespace

void write_bar_chart(const std::string& path, const std::string& title,
                     const std::vector<std::string>& labels, const std::vector<double>& values) {
    if (labels.size() != values.size() || labels.empty())
        throw std::invalid_argument("write_bar_chart: need one label per value");
    double hi = *std::max_element(values.begin(), values.end());
    double lo = std::min(0.0, *std::min_element(values.begin(), values.end()));
    if (hi <= lo) hi = lo + 1.0;

    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    open_svg(out, title);
    draw_axis(out, lo, hi);

    int plot_w = kWidth - kMarginLeft - kMarginRight;
    int y0 = kHeight - kMarginBottom;
    int span = y0 - kMarginTop;
    double slot = static_cast<double>(plot_w) / labels.size();
    double bar = slot * 0.6;
    for (size_t i = 0; i < values.size(); ++i) {
        double frac = (values[i] - lo) / (hi - lo);
        int h = static_cast<int>(span * std::clamp(frac, 0.0, 1.0));
        double x = kMarginLeft + slot * i + (slot - bar) / 2;
        out << "<rect x=\"" << x << "\" y=\"" << y0 - h << "\" width=\"" << bar << "\" height=\""
            << h << "\" fill=\"" << kPalette[i % 6] << "\"/>\n";
        out << "<text x=\"" << x + bar / 2 << "\" y=\"" << y0 - h - 6
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
            << fmt(values[i]) << "</text>\n";
        out << "<text x=\"" << x + bar / 2 << "\" y=\"" << y0 + 16
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
            << labels[i] << "</text>\n";
    }
    out << "</svg>\n";
}

void write_line_chart(const std::string& path, const std::string& title,
                      const std::vector<Series>& series) {
    if (series.empty()) throw std::invalid_argument("write_line_chart: need at least one series");
    double lo = 0.0, hi = 1.0;
    bool first = true;
    size_t longest = 0;
    for (const Series& s : series) {
        longest = std::max(longest, s.values.size());
        for (double v : s.values) {
            if (first) {
                lo = hi = v;
                first = false;
            }
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (longest < 1) throw std::invalid_argument("write_line_chart: empty series");
    if (hi <= lo) hi = lo + 1.0;

    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    open_svg(out, title);
    draw_axis(out, lo, hi);

    int plot_w = kWidth - kMarginLeft - kMarginRight;
    int y0 = kHeight - kMarginBottom;
    int span = y0 - kMarginTop;
    for (size_t s = 0; s < series.size(); ++s) {
        const std::vector<double>& v = series[s].values;
        if (v.empty()) continue;
        out << "<polyline fill=\"none\" stroke=\"" << kPalette[s % 6]
            << "\" stroke-width=\"2\" points=\"";
        for (size_t i = 0; i < v.size(); ++i) {
            double x = kMarginLeft +
                       (longest > 1 ? plot_w * static_cast<double>(i) / (longest - 1) : 0.0);
            double y = y0 - span * (v[i] - lo) / (hi - lo);
            out << x << "," << y << " ";
        }
        out << "\"/>\n";
        out << "<text x=\"" << kWidth - kMarginRight - 8 << "\" y=\""
            << kMarginTop + 16 + 16 * s << "\" text-anchor=\"end\" "
            << "font-family=\"sans-serif\" font-size=\"12\" fill=\"" << kPalette[s % 6] << "\">"
            << series[s].name << "</text>\n";
    }
    out << "</svg>\n";
}

}  // namespace vaflow::cli
