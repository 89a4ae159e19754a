#include "svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace rapm::cli {

namespace {

constexpr double kWidth = 720, kHeight = 420;
constexpr double kLeft = 70, kRight = 690, kTop = 50, kBottom = 370;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b"};

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace

std::string render_line_chart(const std::string& title, const std::string& x_label,
                              const std::string& y_label,
                              const std::vector<Series>& series) {
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size()) throw std::invalid_argument("series length mismatch");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    }
    if (!(xmin <= xmax)) throw std::invalid_argument("no finite points to plot");
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;

    auto px = [&](double x) { return kLeft + (x - xmin) / (xmax - xmin) * (kRight - kLeft); };
    auto py = [&](double y) {
        return kBottom - (y - ymin) / (ymax - ymin) * (kBottom - kTop);
    };

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " + num(kWidth) +
           " " + num(kHeight) + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<text x=\"" + num(kWidth / 2) + "\" y=\"28\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"16\">" + title + "</text>\n";

    // Axes with 5 ticks per side.
    out += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(kBottom) + "\" x2=\"" +
           num(kRight) + "\" y2=\"" + num(kBottom) + "\" stroke=\"black\"/>\n";
    out += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(kTop) + "\" x2=\"" + num(kLeft) +
           "\" y2=\"" + num(kBottom) + "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        double fx = xmin + (xmax - xmin) * i / 4;
        double fy = ymin + (ymax - ymin) * i / 4;
        out += "<text x=\"" + num(px(fx)) + "\" y=\"" + num(kBottom + 20) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
               num(fx) + "</text>\n";
        out += "<text x=\"" + num(kLeft - 8) + "\" y=\"" + num(py(fy) + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
               num(fy) + "</text>\n";
        if (i > 0) {
            out += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(py(fy)) + "\" x2=\"" +
                   num(kRight) + "\" y2=\"" + num(py(fy)) +
                   "\" stroke=\"#dddddd\" stroke-width=\"0.5\"/>\n";
        }
    }
    out += "<text x=\"" + num((kLeft + kRight) / 2) + "\" y=\"" + num(kHeight - 10) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" +
           x_label + "</text>\n";
    out += "<text x=\"18\" y=\"" + num((kTop + kBottom) / 2) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
           "transform=\"rotate(-90 18 " + num((kTop + kBottom) / 2) + ")\">" +
           y_label + "</text>\n";

    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = kPalette[s % (sizeof(kPalette) / sizeof(kPalette[0]))];
        std::string pts;
        for (std::size_t i = 0; i < series[s].x.size(); ++i) {
            if (!std::isfinite(series[s].x[i]) || !std::isfinite(series[s].y[i])) continue;
            pts += num(px(series[s].x[i])) + "," + num(py(series[s].y[i])) + " ";
        }
        out += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
               "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
        out += "<text x=\"" + num(kRight - 6) + "\" y=\"" +
               num(kTop + 16 + 16 * static_cast<double>(s)) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" "
               "fill=\"" + color + "\">" + series[s].label + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

void write_svg(const std::string& path, const std::string& svg) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << svg;
}

}  // namespace rapm::cli
