#pragma once

#include <string>
#include <vector>

namespace rapm::cli {

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

// Fixed-viewbox polyline chart; several series overlay on one axis pair.
// Output is fully determined by the inputs (no timestamps, no randomness).
std::string render_line_chart(const std::string& title, const std::string& x_label,
                              const std::string& y_label,
                              const std::vector<Series>& series);

void write_svg(const std::string& path, const std::string& svg);

}  // namespace rapm::cli
