// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace vaflow::cli {

// One named series of y values; line charts draw points at x = 0, 1, ...
struct Series {
    std::string name;
    std::vector<double> values;
};

// Vertical bar chart with one bar per label, values printed above the bars.
void write_bar_chart(const std::string& path, const std::string& title,
                     const std::vector<std::string>& labels, const std::vector<double>& values);

// Line chart of one or more series over their index, with a legend.
void write_line_chart(const std::string& path, const std::string& title,
                      const std::vector<Series>& series);

}  // namespace vaflow::cli
