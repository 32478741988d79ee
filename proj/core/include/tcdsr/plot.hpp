#pragma once

// Static SVG bar charts for experiment reports.

#include <string>
#include <vector>

namespace tcdsr::plot {

struct Series {
  std::string name;
  std::vector<double> values;  // one per category
};

/// Grouped bar chart: one group per category, one bar per series.
/// Throws std::invalid_argument when a series length differs from the
/// category count.
std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<Series>& series, const std::string& y_label);

}  // namespace tcdsr::plot
