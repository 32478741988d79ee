#include "tcdsr/plot.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace tcdsr::plot {

namespace {

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

constexpr std::array<const char*, 6> kColors{"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"};

}  // namespace

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<Series>& series, const std::string& y_label) {
  for (const auto& s : series) {
    if (s.values.size() != categories.size()) {
      throw std::invalid_argument("bar chart: series " + s.name + " does not match the category count");
    }
  }
  const double left = 70, right = 150, top = 40, bottom = 60;
  const double group_w = std::max(60.0, 24.0 * static_cast<double>(series.size()) + 20.0);
  const double plot_w = group_w * static_cast<double>(std::max<std::size_t>(categories.size(), 1));
  const double plot_h = 260;
  const double width = left + plot_w + right;
  const double height = top + plot_h + bottom;

  double vmax = 0;
  for (const auto& s : series) {
    for (double v : s.values) {
      if (std::isfinite(v)) vmax = std::max(vmax, v);
    }
  }
  if (vmax <= 0) vmax = 1;
  const double step = std::pow(10.0, std::floor(std::log10(vmax)));
  vmax = std::ceil(vmax / step) * step;

  std::string svg = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0:.0f}\" height=\"{1:.0f}\" viewBox=\"0 0 {0:.0f} {1:.0f}\" "
      "font-family=\"sans-serif\" font-size=\"11\">\n",
      width, height);
  svg += fmt::format("<rect width=\"{:.0f}\" height=\"{:.0f}\" fill=\"white\"/>\n", width, height);
  svg += fmt::format("<text x=\"{:.1f}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", width / 2,
                     escape(title));
  for (int t = 0; t <= 4; ++t) {
    const double v = vmax * t / 4.0;
    const double y = top + plot_h - plot_h * t / 4.0;
    svg += fmt::format("<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"#ddd\"/>\n", left, y,
                       left + plot_w, y);
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.3g}</text>\n", left - 6, y + 4, v);
  }
  svg += fmt::format(
      "<text transform=\"translate(18 {:.1f}) rotate(-90)\" text-anchor=\"middle\">{}</text>\n", top + plot_h / 2,
      escape(y_label));
  const double bar_w = (group_w - 20.0) / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double gx = left + group_w * static_cast<double>(c) + 10.0;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = std::isfinite(series[s].values[c]) ? std::max(0.0, series[s].values[c]) : 0.0;
      const double h = plot_h * v / vmax;
      svg += fmt::format(
          "<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"{}\"><title>{}: {:.4f}</title></rect>\n",
          gx + bar_w * static_cast<double>(s), top + plot_h - h, bar_w - 2, h, kColors[s % kColors.size()],
          escape(series[s].name), series[s].values[c]);
    }
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n", gx + (group_w - 20) / 2,
                       top + plot_h + 18, escape(categories[c]));
  }
  svg += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\" stroke=\"black\"/>\n", left,
                     top + plot_h, left + plot_w);
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double y = top + 10 + 18 * static_cast<double>(s);
    svg += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n", left + plot_w + 16,
                       y, kColors[s % kColors.size()]);
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\">{}</text>\n", left + plot_w + 34, y + 10,
                       escape(series[s].name));
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace tcdsr::plot
