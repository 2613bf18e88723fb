#include "nicon/svg.hpp"

#include <algorithm>
#include <fstream>

#include <fmt/format.h>

#include "nicon/errors.hpp"

namespace nicon {
namespace {

constexpr double kWidth = 480.0;
constexpr double kHeight = 480.0;
constexpr double kMargin = 48.0;

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string render_svg(const std::vector<Polyline>& lines, const PlotFrame& frame) {
  if (!(frame.x_max > frame.x_min) || !(frame.y_max > frame.y_min)) {
    throw ConfigError("plot frame must have positive extent");
  }
  const double plot_w = kWidth - 2 * kMargin;
  const double plot_h = kHeight - 2 * kMargin;
  auto px = [&](double x) {
    return kMargin + (std::clamp(x, frame.x_min, frame.x_max) - frame.x_min) /
                         (frame.x_max - frame.x_min) * plot_w;
  };
  auto py = [&](double y) {
    return kHeight - kMargin - (std::clamp(y, frame.y_min, frame.y_max) - frame.y_min) /
                                   (frame.y_max - frame.y_min) * plot_h;
  };

  std::string svg = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" "
      "viewBox=\"0 0 {0} {1}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      kWidth, kHeight);
  svg += fmt::format(
      "<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"none\" "
      "stroke=\"black\"/>\n",
      kMargin, kMargin, plot_w, plot_h);
  if (frame.x_min < 0.0 && frame.x_max > 0.0) {
    svg += fmt::format(
        "<line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{0:.2f}\" y2=\"{2:.2f}\" stroke=\"#999\"/>\n",
        px(0.0), py(frame.y_min), py(frame.y_max));
  }
  if (frame.y_min < 0.0 && frame.y_max > 0.0) {
    svg += fmt::format(
        "<line x1=\"{0:.2f}\" y1=\"{2:.2f}\" x2=\"{1:.2f}\" y2=\"{2:.2f}\" stroke=\"#999\"/>\n",
        px(frame.x_min), px(frame.x_max), py(0.0));
  }
  for (const auto& line : lines) {
    const std::size_t count = std::min(line.x.size(), line.y.size());
    if (count == 0) continue;
    std::string points;
    for (std::size_t k = 0; k < count; ++k) {
      if (k > 0) points += ' ';
      points += fmt::format("{:.2f},{:.2f}", px(line.x[k]), py(line.y[k]));
    }
    svg += fmt::format(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1\"/>\n", points,
        escape(line.color));
    svg += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"2\" fill=\"{}\"/>\n",
                       px(line.x[0]), py(line.y[0]), escape(line.color));
  }
  svg += fmt::format(
      "<text x=\"{:.2f}\" y=\"{:.2f}\" font-size=\"12\" text-anchor=\"middle\">{} "
      "[{:g}, {:g}]</text>\n",
      kWidth / 2, kHeight - 12.0, escape(frame.x_label), frame.x_min, frame.x_max);
  svg += fmt::format(
      "<text x=\"14\" y=\"{:.2f}\" font-size=\"12\" text-anchor=\"middle\" "
      "transform=\"rotate(-90 14 {:.2f})\">{} [{:g}, {:g}]</text>\n",
      kHeight / 2, kHeight / 2, escape(frame.y_label), frame.y_min, frame.y_max);
  if (!frame.title.empty()) {
    svg += fmt::format("<text x=\"{:.2f}\" y=\"28\" font-size=\"14\" "
                       "text-anchor=\"middle\">{}</text>\n",
                       kWidth / 2, escape(frame.title));
  }
  svg += "</svg>\n";
  return svg;
}

void write_svg(const std::vector<Polyline>& lines, const PlotFrame& frame,
               const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingFileError(path.string());
  out << render_svg(lines, frame);
}

}  // namespace nicon
