#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace nicon {

struct Polyline {
  std::vector<double> x;
  std::vector<double> y;
  std::string color = "#1f77b4";
};

struct PlotFrame {
  double x_min = -1.0;
  double x_max = 1.0;
  double y_min = -1.0;
  double y_max = 1.0;
  std::string x_label;
  std::string y_label;
  std::string title;
};

/// Polylines clipped to the frame, with axes through the origin and a
/// border. Coordinates are printed with fixed precision so output is
/// byte-stable.
std::string render_svg(const std::vector<Polyline>& lines, const PlotFrame& frame);
void write_svg(const std::vector<Polyline>& lines, const PlotFrame& frame,
               const std::filesystem::path& path);

}  // namespace nicon
