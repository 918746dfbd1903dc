#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace bdl::app {

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct LinePlot {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  std::vector<PlotSeries> series;
};

// Standalone SVG line chart. Points that are non-finite, or nonpositive on a
// log axis, are dropped and break the line.
std::string render_svg(const LinePlot& plot);
void write_svg(const std::filesystem::path& path, const LinePlot& plot);

}  // namespace bdl::app
