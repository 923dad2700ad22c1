#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "protego/core.hpp"

namespace protego::plot {

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

/// Minimal raster charts written as PNG. No text is drawn; the caller keeps
/// labels and data in the accompanying report.
Image line_chart(const std::vector<Series>& series, int width = 480, int height = 320);
Image bar_chart(const std::vector<double>& values, int width = 480, int height = 320);

/// Series colour used by line_chart (cycles).
std::vector<double> palette(std::size_t index);

void write_line_chart(const std::filesystem::path& path, const std::vector<Series>& series);
void write_bar_chart(const std::filesystem::path& path, const std::vector<double>& values);

}  // namespace protego::plot
