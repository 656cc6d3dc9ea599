#pragma once

#include "ldmorph/io.hpp"
#include "ldmorph/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace ldmorph::render {

/// R and G encode u_x and u_y around mid-grey, B the magnitude; `scale` is
/// the displacement mapped to full intensity (0: the field's own maximum).
io::RgbImage field_rgb(const DisplacementField2D& field, double scale = 0.0);

/// Black lattice lines on white: a pixel is on a vertical (horizontal) line
/// when the deformed coordinate x + u_x (y + u_y) crosses a multiple of
/// `spacing` between it and its left (upper) neighbour.
io::RgbImage field_grid(const DisplacementField2D& field, int64_t spacing = 8);

/// Diverging map of a scalar raster; values <= 0 are drawn red.
io::RgbImage jacobian_rgb(const torch::Tensor& det);

struct Series {
    std::string name;
    std::vector<double> x, y;
};

/// Minimal static SVG line chart.
void write_line_plot(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                     const std::string& y_label, const std::vector<Series>& series);

} // namespace ldmorph::render
